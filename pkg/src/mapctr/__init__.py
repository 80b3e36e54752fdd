"""Model-agnostic self-supervised pretraining for multi-field categorical CTR data."""

__version__ = "0.1.0"
