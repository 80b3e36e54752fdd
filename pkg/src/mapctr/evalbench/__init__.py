"""Metrics and synthetic data; the pretraining benchmark lives in ``mapctr.evalbench.bench``."""

from .metrics import MetricError, MetricReport, auc, logloss, midranks, pairwise_auc, report
from .synth import (
    Rule,
    SynthSpec,
    bayes_scores,
    generate_synth,
    latent_structure,
    planted_spec,
    true_logit,
)

__all__ = [
    "MetricError", "MetricReport", "auc", "logloss", "midranks", "pairwise_auc", "report",
    "Rule", "SynthSpec", "bayes_scores", "generate_synth", "latent_structure", "planted_spec",
    "true_logit",
]
