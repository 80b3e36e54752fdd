"""Multi-field categorical data model.

A :class:`FeatureMap` lays every field's categories out contiguously in one
global index space.  Local index 0 of each field is the ``<Unknown>`` dummy and
one extra slot past the end (``mask_index``) is reserved for the shared
``<MASK>`` token, so embedding tables have ``M + 1`` rows.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

UNKNOWN = "<Unknown>"
MISSING = "NA"

CATEGORICAL = "categorical"
NUMERIC = "numeric-log-discretized"
TIMESTAMP = "timestamp-expand"
DROP = "drop"
LABEL = "label"
KINDS = (CATEGORICAL, NUMERIC, TIMESTAMP, DROP, LABEL)

TIMESTAMP_PARTS = ("weekday", "day_of_month", "hour_of_day", "is_weekend")

SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST = 0, 1, 2
SPLIT_NAMES = {"train": SPLIT_TRAIN, "val": SPLIT_VAL, "test": SPLIT_TEST}

DATA_MAGIC = b"MAPDATA1"


class DataError(ValueError):
    """Raised for malformed input rows, schemas or dataset files."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class FieldSchema:
    name: str
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"unknown field kind {self.kind!r} for column {self.name!r}")


@dataclass
class CsvSchema:
    """Column schema plus the CSV dialect it applies to."""

    columns: list[FieldSchema]
    delimiter: str = ","
    header: bool = True

    @property
    def label_column(self) -> int:
        idx = [i for i, c in enumerate(self.columns) if c.kind == LABEL]
        if len(idx) != 1:
            raise DataError(f"schema needs exactly one label column, found {len(idx)}")
        return idx[0]

    def derived_field_names(self) -> list[str]:
        names = []
        for col in self.columns:
            if col.kind in (CATEGORICAL, NUMERIC):
                names.append(col.name)
            elif col.kind == TIMESTAMP:
                names.extend(f"{col.name}_{part}" for part in TIMESTAMP_PARTS)
        return names


def load_schema(doc: dict | str | Path, header_row: Sequence[str] | None = None) -> CsvSchema:
    """Parse a schema document.

    ``columns`` maps column name (or position, as a string) to kind.  When the
    CSV has a header, names are resolved against it and every header column
    needs exactly one entry.
    """
    if not isinstance(doc, dict):
        doc = json.loads(Path(doc).read_text())
    delimiter = doc.get("delimiter", ",")
    if delimiter in ("tab", "\\t"):
        delimiter = "\t"
    header = bool(doc.get("header", True))
    mapping = doc.get("columns")
    if not isinstance(mapping, dict) or not mapping:
        raise DataError("schema must contain a non-empty 'columns' mapping")
    if header_row is not None:
        unknown = set(mapping) - set(header_row) - {str(i) for i in range(len(header_row))}
        if unknown:
            raise DataError(f"schema names columns absent from the header: {sorted(unknown)}")
        cols = []
        for pos, name in enumerate(header_row):
            kind = mapping.get(name, mapping.get(str(pos)))
            if kind is None:
                raise DataError(f"column {name!r} has no schema entry")
            cols.append(FieldSchema(name, kind))
    else:
        try:
            positions = sorted(int(k) for k in mapping)
        except ValueError as exc:
            raise DataError("headerless schema must key columns by position") from exc
        if positions != list(range(len(positions))):
            raise DataError("headerless schema positions must be 0..n-1 without gaps")
        cols = [FieldSchema(f"c{p}", mapping[str(p)]) for p in positions]
    schema = CsvSchema(cols, delimiter=delimiter, header=header)
    schema.label_column  # validates
    return schema


def discretize_numeric(v) -> str:
    """Map a raw numeric value to a categorical key.

    Values above 2 are bucketed by ``floor(ln(v) ** 2)``; smaller values keep
    their integer part.  Missing values map to ``"NA"``.
    """
    if v is None:
        return MISSING
    if isinstance(v, str):
        s = v.strip()
        if s == "" or s.upper() in ("NA", "NAN", "NULL"):
            return MISSING
        try:
            v = float(s)
        except ValueError as exc:
            raise DataError(f"cannot parse numeric value {v!r}") from exc
    v = float(v)
    if math.isnan(v):
        return MISSING
    if v > 2:
        return str(int(math.floor(math.log(v) ** 2)))
    return str(int(v))


def expand_timestamp(raw: str) -> list[str]:
    """weekday, day_of_month, hour_of_day, is_weekend for a YYMMDDHH or ISO stamp."""
    s = raw.strip()
    try:
        if len(s) == 8 and s.isdigit():
            ts = datetime.strptime(s, "%y%m%d%H")
        else:
            ts = datetime.fromisoformat(s)
    except ValueError as exc:
        raise DataError(f"unparseable timestamp {raw!r}") from exc
    wd = ts.weekday()
    return [str(wd), str(ts.day), str(ts.hour), str(int(wd >= 5))]


def split_of_rows(n: int) -> np.ndarray:
    """Deterministic 8:1:1 train/val/test assignment by hashed row index."""
    z = np.arange(n, dtype=np.uint64)
    with np.errstate(over="ignore"):
        # splitmix64 finalizer
        z = z + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    bucket = (z % np.uint64(10)).astype(np.int64)
    out = np.full(n, SPLIT_TRAIN, dtype=np.uint8)
    out[bucket == 8] = SPLIT_VAL
    out[bucket == 9] = SPLIT_TEST
    return out


@dataclass(eq=False)
class FeatureMap:
    offsets: np.ndarray
    cardinalities: np.ndarray
    frequencies: np.ndarray
    field_names: list[str] = field(default_factory=list)
    # vocab[f][local] -> category key; optional, absent for synthetic data
    vocab: list[list[str]] | None = None

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.int64)
        self.cardinalities = np.asarray(self.cardinalities, dtype=np.int64)
        self.frequencies = np.asarray(self.frequencies, dtype=np.int64)
        if not self.field_names:
            self.field_names = [f"f{i}" for i in range(len(self.offsets))]
        self.validate()
        self._index = None

    @classmethod
    def from_cardinalities(cls, cards: Sequence[int], frequencies=None, **kw) -> "FeatureMap":
        cards = np.asarray(cards, dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(cards)[:-1]])
        if frequencies is None:
            frequencies = np.zeros(int(cards.sum()), dtype=np.int64)
        return cls(offsets, cards, frequencies, **kw)

    def validate(self) -> None:
        F = len(self.offsets)
        if F == 0 or len(self.cardinalities) != F:
            raise DataError("feature map needs matching, non-empty offsets and cardinalities")
        if np.any(self.cardinalities < 1):
            raise DataError("every field needs at least its <Unknown> slot")
        expected = np.concatenate([[0], np.cumsum(self.cardinalities)[:-1]])
        if not np.array_equal(self.offsets, expected):
            raise DataError("field offsets are not contiguous")
        if len(self.frequencies) != self.global_size:
            raise DataError("frequency table length differs from the global size")
        if np.any(self.frequencies < 0):
            raise DataError("negative feature frequency")
        if len(self.field_names) != F:
            raise DataError("field name count differs from field count")

    @property
    def num_fields(self) -> int:
        return len(self.offsets)

    @property
    def global_size(self) -> int:
        return int(self.cardinalities.sum())

    @property
    def mask_index(self) -> int:
        return self.global_size

    def field_range(self, f: int) -> tuple[int, int]:
        lo = int(self.offsets[f])
        return lo, lo + int(self.cardinalities[f])

    def field_of(self, index) -> np.ndarray:
        return np.searchsorted(self.offsets, index, side="right") - 1

    def in_range(self, x: np.ndarray) -> bool:
        x = np.asarray(x, dtype=np.int64)
        lo = self.offsets[None, :]
        return bool(np.all((x >= lo) & (x < lo + self.cardinalities[None, :])))

    def encode(self, keys: Sequence[str]) -> np.ndarray:
        """Global indices for one row of derived category keys."""
        if self.vocab is None:
            raise DataError("feature map carries no vocabulary")
        if self._index is None:
            self._index = [{k: i for i, k in enumerate(v)} for v in self.vocab]
        return np.array(
            [self.offsets[f] + self._index[f].get(k, 0) for f, k in enumerate(keys)],
            dtype=np.int64,
        )

    def decode(self, x: Sequence[int]) -> list[str]:
        if self.vocab is None:
            raise DataError("feature map carries no vocabulary")
        return [self.vocab[f][int(x[f]) - int(self.offsets[f])] for f in range(self.num_fields)]

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.offsets, self.cardinalities, self.frequencies):
            h.update(np.ascontiguousarray(arr, dtype="<i8").tobytes())
        return h.hexdigest()

    def to_json(self) -> dict:
        return {
            "field_names": list(self.field_names),
            "cardinalities": self.cardinalities.tolist(),
            "frequencies": self.frequencies.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "FeatureMap":
        return cls.from_cardinalities(
            doc["cardinalities"], doc["frequencies"], field_names=list(doc["field_names"])
        )


def _derive_keys(raw: list[str], schema: CsvSchema, line: int) -> tuple[list[str], int]:
    keys: list[str] = []
    label = None
    for col, value in zip(schema.columns, raw):
        try:
            if col.kind == CATEGORICAL:
                keys.append(value.strip() or MISSING)
            elif col.kind == NUMERIC:
                keys.append(discretize_numeric(value))
            elif col.kind == TIMESTAMP:
                keys.extend(expand_timestamp(value))
            elif col.kind == LABEL:
                label = int(float(value))
        except DataError as exc:
            raise DataError(f"column {col.name!r}: {exc}", line) from exc
        except ValueError as exc:
            raise DataError(f"column {col.name!r}: bad label {value!r}", line) from exc
    if label not in (0, 1):
        raise DataError(f"label must be 0 or 1, got {label!r}", line)
    return keys, label


def build_feature_map(
    rows: Iterable[Sequence[str]],
    schema: CsvSchema,
    min_count: int = 2,
    first_line: int = 1,
) -> tuple[FeatureMap, np.ndarray, np.ndarray, np.ndarray]:
    """Build the global feature map and encode every row.

    Category counts and the returned frequencies come from the training split
    only.  Returns ``(fmap, x, y, split)``.
    """
    if min_count < 1:
        raise DataError("min_count must be >= 1")
    ncols = len(schema.columns)
    derived, labels = [], []
    for i, raw in enumerate(rows):
        line = first_line + i
        if len(raw) != ncols:
            raise DataError(f"expected {ncols} columns, got {len(raw)}", line)
        keys, label = _derive_keys(list(raw), schema, line)
        derived.append(keys)
        labels.append(label)
    if not derived:
        raise DataError("no data rows")
    n = len(derived)
    names = schema.derived_field_names()
    F = len(names)
    split = split_of_rows(n)
    train = split == SPLIT_TRAIN

    counts: list[dict[str, int]] = [dict() for _ in range(F)]
    for keys, is_train in zip(derived, train):
        if not is_train:
            continue
        for f, k in enumerate(keys):
            counts[f][k] = counts[f].get(k, 0) + 1

    vocab = []
    for f in range(F):
        kept = sorted(
            (k for k, c in counts[f].items() if c >= min_count and k != UNKNOWN),
            key=lambda k: (-counts[f][k], k),
        )
        if not kept:
            raise DataError(f"field {names[f]!r} has no category with count >= {min_count}")
        vocab.append([UNKNOWN] + kept)

    cards = [len(v) for v in vocab]
    fmap = FeatureMap.from_cardinalities(cards, field_names=names, vocab=vocab)
    x = np.empty((n, F), dtype=np.uint32)
    for i, keys in enumerate(derived):
        x[i] = fmap.encode(keys)
    freq = np.bincount(x[train].ravel().astype(np.int64), minlength=fmap.global_size)
    fmap.frequencies = freq.astype(np.int64)
    return fmap, x, np.asarray(labels, dtype=np.uint8), split


def read_csv(path: str | Path, schema_doc: dict | str | Path, min_count: int = 2) -> "Dataset":
    path = Path(path)
    if not isinstance(schema_doc, dict):
        schema_doc = json.loads(Path(schema_doc).read_text())
    delim = schema_doc.get("delimiter", ",")
    delim = "\t" if delim in ("tab", "\\t") else delim
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delim)
        header = None
        first_line = 1
        if schema_doc.get("header", True):
            header = next(reader, None)
            if header is None:
                raise DataError("empty CSV file")
            first_line = 2
        schema = load_schema(schema_doc, header)
        fmap, x, y, split = build_feature_map(reader, schema, min_count, first_line)
    return Dataset(fmap, x, y, split)


@dataclass(eq=False)
class Dataset:
    fmap: FeatureMap
    x: np.ndarray
    y: np.ndarray
    split: np.ndarray

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.uint32)
        self.y = np.ascontiguousarray(self.y, dtype=np.uint8)
        self.split = np.ascontiguousarray(self.split, dtype=np.uint8)
        if self.x.ndim != 2 or self.x.shape[1] != self.fmap.num_fields:
            raise DataError(f"index matrix shape {self.x.shape} does not match F={self.fmap.num_fields}")
        if len(self.y) != len(self.x) or len(self.split) != len(self.x):
            raise DataError("rows, labels and split disagree in length")

    def __len__(self) -> int:
        return len(self.x)

    def rows(self, name: str) -> np.ndarray:
        return np.flatnonzero(self.split == SPLIT_NAMES[name])

    def subset(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.rows(name)
        return self.x[idx], self.y[idx]

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(dataset_to_bytes(self))

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        try:
            blob = Path(path).read_bytes()
        except OSError as exc:
            raise DataError(f"cannot read dataset {path}: {exc}") from exc
        return dataset_from_bytes(blob)


def _row_dtype(F: int) -> np.dtype:
    return np.dtype([("x", "<u4", (F,)), ("y", "u1")])


def dataset_to_bytes(ds: Dataset) -> bytes:
    fmap = ds.fmap
    F, n = fmap.num_fields, len(ds)
    buf = io.BytesIO()
    buf.write(DATA_MAGIC)
    buf.write(struct.pack("<IQQ", F, fmap.global_size, n))
    buf.write(fmap.offsets.astype("<u8").tobytes())
    buf.write(fmap.cardinalities.astype("<u8").tobytes())
    buf.write(fmap.frequencies.astype("<u8").tobytes())
    rec = np.empty(n, dtype=_row_dtype(F))
    rec["x"] = ds.x
    rec["y"] = ds.y
    buf.write(rec.tobytes())
    buf.write(b"SPLT")
    buf.write(ds.split.tobytes())
    meta = json.dumps({"field_names": fmap.field_names, "vocab": fmap.vocab}).encode()
    buf.write(b"META")
    buf.write(struct.pack("<Q", len(meta)))
    buf.write(meta)
    return buf.getvalue()


def dataset_from_bytes(blob: bytes) -> Dataset:
    if blob[:8] != DATA_MAGIC:
        raise DataError("not a MAPDATA1 dataset file")
    try:
        pos = 8
        F, M, n = struct.unpack_from("<IQQ", blob, pos)
        pos += struct.calcsize("<IQQ")
        offsets = np.frombuffer(blob, "<u8", F, pos).astype(np.int64)
        pos += 8 * F
        cards = np.frombuffer(blob, "<u8", F, pos).astype(np.int64)
        pos += 8 * F
        freq = np.frombuffer(blob, "<u8", M, pos).astype(np.int64)
        pos += 8 * M
        dt = _row_dtype(F)
        rec = np.frombuffer(blob, dt, n, pos)
        pos += dt.itemsize * n
        if blob[pos:pos + 4] != b"SPLT":
            raise DataError("dataset file lacks the split section")
        pos += 4
        split = np.frombuffer(blob, np.uint8, n, pos).copy()
        pos += n
        names, vocab = [], None
        if blob[pos:pos + 4] == b"META":
            (mlen,) = struct.unpack_from("<Q", blob, pos + 4)
            meta = json.loads(blob[pos + 12:pos + 12 + mlen].decode())
            names, vocab = meta.get("field_names") or [], meta.get("vocab")
    except (struct.error, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"truncated or corrupt dataset file: {exc}") from exc
    fmap = FeatureMap(offsets, cards, freq, field_names=names, vocab=vocab)
    if fmap.global_size != M:
        raise DataError("header M disagrees with cardinalities")
    return Dataset(fmap, rec["x"].copy(), rec["y"].copy(), split)


class FrequencySampler:
    """Alias-method sampler over one or more contiguous index segments.

    ``starts`` partitions ``[0, len(weights))`` into segments (one per field for
    field-scoped sampling, a single segment for global sampling).  Each draw
    names the segment it comes from.  A segment whose weights are all zero is
    treated as uniform.
    """

    def __init__(self, weights, starts=None):
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 1 or len(w) == 0 or np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be a non-empty vector of finite nonnegative values")
        starts = np.array([0] if starts is None else starts, dtype=np.int64)
        ends = np.append(starts[1:], len(w))
        if starts[0] != 0 or np.any(ends <= starts):
            raise ValueError("segments must tile the support with non-empty ranges")
        w = w.copy()
        for s, e in zip(starts, ends):
            if w[s:e].sum() == 0:
                w[s:e] = 1.0
        self.weights = w
        self.starts = starts
        self.sizes = ends - starts
        self.prob = np.empty(len(w))
        self.alias = np.empty(len(w), dtype=np.int64)
        for s, e in zip(starts, ends):
            self._build(s, e)
        # global running sum; used for exact draws with one index excluded
        self.cumulative = np.cumsum(w)

    @classmethod
    def for_fields(cls, fmap: FeatureMap, uniform: bool = False) -> "FrequencySampler":
        w = np.ones(fmap.global_size) if uniform else fmap.frequencies
        return cls(w, fmap.offsets)

    @classmethod
    def for_global(cls, fmap: FeatureMap, uniform: bool = False) -> "FrequencySampler":
        w = np.ones(fmap.global_size) if uniform else fmap.frequencies
        return cls(w)

    def _build(self, s: int, e: int) -> None:
        n = e - s
        scaled = self.weights[s:e] * (n / self.weights[s:e].sum())
        prob = np.ones(n)
        alias = np.arange(s, e)
        small = [i for i in range(n) if scaled[i] < 1.0]
        large = [i for i in range(n) if scaled[i] >= 1.0]
        scaled = scaled.tolist()
        while small and large:
            lo, hi = small.pop(), large.pop()
            prob[lo] = scaled[lo]
            alias[lo] = s + hi
            scaled[hi] = scaled[hi] + scaled[lo] - 1.0
            (small if scaled[hi] < 1.0 else large).append(hi)
        self.prob[s:e] = prob
        self.alias[s:e] = alias

    def probabilities(self, segment: int = 0) -> np.ndarray:
        s = self.starts[segment]
        w = self.weights[s:s + self.sizes[segment]]
        return w / w.sum()

    def draw(self, segments, rng: np.random.Generator, exclude=None) -> np.ndarray:
        """One draw per entry of ``segments``; ``exclude`` optionally forbids one index per draw."""
        seg = np.asarray(segments, dtype=np.int64)
        start, size = self.starts[seg], self.sizes[seg]
        col = start + rng.integers(0, size)
        keep = rng.random(seg.shape) < self.prob[col]
        out = np.where(keep, col, self.alias[col])
        if exclude is None:
            return out
        exclude = np.broadcast_to(np.asarray(exclude, dtype=np.int64), seg.shape)
        if np.any(size <= 1):
            raise ValueError("cannot exclude the only index of a size-1 support")
        hit = np.flatnonzero(out == exclude)
        if hit.size:
            out[hit] = self._draw_excluding(start[hit], size[hit], exclude[hit], rng)
        return out

    def _draw_excluding(self, start, size, exclude, rng) -> np.ndarray:
        # Exact draw from the renormalized law without the excluded index.
        # Called only for alias draws that hit the excluded index, which makes
        # the overall result distributed as w_j / (W - w_excl).
        cum = self.cumulative
        base = np.where(start > 0, cum[start - 1], 0.0)
        total = cum[start + size - 1] - base
        w_ex = self.weights[exclude]
        rest = total - w_ex
        u = rng.random(len(start))
        out = np.empty(len(start), dtype=np.int64)
        flat = rest <= 0
        if np.any(flat):
            # every other index has zero weight: fall back to uniform
            k = np.floor(u[flat] * (size[flat] - 1)).astype(np.int64)
            local_ex = exclude[flat] - start[flat]
            out[flat] = start[flat] + k + (k >= local_ex)
        ok = ~flat
        if np.any(ok):
            target = u[ok] * rest[ok]
            before = cum[exclude[ok]] - w_ex[ok] - base[ok]
            target = np.where(target >= before, target + w_ex[ok], target)
            j = np.searchsorted(cum, base[ok] + target, side="right")
            lo, hi = start[ok], start[ok] + size[ok] - 1
            j = np.clip(j, lo, hi)
            # guard against float ties landing on the excluded slot
            j = np.where(j == exclude[ok], np.where(j < hi, j + 1, j - 1), j)
            out[ok] = j
        return out


def sample_noise(sampler: FrequencySampler, k: int, exclude: int | None,
                 rng: np.random.Generator, segment: int = 0) -> np.ndarray:
    """``k`` independent draws from one segment, never equal to ``exclude``."""
    seg = np.full(k, segment, dtype=np.int64)
    return sampler.draw(seg, rng, exclude=exclude)
