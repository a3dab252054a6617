"""Field schema, the CSV record format and the synthetic CTR generator.

CSV layout (UTF-8, LF line endings)::

    u0..u12,s0..s2,a0..a7,ss0..ss1,type,day,label

``day`` (1..30) doubles as the single time-stamp feature.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import DataError, SchemaError, SpecError

__all__ = [
    "FieldSchema",
    "FIELD_SCHEMA",
    "Records",
    "load_records",
    "iter_records",
    "write_records",
    "split_by_day",
    "SyntheticSpec",
    "generate",
    "planted_auc",
]


@dataclass(frozen=True)
class FieldSchema:
    segments: tuple[tuple[str, str, int], ...] = (
        ("user", "u", 13),
        ("scene", "s", 3),
        ("ad", "a", 8),
        ("session", "ss", 2),
        ("type", "type", 1),
        ("time", "day", 1),
    )
    n_days: int = 30

    @property
    def segment_names(self) -> tuple[str, ...]:
        return tuple(s[0] for s in self.segments)

    def width(self, segment: str) -> int:
        for name, _, w in self.segments:
            if name == segment:
                return w
        raise SchemaError(f"unknown segment {segment!r}")

    @property
    def feature_columns(self) -> list[str]:
        """The hashed columns plus ``type``; ``day`` is stored separately."""
        cols = []
        for name, prefix, w in self.segments:
            if name in ("type", "time"):
                continue
            cols.extend(f"{prefix}{i}" for i in range(w))
        return cols + ["type"]

    @property
    def header(self) -> list[str]:
        return self.feature_columns + ["day", "label"]

    def column_slice(self, segment: str) -> slice:
        start = 0
        for name, _, w in self.segments:
            if name == segment:
                return slice(start, start + w)
            start += w
        raise SchemaError(f"unknown segment {segment!r}")


FIELD_SCHEMA = FieldSchema()
_N_FEATURES = len(FIELD_SCHEMA.feature_columns)  # 27 columns before day


@dataclass
class Records:
    """Columnar batch of records.

    ``features`` is (N, 27): 26 hashed ints then the type.  ``day`` holds the
    day index, which is also the time feature.
    """

    features: np.ndarray
    day: np.ndarray
    label: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.int64).reshape(-1, _N_FEATURES)
        self.day = np.asarray(self.day, dtype=np.int64).reshape(-1)
        self.label = np.asarray(self.label, dtype=np.int64).reshape(-1)
        if not (len(self.features) == len(self.day) == len(self.label)):
            raise SchemaError("features, day and label lengths differ")

    def __len__(self) -> int:
        return len(self.label)

    def segment(self, name: str) -> np.ndarray:
        if name == "time":
            return self.day[:, None]
        return self.features[:, FIELD_SCHEMA.column_slice(name)]

    @property
    def types(self) -> np.ndarray:
        return self.features[:, -1]

    def take(self, index) -> "Records":
        return Records(self.features[index], self.day[index], self.label[index])

    def with_types(self, types) -> "Records":
        feats = self.features.copy()
        feats[:, -1] = types
        return Records(feats, self.day.copy(), self.label.copy())

    def __eq__(self, other) -> bool:
        if not isinstance(other, Records):
            return NotImplemented
        return (np.array_equal(self.features, other.features)
                and np.array_equal(self.day, other.day)
                and np.array_equal(self.label, other.label))

    @classmethod
    def concat(cls, parts: list["Records"]) -> "Records":
        if not parts:
            return cls(np.zeros((0, _N_FEATURES), np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64))
        return cls(np.concatenate([p.features for p in parts]),
                   np.concatenate([p.day for p in parts]),
                   np.concatenate([p.label for p in parts]))


def _parse_row(row: list[str], lineno: int, n_days: int) -> tuple[list[int], int, int]:
    if len(row) != _N_FEATURES + 2:
        raise DataError(f"line {lineno}: expected {_N_FEATURES + 2} fields, got {len(row)}")
    try:
        values = [int(tok) for tok in row]
    except ValueError as exc:
        raise DataError(f"line {lineno}: non-integer token ({exc})") from None
    feats, day, label = values[:_N_FEATURES], values[-2], values[-1]
    if any(v < 0 for v in feats):
        raise DataError(f"line {lineno}: negative feature value")
    if label not in (0, 1):
        raise DataError(f"line {lineno}: label {label} outside {{0,1}}")
    if not 1 <= day <= n_days:
        raise DataError(f"line {lineno}: day {day} outside 1..{n_days}")
    return feats, day, label


def iter_records(path, chunk_size: int = 65536) -> Iterator[Records]:
    """Stream a CSV file as chunks of :class:`Records`."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != FIELD_SCHEMA.header:
            raise DataError(f"line 1: header does not match {','.join(FIELD_SCHEMA.header)}")
        feats, days, labels = [], [], []
        for row in reader:
            f, d, y = _parse_row(row, reader.line_num, FIELD_SCHEMA.n_days)
            feats.append(f)
            days.append(d)
            labels.append(y)
            if len(labels) == chunk_size:
                yield Records(np.array(feats), np.array(days), np.array(labels))
                feats, days, labels = [], [], []
        if labels:
            yield Records(np.array(feats), np.array(days), np.array(labels))


def load_records(path) -> Records:
    return Records.concat(list(iter_records(path)))


def write_records(records: Records, path) -> None:
    table = np.column_stack([records.features, records.day, records.label])
    buf = io.StringIO()
    buf.write(",".join(FIELD_SCHEMA.header) + "\n")
    np.savetxt(buf, table, fmt="%d", delimiter=",", newline="\n")
    Path(path).write_bytes(buf.getvalue().encode("utf-8"))


def split_by_day(records: Records, test_day: int | None = None) -> tuple[Records, Records]:
    """Days before ``test_day`` (default: the last day, 30) train; that day tests."""
    test_day = FIELD_SCHEMA.n_days if test_day is None else test_day
    if len(records) and (records.day.min() < 1 or records.day.max() > FIELD_SCHEMA.n_days):
        raise DataError(f"day index outside 1..{FIELD_SCHEMA.n_days}")
    is_test = records.day == test_day
    return records.take(~is_test), records.take(is_test)


# --------------------------------------------------------------------------
# synthetic data

_DEFAULT_CARDS = {
    "user": [100, 2, 2, 2, 5, 2, 12, 2, 25, 7, 2, 2, 3],
    "scene": [3, 2, 5],
    "ad": [150, 37, 12, 7, 2, 25, 2, 5],
    "session": [10, 6],
}
# relative weight of each column's latent effect on the click logit
_DEFAULT_WEIGHTS = {
    "user": [0.476, 0.179, 0.0, 0.238, 0.0, 0.119, 0.298, 0.0, 0.238, 0.0, 0.119, 0.0, 0.0],
    "scene": [0.179, 0.119, 0.238],
    "ad": [0.476, 0.298, 0.179, 0.0, 0.119, 0.179, 0.0, 0.0],
    "session": [0.179, 0.0],
}


@dataclass
class SyntheticSpec:
    n_records: int = 200_000
    n_days: int = 30
    num_types: int = 3
    mode: str = "planted"  # "planted" or "null"
    cardinalities: dict = field(default_factory=lambda: {k: list(v) for k, v in _DEFAULT_CARDS.items()})
    weights: dict = field(default_factory=lambda: {k: list(v) for k, v in _DEFAULT_WEIGHTS.items()})
    coef_scale: float = 1.0
    type_interaction: float = 0.536
    type_effect: float = 0.85
    day_drift: float = 0.2
    base_rate: float = 0.2
    hash_space: int = 2**31 - 1

    def validate(self) -> None:
        if self.mode not in ("planted", "null"):
            raise SpecError(f"mode must be 'planted' or 'null', got {self.mode!r}")
        if self.n_records < 0 or self.n_days != FIELD_SCHEMA.n_days:
            raise SpecError("n_records must be >= 0 and n_days must be 30")
        if self.num_types < 1:
            raise SpecError("num_types must be positive")
        if not 0.0 < self.base_rate < 1.0:
            raise SpecError("base_rate must lie in (0, 1)")
        for seg in ("user", "scene", "ad", "session"):
            cards = self.cardinalities.get(seg, [])
            if len(cards) != FIELD_SCHEMA.width(seg) or len(self.weights.get(seg, [])) != len(cards):
                raise SpecError(f"segment {seg!r} needs {FIELD_SCHEMA.width(seg)} cardinalities and weights")
            if min(cards) < 1:
                raise SpecError(f"segment {seg!r} has a zero vocabulary")
        if self.hash_space < 1:
            raise SpecError("hash_space must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise SpecError(f"unknown spec fields {sorted(unknown)}")
        return cls(**known)


def _mix64(x: np.ndarray) -> np.ndarray:
    # splitmix64 finaliser
    x = x.astype(np.uint64)
    x ^= x >> np.uint64(30)
    x *= np.uint64(0xBF58476D1CE4E5B9)
    x ^= x >> np.uint64(27)
    x *= np.uint64(0x94D049BB133111EB)
    x ^= x >> np.uint64(31)
    return x


def _hash_ids(column: int, raw: np.ndarray, space: int) -> np.ndarray:
    key = (np.uint64(column + 1) << np.uint64(40)) | raw.astype(np.uint64)
    return (_mix64(key) % np.uint64(space)).astype(np.int64)


def _planted(spec: SyntheticSpec, rng: np.random.Generator):
    """Draw the generator's hidden structure (latents, type rule) from rng."""
    latents = {seg: [rng.normal(size=c) for c in spec.cardinalities[seg]]
               for seg in ("user", "scene", "ad", "session")}
    k = spec.num_types
    n0, n1 = spec.cardinalities["scene"][0], spec.cardinalities["scene"][1]
    cells = np.arange(n0 * n1) % k
    rng.shuffle(cells)
    type_table = cells.reshape(n0, n1)
    # type-specific effect of the ad id and ad category
    type_ad = [rng.normal(size=(k, spec.cardinalities["ad"][c])) for c in (0, 1)]
    # evenly spaced per-type offsets in [-1, 1], assigned to types at random
    offsets = np.linspace(-1.0, 1.0, k) if k > 1 else np.zeros(1)
    type_offset = rng.permutation(offsets)
    return latents, type_table, type_ad, type_offset


def _simulate(spec: SyntheticSpec, seed: int):
    spec.validate()
    rng = np.random.default_rng(seed)
    latents, type_table, type_ad, type_offset = _planted(spec, rng)
    n = spec.n_records
    raw = {seg: np.column_stack([rng.integers(0, c, size=n) for c in spec.cardinalities[seg]])
           if n else np.zeros((0, len(spec.cardinalities[seg])), np.int64)
           for seg in ("user", "scene", "ad", "session")}
    day = rng.integers(1, spec.n_days + 1, size=n)
    planted = spec.mode == "planted"
    if planted:
        types = type_table[raw["scene"][:, 0], raw["scene"][:, 1]]
    else:
        types = rng.integers(0, spec.num_types, size=n)

    logit = np.zeros(n)
    if planted:
        for seg, lat in latents.items():
            for c, w in enumerate(spec.weights[seg]):
                if w:
                    logit += spec.coef_scale * w * lat[c][raw[seg][:, c]]
        for c, table in enumerate(type_ad):
            logit += spec.coef_scale * spec.type_interaction * table[types, raw["ad"][:, c]] / np.sqrt(2)
        logit += spec.coef_scale * spec.type_effect * type_offset[types]
        logit += spec.day_drift * (day - (spec.n_days + 1) / 2) / (spec.n_days / 2)
    bias = _solve_bias(logit, spec.base_rate)
    prob = 1.0 / (1.0 + np.exp(-(logit + bias)))
    label = (rng.random(n) < prob).astype(np.int64)

    cols, col = [], 0
    for seg in ("user", "scene", "ad", "session"):
        for c in range(raw[seg].shape[1]):
            cols.append(_hash_ids(col, raw[seg][:, c], spec.hash_space))
            col += 1
    cols.append(types.astype(np.int64))
    feats = np.column_stack(cols) if n else np.zeros((0, _N_FEATURES), np.int64)
    return Records(feats, day, label), prob


def _solve_bias(logit: np.ndarray, rate: float) -> float:
    """Intercept making the mean click probability equal ``rate``."""
    target = np.log(rate / (1 - rate))
    if logit.size == 0 or not np.any(logit):
        return float(target)
    lo, hi = target - 20.0, target + 20.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if np.mean(1.0 / (1.0 + np.exp(-(logit + mid)))) < rate:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def generate(spec: SyntheticSpec, seed: int, return_prob: bool = False):
    """Draw ``spec.n_records`` records; optionally also the true click probabilities."""
    records, prob = _simulate(spec, seed)
    return (records, prob) if return_prob else records


def planted_auc(spec: SyntheticSpec, seed: int = 0, n: int = 200_000) -> float:
    """AUC of the true click probability, i.e. the best any model can reach.

    Uses the expected (label-free) form: positives weighted by p and
    negatives by 1 - p, so it does not depend on the Bernoulli draws.
    """
    sim = SyntheticSpec.from_dict({**spec.to_dict(), "n_records": n})
    _, p = _simulate(sim, seed)
    order = np.argsort(p, kind="mergesort")
    ps = p[order]
    # group ties so that equal probabilities count one half
    uniq, start = np.unique(ps, return_index=True)
    pos_w = np.add.reduceat(ps, start)
    neg_w = np.add.reduceat(1.0 - ps, start)
    neg_below = np.cumsum(neg_w) - neg_w
    num = np.sum(pos_w * (neg_below + 0.5 * neg_w))
    return float(num / (pos_w.sum() * neg_w.sum()))
