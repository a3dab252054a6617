"""AUC, Logloss and evaluation reports."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, UndefinedMetricError


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ContractError(f"{s.size} scores for {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ContractError("labels must be 0 or 1")
    return s, y.astype(bool)


def _tie_averaged_ranks(s: np.ndarray) -> np.ndarray:
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    # first index of each run of equal scores
    starts = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    ends = np.r_[starts[1:], s.size]
    avg = (starts + ends + 1) / 2.0  # 1-based mean rank of the run
    ranks = np.empty(s.size)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def auc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative, ties 1/2."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    ranks = _tie_averaged_ranks(s)
    # Mann-Whitney U; ranks of halves are exact in float64 so U*2 is an integer
    u2 = 2.0 * ranks[y].sum() - n_pos * (n_pos + 1.0)
    return float(u2 / (2.0 * n_pos * n_neg))


def auc_pairs(scores, labels) -> float:
    """Quadratic pair-counting AUC; reference for :func:`auc`."""
    s, y = _check(scores, labels)
    pos, neg = s[y], s[~y]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    wins = 2 * int(np.sum(pos[:, None] > neg[None, :])) + int(np.sum(pos[:, None] == neg[None, :]))
    return wins / (2.0 * pos.size * neg.size)


def binary_logloss(p, y, eps: float = 1e-7) -> float:
    p, y = _check(p, y)
    if p.size == 0:
        raise ContractError("logloss of an empty batch")
    p = np.clip(p, eps, 1.0 - eps)
    return float(-np.mean(np.where(y, np.log(p), np.log1p(-p))))


@dataclass
class MetricsReport:
    auc: float
    logloss: float
    n_records: int
    members: dict = field(default_factory=dict)
    per_type: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)
    type_accuracy: float | None = None

    @classmethod
    def of(cls, scores, labels, **extra) -> "MetricsReport":
        s = np.asarray(scores)
        return cls(auc(s, labels), binary_logloss(s, labels), int(s.size), **extra)

    def to_dict(self) -> dict:
        return {"auc": self.auc, "logloss": self.logloss, "n_records": self.n_records,
                "members": self.members, "per_type": self.per_type, "flags": self.flags,
                "type_accuracy": self.type_accuracy}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        rows = [("model", "AUC", "Logloss")]
        rows += [(name, _fmt(m["auc"]), _fmt(m["logloss"])) for name, m in self.members.items()]
        rows.append(("EMOFM", _fmt(self.auc), _fmt(self.logloss)))
        widths = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
                 for r in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        lines.append(f"records: {self.n_records}")
        if self.type_accuracy is not None:
            lines.append(f"AM type accuracy: {self.type_accuracy:.4f}")
        return "\n".join(lines)


def _fmt(x) -> str:
    return "n/a" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.4f}"


def _safe(fn, *args):
    try:
        return fn(*args)
    except UndefinedMetricError:
        return None


def evaluate(bundle, records, routing: str = "am", type_wise: bool = True, use_ftype: bool = True,
             time_index: int | None = None, per_member: bool = True) -> MetricsReport:
    """Score ``records`` with the EMOFM ensemble and, optionally, each member.

    ``time_index`` defaults to the bundle's last training day.  AUC errors
    surface for the ensemble; member and per-type AUCs degrade to ``None``.
    """
    from .models import MEMBER_NAMES, combine_members, member_predictions, route_types

    if routing not in ("am", "soft", "true"):
        raise ContractError(f"unknown routing {routing!r}")
    if time_index is None:
        time_index = bundle.last_train_day
    y = records.label
    type_acc = None
    if not use_ftype:
        types = None
    elif routing == "true":
        types = records.types
    else:
        types = route_types(bundle, records, time_index)
        type_acc = float(np.mean(types == records.types))
    if routing == "soft" and use_ftype:
        from .models import ensemble_predict
        scores = ensemble_predict(records, bundle, "soft", type_wise, True, time_index)
        preds = {}
    else:
        preds = member_predictions(bundle, records, types, type_wise and use_ftype, time_index, MEMBER_NAMES)
        scores = combine_members(preds)
    flags = {"routing": routing, "type_wise": type_wise, "use_ftype": use_ftype, "time_index": time_index}
    members = {}
    if per_member:
        for name, p in preds.items():
            members[name] = {"auc": _safe(auc, p, y), "logloss": binary_logloss(p, y)}
    per_type = {}
    for t in range(bundle.config.num_types):
        mask = records.types == t
        if mask.any():
            per_type[str(t)] = {"n": int(mask.sum()), "auc": _safe(auc, scores[mask], y[mask]),
                                "logloss": binary_logloss(scores[mask], y[mask])}
    return MetricsReport(auc(scores, y), binary_logloss(scores, y), int(y.size), members,
                         per_type, flags, type_acc)
