"""Losses, Adam and the one-epoch training protocol."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .dataio import Records
from .errors import ContractError, DataError, NumericAbort
from .layers import Module
from .metrics import auc as auc_score
from .metrics import binary_logloss
from .models import AM, Predictor
from .numerics import GradTape, Parameter, Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 1
    global_lr: float = 0.001
    embedding_lr: float = 0.1
    batch_sizes: dict = field(default_factory=lambda: {"wm": 4096, "hm": 4096, "hmm": 1024, "am": 8192})
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seeds: list = field(default_factory=lambda: [2000927, 2000928])
    clip_eps: float = 1e-7
    shuffle: str = "uniform"  # or "day" for day-ordered streaming
    trace_every: float = 0.01

    def __post_init__(self):
        if self.epochs != 1:
            raise ContractError("training is one epoch by construction; epochs must be 1")
        if self.shuffle not in ("uniform", "day"):
            raise ContractError(f"unknown shuffle mode {self.shuffle!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractError(f"unknown train config fields {sorted(unknown)}")
        return cls(**d)


def logloss(p: Tensor, y, eps: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy of probabilities clipped to [eps, 1-eps]."""
    y = np.asarray(y, dtype=np.float64).reshape(p.shape)
    if p.size == 0:
        raise ContractError("logloss of an empty batch")
    pc = nx.clip(p, eps, 1.0 - eps)
    terms = nx.add(nx.mul(y, nx.log(pc)), nx.mul(1.0 - y, nx.log(nx.sub(1.0, pc))))
    return nx.neg(nx.mean(terms))


def cross_entropy(probs: Tensor, labels, eps: float = 1e-7) -> Tensor:
    """Mean negative log-probability of the integer ``labels``."""
    labels = np.asarray(labels, dtype=np.int64)
    if probs.shape[0] == 0:
        raise ContractError("cross-entropy of an empty batch")
    onehot = np.zeros(probs.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = nx.sum(nx.mul(probs, onehot), axis=1)
    return nx.neg(nx.mean(nx.log(nx.clip(picked, eps, 1.0))))


class Adam:
    """Bias-corrected Adam with one learning rate per parameter.

    Frozen parameters are skipped entirely.
    """

    def __init__(self, params: Sequence[tuple[str, Parameter, float]], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {id(p): np.zeros_like(p.data) for _, p, _ in self.params}
        self.v = {id(p): np.zeros_like(p.data) for _, p, _ in self.params}

    def step(self, grads: Mapping[Tensor, np.ndarray]) -> None:
        for name, p, _ in self.params:
            if p.requires_grad and p in grads and not np.all(np.isfinite(grads[p])):
                raise NumericAbort(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for _, p, lr in self.params:
            if not p.requires_grad:
                continue
            g = grads[p]
            m, v = self.m[id(p)], self.v[id(p)]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params: Sequence[tuple[str, Parameter, float]], grads, state: Adam | None,
              config: TrainConfig) -> Adam:
    """One update; pass the returned state back in on the next call."""
    if state is None:
        state = Adam(params, config.beta1, config.beta2, config.adam_eps)
    state.step(grads)
    return state


def param_groups(model: Module, config: TrainConfig) -> list[tuple[str, Parameter, float]]:
    """Embedding tables get ``embedding_lr``; everything else ``global_lr``."""
    out = []
    for name, p in model.named_parameters():
        if p.frozen:
            continue
        lr = config.embedding_lr if name.startswith("embedding.") else config.global_lr
        out.append((name, p, lr))
    return out


@dataclass
class TracePoint:
    fraction: float
    auc: float
    logloss: float


def write_trace(trace: Sequence[TracePoint], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fraction", "auc", "logloss"])
        for pt in trace:
            w.writerow([f"{pt.fraction:.6f}", repr(pt.auc), repr(pt.logloss)])


def read_trace(path) -> list[TracePoint]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [TracePoint(float(r["fraction"]), float(r["auc"]), float(r["logloss"]))
                for r in csv.DictReader(fh)]


def epoch_order(records: Records, config: TrainConfig, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if config.shuffle == "day":
        # days in order, records shuffled within each day
        perm = rng.permutation(len(records))
        return perm[np.argsort(records.day[perm], kind="stable")]
    return rng.permutation(len(records))


@dataclass
class TrainResult:
    model: Module
    trace: list
    seconds: float
    final_loss: float


def _check_types(types: np.ndarray, k: int) -> None:
    if types.size and (types.min() < 0 or types.max() >= k):
        raise DataError(f"training record with unknown type (expected 0..{k - 1})")


def train_predictor(model: Predictor, records: Records, config: TrainConfig, seed: int,
                    batch_size: int | None = None) -> TrainResult:
    """One shuffled pass; batch loss = logloss(uni) + logloss(type-routed).

    The trace holds the running AUC/Logloss of pre-update predictions over
    all records seen so far, sampled every ``config.trace_every`` of the epoch.
    """
    if len(records) == 0:
        raise DataError("empty training split")
    _check_types(records.types, model.config.num_types)
    batch_size = batch_size or config.batch_sizes[model.kind]
    opt = Adam(param_groups(model, config), config.beta1, config.beta2, config.adam_eps)
    order = epoch_order(records, config, seed)
    n = len(records)
    seen_pred = np.empty(n)
    seen_label = np.empty(n, dtype=np.int64)
    trace: list[TracePoint] = []
    next_mark = config.trace_every
    start = time.perf_counter()
    loss_value = float("nan")
    for lo in range(0, n, batch_size):
        batch = records.take(order[lo:lo + batch_size])
        with GradTape() as tape:
            p_uni, p_type = model.forward(batch, batch.types)
            loss = nx.add(logloss(p_uni, batch.label, config.clip_eps),
                          logloss(p_type, batch.label, config.clip_eps))
        loss_value = loss.item()
        if not np.isfinite(loss_value):
            raise NumericAbort(f"non-finite loss at record {lo}")
        opt.step(tape.gradient(loss))
        hi = lo + len(batch)
        seen_pred[lo:hi] = (p_uni.data + p_type.data) / 2.0
        seen_label[lo:hi] = batch.label
        frac = hi / n
        if frac + 1e-12 >= next_mark or hi == n:
            pt = _trace_point(frac, seen_pred[:hi], seen_label[:hi], config.clip_eps)
            if pt is not None:
                trace.append(pt)
            while next_mark <= frac + 1e-12:
                next_mark += config.trace_every
    seconds = time.perf_counter() - start
    log.info("trained %s on %d records in %.1fs", model.kind, n, seconds)
    return TrainResult(model, trace, seconds, loss_value)


def _trace_point(frac, pred, label, eps) -> TracePoint | None:
    if label.min() == label.max():
        return None
    return TracePoint(frac, auc_score(pred, label), binary_logloss(pred, label, eps))


def train_am(am: AM, records: Records, config: TrainConfig, seed: int,
             batch_size: int | None = None) -> TrainResult:
    """One epoch of K-class cross-entropy on the type column, embeddings frozen."""
    if not am.embedding.frozen:
        raise ContractError("AM must train on frozen embeddings")
    if len(records) == 0:
        raise DataError("empty training split")
    types = records.types
    _check_types(types, am.config.num_types)
    batch_size = batch_size or config.batch_sizes["am"]
    opt = Adam(param_groups(am, config), config.beta1, config.beta2, config.adam_eps)
    order = epoch_order(records, config, seed)
    n = len(records)
    correct = 0
    trace: list[TracePoint] = []
    start = time.perf_counter()
    loss_value = float("nan")
    for lo in range(0, n, batch_size):
        idx = order[lo:lo + batch_size]
        batch = records.take(idx)
        with GradTape() as tape:
            probs = am.forward(batch)
            loss = cross_entropy(probs, types[idx], config.clip_eps)
        loss_value = loss.item()
        if not np.isfinite(loss_value):
            raise NumericAbort(f"non-finite AM loss at record {lo}")
        opt.step(tape.gradient(loss))
        correct += int(np.sum(np.argmax(probs.data, axis=1) == types[idx]))
        # for AM the trace's "auc" column holds running accuracy
        trace.append(TracePoint((lo + len(idx)) / n, correct / (lo + len(idx)), loss_value))
    seconds = time.perf_counter() - start
    log.info("trained am on %d records in %.1fs", n, seconds)
    return TrainResult(am, trace, seconds, loss_value)


def type_accuracy(am: AM, records: Records, time_index: int | None = None) -> float:
    pred = np.argmax(am.predict_proba(records, time_index), axis=1)
    return float(np.mean(pred == records.types))
