"""WM, HM, HMM and AM predictors and the averaged EMOFM ensemble.

Every predictor holds one uni-predictor fitting all records and ``K``
type-wise predictors, each fitting only records of its interaction type.
They share one :class:`EmbeddingSet`.  ``forward`` returns the uni and the
type-routed probabilities; the model's prediction is their mean.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .dataio import FIELD_SCHEMA, Records
from .errors import BundleError, ContractError, RoutingError
from .layers import EmbeddingTable, Mixer, MlpStack, Module, uniform_init
from .numerics import Parameter, Tensor

FIELDS = ("user", "scene", "ad", "session")
# stage-1 mixer targets: cat(user, session) against cat(scene, ad)
MIXER_PAIRING = (("user", "session"), ("scene", "ad"))
PREDICTOR_KINDS = ("wm", "hm", "hmm")
MEMBER_NAMES = ("wm", "hm0", "hm1", "hmm0", "hmm1")


@dataclass
class ModelConfig:
    wm_dims: list = field(default_factory=lambda: [512, 256, 128, 64, 1])
    hm_stage1_dims: dict = field(default_factory=lambda: {
        "user": [128, 64], "scene": [20, 16], "ad": [256, 128], "session": [84, 32]})
    hm_stage2_dims: list = field(default_factory=lambda: [128, 1])
    enrichment_dim: int = 256
    embed_dims: dict = field(default_factory=lambda: {
        "user": 8, "scene": 8, "ad": 8, "session": 8, "type": 24, "time": 24})
    vocab_sizes: dict = field(default_factory=lambda: {
        "user": 100_003, "scene": 100_003, "ad": 100_003, "session": 100_003, "type": 8, "time": 31})
    mixer_dim: int = 4
    mixer_heads: int = 2
    num_types: int = 3
    # stage-2 blocks preceded by a uni/type-wise mixer (0 = first block)
    stage2_mixer_blocks: list = field(default_factory=lambda: [1])
    layernorm_eps: float = 1e-5

    def __post_init__(self):
        for name in ("wm_dims", "hm_stage2_dims"):
            dims = getattr(self, name)
            if not dims or min(dims) < 1 or dims[-1] != 1:
                raise ValueError(f"{name} must be positive and end in 1, got {dims}")
        depths = {len(v) for v in self.hm_stage1_dims.values()}
        if len(depths) != 1 or set(self.hm_stage1_dims) != set(FIELDS):
            raise ValueError("hm_stage1_dims needs equal-depth stacks for user/scene/ad/session")
        if self.mixer_dim % self.mixer_heads:
            raise ValueError("mixer_heads must divide mixer_dim")
        bad = [k for k in self.stage2_mixer_blocks if not 0 <= k < len(self.hm_stage2_dims)]
        if bad:
            raise ValueError(f"stage2_mixer_blocks out of range: {bad}")

    def field_width(self, seg: str) -> int:
        return FIELD_SCHEMA.width(seg) * self.embed_dims[seg]

    def embedding_width(self, segments: Sequence[str] = FIELD_SCHEMA.segment_names) -> int:
        return sum(self.field_width(s) for s in segments)

    def stage2_input_width(self, with_type: bool = True) -> int:
        encoded = sum(self.hm_stage1_dims[f][-1] for f in FIELDS)
        extras = self.field_width("time") + (self.field_width("type") if with_type else 0)
        return encoded + self.enrichment_dim + extras

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config fields {sorted(unknown)}")
        return cls(**d)


class EmbeddingSet(Module):
    """One table per segment, shared by all single models of a predictor."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None,
                 segments: Sequence[str] = FIELD_SCHEMA.segment_names,
                 tables: Mapping[str, EmbeddingTable] | None = None):
        self.config = config
        self.segments = tuple(segments)
        if tables is None:
            tables = {s: EmbeddingTable(config.vocab_sizes[s], config.embed_dims[s], rng) for s in segments}
        self.tables = dict(tables)

    def frozen_view(self, segments: Sequence[str]) -> "EmbeddingSet":
        """Frozen tables sharing this set's storage, restricted to ``segments``."""
        shared = {s: EmbeddingTable.sharing(self.tables[s], frozen=True) for s in segments}
        return EmbeddingSet(self.config, segments=segments, tables=shared)

    @property
    def frozen(self) -> bool:
        return all(t.frozen for t in self.tables.values())

    def embed(self, records: Records, types: np.ndarray | None = None,
              time_index: int | None = None) -> dict[str, Tensor]:
        """Per-segment (B, width) embeddings.

        ``types=None`` feeds a zero type embedding; ``time_index`` replaces
        every record's day.
        """
        out = {}
        for seg in self.segments:
            if seg == "type":
                if types is None:
                    out[seg] = nx.constant(np.zeros((len(records), self.config.field_width("type"))))
                    continue
                idx = np.asarray(types, dtype=np.int64).reshape(-1, 1)
            elif seg == "time" and time_index is not None:
                idx = np.full((len(records), 1), time_index, dtype=np.int64)
            else:
                idx = records.segment(seg)
            out[seg] = self.tables[seg].lookup(idx)
        return out


def _partition(types: np.ndarray, k: int) -> list[tuple[int, np.ndarray]]:
    types = np.asarray(types, dtype=np.int64).reshape(-1)
    if types.size and (types.min() < 0 or types.max() >= k):
        bad = types[(types < 0) | (types >= k)][0]
        raise RoutingError(f"type index {bad} outside 0..{k - 1}")
    return [(t, idx) for t in range(k) if (idx := np.flatnonzero(types == t)).size]


def _reassemble(parts: list[Tensor], indices: list[np.ndarray], n: int) -> Tensor:
    order = np.concatenate(indices)
    if len(parts) == 1 and np.array_equal(order, np.arange(n)):
        return parts[0]
    inverse = np.empty(n, dtype=np.int64)
    inverse[order] = np.arange(n)
    return nx.gather_rows(nx.concat(parts, axis=0), inverse)


def _take(emb: Mapping[str, Tensor], idx: np.ndarray) -> dict[str, Tensor]:
    return {k: nx.gather_rows(v, idx) for k, v in emb.items()}


def _flat(p: Tensor) -> Tensor:
    return nx.reshape(p, (p.shape[0],))


class Predictor(Module):
    kind = ""

    def forward(self, records: Records, types: np.ndarray | None = None,
                time_index: int | None = None) -> tuple[Tensor, Tensor | None]:
        raise NotImplementedError

    def predict(self, records: Records, types: np.ndarray | None = None,
                time_index: int | None = None, type_wise: bool = True,
                batch_size: int = 4096) -> np.ndarray:
        """Final probabilities: mean of uni and type-routed outputs, or uni only."""
        out = np.empty(len(records))
        for start in range(0, len(records), batch_size):
            sl = slice(start, start + batch_size)
            sub_types = None if types is None else np.asarray(types)[sl]
            p_uni, p_type = self.forward(records.take(sl), sub_types, time_index)
            if type_wise and p_type is not None:
                out[sl] = (p_uni.data + p_type.data) / 2.0
            else:
                out[sl] = p_uni.data
        return out


class WM(Predictor):
    """Whole MLPs: bottleneck stacks over the full concatenated embedding."""

    kind = "wm"

    def __init__(self, config: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = config
        self.embedding = EmbeddingSet(config, rng)
        width = config.embedding_width()
        self.uni = MlpStack(width, config.wm_dims, rng, eps=config.layernorm_eps)
        self.type_wise = [MlpStack(width, config.wm_dims, rng, eps=config.layernorm_eps)
                          for _ in range(config.num_types)]

    def forward(self, records, types=None, time_index=None):
        emb = self.embedding.embed(records, types, time_index)
        x = nx.concat([emb[s] for s in FIELD_SCHEMA.segment_names], axis=-1)
        p_uni = _flat(self.uni(x))
        if types is None:
            return p_uni, None
        parts, indices = [], []
        for t, idx in _partition(types, self.config.num_types):
            parts.append(_flat(self.type_wise[t](nx.gather_rows(x, idx))))
            indices.append(idx)
        return p_uni, _reassemble(parts, indices, len(records))


class HierarchicalSingle(Module):
    """One two-stage single model: per-field encoders, then a joint stack.

    Stage-2 input is ``cat(encoded fields, enrichment projection, extras)``
    where extras are the type and time embeddings (time only for AM).
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator, embed_width: int,
                 stage2_in: int, out_dim: int = 1, head: str = "sigmoid", mixers: bool = False):
        eps = config.layernorm_eps
        self.encoders = {f: MlpStack(config.field_width(f), config.hm_stage1_dims[f], rng,
                                     final_activation="silu", eps=eps) for f in FIELDS}
        depth = len(config.hm_stage1_dims["user"])
        self.mixers = [Mixer(config.mixer_dim, config.mixer_heads, rng) for _ in range(depth)] if mixers else []
        self.enrichment = Parameter(uniform_init(rng, embed_width, (embed_width, config.enrichment_dim)))
        dims = list(config.hm_stage2_dims[:-1]) + [out_dim]
        self.stage2 = MlpStack(stage2_in, dims, rng, final_activation=head, eps=eps)

    def stage1(self, emb: Mapping[str, Tensor], full: Tensor, extras: Sequence[Tensor]) -> Tensor:
        h = {f: emb[f] for f in FIELDS}
        for k in range(len(self.encoders["user"])):
            if self.mixers:
                (fa, fb), (fc, fd) = MIXER_PAIRING
                wa, wb, wc, wd = (h[f].shape[-1] for f in (fa, fb, fc, fd))
                left, right = self.mixers[k](nx.concat([h[fa], h[fb]]), nx.concat([h[fc], h[fd]]))
                h[fa], h[fb] = nx.split_last(left, [wa, wb])
                h[fc], h[fd] = nx.split_last(right, [wc, wd])
            h = {f: self.encoders[f].blocks[k](h[f]) for f in FIELDS}
        enrich = nx.matmul(full, self.enrichment)
        return nx.concat([h[f] for f in FIELDS] + [enrich] + list(extras), axis=-1)

    def __call__(self, emb, full, extras) -> Tensor:
        return self.stage2(self.stage1(emb, full, extras))


def _full_and_extras(emb: Mapping[str, Tensor], segments: Sequence[str]):
    full = nx.concat([emb[s] for s in segments], axis=-1)
    extras = [emb[s] for s in segments if s in ("type", "time")]
    return full, extras


class HM(Predictor):
    """Hierarchical MLPs: field-wise encoders, then a joint stage-2 stack."""

    kind = "hm"
    _mixers = False

    def __init__(self, config: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = config
        self.embedding = EmbeddingSet(config, rng)
        width = config.embedding_width()
        s2 = config.stage2_input_width()
        self.uni = HierarchicalSingle(config, rng, width, s2, mixers=self._mixers)
        self.type_wise = [HierarchicalSingle(config, rng, width, s2, mixers=self._mixers)
                          for _ in range(config.num_types)]

    def forward(self, records, types=None, time_index=None):
        emb = self.embedding.embed(records, types, time_index)
        if types is None:
            full, extras = _full_and_extras(emb, FIELD_SCHEMA.segment_names)
            return _flat(self.uni(emb, full, extras)), None
        # uni rows are evaluated per type group too, matching HMM's row order
        # so BLAS rounding is identical between the two
        uni_parts, type_parts, indices = [], [], []
        for t, idx in _partition(types, self.config.num_types):
            sub = _take(emb, idx)
            sub_full, sub_extras = _full_and_extras(sub, FIELD_SCHEMA.segment_names)
            uni_parts.append(_flat(self.uni(sub, sub_full, sub_extras)))
            type_parts.append(_flat(self.type_wise[t](sub, sub_full, sub_extras)))
            indices.append(idx)
        n = len(records)
        return _reassemble(uni_parts, indices, n), _reassemble(type_parts, indices, n)


class HMM(HM):
    """HM with a mixer in front of every block.

    Stage 1 fuses cat(user, session) with cat(scene, ad) inside each single
    model.  Stage 2 fuses the uni hidden state with the hidden state of the
    type-wise predictor for the record's type, using one mixer per type.
    """

    kind = "hmm"
    _mixers = True

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__(config, seed)
        rng = np.random.default_rng([seed, 1])
        self.type_mixers = [[Mixer(config.mixer_dim, config.mixer_heads, rng)
                             for _ in range(config.num_types)]
                            for _ in config.stage2_mixer_blocks]

    def forward(self, records, types=None, time_index=None):
        emb = self.embedding.embed(records, types, time_index)
        if types is None:
            full, extras = _full_and_extras(emb, FIELD_SCHEMA.segment_names)
            return _flat(self.uni(emb, full, extras)), None
        uni_parts, type_parts, indices = [], [], []
        mixer_at = {k: i for i, k in enumerate(self.config.stage2_mixer_blocks)}
        for t, idx in _partition(types, self.config.num_types):
            sub = _take(emb, idx)
            full, extras = _full_and_extras(sub, FIELD_SCHEMA.segment_names)
            xu = self.uni.stage1(sub, full, extras)
            xt = self.type_wise[t].stage1(sub, full, extras)
            for k, (bu, bt) in enumerate(zip(self.uni.stage2.blocks, self.type_wise[t].stage2.blocks)):
                if k in mixer_at:
                    xu, xt = self.type_mixers[mixer_at[k]][t](xu, xt)
                xu, xt = bu(xu), bt(xt)
            uni_parts.append(_flat(xu))
            type_parts.append(_flat(xt))
            indices.append(idx)
        n = len(records)
        return _reassemble(uni_parts, indices, n), _reassemble(type_parts, indices, n)


AM_SEGMENTS = ("user", "scene", "ad", "session", "time")


class AM(Module):
    """Auxiliary type classifier: HMM-style uni network with a K-way softmax.

    It reads every segment except the type, through embeddings taken frozen
    from a trained predictor.
    """

    kind = "am"

    def __init__(self, config: ModelConfig, embedding: EmbeddingSet, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = config
        self.embedding = embedding.frozen_view(AM_SEGMENTS)
        width = config.embedding_width(AM_SEGMENTS)
        self.net = HierarchicalSingle(config, rng, width, config.stage2_input_width(with_type=False),
                                      out_dim=config.num_types, head="softmax", mixers=True)

    def forward(self, records: Records, time_index: int | None = None) -> Tensor:
        emb = self.embedding.embed(records, None, time_index)
        full, extras = _full_and_extras(emb, AM_SEGMENTS)
        return self.net(emb, full, extras)

    def predict_proba(self, records: Records, time_index: int | None = None,
                      batch_size: int = 8192) -> np.ndarray:
        out = np.empty((len(records), self.config.num_types))
        for start in range(0, len(records), batch_size):
            sl = slice(start, start + batch_size)
            out[sl] = self.forward(records.take(sl), time_index).data
        return out


def build_predictor(kind: str, config: ModelConfig, seed: int) -> Predictor:
    classes = {"wm": WM, "hm": HM, "hmm": HMM}
    if kind not in classes:
        raise ValueError(f"unknown predictor kind {kind!r}")
    return classes[kind](config, seed)


@dataclass
class ModelBundle:
    """Trained members plus what is needed to reproduce their predictions.

    ``members`` maps ``wm``, ``hm0``, ``hm1``, ``hmm0``, ``hmm1`` and ``am`` to
    models; ``am_source`` names the member whose embedding AM reuses.
    """

    config: ModelConfig
    members: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    am_source: str | None = None
    last_train_day: int = FIELD_SCHEMA.n_days - 1
    train_config: dict = field(default_factory=dict)

    def require(self, *names: str) -> None:
        missing = [n for n in names if n not in self.members]
        if missing:
            raise BundleError(f"bundle is missing member model(s): {', '.join(missing)}")

    def member_names(self) -> list[str]:
        return [n for n in (*MEMBER_NAMES, "am") if n in self.members]


def route_types(bundle: ModelBundle, records: Records, time_index: int | None = None) -> np.ndarray:
    bundle.require("am")
    return np.argmax(bundle.members["am"].predict_proba(records, time_index), axis=1)


def member_predictions(bundle: ModelBundle, records: Records, types: np.ndarray | None,
                       type_wise: bool = True, time_index: int | None = None,
                       names: Sequence[str] = MEMBER_NAMES) -> dict[str, np.ndarray]:
    bundle.require(*names)
    return {n: bundle.members[n].predict(records, types, time_index, type_wise) for n in names}


def combine_members(preds: Mapping[str, np.ndarray]) -> np.ndarray:
    """mean(WM, mean(HM seeds), mean(HMM seeds))."""
    p_hm = (preds["hm0"] + preds["hm1"]) / 2.0
    p_hmm = (preds["hmm0"] + preds["hmm1"]) / 2.0
    return (preds["wm"] + p_hm + p_hmm) / 3.0


def ensemble_predict(records: Records, bundle: ModelBundle, routing: str = "am",
                     type_wise: bool = True, use_ftype: bool = True,
                     time_index: int | None = None) -> np.ndarray:
    """EMOFM probabilities for ``records``.

    ``routing`` is ``am`` (hard argmax of AM), ``soft`` (AM-probability
    weighted average over types) or ``true`` (the records' own type column).
    ``use_ftype=False`` feeds a zero type embedding and uses uni outputs only.
    ``time_index`` defaults to the bundle's last training day.
    """
    bundle.require(*MEMBER_NAMES)
    if time_index is None:
        time_index = bundle.last_train_day
    if not use_ftype:
        return combine_members(member_predictions(bundle, records, None, False, time_index))
    if routing == "true":
        types = records.types
    elif routing == "am":
        types = route_types(bundle, records, time_index)
    elif routing == "soft":
        bundle.require("am")
        probs = bundle.members["am"].predict_proba(records, time_index)
        out = np.zeros(len(records))
        for t in range(bundle.config.num_types):
            fixed = np.full(len(records), t)
            out += probs[:, t] * combine_members(
                member_predictions(bundle, records, fixed, type_wise, time_index))
        return out
    else:
        raise ContractError(f"unknown routing {routing!r}")
    return combine_members(member_predictions(bundle, records, types, type_wise, time_index))
