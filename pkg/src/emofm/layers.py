"""Shared embedding tables, MLP blocks and the cross-attention feature mixer."""

from __future__ import annotations

import math
from collections.abc import Iterator, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .dataio import FIELD_SCHEMA
from .errors import DimensionError, SchemaError
from .numerics import Parameter, Tensor

ACTIVATIONS = ("silu", "sigmoid", "softmax")


class Module:
    """Parameter container; parameters are discovered in attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            yield from _walk(value, f"{prefix}{name}")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _walk(value, path: str):
    if isinstance(value, Parameter):
        yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(path + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{path}.{i}")
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from _walk(v, f"{path}.{k}")


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class EmbeddingTable(Module):
    """One hashed table ``W^E`` shared by every column of a segment.

    Feature ``i`` maps to row ``i mod vocab_size``.
    """

    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator | None = None,
                 frozen: bool = False, data: np.ndarray | None = None):
        if vocab_size < 1 or dim < 1:
            raise DimensionError(f"embedding needs positive sizes, got V={vocab_size} d={dim}")
        self.vocab_size = vocab_size
        self.dim = dim
        if data is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            data = rng.normal(0.0, 0.01, size=(vocab_size, dim))
        self.table = Parameter(data, frozen=frozen)

    @classmethod
    def sharing(cls, other: "EmbeddingTable", frozen: bool = True) -> "EmbeddingTable":
        """A table object backed by the same storage as ``other``."""
        t = cls.__new__(cls)
        t.vocab_size = other.vocab_size
        t.dim = other.dim
        t.table = Parameter(np.empty(0), frozen=frozen)
        t.table.data = other.table.data
        return t

    @property
    def frozen(self) -> bool:
        return self.table.frozen

    def freeze(self) -> None:
        self.table.requires_grad = False

    def rows(self, index) -> np.ndarray:
        index = np.asarray(index)
        if index.size and index.min() < 0:
            raise SchemaError("feature indices must be nonnegative")
        return np.mod(index.astype(np.int64), self.vocab_size)

    def lookup(self, index) -> Tensor:
        """(B, w) integer features -> (B, w * dim), columns kept in order."""
        index = np.asarray(index)
        rows = self.rows(index)
        out = nx.gather_rows(self.table, rows)
        return nx.reshape(out, index.shape[:-1] + (index.shape[-1] * self.dim,))


def embed_record(fields: Mapping[str, np.ndarray] | Sequence[np.ndarray],
                 tables: Mapping[str, EmbeddingTable],
                 segments: Sequence[str] | None = None) -> Tensor:
    """Concatenate per-segment embeddings in schema order.

    ``fields`` holds one integer array per segment, either (w,) for a single
    record or (B, w) for a batch.
    """
    segments = list(segments or FIELD_SCHEMA.segment_names)
    if not isinstance(fields, Mapping):
        fields = dict(zip(segments, fields))
    parts = []
    single = False
    for seg in segments:
        if seg not in fields:
            raise SchemaError(f"missing segment {seg!r}")
        idx = np.asarray(fields[seg])
        single = idx.ndim == 1
        idx = np.atleast_2d(idx)
        width = FIELD_SCHEMA.width(seg)
        if idx.shape[-1] != width:
            raise SchemaError(f"segment {seg!r} expects {width} features, got {idx.shape[-1]}")
        parts.append(tables[seg].lookup(idx))
    out = nx.concat(parts, axis=-1)
    return nx.reshape(out, (out.shape[-1],)) if single else out


class MlpBlock(Module):
    """LayerNorm -> Linear (with bias) -> activation."""

    def __init__(self, d_in: int, d_out: int, activation: str, rng: np.random.Generator,
                 eps: float = 1e-5):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.ln_gamma = Parameter(np.ones(d_in))
        self.ln_beta = Parameter(np.zeros(d_in))
        self.W = Parameter(uniform_init(rng, d_in, (d_in, d_out)))
        self.b = Parameter(uniform_init(rng, d_in, (d_out,)))
        self.activation = activation
        self.eps = eps

    @property
    def d_in(self) -> int:
        return self.W.shape[0]

    @property
    def d_out(self) -> int:
        return self.W.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return mlp_block_forward(x, self)


def mlp_block_forward(x: Tensor, p: MlpBlock) -> Tensor:
    if x.shape[-1] != p.d_in:
        raise DimensionError(f"mlp block expects width {p.d_in}, got {x.shape}")
    h = nx.layer_norm(x, p.ln_gamma, p.ln_beta, p.eps)
    z = nx.add(nx.matmul(h, p.W), p.b)
    if p.activation == "silu":
        return nx.silu(z)
    if p.activation == "sigmoid":
        return nx.sigmoid(z)
    return nx.softmax_rows(z)


class MlpStack(Module):
    """Bottleneck stack; SiLU everywhere except ``final_activation`` on the last block."""

    def __init__(self, d_in: int, dims: Sequence[int], rng: np.random.Generator,
                 final_activation: str = "sigmoid", eps: float = 1e-5):
        self.blocks = []
        for k, d_out in enumerate(dims):
            act = final_activation if k == len(dims) - 1 else "silu"
            self.blocks.append(MlpBlock(d_in, d_out, act, rng, eps))
            d_in = d_out

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def widths(self) -> list[int]:
        return [self.blocks[0].d_in] + [b.d_out for b in self.blocks]

    def __call__(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class Mixer(Module):
    """Parameters of one bidirectional cross-attention mixer.

    ``wq1``/``wk1``/``wv1``/``wo1`` serve the E1-queries-E2 direction and the
    ``*2`` set the reverse one.  Head ``h`` owns columns
    ``h*d_hd:(h+1)*d_hd`` of each query/key/value matrix.
    """

    def __init__(self, d_h: int = 4, heads: int = 2, rng: np.random.Generator | None = None):
        if heads < 1 or d_h % heads:
            raise DimensionError(f"heads={heads} must divide d_h={d_h}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_h = d_h
        self.heads = heads
        self.w_p1 = Parameter(uniform_init(rng, 1, (1, d_h)))
        self.w_p2 = Parameter(uniform_init(rng, 1, (1, d_h)))
        for i in (1, 2):
            for kind in ("q", "k", "v", "o"):
                setattr(self, f"w{kind}{i}", Parameter(uniform_init(rng, d_h, (d_h, d_h))))
        self.w_rp1 = Parameter(uniform_init(rng, d_h, (d_h, 1)))
        self.w_rp2 = Parameter(uniform_init(rng, d_h, (d_h, 1)))

    @property
    def d_hd(self) -> int:
        return self.d_h // self.heads

    def __call__(self, e1: Tensor, e2: Tensor) -> tuple[Tensor, Tensor]:
        return mixer_forward(e1, e2, self)


def _head_coefficients(p: Mixer, direction: int) -> tuple[Tensor, Tensor]:
    """Per-head logit scale and residual gain for one attention direction.

    Token ``i`` of the query sequence is ``a_i * w_pa`` and token ``j`` of the
    key sequence is ``b_j * w_pb``.  Hence query, key and value rows of head
    ``h`` are ``a_i * rho_h``, ``b_j * kappa_h`` and ``b_j * nu_h``, the logit
    is ``a_i * b_j * (rho_h . kappa_h) / sqrt(d_hd)`` and, after ``W^O`` and
    the reverse projection, head ``h`` adds ``(nu_h . omega_h) * f_h(i)`` to
    ``a_i`` where ``f_h(i)`` is the attention-weighted mean of ``b``.
    """
    w_pa, w_pb = (p.w_p1, p.w_p2) if direction == 1 else (p.w_p2, p.w_p1)
    wq, wk, wv, wo = (getattr(p, f"w{k}{direction}") for k in "qkvo")
    w_rp = p.w_rp1 if direction == 1 else p.w_rp2
    shape = (p.heads, p.d_hd)
    rho = nx.reshape(nx.matmul(w_pa, wq), shape)
    kappa = nx.reshape(nx.matmul(w_pb, wk), shape)
    nu = nx.reshape(nx.matmul(w_pb, wv), shape)
    omega = nx.reshape(nx.matmul(wo, w_rp), shape)
    scale = nx.mul(nx.sum(nx.mul(rho, kappa), axis=1), 1.0 / math.sqrt(p.d_hd))
    gain = nx.sum(nx.mul(nu, omega), axis=1)
    return scale, gain


def _logits_scale(a: Tensor, scale: Tensor) -> Tensor:
    n, length = a.shape
    return nx.mul(nx.reshape(a, (n, 1, length)), nx.reshape(scale, (1, -1, 1)))


def _direction(a: Tensor, b: Tensor, p: Mixer, direction: int) -> Tensor:
    scale, gain = _head_coefficients(p, direction)
    f = nx.softmax_mean(_logits_scale(a, scale), b)
    delta = nx.sum(nx.mul(f, nx.reshape(gain, (1, -1, 1))), axis=1)
    return nx.add(a, delta)


def mixer_forward(e1: Tensor, e2: Tensor, p: Mixer) -> tuple[Tensor, Tensor]:
    """Fuse two feature vectors (or batches of them) keeping their widths."""
    single = e1.ndim == 1
    if single:
        e1 = nx.reshape(e1, (1, e1.shape[0]))
        e2 = nx.reshape(e2, (1, e2.shape[0]))
    if e1.ndim != 2 or e2.ndim != 2 or e1.shape[0] != e2.shape[0]:
        raise DimensionError(f"mixer inputs {e1.shape} and {e2.shape}")
    if e1.shape[1] < 1 or e2.shape[1] < 1:
        raise DimensionError("mixer inputs need at least one feature")
    out1 = _direction(e1, e2, p, 1)
    out2 = _direction(e2, e1, p, 2)
    if single:
        out1 = nx.reshape(out1, (out1.shape[1],))
        out2 = nx.reshape(out2, (out2.shape[1],))
    return out1, out2


def mixer_attention_weights(e1, e2, p: Mixer) -> tuple[np.ndarray, np.ndarray]:
    """Attention weights of both directions, shapes (B, hd, d1, d2) and (B, hd, d2, d1)."""
    a = np.atleast_2d(nx.constant(e1).data)
    b = np.atleast_2d(nx.constant(e2).data)
    out = []
    for direction, (q, k) in ((1, (a, b)), (2, (b, a))):
        scale, _ = _head_coefficients(p, direction)
        t = q[:, None, :] * scale.data[None, :, None]
        out.append(nx.softmax_mean_weights(t, k))
    return out[0], out[1]
