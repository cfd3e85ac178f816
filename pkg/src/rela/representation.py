"""Multi-scale representation learning over operation and machine entities.

Every scale runs the same pipeline with its own parameters::

    embed -> self-attention (graph attention) -> local convolution -> cross-attention

Inputs carry a leading batch axis, so shapes are ``(B, N, .)`` for operations
and ``(B, m, .)`` for machines. States of different instances are batched by
padding with trailing invalid rows, described by ``op_valid``/``ma_valid``
masks. A disabled module passes its input through.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .env import D_MA, D_OP

MODULES = ("attn", "conv", "cattn")


@dataclass(frozen=True)
class ScaleConfig:
    scale_dims: tuple[int, ...] = (32, 8)
    n_heads: int = 4
    attn: bool = True
    conv: bool = True
    cattn: bool = True
    deep_supervision: bool = True
    actor_hidden: tuple[int, ...] = (64, 32)
    critic_hidden: tuple[int, ...] = (64, 32)
    op_graph: str = "chain"  # "chain" (job predecessor/successor) or "complete"

    def __post_init__(self):
        object.__setattr__(self, "scale_dims", tuple(int(d) for d in self.scale_dims))
        object.__setattr__(self, "actor_hidden", tuple(self.actor_hidden))
        object.__setattr__(self, "critic_hidden", tuple(self.critic_hidden))
        if not 1 <= len(self.scale_dims) <= 8:
            raise ValueError("between 1 and 8 scales are supported")
        for d in self.scale_dims:
            if d <= 0 or d % self.n_heads:
                raise ValueError(f"scale dim {d} is not a positive multiple of {self.n_heads} heads")
        if self.op_graph not in ("chain", "complete"):
            raise ValueError(f"unknown op_graph {self.op_graph!r}")

    @property
    def enabled(self) -> tuple[str, ...]:
        return tuple(b for b in MODULES if getattr(self, b))

    @property
    def head_scales(self) -> tuple[int, ...]:
        """Scales that feed actor/critic heads; without deep supervision only the first."""
        return tuple(range(len(self.scale_dims))) if self.deep_supervision else (0,)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ScaleConfig":
        return cls(**doc)

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


class RepSet(NamedTuple):
    """Representations of one scale: raw (h), attention (t), convolution (c), cross (z)."""

    h_op: Tensor
    h_ma: Tensor
    t_op: Tensor
    t_ma: Tensor
    c_op: Tensor
    c_ma: Tensor
    z_op: Tensor
    z_ma: Tensor

    def module(self, b: str) -> tuple[Tensor, Tensor]:
        return {"attn": (self.t_op, self.t_ma), "conv": (self.c_op, self.c_ma), "cattn": (self.z_op, self.z_ma)}[b]


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_scale_params(store: ParamStore, prefix: str, d: int, n_heads: int, cfg: ScaleConfig, rng: np.random.Generator):
    dh = d // n_heads
    store.add(f"{prefix}.embed.op.W", _uniform(rng, D_OP, (D_OP, d)))
    store.add(f"{prefix}.embed.op.b", _uniform(rng, D_OP, (d,)))
    store.add(f"{prefix}.embed.ma.W", _uniform(rng, D_MA, (D_MA, d)))
    store.add(f"{prefix}.embed.ma.b", _uniform(rng, D_MA, (d,)))
    if cfg.attn:
        for ent in ("op", "ma"):
            store.add(f"{prefix}.attn.{ent}.W", _uniform(rng, d, (d, d)))
            store.add(f"{prefix}.attn.{ent}.a_src", _uniform(rng, dh, (n_heads, dh, 1)))
            store.add(f"{prefix}.attn.{ent}.a_dst", _uniform(rng, dh, (n_heads, dh, 1)))
    if cfg.conv:
        for ent in ("op", "ma"):
            for layer in (1, 2):
                store.add(f"{prefix}.conv.{ent}.k{layer}", _uniform(rng, 3 * d, (d, d, 3)))
                store.add(f"{prefix}.conv.{ent}.b{layer}", _uniform(rng, 3 * d, (d,)))
    if cfg.cattn:
        for ent in ("op", "ma"):
            store.add(f"{prefix}.cattn.{ent}.Wq", _uniform(rng, d, (d, d)))
            store.add(f"{prefix}.cattn.{ent}.Wk", _uniform(rng, d, (d, d)))
            store.add(f"{prefix}.cattn.{ent}.a_q", _uniform(rng, dh, (n_heads, dh, 1)))
            store.add(f"{prefix}.cattn.{ent}.a_k", _uniform(rng, dh, (n_heads, dh, 1)))


def embed_entities(x_op, x_ma, store: ParamStore, prefix: str) -> tuple[Tensor, Tensor]:
    """Shared per-type embedding: linear followed by ELU."""
    h_op = ad.elu(ad.linear(x_op, store[f"{prefix}.embed.op.W"], store[f"{prefix}.embed.op.b"]))
    h_ma = ad.elu(ad.linear(x_ma, store[f"{prefix}.embed.ma.W"], store[f"{prefix}.embed.ma.b"]))
    return h_op, h_ma


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    # (B, N, d) -> (B, heads, N, d/heads)
    B, N, d = x.shape
    return ad.swapaxes(ad.reshape(x, (B, N, n_heads, d // n_heads)), 1, 2)


def _merge_heads(x: Tensor) -> Tensor:
    B, H, N, dh = x.shape
    return ad.reshape(ad.swapaxes(x, 1, 2), (B, N, H * dh))


def _head_mask(mask, shape) -> np.ndarray:
    """Lift an ``(Nq, Nk)`` or ``(B, Nq, Nk)`` mask to broadcast over heads."""
    if mask is None:
        return np.ones(shape[-2:], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    return mask[:, None] if mask.ndim == 3 else mask


def _attention(q_proj: Tensor, k_proj: Tensor, a_q: Tensor, a_k: Tensor, mask, n_heads: int) -> Tensor:
    """Graph-attention scoring ``LeakyReLU(a_q.Wq_i + a_k.Wk_j)``; values are ``Wk_j``; heads concatenated."""
    qh = _split_heads(q_proj, n_heads)
    kh = _split_heads(k_proj, n_heads)
    sq = ad.matmul(qh, a_q)  # (B, H, Nq, 1)
    sk = ad.swapaxes(ad.matmul(kh, a_k), 2, 3)  # (B, H, 1, Nk)
    scores = ad.leaky_relu(ad.add(sq, sk), 0.2)
    alpha = ad.masked_softmax(scores, _head_mask(mask, scores.shape))
    return ad.elu(_merge_heads(ad.matmul(alpha, kh)))


def _batched(x) -> Tensor:
    x = ad.as_tensor(x)
    return ad.reshape(x, (1,) + x.shape) if x.ndim == 2 else x


def self_attend(H, adjacency: np.ndarray, store: ParamStore, prefix: str, n_heads: int) -> Tensor:
    """Multi-head graph attention among entities of one type.

    ``adjacency[i, j]`` lets node ``i`` attend to node ``j``; it must include self-loops.
    """
    H = _batched(H)
    proj = ad.matmul(H, store[f"{prefix}.W"])
    return _attention(proj, proj, store[f"{prefix}.a_dst"], store[f"{prefix}.a_src"], adjacency, n_heads)


def local_conv(H, store: ParamStore, prefix: str, valid: np.ndarray | None = None) -> Tensor:
    """conv(k=3) -> tanh -> conv(k=3) along the canonical entity order.

    Rows flagged invalid (batch padding, always trailing) are zeroed before each
    convolution, which reproduces zero padding at the true sequence end.
    """
    H = _batched(H)
    keep = None if valid is None else np.asarray(valid, dtype=float)[..., None]
    if keep is not None:
        H = ad.mul(H, keep)
    y = ad.tanh(ad.conv1d(H, store[f"{prefix}.k1"], store[f"{prefix}.b1"]))
    if keep is not None:
        y = ad.mul(y, keep)
    return ad.conv1d(y, store[f"{prefix}.k2"], store[f"{prefix}.b2"])


def cross_attend(H_op, H_ma, store: ParamStore, prefix: str, n_heads: int, op_valid=None, ma_valid=None) -> tuple[Tensor, Tensor]:
    """Operations attend over all machines and machines over all operations."""
    H_op, H_ma = _batched(H_op), _batched(H_ma)

    def key_mask(valid, n_query):
        if valid is None:
            return None
        valid = np.asarray(valid, dtype=bool)
        return np.broadcast_to(valid[:, None, :], (valid.shape[0], n_query, valid.shape[1]))

    def one_way(q, k, ent, mask):
        p = f"{prefix}.{ent}"
        return _attention(
            ad.matmul(q, store[f"{p}.Wq"]), ad.matmul(k, store[f"{p}.Wk"]), store[f"{p}.a_q"], store[f"{p}.a_k"], mask, n_heads
        )

    z_op = one_way(H_op, H_ma, "op", key_mask(ma_valid, H_op.shape[1]))
    z_ma = one_way(H_ma, H_op, "ma", key_mask(op_valid, H_ma.shape[1]))
    return z_op, z_ma


def chain_adjacency(job_len) -> np.ndarray:
    job_len = np.asarray(job_len)
    N = int(job_len.sum())
    op_job = np.repeat(np.arange(len(job_len)), job_len)
    adj = np.eye(N, dtype=bool)
    idx = np.nonzero(op_job[1:] == op_job[:-1])[0]
    adj[idx, idx + 1] = True
    adj[idx + 1, idx] = True
    return adj


def complete_adjacency(valid: np.ndarray) -> np.ndarray:
    """``(B, n, n)`` all-pairs attention among valid entities; padded rows keep a self-loop."""
    valid = np.asarray(valid, dtype=bool)
    n = valid.shape[-1]
    return (valid[:, :, None] & valid[:, None, :]) | np.eye(n, dtype=bool)


def forward_scale(x_op, x_ma, op_adj, store: ParamStore, prefix: str, cfg: ScaleConfig, op_valid=None, ma_valid=None) -> RepSet:
    x_op, x_ma = _batched(x_op), _batched(x_ma)
    B, N, _ = x_op.shape
    m = x_ma.shape[1]
    if op_valid is None:
        op_valid = np.ones((B, N), dtype=bool)
    if ma_valid is None:
        ma_valid = np.ones((B, m), dtype=bool)
    h_op, h_ma = embed_entities(x_op, x_ma, store, prefix)
    if cfg.attn:
        t_op = self_attend(h_op, op_adj, store, f"{prefix}.attn.op", cfg.n_heads)
        t_ma = self_attend(h_ma, complete_adjacency(ma_valid), store, f"{prefix}.attn.ma", cfg.n_heads)
    else:
        t_op, t_ma = h_op, h_ma
    if cfg.conv:
        c_op = local_conv(t_op, store, f"{prefix}.conv.op", op_valid)
        c_ma = local_conv(t_ma, store, f"{prefix}.conv.ma", ma_valid)
    else:
        c_op, c_ma = t_op, t_ma
    if cfg.cattn:
        z_op, z_ma = cross_attend(c_op, c_ma, store, f"{prefix}.cattn", cfg.n_heads, op_valid, ma_valid)
    else:
        z_op, z_ma = c_op, c_ma
    return RepSet(h_op, h_ma, t_op, t_ma, c_op, c_ma, z_op, z_ma)


def forward_scales(x_op, x_ma, op_adj, store: ParamStore, cfg: ScaleConfig, op_valid=None, ma_valid=None) -> list[RepSet]:
    """One :class:`RepSet` per scale that feeds a head, with no parameter sharing across scales."""
    if cfg.op_graph == "complete":
        if op_valid is None:
            op_valid = np.ones(np.shape(x_op)[:-1], dtype=bool).reshape(-1, np.shape(x_op)[-2])
        op_adj = complete_adjacency(op_valid)
    return [forward_scale(x_op, x_ma, op_adj, store, f"s{s}", cfg, op_valid, ma_valid) for s in cfg.head_scales]
