"""Pair-wise aggregation, actor/critic heads and the masked scheduling policy."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .env import D_MA, D_OP, EnvState, FeatureBundle, extract_features
from .representation import MODULES, RepSet, ScaleConfig, forward_scales, init_scale_params


@dataclass
class StateBatch:
    """Feature tensors for ``B`` states, padded to common entity counts.

    Padding rows are trailing and flagged false in ``op_valid``/``ma_valid``;
    they are never eligible and never part of a feasible pair. Action rows are
    the front operations in job order, so the row-major order of ``pair_mask``
    matches the environment's candidate order.
    """

    x_op: np.ndarray  # (B, N, D_OP)
    x_ma: np.ndarray  # (B, M, D_MA)
    pair_mask: np.ndarray  # (B, J, M)
    front_idx: np.ndarray  # (B, J) global op index of each action row, 0 on padding
    eligible: np.ndarray  # (B, N)
    op_adj: np.ndarray  # (B, N, N)
    op_valid: np.ndarray  # (B, N)
    ma_valid: np.ndarray  # (B, M)

    @classmethod
    def from_bundles(cls, bundles: Sequence[FeatureBundle], adjacencies: Sequence[np.ndarray]) -> "StateBatch":
        B = len(bundles)
        N = max(b.x_op.shape[0] for b in bundles)
        M = max(b.x_ma.shape[0] for b in bundles)
        J = max(len(b.front_ops) for b in bundles)
        x_op = np.zeros((B, N, D_OP))
        x_ma = np.zeros((B, M, D_MA))
        pair_mask = np.zeros((B, J, M), dtype=bool)
        front_idx = np.zeros((B, J), dtype=np.int64)
        elig = np.zeros((B, N), dtype=bool)
        adj = np.broadcast_to(np.eye(N, dtype=bool), (B, N, N)).copy()
        op_valid = np.zeros((B, N), dtype=bool)
        ma_valid = np.zeros((B, M), dtype=bool)
        for i, (b, a) in enumerate(zip(bundles, adjacencies)):
            n, m, f = b.x_op.shape[0], b.x_ma.shape[0], len(b.front_ops)
            x_op[i, :n] = b.x_op
            x_ma[i, :m] = b.x_ma
            pair_mask[i, :f, :m] = b.pair_mask
            front_idx[i, :f] = b.front_ops
            elig[i, :n] = b.eligible
            adj[i, :n, :n] = a
            op_valid[i, :n] = True
            ma_valid[i, :m] = True
        return cls(x_op, x_ma, pair_mask, front_idx, elig, adj, op_valid, ma_valid)

    @classmethod
    def from_states(cls, states: Sequence[EnvState]) -> "StateBatch":
        return cls.from_bundles([extract_features(s) for s in states], [s.arrays.op_adjacency for s in states])

    @classmethod
    def concat(cls, batches: Sequence["StateBatch"]) -> "StateBatch":
        """Stack batches, re-padding to the largest entity counts."""
        shapes = {(b.x_op.shape[1], b.x_ma.shape[1], b.front_idx.shape[1]) for b in batches}
        if len(shapes) == 1:
            return cls(*(np.concatenate([getattr(b, f) for b in batches]) for f in cls.__dataclass_fields__))
        N = max(s[0] for s in shapes)
        M = max(s[1] for s in shapes)
        J = max(s[2] for s in shapes)

        def pad(arr, widths, fill=0):
            return np.pad(arr, [(0, 0)] + [(0, w - s) for w, s in zip(widths, arr.shape[1:])], constant_values=fill)

        parts = []
        for b in batches:
            n = b.x_op.shape[1]
            adj = pad(b.op_adj, (N, N))
            adj[:, np.arange(n, N), np.arange(n, N)] = True
            parts.append(
                cls(
                    pad(b.x_op, (N, D_OP)),
                    pad(b.x_ma, (M, D_MA)),
                    pad(b.pair_mask, (J, M), False),
                    pad(b.front_idx, (J,)),
                    pad(b.eligible, (N,), False),
                    adj,
                    pad(b.op_valid, (N,), False),
                    pad(b.ma_valid, (M,), False),
                )
            )
        return cls.concat(parts)

    def __len__(self):
        return self.x_op.shape[0]


class NetOutput(NamedTuple):
    logits: Tensor  # (B, J, M) over action rows
    values: Tensor  # (T,)
    reps: list[RepSet]


def _mlp_params(store: ParamStore, prefix: str, sizes: Sequence[int], rng: np.random.Generator):
    for li, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = li == len(sizes) - 2
        bound = 1.0 / np.sqrt(fan_in)
        W = np.zeros((fan_in, fan_out)) if last else rng.uniform(-bound, bound, (fan_in, fan_out))
        b = np.zeros(fan_out) if last else rng.uniform(-bound, bound, fan_out)
        store.add(f"{prefix}.W{li}", W)
        store.add(f"{prefix}.b{li}", b)


def mlp(x, store: ParamStore, prefix: str, n_layers: int) -> Tensor:
    for li in range(n_layers):
        x = ad.linear(x, store[f"{prefix}.W{li}"], store[f"{prefix}.b{li}"])
        if li < n_layers - 1:
            x = ad.tanh(x)
    return x


def pooled_blocks(op_rep: Tensor, ma_rep: Tensor, eligible: np.ndarray, ma_valid: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Mean over eligible front operations and over all machines; each ``(B, 1, d)``."""
    eligible = np.asarray(eligible, dtype=float)
    counts = eligible.sum(axis=-1, keepdims=True)
    if (counts == 0).any():
        raise ValueError("pooling over an empty eligible-operation set")
    pool_op = ad.matmul((eligible / counts)[:, None, :], op_rep)
    if ma_valid is None:
        pool_ma = ad.mean(ma_rep, axis=1, keepdims=True)
    else:
        mv = np.asarray(ma_valid, dtype=float)
        pool_ma = ad.matmul((mv / mv.sum(axis=-1, keepdims=True))[:, None, :], ma_rep)
    return pool_op, pool_ma


def aggregate_grid(rep: RepSet, b: str, eligible: np.ndarray, ma_valid: np.ndarray | None = None) -> Tensor:
    """Six-block vectors for every (operation, machine) pair: ``(B, N, m, 6d)``."""
    op_b, ma_b = rep.module(b)
    pool_op, pool_ma = pooled_blocks(op_b, ma_b, eligible, ma_valid)
    B, N, d = rep.h_op.shape
    m = rep.h_ma.shape[1]
    shape = (B, N, m, d)

    def along_ops(x):
        return ad.broadcast_to(ad.reshape(x, (B, N, 1, d)), shape)

    def along_machines(x):
        return ad.broadcast_to(ad.reshape(x, (B, 1, m, d)), shape)

    def everywhere(x):
        return ad.broadcast_to(ad.reshape(x, (B, 1, 1, d)), shape)

    return ad.concat(
        [
            along_ops(rep.h_op),
            along_machines(rep.h_ma),
            along_ops(op_b),
            along_machines(ma_b),
            everywhere(pool_op),
            everywhere(pool_ma),
        ],
        axis=-1,
    )


def actor_grid_scores(
    rep: RepSet, b: str, eligible, front_idx, ma_valid, store: ParamStore, prefix: str, n_layers: int
) -> Tensor:
    """Actor scores for every (front operation, machine) pair without materialising the 6d vectors.

    The first layer acting on a concatenation splits into per-block products, so
    the op-side, machine-side and pooled contributions are computed once and
    broadcast-added. Numerically this is ``mlp(aggregate_grid(...))`` restricted
    to the rows in ``front_idx``.
    """
    op_b, ma_b = rep.module(b)
    pool_op, pool_ma = pooled_blocks(op_b, ma_b, eligible, ma_valid)
    B, N, d = rep.h_op.shape
    m = rep.h_ma.shape[1]
    W = store[f"{prefix}.W0"]
    blk = [ad.slice_(W, 0, i * d, (i + 1) * d) for i in range(6)]
    op_part = ad.add(ad.matmul(rep.h_op, blk[0]), ad.matmul(op_b, blk[2]))
    ma_part = ad.add(ad.matmul(rep.h_ma, blk[1]), ad.matmul(ma_b, blk[3]))
    ctx = ad.add(ad.add(ad.matmul(pool_op, blk[4]), ad.matmul(pool_ma, blk[5])), store[f"{prefix}.b0"])
    width = W.shape[1]
    J = front_idx.shape[1]
    op_part = ad.getitem(op_part, (np.arange(B)[:, None], front_idx))
    x = ad.add(ad.reshape(op_part, (B, J, 1, width)), ad.reshape(ad.add(ma_part, ctx), (B, 1, m, width)))
    for li in range(1, n_layers):
        x = ad.tanh(x)
        x = ad.linear(x, store[f"{prefix}.W{li}"], store[f"{prefix}.b{li}"])
    return ad.reshape(x, (B, J, m))


def aggregate_pairs(reps: Sequence[RepSet], pairs: Sequence[tuple[int, int]], eligible: np.ndarray, cfg: ScaleConfig) -> dict:
    """Per ``(module, scale)``: a ``(P, 6d)`` matrix for candidate ``(op, machine)`` pairs of one state."""
    if not pairs:
        raise ValueError("no candidate pairs to aggregate")
    eligible = np.asarray(eligible).reshape(1, -1)
    ops = np.array([g for g, _ in pairs])
    machines = np.array([j for _, j in pairs])
    out = {}
    for s, rep in zip(cfg.head_scales, reps):
        for b in MODULES:
            grid = aggregate_grid(rep, b, eligible)
            out[(b, s)] = ad.getitem(grid, (0, ops, machines))
    return out


def score_pairs(agg: dict, store: ParamStore, cfg: ScaleConfig) -> Tensor:
    """Sum of every enabled actor's scalar score; works on grids and on pair lists."""
    n_layers = len(cfg.actor_hidden) + 1
    total = None
    for (b, s), h in agg.items():
        if b not in cfg.enabled or s not in cfg.head_scales:
            continue
        score = mlp(h, store, f"actor.{b}.s{s}", n_layers)
        score = ad.reshape(score, score.shape[:-1])
        total = score if total is None else ad.add(total, score)
    if total is None:
        any_h = next(iter(agg.values()))
        return ad.Tensor(np.zeros(any_h.shape[:-1]))
    return total


def state_value(reps: Sequence[RepSet], eligible: np.ndarray, store: ParamStore, cfg: ScaleConfig, ma_valid=None) -> Tensor:
    """Sum of critics, each fed only the pooled op and machine blocks of its module."""
    eligible = np.asarray(eligible)
    if eligible.ndim == 1:
        eligible = eligible[None]
    n_layers = len(cfg.critic_hidden) + 1
    total = None
    for s, rep in zip(cfg.head_scales, reps):
        for b in cfg.enabled:
            pool_op, pool_ma = pooled_blocks(*rep.module(b), eligible, ma_valid)
            h = ad.concat([pool_op, pool_ma], axis=-1)  # (B, 1, 2d)
            v = mlp(h, store, f"critic.{b}.s{s}", n_layers)
            v = ad.reshape(v, (v.shape[0],))
            total = v if total is None else ad.add(total, v)
    if total is None:
        return ad.Tensor(np.zeros(eligible.shape[0]))
    return total


def policy_distribution(logits, mask) -> Tensor:
    return ad.masked_softmax(logits, mask)


def select_action(probs: np.ndarray, mode: str, rng: np.random.Generator | None = None) -> tuple[int, float]:
    """Greedy picks the lowest-index argmax; sampling inverts the CDF with one uniform draw."""
    probs = np.asarray(probs, dtype=float)
    if mode == "greedy":
        idx = int(np.argmax(probs))
    elif mode == "sampling":
        u = rng.random()
        cdf = np.cumsum(probs)
        idx = int(np.searchsorted(cdf, u, side="right"))
        if idx >= len(probs) or probs[idx] == 0.0:
            idx = int(np.nonzero(probs > 0)[0][-1])
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return idx, float(np.log(probs[idx]))


class ReLANet:
    """All parameters of the representation pipeline plus actor and critic heads."""

    def __init__(self, config: ScaleConfig | None = None, seed: int = 0):
        self.config = cfg = config or ScaleConfig()
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        for s in cfg.head_scales:
            init_scale_params(self.store, f"s{s}", cfg.scale_dims[s], cfg.n_heads, cfg, rng)
        for s in cfg.head_scales:
            d = cfg.scale_dims[s]
            for b in cfg.enabled:
                _mlp_params(self.store, f"actor.{b}.s{s}", (6 * d, *cfg.actor_hidden, 1), rng)
                _mlp_params(self.store, f"critic.{b}.s{s}", (2 * d, *cfg.critic_hidden, 1), rng)

    @property
    def n_actor_heads(self) -> int:
        return len(self.config.head_scales) * len(self.config.enabled)

    def forward(self, batch: StateBatch) -> NetOutput:
        cfg = self.config
        reps = forward_scales(batch.x_op, batch.x_ma, batch.op_adj, self.store, cfg, batch.op_valid, batch.ma_valid)
        n_layers = len(cfg.actor_hidden) + 1
        logits = None
        for s, rep in zip(cfg.head_scales, reps):
            for b in cfg.enabled:
                score = actor_grid_scores(
                    rep, b, batch.eligible, batch.front_idx, batch.ma_valid, self.store, f"actor.{b}.s{s}", n_layers
                )
                logits = score if logits is None else ad.add(logits, score)
        if logits is None:
            logits = ad.Tensor(np.zeros(batch.pair_mask.shape))
        values = state_value(reps, batch.eligible, self.store, cfg, batch.ma_valid)
        return NetOutput(logits, values, reps)

    def candidate_probs(self, state: EnvState) -> tuple[np.ndarray, float]:
        """Inference-mode probabilities over ``candidates(state)`` order, and the state value."""
        batch = StateBatch.from_states([state])
        out = self.forward(batch)
        mask = batch.pair_mask[0].ravel()
        probs = ad.masked_softmax(out.logits.data[0].ravel(), mask).data
        return probs[mask], float(out.values.data[0])
