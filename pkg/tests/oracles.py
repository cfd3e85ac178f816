"""Independent reference computations used by the tests."""

from __future__ import annotations

import numpy as np

from rela.core import Instance


def central_diff(f, x: np.ndarray, h: float = 1e-4, indices=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. array ``x``, perturbed in place."""
    grad = np.zeros_like(x, dtype=float)
    it = indices if indices is not None else np.ndindex(x.shape)
    for idx in it:
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def rel_err(a, b, floor: float = 1e-6) -> float:
    """Elementwise relative error; the floor keeps exactly-zero gradients from dividing roundoff by ~0."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def brute_force_makespan(instance: Instance) -> int:
    """Enumerate every interleaving of jobs and every machine choice under append-only timing."""
    best = [None]
    n, m = instance.n_jobs, instance.n_machines

    def rec(front, ready, free):
        open_jobs = [i for i in range(n) if front[i] < len(instance.jobs[i])]
        if not open_jobs:
            span = max(free)
            if best[0] is None or span < best[0]:
                best[0] = span
            return
        for i in open_jobs:
            for j, p in instance.jobs[i][front[i]].durations.items():
                start = max(free[j], ready[i])
                rec(
                    front[:i] + (front[i] + 1,) + front[i + 1 :],
                    ready[:i] + (start + p,) + ready[i + 1 :],
                    free[:j] + (start + p,) + free[j + 1 :],
                )

    rec((0,) * n, (0,) * n, (0,) * m)
    return best[0]


def random_small_instance(rng: np.random.Generator, max_ops: int = 6, max_jobs: int = 3, max_machines: int = 3) -> Instance:
    n_jobs = int(rng.integers(1, max_jobs + 1))
    m = int(rng.integers(1, max_machines + 1))
    budget = max_ops - n_jobs
    jobs = []
    for _ in range(n_jobs):
        extra = int(rng.integers(0, budget + 1))
        budget -= extra
        ops = []
        for _ in range(1 + extra):
            k = int(rng.integers(1, m + 1))
            machines = rng.choice(m, size=k, replace=False)
            ops.append({int(j): int(rng.integers(1, 10)) for j in machines})
        jobs.append(ops)
    return Instance.from_durations(m, jobs)


TINY = Instance.from_durations(2, [[{0: 3, 1: 5}, {0: 2, 1: 1}], [{0: 2, 1: 4}]])


def closed_form_params(cfg) -> int:
    """Parameter count from layer shapes alone."""
    total = 0
    a_hidden = (*cfg.actor_hidden, 1)
    c_hidden = (*cfg.critic_hidden, 1)

    def mlp_count(width, hidden):
        sizes = (width, *hidden)
        return sum(i * o + o for i, o in zip(sizes[:-1], sizes[1:]))

    for s in cfg.head_scales:
        d = cfg.scale_dims[s]
        total += 10 * d + d + 8 * d + d
        if cfg.attn:
            total += 2 * (d * d + 2 * d)
        if cfg.conv:
            total += 2 * 2 * (3 * d * d + d)
        if cfg.cattn:
            total += 2 * (2 * d * d + 2 * d)
        total += len(cfg.enabled) * (mlp_count(6 * d, a_hidden) + mlp_count(2 * d, c_hidden))
    return total


# Plain-numpy replica of the network forward pass -----------------------------------------
#
# Every parameter array carries a leading "copy" axis (length 1 or P), so one call
# evaluates P perturbed networks at once. It is written from the layer definitions,
# not from the library, and serves as the oracle for full-network gradient checks.


def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def _softmax(x, mask):
    x = np.where(mask, x, -np.inf)
    e = np.where(mask, np.exp(x - x.max(axis=-1, keepdims=True)), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def _gat(q, k, a_q, a_k, mask, heads):
    P = max(q.shape[0], k.shape[0], a_q.shape[0], a_k.shape[0])
    nq, nk, d = q.shape[1], k.shape[1], q.shape[2]
    qh = q.reshape(q.shape[0], nq, heads, d // heads)
    kh = k.reshape(k.shape[0], nk, heads, d // heads)
    sq = np.einsum("pnhd,phd->phn", qh, a_q[..., 0])
    sk = np.einsum("pnhd,phd->phn", kh, a_k[..., 0])
    s = sq[..., :, None] + sk[..., None, :]
    alpha = _softmax(np.where(s > 0, s, 0.2 * s), mask)
    out = np.einsum("phqk,pkhd->pqhd", alpha, np.broadcast_to(kh, (P,) + kh.shape[1:]))
    return _elu(out.reshape(P, nq, d))


def _conv(x, kern, bias):
    L = x.shape[1]
    xp = np.pad(x, [(0, 0), (1, 1), (0, 0)])
    out = sum(np.einsum("plc,poc->plo", xp[:, k : k + L], kern[..., k]) for k in range(3))
    return out + bias[:, None, :]


def _mlp(x, w, prefix, n_layers):
    for li in range(n_layers):
        W, b = w(f"{prefix}.W{li}"), w(f"{prefix}.b{li}")
        x = np.einsum("p...i,pio->p...o", x, np.broadcast_to(W, (x.shape[0],) + W.shape[1:])) + b.reshape(
            (b.shape[0],) + (1,) * (x.ndim - 2) + b.shape[1:]
        )
        if li < n_layers - 1:
            x = np.tanh(x)
    return x[..., 0]


def reference_forward(params: dict, bundle, op_adj: np.ndarray, cfg) -> tuple[np.ndarray, np.ndarray]:
    """Logits ``(P, |front|, m)`` and values ``(P,)`` for one unpadded state.

    ``params`` maps names to arrays shaped ``(1 or P, *shape)``.
    """
    P = max(v.shape[0] for v in params.values())
    H = cfg.n_heads

    def w(name):
        return params[name]

    def lin(x, name):
        W = w(name)
        return np.einsum("pni,pio->pno", np.broadcast_to(x, (max(x.shape[0], W.shape[0]),) + x.shape[1:]), np.broadcast_to(W, (max(x.shape[0], W.shape[0]),) + W.shape[1:]))

    x_op, x_ma = bundle.x_op[None], bundle.x_ma[None]
    front = bundle.front_ops
    N, m = x_op.shape[1], x_ma.shape[1]
    n_layers_a = len(cfg.actor_hidden) + 1
    n_layers_c = len(cfg.critic_hidden) + 1
    logits = np.zeros((P, len(front), m))
    values = np.zeros(P)
    for s in cfg.head_scales:
        p = f"s{s}"
        h_op = _elu(lin(x_op, f"{p}.embed.op.W") + w(f"{p}.embed.op.b")[:, None, :])
        h_ma = _elu(lin(x_ma, f"{p}.embed.ma.W") + w(f"{p}.embed.ma.b")[:, None, :])
        t_op, t_ma = h_op, h_ma
        if cfg.attn:
            po, pm = lin(h_op, f"{p}.attn.op.W"), lin(h_ma, f"{p}.attn.ma.W")
            t_op = _gat(po, po, w(f"{p}.attn.op.a_dst"), w(f"{p}.attn.op.a_src"), op_adj, H)
            t_ma = _gat(pm, pm, w(f"{p}.attn.ma.a_dst"), w(f"{p}.attn.ma.a_src"), np.ones((m, m), bool), H)
        c_op, c_ma = t_op, t_ma
        if cfg.conv:
            c_op = _conv(np.tanh(_conv(t_op, w(f"{p}.conv.op.k1"), w(f"{p}.conv.op.b1"))), w(f"{p}.conv.op.k2"), w(f"{p}.conv.op.b2"))
            c_ma = _conv(np.tanh(_conv(t_ma, w(f"{p}.conv.ma.k1"), w(f"{p}.conv.ma.b1"))), w(f"{p}.conv.ma.k2"), w(f"{p}.conv.ma.b2"))
        z_op, z_ma = c_op, c_ma
        if cfg.cattn:
            q = f"{p}.cattn"
            z_op = _gat(lin(c_op, f"{q}.op.Wq"), lin(c_ma, f"{q}.op.Wk"), w(f"{q}.op.a_q"), w(f"{q}.op.a_k"), np.ones((N, m), bool), H)
            z_ma = _gat(lin(c_ma, f"{q}.ma.Wq"), lin(c_op, f"{q}.ma.Wk"), w(f"{q}.ma.a_q"), w(f"{q}.ma.a_k"), np.ones((m, N), bool), H)
        modules = {"attn": (t_op, t_ma), "conv": (c_op, c_ma), "cattn": (z_op, z_ma)}
        for b in cfg.enabled:
            op_b, ma_b = modules[b]
            pool_op = op_b[:, front].mean(axis=1)
            pool_ma = ma_b.mean(axis=1)
            J, d = len(front), h_op.shape[2]
            blocks = [
                h_op[:, front, None, :],
                h_ma[:, None, :, :],
                op_b[:, front, None, :],
                ma_b[:, None, :, :],
                pool_op[:, None, None, :],
                pool_ma[:, None, None, :],
            ]
            grid = np.concatenate([np.broadcast_to(x, (P, J, m, d)) for x in blocks], axis=-1)
            logits = logits + _mlp(grid, w, f"actor.{b}.s{s}", n_layers_a)
            crit_in = np.broadcast_to(np.concatenate([np.broadcast_to(pool_op, (P, d)), np.broadcast_to(pool_ma, (P, d))], -1), (P, 2 * d))
            values = values + _mlp(crit_in, w, f"critic.{b}.s{s}", n_layers_c)
    return logits, values


def network_fd_gradients(named_params: dict, objective, h: float = 1e-5, chunk: int = 256) -> dict:
    """Central differences of ``objective(params) -> (P,)`` for every entry of every parameter.

    Perturbations of one tensor are evaluated as a batch of copies.
    """
    base = {k: v[None] for k, v in named_params.items()}
    grads = {}
    for name, value in named_params.items():
        flat = value.ravel()
        g = np.empty(flat.size)
        for lo in range(0, flat.size, chunk):
            idx = np.arange(lo, min(lo + chunk, flat.size))
            k = len(idx)
            copies = np.broadcast_to(flat, (2 * k, flat.size)).copy()
            copies[np.arange(k), idx] += h
            copies[k + np.arange(k), idx] -= h
            f = objective({**base, name: copies.reshape((2 * k,) + value.shape)})
            g[idx] = (f[:k] - f[k:]) / (2 * h)
        grads[name] = g.reshape(value.shape)
    return grads
