"""FJSP scheduling MDP: append-only dispatch of (front operation, machine) pairs.

Operations are indexed globally in job-major order. The reward at each step is
the drop in estimated makespan, so episode returns telescope to
``EstCmax(s_0) - makespan``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, NamedTuple

import numpy as np

from .core import Assignment, DomainError, Instance, Schedule

D_OP = 10
D_MA = 8


class CandidatePair(NamedTuple):
    job_id: int
    op_index: int
    machine_id: int


class InstanceArrays:
    """Dense, precomputed views of an instance used by the environment and the network."""

    def __init__(self, instance: Instance, estimate: str = "mean"):
        if estimate not in ("mean", "min"):
            raise ValueError(f"estimate must be 'mean' or 'min', got {estimate!r}")
        self.instance = instance
        self.estimate = estimate
        self.n_jobs = n = instance.n_jobs
        self.n_machines = m = instance.n_machines
        self.job_len = np.array([len(ops) for ops in instance.jobs], dtype=np.int64)
        self.job_start = np.concatenate([[0], np.cumsum(self.job_len)[:-1]]).astype(np.int64)
        self.n_ops = N = int(self.job_len.sum())
        self.op_job = np.repeat(np.arange(n), self.job_len)
        self.op_k = np.arange(N) - self.job_start[self.op_job]
        self.dur = np.zeros((N, m), dtype=np.int64)
        for g, op in enumerate(instance.operations()):
            for j, p in op.durations.items():
                self.dur[g, j] = p
        self.compat = self.dur > 0
        self.n_compat = self.compat.sum(axis=1)
        self.mean_dur = self.dur.sum(axis=1) / self.n_compat
        self.min_dur = np.where(self.compat, self.dur, np.iinfo(np.int64).max).min(axis=1)
        self.max_dur = int(self.dur.max())
        self.est_dur = self.mean_dur if estimate == "mean" else self.min_dur.astype(float)
        self.prefix_est = np.concatenate([[0.0], np.cumsum(self.est_dur)])

    @cached_property
    def op_adjacency(self) -> np.ndarray:
        """Self-loops plus predecessor/successor links inside each job."""
        adj = np.eye(self.n_ops, dtype=bool)
        same_job = self.op_job[1:] == self.op_job[:-1]
        idx = np.nonzero(same_job)[0]
        adj[idx, idx + 1] = True
        adj[idx + 1, idx] = True
        return adj


@dataclass
class EnvState:
    arrays: InstanceArrays
    op_machine: np.ndarray
    op_start: np.ndarray
    op_end: np.ndarray
    machine_free: np.ndarray
    machine_busy: np.ndarray
    job_ready: np.ndarray
    job_front: np.ndarray
    step: int = 0
    estimates: np.ndarray = field(default=None, repr=False)

    @property
    def instance(self) -> Instance:
        return self.arrays.instance

    @property
    def done(self) -> bool:
        return self.step == self.arrays.n_ops

    @property
    def scheduled(self) -> np.ndarray:
        return self.op_machine >= 0

    @property
    def est_cmax(self) -> float:
        return float(self.estimates.max())

    def front_ops(self) -> np.ndarray:
        """Global indices of the front operation of every unfinished job (job order)."""
        a = self.arrays
        open_jobs = np.nonzero(self.job_front < a.job_len)[0]
        return a.job_start[open_jobs] + self.job_front[open_jobs]

    def copy(self) -> "EnvState":
        return EnvState(
            self.arrays,
            self.op_machine.copy(),
            self.op_start.copy(),
            self.op_end.copy(),
            self.machine_free.copy(),
            self.machine_busy.copy(),
            self.job_ready.copy(),
            self.job_front.copy(),
            self.step,
            self.estimates,
        )


def reset(instance: Instance | InstanceArrays, estimate: str = "mean") -> EnvState:
    arrays = instance if isinstance(instance, InstanceArrays) else InstanceArrays(instance, estimate)
    N, m, n = arrays.n_ops, arrays.n_machines, arrays.n_jobs
    state = EnvState(
        arrays,
        op_machine=np.full(N, -1, dtype=np.int64),
        op_start=np.zeros(N, dtype=np.int64),
        op_end=np.zeros(N, dtype=np.int64),
        machine_free=np.zeros(m, dtype=np.int64),
        machine_busy=np.zeros(m, dtype=np.int64),
        job_ready=np.zeros(n, dtype=np.int64),
        job_front=np.zeros(n, dtype=np.int64),
    )
    state.estimates = estimate_completion_times(state)
    return state


def candidates(state: EnvState) -> list[CandidatePair]:
    a = state.arrays
    out = []
    for g in state.front_ops():
        i, k = int(a.op_job[g]), int(a.op_k[g])
        out.extend(CandidatePair(i, k, int(j)) for j in np.nonzero(a.compat[g])[0])
    return out


def estimate_completion_times(state: EnvState) -> np.ndarray:
    """Actual ends for scheduled ops, chained heuristic estimates for the rest."""
    a = state.arrays
    est = state.op_end.astype(float)
    for g in state.front_ops():
        i = a.op_job[g]
        base = max(state.job_ready[i], state.machine_free[a.compat[g]].min())
        end = a.job_start[i] + a.job_len[i]
        # chained estimate: base + cumulative estimated durations from the front op onwards
        est[g:end] = base + (a.prefix_est[g + 1 : end + 1] - a.prefix_est[g])
    return est


def step(state: EnvState, pair: CandidatePair) -> tuple[EnvState, float, bool]:
    a = state.arrays
    i, k, j = pair
    if not 0 <= i < a.n_jobs or state.job_front[i] != k or k >= a.job_len[i]:
        raise DomainError(f"operation ({i},{k}) is not a front operation")
    g = int(a.job_start[i] + k)
    if not 0 <= j < a.n_machines or not a.compat[g, j]:
        raise DomainError(f"machine {j} is not compatible with operation ({i},{k})")
    p = int(a.dur[g, j])
    start = max(int(state.machine_free[j]), int(state.job_ready[i]))
    nxt = state.copy()
    nxt.op_machine[g] = j
    nxt.op_start[g] = start
    nxt.op_end[g] = start + p
    nxt.machine_free[j] = start + p
    nxt.machine_busy[j] += p
    nxt.job_ready[i] = start + p
    nxt.job_front[i] += 1
    nxt.step += 1
    nxt.estimates = estimate_completion_times(nxt)
    reward = state.est_cmax - nxt.est_cmax
    return nxt, reward, nxt.done


def to_schedule(state: EnvState) -> Schedule:
    a = state.arrays
    return Schedule(
        tuple(
            Assignment(int(a.op_job[g]), int(a.op_k[g]), int(state.op_machine[g]), int(state.op_start[g]), int(state.op_end[g]))
            for g in np.nonzero(state.scheduled)[0]
        )
    )


@dataclass
class FeatureBundle:
    x_op: np.ndarray  # (N, D_OP)
    x_ma: np.ndarray  # (m, D_MA)
    pair_mask: np.ndarray  # (|O_t|, m) over front ops in job order
    front_ops: np.ndarray  # global op index of each pair_mask row

    @property
    def eligible(self) -> np.ndarray:
        e = np.zeros(self.x_op.shape[0], dtype=bool)
        e[self.front_ops] = True
        return e

    @property
    def grid_mask(self) -> np.ndarray:
        """Pair mask scattered onto all operations; row-major order matches candidate order."""
        g = np.zeros((self.x_op.shape[0], self.x_ma.shape[0]), dtype=bool)
        g[self.front_ops] = self.pair_mask
        return g


def extract_features(state: EnvState) -> FeatureBundle:
    a = state.arrays
    N, m = a.n_ops, a.n_machines
    est = state.estimates
    cmax = est.max()
    maxp = float(a.max_dur)
    scheduled = state.scheduled
    front = state.front_ops()
    eligible = np.zeros(N, dtype=bool)
    eligible[front] = True

    remaining = (a.job_len - state.job_front)[a.op_job]
    job_len = a.job_len[a.op_job]
    unsched_work = np.where(scheduled, 0.0, a.mean_dur)
    job_rem_work = np.bincount(a.op_job, weights=unsched_work, minlength=a.n_jobs)[a.op_job]
    dur_used = np.where(scheduled, state.op_end - state.op_start, a.est_dur)
    est_start = np.where(scheduled, state.op_start, est - dur_used)

    x_op = np.stack(
        [
            scheduled.astype(float),
            eligible.astype(float),
            a.n_compat / m,
            a.mean_dur / maxp,
            a.min_dur / maxp,
            a.op_k / job_len,
            remaining / job_len,
            est / cmax,
            est_start / cmax,
            job_rem_work / cmax,
        ],
        axis=1,
    )

    clock = max(1, int(state.machine_free.max()))
    elig_compat = a.compat[front]  # (|O_t|, m)
    n_elig = elig_compat.sum(axis=0)
    elig_dur = np.where(elig_compat, a.dur[front], 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        min_elig = np.where(
            n_elig > 0,
            np.where(elig_compat, a.dur[front], np.iinfo(np.int64).max).min(axis=0, initial=np.iinfo(np.int64).max) / maxp,
            1.0,
        )
        mean_elig = np.where(n_elig > 0, elig_dur.sum(axis=0) / np.maximum(n_elig, 1) / maxp, 0.0)
    x_ma = np.stack(
        [
            state.machine_free / cmax,
            state.machine_busy / clock,
            n_elig / max(1, len(front)),
            min_elig,
            mean_elig,
            state.machine_busy / cmax,
            (state.machine_free - state.machine_busy) / cmax,
            (n_elig > 0).astype(float),
        ],
        axis=1,
    )
    return FeatureBundle(x_op, x_ma, a.compat[front].copy(), front)


def rollout(instance: Instance | InstanceArrays, choose: Callable[[EnvState, list[CandidatePair]], int]):
    """Run one episode; ``choose`` returns an index into the candidate list.

    Returns ``(final_state, rewards)``.
    """
    state = reset(instance)
    rewards = []
    while not state.done:
        cands = candidates(state)
        state, r, _ = step(state, cands[choose(state, cands)])
        rewards.append(r)
    return state, rewards
