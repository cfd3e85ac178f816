"""Reference solvers: priority dispatch rules, a uniform random policy and an exact branch-and-bound."""

from __future__ import annotations

import math

import numpy as np

from . import env
from .core import Assignment, Instance, Schedule

RULES = ("SPT", "FIFO-SPT", "MWKR-SPT", "RANDOM")


def _rule_choice(rule: str, state: env.EnvState, cands: list[env.CandidatePair], rng) -> int:
    a = state.arrays
    durs = [int(a.dur[a.job_start[c.job_id] + c.op_index, c.machine_id]) for c in cands]
    if rule == "SPT":
        return int(np.argmin(durs))
    if rule == "RANDOM":
        return int(rng.integers(len(cands)))
    if rule == "FIFO-SPT":
        key = [int(state.job_ready[c.job_id]) for c in cands]
    elif rule == "MWKR-SPT":
        # remaining work measured with mean compatible durations; the argmax job comes first
        rem = np.bincount(a.op_job, weights=np.where(state.scheduled, 0.0, a.mean_dur), minlength=a.n_jobs)
        key = [-rem[c.job_id] for c in cands]
    else:
        raise ValueError(f"unknown dispatch rule {rule!r}; choose from {', '.join(RULES)}")
    # job first, then shortest machine; candidate order breaks remaining ties
    return min(range(len(cands)), key=lambda i: (key[i], durs[i], i))


def dispatch_solve(instance: Instance, rule: str, rng: np.random.Generator | None = None) -> Schedule:
    rule = rule.upper()
    if rule not in RULES:
        raise ValueError(f"unknown dispatch rule {rule!r}; choose from {', '.join(RULES)}")
    if rule == "RANDOM" and rng is None:
        rng = np.random.default_rng(0)
    state, _ = env.rollout(instance, lambda s, c: _rule_choice(rule, s, c, rng))
    return env.to_schedule(state)


def random_solve(instance: Instance, seed: int = 0) -> Schedule:
    """Uniform choice among candidate pairs at every step."""
    return dispatch_solve(instance, "RANDOM", np.random.default_rng(seed))


def _schedule_from_path(instance: Instance, path) -> Schedule:
    return Schedule(tuple(Assignment(i, k, j, s, e) for i, k, j, s, e in path))


def exact_solve(instance: Instance, node_limit: int = 2_000_000) -> tuple[Schedule, bool]:
    """Depth-first branch-and-bound over (front operation, machine) decisions.

    Returns the best schedule found and whether the search completed, in which
    case it is optimal among append-only (semi-active) schedules.
    """
    n, m = instance.n_jobs, instance.n_machines
    ops = [[sorted(op.durations.items()) for op in job] for job in instance.jobs]
    # suffix minimum work per job, indexed by the front position
    suffix = [[0] * (len(job) + 1) for job in ops]
    for i, job in enumerate(ops):
        for k in range(len(job) - 1, -1, -1):
            suffix[i][k] = suffix[i][k + 1] + min(p for _, p in job[k])
    total_ops = instance.n_operations

    best_cmax = math.inf
    best_path: list = []
    for rule in ("SPT", "FIFO-SPT", "MWKR-SPT"):
        sched = dispatch_solve(instance, rule)
        cmax = max(a.end for a in sched)
        if cmax < best_cmax:
            best_cmax = cmax
            best_path = [(a.job_id, a.op_index, a.machine_id, a.start, a.end) for a in sched]

    front = [0] * n
    ready = [0] * n
    free = [0] * m
    path: list = []
    seen: set = set()
    nodes = 0
    aborted = False

    def bound() -> int:
        lb = max(free)
        rem_total = 0
        for i in range(n):
            rem = suffix[i][front[i]]
            rem_total += rem
            lb = max(lb, ready[i] + rem)
        return max(lb, -(-(sum(free) + rem_total) // m))

    def dfs(depth: int):
        nonlocal best_cmax, best_path, nodes, aborted
        if depth == total_ops:
            cmax = max(free)
            if cmax < best_cmax:
                best_cmax, best_path = cmax, list(path)
            return
        nodes += 1
        if nodes > node_limit:
            aborted = True
            return
        key = (tuple(front), tuple(ready), tuple(free))
        if key in seen:
            return
        seen.add(key)
        children = []
        for i in range(n):
            k = front[i]
            if k == len(ops[i]):
                continue
            for j, p in ops[i][k]:
                start = max(free[j], ready[i])
                children.append((start + p, i, j, start))
        children.sort()
        for end, i, j, start in children:
            old_free, old_ready = free[j], ready[i]
            free[j] = ready[i] = end
            front[i] += 1
            if bound() < best_cmax:
                path.append((i, front[i] - 1, j, start, end))
                dfs(depth + 1)
                path.pop()
            front[i] -= 1
            free[j], ready[i] = old_free, old_ready
            if aborted:
                return

    if bound() < best_cmax:
        dfs(0)
    return _schedule_from_path(instance, best_path), not aborted
