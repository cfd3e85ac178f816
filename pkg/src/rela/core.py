"""FJSP domain model: instances, schedules, feasibility checks and gap accounting."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping


class DomainError(ValueError):
    """Raised when an operation is called outside its domain."""


@dataclass(frozen=True)
class OperationSpec:
    job_id: int
    op_index: int
    durations: Mapping[int, int]  # machine index (0-based) -> processing time

    def __post_init__(self):
        if not self.durations:
            raise DomainError(f"operation ({self.job_id},{self.op_index}) has no compatible machine")
        for machine, p in self.durations.items():
            if not isinstance(p, int) or isinstance(p, bool) or p <= 0:
                raise DomainError(
                    f"operation ({self.job_id},{self.op_index}) has non-positive or "
                    f"non-integer duration {p!r} on machine {machine}"
                )
        object.__setattr__(self, "durations", dict(sorted(self.durations.items())))

    @property
    def machines(self) -> list[int]:
        return list(self.durations)

    @property
    def min_duration(self) -> int:
        return min(self.durations.values())

    @property
    def mean_duration(self) -> float:
        return sum(self.durations.values()) / len(self.durations)


@dataclass(frozen=True)
class Instance:
    """An immutable FJSP problem. ``jobs[i][k]`` is operation k of job i."""

    n_jobs: int
    n_machines: int
    jobs: tuple[tuple[OperationSpec, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "jobs", tuple(tuple(ops) for ops in self.jobs))
        if self.n_jobs < 1 or self.n_machines < 1:
            raise DomainError("an instance needs at least one job and one machine")
        if len(self.jobs) != self.n_jobs:
            raise DomainError(f"expected {self.n_jobs} jobs, got {len(self.jobs)}")
        for i, ops in enumerate(self.jobs):
            if not ops:
                raise DomainError(f"job {i} has no operations")
            for k, op in enumerate(ops):
                if op.job_id != i or op.op_index != k:
                    raise DomainError(f"operation at ({i},{k}) is labelled ({op.job_id},{op.op_index})")
                for machine in op.durations:
                    if not 0 <= machine < self.n_machines:
                        raise DomainError(f"operation ({i},{k}) uses unknown machine {machine}")

    @classmethod
    def from_durations(cls, n_machines: int, jobs: Iterable[Iterable[Mapping[int, int]]]) -> "Instance":
        """Build an instance from nested ``[[{machine: duration}, ...], ...]`` lists."""
        built = tuple(
            tuple(OperationSpec(i, k, dict(d)) for k, d in enumerate(ops)) for i, ops in enumerate(jobs)
        )
        return cls(len(built), n_machines, built)

    @property
    def n_operations(self) -> int:
        return sum(len(ops) for ops in self.jobs)

    def operations(self) -> Iterable[OperationSpec]:
        for ops in self.jobs:
            yield from ops


@dataclass(frozen=True)
class Assignment:
    job_id: int
    op_index: int
    machine_id: int
    start: int
    end: int


@dataclass(frozen=True)
class Schedule:
    assignments: tuple[Assignment, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "assignments", tuple(self.assignments))

    def __len__(self):
        return len(self.assignments)

    def __iter__(self):
        return iter(self.assignments)


def makespan(schedule: Schedule):
    if not len(schedule):
        raise DomainError("makespan of an empty schedule is undefined")
    return max(a.end for a in schedule)


def validate_schedule(instance: Instance, schedule: Schedule) -> list[str]:
    """Return human-readable violations; an empty list means the schedule is feasible."""
    violations: list[str] = []
    seen: dict[tuple[int, int], Assignment] = {}
    for a in schedule:
        key = (a.job_id, a.op_index)
        if not (0 <= a.job_id < instance.n_jobs and 0 <= a.op_index < len(instance.jobs[a.job_id])):
            violations.append(f"unknown operation {key}")
            continue
        if key in seen:
            violations.append(f"duplicate operation {key}")
            continue
        seen[key] = a
        op = instance.jobs[a.job_id][a.op_index]
        if a.start < 0:
            violations.append(f"negative start for operation {key}")
        if a.machine_id not in op.durations:
            violations.append(f"incompatible machine {a.machine_id} for operation {key}")
        elif a.end - a.start != op.durations[a.machine_id]:
            violations.append(
                f"duration mismatch for operation {key}: {a.end - a.start} != {op.durations[a.machine_id]}"
            )
    for op in instance.operations():
        if (op.job_id, op.op_index) not in seen:
            violations.append(f"missing operation {(op.job_id, op.op_index)}")

    by_machine: dict[int, list[Assignment]] = {}
    for a in seen.values():
        by_machine.setdefault(a.machine_id, []).append(a)
    for machine, items in sorted(by_machine.items()):
        items.sort(key=lambda a: (a.start, a.end))
        prev = items[0]  # the latest-ending interval seen so far
        for cur in items[1:]:
            if cur.start < prev.end:
                violations.append(
                    f"machine overlap on {machine}: {(prev.job_id, prev.op_index)} "
                    f"[{prev.start},{prev.end}) and {(cur.job_id, cur.op_index)} [{cur.start},{cur.end})"
                )
            if cur.end > prev.end:
                prev = cur

    for i, ops in enumerate(instance.jobs):
        for k in range(1, len(ops)):
            prev, cur = seen.get((i, k - 1)), seen.get((i, k))
            if prev is not None and cur is not None and cur.start < prev.end:
                violations.append(f"precedence violated in job {i}: op {k} starts at {cur.start} before op {k - 1} ends at {prev.end}")
    return violations


def gap(value, reference) -> float:
    """Percent gap of ``value`` relative to ``reference``; negative when better."""
    if reference <= 0:
        raise DomainError(f"reference must be positive, got {reference}")
    exact = Fraction(str(value)) if isinstance(value, float) else Fraction(value)
    ref = Fraction(str(reference)) if isinstance(reference, float) else Fraction(reference)
    return float(100 * (exact - ref) / ref)


def format_gap(pct: float) -> str:
    return f"{pct:.2f}%"


def job_lower_bound(instance: Instance) -> int:
    return max(sum(op.min_duration for op in ops) for ops in instance.jobs)
