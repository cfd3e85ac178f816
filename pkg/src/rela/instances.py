"""Synthetic SD1/SD2 generation, ``.fjs`` benchmark parsing, and JSON documents.

Generation uses Philox4x64-10 keyed by ``(seed, index)``. The 256-bit counter
starts at zero and is incremented before each block, so the first four outputs
are the block at counter 1 (numpy's ``Philox`` convention). Integers are drawn from raw 64-bit outputs by rejection
sampling, so the stream is reproducible from the generator definition alone.
Changing any of this requires bumping ``GENERATOR_VERSION``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Assignment, DomainError, Instance, OperationSpec, Schedule

GENERATOR_VERSION = 1
_U64 = 1 << 64

DURATION_RANGES = {"SD1": (1, 20), "SD2": (1, 99)}


class ParseError(ValueError):
    pass


class RngStream:
    """Deterministic integer stream for one ``(seed, index)`` pair."""

    def __init__(self, seed: int, index: int):
        key = np.array([seed % _U64, index % _U64], dtype=np.uint64)
        self._bits = np.random.Philox(key=key)

    def next_u64(self) -> int:
        return int(self._bits.random_raw())

    def randint(self, lo: int, hi: int) -> int:
        """Inclusive uniform integer in ``[lo, hi]``."""
        if hi < lo:
            raise ValueError(f"empty range [{lo}, {hi}]")
        span = hi - lo + 1
        limit = _U64 - (_U64 % span)
        while True:
            x = self.next_u64()
            if x < limit:
                return lo + x % span

    def sample(self, population: int, k: int) -> list[int]:
        """``k`` distinct values from ``range(population)`` by partial Fisher-Yates, sorted."""
        pool = list(range(population))
        for i in range(k):
            j = self.randint(i, population - 1)
            pool[i], pool[j] = pool[j], pool[i]
        return sorted(pool[:k])


@dataclass(frozen=True)
class GenConfig:
    scheme: str
    n_jobs: int
    n_machines: int
    seed: int = 0

    def __post_init__(self):
        scheme = self.scheme.upper()
        if scheme not in DURATION_RANGES:
            raise DomainError(f"unknown scheme {self.scheme!r}; expected SD1 or SD2")
        object.__setattr__(self, "scheme", scheme)
        if self.n_jobs < 1 or self.n_machines < 1:
            raise DomainError("n_jobs and n_machines must be >= 1")

    @property
    def op_count_range(self) -> tuple[int, int]:
        m = self.n_machines
        return math.ceil(0.8 * m), math.ceil(1.2 * m)


def generate_sd(config: GenConfig, index: int) -> Instance:
    rng = RngStream(config.seed, index)
    lo_ops, hi_ops = config.op_count_range
    lo_p, hi_p = DURATION_RANGES[config.scheme]
    m = config.n_machines
    jobs = []
    for i in range(config.n_jobs):
        n_ops = rng.randint(lo_ops, hi_ops)
        ops = []
        for k in range(n_ops):
            machines = rng.sample(m, rng.randint(1, m))
            ops.append(OperationSpec(i, k, {j: rng.randint(lo_p, hi_p) for j in machines}))
        jobs.append(tuple(ops))
    return Instance(config.n_jobs, m, tuple(jobs))


def parse_fjs_text(data: bytes | str) -> Instance:
    """Parse the standard Brandimarte/Hurink ``.fjs`` layout (1-based machines)."""
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    lines = [(no, ln.split()) for no, ln in enumerate(text.splitlines(), 1) if ln.strip()]
    if not lines:
        raise ParseError("line 1: empty document")

    def ints(no, tokens):
        try:
            return [int(t) for t in tokens]
        except ValueError:
            raise ParseError(f"line {no}: non-integer token in {' '.join(tokens)!r}") from None

    header_no, header = lines[0]
    if len(header) < 2:
        raise ParseError(f"line {header_no}: header needs 'n_jobs n_machines [avg]'")
    try:
        n_jobs, n_machines = int(header[0]), int(header[1])
    except ValueError:
        raise ParseError(f"line {header_no}: header counts must be integers") from None
    if n_jobs < 1 or n_machines < 1:
        raise ParseError(f"line {header_no}: counts must be positive")
    if len(lines) - 1 < n_jobs:
        raise ParseError(f"line {header_no}: header announces {n_jobs} jobs, found {len(lines) - 1} job lines")

    jobs = []
    for i, (no, tokens) in enumerate(lines[1 : n_jobs + 1]):
        vals = ints(no, tokens)
        pos = 0

        def take():
            nonlocal pos
            if pos >= len(vals):
                raise ParseError(f"line {no}: truncated job record")
            pos += 1
            return vals[pos - 1]

        n_ops = take()
        if n_ops < 1:
            raise ParseError(f"line {no}: job must have at least one operation")
        ops = []
        for k in range(n_ops):
            n_alt = take()
            if n_alt < 1:
                raise ParseError(f"line {no}: operation {k + 1} has no machine alternatives")
            durations = {}
            for _ in range(n_alt):
                machine, p = take(), take()
                if not 1 <= machine <= n_machines:
                    raise ParseError(f"line {no}: machine index {machine} out of range 1..{n_machines}")
                if p <= 0:
                    raise ParseError(f"line {no}: non-positive duration {p}")
                if machine - 1 in durations:
                    raise ParseError(f"line {no}: machine {machine} listed twice for operation {k + 1}")
                durations[machine - 1] = p
            ops.append(OperationSpec(i, k, durations))
        if pos != len(vals):
            raise ParseError(f"line {no}: {len(vals) - pos} unexpected trailing tokens")
        jobs.append(tuple(ops))
    for no, _ in lines[n_jobs + 1 :]:
        raise ParseError(f"line {no}: unexpected content after {n_jobs} job lines")
    return Instance(n_jobs, n_machines, tuple(jobs))


def emit_fjs_text(instance: Instance) -> bytes:
    flex = sum(len(op.durations) for op in instance.operations()) / instance.n_operations
    out = [f"{instance.n_jobs} {instance.n_machines} {flex:.2f}"]
    for ops in instance.jobs:
        row = [str(len(ops))]
        for op in ops:
            row.append(str(len(op.durations)))
            for machine, p in op.durations.items():
                row += [str(machine + 1), str(p)]
        out.append(" ".join(row))
    return ("\n".join(out) + "\n").encode("utf-8")


def instance_to_dict(instance: Instance) -> dict:
    return {
        "n_jobs": instance.n_jobs,
        "n_machines": instance.n_machines,
        "jobs": [[{str(j): p for j, p in op.durations.items()} for op in ops] for ops in instance.jobs],
    }


def serialize_instance(instance: Instance) -> bytes:
    return json.dumps(instance_to_dict(instance), sort_keys=True, separators=(",", ":")).encode("utf-8")


def instance_from_dict(doc) -> Instance:
    if not isinstance(doc, dict):
        raise ParseError("instance document must be an object")
    missing = {"n_jobs", "n_machines", "jobs"} - set(doc)
    if missing:
        raise ParseError(f"instance document missing keys {sorted(missing)}")
    n_jobs, n_machines, jobs = doc["n_jobs"], doc["n_machines"], doc["jobs"]
    if not (isinstance(n_jobs, int) and isinstance(n_machines, int) and isinstance(jobs, list)):
        raise ParseError("n_jobs/n_machines must be integers and jobs a list")
    try:
        built = []
        for i, ops in enumerate(jobs):
            if not isinstance(ops, list):
                raise ParseError(f"job {i} must be a list of operations")
            row = []
            for k, op in enumerate(ops):
                if not isinstance(op, dict):
                    raise ParseError(f"operation ({i},{k}) must be an object")
                durations = {}
                for j, p in op.items():
                    if not isinstance(p, int) or isinstance(p, bool):
                        raise ParseError(f"operation ({i},{k}) duration must be an integer")
                    durations[int(j)] = p
                row.append(OperationSpec(i, k, durations))
            built.append(tuple(row))
        return Instance(n_jobs, n_machines, tuple(built))
    except (DomainError, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(str(exc)) from exc


def parse_instance(data: bytes | str) -> Instance:
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise ParseError(f"line {exc.lineno}: {exc.msg}") from exc
    return instance_from_dict(doc)


def serialize_schedule(schedule: Schedule) -> bytes:
    doc = {
        "assignments": [
            {"job": a.job_id, "op": a.op_index, "machine": a.machine_id, "start": a.start, "end": a.end}
            for a in schedule
        ]
    }
    return json.dumps(doc, separators=(",", ":")).encode("utf-8")


def parse_schedule(data: bytes | str) -> Schedule:
    try:
        doc = json.loads(data)
        return Schedule(
            tuple(
                Assignment(int(a["job"]), int(a["op"]), int(a["machine"]), int(a["start"]), int(a["end"]))
                for a in doc["assignments"]
            )
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed schedule document: {exc}") from exc


def load_instance(path: str | Path) -> Instance:
    """Load by extension: ``.json`` canonical documents, anything else as ``.fjs`` text."""
    path = Path(path)
    data = path.read_bytes()
    if path.suffix == ".json":
        return parse_instance(data)
    return parse_fjs_text(data)


def load_dataset(directory: str | Path) -> list[tuple[str, Instance]]:
    directory = Path(directory)
    files = sorted(p for p in directory.iterdir() if p.suffix in {".json", ".fjs", ".txt"})
    return [(p.stem, load_instance(p)) for p in files]
