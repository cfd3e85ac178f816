"""Dataset evaluation reports and Gantt SVG emission."""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from . import env
from .core import DomainError, Instance, Schedule, format_gap, gap, makespan, validate_schedule
from .instances import load_dataset
from .policy import ReLANet
from .ppo import load_checkpoint, run_episodes

THREADS_ENV = "RELA_THREADS"
DEFAULT_SAMPLES = 100


def sample_rngs(seed: int, instance_index: int, n_samples: int) -> list[np.random.Generator]:
    """One isolated stream per (instance, sample); sample k's stream does not depend on n_samples."""
    return [np.random.default_rng([seed, instance_index, k]) for k in range(n_samples)]


def solve_with_policy(
    net: ReLANet, instance: Instance, mode: str, n_samples: int = DEFAULT_SAMPLES, seed: int = 0, index: int = 0
) -> tuple[env.EnvState, list[int]]:
    """Greedy: one rollout. Sampling: best of ``n_samples`` rollouts; also returns every sample's makespan."""
    if mode == "greedy":
        state = run_episodes(net, [instance], "greedy")[0]
        return state, [int(state.op_end.max())]
    if mode != "sampling":
        raise ValueError(f"unknown mode {mode!r}")
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    arrays = env.InstanceArrays(instance)
    states = run_episodes(net, [arrays] * n_samples, "sampling", sample_rngs(seed, index, n_samples))
    spans = [int(s.op_end.max()) for s in states]
    return states[int(np.argmin(spans))], spans


@dataclass
class RunReport:
    dataset: str
    mode: str
    n_samples: int
    seed: int
    checkpoints: list[str]
    rows: list[dict] = field(default_factory=list)  # checkpoint, instance, makespan, seconds, [reference, gap]

    def makespans(self, checkpoint: str | None = None) -> np.ndarray:
        return np.array([r["makespan"] for r in self.rows if checkpoint is None or r["checkpoint"] == checkpoint], dtype=float)

    @property
    def mean(self) -> float:
        return float(self.makespans().mean())

    @property
    def std(self) -> float:
        return float(self.makespans().std())

    def seed_means(self) -> list[float]:
        return [float(self.makespans(c).mean()) for c in self.checkpoints]

    @property
    def seed_std(self) -> float:
        return float(np.std(self.seed_means()))

    @property
    def mean_gap(self) -> float | None:
        """Gap of the mean makespan against the mean reference, when every row has a reference."""
        if not self.rows or any("reference" not in r for r in self.rows):
            return None
        ref = float(np.mean([r["reference"] for r in self.rows]))
        return gap(self.mean, ref)

    def header(self) -> dict:
        return {
            "type": "header",
            "dataset": self.dataset,
            "mode": self.mode,
            "n_samples": self.n_samples,
            "seed": self.seed,
            "checkpoints": self.checkpoints,
        }

    def summary(self) -> dict:
        out = {
            "type": "summary",
            "n_rows": len(self.rows),
            "mean": self.mean,
            "std": self.std,
            "seed_means": self.seed_means(),
            "seed_std": self.seed_std,
        }
        if self.mean_gap is not None:
            out["gap"] = self.mean_gap
        return out

    def records(self) -> list[dict]:
        return [self.header(), *({"type": "row", **r} for r in self.rows), self.summary()]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records())

    def to_table(self) -> str:
        has_gap = any("gap" in r for r in self.rows)
        lines = [
            f"# dataset={self.dataset} mode={self.mode} n_samples={self.n_samples} seed={self.seed}",
            f"{'checkpoint':<24} {'instance':<24} {'makespan':>9} {'seconds':>8}" + (f" {'gap':>8}" if has_gap else ""),
        ]
        for r in self.rows:
            line = f"{Path(r['checkpoint']).name:<24} {r['instance']:<24} {r['makespan']:>9d} {r['seconds']:>8.3f}"
            if has_gap:
                line += f" {format_gap(r['gap']) if 'gap' in r else '-':>8}"
            lines.append(line)
        lines.append(f"mean {self.mean:.2f}  std {self.std:.2f}")
        if len(self.checkpoints) > 1:
            lines.append(f"across seeds: mean {np.mean(self.seed_means()):.2f}  std {self.seed_std:.2f}")
        if self.mean_gap is not None:
            lines.append(f"gap {format_gap(self.mean_gap)}")
        return "\n".join(lines) + "\n"


def _eval_one(args) -> tuple[int, float]:
    net, instance, mode, n_samples, seed, index = args
    t0 = time.perf_counter()
    state, _ = solve_with_policy(net, instance, mode, n_samples, seed, index)
    return int(state.op_end.max()), time.perf_counter() - t0


def _workers(workers: int | None) -> int:
    if workers is None:
        workers = int(os.environ.get(THREADS_ENV, "1") or 1)
    return max(1, workers)


def evaluate_dataset(
    checkpoints: str | Path | Sequence[str | Path],
    dataset_dir: str | Path,
    mode: str = "greedy",
    n_samples: int = DEFAULT_SAMPLES,
    seed: int = 0,
    reference: dict[str, float] | None = None,
    workers: int | None = None,
) -> RunReport:
    """Evaluate one or more checkpoints (one per training seed) on every instance of a dataset."""
    if isinstance(checkpoints, (str, Path)):
        checkpoints = [checkpoints]
    dataset = load_dataset(dataset_dir)
    if not dataset:
        raise DomainError(f"dataset {dataset_dir} contains no instances")
    if mode not in ("greedy", "sampling"):
        raise ValueError(f"unknown mode {mode!r}")
    report = RunReport(str(dataset_dir), mode, n_samples if mode == "sampling" else 1, seed, [str(c) for c in checkpoints])
    n_workers = _workers(workers)
    for ckpt in checkpoints:
        net = load_checkpoint(ckpt)
        jobs = [(net, inst, mode, n_samples, seed, idx) for idx, (_, inst) in enumerate(dataset)]
        if n_workers > 1:
            with ProcessPoolExecutor(n_workers) as pool:
                results = list(pool.map(_eval_one, jobs))
        else:
            results = [_eval_one(j) for j in jobs]
        for (name, _), (span, secs) in zip(dataset, results):
            row = {"checkpoint": str(ckpt), "instance": name, "makespan": span, "seconds": secs}
            if reference and name in reference:
                row["reference"] = reference[name]
                row["gap"] = gap(span, reference[name])
            report.rows.append(row)
    return report


# Gantt charts ------------------------------------------------------------------------


@dataclass
class GanttDoc:
    svg: str
    makespan: int
    n_rows: int
    rects: list[dict]  # machine, job, op, start, end, x, width


def job_color(job: int) -> str:
    hue = (job * 137.508) % 360  # golden-angle spacing keeps neighbouring jobs distinct
    return f"hsl({hue:.1f},65%,60%)"


def emit_gantt(instance: Instance, schedule: Schedule, width: int = 800, row_height: int = 24) -> GanttDoc:
    problems = validate_schedule(instance, schedule)
    if problems:
        raise DomainError("refusing to draw an invalid schedule: " + "; ".join(problems[:5]))
    cmax = makespan(schedule)
    left, top, axis = 60, 10, 20
    scale = width / cmax
    height = top + instance.n_machines * row_height + axis
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{left + width + 10}" height="{height}" '
        f'data-makespan="{cmax}">'
    ]
    for j in range(instance.n_machines):
        y = top + j * row_height
        parts.append(f'<text x="4" y="{y + row_height * 0.7:.1f}" font-size="12">M{j + 1}</text>')
    rects = []
    for a in sorted(schedule, key=lambda a: (a.machine_id, a.start)):
        x = left + a.start * scale
        w = (a.end - a.start) * scale
        y = top + a.machine_id * row_height + 2
        rects.append({"machine": a.machine_id, "job": a.job_id, "op": a.op_index, "start": a.start, "end": a.end, "x": x, "width": w})
        label = escape(f"J{a.job_id + 1}.{a.op_index + 1} [{a.start},{a.end})")
        parts.append(
            f'<rect x="{x:.3f}" y="{y}" width="{w:.3f}" height="{row_height - 4}" fill="{job_color(a.job_id)}" '
            f'stroke="black" stroke-width="0.5" data-job="{a.job_id}" data-op="{a.op_index}" '
            f'data-machine="{a.machine_id}" data-start="{a.start}" data-end="{a.end}"><title>{label}</title></rect>'
        )
    y_axis = top + instance.n_machines * row_height
    parts.append(f'<line x1="{left}" y1="{y_axis}" x2="{left + width}" y2="{y_axis}" stroke="black"/>')
    parts.append(f'<text x="{left}" y="{y_axis + 15}" font-size="11">0</text>')
    parts.append(f'<text x="{left + width}" y="{y_axis + 15}" font-size="11" text-anchor="end">{cmax}</text>')
    parts.append("</svg>")
    return GanttDoc("\n".join(parts) + "\n", cmax, instance.n_machines, rects)
