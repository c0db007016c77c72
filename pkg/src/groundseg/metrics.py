"""Ground/non-ground confusion counts, the derived scores and runtime benchmarking."""

from __future__ import annotations

import os
import platform
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import EmptyCounts, InvalidParam, ShapeMismatch

UNSCORED = -1


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def accumulate(pred, truth) -> ConfusionCounts:
    """Tally ground-vs-rest agreement; elements marked -1 in either input are skipped."""
    pred, truth = np.asarray(pred).ravel(), np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"{pred.shape} predictions vs {truth.shape} labels")
    scored = (pred != UNSCORED) & (truth != UNSCORED)
    p, t = pred[scored] == 1, truth[scored] == 1
    return ConfusionCounts(int((p & t).sum()), int((~p & ~t).sum()), int((p & ~t).sum()), int((~p & t).sum()))


@dataclass(frozen=True)
class Scores:
    accuracy: float
    ground_iou: Optional[float]  # None when TP + FP + FN == 0
    f1: Optional[float]

    @property
    def miou(self) -> Optional[float]:
        """Alias: the single-class ground IoU is reported as mIoU in the literature."""
        return self.ground_iou

    def as_dict(self) -> dict:
        return {"accuracy": self.accuracy, "ground_iou": self.ground_iou, "miou": self.ground_iou, "f1": self.f1}


def scores(c: ConfusionCounts) -> Scores:
    if c.total <= 0:
        raise EmptyCounts("no scored elements")
    acc = (c.tp + c.tn) / c.total
    iou_den = c.tp + c.fp + c.fn
    f1_den = 2 * c.tp + c.fp + c.fn
    return Scores(acc, c.tp / iou_den if iou_den else None, 2 * c.tp / f1_den if f1_den else None)


def fmt_score(v: Optional[float]) -> str:
    return "undefined" if v is None else f"{v:.4f}"


# ---------------------------------------------------------------------------
# Benchmarking
# ---------------------------------------------------------------------------


@dataclass
class StageStats:
    mean: float
    p50: float
    p99: float

    @classmethod
    def of(cls, samples: Sequence[float]) -> "StageStats":
        a = np.asarray(samples, dtype=np.float64)
        return cls(float(a.mean()), float(np.percentile(a, 50)), float(np.percentile(a, 99)))


@dataclass
class BenchReport:
    stages: dict[str, StageStats]
    end_to_end: StageStats
    frames: int
    repetitions: int
    machine: dict = field(default_factory=dict)
    config_hash: str = ""

    @property
    def hz(self) -> float:
        return 1.0 / self.end_to_end.mean if self.end_to_end.mean > 0 else float("inf")

    def as_dict(self) -> dict:
        return {
            "stages": {k: vars(v) for k, v in self.stages.items()},
            "end_to_end": vars(self.end_to_end), "hz": self.hz, "frames": self.frames,
            "repetitions": self.repetitions, "machine": self.machine, "config_hash": self.config_hash,
        }

    def table(self) -> str:
        lines = [f"{'stage':<12}{'mean ms':>10}{'p50 ms':>10}{'p99 ms':>10}"]
        for name, s in list(self.stages.items()) + [("end-to-end", self.end_to_end)]:
            lines.append(f"{name:<12}{s.mean * 1e3:>10.3f}{s.p50 * 1e3:>10.3f}{s.p99 * 1e3:>10.3f}")
        lines.append(f"throughput: {self.hz:.2f} Hz over {self.frames} frames x {self.repetitions} reps")
        return "\n".join(lines)


def machine_descriptor() -> dict:
    import torch

    return {"platform": platform.platform(), "processor": platform.processor() or platform.machine(),
            "cpus": os.cpu_count(), "python": platform.python_version(),
            "torch": torch.__version__, "torch_threads": torch.get_num_threads()}


def bench(stages: Sequence[tuple[str, Callable[[dict], dict]]], frames: Sequence, warmup: int = 1,
          repetitions: int = 5, make_ctx: Callable[[object], dict] = lambda f: {"cloud": f},
          config_hash: str = "") -> BenchReport:
    """Time each named stage over ``frames``; warmup passes are discarded."""
    if repetitions < 1:
        raise InvalidParam("repetitions must be >= 1")
    if warmup < 0 or not frames:
        raise InvalidParam("need warmup >= 0 and at least one frame")
    per_stage: dict[str, list[float]] = {name: [] for name, _ in stages}
    total: list[float] = []
    for rep in range(warmup + repetitions):
        for frame in frames:
            ctx = make_ctx(frame)
            times = []
            t_start = time.perf_counter()
            for name, fn in stages:
                t0 = time.perf_counter()
                ctx = fn(ctx)
                times.append(time.perf_counter() - t0)
            elapsed = time.perf_counter() - t_start
            if rep >= warmup:
                for (name, _), t in zip(stages, times):
                    per_stage[name].append(t)
                total.append(elapsed)
    return BenchReport({k: StageStats.of(v) for k, v in per_stage.items()}, StageStats.of(total),
                       len(frames), repetitions, machine_descriptor(), config_hash)
