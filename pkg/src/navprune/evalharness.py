"""IoU scoring, pruning-method comparison, and report assembly.

Accuracy at desk scale is fidelity: pixel agreement between a pruned
model's predictions and the unpruned model's own predictions on synthetic
scenes. IoU against generator ground truth is reported alongside.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionError, DomainError
from .model import ModelGraph
from .profiler import (BlockProfile, battery_extension_hours, estimate_battery_hours,
                       estimate_energy, profile_blocks, total_latency_ms)

DEFAULT_BATTERY_MAH = 7800.0
DEFAULT_BATTERY_V = 12.0


@dataclass
class IoUReport:
    per_class: dict[int, float]    # 0-100 per class present in pred or truth
    global_iou: float              # unweighted mean over classes present in truth

    def score(self, class_id: int) -> float:
        return self.per_class[class_id]


def iou(pred: np.ndarray, truth: np.ndarray) -> IoUReport:
    """Per-class intersection-over-union on a 0-100 scale."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    classes = np.union1d(np.unique(pred), np.unique(truth))
    per_class: dict[int, float] = {}
    truth_classes = set(np.unique(truth).tolist())
    for c in classes.tolist():
        p = pred == c
        t = truth == c
        union = np.logical_or(p, t).sum()
        inter = np.logical_and(p, t).sum()
        per_class[int(c)] = 100.0 * float(inter) / float(union)
    present = [per_class[c] for c in sorted(truth_classes)]
    return IoUReport(per_class=per_class,
                     global_iou=float(np.mean(present)) if present else 0.0)


def improvement(disha_iou: float, random_iou: float) -> Optional[float]:
    """Relative accuracy improvement in percent: 100 x |disha - random| / random.

    Returns None (not applicable) when the random baseline scored zero.
    """
    if random_iou < 0 or disha_iou < 0:
        raise DomainError("IoU scores cannot be negative")
    if random_iou == 0:
        return None
    return 100.0 * abs(disha_iou - random_iou) / random_iou


def fidelity(pruned_pred: np.ndarray, unpruned_pred: np.ndarray) -> float:
    """Fraction of pixels where two predictions agree."""
    a = np.asarray(pruned_pred)
    b = np.asarray(unpruned_pred)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return float((a == b).mean())


@dataclass
class MethodResult:
    name: str
    params: int
    param_reduction_pct: float
    fidelity_mean: float
    iou_global_mean: float
    latency_ms: float
    latency_reduction_pct: float
    energy_j: Optional[float] = None
    energy_reduction_pct: Optional[float] = None
    battery_hours: Optional[float] = None
    battery_extension_hours: Optional[float] = None


@dataclass
class ComparisonReport:
    scene_count: int
    methods: list[MethodResult]

    def method(self, name: str) -> MethodResult:
        for m in self.methods:
            if m.name == name:
                return m
        raise KeyError(name)

    def to_dict(self) -> dict:
        """JSON structure; everything timing-derived sits under "timing" so
        determinism checks can mask it."""
        out = {"scene_count": self.scene_count, "methods": {}, "timing": {}}
        for m in self.methods:
            out["methods"][m.name] = {
                "params": m.params,
                "param_reduction_pct": m.param_reduction_pct,
                "fidelity_mean": m.fidelity_mean,
                "iou_global_mean": m.iou_global_mean,
            }
            timing = {"latency_ms": m.latency_ms,
                      "latency_reduction_pct": m.latency_reduction_pct}
            if m.energy_j is not None:
                timing.update({"energy_J": m.energy_j,
                               "energy_reduction_pct": m.energy_reduction_pct,
                               "battery_hours": m.battery_hours,
                               "battery_extension_hours": m.battery_extension_hours})
            out["timing"][m.name] = timing
        return out

    def to_table(self) -> str:
        """Aligned text table, latency/energy columns per method."""
        headers = ["Method", "Params", "Params (%)", "Latency (%)", "Energy (%)",
                   "Fidelity", "IoU"]
        rows = []
        for m in self.methods:
            energy = f"{m.energy_reduction_pct:.2f}" if m.energy_reduction_pct is not None else "n/a"
            rows.append([m.name, str(m.params), f"{m.param_reduction_pct:.2f}",
                         f"{m.latency_reduction_pct:.2f}", energy,
                         f"{m.fidelity_mean:.4f}", f"{m.iou_global_mean:.2f}"])
        widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(headers)]
        lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(headers))]
        lines.append("  ".join("-" * w for w in widths))
        for r in rows:
            lines.append("  ".join(r[i].ljust(widths[i]) for i in range(len(headers))))
        return "\n".join(lines)


def compare_report(base_model: ModelGraph, disha_model: ModelGraph,
                   random_model: ModelGraph,
                   scenes: Sequence[tuple[np.ndarray, np.ndarray]],
                   reps: int = 10, warmup: int = 2,
                   power_w: Optional[float] = None,
                   battery_mah: float = DEFAULT_BATTERY_MAH,
                   battery_v: float = DEFAULT_BATTERY_V) -> ComparisonReport:
    """Side-by-side baseline / disha / random comparison on (image, truth) scenes."""
    shapes = {m.input_size for m in (base_model, disha_model, random_model)}
    if len(shapes) != 1:
        raise DimensionError(f"models disagree on input size: {sorted(shapes)}")

    named = (("baseline", base_model), ("disha", disha_model), ("random", random_model))
    base_preds = [base_model.predict(img) for img, _ in scenes]

    profiles: dict[str, list[BlockProfile]] = {}
    for name, model in named:
        profiles[name] = profile_blocks(model, reps=reps, warmup=warmup,
                                        include_decoder=True)
    base_latency = total_latency_ms(profiles["baseline"])
    base_params = base_model.param_count()

    energy = {}
    if power_w is not None:
        for name, _ in named:
            energy[name] = estimate_energy(profiles[name], power_w)

    results = []
    for name, model in named:
        preds = base_preds if name == "baseline" else [model.predict(img) for img, _ in scenes]
        fids = [fidelity(p, bp) for p, bp in zip(preds, base_preds)]
        ious = [iou(p, truth).global_iou for p, (_, truth) in zip(preds, scenes)]
        latency = total_latency_ms(profiles[name])
        params = model.param_count()
        r = MethodResult(
            name=name, params=params,
            param_reduction_pct=100.0 * (base_params - params) / base_params,
            fidelity_mean=float(np.mean(fids)),
            iou_global_mean=float(np.mean(ious)),
            latency_ms=latency,
            latency_reduction_pct=100.0 * (base_latency - latency) / base_latency)
        if power_w is not None:
            rep = energy[name]
            base_rep = energy["baseline"]
            r.energy_j = rep.total_energy_j
            r.energy_reduction_pct = rep.reduction_vs(base_rep)
            r.battery_hours = estimate_battery_hours(rep.avg_power_w,
                                                     battery_mah, battery_v)
            r.battery_extension_hours = battery_extension_hours(
                base_rep.avg_power_w, rep.avg_power_w, battery_mah, battery_v)
        results.append(r)
    return ComparisonReport(scene_count=len(scenes), methods=results)
