"""Per-block latency measurement plus energy and battery-life estimates.

Latency is wall-clock time (monotonic clock) measured around each block's
op sequence inside full forward passes: warmup passes are discarded, then
the per-block latency is the median of chunk means over the measured reps.
Profiling is deliberately single-flight; concurrent calls are rejected to
keep measurements honest.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from statistics import median
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, DomainError, ProfilerBusyError
from .model import ModelGraph

DECODER_BLOCK = 0  # block id used for the decoder entry in profiles

_profile_lock = threading.Lock()


@dataclass
class BlockProfile:
    block: int                 # 1-based encoder block; 0 = decoder
    latency_ms: float
    latency_stddev_ms: float
    param_count: int
    prunable_param_count: int

    def to_dict(self) -> dict:
        return {"block": self.block, "latency_ms": self.latency_ms,
                "latency_stddev_ms": self.latency_stddev_ms,
                "param_count": self.param_count,
                "prunable_param_count": self.prunable_param_count}

    @classmethod
    def from_dict(cls, d: dict) -> "BlockProfile":
        return cls(block=int(d["block"]), latency_ms=float(d["latency_ms"]),
                   latency_stddev_ms=float(d.get("latency_stddev_ms", 0.0)),
                   param_count=int(d["param_count"]),
                   prunable_param_count=int(d.get("prunable_param_count",
                                                  d["param_count"])))


def _median_of_means(samples: Sequence[float], chunks: int = 5) -> float:
    chunks = max(1, min(chunks, len(samples)))
    size = len(samples) // chunks
    means = [sum(samples[i * size:(i + 1) * size]) / size for i in range(chunks)]
    return median(means)


def profile_blocks(model: ModelGraph, reps: int = 30, warmup: int = 5,
                   image: np.ndarray | None = None,
                   include_decoder: bool = False) -> list[BlockProfile]:
    """Measure per-block latency over `reps` forward passes.

    Returns one profile per encoder block (plus a trailing decoder entry
    when include_decoder is set).
    """
    if reps < 1:
        raise DomainError(f"reps must be >= 1, got {reps}")
    if warmup < 0:
        raise DomainError(f"warmup must be >= 0, got {warmup}")
    if image is None:
        image = np.random.default_rng(424242).random(
            (3, model.input_size, model.input_size)).astype(np.float32)
    if not _profile_lock.acquire(blocking=False):
        raise ProfilerBusyError("another profiling run is already in progress")
    try:
        for _ in range(warmup):
            model.forward(image)
        timings: dict = {}
        for _ in range(reps):
            model.forward(image, timings=timings)
    finally:
        _profile_lock.release()

    profiles = []
    for block in model.blocks:
        samples = [s * 1000.0 for s in timings[block.index]]
        profiles.append(BlockProfile(
            block=block.index,
            latency_ms=_median_of_means(samples),
            latency_stddev_ms=float(np.std(samples, ddof=1)) if reps > 1 else 0.0,
            param_count=block.param_count,
            prunable_param_count=model.prunable_param_count(block.index)))
    if include_decoder:
        samples = [s * 1000.0 for s in timings["decoder"]]
        profiles.append(BlockProfile(
            block=DECODER_BLOCK,
            latency_ms=_median_of_means(samples),
            latency_stddev_ms=float(np.std(samples, ddof=1)) if reps > 1 else 0.0,
            param_count=model.decoder_param_count(),
            prunable_param_count=0))
    return profiles


def synthetic_profiles(model: ModelGraph,
                       latencies_ms: Sequence[float]) -> list[BlockProfile]:
    """Profiles with injected latencies (one per encoder block), zero jitter.

    Used for reproducible pruning runs and offline descriptor fixtures.
    """
    if len(latencies_ms) != len(model.blocks):
        raise ConfigurationError(
            f"expected {len(model.blocks)} latencies, got {len(latencies_ms)}")
    if any(l <= 0 for l in latencies_ms):
        raise DomainError("latencies must be > 0")
    return [BlockProfile(block=b.index, latency_ms=float(l), latency_stddev_ms=0.0,
                         param_count=b.param_count,
                         prunable_param_count=model.prunable_param_count(b.index))
            for b, l in zip(model.blocks, latencies_ms)]


def total_latency_ms(profiles: Sequence[BlockProfile]) -> float:
    return sum(p.latency_ms for p in profiles)


@dataclass
class EnergyEntry:
    block: int
    latency_ms: float
    power_w: float
    energy_j: float


@dataclass
class EnergyReport:
    entries: list[EnergyEntry]

    @property
    def total_energy_j(self) -> float:
        return sum(e.energy_j for e in self.entries)

    @property
    def total_latency_ms(self) -> float:
        return sum(e.latency_ms for e in self.entries)

    @property
    def avg_power_w(self) -> float:
        """Average draw while continuously running inference back to back."""
        return self.total_energy_j / (self.total_latency_ms / 1000.0)

    def reduction_vs(self, baseline: "EnergyReport") -> float:
        """Percent energy reduction relative to a baseline report."""
        base = baseline.total_energy_j
        return 100.0 * (base - self.total_energy_j) / base

    def to_dict(self, baseline: "EnergyReport | None" = None) -> dict:
        d = {"per_block": [{"block": e.block, "l_b_ms": e.latency_ms,
                            "power_W": e.power_w, "energy_J": e.energy_j}
                           for e in self.entries],
             "total_energy_J": self.total_energy_j,
             "total_latency_ms": self.total_latency_ms,
             "avg_power_W": self.avg_power_w}
        if baseline is not None:
            d["energy_reduction_pct"] = self.reduction_vs(baseline)
        return d


def estimate_energy(profiles: Sequence[BlockProfile],
                    power_model: Mapping[int, float] | float) -> EnergyReport:
    """energy_J(b) = power_W(b) x latency_s(b), one entry per profile.

    power_model maps block id to watts; a bare float applies to every block.
    """
    if isinstance(power_model, (int, float)):
        power_model = {p.block: float(power_model) for p in profiles}
    entries = []
    for p in profiles:
        if p.block not in power_model:
            raise ConfigurationError(f"power model is missing block {p.block}")
        watts = float(power_model[p.block])
        if watts <= 0:
            raise DomainError(f"power for block {p.block} must be > 0, got {watts}")
        entries.append(EnergyEntry(block=p.block, latency_ms=p.latency_ms,
                                   power_w=watts,
                                   energy_j=watts * p.latency_ms / 1000.0))
    return EnergyReport(entries=entries)


def estimate_battery_hours(avg_power_w: float, capacity_mah: float,
                           voltage_v: float) -> float:
    """hours = (capacity_mAh/1000 x voltage_V) / avg_power_W.

    Nominal-voltage pack energy; no discharge-curve derating.
    """
    if avg_power_w <= 0 or capacity_mah <= 0 or voltage_v <= 0:
        raise DomainError(
            f"power/capacity/voltage must all be > 0, got "
            f"({avg_power_w}, {capacity_mah}, {voltage_v})")
    return (capacity_mah / 1000.0 * voltage_v) / avg_power_w


def battery_extension_hours(base_power_w: float, pruned_power_w: float,
                            capacity_mah: float, voltage_v: float) -> float:
    """Runtime gained by the pruned model: hours(pruned) - hours(base)."""
    return (estimate_battery_hours(pruned_power_w, capacity_mah, voltage_v)
            - estimate_battery_hours(base_power_w, capacity_mah, voltage_v))


def profiles_to_dict(profiles: Sequence[BlockProfile]) -> dict:
    return {"profiles": [p.to_dict() for p in profiles]}


def profiles_from_dict(d: dict) -> list[BlockProfile]:
    return [BlockProfile.from_dict(p) for p in d["profiles"]]
