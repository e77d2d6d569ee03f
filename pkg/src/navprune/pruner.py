"""Latency-aware structured pruning.

The budget allocator scores each encoder block by the product of its
parameter count and measured latency, then distributes the global pruning
budget proportionally to that score, so slow, heavy blocks shed the most
units. Unit selection is activation-based: the units whose outputs carried
the least absolute signal on a calibration set are removed. A seeded
random selector with the same per-op budgets serves as the baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (AllocationInfeasibleError, ConfigurationError,
                     DimensionError, DomainError)
from .model import ActivationTrace, ModelGraph, check_consistency, clone, refresh_param_counts
from .profiler import BlockProfile

DEFAULT_MAX_RATIO = 0.9

METHOD_DISHA = "disha"
METHOD_RANDOM = "random"
METHODS = (METHOD_DISHA, METHOD_RANDOM)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


# -- k-scores ---------------------------------------------------------------


@dataclass(frozen=True)
class KScoreRow:
    block: int
    params: int
    latency_ms: float
    kscore: float   # params x latency_ms


@dataclass(frozen=True)
class KScoreTable:
    rows: tuple[KScoreRow, ...]
    sum_kscore: float

    def row(self, block: int) -> KScoreRow:
        for r in self.rows:
            if r.block == block:
                return r
        raise KeyError(block)

    def to_dict(self) -> dict:
        return {"rows": [{"block": r.block, "w_b": r.params, "l_b_ms": r.latency_ms,
                          "k_b": r.kscore} for r in self.rows],
                "sum_k": self.sum_kscore}


def compute_kscores(profiles: Sequence[BlockProfile],
                    use_prunable_params: bool = False) -> KScoreTable:
    """Score each encoder block as params x latency.

    With use_prunable_params the score uses only the parameter mass that the
    pruner can actually remove, which is the basis the pruning pipeline
    allocates against. Decoder entries (block 0) are ignored.
    """
    encoder = [p for p in profiles if p.block != 0]
    if not encoder:
        raise DomainError("no encoder block profiles to score")
    rows = []
    for p in encoder:
        if p.latency_ms <= 0:
            raise DomainError(f"block {p.block}: latency must be > 0, got {p.latency_ms}")
        w_b = p.prunable_param_count if use_prunable_params else p.param_count
        if w_b <= 0:
            raise DomainError(f"block {p.block}: param count must be > 0, got {w_b}")
        rows.append(KScoreRow(block=p.block, params=w_b, latency_ms=p.latency_ms,
                              kscore=w_b * p.latency_ms))
    return KScoreTable(rows=tuple(rows), sum_kscore=sum(r.kscore for r in rows))


# -- budget allocation -------------------------------------------------------


@dataclass(frozen=True)
class AllocationRow:
    block: int
    params: int
    latency_ms: float
    kscore: float
    pruned_real: float   # proportional share before integer rounding
    pruned: int          # rounded unit-mass budget for the block
    ratio: float         # per-block pruning ratio
    clamped: bool = False


@dataclass(frozen=True)
class AllocationPlan:
    ratio: float            # global pruning ratio p
    max_ratio: float
    total_params: int       # w: allocation basis summed over blocks
    budget_real: float      # p x w
    constant: float         # proportionality constant of the unclamped pool
    sum_kscore: float
    rows: tuple[AllocationRow, ...]

    def row(self, block: int) -> AllocationRow:
        for r in self.rows:
            if r.block == block:
                return r
        raise KeyError(block)

    def ratios(self) -> dict[int, float]:
        return {r.block: r.ratio for r in self.rows}

    def total_pruned(self) -> int:
        return sum(r.pruned for r in self.rows)

    def to_dict(self) -> dict:
        return {"p": self.ratio, "p_max": self.max_ratio, "w": self.total_params,
                "w_pruned": self.budget_real, "c": self.constant,
                "sum_k": self.sum_kscore,
                "blocks": [{"block": r.block, "w_b": r.params, "l_b_ms": r.latency_ms,
                            "k_b": r.kscore, "w_b_pruned_real": r.pruned_real,
                            "w_b_pruned": r.pruned, "p_b": r.ratio,
                            "clamped": r.clamped} for r in self.rows]}


def allocate(p: float, table: KScoreTable,
             max_ratio: float = DEFAULT_MAX_RATIO) -> AllocationPlan:
    """Distribute the global pruning budget p x w over blocks by k-score.

    Per-block ratios are clamped to max_ratio; the clamped residue is
    redistributed proportionally over the remaining blocks. Raises
    AllocationInfeasibleError when every block is pinned at the clamp and
    budget is still left over.
    """
    if not (0.0 < p < 1.0):
        raise DomainError(f"pruning ratio p must lie in (0, 1), got {p}")
    if not (0.0 < max_ratio <= 1.0):
        raise DomainError(f"max_ratio must lie in (0, 1], got {max_ratio}")
    rows = table.rows
    total_w = sum(r.params for r in rows)
    budget = p * total_w
    sum_k = table.sum_kscore

    pool = list(rows)
    clamped: dict[int, float] = {}
    constant = budget / sum_k
    while True:
        pool_k = sum(r.kscore for r in pool)
        pool_budget = budget - sum(clamped[b] for b in clamped)
        if not pool:
            if pool_budget > 1e-9:
                raise AllocationInfeasibleError(
                    f"budget {budget:.1f} infeasible: every block clamped at "
                    f"p_max={max_ratio} leaves {pool_budget:.1f} units unassigned")
            break
        constant = pool_budget / pool_k
        if not clamped:
            # Unclamped fast path keeps the single-block identity p_b == p exact.
            ratios = {r.block: p * ((total_w * r.latency_ms) / sum_k) for r in pool}
        else:
            ratios = {r.block: (constant * r.kscore) / r.params for r in pool}
        over = [r for r in pool if ratios[r.block] > max_ratio]
        if not over:
            break
        for r in over:
            clamped[r.block] = max_ratio * r.params
            pool.remove(r)

    out = []
    for r in rows:
        if r.block in clamped:
            real = clamped[r.block]
            ratio = max_ratio
            was_clamped = True
        else:
            real = constant * r.kscore
            ratio = ratios[r.block]
            was_clamped = False
        out.append(AllocationRow(block=r.block, params=r.params,
                                 latency_ms=r.latency_ms, kscore=r.kscore,
                                 pruned_real=real, pruned=_round_half_up(real),
                                 ratio=ratio, clamped=was_clamped))
    return AllocationPlan(ratio=p, max_ratio=max_ratio, total_params=total_w,
                          budget_real=budget, constant=constant, sum_kscore=sum_k,
                          rows=tuple(out))


# -- activation statistics ----------------------------------------------------


@dataclass
class OpActivations:
    """Summed absolute output magnitude per prunable unit of one op."""
    op_id: str
    block: int                     # encoder block; 0 would be decoder (never prunable)
    unit_count: int
    head_dim: int                  # 0: unconstrained; >0: equal per-head removal
    values: np.ndarray             # float64 [unit_count]
    pair_with: str = ""            # partner op that must drop identical indices

    def descending_order(self) -> np.ndarray:
        """Unit indices by descending activation, ties keep the lower index first."""
        return np.lexsort((np.arange(self.unit_count), -self.values))

    def sorted_values(self) -> np.ndarray:
        return self.values[self.descending_order()]


@dataclass
class ActivationStats:
    ops: list[OpActivations]
    sample_count: int = 0

    def op(self, op_id: str) -> OpActivations:
        for o in self.ops:
            if o.op_id == op_id:
                return o
        raise KeyError(op_id)


def collect_activations(model: ModelGraph,
                        calibration: Sequence[np.ndarray]) -> ActivationStats:
    """Accumulate per-unit |activation| sums over a calibration image set."""
    if len(calibration) == 0:
        raise DomainError("calibration set must not be empty")
    trace = ActivationTrace()
    for image in calibration:
        model.forward(image, capture=True, trace=trace)
    ops = []
    for op in model.prunable_ops():
        values = trace.sums[op.op_id]
        if values.shape[0] != model.unit_count(op.op_id):
            raise DimensionError(
                f"{op.op_id}: trace has {values.shape[0]} units, "
                f"model has {model.unit_count(op.op_id)} on axis {op.prune_axis}")
        ops.append(OpActivations(op_id=op.op_id, block=model.block_of(op.op_id),
                                 unit_count=int(values.shape[0]),
                                 head_dim=op.head_dim, values=values,
                                 pair_with=op.pair_with))
    return ActivationStats(ops=ops, sample_count=len(calibration))


# -- prune plans ---------------------------------------------------------------


@dataclass(frozen=True)
class OpPrune:
    op_id: str
    block: int
    unit_count: int
    removed: tuple[int, ...]       # sorted unit indices
    per_head: int = 0              # units removed per head (head-constrained ops)


@dataclass
class PrunePlan:
    method: str
    seed: int
    entries: list[OpPrune]
    warnings: list[str] = field(default_factory=list)

    def entry(self, op_id: str) -> OpPrune:
        for e in self.entries:
            if e.op_id == op_id:
                return e
        raise KeyError(op_id)

    def removed_units(self) -> int:
        return sum(len(e.removed) for e in self.entries)

    def to_dict(self) -> dict:
        return {"method": self.method, "seed": self.seed,
                "ops": [{"op": e.op_id, "block": e.block, "units": e.unit_count,
                         "removed": list(e.removed), "per_head": e.per_head}
                        for e in self.entries],
                "warnings": list(self.warnings)}


def units_to_remove(ratio: float, unit_count: int) -> int:
    """Unit budget for one op: round(p_b x U), capped at U-1."""
    return min(_round_half_up(ratio * unit_count), unit_count - 1)


def _pick_lowest(values: np.ndarray, count: int, base_index: int = 0) -> list[int]:
    # Keep-set keeps the lower index on ties, so removal takes from the tail
    # of the (descending value, ascending index) order.
    order = np.lexsort((np.arange(values.shape[0]), -values))
    keep = values.shape[0] - count
    return [base_index + int(i) for i in order[keep:]]


def _head_constrained_removal(values: np.ndarray, head_dim: int, per_head: int,
                              method: str, rng) -> list[int]:
    removed: list[int] = []
    for h in range(0, values.shape[0], head_dim):
        if method == METHOD_DISHA:
            removed.extend(_pick_lowest(values[h:h + head_dim], per_head, base_index=h))
        else:
            removed.extend(h + int(i) for i in
                           rng.choice(head_dim, size=per_head, replace=False))
    return removed


def make_prune_plan(stats: ActivationStats, alloc: AllocationPlan,
                    method: str = METHOD_DISHA, seed: int = 0) -> PrunePlan:
    """Select the units to remove from every prunable op.

    disha removes the units with the lowest accumulated |activation|;
    random removes a uniformly sampled set of the same size. Head-sliced ops
    drop an equal count per head so every head keeps one dimension, and
    paired ops (attention q/k) drop one shared index set so surviving dot
    products stay coordinate-aligned. Single-unit ops cannot be pruned to
    zero and are skipped with a warning.
    """
    if method not in METHODS:
        raise ConfigurationError(f"method must be one of {METHODS}, got {method!r}")
    ratios = alloc.ratios()
    rng = np.random.default_rng(seed)
    by_id = {o.op_id: o for o in stats.ops}
    entries: list[OpPrune] = []
    warnings: list[str] = []
    done: set[str] = set()
    for op in stats.ops:
        if op.op_id in done:
            continue
        if op.block not in ratios:
            raise ConfigurationError(
                f"{op.op_id}: no pruning ratio allocated for block {op.block}")
        p_b = ratios[op.block]
        if op.unit_count <= 1:
            warnings.append(f"{op.op_id}: single prunable unit, skipped")
            continue
        partner = by_id.get(op.pair_with) if op.pair_with else None
        if partner is not None:
            if partner.unit_count != op.unit_count or partner.head_dim != op.head_dim:
                raise ConfigurationError(
                    f"{op.op_id} and {partner.op_id} are paired but disagree on shape")
            head_dim = op.head_dim or op.unit_count
            m = units_to_remove(p_b, head_dim)
            joint = op.values + partner.values
            removed = tuple(sorted(_head_constrained_removal(joint, head_dim, m,
                                                             method, rng)))
            for target in (op, partner):
                entries.append(OpPrune(op_id=target.op_id, block=target.block,
                                       unit_count=target.unit_count,
                                       removed=removed, per_head=m))
                done.add(target.op_id)
        elif op.head_dim > 0 and op.head_dim < op.unit_count:
            m = units_to_remove(p_b, op.head_dim)
            removed = _head_constrained_removal(op.values, op.head_dim, m, method, rng)
            entries.append(OpPrune(op_id=op.op_id, block=op.block,
                                   unit_count=op.unit_count,
                                   removed=tuple(sorted(removed)), per_head=m))
        else:
            m = units_to_remove(p_b, op.unit_count)
            if method == METHOD_DISHA:
                removed = _pick_lowest(op.values, m)
            else:
                removed = [int(i) for i in
                           rng.choice(op.unit_count, size=m, replace=False)]
            entries.append(OpPrune(op_id=op.op_id, block=op.block,
                                   unit_count=op.unit_count,
                                   removed=tuple(sorted(removed))))
    return PrunePlan(method=method, seed=seed, entries=entries, warnings=warnings)


# -- applying a plan ------------------------------------------------------------


def _delete_along(arrays: dict[str, np.ndarray], axis: int,
                  indices: np.ndarray, expected_span: int) -> None:
    for name, arr in list(arrays.items()):
        if arr.ndim > axis and arr.shape[axis] >= expected_span:
            arrays[name] = np.delete(arr, indices, axis=axis)


def apply_prune(model: ModelGraph, plan: PrunePlan) -> ModelGraph:
    """Produce a new model with the planned units (and their consumer axes) removed."""
    pruned = clone(model)
    for entry in plan.entries:
        if not entry.removed:
            continue
        op = pruned.find_op(entry.op_id)
        arrays = pruned.weights[entry.op_id]
        units = pruned.unit_count(entry.op_id)
        removed = np.asarray(entry.removed, dtype=np.int64)
        if units != entry.unit_count:
            raise DomainError(
                f"{entry.op_id}: plan built for {entry.unit_count} units, "
                f"model has {units}")
        if removed.min() < 0 or removed.max() >= units or \
                np.unique(removed).size != removed.size:
            raise DomainError(f"{entry.op_id}: invalid removal indices {entry.removed}")
        _delete_along(arrays, op.prune_axis, removed, units)
        for edge in op.consumers:
            _delete_along(pruned.weights[edge.op_id], edge.axis,
                          removed + edge.offset, edge.offset + units)
        if op.head_dim > 0:
            heads = entry.unit_count // op.head_dim
            op.head_dim = (units - removed.size) // heads
    # depthwise convs keep groups == channel count
    for op in pruned.all_ops():
        if op.kind == "conv" and op.groups > 1:
            weight = pruned.weights[op.op_id]["weight"]
            if weight.shape[1] == 1:
                op.groups = weight.shape[0]
    refresh_param_counts(pruned)
    check_consistency(pruned)
    return pruned


def plan_removed_params(model: ModelGraph, plan: PrunePlan) -> int:
    """Parameter mass the plan removes on the pruned ops' own unit axes.

    This is the quantity the allocator budgets (weight rows plus bias
    entries per removed unit); consumer-axis shrinkage comes on top of it.
    """
    total = 0
    for entry in plan.entries:
        arrays = model.weights[entry.op_id]
        per_unit = arrays["weight"].size // entry.unit_count
        if "bias" in arrays:
            per_unit += 1
        total += per_unit * len(entry.removed)
    return total
