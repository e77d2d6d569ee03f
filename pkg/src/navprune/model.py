"""ToyFormer-B0: a four-stage hierarchical segmentation transformer.

The model is declared as an explicit graph of typed operation specs. Each
prunable op records which output axis carries its removable units and which
consumer arrays must shrink in lockstep when units are removed, so the
pruner can slice producer and consumer tensors coherently.

Stage layout (defaults): overlapping patch-embed conv -> layernorm ->
spatial-reduction attention -> layernorm -> expand/depthwise/contract FFN,
with residual adds around attention and FFN. An all-linear decoder projects
every stage to a common width, resizes to quarter resolution, concatenates,
fuses, classifies, and resizes back to the input size.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor_ops as T
from .errors import (BadMagicError, ConfigurationError, DimensionError,
                     GraphConsistencyError, ModelLoadError,
                     TruncatedModelError, VersionMismatchError)

MAGIC = b"DSHA"
FORMAT_VERSION = 1

OP_KINDS = ("conv", "linear", "layernorm", "attention", "activation", "add", "resize")

CLASS_NAMES = ("background", "road", "sidewalk", "crosswalk", "vehicle", "obstacle")


@dataclass(frozen=True)
class ConsumerEdge:
    """A consumer array axis that tracks this op's output units.

    `axis` indexes the consumer's weight arrays (0 = output rows, 1 = input
    columns for conv/linear). `offset` shifts removed indices for consumers
    whose axis concatenates several producers.
    """
    op_id: str
    axis: int
    offset: int = 0


@dataclass
class OpSpec:
    op_id: str
    kind: str
    prunable: bool = False
    prune_axis: int = 0
    consumers: tuple[ConsumerEdge, ...] = ()
    stride: int = 1
    padding: int = 0
    groups: int = 1
    heads: int = 1       # attention compute ops
    head_dim: int = 0    # >0 on q/k/v: units are removed in equal per-head counts
    pair_with: str = ""  # op whose removal indices must match (q/k dot-product alignment)
    activation: str = "" # activation kind: "relu" | "gelu"
    eps: float = 1e-5    # layernorm kind

    def to_dict(self) -> dict:
        d = {"op_id": self.op_id, "kind": self.kind}
        if self.prunable:
            d["prunable"] = True
            d["prune_axis"] = self.prune_axis
        if self.consumers:
            d["consumers"] = [[c.op_id, c.axis, c.offset] for c in self.consumers]
        for attr, default in (("stride", 1), ("padding", 0), ("groups", 1),
                              ("heads", 1), ("head_dim", 0), ("pair_with", ""),
                              ("activation", ""), ("eps", 1e-5)):
            v = getattr(self, attr)
            if v != default:
                d[attr] = v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OpSpec":
        consumers = tuple(ConsumerEdge(c[0], int(c[1]), int(c[2]))
                          for c in d.get("consumers", ()))
        return cls(op_id=d["op_id"], kind=d["kind"],
                   prunable=bool(d.get("prunable", False)),
                   prune_axis=int(d.get("prune_axis", 0)),
                   consumers=consumers,
                   stride=int(d.get("stride", 1)), padding=int(d.get("padding", 0)),
                   groups=int(d.get("groups", 1)), heads=int(d.get("heads", 1)),
                   head_dim=int(d.get("head_dim", 0)),
                   pair_with=d.get("pair_with", ""),
                   activation=d.get("activation", ""), eps=float(d.get("eps", 1e-5)))


@dataclass
class BlockSpec:
    index: int
    ops: list[OpSpec]
    param_count: int = 0

    def op(self, suffix: str) -> OpSpec:
        full = f"b{self.index}.{suffix}"
        for op in self.ops:
            if op.op_id == full:
                return op
        raise KeyError(full)


@dataclass(frozen=True)
class ArchitectureConfig:
    channels: tuple[int, ...] = (16, 32, 64, 128)
    heads: tuple[int, ...] = (1, 1, 2, 4)
    sr_ratios: tuple[int, ...] = (8, 4, 2, 1)
    strides: tuple[int, ...] = (4, 2, 2, 2)
    kernels: tuple[int, ...] = (7, 3, 3, 3)
    ffn_expand: int = 2
    decoder_dim: int = 64
    class_count: int = 6
    input_size: int = 64
    init_std: float = 0.06
    # per-output-unit scale factor, log-uniform in [1/spread, spread]; gives
    # units the uneven importance profile pruning expects from trained nets
    init_unit_scale_spread: float = 3.0
    seed: int = 0
    eps: float = 1e-5

    def to_dict(self) -> dict:
        return {"channels": list(self.channels), "heads": list(self.heads),
                "sr_ratios": list(self.sr_ratios), "strides": list(self.strides),
                "kernels": list(self.kernels), "ffn_expand": self.ffn_expand,
                "decoder_dim": self.decoder_dim, "class_count": self.class_count,
                "input_size": self.input_size, "init_std": self.init_std,
                "init_unit_scale_spread": self.init_unit_scale_spread,
                "seed": self.seed, "eps": self.eps}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        return cls(channels=tuple(d["channels"]), heads=tuple(d["heads"]),
                   sr_ratios=tuple(d["sr_ratios"]), strides=tuple(d["strides"]),
                   kernels=tuple(d["kernels"]), ffn_expand=int(d["ffn_expand"]),
                   decoder_dim=int(d["decoder_dim"]), class_count=int(d["class_count"]),
                   input_size=int(d["input_size"]), init_std=float(d["init_std"]),
                   init_unit_scale_spread=float(d.get("init_unit_scale_spread", 1.0)),
                   seed=int(d["seed"]), eps=float(d["eps"]))


class ActivationTrace:
    """Per prunable unit, the running sum of absolute op-output values.

    Sums accumulate in float64 across every forward pass that writes into
    the same trace, so feeding a calibration set image by image is additive.
    """

    def __init__(self):
        self.sums: dict[str, np.ndarray] = {}
        self.samples: int = 0

    def add(self, op_id: str, out: np.ndarray, unit_axis_last: bool) -> None:
        """Accumulate |out| per unit. Units live on the last axis for token
        matrices and on the first axis for [C,H,W] feature maps."""
        x = np.abs(out.astype(np.float64))
        per_unit = x.sum(axis=tuple(range(x.ndim - 1))) if unit_axis_last \
            else x.sum(axis=tuple(range(1, x.ndim)))
        if op_id in self.sums:
            self.sums[op_id] += per_unit
        else:
            self.sums[op_id] = per_unit


@dataclass
class ModelGraph:
    config: ArchitectureConfig
    blocks: list[BlockSpec]
    decoder_ops: list[OpSpec]
    weights: dict[str, dict[str, np.ndarray]]
    class_count: int
    input_size: int

    # -- structure helpers -------------------------------------------------

    def all_ops(self):
        for block in self.blocks:
            yield from block.ops
        yield from self.decoder_ops

    def find_op(self, op_id: str) -> OpSpec:
        for op in self.all_ops():
            if op.op_id == op_id:
                return op
        raise KeyError(op_id)

    def block_of(self, op_id: str) -> int:
        """Encoder block index of an op, or 0 for decoder ops."""
        if op_id.startswith("b"):
            return int(op_id[1:op_id.index(".")])
        return 0

    def op_param_count(self, op_id: str) -> int:
        return sum(a.size for a in self.weights.get(op_id, {}).values())

    def block_param_count(self, index: int) -> int:
        return sum(self.op_param_count(op.op_id) for op in self.blocks[index - 1].ops)

    def decoder_param_count(self) -> int:
        return sum(self.op_param_count(op.op_id) for op in self.decoder_ops)

    def param_count(self) -> int:
        return sum(self.block_param_count(b.index) for b in self.blocks) \
            + self.decoder_param_count()

    def prunable_ops(self) -> list[OpSpec]:
        return [op for op in self.all_ops() if op.prunable]

    def prunable_param_count(self, block_index: int | None = None) -> int:
        total = 0
        for op in self.prunable_ops():
            if block_index is None or self.block_of(op.op_id) == block_index:
                total += self.op_param_count(op.op_id)
        return total

    def unit_count(self, op_id: str) -> int:
        op = self.find_op(op_id)
        arrays = self.weights[op_id]
        key = "weight" if "weight" in arrays else "gamma"
        return arrays[key].shape[op.prune_axis]

    # -- forward pass ------------------------------------------------------

    def forward(self, image: np.ndarray, capture: bool = False,
                trace: ActivationTrace | None = None,
                timings: dict | None = None) -> tuple[np.ndarray, ActivationTrace | None]:
        """Run one image through the model.

        Returns (logits [K,H,W], trace). The trace is None unless capture is
        requested; pass an existing trace to accumulate across images.
        """
        import time

        image = T.as_f32(image)
        size = self.input_size
        if image.shape != (3, size, size):
            raise DimensionError(
                f"input axis mismatch: got {image.shape}, expected (3, {size}, {size})")
        if capture and trace is None:
            trace = ActivationTrace()
        w = self.weights

        def cap(op_id, out, unit_axis_last):
            if capture:
                trace.add(op_id, out, unit_axis_last)

        x = image
        stage_tokens: list[np.ndarray] = []
        stage_hw: list[tuple[int, int]] = []
        for block in self.blocks:
            t0 = time.perf_counter()
            b = block.index
            p = f"b{b}."
            embed = block.op("embed")
            x = T.conv2d(x, w[p + "embed"]["weight"], w[p + "embed"]["bias"],
                         stride=embed.stride, padding=embed.padding)
            c, h, wd = x.shape
            tokens = x.reshape(c, h * wd).T  # [N, C]

            # attention sublayer
            t = T.layer_norm(tokens, w[p + "ln1"]["gamma"], w[p + "ln1"]["beta"],
                             eps=block.op("ln1").eps)
            q = T.linear(t, w[p + "attn.q"]["weight"], w[p + "attn.q"]["bias"])
            cap(p + "attn.q", q, unit_axis_last=True)
            if p + "attn.sr" in w:
                sr = block.op("attn.sr")
                red = T.conv2d(t.T.reshape(c, h, wd), w[p + "attn.sr"]["weight"],
                               w[p + "attn.sr"]["bias"], stride=sr.stride)
                cap(p + "attn.sr", red, unit_axis_last=False)
                kv_src = red.reshape(red.shape[0], -1).T
                kv_src = T.layer_norm(kv_src, w[p + "attn.sr_ln"]["gamma"],
                                      w[p + "attn.sr_ln"]["beta"],
                                      eps=block.op("attn.sr_ln").eps)
            else:
                kv_src = t
            k = T.linear(kv_src, w[p + "attn.k"]["weight"], w[p + "attn.k"]["bias"])
            cap(p + "attn.k", k, unit_axis_last=True)
            v = T.linear(kv_src, w[p + "attn.v"]["weight"], w[p + "attn.v"]["bias"])
            cap(p + "attn.v", v, unit_axis_last=True)
            a = T.attention(q, k, v, heads=block.op("attn").heads)
            a = T.linear(a, w[p + "attn.out"]["weight"], w[p + "attn.out"]["bias"])
            tokens = T.add(tokens, a)

            # FFN sublayer
            t = T.layer_norm(tokens, w[p + "ln2"]["gamma"], w[p + "ln2"]["beta"],
                             eps=block.op("ln2").eps)
            f = T.linear(t, w[p + "ffn.expand"]["weight"], w[p + "ffn.expand"]["bias"])
            cap(p + "ffn.expand", f, unit_axis_last=True)
            hidden = f.shape[1]
            fmap = f.T.reshape(hidden, h, wd)
            fmap = T.conv2d(fmap, w[p + "ffn.dw"]["weight"], w[p + "ffn.dw"]["bias"],
                            padding=block.op("ffn.dw").padding, groups=hidden)
            f = T.gelu(fmap.reshape(hidden, h * wd).T)
            f = T.linear(f, w[p + "ffn.contract"]["weight"], w[p + "ffn.contract"]["bias"])
            tokens = T.add(tokens, f)

            # the stage output is what every consumer of the stream reads, so
            # the embed group's unit statistics are taken here
            cap(p + "embed", tokens, unit_axis_last=True)
            tokens = T.layer_norm(tokens, w[p + "ln_out"]["gamma"],
                                  w[p + "ln_out"]["beta"], eps=block.op("ln_out").eps)
            stage_tokens.append(tokens)
            stage_hw.append((h, wd))
            x = tokens.T.reshape(tokens.shape[1], h, wd)
            if timings is not None:
                timings.setdefault(b, []).append(time.perf_counter() - t0)

        t0 = time.perf_counter()
        quarter = size // 4
        fused = []
        for i, (tokens, (h, wd)) in enumerate(zip(stage_tokens, stage_hw), start=1):
            proj = T.linear(tokens, w[f"dec.proj{i}"]["weight"], w[f"dec.proj{i}"]["bias"])
            fmap = proj.T.reshape(proj.shape[1], h, wd)
            fused.append(T.resize_bilinear(fmap, quarter, quarter))
        cat = np.concatenate(fused, axis=0)
        tokens = cat.reshape(cat.shape[0], quarter * quarter).T
        tokens = T.linear(tokens, w["dec.fuse"]["weight"], w["dec.fuse"]["bias"])
        tokens = T.relu(T.layer_norm(tokens, w["dec.fuse_ln"]["gamma"],
                                     w["dec.fuse_ln"]["beta"]))
        logits = T.linear(tokens, w["dec.classify"]["weight"], w["dec.classify"]["bias"])
        logits = logits.T.reshape(self.class_count, quarter, quarter)
        logits = T.resize_bilinear(logits, size, size)
        if timings is not None:
            timings.setdefault("decoder", []).append(time.perf_counter() - t0)
        return logits, (trace if capture else None)

    def predict(self, image: np.ndarray) -> np.ndarray:
        """Per-pixel class map (argmax over classes)."""
        logits, _ = self.forward(image)
        return np.argmax(logits, axis=0).astype(np.int32)


def forward(model: ModelGraph, image: np.ndarray, capture: bool = False,
            trace: ActivationTrace | None = None,
            timings: dict | None = None):
    return model.forward(image, capture=capture, trace=trace, timings=timings)


# -- construction ---------------------------------------------------------


def _validate_config(cfg: ArchitectureConfig) -> None:
    n = len(cfg.channels)
    if n != 4:
        raise ConfigurationError(f"expected 4 stages, got {n}")
    for name, seq in (("heads", cfg.heads), ("sr_ratios", cfg.sr_ratios),
                      ("strides", cfg.strides), ("kernels", cfg.kernels)):
        if len(seq) != n:
            raise ConfigurationError(f"{name} must list one value per stage")
    if any(a >= b for a, b in zip(cfg.channels, cfg.channels[1:])):
        raise ConfigurationError(f"channels must be strictly increasing, got {cfg.channels}")
    if cfg.class_count < 2:
        raise ConfigurationError(f"class_count must be >= 2, got {cfg.class_count}")
    if cfg.ffn_expand < 1 or cfg.decoder_dim < 1 or cfg.input_size < 4:
        raise ConfigurationError("ffn_expand, decoder_dim and input_size must be positive")
    if cfg.input_size % 4:
        raise ConfigurationError("input_size must be divisible by 4")
    size = cfg.input_size
    for i, (c, hds, ratio, stride, kernel) in enumerate(
            zip(cfg.channels, cfg.heads, cfg.sr_ratios, cfg.strides, cfg.kernels), start=1):
        if c % hds:
            raise ConfigurationError(f"stage {i}: heads {hds} must divide channels {c}")
        size = (size + 2 * (kernel // 2) - kernel) // stride + 1
        if size < 1:
            raise ConfigurationError(f"stage {i}: spatial size collapsed to {size}")
        if ratio > 1 and (size % ratio or size // ratio < 1):
            raise ConfigurationError(
                f"stage {i}: sr ratio {ratio} incompatible with spatial size {size}")


def _stream_consumers(cfg: ArchitectureConfig, b: int) -> tuple[ConsumerEdge, ...]:
    """Consumers of stage b's residual-stream channels.

    The attention output projection and the FFN contraction write back into
    the stream, so their output rows (axis 0) are slaved to the same units.
    """
    p = f"b{b}."
    edges = [ConsumerEdge(p + "ln1", 0), ConsumerEdge(p + "ln2", 0),
             ConsumerEdge(p + "ln_out", 0),
             ConsumerEdge(p + "attn.q", 1),
             ConsumerEdge(p + "attn.out", 0),
             ConsumerEdge(p + "ffn.expand", 1),
             ConsumerEdge(p + "ffn.contract", 0),
             ConsumerEdge(f"dec.proj{b}", 1)]
    if cfg.sr_ratios[b - 1] > 1:
        edges.insert(3, ConsumerEdge(p + "attn.sr", 1))
    else:
        edges.insert(3, ConsumerEdge(p + "attn.k", 1))
        edges.insert(4, ConsumerEdge(p + "attn.v", 1))
    if b < len(cfg.channels):
        edges.append(ConsumerEdge(f"b{b + 1}.embed", 1))
    return tuple(edges)


def build_toyformer(config: ArchitectureConfig | None = None) -> ModelGraph:
    """Build the default four-block model with seeded Gaussian weights."""
    cfg = config or ArchitectureConfig()
    _validate_config(cfg)
    rng = np.random.default_rng(cfg.seed)
    weights: dict[str, dict[str, np.ndarray]] = {}

    def gauss(*shape, unit_scales=True):
        w = rng.normal(0.0, cfg.init_std, size=shape)
        if unit_scales and cfg.init_unit_scale_spread != 1.0:
            span = np.log(cfg.init_unit_scale_spread)
            s = np.exp(rng.uniform(-span, span, size=shape[0]))
            w *= s.reshape(-1, *([1] * (len(shape) - 1)))
        return w.astype(np.float32)

    def conv_arrays(op_id, c_out, c_in, k):
        weights[op_id] = {"weight": gauss(c_out, c_in, k, k),
                          "bias": np.zeros(c_out, dtype=np.float32)}

    def linear_arrays(op_id, d_out, d_in, unit_scales=True):
        weights[op_id] = {"weight": gauss(d_out, d_in, unit_scales=unit_scales),
                          "bias": np.zeros(d_out, dtype=np.float32)}

    def ln_arrays(op_id, d):
        weights[op_id] = {"gamma": np.ones(d, dtype=np.float32),
                          "beta": np.zeros(d, dtype=np.float32)}

    blocks: list[BlockSpec] = []
    prev_c = 3
    for b, (c, hds, ratio, stride, kernel) in enumerate(
            zip(cfg.channels, cfg.heads, cfg.sr_ratios, cfg.strides, cfg.kernels), start=1):
        p = f"b{b}."
        head_dim = c // hds
        hidden = cfg.ffn_expand * c
        ops = [
            OpSpec(p + "embed", "conv", prunable=True, stride=stride,
                   padding=kernel // 2, consumers=_stream_consumers(cfg, b)),
            OpSpec(p + "ln1", "layernorm", eps=cfg.eps),
            OpSpec(p + "attn.q", "linear", prunable=True, head_dim=head_dim,
                   pair_with=p + "attn.k"),
        ]
        conv_arrays(p + "embed", c, prev_c, kernel)
        ln_arrays(p + "ln1", c)
        linear_arrays(p + "attn.q", c, c)
        if ratio > 1:
            ops.append(OpSpec(p + "attn.sr", "conv", prunable=True, stride=ratio,
                              consumers=(ConsumerEdge(p + "attn.sr_ln", 0),
                                         ConsumerEdge(p + "attn.k", 1),
                                         ConsumerEdge(p + "attn.v", 1))))
            ops.append(OpSpec(p + "attn.sr_ln", "layernorm", eps=cfg.eps))
            conv_arrays(p + "attn.sr", c, c, ratio)
            ln_arrays(p + "attn.sr_ln", c)
        ops += [
            OpSpec(p + "attn.k", "linear", prunable=True, head_dim=head_dim,
                   pair_with=p + "attn.q"),
            OpSpec(p + "attn.v", "linear", prunable=True, head_dim=head_dim,
                   consumers=(ConsumerEdge(p + "attn.out", 1),)),
            OpSpec(p + "attn", "attention", heads=hds),
            OpSpec(p + "attn.out", "linear"),
            OpSpec(p + "add1", "add"),
            OpSpec(p + "ln2", "layernorm", eps=cfg.eps),
            OpSpec(p + "ffn.expand", "linear", prunable=True,
                   consumers=(ConsumerEdge(p + "ffn.dw", 0),
                              ConsumerEdge(p + "ffn.contract", 1))),
            OpSpec(p + "ffn.dw", "conv", padding=1, groups=hidden),
            OpSpec(p + "ffn.gelu", "activation", activation="gelu"),
            OpSpec(p + "ffn.contract", "linear"),
            OpSpec(p + "add2", "add"),
            OpSpec(p + "ln_out", "layernorm", eps=cfg.eps),
        ]
        linear_arrays(p + "attn.k", c, c)
        linear_arrays(p + "attn.v", c, c)
        linear_arrays(p + "attn.out", c, c)
        ln_arrays(p + "ln2", c)
        linear_arrays(p + "ffn.expand", hidden, c)
        weights[p + "ffn.dw"] = {"weight": gauss(hidden, 1, 3, 3),
                                 "bias": np.zeros(hidden, dtype=np.float32)}
        linear_arrays(p + "ffn.contract", c, hidden)
        ln_arrays(p + "ln_out", c)
        blocks.append(BlockSpec(index=b, ops=ops))
        prev_c = c

    decoder_ops: list[OpSpec] = []
    for i, c in enumerate(cfg.channels, start=1):
        decoder_ops.append(OpSpec(
            f"dec.proj{i}", "linear",
            consumers=(ConsumerEdge("dec.fuse", 1, offset=(i - 1) * cfg.decoder_dim),)))
        linear_arrays(f"dec.proj{i}", cfg.decoder_dim, c)
        decoder_ops.append(OpSpec(f"dec.resize{i}", "resize"))
    decoder_ops.append(OpSpec("dec.fuse", "linear",
                              consumers=(ConsumerEdge("dec.fuse_ln", 0),
                                         ConsumerEdge("dec.classify", 1))))
    linear_arrays("dec.fuse", cfg.decoder_dim, cfg.decoder_dim * len(cfg.channels))
    decoder_ops.append(OpSpec("dec.fuse_ln", "layernorm", eps=cfg.eps))
    ln_arrays("dec.fuse_ln", cfg.decoder_dim)
    decoder_ops.append(OpSpec("dec.relu", "activation", activation="relu"))
    decoder_ops.append(OpSpec("dec.classify", "linear"))
    linear_arrays("dec.classify", cfg.class_count, cfg.decoder_dim, unit_scales=False)
    decoder_ops.append(OpSpec("dec.resize_out", "resize"))

    model = ModelGraph(config=cfg, blocks=blocks, decoder_ops=decoder_ops,
                       weights=weights, class_count=cfg.class_count,
                       input_size=cfg.input_size)
    refresh_param_counts(model)
    check_consistency(model)
    return model


def refresh_param_counts(model: ModelGraph) -> None:
    for block in model.blocks:
        block.param_count = model.block_param_count(block.index)


def clone(model: ModelGraph) -> ModelGraph:
    """Deep copy; weights are fresh arrays."""
    blocks = [BlockSpec(b.index, [replace(op) for op in b.ops], b.param_count)
              for b in model.blocks]
    decoder = [replace(op) for op in model.decoder_ops]
    weights = {op_id: {name: arr.copy() for name, arr in arrs.items()}
               for op_id, arrs in model.weights.items()}
    return ModelGraph(config=model.config, blocks=blocks, decoder_ops=decoder,
                      weights=weights, class_count=model.class_count,
                      input_size=model.input_size)


# -- consistency ----------------------------------------------------------


def check_consistency(model: ModelGraph) -> None:
    """Verify every producer/consumer axis pairing and the block recounts.

    Raises GraphConsistencyError on the first violation; silent on success.
    """
    # edges grouped per (consumer, axis); concat inputs are fed by several
    # producers whose unit segments must tile the axis exactly.
    grouped: dict[tuple[str, int], list[tuple[str, int, int]]] = {}
    for op in model.all_ops():
        if op.op_id not in model.weights:
            if op.kind in ("conv", "linear", "layernorm"):
                raise GraphConsistencyError(f"{op.op_id}: weights missing")
            continue
        arrays = model.weights[op.op_id]
        units = model.unit_count(op.op_id)
        if op.kind in ("conv", "linear") and arrays["bias"].shape[0] != arrays["weight"].shape[0]:
            raise GraphConsistencyError(f"{op.op_id}: bias length != output units")
        if op.prunable and op.head_dim > 0 and units % op.head_dim:
            raise GraphConsistencyError(
                f"{op.op_id}: {units} units not a multiple of head_dim {op.head_dim}")
        for edge in op.consumers:
            grouped.setdefault((edge.op_id, edge.axis), []).append(
                (op.op_id, edge.offset, units))
    for (consumer_id, axis), segments in grouped.items():
        try:
            consumer_arrays = model.weights[consumer_id]
        except KeyError:
            raise GraphConsistencyError(
                f"consumer {consumer_id} of {segments[0][0]} has no weights") from None
        spans = {arr.shape[axis] for arr in consumer_arrays.values() if arr.ndim > axis}
        if not spans:
            raise GraphConsistencyError(
                f"{consumer_id}: no weight array has axis {axis}")
        span = max(spans)
        segments = sorted(segments, key=lambda s: s[1])
        cursor = 0
        for producer_id, offset, units in segments:
            if offset != cursor:
                raise GraphConsistencyError(
                    f"{producer_id} -> {consumer_id} axis {axis}: segment starts at "
                    f"{offset}, expected {cursor}")
            cursor += units
        if cursor != span:
            raise GraphConsistencyError(
                f"{consumer_id} axis {axis}: producer units total {cursor}, "
                f"axis length is {span}")
    for block in model.blocks:
        p = f"b{block.index}."
        attn = block.op("attn")
        q = model.weights[p + "attn.q"]["weight"]
        k = model.weights[p + "attn.k"]["weight"]
        v = model.weights[p + "attn.v"]["weight"]
        if q.shape[0] != k.shape[0]:
            raise GraphConsistencyError(f"{p}attn: q units {q.shape[0]} != k units {k.shape[0]}")
        if q.shape[0] % attn.heads or v.shape[0] % attn.heads:
            raise GraphConsistencyError(
                f"{p}attn: widths {q.shape[0]}/{v.shape[0]} not divisible by heads {attn.heads}")
        if model.weights[p + "attn.out"]["weight"].shape[1] != v.shape[0]:
            raise GraphConsistencyError(f"{p}attn.out: input axis != v units")
        dw = model.weights[p + "ffn.dw"]["weight"]
        if block.op("ffn.dw").groups != dw.shape[0]:
            raise GraphConsistencyError(f"{p}ffn.dw: groups != channel count")
        if block.param_count != model.block_param_count(block.index):
            raise GraphConsistencyError(
                f"block {block.index}: recorded param count {block.param_count} "
                f"!= recount {model.block_param_count(block.index)}")


# -- serialization --------------------------------------------------------

_ARRAY_ORDER = ("weight", "bias", "gamma", "beta")


def _descriptor(model: ModelGraph) -> dict:
    ops = []
    weight_manifest = []
    for op in model.all_ops():
        ops.append(op.to_dict())
        if op.op_id in model.weights:
            arrays = model.weights[op.op_id]
            weight_manifest.append(
                {"op": op.op_id,
                 "arrays": [{"name": n, "shape": list(arrays[n].shape)}
                            for n in _ARRAY_ORDER if n in arrays]})
    return {"config": model.config.to_dict(),
            "class_count": model.class_count,
            "input_size": model.input_size,
            "blocks": [[op.op_id for op in b.ops] for b in model.blocks],
            "decoder": [op.op_id for op in model.decoder_ops],
            "ops": ops,
            "weights": weight_manifest}


def save_model(model: ModelGraph, path) -> None:
    desc = json.dumps(_descriptor(model), sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", FORMAT_VERSION))
    buf.write(struct.pack("<I", len(desc)))
    buf.write(desc)
    for entry in _descriptor(model)["weights"]:
        arrays = model.weights[entry["op"]]
        for spec in entry["arrays"]:
            arr = np.ascontiguousarray(arrays[spec["name"]], dtype="<f4")
            buf.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_model(path) -> ModelGraph:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic: {blob[:4]!r}")
    if len(blob) < 10:
        raise TruncatedModelError("file ends inside the header")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, expected {FORMAT_VERSION}")
    (desc_len,) = struct.unpack_from("<I", blob, 6)
    off = 10
    if off + desc_len > len(blob):
        raise TruncatedModelError("descriptor extends past end of file")
    try:
        desc = json.loads(blob[off:off + desc_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelLoadError(f"unreadable descriptor: {exc}") from exc
    off += desc_len

    ops_by_id = {d["op_id"]: OpSpec.from_dict(d) for d in desc["ops"]}
    weights: dict[str, dict[str, np.ndarray]] = {}
    for entry in desc["weights"]:
        arrays = {}
        for spec in entry["arrays"]:
            shape = tuple(spec["shape"])
            nbytes = int(np.prod(shape)) * 4
            if off + nbytes > len(blob):
                raise TruncatedModelError(
                    f"weight blob for {entry['op']}/{spec['name']} is truncated")
            arrays[spec["name"]] = np.frombuffer(
                blob, dtype="<f4", count=int(np.prod(shape)), offset=off
            ).reshape(shape).copy()
            off += nbytes
        weights[entry["op"]] = arrays
    if off != len(blob):
        raise ModelLoadError(f"{len(blob) - off} trailing bytes after weight blobs")

    blocks = [BlockSpec(index=i + 1, ops=[ops_by_id[op_id] for op_id in op_ids])
              for i, op_ids in enumerate(desc["blocks"])]
    decoder = [ops_by_id[op_id] for op_id in desc["decoder"]]
    model = ModelGraph(config=ArchitectureConfig.from_dict(desc["config"]),
                       blocks=blocks, decoder_ops=decoder, weights=weights,
                       class_count=int(desc["class_count"]),
                       input_size=int(desc["input_size"]))
    refresh_param_counts(model)
    check_consistency(model)
    return model
