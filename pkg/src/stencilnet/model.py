"""Sequential(+residual) models: config loading, planning and inference.

A config is YAML with ``name``, ``input: [H, W, C]`` and a ``layers`` list.
Residual connections are written as a ``save`` entry followed later by an
``add`` entry naming it (optionally with a ``shortcut`` list of layers applied
to the saved tensor first).  See ``docs/config.md`` for every field.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import layers as L
from .engine import Pointwise, run_layer
from .kernels import KernelConfig, choose_config
from .layout import (BlockedTensor, PackedWeights, PlainTensor, ceil_div, pack_activations,
                     pack_weights, read_weight_payload, unpack_activations)
from .lcg import Lcg
from .oracle import oracle_layer, oracle_layer_quantized
from .params import LayerParams, ReductionOp, ShapeError, output_shape
from .quantized import (QuantParams, pack_quantized_weights, quantize, quantize_array,
                        run_layer_quantized)

log = logging.getLogger(__name__)

SHIPPED = ("mobilenet", "resnet", "dscnn", "dscnn_square", "autoencoder")
DEFAULT_WEIGHT_SEED = 0x5EED
DEFAULT_INPUT_SEED = 0x1A7A


class ConfigError(ValueError):
    pass


@dataclass
class Step:
    index: int
    label: str
    layer: L.Layer
    params: LayerParams
    in_shape: tuple[int, int, int]
    out_shape: tuple[int, int, int]
    config: KernelConfig
    inputs: list[str]          # value names; inputs[0] is the primary operand
    output: str
    fused: bool = False        # activation expanded from its producer's entry
    weights: np.ndarray | None = None        # plain [G][K][F_C][F_H][F_W]
    affine: tuple[np.ndarray, np.ndarray] | None = None
    packed: PackedWeights | None = None

    @property
    def weight_shape(self) -> tuple[int, ...] | None:
        """``[G][K][F_C][F_H][F_W]`` for FMA steps, else None."""
        if self.layer.op is not ReductionOp.FMA:
            return None
        p = self.params
        groups = output_shape(p, self.in_shape).groups
        return (groups, p.k, p.f_c, p.f_h, p.f_w)

    @property
    def param_count(self) -> int:
        """Learned values only; fixed pooling weights and sign flips are free."""
        if not self.layer.learned:
            return 0
        if self.layer.op is ReductionOp.FMA:
            return math.prod(self.weight_shape)
        if self.layer.op is ReductionOp.POINTWISE_FMA_BINARY and self.layer.pointwise_mode == "affine":
            return 2 * self.in_shape[2]
        return 0


@dataclass
class ModelPlan:
    name: str
    input_shape: tuple[int, int, int]
    block: int
    steps: list[Step]
    value_shapes: dict[str, tuple[int, int, int]]
    slots: dict[str, int] = field(default_factory=dict)   # value -> slot index
    n_slots: int = 0
    slot_elems: int = 0

    @property
    def param_count(self) -> int:
        return sum(s.param_count for s in self.steps)

    @property
    def memory_bytes(self) -> int:
        return memory_report(self, "float").total_bytes

    @property
    def output_value(self) -> str:
        return self.steps[-1].output

    @property
    def output_shape(self) -> tuple[int, int, int]:
        return self.steps[-1].out_shape


# -- config parsing ---------------------------------------------------------------

def shipped_config(name: str) -> Path:
    path = resources.files("stencilnet") / "configs" / f"{name}.yaml"
    return Path(str(path))


def _layer_from_entry(e: dict) -> L.Layer:
    kind = e.get("type")
    kernel = e.get("kernel", 1)
    fh, fw = (kernel, kernel) if isinstance(kernel, int) else tuple(kernel)
    stride = e.get("stride", 1)
    padding = e.get("padding", "valid")
    if isinstance(padding, list):
        padding = tuple(padding)
    if kind == "conv":
        return L.conv2d(fh, fw, stride, e["channels"], padding)
    if kind == "depthwise":
        return L.depthwise_conv(fh, fw, stride, padding)
    if kind == "group_conv":
        return L.group_conv(fh, fw, stride, e["channels_per_group"], e["filters_per_group"], padding)
    if kind == "maxpool":
        return L.maxpool(fh, fw, e.get("stride"), padding)
    if kind == "avgpool":
        if "kernel" not in e:
            return L.avgpool()
        return L.avgpool(fh, fw, e.get("stride"))
    if kind == "relu":
        return L.relu()
    if kind == "fc":
        return L.fully_connected(e["channels"])
    if kind == "batchnorm":
        return L.batchnorm_affine()
    if kind == "upsample":
        return L.upsample_nearest(e.get("scale", 2))
    raise ConfigError(f"unknown layer type {kind!r}")


def _activation_layers(name: str | None) -> list[L.Layer]:
    if name in (None, "none", "linear"):
        return []
    if name == "relu":
        return [L.relu()]
    if name == "relu6":
        # min(relu(x), 6) == -max(-relu(x), -6)
        neg = L.Layer("negate", ReductionOp.POINTWISE_FMA_BINARY, pointwise_mode="affine", learned=False)
        cap = L.Layer("cap", ReductionOp.MAX, max_seed=-6.0)
        return [L.relu(), neg, cap, neg]
    raise ConfigError(f"unknown activation {name!r}")


def parse_config(text: str, source: str = "<config>") -> dict:
    try:
        cfg = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{source}: expected a mapping at top level")
    if not cfg.get("layers"):
        raise ConfigError(f"{source}: model has no layers")
    if "input" not in cfg or len(cfg["input"]) != 3:
        raise ConfigError(f"{source}: 'input' must be [H, W, C]")
    return cfg


def build_plan(cfg: dict, block: int | None = None) -> ModelPlan:
    """Bind every layer to its input shape and lay out buffers (no weights yet)."""
    block = block or int(cfg.get("block", 16))
    input_shape = tuple(int(v) for v in cfg["input"])
    shapes: dict[str, tuple[int, int, int]] = {"input": input_shape}
    saved: dict[str, str] = {}
    steps: list[Step] = []
    cur = "input"

    def emit(layer: L.Layer, inputs: list[str], label: str, fused: bool = False) -> str:
        in_shape = shapes[inputs[0]]
        try:
            params = layer.bind(in_shape)
            out = output_shape(params, in_shape)
        except (ShapeError, ValueError) as exc:
            raise ConfigError(f"layer {label} ({layer.kind}) on input {in_shape}: {exc}") from exc
        for extra in inputs[1:]:
            if shapes[extra] != in_shape:
                raise ConfigError(f"layer {label} ({layer.kind}): operand shapes {in_shape} and {shapes[extra]} differ")
        name = f"v{len(steps) + 1}"
        shapes[name] = out.hwc
        steps.append(Step(len(steps), label, layer, params, in_shape, out.hwc,
                          choose_config(params, in_shape[2], block), inputs, name, fused))
        return name

    for i, e in enumerate(cfg["layers"]):
        kind = e.get("type")
        label = str(e.get("name", i))
        if kind == "save":
            saved[e["name"]] = cur
            continue
        if kind == "add":
            src = e.get("from")
            if src not in saved:
                raise ConfigError(f"layer {label}: add refers to unknown saved tensor {src!r}")
            other = saved.pop(src)
            for j, sub in enumerate(e.get("shortcut", [])):
                other = emit(_layer_from_entry(sub), [other], f"{label}.shortcut{j}")
            cur = emit(L.add(), [cur, other], label)
        else:
            cur = emit(_layer_from_entry(e), [cur], label)
        for j, act in enumerate(_activation_layers(e.get("activation"))):
            cur = emit(act, [cur], f"{label}.act{j}", fused=True)
    if not steps:
        raise ConfigError("model has no layers")
    plan = ModelPlan(str(cfg.get("name", "model")), input_shape, block, steps, shapes)
    _plan_buffers(plan)
    return plan


def _blocked_elems(shape: tuple[int, int, int], block: int) -> int:
    h, w, c = shape
    return ceil_div(c, block) * block * h * w


def _plan_buffers(plan: ModelPlan) -> None:
    """Assign every intermediate value to one of a few equal-size slots.

    A slot is reused once its value is dead; a step never writes a slot it
    reads.  Plain chains need two slots, a live residual adds a third.
    """
    last_use: dict[str, int] = {}
    for s in plan.steps:
        for v in s.inputs:
            last_use[v] = s.index
    last_use[plan.output_value] = len(plan.steps)
    free: list[int] = []
    n = 0
    for s in plan.steps:
        if free:
            slot = free.pop(0)
        else:
            slot, n = n, n + 1
        plan.slots[s.output] = slot
        for v in set(s.inputs):
            if v != "input" and last_use[v] == s.index:
                free.append(plan.slots[v])
                free.sort()
    plan.n_slots = n
    plan.slot_elems = max(_blocked_elems(s.out_shape, plan.block) for s in plan.steps)


# -- weights -------------------------------------------------------------------------

def _fixed_weights(step: Step) -> np.ndarray:
    p = step.params
    groups = step.in_shape[2]
    return np.full((groups, 1, 1, p.f_h, p.f_w), 1.0 / (p.f_h * p.f_w), dtype=np.float32)


def attach_weights(plan: ModelPlan, payload: np.ndarray | None = None, seed: int | None = None) -> ModelPlan:
    """Fill weights from a flat float32 payload (file order) or a seeded LCG."""
    if payload is None:
        rng = Lcg(DEFAULT_WEIGHT_SEED if seed is None else seed)
    elif payload.size != plan.param_count:
        raise ConfigError(f"weight payload has {payload.size} values, model needs {plan.param_count}")
    pos = 0
    for step in plan.steps:
        lay = step.layer
        if lay.op is ReductionOp.FMA:
            if not lay.learned:
                step.weights = _fixed_weights(step)
            else:
                shape = step.weight_shape
                n = math.prod(shape)
                if payload is None:
                    fan_in = shape[2] * shape[3] * shape[4]
                    vals = (2.0 * rng.uniform(n) - 1.0) * math.sqrt(3.0 / fan_in)
                else:
                    vals = payload[pos:pos + n]
                pos += n
                step.weights = vals.astype(np.float32).reshape(shape)
            step.packed = pack_weights(step.weights, step.config.c_b, step.config.f_cb)
        elif lay.op is ReductionOp.POINTWISE_FMA_BINARY and lay.pointwise_mode == "affine":
            c = step.in_shape[2]
            if not lay.learned:
                step.affine = (np.full(c, -1.0, np.float32), np.zeros(c, np.float32))
            elif payload is None:
                u = rng.uniform(2 * c)
                step.affine = ((1.0 + 0.1 * (2 * u[:c] - 1)).astype(np.float32),
                               (0.1 * (2 * u[c:] - 1)).astype(np.float32))
            else:
                vals = payload[pos:pos + 2 * c]
                pos += 2 * c
                step.affine = (vals[:c].copy(), vals[c:].copy())
    return plan


def load_model(config: str | Path, weights: str | Path | None = None, seed: int | None = None,
               block: int | None = None) -> ModelPlan:
    """Parse a config (path or shipped name), bind shapes and attach weights."""
    path = Path(config)
    if not path.exists() and str(config) in SHIPPED:
        path = shipped_config(str(config))
    if not path.exists():
        raise ConfigError(f"config not found: {config}")
    plan = build_plan(parse_config(path.read_text(), str(path)), block)
    payload = read_weight_payload(weights) if weights is not None else None
    attach_weights(plan, payload, seed)
    log.debug("loaded %s: %d steps, %d params, %d buffer slots", plan.name, len(plan.steps),
              plan.param_count, plan.n_slots)
    return plan


def seeded_input(shape: tuple[int, int, int], seed: int = DEFAULT_INPUT_SEED) -> PlainTensor:
    vals = 2.0 * Lcg(seed).uniform(math.prod(shape)) - 1.0
    return PlainTensor(vals.astype(np.float32).reshape(shape))


# -- memory accounting -------------------------------------------------------------------

@dataclass
class MemoryReport:
    dtype: str
    params: int
    input_elems: int
    pair_elems: int           # largest (primary input + output), model input excluded
    accumulator_bytes: int    # uint8 only: 4 * largest H*W
    total_bytes: int
    # what the runtime allocates on top of or instead of the formula
    slot_bytes: int
    residual_bytes: int
    padding_scratch_bytes: int

    @property
    def intermediate_elems(self) -> int:
        return self.input_elems + self.pair_elems

    @property
    def megabytes(self) -> float:
        return self.total_bytes / 2**20

    def rows(self) -> list[tuple[str, object]]:
        return [("dtype", self.dtype), ("params", self.params), ("input_elems", self.input_elems),
                ("pair_elems", self.pair_elems), ("intermediate_elems", self.intermediate_elems),
                ("accumulator_bytes", self.accumulator_bytes), ("total_bytes", self.total_bytes),
                ("total_mb", round(self.megabytes, 3)), ("runtime_slot_bytes", self.slot_bytes),
                ("runtime_residual_bytes", self.residual_bytes),
                ("runtime_padding_scratch_bytes", self.padding_scratch_bytes)]


def memory_report(plan: ModelPlan, dtype: str = "float") -> MemoryReport:
    """Parameters plus shared intermediates; MB are 2**20 bytes.

    Intermediates are the model input, which has its own buffer, plus the
    largest primary input + output of any layer.  A layer reading the model
    input adds only its output.  Residual operands sit in a side buffer and
    an activation written on a layer's entry counts as part of that layer;
    neither adds to the total.  float: 4 bytes per value.  uint8: 1 byte per
    value plus an int32 accumulator row of the largest H*W.
    """
    if dtype not in ("float", "uint8"):
        raise ValueError(f"dtype must be 'float' or 'uint8', got {dtype!r}")
    size = lambda s: s[0] * s[1] * s[2]
    params = plan.param_count
    input_elems = size(plan.input_shape)
    pair = max((0 if s.inputs[0] == "input" else size(s.in_shape)) + size(s.out_shape)
               for s in plan.steps if not s.fused)
    max_hw = max(s[0] * s[1] for s in plan.value_shapes.values())
    width = 4 if dtype == "float" else 1
    acc = 4 * max_hw if dtype == "uint8" else 0
    total = width * (params + input_elems + pair) + acc
    residual = max((size(plan.value_shapes[s.inputs[1]]) for s in plan.steps if len(s.inputs) > 1),
                   default=0)
    pad_scratch = max((_blocked_elems(s.params.padded_input(s.in_shape), plan.block)
                       for s in plan.steps if s.params.has_padding), default=0)
    return MemoryReport(dtype, params, input_elems, pair, acc, total,
                        width * plan.n_slots * plan.slot_elems, width * residual, width * pad_scratch)


# -- float inference ---------------------------------------------------------------------------

def _operand(step: Step, values: dict[str, BlockedTensor]):
    lay = step.layer
    if lay.op is ReductionOp.FMA:
        return step.packed
    if lay.op is ReductionOp.POINTWISE_FMA_BINARY:
        if lay.pointwise_mode == "add":
            return Pointwise("add", second=values[step.inputs[1]])
        return Pointwise("affine", scale=step.affine[0], shift=step.affine[1])
    return None


def _slot_view(buf: np.ndarray, shape: tuple[int, int, int], block: int) -> BlockedTensor:
    h, w, c = shape
    nb = ceil_div(c, block)
    return BlockedTensor(buf[: nb * h * w * block].reshape(nb, h, w, block), c)


def _check_no_alias(step: Step, out: BlockedTensor, values: dict[str, BlockedTensor]) -> None:
    for v in step.inputs:
        if np.shares_memory(out.data, values[v].data):
            raise RuntimeError(f"step {step.label} writes the buffer holding its input {v}")


def infer(plan: ModelPlan, x: PlainTensor, p_max: int = 1, *, prefer_vectorized: bool = True,
          check_buffers: bool = False) -> PlainTensor:
    """Pack once, run every step in blocked form, unpack once."""
    if x.shape != plan.input_shape:
        raise ShapeError(f"input is {x.shape}, model expects {plan.input_shape}")
    x = PlainTensor(x.data.astype(np.float32, copy=False))
    slots = [np.zeros(plan.slot_elems, dtype=np.float32) for _ in range(plan.n_slots)]
    values = {"input": pack_activations(x, plan.block)}
    for step in plan.steps:
        out = _slot_view(slots[plan.slots[step.output]], step.out_shape, plan.block)
        if check_buffers:
            _check_no_alias(step, out, values)
            out.data[...] = np.nan
        threads = min(out.nblocks, p_max)
        run_layer(step.params, step.layer.op, values[step.inputs[0]], _operand(step, values),
                  step.config, out, threads, prefer_vectorized=prefer_vectorized,
                  max_seed=step.layer.max_seed)
        if check_buffers and np.isnan(out.data).any():
            raise RuntimeError(f"step {step.label} left canary values in its output")
        values[step.output] = out
    return unpack_activations(values[plan.output_value])


def oracle_infer(plan: ModelPlan, x: PlainTensor) -> np.ndarray:
    """Walk the plan with the float64 oracle on plain tensors."""
    values = {"input": x.data.astype(np.float64)}
    for step in plan.steps:
        lay = step.layer
        a = values[step.inputs[0]]
        if lay.op is ReductionOp.POINTWISE_FMA_BINARY:
            if lay.pointwise_mode == "add":
                res = oracle_layer(step.params, lay.op, a, second=values[step.inputs[1]])
            else:
                res = oracle_layer(step.params, lay.op, a, scale=step.affine[0], shift=step.affine[1])
        else:
            res = oracle_layer(step.params, lay.op, a, step.weights, max_seed=lay.max_seed)
        values[step.output] = res
    return values[plan.output_value]


# -- quantized inference --------------------------------------------------------------------------

@dataclass
class QuantizedStep:
    step: Step
    in_q: QuantParams
    out_q: QuantParams
    second_q: QuantParams | None = None
    w_q: QuantParams | None = None
    q_weights: np.ndarray | None = None
    packed: PackedWeights | None = None


@dataclass
class QuantizedPlan:
    plan: ModelPlan
    input_q: QuantParams
    steps: list[QuantizedStep]
    value_q: dict[str, QuantParams]

    def quantize_input(self, x: PlainTensor) -> PlainTensor:
        return quantize(x, self.input_q)


def _record_ranges(plan: ModelPlan, x: PlainTensor) -> dict[str, tuple[float, float]]:
    ranges = {"input": (float(x.data.min()), float(x.data.max()))}
    values = {"input": x.data.astype(np.float64)}
    for step in plan.steps:
        lay = step.layer
        a = values[step.inputs[0]]
        if lay.op is ReductionOp.POINTWISE_FMA_BINARY:
            if lay.pointwise_mode == "add":
                res = oracle_layer(step.params, lay.op, a, second=values[step.inputs[1]])
            else:
                res = oracle_layer(step.params, lay.op, a, scale=step.affine[0], shift=step.affine[1])
        else:
            res = oracle_layer(step.params, lay.op, a, step.weights, max_seed=lay.max_seed)
        values[step.output] = res
        ranges[step.output] = (float(res.min()), float(res.max()))
    return ranges


def quantize_plan(plan: ModelPlan, calibration: PlainTensor) -> QuantizedPlan:
    """Per-tensor uint8 params from one calibration pass; weights quantized per layer."""
    ranges = _record_ranges(plan, calibration)
    value_q = {"input": QuantParams.from_range(*ranges["input"])}
    qsteps = []
    for step in plan.steps:
        lay = step.layer
        in_q = value_q[step.inputs[0]]
        if lay.op in (ReductionOp.MAX, ReductionOp.UPSAMPLE_NEAREST):
            out_q = in_q
        else:
            out_q = QuantParams.from_range(*ranges[step.output])
        qs = QuantizedStep(step, in_q, out_q)
        if lay.op is ReductionOp.FMA:
            qs.w_q = QuantParams.from_range(step.weights.min(), step.weights.max())
            qs.q_weights = quantize_array(step.weights, qs.w_q)
            qs.packed = pack_quantized_weights(qs.q_weights, qs.w_q, step.config)
        if lay.op is ReductionOp.POINTWISE_FMA_BINARY and lay.pointwise_mode == "add":
            qs.second_q = value_q[step.inputs[1]]
        value_q[step.output] = out_q
        qsteps.append(qs)
    return QuantizedPlan(plan, value_q["input"], qsteps, value_q)


def _max_seed_code(seed: float, q: QuantParams) -> int:
    if seed == -math.inf:
        return 0
    return int(quantize_array(np.float64(seed), q))


def infer_quantized(qplan: QuantizedPlan, xq: PlainTensor, p_max: int = 1, *,
                    prefer_vectorized: bool = True) -> PlainTensor:
    plan = qplan.plan
    if xq.shape != plan.input_shape or xq.data.dtype != np.uint8:
        raise ShapeError(f"expected uint8 input of shape {plan.input_shape}")
    slots = [np.zeros(plan.slot_elems, dtype=np.uint8) for _ in range(plan.n_slots)]
    values = {"input": pack_activations(xq, plan.block)}
    for qs in qplan.steps:
        step = qs.step
        lay = step.layer
        out = _slot_view(slots[plan.slots[step.output]], step.out_shape, plan.block)
        if lay.op is ReductionOp.FMA:
            operand = qs.packed
        elif lay.op is ReductionOp.POINTWISE_FMA_BINARY:
            if lay.pointwise_mode == "add":
                operand = Pointwise("add", second=values[step.inputs[1]])
            else:
                operand = Pointwise("affine", scale=step.affine[0].astype(np.float64),
                                    shift=step.affine[1].astype(np.float64))
        else:
            operand = None
        run_layer_quantized(step.params, lay.op, values[step.inputs[0]], operand, step.config, out,
                            min(out.nblocks, p_max), in_q=qs.in_q, out_q=qs.out_q, w_q=qs.w_q,
                            second_q=qs.second_q, max_seed=lay.max_seed,
                            prefer_vectorized=prefer_vectorized)
        values[step.output] = out
    return unpack_activations(values[plan.output_value])


def oracle_infer_quantized(qplan: QuantizedPlan, xq: PlainTensor) -> np.ndarray:
    values = {"input": xq.data}
    for qs in qplan.steps:
        step = qs.step
        lay = step.layer
        a = values[step.inputs[0]]
        if lay.op is ReductionOp.POINTWISE_FMA_BINARY:
            if lay.pointwise_mode == "add":
                res = oracle_layer_quantized(step.params, lay.op, a, in_q=qs.in_q, out_q=qs.out_q,
                                             second=values[step.inputs[1]], second_q=qs.second_q)
            else:
                res = oracle_layer_quantized(step.params, lay.op, a, in_q=qs.in_q, out_q=qs.out_q,
                                             scale=step.affine[0], shift=step.affine[1])
        else:
            res = oracle_layer_quantized(step.params, lay.op, a, qs.q_weights, in_q=qs.in_q,
                                         w_q=qs.w_q, out_q=qs.out_q,
                                         max_seed=_max_seed_code(lay.max_seed, qs.in_q))
        values[step.output] = res
    return values[qplan.plan.output_value]
