"""SLSDeep encoder-decoder: dilated residual encoder and pyramid pooling decoder.

Layout of the graph::

    stem      3x3 conv /2 -> BN -> ReLU -> 3x3 max-pool /2
    stage1-4  bottleneck residual units (strides 1,2,1,1; dilations 1,1,2,4)
    pyramid   adaptive avg-pool to 1,2,3,6 -> 1x1 conv -> ReLU -> bilinear restore
    concat    [stage4, pyramid levels (, stage1-3 projections when skip_mode='all')]
    head      3x3 conv -> BN -> ReLU -> 3x3 conv -> BN -> up x2 -> dropout -> up x4 -> softmax
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from fractions import Fraction
from typing import Optional

import numpy as np

from . import ops
from .ops import BatchNormState, ConvSpec
from .tensor import ShapeError, Tensor

DROPOUT_LAYER_ID = 1


class ConfigError(ValueError):
    pass


@dataclass
class NetworkConfig:
    input_size: tuple = (384, 384)
    in_channels: int = 3
    stem_channels: int = 64
    stem_stride: int = 2
    stage_channels: tuple = (256, 512, 1024, 2048)
    stage_strides: tuple = (1, 2, 1, 1)
    stage_dilations: tuple = (1, 1, 2, 4)
    stage_depths: tuple = (1, 1, 1, 1)
    bottleneck_ratio: int = 4
    pyramid_scales: tuple = (1, 2, 3, 6)
    pyramid_channels: int = 1024
    head_conv1_channels: int = 512
    num_classes: int = 2
    upsample_factors: tuple = (2, 4)
    dropout_p: float = 0.5
    skip_mode: str = "single"
    width_scale: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, list):
                setattr(self, f.name, tuple(value))
        self.validate()

    def validate(self) -> None:
        ws = Fraction(self.width_scale).limit_denominator(1 << 16)
        if not 0 < ws <= 1:
            raise ConfigError(f"width_scale must lie in (0, 1], got {self.width_scale}")
        n_stages = len(self.stage_channels)
        if n_stages < 1 or not (len(self.stage_strides) == len(self.stage_dilations) == len(self.stage_depths) == n_stages):
            raise ConfigError("stage_channels, stage_strides, stage_dilations and stage_depths must have equal length")
        if any(d < 1 for d in self.stage_depths):
            raise ConfigError(f"every stage needs at least one residual unit, got {self.stage_depths}")
        if self.skip_mode not in ("single", "all"):
            raise ConfigError(f"skip_mode must be 'single' or 'all', got {self.skip_mode!r}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2 (softmax over channels)")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.output_stride != math.prod(self.upsample_factors):
            raise ConfigError(
                f"upsample factors {self.upsample_factors} do not undo the encoder stride {self.output_stride}"
            )

    def ch(self, base: int) -> int:
        """Scale a channel constant by ``width_scale``, rounding up."""
        ws = Fraction(self.width_scale).limit_denominator(1 << 16)
        return max(1, math.ceil(base * ws))

    @property
    def output_stride(self) -> int:
        return self.stem_stride * 2 * math.prod(self.stage_strides)

    def stage_out(self, k: int) -> int:
        return self.ch(self.stage_channels[k])

    def concat_channels(self) -> int:
        total = self.stage_out(-1) + len(self.pyramid_scales) * self.ch(self.pyramid_channels)
        if self.skip_mode == "all":
            total += (len(self.stage_channels) - 1) * self.ch(self.pyramid_channels)
        return total

    def check_input(self, height: int, width: int) -> None:
        """Raise if an input of this size cannot traverse the network."""
        stride = self.output_stride
        smallest = max(self.pyramid_scales)
        if height % stride or width % stride or height // stride < smallest or width // stride < smallest:
            raise ShapeError(
                f"input {height}x{width} unsupported: H and W must be divisible by {stride} "
                f"and H/{stride}, W/{stride} must be >= {smallest} (largest pyramid scale)"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


def desk_config(**overrides) -> NetworkConfig:
    """The 1/16-width configuration used for CPU-scale runs."""
    base = dict(width_scale=1 / 16, input_size=(96, 96))
    base.update(overrides)
    return NetworkConfig(**base)


# --------------------------------------------------------------------------
# Static layer table


@dataclass(frozen=True)
class ConvLayer:
    name: str
    in_channels: int
    spec: ConvSpec
    batchnorm: bool


@dataclass(frozen=True)
class UnitLayout:
    prefix: str
    in_channels: int
    mid_channels: int
    out_channels: int
    stride: int
    dilation: int
    projection: bool


def _units(config: NetworkConfig) -> list:
    units = []
    in_c = config.ch(config.stem_channels)
    for s, (out_base, stride, dil, depth) in enumerate(
        zip(config.stage_channels, config.stage_strides, config.stage_dilations, config.stage_depths), start=1
    ):
        out_c = config.ch(out_base)
        mid_c = config.ch(out_base // config.bottleneck_ratio)
        for u in range(depth):
            st = stride if u == 0 else 1
            units.append(UnitLayout(f"encoder.stage{s}.unit{u}", in_c, mid_c, out_c, st, dil,
                                    projection=(in_c != out_c or st != 1)))
            in_c = out_c
    return units


def _unit_convs(unit: UnitLayout) -> list:
    d = unit.dilation
    layers = [
        ConvLayer(f"{unit.prefix}.conv1", unit.in_channels, ConvSpec(unit.mid_channels, (1, 1), has_bias=False), True),
        ConvLayer(f"{unit.prefix}.conv2", unit.mid_channels,
                  ConvSpec(unit.mid_channels, (3, 3), unit.stride, d, d, has_bias=False), True),
        ConvLayer(f"{unit.prefix}.conv3", unit.mid_channels, ConvSpec(unit.out_channels, (1, 1), has_bias=False), True),
    ]
    if unit.projection:
        layers.append(ConvLayer(f"{unit.prefix}.proj", unit.in_channels,
                                ConvSpec(unit.out_channels, (1, 1), unit.stride, has_bias=False), True))
    return layers


def _skip_strides(config: NetworkConfig) -> list:
    """Stride that brings each of stages 1..n-1 to the encoder output resolution."""
    out = []
    for s in range(len(config.stage_channels) - 1):
        out.append(math.prod(config.stage_strides[s + 1:]))
    return out


def layer_table(config: NetworkConfig) -> list:
    """Every convolution of the network in forward order."""
    layers = [ConvLayer("encoder.stem.conv", config.in_channels,
                        ConvSpec(config.ch(config.stem_channels), (3, 3), config.stem_stride, 1, has_bias=False), True)]
    for unit in _units(config):
        layers.extend(_unit_convs(unit))
    enc_c = config.stage_out(-1)
    pyr_c = config.ch(config.pyramid_channels)
    for scale in config.pyramid_scales:
        layers.append(ConvLayer(f"decoder.pyramid.scale{scale}.conv", enc_c, ConvSpec(pyr_c, (1, 1)), False))
    if config.skip_mode == "all":
        for s, stride in enumerate(_skip_strides(config), start=1):
            layers.append(ConvLayer(f"decoder.skip.stage{s}.conv", config.stage_out(s - 1),
                                    ConvSpec(pyr_c, (1, 1), stride), False))
    head_c = config.ch(config.head_conv1_channels)
    layers.append(ConvLayer("decoder.head.conv1", config.concat_channels(),
                            ConvSpec(head_c, (3, 3), 1, 1, has_bias=False), True))
    layers.append(ConvLayer("decoder.head.conv2", head_c,
                            ConvSpec(config.num_classes, (3, 3), 1, 1, has_bias=False), True))
    return layers


def _bn_name(conv_name: str) -> str:
    # "...conv1" -> "...bn1", "...conv" -> "...bn", "...proj" -> "...proj_bn"
    head, _, last = conv_name.rpartition(".")
    if last.startswith("conv"):
        return f"{head}.bn{last[4:]}"
    return f"{head}.{last}_bn"


# --------------------------------------------------------------------------
# Shape plan


def shape_plan(config: NetworkConfig, batch: Optional[int] = None, input_size: Optional[tuple] = None) -> list:
    """Ordered (layer name, output shape) pairs computed without allocating tensors."""
    h, w = input_size or config.input_size
    config.check_input(h, w)
    plan = [("input", (batch, config.in_channels, h, w))]

    def conv(spec: ConvSpec, hw):
        return spec.output_size(*hw)

    stem = layer_table(config)[0].spec
    hw = conv(stem, (h, w))
    plan.append(("encoder.stem.conv", (batch, stem.out_channels) + hw))
    hw = ((hw[0] + 2 - 3) // 2 + 1, (hw[1] + 2 - 3) // 2 + 1)
    plan.append(("encoder.stem.pool", (batch, stem.out_channels) + hw))
    stage_shapes = []
    units = _units(config)
    for s in range(1, len(config.stage_channels) + 1):
        for unit in [u for u in units if u.prefix.startswith(f"encoder.stage{s}.")]:
            hw = _unit_convs(unit)[1].spec.output_size(*hw)
        shape = (batch, config.stage_out(s - 1)) + hw
        stage_shapes.append(shape)
        plan.append((f"encoder.stage{s}", shape))
    enc_hw = hw
    pyr_c = config.ch(config.pyramid_channels)
    for scale in config.pyramid_scales:
        plan.append((f"decoder.pyramid.scale{scale}.pool", (batch, config.stage_out(-1), scale, scale)))
        plan.append((f"decoder.pyramid.scale{scale}", (batch, pyr_c) + enc_hw))
    if config.skip_mode == "all":
        for s, stride in enumerate(_skip_strides(config), start=1):
            src = stage_shapes[s - 1][2:]
            skip_hw = ConvSpec(pyr_c, (1, 1), stride).output_size(*src)
            plan.append((f"decoder.skip.stage{s}", (batch, pyr_c) + skip_hw))
    plan.append(("decoder.concat", (batch, config.concat_channels()) + enc_hw))
    plan.append(("decoder.head.conv1", (batch, config.ch(config.head_conv1_channels)) + enc_hw))
    plan.append(("decoder.head.conv2", (batch, config.num_classes) + enc_hw))
    f1, f2 = config.upsample_factors
    up1 = (enc_hw[0] * f1, enc_hw[1] * f1)
    plan.append(("decoder.upsample1", (batch, config.num_classes) + up1))
    plan.append(("decoder.dropout", (batch, config.num_classes) + up1))
    up2 = (up1[0] * f2, up1[1] * f2)
    plan.append(("decoder.upsample2", (batch, config.num_classes) + up2))
    plan.append(("output", (batch, config.num_classes) + up2))
    return plan


# --------------------------------------------------------------------------
# Model


def residual_unit(x: Tensor, params: dict, bn_states: dict, prefix: str, stride: int, dilation: int,
                  training: bool, update_running: bool = True) -> Tensor:
    """Bottleneck unit: ReLU(shortcut(x) + 1x1 -> 3x3(stride, dilation) -> 1x1)."""

    def conv_bn(name, inp, stride_=1, pad=0, dil=1):
        bn = _bn_name(f"{prefix}.{name}")
        y = ops.conv2d(inp, params[f"{prefix}.{name}.weight"], stride=stride_, padding=pad, dilation=dil)
        return ops.batchnorm2d(y, params[f"{bn}.gamma"], params[f"{bn}.beta"], bn_states[bn], training, update_running)

    y = ops.relu(conv_bn("conv1", x))
    y = ops.relu(conv_bn("conv2", y, stride, dilation, dilation))
    y = conv_bn("conv3", y)
    if f"{prefix}.proj.weight" in params:
        shortcut = conv_bn("proj", x, stride)
    else:
        if x.shape != y.shape:
            raise ShapeError(f"{prefix}: identity shortcut {x.shape} cannot be added to {y.shape} without projection")
        shortcut = x
    return ops.relu(ops.add(shortcut, y))


class Model:
    """A built SLSDeep network: configuration, parameters and batch-norm state."""

    def __init__(self, config: NetworkConfig, params: "OrderedDict[str, Tensor]", bn_states: dict,
                 dropout_seed: int = 0):
        self.config = config
        self.params = params
        self.bn_states = bn_states
        self.dropout_seed = dropout_seed
        self._units = _units(config)

    # -- parameter bookkeeping -------------------------------------------------

    @staticmethod
    def group_of(name: str) -> str:
        return "encoder" if name.startswith("encoder.") else "decoder"

    def groups(self) -> dict:
        out = {"encoder": OrderedDict(), "decoder": OrderedDict()}
        for name, t in self.params.items():
            out[self.group_of(name)][name] = t
        return out

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        """Parameters followed by running statistics, in a stable order."""
        state = OrderedDict((name, t.data) for name, t in self.params.items())
        for bn, st in self.bn_states.items():
            state[f"{bn}.running_mean"] = st.running_mean
            state[f"{bn}.running_var"] = st.running_var
        return state

    def load_state_dict(self, state: dict) -> None:
        expected = self.state_dict()
        for name, arr in expected.items():
            if name not in state:
                raise ShapeError(f"missing tensor {name!r} (expected shape {arr.shape})")
            if tuple(state[name].shape) != arr.shape:
                raise ShapeError(f"tensor {name!r} has shape {tuple(state[name].shape)}, expected {arr.shape}")
        extra = [k for k in state if k not in expected]
        if extra:
            raise ShapeError(f"unexpected tensor {extra[0]!r} not present in this network")
        for name, arr in expected.items():
            arr[...] = state[name]

    # -- forward -----------------------------------------------------------------

    def _conv(self, name, x, spec: ConvSpec):
        bias = self.params.get(f"{name}.bias")
        return ops.conv2d(x, self.params[f"{name}.weight"], bias, spec)

    def _bn(self, conv_name, x, training, update_running):
        bn = _bn_name(conv_name)
        return ops.batchnorm2d(x, self.params[f"{bn}.gamma"], self.params[f"{bn}.beta"], self.bn_states[bn],
                               training, update_running)

    def forward(self, x: Tensor, training: bool = False, step: int = 0, trace: Optional[list] = None,
                update_running: bool = True) -> Tensor:
        """Per-pixel class probabilities, shape (N, num_classes, H, W).

        ``step`` keys the dropout mask together with ``dropout_seed``.
        ``trace``, when given, receives (name, shape) for every planned layer.
        """
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"expected input (N, {cfg.in_channels}, H, W), got {x.shape}")
        cfg.check_input(x.shape[2], x.shape[3])
        record = trace.append if trace is not None else (lambda item: None)
        record(("input", x.shape))

        table = {layer.name: layer for layer in layer_table(cfg)}
        stem = table["encoder.stem.conv"]
        y = self._conv(stem.name, x, stem.spec)
        y = ops.relu(self._bn(stem.name, y, training, update_running))
        record(("encoder.stem.conv", y.shape))
        y = ops.maxpool2d(y, 3, 2, 1)
        record(("encoder.stem.pool", y.shape))

        stage_outputs = []
        for s in range(1, len(cfg.stage_channels) + 1):
            for unit in (u for u in self._units if u.prefix.startswith(f"encoder.stage{s}.")):
                y = residual_unit(y, self.params, self.bn_states, unit.prefix, unit.stride, unit.dilation,
                                  training, update_running)
            stage_outputs.append(y)
            record((f"encoder.stage{s}", y.shape))
        encoded = y
        enc_hw = encoded.shape[2:]

        branches = [encoded]
        for scale in cfg.pyramid_scales:
            name = f"decoder.pyramid.scale{scale}"
            p = ops.adaptive_avg_pool2d(encoded, scale)
            record((f"{name}.pool", p.shape))
            p = ops.relu(self._conv(f"{name}.conv", p, table[f"{name}.conv"].spec))
            p = ops.bilinear_resize(p, enc_hw)
            record((name, p.shape))
            branches.append(p)
        if cfg.skip_mode == "all":
            for s in range(1, len(cfg.stage_channels)):
                name = f"decoder.skip.stage{s}"
                k = ops.relu(self._conv(f"{name}.conv", stage_outputs[s - 1], table[f"{name}.conv"].spec))
                record((name, k.shape))
                branches.append(k)
        y = ops.concat_channels(branches)
        record(("decoder.concat", y.shape))

        y = self._conv("decoder.head.conv1", y, table["decoder.head.conv1"].spec)
        y = ops.relu(self._bn("decoder.head.conv1", y, training, update_running))
        record(("decoder.head.conv1", y.shape))
        y = self._conv("decoder.head.conv2", y, table["decoder.head.conv2"].spec)
        y = self._bn("decoder.head.conv2", y, training, update_running)
        record(("decoder.head.conv2", y.shape))
        f1, f2 = cfg.upsample_factors
        y = ops.bilinear_upsample(y, f1)
        record(("decoder.upsample1", y.shape))
        y = ops.dropout(y, cfg.dropout_p, training, self.dropout_seed, DROPOUT_LAYER_ID, step)
        record(("decoder.dropout", y.shape))
        y = ops.bilinear_upsample(y, f2)
        record(("decoder.upsample2", y.shape))
        y = ops.softmax_channels(y)
        record(("output", y.shape))
        return y

    __call__ = forward

    def astype(self, dtype) -> "Model":
        """Copy of the model with parameters and statistics cast to ``dtype``."""
        params = OrderedDict((n, Tensor(t.data.astype(dtype), requires_grad=t.requires_grad, name=n))
                             for n, t in self.params.items())
        bns = {k: BatchNormState(v.running_mean.astype(dtype), v.running_var.astype(dtype), v.momentum, v.eps)
               for k, v in self.bn_states.items()}
        return Model(self.config, params, bns, self.dropout_seed)


def build(config: NetworkConfig, init_seed: int = 0, dtype=np.float32, dropout_seed: Optional[int] = None) -> Model:
    """Allocate and initialise parameters (Kaiming fan-in normal, BN gamma=1 beta=0, bias=0)."""
    config.validate()
    rng = np.random.default_rng(init_seed)
    params: "OrderedDict[str, Tensor]" = OrderedDict()
    bn_states = {}
    for layer in layer_table(config):
        kh, kw = layer.spec.kernel
        out_c = layer.spec.out_channels
        fan_in = layer.in_channels * kh * kw
        w = rng.standard_normal((out_c, layer.in_channels, kh, kw)) * math.sqrt(2.0 / fan_in)
        params[f"{layer.name}.weight"] = Tensor(w.astype(dtype), requires_grad=True, name=f"{layer.name}.weight")
        if layer.spec.has_bias:
            params[f"{layer.name}.bias"] = Tensor(np.zeros(out_c, dtype=dtype), requires_grad=True,
                                                  name=f"{layer.name}.bias")
        if layer.batchnorm:
            bn = _bn_name(layer.name)
            params[f"{bn}.gamma"] = Tensor(np.ones(out_c, dtype=dtype), requires_grad=True, name=f"{bn}.gamma")
            params[f"{bn}.beta"] = Tensor(np.zeros(out_c, dtype=dtype), requires_grad=True, name=f"{bn}.beta")
            bn_states[bn] = BatchNormState.fresh(out_c, dtype)
    return Model(config, params, bn_states, init_seed if dropout_seed is None else dropout_seed)
