"""Modified Xception backbones (variants A and B) with the FC attention head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from . import ops
from .layers import Conv2d, ConvBN, Linear, Module, SepConv
from .ops import ConvParams
from .tensor import ShapeError, Tensor, add, concat_channels, make_result, mul

STAGES = ("enc2", "enc3", "enc4")
REPEATS = {"enc2": 4, "enc3": 6, "enc4": 4}
CONV1_WIDTH = 8
FC_HIDDEN = 1000

# Per-stage (sep1, sep2, sep3) widths.
VARIANT_WIDTHS = {
    "A": {"enc2": (12, 12, 48), "enc3": (24, 24, 96), "enc4": (48, 48, 192)},
    "B": {"enc2": (8, 8, 32), "enc3": (16, 16, 64), "enc4": (32, 32, 128)},
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BlockSpec:
    in_channels: int
    widths: Tuple[int, int, int]
    stride: int

    @property
    def out_channels(self) -> int:
        return self.widths[-1]

    @property
    def shortcut(self) -> str:
        if self.stride == 1 and self.in_channels == self.out_channels:
            return "identity"
        return "projection"


@dataclass(frozen=True)
class StageSpec:
    name: str
    blocks: Tuple[BlockSpec, ...]
    entry_stride: int = 2

    @property
    def in_channels(self) -> int:
        return self.blocks[0].in_channels

    @property
    def out_channels(self) -> int:
        return self.blocks[-1].out_channels


@dataclass(frozen=True)
class BackboneSpec:
    variant: str
    in_channels: int
    include_conv1: bool
    stages: Tuple[StageSpec, ...]
    conv1_width: int = CONV1_WIDTH
    fc_hidden: int = FC_HIDDEN
    attention_sigmoid: bool = False

    def stage(self, name: str) -> StageSpec:
        for st in self.stages:
            if st.name == name:
                return st
        raise KeyError(name)

    @property
    def out_channels(self) -> int:
        return self.stages[-1].out_channels

    def stage_in_channels(self) -> Dict[str, int]:
        return {st.name: st.in_channels for st in self.stages}


def stage_widths(variant: str) -> Mapping[str, Tuple[int, int, int]]:
    try:
        return VARIANT_WIDTHS[variant]
    except KeyError:
        raise ConfigError(f"unknown backbone variant {variant!r} (expected A or B)") from None


def build_backbone(variant: str = "A", include_conv1: bool = True,
                   stage_in_channels: Optional[Mapping[str, int]] = None,
                   in_channels: int = 3, fc_hidden: int = FC_HIDDEN,
                   attention_sigmoid: bool = False) -> BackboneSpec:
    """Wire a backbone from Table-1 widths.

    ``stage_in_channels`` overrides the input width of individual stages,
    which is how aggregated backbones receive concatenated inputs. A stage
    without an override consumes the previous stage's output.
    """
    widths = stage_widths(variant)
    overrides = dict(stage_in_channels or {})
    unknown = set(overrides) - set(STAGES)
    if unknown:
        raise ConfigError(f"unknown stage names {sorted(unknown)}")
    if include_conv1:
        prev = CONV1_WIDTH
    else:
        prev = overrides.get("enc2", in_channels)
        in_channels = prev
    if in_channels <= 0 or fc_hidden <= 0:
        raise ConfigError("channel widths must be positive")
    stages = []
    for name in STAGES:
        cin = overrides.get(name, prev)
        if cin <= 0:
            raise ConfigError(f"{name} input width must be positive, got {cin}")
        blocks = []
        for b in range(REPEATS[name]):
            blocks.append(BlockSpec(cin, widths[name], 2 if b == 0 else 1))
            cin = widths[name][-1]
        stages.append(StageSpec(name, tuple(blocks)))
        prev = cin
    return BackboneSpec(variant, in_channels, include_conv1, tuple(stages),
                        fc_hidden=fc_hidden, attention_sigmoid=attention_sigmoid)


@dataclass
class StageOutputs:
    enc2: Tensor
    enc3: Tensor
    enc4: Tensor
    fca: Tensor
    attention_vector: Tensor
    conv1: Optional[Tensor] = None

    def __getitem__(self, name: str) -> Tensor:
        return getattr(self, name)


class Block(Module):
    """Three separable convolutions plus an identity or 1x1 projection shortcut."""

    def __init__(self, spec: BlockSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        c1, c2, c3 = spec.widths
        self.sep1 = SepConv(spec.in_channels, c1, rng, stride=spec.stride)
        self.sep2 = SepConv(c1, c2, rng)
        self.sep3 = SepConv(c2, c3, rng)
        if spec.shortcut == "projection":
            self.proj = ConvBN(ConvParams(spec.in_channels, c3, (1, 1), spec.stride), rng,
                               activation=False)

    def residual(self, x: Tensor) -> Tensor:
        return self.sep3(self.sep2(self.sep1(x)))

    def shortcut(self, x: Tensor) -> Tensor:
        return self.proj(x) if self.spec.shortcut == "projection" else x

    def forward(self, x: Tensor) -> Tensor:
        return add(self.residual(x), self.shortcut(x))


class Stage(Module):
    def __init__(self, spec: StageSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        self.n_blocks = len(spec.blocks)
        for i, b in enumerate(spec.blocks):
            setattr(self, str(i), Block(b, rng))

    def blocks(self):
        return [getattr(self, str(i)) for i in range(self.n_blocks)]

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.spec.in_channels:
            raise ShapeError(
                f"stage {self.spec.name} expects {self.spec.in_channels} channels, got {x.shape[1]}")
        for blk in self.blocks():
            x = blk(x)
        return x


class FCAttention(Module):
    """Global pool -> FC (C -> hidden) -> 1x1 conv (hidden -> C) -> channel-wise multiply."""

    def __init__(self, channels: int, hidden: int, rng: np.random.Generator,
                 sigmoid: bool = False):
        super().__init__()
        self.fc = Linear(channels, hidden, rng)
        self.conv = Conv2d(ConvParams(hidden, channels, (1, 1)), rng)
        self.sigmoid = sigmoid

    def vector(self, x: Tensor) -> Tensor:
        v = self.conv(self.fc(ops.global_avg_pool(x)))
        return sigmoid(v) if self.sigmoid else v

    def forward(self, x: Tensor):
        v = self.vector(x)
        return mul(x, v), v


def sigmoid(x: Tensor) -> Tensor:
    # exp of a non-positive argument only, so large |x| cannot overflow
    e = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make_result(y.astype(x.dtype), "sigmoid", (x,), lambda g: (g * y * (1 - y),))


def fc_attention(head: FCAttention, enc4: Tensor):
    """Returns ``(fca, attention_vector)``."""
    return head(enc4)


class Backbone(Module):
    def __init__(self, spec: BackboneSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        if spec.include_conv1:
            self.conv1 = ConvBN(ConvParams(spec.in_channels, spec.conv1_width, (3, 3), 2, 1), rng)
        for st in spec.stages:
            setattr(self, st.name, Stage(st, rng))
        self.attention = FCAttention(spec.out_channels, spec.fc_hidden, rng,
                                     spec.attention_sigmoid)

    def forward(self, x: Tensor, lateral: Optional[Mapping[str, Tensor]] = None) -> StageOutputs:
        """Run all stages. ``lateral`` maps a stage name to a tensor that is
        channel-concatenated after that stage's own input."""
        lateral = lateral or {}
        c1 = None
        if self.spec.include_conv1:
            if x.shape[1] != self.spec.in_channels:
                raise ShapeError(
                    f"conv1 expects {self.spec.in_channels} channels, got {x.shape[1]}")
            x = c1 = self.conv1(x)
        outs = {}
        for st in self.spec.stages:
            if st.name in lateral:
                side = lateral[st.name]
                if side.shape[2:] != x.shape[2:]:
                    raise ShapeError(
                        f"stage {st.name}: lateral input {side.shape[2:]} does not match {x.shape[2:]}")
                x = concat_channels([x, side])
            x = getattr(self, st.name)(x)
            outs[st.name] = x
        fca, vec = self.attention(x)
        return StageOutputs(outs["enc2"], outs["enc3"], outs["enc4"], fca, vec, conv1=c1)


def backbone_forward(model: Backbone, x: Tensor, lateral=None) -> StageOutputs:
    return model(x, lateral)
