"""DFANet: cascaded backbones with sub-network / sub-stage aggregation and a
dual-path (high-level + low-level) decoder."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from . import ops
from .backbone import (
    STAGES,
    Backbone,
    BackboneSpec,
    ConfigError,
    StageOutputs,
    build_backbone,
    stage_widths,
)
from .layers import Conv2d, ConvBN, Module
from .ops import ConvParams
from .tensor import ContractError, ShapeError, Tensor, add, concat_channels

MAX_BACKBONES = 4
INTER_BACKBONE_UPSAMPLE = 4


@dataclass(frozen=True)
class ModelSpec:
    variant: str = "A"
    num_backbones: int = 3
    num_classes: int = 19
    decoder_width: int = 32
    attention_sigmoid: bool = False
    backbones: Tuple[BackboneSpec, ...] = field(default=(), compare=False, repr=False)

    @property
    def upsample_factor(self) -> int:
        return INTER_BACKBONE_UPSAMPLE

    @property
    def input_multiple(self) -> int:
        """Input extents must be multiples of this so every stage stays integral."""
        return 2 ** (self.num_backbones + 3)

    def enc2_scale(self, n: int) -> int:
        """Downsampling factor of backbone ``n``'s enc2 output (n counts from 1)."""
        return 2 ** (n + 1)

    def fca_scale(self, n: int) -> int:
        return 2 ** (n + 3)

    def config_items(self) -> List[Tuple[str, str]]:
        return [
            ("variant", self.variant),
            ("num_backbones", str(self.num_backbones)),
            ("num_classes", str(self.num_classes)),
            ("decoder_width", str(self.decoder_width)),
            ("attention_sigmoid", str(int(self.attention_sigmoid))),
        ]

    def check_input(self, h: int, w: int) -> None:
        m = self.input_multiple
        if h <= 0 or w <= 0 or h % m or w % m:
            raise ShapeError(
                f"input {h}x{w}: height and width must be positive multiples of {m} "
                f"for {self.num_backbones} backbone(s)")


def build_dfanet(variant: str = "A", num_backbones: int = 3, num_classes: int = 19,
                 decoder_width: int = 32, attention_sigmoid: bool = False) -> ModelSpec:
    if not 1 <= num_backbones <= MAX_BACKBONES:
        raise ConfigError(f"num_backbones must be in [1, {MAX_BACKBONES}], got {num_backbones}")
    if num_classes < 2:
        raise ConfigError(f"num_classes must be at least 2, got {num_classes}")
    if decoder_width <= 0:
        raise ConfigError("decoder_width must be positive")
    widths = stage_widths(variant)
    out_w = {name: widths[name][-1] for name in STAGES}
    specs = [build_backbone(variant, include_conv1=True, attention_sigmoid=attention_sigmoid)]
    for _ in range(1, num_backbones):
        # Sub-stage aggregation: stage i of backbone n consumes
        # [x_n^{i-1}, x_{n-1}^i]; enc2's own input is the upsampled fca of n-1.
        concat = {
            "enc2": out_w["enc4"] + out_w["enc2"],
            "enc3": out_w["enc2"] + out_w["enc3"],
            "enc4": out_w["enc3"] + out_w["enc4"],
        }
        specs.append(build_backbone(variant, include_conv1=False, stage_in_channels=concat,
                                    attention_sigmoid=attention_sigmoid))
    spec = ModelSpec(variant, num_backbones, num_classes, decoder_width, attention_sigmoid,
                     tuple(specs))
    check_closure(spec)
    return spec


def spec_from_config(items) -> ModelSpec:
    cfg = dict(items)
    try:
        return build_dfanet(
            variant=cfg["variant"],
            num_backbones=int(cfg["num_backbones"]),
            num_classes=int(cfg["num_classes"]),
            decoder_width=int(cfg.get("decoder_width", 32)),
            attention_sigmoid=bool(int(cfg.get("attention_sigmoid", 0))),
        )
    except KeyError as exc:
        raise ConfigError(f"model config lacks {exc.args[0]!r}") from None


def check_closure(spec: ModelSpec) -> None:
    """Every concatenation consumes exactly the widths its producers emit."""
    prev = None
    for n, bb in enumerate(spec.backbones, start=1):
        if n == 1:
            if not bb.include_conv1 or bb.stage("enc2").in_channels != bb.conv1_width:
                raise ConfigError("backbone 1 must start with conv1 feeding enc2")
        else:
            own = {"enc2": prev.out_channels}
            own["enc3"] = bb.stage("enc2").out_channels
            own["enc4"] = bb.stage("enc3").out_channels
            for name in STAGES:
                need = own[name] + prev.stage(name).out_channels
                if bb.stage(name).in_channels != need:
                    raise ConfigError(
                        f"backbone {n} {name}: consumes {bb.stage(name).in_channels} channels, "
                        f"producers emit {need}")
        for a, b in zip(bb.stages, bb.stages[1:]):
            if n == 1 and b.in_channels != a.out_channels:
                raise ConfigError(f"backbone 1 {b.name} input does not match {a.name} output")
        prev = bb


@dataclass
class EncoderTrace:
    outputs: List[StageOutputs]

    def __len__(self) -> int:
        return len(self.outputs)

    def __getitem__(self, i: int) -> StageOutputs:
        return self.outputs[i]


class Decoder(Module):
    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        dw = spec.decoder_width
        self.n_ll = spec.num_backbones
        for n, bb in enumerate(spec.backbones):
            setattr(self, f"ll{n}", ConvBN(ConvParams(bb.stage("enc2").out_channels, dw, (1, 1)), rng))
        hl_in = sum(bb.out_channels for bb in spec.backbones)
        self.hl = ConvBN(ConvParams(hl_in, dw, (1, 1)), rng)
        self.classifier = Conv2d(ConvParams(dw, spec.num_classes, (3, 3), 1, 1, has_bias=True), rng)

    def low_level(self, trace: EncoderTrace) -> Tensor:
        total = None
        for n, out in enumerate(trace.outputs, start=1):
            y = getattr(self, f"ll{n - 1}")(out.enc2)
            y = ops.bilinear_upsample(y, self.spec.enc2_scale(n) // 4)
            total = y if total is None else add(total, y)
        return total

    def high_level(self, trace: EncoderTrace) -> Tensor:
        # Fuse at the first backbone's fca scale (1/16), then upsample x4.
        base = self.spec.fca_scale(1)
        ups = [ops.bilinear_upsample(out.fca, self.spec.fca_scale(n) // base)
               for n, out in enumerate(trace.outputs, start=1)]
        return ops.bilinear_upsample(self.hl(concat_channels(ups)), base // 4)

    def forward(self, trace: EncoderTrace) -> Tensor:
        if len(trace) != self.spec.num_backbones:
            raise ContractError(
                f"trace has {len(trace)} backbones, decoder expects {self.spec.num_backbones}")
        fused = add(self.low_level(trace), self.high_level(trace))
        return ops.bilinear_upsample(self.classifier(fused), 4)


class DFANet(Module):
    def __init__(self, spec: ModelSpec, seed: int = 0):
        super().__init__()
        self.spec = spec
        self.seed = seed
        for n, bb in enumerate(spec.backbones):
            # Independent streams per component keep backbone n's init
            # unaffected by how many backbones follow it.
            setattr(self, f"backbone{n}", Backbone(bb, np.random.default_rng([seed, n])))
        self.decoder = Decoder(spec, np.random.default_rng([seed, 1000 + spec.num_backbones]))

    def backbones(self) -> List[Backbone]:
        return [getattr(self, f"backbone{n}") for n in range(self.spec.num_backbones)]

    def encode(self, x: Tensor) -> EncoderTrace:
        return encoder_forward(self, x)

    def forward(self, x: Tensor) -> Tensor:
        return self.decoder(self.encode(x))


def encoder_forward(model: DFANet, x: Tensor) -> EncoderTrace:
    spec = model.spec
    if x.shape[1] != 3:
        raise ShapeError(f"DFANet input must have 3 channels, got {x.shape[1]}")
    spec.check_input(x.shape[2], x.shape[3])
    outputs: List[StageOutputs] = []
    for n, bb in enumerate(model.backbones()):
        if n == 0:
            out = bb(x)
        else:
            prev = outputs[-1]
            entry = ops.bilinear_upsample(prev.fca, spec.upsample_factor)
            out = bb(entry, lateral={name: prev[name] for name in STAGES})
        outputs.append(out)
    return EncoderTrace(outputs)


def decoder_forward(model: DFANet, trace: EncoderTrace) -> Tensor:
    return model.decoder(trace)


def model_forward(model: DFANet, x: Tensor) -> Tensor:
    return model(x)


def with_backbones(spec: ModelSpec, num_backbones: int) -> ModelSpec:
    return build_dfanet(spec.variant, num_backbones, spec.num_classes, spec.decoder_width,
                        spec.attention_sigmoid)


__all__ = [
    "DFANet", "Decoder", "EncoderTrace", "ModelSpec", "build_dfanet", "check_closure",
    "decoder_forward", "encoder_forward", "model_forward", "spec_from_config", "with_backbones",
]
