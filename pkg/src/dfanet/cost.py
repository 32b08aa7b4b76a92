"""Analytic shape inference and parameter / multiply-accumulate accounting.

Nothing here executes tensors: the walkers below mirror the forward pass of
:mod:`dfanet.backbone` and :mod:`dfanet.model` layer by layer. Row names are
the module paths of the executable model, so a report can be reconciled
against a live parameter registry.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

from .backbone import STAGES, BackboneSpec
from .model import ModelSpec
from .ops import ConvParams
from .tensor import ShapeError

BYTES_PER_PARAM = 4

CONVENTION_NOTE = (
    "MACs count one multiply-accumulate per conv/FC weight application and are "
    "reported as FLOPs; batch norm, activations, bias, residual adds, pooling and "
    "bilinear interpolation are not counted. Params are raw learnable values "
    "(conv/FC weights and biases, BN scale/shift); 'param bytes' = 4 x params is the "
    "32-bit storage reading under which published Params columns are compared."
)

Shape = Tuple[int, int, int, int]


@dataclass(frozen=True)
class CostRow:
    name: str
    shape: Shape
    params: int = 0
    macs: int = 0


@dataclass
class CostReport:
    rows: List[CostRow] = field(default_factory=list)
    note: str = CONVENTION_NOTE

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def param_bytes(self) -> int:
        return BYTES_PER_PARAM * self.total_params

    def shapes(self) -> Dict[str, Shape]:
        return {r.name: r.shape for r in self.rows}

    def params_by_layer(self) -> Dict[str, int]:
        return {r.name: r.params for r in self.rows if r.params}


class _Walker:
    def __init__(self, batch: int):
        self.batch = batch
        self.rows: List[CostRow] = []

    def add(self, name, shape, params=0, macs=0):
        self.rows.append(CostRow(name, tuple(shape), params, macs))
        return tuple(shape)

    def conv(self, name: str, p: ConvParams, shape: Shape) -> Shape:
        n, c, h, w = shape
        if c != p.in_channels:
            raise ShapeError(f"{name}: expects {p.in_channels} channels, got {c}")
        ho, wo = p.output_hw(h, w)
        return self.add(name, (n, p.out_channels, ho, wo), p.param_count(), p.macs(ho, wo))

    def bn(self, name: str, shape: Shape) -> Shape:
        return self.add(name, shape, 2 * shape[1], 0)

    def conv_bn(self, name: str, p: ConvParams, shape: Shape) -> Shape:
        shape = self.conv(f"{name}.conv", p, shape)
        return self.bn(f"{name}.bn", shape)

    def sep(self, name: str, cin: int, cout: int, stride: int, shape: Shape) -> Shape:
        shape = self.conv_bn(f"{name}.dw", ConvParams(cin, cin, (3, 3), stride, 1, groups=cin), shape)
        return self.conv_bn(f"{name}.pw", ConvParams(cin, cout, (1, 1)), shape)

    def upsample(self, name: str, factor: int, shape: Shape) -> Shape:
        n, c, h, w = shape
        if factor == 1:
            return shape
        return self.add(name, (n, c, h * factor, w * factor))

    def concat(self, name: str, shapes) -> Shape:
        n, _, h, w = shapes[0]
        for s in shapes[1:]:
            if (s[0], s[2], s[3]) != (n, h, w):
                raise ShapeError(f"{name}: cannot concatenate {shapes[0]} with {s}")
        return self.add(name, (n, sum(s[1] for s in shapes), h, w))

    def backbone(self, prefix: str, spec: BackboneSpec, shape: Shape,
                 lateral: Optional[Dict[str, Shape]] = None, attention: bool = True):
        lateral = lateral or {}
        outs: Dict[str, Shape] = {}
        if spec.include_conv1:
            shape = self.conv_bn(f"{prefix}conv1",
                                 ConvParams(spec.in_channels, spec.conv1_width, (3, 3), 2, 1), shape)
        for st in spec.stages:
            if st.name in lateral:
                shape = self.concat(f"{prefix}{st.name}.input", [shape, lateral[st.name]])
            for i, blk in enumerate(st.blocks):
                bp = f"{prefix}{st.name}.{i}"
                x = shape
                c1, c2, c3 = blk.widths
                y = self.sep(f"{bp}.sep1", blk.in_channels, c1, blk.stride, x)
                y = self.sep(f"{bp}.sep2", c1, c2, 1, y)
                y = self.sep(f"{bp}.sep3", c2, c3, 1, y)
                if blk.shortcut == "projection":
                    sc = self.conv_bn(f"{bp}.proj", ConvParams(blk.in_channels, c3, (1, 1), blk.stride), x)
                    if sc != y:
                        raise ShapeError(f"{bp}: shortcut {sc} vs residual {y}")
                shape = y
            outs[st.name] = shape
        if attention:
            n, c = shape[:2]
            self.add(f"{prefix}attention.pool", (n, c, 1, 1))
            fc_p = c * spec.fc_hidden + spec.fc_hidden
            self.add(f"{prefix}attention.fc", (n, spec.fc_hidden, 1, 1), fc_p, c * spec.fc_hidden)
            self.conv(f"{prefix}attention.conv", ConvParams(spec.fc_hidden, c, (1, 1)),
                      (n, spec.fc_hidden, 1, 1))
            self.add(f"{prefix}attention.mul", shape)
        outs["fca"] = shape
        return outs


def _as_hw(input_hw) -> Tuple[int, int]:
    h, w = input_hw
    return int(h), int(w)


def analyze(spec: Union[ModelSpec, BackboneSpec], input_hw, batch: int = 1,
            include_decoder: bool = True, include_attention: bool = True,
            check_divisibility: bool = True) -> CostReport:
    """Per-layer output shapes, parameters and MACs for ``spec`` at ``input_hw``.

    A :class:`BackboneSpec` is analyzed on its own (a single backbone with its
    attention head). For a :class:`ModelSpec`, ``include_decoder=False`` gives
    the aggregated encoder followed only by parameter-free upsampling.
    """
    h, w = _as_hw(input_hw)
    wk = _Walker(batch)
    if isinstance(spec, BackboneSpec):
        wk.backbone("", spec, (batch, spec.in_channels, h, w), attention=include_attention)
        return CostReport(wk.rows)
    if check_divisibility:
        spec.check_input(h, w)
    traces = []
    for n, bb in enumerate(spec.backbones):
        prefix = f"backbone{n}."
        if n == 0:
            outs = wk.backbone(prefix, bb, (batch, 3, h, w), attention=include_attention)
        else:
            prev = traces[-1]
            entry = wk.upsample(f"{prefix}entry_upsample", spec.upsample_factor, prev["fca"])
            outs = wk.backbone(prefix, bb, entry, lateral={s: prev[s] for s in STAGES},
                               attention=include_attention)
        traces.append(outs)
    if include_decoder:
        dw = spec.decoder_width
        ll = None
        for n, outs in enumerate(traces, start=1):
            y = wk.conv_bn(f"decoder.ll{n - 1}", ConvParams(outs["enc2"][1], dw, (1, 1)), outs["enc2"])
            y = wk.upsample(f"decoder.ll{n - 1}_upsample", spec.enc2_scale(n) // 4, y)
            if ll is not None and ll != y:
                raise ShapeError(f"decoder low-level shapes differ: {ll} vs {y}")
            ll = y
        base = spec.fca_scale(1)
        ups = [wk.upsample(f"decoder.hl_upsample{n - 1}", spec.fca_scale(n) // base, outs["fca"])
               for n, outs in enumerate(traces, start=1)]
        cat = wk.concat("decoder.hl_concat", ups)
        hl = wk.conv_bn("decoder.hl", ConvParams(cat[1], dw, (1, 1)), cat)
        hl = wk.upsample("decoder.hl_output_upsample", base // 4, hl)
        if hl != ll:
            raise ShapeError(f"decoder paths disagree: {hl} vs {ll}")
        y = wk.conv("decoder.classifier", ConvParams(dw, spec.num_classes, (3, 3), 1, 1, has_bias=True), hl)
        wk.upsample("decoder.output_upsample", 4, y)
    else:
        last = traces[-1]["fca"]
        wk.upsample("output_upsample", h // last[2], last)
    return CostReport(wk.rows)


def infer_shapes(spec, input_hw, batch: int = 1) -> Dict[str, Shape]:
    return analyze(spec, input_hw, batch).shapes()


def count_params(spec, input_hw=None, **kw) -> CostReport:
    """Parameter rows. Parameter counts do not depend on resolution; a nominal
    geometry is used when ``input_hw`` is omitted."""
    if input_hw is None:
        m = spec.input_multiple if isinstance(spec, ModelSpec) else 16
        input_hw = (m, m)
    report = analyze(spec, input_hw, **kw)
    return CostReport([r for r in report.rows if r.params], report.note)


def count_macs(spec, input_hw, **kw) -> CostReport:
    report = analyze(spec, input_hw, **kw)
    return CostReport([r for r in report.rows if r.macs], report.note)


def reconcile(report: CostReport, module) -> Dict[str, Tuple[int, int]]:
    """Compare per-layer counts with a live module's parameter registry.

    Returns ``{layer: (analytic, registered)}`` for every disagreement; an
    empty dict means every parameter appears in exactly one row.
    """
    live: Dict[str, int] = {}
    for name, p in module.named_parameters():
        layer = name.rsplit(".", 1)[0]
        live[layer] = live.get(layer, 0) + p.size
    analytic = report.params_by_layer()
    out = {}
    for layer in sorted(set(live) | set(analytic)):
        a, b = analytic.get(layer, 0), live.get(layer, 0)
        if a != b:
            out[layer] = (a, b)
    return out


# --- rendering -------------------------------------------------------------

HEADER = ("name", "shape", "params", "macs")


def _fmt_shape(shape) -> str:
    return "x".join(str(s) for s in shape)


def emit_report(report: CostReport, fmt: str = "table") -> str:
    if fmt == "csv":
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(HEADER)
        for r in report.rows:
            wr.writerow((r.name, _fmt_shape(r.shape), r.params, r.macs))
        if report.rows:
            wr.writerow(("TOTAL", "", report.total_params, report.total_macs))
        return buf.getvalue()
    if fmt != "table":
        raise ValueError(f"unknown report format {fmt!r}")
    rows = [(r.name, _fmt_shape(r.shape), f"{r.params:,}", f"{r.macs:,}") for r in report.rows]
    rows.append(("TOTAL", "", f"{report.total_params:,}", f"{report.total_macs:,}"))
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(HEADER)]
    lines = ["  ".join(h.ljust(widths[i]) if i < 2 else h.rjust(widths[i])
                       for i, h in enumerate(HEADER))]
    lines.append("  ".join("-" * wd for wd in widths))
    for row in rows:
        lines.append("  ".join(v.ljust(widths[i]) if i < 2 else v.rjust(widths[i])
                               for i, v in enumerate(row)))
    lines.append("")
    lines.append(f"params      {report.total_params:,} ({report.total_params / 1e6:.3f}M)")
    lines.append(f"param bytes {report.param_bytes:,} ({report.param_bytes / 1e6:.3f}M)")
    lines.append(f"MACs        {report.total_macs:,} ({report.total_macs / 1e9:.3f}G)")
    lines.append(f"note: {report.note}")
    return "\n".join(lines) + "\n"


def parse_csv(text: str) -> CostReport:
    rd = csv.reader(io.StringIO(text))
    header = next(rd, None)
    if tuple(header or ()) != HEADER:
        raise ValueError(f"unexpected csv header {header!r}")
    rows, totals = [], None
    for rec in rd:
        if not rec:
            continue
        name, shape, params, macs = rec
        if name == "TOTAL":
            totals = (int(params), int(macs))
            continue
        dims = tuple(int(v) for v in shape.split("x"))
        rows.append(CostRow(name, dims, int(params), int(macs)))
    report = CostReport(rows)
    if totals is not None and totals != (report.total_params, report.total_macs):
        raise ValueError(f"csv totals {totals} disagree with row sums")
    return report
