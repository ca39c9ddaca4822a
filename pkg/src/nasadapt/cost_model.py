"""Exact parameter and MAC accounting for sub-networks.

Counting rules (all integer arithmetic):

* conv params  = in_c * out_c * k**2  (+ out_c bias) (+ norm * out_c)
* conv MACs    = conv_h * conv_w * out_c * in_c * k**2, at the conv's own output
  resolution, i.e. before any max-pool downsampling
* shortcut     = 1x1 projection at the block's output resolution, same bias/norm rules
* head         = adaptive average pool to n x n (0 params, 0 MACs), then a
  linear layer with features * classes weights + classes bias and
  features * classes MACs

Activation, pooling and normalisation contribute no MACs.  Sites beyond the
active depth are not traced and cost nothing.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from .search_space import Architecture


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class LayerTrace:
    name: str
    kind: str  # conv | shortcut
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    in_h: int
    in_w: int
    conv_h: int
    conv_w: int
    out_h: int
    out_w: int
    activation: str


@dataclass(frozen=True)
class HeadTrace:
    in_channels: int
    in_h: int
    in_w: int
    pool: int
    features: int
    classes: int


@dataclass(frozen=True)
class ShapeTrace:
    layers: tuple[LayerTrace, ...]
    head: HeadTrace


@dataclass(frozen=True)
class LayerCost:
    name: str
    params: int
    macs: int


@dataclass(frozen=True)
class CostReport:
    params: int
    macs: int
    per_layer: tuple[LayerCost, ...]

    def to_dict(self) -> dict:
        return {"params": self.params, "macs": self.macs, "per_layer": [asdict(c) for c in self.per_layer]}


def _conv_geometry(name, in_h, in_w, k, stride, conventions):
    if conventions.padding == "same":
        conv_h, conv_w = in_h, in_w
    else:
        conv_h, conv_w = in_h - k + 1, in_w - k + 1
    if conventions.downsample == "strided":
        if conventions.padding == "same":
            conv_h, conv_w = math.ceil(in_h / stride), math.ceil(in_w / stride)
        elif conv_h >= 1 and conv_w >= 1:
            conv_h, conv_w = (in_h - k) // stride + 1, (in_w - k) // stride + 1
        out_h, out_w = conv_h, conv_w
    else:
        out_h, out_w = math.ceil(conv_h / stride), math.ceil(conv_w / stride)
    if min(conv_h, conv_w, out_h, out_w) < 1:
        raise TraceError(f"{name}: spatial size underflow ({in_h}x{in_w} input, kernel {k}, stride {stride})")
    return conv_h, conv_w, out_h, out_w


def trace_shapes(arch: Architecture, input_shape=None, classes: int | None = None) -> ShapeTrace:
    """Walk the active sites of ``arch`` and record every layer's geometry."""
    backbone = arch.backbone
    c, h, w = tuple(input_shape) if input_shape is not None else backbone.input_shape
    if min(c, h, w) < 1:
        raise TraceError(f"input shape {(c, h, w)} must be positive")
    classes = backbone.classes if classes is None else classes
    conventions = backbone.conventions
    unit = backbone.layers_per_unit

    layers = []
    for i in range(arch.n_active):
        site = backbone.layers[i]
        kernel, _, activation = arch.per_layer[i]
        if i % unit == 0:
            block_in = (c, h, w)
        out_c = arch.channels(i)
        name = site.name or f"layer{i}"
        conv_h, conv_w, out_h, out_w = _conv_geometry(name, h, w, kernel, site.stride, conventions)
        layers.append(LayerTrace(name, "conv", c, out_c, kernel, site.stride, h, w, conv_h, conv_w,
                                 out_h, out_w, activation))
        c, h, w = out_c, out_h, out_w
        if backbone.residual and i % unit == unit - 1:
            bc, bh, bw = block_in
            stride = math.prod(backbone.layers[j].stride for j in range(i - unit + 1, i + 1))
            layers.append(LayerTrace(f"shortcut{i // unit}", "shortcut", bc, c, 1, stride, bh, bw,
                                     h, w, h, w, "identity"))

    n = backbone.head_pool
    head = HeadTrace(in_channels=c, in_h=h, in_w=w, pool=n, features=n * n * c, classes=classes)
    return ShapeTrace(tuple(layers), head)


def layer_params(layer: LayerTrace, conventions) -> int:
    p = layer.in_channels * layer.out_channels * layer.kernel**2
    if conventions.conv_bias:
        p += layer.out_channels
    return p + conventions.norm_params_per_channel * layer.out_channels


def layer_macs(layer: LayerTrace) -> int:
    return layer.conv_h * layer.conv_w * layer.out_channels * layer.in_channels * layer.kernel**2


def cost_report(arch: Architecture, input_shape=None, classes: int | None = None) -> CostReport:
    trace = trace_shapes(arch, input_shape, classes)
    conventions = arch.backbone.conventions
    entries = [LayerCost(t.name, layer_params(t, conventions), layer_macs(t)) for t in trace.layers]
    head = trace.head
    entries.append(LayerCost("pool", 0, 0))
    entries.append(LayerCost("linear", head.features * head.classes + head.classes, head.features * head.classes))
    return CostReport(
        params=sum(e.params for e in entries),
        macs=sum(e.macs for e in entries),
        per_layer=tuple(entries),
    )


def count_params(arch: Architecture, input_shape=None, classes: int | None = None) -> int:
    return cost_report(arch, input_shape, classes).params


def count_macs(arch: Architecture, input_shape=None, classes: int | None = None) -> int:
    return cost_report(arch, input_shape, classes).macs


def format_table(report: CostReport) -> str:
    rows = [("layer", "params", "macs")]
    rows += [(c.name, f"{c.params:,}", f"{c.macs:,}") for c in report.per_layer]
    rows.append(("total", f"{report.params:,}", f"{report.macs:,}"))
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    lines = []
    for j, r in enumerate(rows):
        lines.append(f"{r[0]:<{widths[0]}}  {r[1]:>{widths[1]}}  {r[2]:>{widths[2]}}")
        if j == 0 or j == len(rows) - 2:
            lines.append("-" * (sum(widths) + 4))
    return "\n".join(lines)
