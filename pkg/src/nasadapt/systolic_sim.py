"""Analytic cycle model of a weight-stationary systolic array.

Mapping: a conv layer is a (T x K) @ (K x N) product with K = in_c * k**2
filter-window elements, N = out_c filters and T = conv output positions.
K is tiled over array rows and N over columns, giving ``ceil(K/rows)`` row
folds and ``ceil(N/cols)`` column folds.  Each fold holds its weight tile
stationary while T skewed input vectors stream through, so one fold takes
``rows + cols - 2`` fill/drain cycles plus T streaming cycles, and folds run
back to back:

    cycles = row_folds * col_folds * (rows + cols - 2 + T)

Weight loading is not charged.  DRAM traffic is reported as a bandwidth
requirement only and assumed to be met.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

from .latency import LayerConfig, layer_configs_for
from .search_space import Architecture


class UnsupportedOpError(ValueError):
    pass


@dataclass(frozen=True)
class ArrayConfig:
    """Array geometry and clock.  The default is an Eyeriss-sized array (12x14 PEs
    at 200 MHz) but models no Eyeriss-specific dataflow."""

    rows: int = 12
    cols: int = 14
    frequency_hz: float = 200e6
    ifmap_sram_bytes: int = 108 * 1024
    filter_sram_bytes: int = 108 * 1024
    ofmap_sram_bytes: int = 108 * 1024
    word_bytes: int = 2
    dram_bandwidth_report_only: bool = True
    name: str = "eyeriss-like"

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("array rows and cols must be >= 1")
        if not self.frequency_hz > 0:
            raise ValueError("frequency_hz must be > 0")
        if self.word_bytes < 1:
            raise ValueError("word_bytes must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "ArrayConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown array config keys {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class CycleReport:
    compute_cycles: int
    row_folds: int
    col_folds: int
    macs: int
    utilization: float
    latency_us: float
    dram_read_bytes: int
    dram_write_bytes: int
    dram_read_bw: float  # bytes/s
    dram_write_bw: float
    name: str = ""
    per_layer: tuple["CycleReport", ...] = field(default=(), repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_layer"] = [r.to_dict() for r in self.per_layer]
        return d


def gemm_shape(layer: LayerConfig) -> tuple[int, int, int]:
    """(T, K, N) of the matrix product a layer maps onto the array."""
    if layer.op == "conv":
        h, w = layer.conv_hw()
        return h * w, layer.in_channels * layer.kernel**2, layer.out_channels
    if layer.op == "shortcut":
        h, w = layer.output_hw()
        return h * w, layer.in_channels, layer.out_channels
    if layer.op == "linear":
        # classifier as a 1x1 conv over a single position
        return 1, layer.in_channels, layer.out_channels
    raise UnsupportedOpError(f"systolic model has no mapping for op {layer.op!r}")


def gemm_cycles(T: int, K: int, N: int, cfg: ArrayConfig, name: str = "") -> CycleReport:
    rows, cols = cfg.rows, cfg.cols
    fr, fc = -(-K // rows), -(-N // cols)
    fold = rows + cols - 2 + T
    cycles = fr * fc * fold
    macs = T * K * N
    seconds = cycles / cfg.frequency_hz
    # summed over all folds: each weight loaded once, inputs re-read per column
    # fold, partial outputs written per row fold
    read_bytes = (K * N + T * K * fc) * cfg.word_bytes
    write_bytes = T * N * fr * cfg.word_bytes
    return CycleReport(
        compute_cycles=cycles,
        row_folds=fr,
        col_folds=fc,
        macs=macs,
        utilization=macs / (cycles * rows * cols),
        latency_us=seconds * 1e6,
        dram_read_bytes=read_bytes,
        dram_write_bytes=write_bytes,
        dram_read_bw=read_bytes / seconds,
        dram_write_bw=write_bytes / seconds,
        name=name,
    )


def conv_cycles(layer: LayerConfig, cfg: ArrayConfig) -> CycleReport:
    T, K, N = gemm_shape(layer)
    return gemm_cycles(T, K, N, cfg, name=layer.key())


def layer_cycles(layer: LayerConfig, cfg: ArrayConfig) -> int:
    """Cycles for any table entry.  Pooling runs on a vector unit ``cols`` lanes wide."""
    if layer.op == "pool":
        return max(1, -(-(layer.in_channels * layer.in_h * layer.in_w) // cfg.cols))
    return conv_cycles(layer, cfg).compute_cycles


def aggregate(reports, cfg: ArrayConfig, name: str = "") -> CycleReport:
    reports = tuple(reports)
    cycles = sum(r.compute_cycles for r in reports)
    macs = sum(r.macs for r in reports)
    reads = sum(r.dram_read_bytes for r in reports)
    writes = sum(r.dram_write_bytes for r in reports)
    seconds = cycles / cfg.frequency_hz
    return CycleReport(
        compute_cycles=cycles,
        row_folds=sum(r.row_folds for r in reports),
        col_folds=sum(r.col_folds for r in reports),
        macs=macs,
        utilization=macs / (cycles * cfg.rows * cfg.cols),
        latency_us=seconds * 1e6,
        dram_read_bytes=reads,
        dram_write_bytes=writes,
        dram_read_bw=reads / seconds,
        dram_write_bw=writes / seconds,
        name=name,
        per_layer=reports,
    )


def network_cycles(arch: Architecture, cfg: ArrayConfig | None = None) -> CycleReport:
    """Sum over the active conv/shortcut layers and the classifier; pooling is not charged."""
    cfg = cfg or ArrayConfig()
    layers = [c for c in layer_configs_for(arch) if c.op != "pool"]
    return aggregate((conv_cycles(c, cfg) for c in layers), cfg, name=arch.encode())
