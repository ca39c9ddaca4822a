"""Layer-wise latency profiling and lookup-table composition.

Every sub-network is a chain of layers drawn from a finite set of distinct
layer configurations.  Profiling measures each distinct configuration once;
the latency of any sub-network is then the sum of its layers' entries.
"""

from __future__ import annotations

import json
import logging
import math
import os
import statistics
import threading
import time
from dataclasses import dataclass, fields
from datetime import datetime, timezone
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Mapping

from .cost_model import _conv_geometry, trace_shapes
from .search_space import Architecture, Backbone, Conventions, space_size
from .utils import atomic_write_text

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
METHODS = ("measured", "analytic", "systolic")
OPS = ("conv", "shortcut", "pool", "linear")


class LatencyError(Exception):
    pass


class MissingEntriesError(LatencyError):
    def __init__(self, missing: Iterable[str]):
        self.missing = sorted(set(missing))
        preview = ", ".join(self.missing[:5])
        more = f" (+{len(self.missing) - 5} more)" if len(self.missing) > 5 else ""
        super().__init__(f"latency table lacks {len(self.missing)} layer configs: {preview}{more}")


class TableFormatError(LatencyError):
    pass


@dataclass(frozen=True, order=True)
class LayerConfig:
    """One distinct layer as it appears in a deployed network.

    ``op`` is conv (searchable site, including its activation and downsample),
    shortcut (residual projection plus the add), pool (adaptive average pool to
    ``kernel`` x ``kernel``) or linear (``in_channels`` features to
    ``out_channels`` classes).
    """

    op: str
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    in_h: int
    in_w: int
    activation: str
    padding: str = "same"
    downsample: str = "maxpool"

    def key(self) -> str:
        return (
            f"{self.op}:ic={self.in_channels},oc={self.out_channels},k={self.kernel},s={self.stride},"
            f"h={self.in_h},w={self.in_w},act={self.activation},pad={self.padding},ds={self.downsample}"
        )

    @classmethod
    def from_key(cls, key: str) -> "LayerConfig":
        try:
            op, rest = key.split(":", 1)
            parts = dict(item.split("=", 1) for item in rest.split(","))
            cfg = cls(
                op=op,
                in_channels=int(parts.pop("ic")),
                out_channels=int(parts.pop("oc")),
                kernel=int(parts.pop("k")),
                stride=int(parts.pop("s")),
                in_h=int(parts.pop("h")),
                in_w=int(parts.pop("w")),
                activation=parts.pop("act"),
                padding=parts.pop("pad"),
                downsample=parts.pop("ds"),
            )
        except (ValueError, KeyError) as exc:
            raise TableFormatError(f"undecodable layer key {key!r}: {exc}") from None
        if parts or op not in OPS or cfg.key() != key:
            raise TableFormatError(f"non-canonical layer key {key!r}")
        return cfg

    def conv_hw(self) -> tuple[int, int]:
        if self.op == "conv":
            conv_h, conv_w, _, _ = _conv_geometry(self.op, self.in_h, self.in_w, self.kernel, self.stride,
                                                  Conventions(padding=self.padding, downsample=self.downsample))
            return conv_h, conv_w
        if self.op == "shortcut":
            return self.output_hw()
        if self.op == "linear":
            return 1, 1
        return self.kernel, self.kernel

    def output_hw(self) -> tuple[int, int]:
        if self.op == "conv":
            _, _, out_h, out_w = _conv_geometry(self.op, self.in_h, self.in_w, self.kernel, self.stride,
                                                Conventions(padding=self.padding, downsample=self.downsample))
            return out_h, out_w
        if self.op == "shortcut":
            return math.ceil(self.in_h / self.stride), math.ceil(self.in_w / self.stride)
        if self.op == "pool":
            return self.kernel, self.kernel
        return 1, 1

    @property
    def macs(self) -> int:
        if self.op == "pool":
            return 0
        h, w = self.conv_hw()
        k2 = self.kernel**2 if self.op == "conv" else 1
        return h * w * self.in_channels * self.out_channels * k2


def layer_configs_for(arch: Architecture) -> list[LayerConfig]:
    """The layer configs of ``arch``'s deployed network, in execution order, head last."""
    trace = trace_shapes(arch)
    conv = arch.backbone.conventions
    out = [
        LayerConfig(t.kind, t.in_channels, t.out_channels, t.kernel, t.stride, t.in_h, t.in_w, t.activation,
                    conv.padding, conv.downsample)
        for t in trace.layers
    ]
    h = trace.head
    out.append(LayerConfig("pool", h.in_channels, h.in_channels, h.pool, 1, h.in_h, h.in_w, "identity",
                           conv.padding, conv.downsample))
    out.append(LayerConfig("linear", h.features, h.classes, 1, 1, 1, 1, "identity", conv.padding, conv.downsample))
    return out


def enumerate_unique_layer_configs(backbone: Backbone) -> set[LayerConfig]:
    """Every layer config reachable by some valid architecture of ``backbone``.

    Propagates the set of reachable (GE, block-input, current tensor) states
    site by site, so the work is proportional to the number of distinct
    configs, not the size of the space.
    """
    conv = backbone.conventions
    c0, h0, w0 = backbone.input_shape
    unit = backbone.layers_per_unit
    ges = backbone.global_expansion_choices or (None,)
    configs: set[LayerConfig] = set()

    def channels(site, e, g):
        from .search_space import round_half_up

        return max(1, round_half_up(site.base_channels * e * (g if g is not None else 1)))

    def add_head(states):
        for _, _, (c, h, w) in states:
            n = backbone.head_pool
            configs.add(LayerConfig("pool", c, c, n, 1, h, w, "identity", conv.padding, conv.downsample))
            configs.add(LayerConfig("linear", n * n * c, backbone.classes, 1, 1, 1, 1, "identity",
                                    conv.padding, conv.downsample))

    # state: (ge, block input tensor, current tensor)
    states = {(g, (c0, h0, w0), (c0, h0, w0)) for g in ges}
    for i, site in enumerate(backbone.layers[: backbone.active_layers(backbone.max_depth)]):
        new_states = set()
        for g, block_in, (c, h, w) in states:
            if i % unit == 0:
                block_in = (c, h, w)
            for k in site.kernel_choices:
                try:
                    _, _, oh, ow = _conv_geometry(site.name, h, w, k, site.stride, conv)
                except ValueError:
                    continue
                for e in site.expansion_choices:
                    oc = channels(site, e, g)
                    for a in site.activation_choices:
                        configs.add(LayerConfig("conv", c, oc, k, site.stride, h, w, a, conv.padding, conv.downsample))
                    new_states.add((g, block_in, (oc, oh, ow)))
        states = new_states
        if backbone.residual and i % unit == unit - 1:
            stride = math.prod(backbone.layers[j].stride for j in range(i - unit + 1, i + 1))
            for g, (bc, bh, bw), (c, h, w) in states:
                configs.add(LayerConfig("shortcut", bc, c, 1, stride, bh, bw, "identity", conv.padding, conv.downsample))
        if (i + 1) % unit == 0 and (i + 1) // unit in backbone.depth_choices:
            add_head(states)
    return configs


# --------------------------------------------------------------------------
# tables


@dataclass(frozen=True)
class Entry:
    latency_us: float
    iqr_us: float = 0.0
    samples: int = 1


@dataclass(frozen=True)
class LatencyTable:
    device_name: str
    method: str
    entries: Mapping[str, Entry]
    created_at: str = ""
    backbone: str | None = None
    missing: tuple[str, ...] = ()

    def __post_init__(self):
        if self.method not in METHODS:
            raise TableFormatError(f"unknown method {self.method!r}")
        for key, entry in self.entries.items():
            if not entry.latency_us > 0 or not math.isfinite(entry.latency_us):
                raise TableFormatError(f"entry {key!r} has non-positive latency {entry.latency_us}")

    def __contains__(self, cfg) -> bool:
        return (cfg.key() if isinstance(cfg, LayerConfig) else cfg) in self.entries

    def lookup(self, cfg: LayerConfig) -> float:
        return self.entries[cfg.key()].latency_us

    def missing_for(self, backbone: Backbone) -> set[str]:
        return {c.key() for c in enumerate_unique_layer_configs(backbone)} - set(self.entries)

    def is_total(self, backbone: Backbone) -> bool:
        return not self.missing and not self.missing_for(backbone)


def compose_configs(configs: Iterable[LayerConfig], table: LatencyTable) -> float:
    configs = list(configs)
    absent = [c.key() for c in configs if c.key() not in table.entries]
    if absent:
        raise MissingEntriesError(absent)
    return sum(table.entries[c.key()].latency_us for c in configs)


def compose(arch: Architecture, table: LatencyTable) -> float:
    """Latency of ``arch`` in microseconds: the sum of its layers' table entries."""
    return compose_configs(layer_configs_for(arch), table)


def naive_traverse_estimate(backbone: Backbone, per_network_seconds) -> Fraction:
    """Hours needed to time every genome one by one, as an exact rational."""
    seconds = Fraction(str(per_network_seconds)) if isinstance(per_network_seconds, float) else Fraction(per_network_seconds)
    if seconds <= 0:
        raise ValueError("per_network_seconds must be > 0")
    return space_size(backbone).exact * seconds / 3600


def table_to_dict(table: LatencyTable) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "device_name": table.device_name,
        "method": table.method,
        "created_at": table.created_at,
        "backbone": table.backbone,
        "missing": list(table.missing),
        "entries": [
            {"key": k, "latency_us": e.latency_us, "iqr_us": e.iqr_us, "samples": e.samples}
            for k, e in sorted(table.entries.items())
        ],
    }


def table_from_dict(data: Mapping) -> LatencyTable:
    if not isinstance(data, Mapping):
        raise TableFormatError("table must be a JSON object")
    version = data.get("format_version")
    if version != FORMAT_VERSION:
        raise TableFormatError(f"unsupported table format_version {version!r} (expected {FORMAT_VERSION})")
    try:
        entries = {}
        for item in data["entries"]:
            LayerConfig.from_key(item["key"])
            entries[item["key"]] = Entry(float(item["latency_us"]), float(item["iqr_us"]), int(item["samples"]))
        return LatencyTable(
            device_name=str(data["device_name"]),
            method=str(data["method"]),
            entries=entries,
            created_at=str(data.get("created_at", "")),
            backbone=data.get("backbone"),
            missing=tuple(data.get("missing", ())),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise TableFormatError(f"malformed latency table: {exc!r}") from None


def save(table: LatencyTable, path) -> None:
    atomic_write_text(path, json.dumps(table_to_dict(table), indent=1) + "\n")


def load(path) -> LatencyTable:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise TableFormatError(f"{path}: not valid JSON ({exc})") from None
    return table_from_dict(data)


# --------------------------------------------------------------------------
# providers


@dataclass(frozen=True)
class DeviceProfile:
    device_name: str
    method: str
    repetitions: int = 5
    warmup: int = 2
    pin_cpu: int | None = 0
    throughput_macs_per_s: float | None = None
    array: object | None = None  # systolic_sim.ArrayConfig
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.method == "measured" and self.repetitions < 3:
            raise ValueError("measured profiling needs repetitions >= 3")
        if self.method == "analytic" and not (self.throughput_macs_per_s and self.throughput_macs_per_s > 0):
            raise ValueError("analytic profiling needs a positive throughput_macs_per_s")

    @classmethod
    def from_dict(cls, data: Mapping) -> "DeviceProfile":
        from .systolic_sim import ArrayConfig

        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown device profile keys {sorted(unknown)}")
        data = dict(data)
        if data.get("method") == "systolic":
            data["array"] = ArrayConfig.from_dict(data.get("array") or {})
        return cls(**data)


@dataclass(frozen=True)
class Measurement:
    latency_us: float
    iqr_us: float
    samples: int


class AnalyticProvider:
    """Latency = work / throughput.  Work is MACs, or input elements for pooling."""

    def __init__(self, throughput_macs_per_s: float):
        self.throughput = throughput_macs_per_s

    def __call__(self, cfg: LayerConfig) -> Measurement:
        work = cfg.macs if cfg.op != "pool" else cfg.in_channels * cfg.in_h * cfg.in_w
        return Measurement(work / self.throughput * 1e6, 0.0, 1)


class SystolicProvider:
    def __init__(self, array):
        self.array = array

    def __call__(self, cfg: LayerConfig) -> Measurement:
        from .systolic_sim import layer_cycles

        cycles = layer_cycles(cfg, self.array)
        return Measurement(cycles / self.array.frequency_hz * 1e6, 0.0, 1)


_BENCH_LOCK = threading.Lock()
_ALLOCATOR_PINNED = False


def _pin_allocator() -> None:
    """Stop glibc from adapting its mmap threshold mid-benchmark.

    By default large numpy buffers are mmapped and unmapped on every call
    until the dynamic threshold catches up, so early repetitions pay page
    faults that later ones do not.  Fixing the thresholds keeps every run on
    the heap.  No-op off glibc.
    """
    global _ALLOCATOR_PINNED
    if _ALLOCATOR_PINNED:
        return
    _ALLOCATOR_PINNED = True
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        log.debug("mallopt unavailable; allocator left as is")


class _pinned:
    """Pin to one CPU and one BLAS thread for the duration of a benchmark."""

    def __init__(self, cpu: int | None):
        self.cpu = cpu
        self._saved = None
        self._limits = None

    def __enter__(self):
        from threadpoolctl import threadpool_limits

        self._limits = threadpool_limits(limits=1)
        if self.cpu is not None and hasattr(os, "sched_setaffinity"):
            try:
                self._saved = os.sched_getaffinity(0)
                allowed = sorted(self._saved)
                os.sched_setaffinity(0, {allowed[self.cpu % len(allowed)]})
            except OSError:
                self._saved = None
        return self

    def __exit__(self, *exc):
        if self._saved is not None:
            os.sched_setaffinity(0, self._saved)
        self._limits.restore_original_limits()
        return False


def _summarize(samples_ns: list[int]) -> Measurement:
    us = [s / 1000.0 for s in samples_ns]
    if len(us) >= 2:
        q1, _, q3 = statistics.quantiles(us, n=4, method="inclusive")
    else:
        q1 = q3 = us[0]
    return Measurement(statistics.median(us), q3 - q1, len(us))


class MeasuredProvider:
    """Times the bundled numpy kernels on this host: median of N runs after warmup.

    Before each timed run the private caches are evicted and the input is
    rewritten, so a layer starts the way it would inside a network: input
    freshly produced by the previous layer, weights cold.
    """

    def __init__(self, repetitions: int = 5, warmup: int = 2, pin_cpu: int | None = 0, seed: int = 0,
                 flush_bytes: int = 4 << 20):
        import numpy as np

        if repetitions < 3:
            raise ValueError("repetitions must be >= 3")
        self.repetitions = repetitions
        self.warmup = warmup
        self.pin_cpu = pin_cpu
        self.seed = seed
        self.flush_bytes = flush_bytes
        self._scratch = np.zeros(max(1, flush_bytes // 8))
        _pin_allocator()

    def _prepare(self, arg, source):
        import numpy as np

        if self.flush_bytes:
            self._scratch += 1.0
        if isinstance(arg, tuple):
            for dst, src in zip(arg, source):
                np.copyto(dst, src)
        else:
            np.copyto(arg, source)

    def _time(self, fn, arg) -> Measurement:
        source = tuple(a.copy() for a in arg) if isinstance(arg, tuple) else arg.copy()
        for _ in range(self.warmup):
            fn(arg)
        samples = []
        for _ in range(self.repetitions):
            self._prepare(arg, source)
            t0 = time.perf_counter_ns()
            fn(arg)
            samples.append(max(1, time.perf_counter_ns() - t0))
        return _summarize(samples)

    def __call__(self, cfg: LayerConfig) -> Measurement:
        import numpy as np

        from .kernels import build_op, example_input

        rng = np.random.default_rng(self.seed)
        op = build_op(cfg, rng)
        x = example_input(cfg, rng)
        with _BENCH_LOCK, _pinned(self.pin_cpu):
            return self._time(op, x)

    def measure_network(self, arch: Architecture) -> Measurement:
        """End-to-end time of ``arch`` run through the same kernels."""
        import numpy as np

        from .kernels import DTYPE, build_op

        rng = np.random.default_rng(self.seed)
        configs = layer_configs_for(arch)
        ops = [build_op(c, rng) for c in configs]
        c, h, w = arch.backbone.input_shape
        x0 = rng.standard_normal((c, h, w)).astype(DTYPE)
        unit = arch.backbone.layers_per_unit

        def forward(x):
            block_in = x
            conv_seen = 0
            for cfg, op in zip(configs, ops):
                if cfg.op == "conv":
                    if conv_seen % unit == 0:
                        block_in = x
                    conv_seen += 1
                    x = op(x)
                elif cfg.op == "shortcut":
                    x = op((x, block_in))
                else:
                    x = op(x)
            return x

        with _BENCH_LOCK, _pinned(self.pin_cpu):
            return self._time(forward, x0)


def make_provider(device: DeviceProfile) -> Callable[[LayerConfig], Measurement]:
    if device.method == "analytic":
        return AnalyticProvider(device.throughput_macs_per_s)
    if device.method == "systolic":
        from .systolic_sim import ArrayConfig

        return SystolicProvider(device.array or ArrayConfig())
    return MeasuredProvider(device.repetitions, device.warmup, device.pin_cpu, device.seed)


def profile(backbone: Backbone, device: DeviceProfile, provider=None, progress=None) -> LatencyTable:
    """Benchmark every distinct layer config of ``backbone`` once.

    A config whose benchmark raises is recorded in ``missing``; such a table
    is refused by adaptation until completed.
    """
    provider = provider or make_provider(device)
    configs = sorted(enumerate_unique_layer_configs(backbone))
    entries: dict[str, Entry] = {}
    missing = []
    for n, cfg in enumerate(configs):
        try:
            m = provider(cfg)
            entries[cfg.key()] = Entry(float(m.latency_us), float(m.iqr_us), int(m.samples))
        except Exception as exc:  # noqa: BLE001 - any benchmark failure is recorded, not fatal
            log.warning("benchmark failed for %s: %s", cfg.key(), exc)
            missing.append(cfg.key())
        if progress is not None:
            progress(n + 1, len(configs))
    return LatencyTable(
        device_name=device.device_name,
        method=device.method,
        entries=entries,
        created_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
        backbone=backbone.name,
        missing=tuple(missing),
    )
