"""Command-line entry point: ``nasadapt <command> ...``.

Exit codes: 0 success, 1 domain failure (infeasible constraint, missing
table entries, oracle failure), 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

from . import __version__
from .adaptation import (
    AdaptationAborted,
    AdaptationConfig,
    Constraint,
    InfeasibleConstraintError,
    _num,
    adapt,
    pareto_frontier,
    pareto_sweep,
)
from .cost_model import TraceError, cost_report, format_table
from .latency import (
    DeviceProfile,
    LatencyError,
    MissingEntriesError,
    TableFormatError,
    enumerate_unique_layer_configs,
    layer_configs_for,
)
from .latency import load as load_table
from .latency import profile as profile_backbone
from .latency import save as save_table
from .oracle import OracleProtocolError, SurrogateParams, TaskSet, make_oracle, serve, shipped_registry
from .report import csv_text, write_csv, write_plot
from .sampler import ScheduleError, ShrinkSchedule, schedule_curve
from .search_space import (
    SHIPPED_BACKBONES,
    Backbone,
    BackboneError,
    GenomeDecodeError,
    backbone_to_dict,
    decode,
    largest,
    load_backbone,
    smallest,
    space_size,
)
from .systolic_sim import ArrayConfig, UnsupportedOpError, network_cycles
from .utils import atomic_write_text

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    backbone: str = "vgg9"
    input_shape: tuple[int, int, int] | None = None
    classes: int | None = None
    schedule: ShrinkSchedule = field(default_factory=ShrinkSchedule)
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    task_set: TaskSet = field(default_factory=TaskSet)
    surrogate: SurrogateParams = field(default_factory=SurrogateParams)
    constraint: dict | None = None
    table: str | None = None
    device: str | None = None
    array: dict | None = None
    oracle: str = "surrogate"
    output_dir: str = "."
    seed: int | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape) if self.input_shape else None
        return d


def _resolve(base: Path, value: str | None) -> str | None:
    if value is None:
        return None
    p = Path(value)
    return str(p if p.is_absolute() else base / p)


def _is_shipped(name: str) -> bool:
    return name in SHIPPED_BACKBONES and not Path(name).exists()


def load_run_config(path) -> RunConfig:
    """Strict: unknown keys and missing referenced files are errors."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    known = {f.name for f in fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
    base = path.parent
    try:
        cfg = RunConfig(
            backbone=data.get("backbone", "vgg9"),
            input_shape=tuple(data["input_shape"]) if data.get("input_shape") else None,
            classes=data.get("classes"),
            schedule=ShrinkSchedule.from_dict(data.get("schedule", {})),
            adaptation=AdaptationConfig.from_dict(data.get("adaptation", {})),
            task_set=TaskSet.from_dict(data.get("task_set", {})),
            surrogate=SurrogateParams.from_dict(data.get("surrogate", {})),
            constraint=data.get("constraint"),
            table=data.get("table"),
            device=data.get("device"),
            array=data.get("array"),
            oracle=data.get("oracle", "surrogate"),
            output_dir=data.get("output_dir", "."),
            seed=data.get("seed"),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if cfg.constraint is not None:
        if not isinstance(cfg.constraint, dict) or set(cfg.constraint) - {"metric", "bound", "device"}:
            raise ConfigError(f"{path}: constraint block takes metric, bound and device only")
    if cfg.array is not None:
        ArrayConfig.from_dict(cfg.array)
    if not _is_shipped(cfg.backbone):
        cfg.backbone = _resolve(base, cfg.backbone)
    cfg.table = _resolve(base, cfg.table)
    cfg.output_dir = _resolve(base, cfg.output_dir)
    for label, ref in (("backbone", None if _is_shipped(cfg.backbone) else cfg.backbone), ("table", cfg.table)):
        if ref is not None and not Path(ref).exists():
            raise ConfigError(f"{path}: {label} file {ref} does not exist")
    if cfg.seed is not None and not isinstance(cfg.seed, int):
        raise ConfigError(f"{path}: seed must be an integer")
    return cfg


def resolve_seed(flag: int | None, config_seed: int | None) -> tuple[int, str]:
    """Precedence: command-line flag, then NAS_SEED, then the config file."""
    if flag is not None:
        return flag, "flag"
    env = os.environ.get("NAS_SEED")
    if env not in (None, ""):
        try:
            return int(env), "env"
        except ValueError:
            raise ConfigError(f"NAS_SEED={env!r} is not an integer") from None
    if config_seed is not None:
        return config_seed, "config"
    return 0, "default"


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=1, allow_nan=False) + "\n")


def _echo(path, args, cfg: RunConfig, seed: int, seed_source: str, backbone: Backbone, extra=None):
    echo = {
        "tool_version": __version__,
        "command": args.command,
        "argv": list(args._argv),
        "seed": seed,
        "seed_source": seed_source,
        "config": cfg.to_dict(),
        "backbone": backbone_to_dict(backbone),
    }
    if cfg.table:
        echo["table_sha256"] = _file_digest(cfg.table)
    echo.update(extra or {})
    _write_json(path, echo)


# --------------------------------------------------------------------------
# helpers


def _shape(text: str) -> tuple[int, int, int]:
    try:
        dims = tuple(int(x) for x in text.replace("x", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"input shape {text!r} must be C,H,W") from None
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"input shape {text!r} must be three positive integers")
    return dims


def _config(args) -> RunConfig:
    cfg = load_run_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "backbone", None):
        cfg.backbone = args.backbone
    if getattr(args, "input_shape", None):
        cfg.input_shape = args.input_shape
    if getattr(args, "classes", None):
        cfg.classes = args.classes
    return cfg


def _backbone(cfg: RunConfig) -> Backbone:
    b = load_backbone(cfg.backbone)
    if cfg.input_shape or cfg.classes:
        b = b.with_head(input_shape=cfg.input_shape, classes=cfg.classes)
    return b


def _registry(backbone: Backbone) -> dict:
    reg = shipped_registry()
    reg[backbone.name] = backbone
    return reg


def _array(cfg: RunConfig, path: str | None) -> ArrayConfig:
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"array config {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return ArrayConfig.from_dict(data)
    return ArrayConfig.from_dict(cfg.array) if cfg.array else ArrayConfig()


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=1, allow_nan=False))


def _sibling(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


# --------------------------------------------------------------------------
# commands


def cmd_space_stats(args) -> int:
    cfg = _config(args)
    b = _backbone(cfg)
    size = space_size(b)
    stats = {
        "backbone": b.name,
        "genomes": size.exact,
        "distinct_networks": size.distinct_networks,
        "sites": len(b.layers),
        "depth_range": [b.min_depth, b.max_depth],
        "layers_per_unit": b.layers_per_unit,
        "options_per_site": [s.n_options for s in b.layers],
        "global_expansion_choices": len(b.global_expansion_choices or ()),
    }
    if args.layer_configs:
        stats["unique_layer_configs"] = len(enumerate_unique_layer_configs(b))
    if args.json:
        _print_json(stats)
        return EXIT_OK
    print(f"backbone            {b.name}")
    print(f"genomes             {size.exact:,}")
    print(f"distinct networks   {size.distinct_networks:,}")
    print(f"sites               {len(b.layers)} (depth {b.min_depth}..{b.max_depth}, {b.layers_per_unit} site(s) per unit)")
    print(f"options per site    {', '.join(str(n) for n in stats['options_per_site'])}")
    if args.layer_configs:
        print(f"unique layer cfgs   {stats['unique_layer_configs']:,}")
    return EXIT_OK


def _arch_from_args(args, b: Backbone):
    if args.arch and args.preset:
        raise UsageError("give either --arch or --preset, not both")
    if args.preset == "largest":
        return largest(b)
    if args.preset == "smallest":
        return smallest(b)
    if not args.arch:
        raise UsageError("an architecture is required (--arch GENOME or --preset largest|smallest)")
    return decode(args.arch, _registry(b))


def cmd_costs(args) -> int:
    cfg = _config(args)
    b = _backbone(cfg)
    arch = _arch_from_args(args, b)
    report = cost_report(arch)
    out = {"arch": arch.encode(), "input_shape": list(b.input_shape), "classes": b.classes, **report.to_dict()}
    if args.out:
        _write_json(args.out, out)
    _print_json(out)
    print()
    print(format_table(report))
    return EXIT_OK


def cmd_profile(args) -> int:
    cfg = _config(args)
    b = _backbone(cfg)
    try:
        device_data = json.loads(Path(args.device).read_text())
    except FileNotFoundError:
        raise ConfigError(f"device profile {args.device} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.device}: invalid JSON ({exc})") from None
    device = DeviceProfile.from_dict(device_data)
    seed, source = resolve_seed(args.seed, cfg.seed)
    device = replace(device, seed=seed)

    def progress(done, total):
        if not args.quiet and (done == total or done % max(1, total // 10) == 0):
            print(f"profiled {done}/{total}", file=sys.stderr)

    table = profile_backbone(b, device, progress=progress)
    out = Path(args.out)
    save_table(table, out)
    cfg.table = str(out)
    _echo(_sibling(out, ".config.json"), args, cfg, seed, source, b, {"device": device_data})
    print(f"wrote {len(table.entries)} entries to {out}")
    if table.missing:
        raise MissingEntriesError(table.missing)
    return EXIT_OK


def cmd_latency(args) -> int:
    cfg = _config(args)
    b = _backbone(cfg)
    table = load_table(args.table)
    arch = decode(args.arch, _registry(b))
    configs = layer_configs_for(arch)
    missing = [c.key() for c in configs if c.key() not in table.entries]
    if missing:
        raise MissingEntriesError(missing)
    layers = [{"key": c.key(), "latency_us": table.entries[c.key()].latency_us} for c in configs]
    _print_json({
        "arch": arch.encode(),
        "device_name": table.device_name,
        "method": table.method,
        "latency_us": math.fsum(l["latency_us"] for l in layers),
        "layers": layers,
    })
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _config(args)
    b = _backbone(cfg)
    array = _array(cfg, args.array)
    arch = decode(args.arch, _registry(b))
    report = network_cycles(arch, array)
    out = {"array": asdict(array), **report.to_dict()}
    if args.out:
        _write_json(args.out, out)
    _print_json(out)
    return EXIT_OK


def cmd_schedule(args) -> int:
    cfg = _config(args)
    sched = cfg.schedule
    overrides = {k: getattr(args, k) for k in ("p_i", "p_e", "alpha", "e_s", "e_m") if getattr(args, k) is not None}
    if overrides:
        sched = ShrinkSchedule(**{**asdict(sched), **overrides})
    last = args.epochs if args.epochs is not None else int(math.ceil(sched.e_m))
    curve = schedule_curve(sched, range(0, last + 1))
    header = ("epoch", "p_largest")
    rows = [(e, repr(p)) for e, p in curve]
    if args.plot:
        write_csv(args.plot, header, rows)
    if args.svg:
        write_plot(args.svg, header, rows, [], line=curve, title="progressive shrinking",
                   xlabel="epoch", ylabel="P(largest network)")
    if not args.plot and not args.svg:
        sys.stdout.write(csv_text(header, rows))
    return EXIT_OK


def _constraint(args, cfg: RunConfig) -> Constraint:
    spec = args.constraint
    block = cfg.constraint or {}
    if spec is None and not block:
        raise UsageError("a constraint is required (--constraint metric:bound or a constraint block)")
    if spec is not None:
        metric, _, bound = spec.partition(":")
        if not _:
            raise UsageError(f"constraint {spec!r} is not of the form metric:bound")
    else:
        metric, bound = block.get("metric"), block.get("bound")
    return _build_constraint(args, cfg, metric, bound)


def _build_constraint(args, cfg, metric, bound) -> Constraint:
    try:
        bound = float(bound)
    except (TypeError, ValueError):
        raise ConfigError(f"constraint bound {bound!r} is not a number") from None
    table = array = None
    if metric == "latency":
        path = args.table or cfg.table
        if not path:
            raise UsageError("a latency constraint needs --table")
        cfg.table = path
        table = load_table(path)
    if metric == "cycles":
        array = _array(cfg, getattr(args, "array", None))
    device = args.device or (cfg.constraint or {}).get("device")
    # fold flags into the config so the echo alone can re-run the search
    cfg.constraint = {"metric": metric, "bound": _num(bound), **({"device": device} if device else {})}
    return Constraint(metric, bound, table=table, array=array, device=device)


def _adapt_setup(args):
    cfg = _config(args)
    if args.oracle:
        cfg.oracle = args.oracle
    seed, source = resolve_seed(args.seed, cfg.seed)
    overrides = {"rng_seed": seed}
    for name in ("pool_size", "iterations", "workers"):
        if getattr(args, name, None) is not None:
            overrides[name] = getattr(args, name)
    cfg.adaptation = replace(cfg.adaptation, **overrides)
    if args.n_tasks is not None or args.slice_size is not None:
        cfg.task_set = replace(
            cfg.task_set,
            n_tasks=args.n_tasks if args.n_tasks is not None else cfg.task_set.n_tasks,
            slice_size=args.slice_size if args.slice_size is not None else cfg.task_set.slice_size,
        )
    cfg.seed = seed
    return cfg, seed, source


def _open_oracle(cfg: RunConfig, log_path: Path | None, timeout: float):
    if cfg.oracle.startswith("cmd:"):
        log = open(log_path, "w", encoding="utf-8") if log_path else None
        return make_oracle(cfg.oracle, cfg.surrogate, timeout=timeout, audit=log), log
    return make_oracle(cfg.oracle, cfg.surrogate), None


def cmd_adapt(args) -> int:
    cfg, seed, source = _adapt_setup(args)
    b = _backbone(cfg)
    constraint = _constraint(args, cfg)
    out = Path(args.out) if args.out else Path(cfg.output_dir) / "result.json"
    oracle, log = _open_oracle(cfg, _sibling(out, ".oracle.log"), args.timeout)
    try:
        _echo(_sibling(out, ".config.json"), args, cfg, seed, source, b, {"constraint": constraint.describe()})
        try:
            result = adapt(b, constraint, oracle, cfg.task_set, cfg.adaptation)
        except AdaptationAborted as exc:
            _write_json(_sibling(out, ".partial.json"), {
                "error": str(exc), "query": exc.query, "audit": [asdict(a) for a in exc.audit],
            })
            raise
    finally:
        oracle.close()
        if log:
            log.close()
    _write_json(out, result.to_dict())
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(json.dumps({"best": result.best.encode(), "mean_loss": result.mean_loss,
                      constraint.metric: result.metric_value, "out": str(out)}))
    return EXIT_OK


def _read_bounds(text: str) -> list[float]:
    p = Path(text)
    raw = p.read_text() if p.exists() else text
    values = []
    for tok in raw.replace("\n", ",").split(","):
        tok = tok.strip()
        if not tok:
            continue
        try:
            values.append(float(tok))
        except ValueError:
            if not values and tok.isidentifier():  # header row
                continue
            raise ConfigError(f"bound {tok!r} is not a number") from None
    if not values:
        raise ConfigError("no bounds given")
    return values


def cmd_pareto(args) -> int:
    cfg, seed, source = _adapt_setup(args)
    b = _backbone(cfg)
    bounds = _read_bounds(args.bounds)
    if bounds != sorted(bounds):
        raise ConfigError("bounds must be sorted ascending")
    metric = args.metric or (cfg.constraint or {}).get("metric")
    if not metric:
        raise UsageError("a constraint metric is required (--metric)")
    probe = _build_constraint(args, cfg, metric, bounds[0])
    out_dir = Path(args.out_dir or cfg.output_dir)
    oracle, log = _open_oracle(cfg, out_dir / "oracle.log", args.timeout)
    try:
        _echo(out_dir / "config_echo.json", args, cfg, seed, source, b,
              {"metric": metric, "bounds": bounds})
        points = pareto_sweep(b, metric, bounds, oracle, cfg.task_set, cfg.adaptation,
                              table=probe.table, array=probe.array, device=probe.device)
    finally:
        oracle.close()
        if log:
            log.close()
    front = {id(p) for p in pareto_frontier(points)}
    header = ("bound", "metric_value", "mean_loss", "best", "on_frontier", "error")
    rows = []
    for p in points:
        r = p.row()
        rows.append((r["bound"], r["metric_value"] if r["metric_value"] is not None else "",
                     repr(r["mean_loss"]) if r["mean_loss"] is not None else "", r["best"] or "",
                     int(id(p) in front), r["error"] or ""))
    scatter = [(float(p.result.metric_value), p.result.mean_loss) for p in points if p.result]
    line = [(float(p.result.metric_value), p.result.mean_loss) for p in pareto_frontier(points)]
    write_plot(out_dir / "frontier.svg", header, rows, scatter, line=line, title=f"{b.name}: {metric} vs mean loss",
               xlabel=metric, ylabel="mean loss")
    _write_json(out_dir / "sweep.json", [
        {**p.row(), "result": p.result.to_dict() if p.result else None} for p in points
    ])
    failed = sum(p.result is None for p in points)
    print(f"{len(points) - failed}/{len(points)} bounds feasible; frontier has {len(line)} points; wrote {out_dir}")
    return EXIT_OK


def cmd_oracle_serve(args) -> int:
    cfg = _config(args)
    params = cfg.surrogate
    overrides = {k: getattr(args, k) for k in ("lam", "salt", "difficulty_lo", "difficulty_hi")
                 if getattr(args, k) is not None}
    if overrides:
        params = SurrogateParams(**{**asdict(params), **overrides})
    extra = [load_backbone(p) for p in (args.extra_backbone or [])]
    if args.backbone or args.config:
        extra.append(_backbone(cfg))
    registry = shipped_registry(extra)
    # line-buffered so a killed server never leaves half a JSON line behind
    stdout = open(sys.stdout.fileno(), "w", encoding="utf-8", buffering=1, closefd=False)
    stdin = open(sys.stdin.fileno(), "r", encoding="utf-8", closefd=False)
    return serve(stdin, stdout, params, registry)


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--json-errors", action="store_true", default=argparse.SUPPRESS,
                        help="report errors as a JSON object on stderr")
    common.add_argument("--config", help="run configuration JSON")

    head = _Parser(add_help=False)
    head.add_argument("--backbone", help="backbone JSON file or shipped name (vgg9, vgg9_omniglot, resnet12)")
    head.add_argument("--input-shape", type=_shape, help="override input shape, C,H,W")
    head.add_argument("--classes", type=int, help="override classifier width")

    seeded = _Parser(add_help=False)
    seeded.add_argument("--seed", type=int, help="overrides NAS_SEED and the config seed")

    search = _Parser(add_help=False)
    search.add_argument("--table", help="latency table JSON (latency constraints)")
    search.add_argument("--array", help="array config JSON (cycle constraints)")
    search.add_argument("--device", help="target device name; a table from another device triggers a warning")
    search.add_argument("--oracle", help="'surrogate' or 'cmd:<argv>'")
    search.add_argument("--timeout", type=float, default=30.0, help="seconds per external oracle response")
    search.add_argument("--pool-size", type=int)
    search.add_argument("--iterations", type=int)
    search.add_argument("--workers", type=int)
    search.add_argument("--n-tasks", type=int)
    search.add_argument("--slice-size", type=int)

    parser = _Parser(prog="nasadapt", description="Hardware-aware architecture adaptation toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--json-errors", action="store_true", help="report errors as a JSON object on stderr")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    p = sub.add_parser("space-stats", parents=[common, head], help="search-space cardinality")
    p.add_argument("--json", action="store_true")
    p.add_argument("--layer-configs", action="store_true", help="also count distinct layer configs")
    p.set_defaults(func=cmd_space_stats)

    p = sub.add_parser("costs", parents=[common, head], help="params and MACs of one architecture")
    p.add_argument("--arch", help="genome text")
    p.add_argument("--preset", choices=("largest", "smallest"))
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_costs)

    p = sub.add_parser("profile", parents=[common, head, seeded], help="build a latency table")
    p.add_argument("--device", required=True, help="device profile JSON")
    p.add_argument("--out", required=True, help="latency table to write")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("latency", parents=[common, head], help="compose an architecture's latency from a table")
    p.add_argument("--arch", required=True)
    p.add_argument("--table", required=True)
    p.set_defaults(func=cmd_latency)

    p = sub.add_parser("simulate", parents=[common, head], help="systolic-array cycle report")
    p.add_argument("--arch", required=True)
    p.add_argument("--array", help="array config JSON (default: 12x14 at 200 MHz)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("schedule", parents=[common], help="progressive-shrinking probability curve")
    for name in ("p_i", "p_e", "alpha", "e_s", "e_m"):
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=float)
    p.add_argument("--epochs", type=int, help="last epoch to tabulate (default e_m)")
    p.add_argument("--plot", help="write the curve as CSV")
    p.add_argument("--svg", help="write an SVG line plot (plus sibling CSV)")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("adapt", parents=[common, head, seeded, search], help="constrained genetic search")
    p.add_argument("--constraint", help="metric:bound with metric in params|macs|latency|cycles")
    p.add_argument("--out", help="result JSON (default <output_dir>/result.json)")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("pareto", parents=[common, head, seeded, search], help="sweep constraint bounds")
    p.add_argument("--bounds", required=True, help="CSV file of bounds, or an inline comma-separated list")
    p.add_argument("--metric", help="params|macs|latency|cycles")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_pareto)

    p = sub.add_parser("oracle-serve", parents=[common, head], help="serve the surrogate on stdin/stdout")
    p.add_argument("--extra-backbone", action="append", help="additional backbone JSON to accept genomes for")
    p.add_argument("--lam", type=float)
    p.add_argument("--salt")
    p.add_argument("--difficulty-lo", type=float)
    p.add_argument("--difficulty-hi", type=float)
    p.set_defaults(func=cmd_oracle_serve)
    return parser


_DOMAIN = (InfeasibleConstraintError, MissingEntriesError, AdaptationAborted, OracleProtocolError,
           UnsupportedOpError, TraceError)
_USAGE = (UsageError, ConfigError, BackboneError, GenomeDecodeError, TableFormatError, ScheduleError,
          FileNotFoundError, ValueError)


def _classify(exc: BaseException) -> int | None:
    if isinstance(exc, _DOMAIN):
        return EXIT_DOMAIN
    if isinstance(exc, LatencyError) and not isinstance(exc, TableFormatError):
        return EXIT_DOMAIN
    if isinstance(exc, _USAGE):
        return EXIT_USAGE
    return None


def _report(exc: BaseException, code: int, as_json: bool) -> None:
    if as_json:
        obj = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
        if isinstance(exc, InfeasibleConstraintError):
            obj["tightest"] = exc.tightest
        if isinstance(exc, MissingEntriesError):
            obj["missing"] = exc.missing
        if isinstance(exc, (AdaptationAborted, OracleProtocolError)):
            obj["query"] = exc.query
        print(json.dumps(obj), file=sys.stderr)
    else:
        print(f"error: {exc}", file=sys.stderr)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    as_json = "--json-errors" in argv
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args._argv = argv
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        code = _classify(exc)
        if code is None:
            raise
        _report(exc, code, as_json)
        return code
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
