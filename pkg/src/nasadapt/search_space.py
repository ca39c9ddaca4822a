"""Backbone definitions and the genome encoding of sub-networks.

A :class:`Backbone` describes a super-network: an ordered list of layer sites,
each with its own kernel / channel-expansion / activation choice sets, plus an
adaptive-depth range.  An :class:`Architecture` picks one value per choice
dimension per site and an active depth; sites past the active depth are inert.

Expansion factors are held as :class:`fractions.Fraction` so channel counts and
genome text are exact.
"""

from __future__ import annotations

import json
import math
import random
import re
from dataclasses import dataclass, field
from functools import cached_property
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Iterator, Mapping, Sequence

ACTIVATIONS = ("relu", "elu", "selu", "sigmoid", "relu6", "leakyrelu")
CANONICAL_ACTIVATION = "relu"

VGG_EXPANSIONS = tuple(Fraction(x) for x in ("0.25", "0.5", "0.75", "1", "1.5", "2", "2.25"))
RESNET_EXPANSIONS = tuple(Fraction(x) for x in ("0.25", "0.5", "1", "1.5", "1.75", "2"))
KERNELS = (1, 3, 5)

SHIPPED_BACKBONES = ("vgg9", "vgg9_omniglot", "resnet12")


class BackboneError(ValueError):
    pass


class GenomeDecodeError(ValueError):
    pass


class ImmutableArchitectureError(ValueError):
    pass


def to_fraction(value) -> Fraction:
    """Exact rational from an int, a decimal string, or a float (via its repr)."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, bool):
        raise TypeError("bool is not a rational")
    if isinstance(value, float):
        value = repr(value)
    return Fraction(value)


def format_decimal(value: Fraction) -> str:
    """Render a rational as an exact, minimal decimal string (``2.25``, ``1``)."""
    value = to_fraction(value)
    if value.denominator == 1:
        return str(value.numerator)
    den = value.denominator
    twos = fives = 0
    while den % 2 == 0:
        den //= 2
        twos += 1
    while den % 5 == 0:
        den //= 5
        fives += 1
    if den != 1:
        raise ValueError(f"{value} has no finite decimal expansion")
    digits = max(twos, fives)
    scaled = value * 10**digits
    assert scaled.denominator == 1
    sign = "-" if scaled < 0 else ""
    text = str(abs(scaled.numerator)).rjust(digits + 1, "0")
    out = f"{sign}{text[:-digits]}.{text[-digits:]}".rstrip("0")
    return out


def round_half_up(value: Fraction) -> int:
    return math.floor(value + Fraction(1, 2))


@dataclass(frozen=True)
class Conventions:
    """Cost-accounting conventions for a backbone.

    The defaults reproduce the reference VGG9 sizes: stride-1 "same" convs
    with a bias and a 2-parameter norm per output channel, downsampling by a
    ceil-mode max-pool after the activation.
    """

    conv_bias: bool = True
    norm_params_per_channel: int = 2
    padding: str = "same"  # same | valid
    downsample: str = "maxpool"  # maxpool | strided

    def __post_init__(self):
        if self.padding not in ("same", "valid"):
            raise BackboneError(f"unknown padding convention {self.padding!r}")
        if self.downsample not in ("maxpool", "strided"):
            raise BackboneError(f"unknown downsample convention {self.downsample!r}")
        if self.norm_params_per_channel < 0:
            raise BackboneError("norm_params_per_channel must be >= 0")


@dataclass(frozen=True)
class LayerSite:
    position: int
    base_channels: int
    stride: int
    kernel_choices: tuple[int, ...] = KERNELS
    expansion_choices: tuple[Fraction, ...] = VGG_EXPANSIONS
    activation_choices: tuple[str, ...] = ACTIVATIONS
    name: str = ""

    @property
    def n_options(self) -> int:
        return len(self.kernel_choices) * len(self.expansion_choices) * len(self.activation_choices)

    def problems(self) -> list[str]:
        out = []
        label = self.name or f"site {self.position}"
        for dim in ("kernel_choices", "expansion_choices", "activation_choices"):
            values = getattr(self, dim)
            if not values:
                out.append(f"{label}: {dim} is empty")
            elif len(set(values)) != len(values):
                out.append(f"{label}: {dim} has duplicates")
        if self.base_channels < 1:
            out.append(f"{label}: base_channels must be >= 1")
        if self.stride < 1:
            out.append(f"{label}: stride must be >= 1")
        if any(k < 1 for k in self.kernel_choices):
            out.append(f"{label}: kernel sizes must be >= 1")
        if any(e <= 0 for e in self.expansion_choices):
            out.append(f"{label}: expansions must be > 0")
        return out


@dataclass(frozen=True)
class Backbone:
    """Static description of a NAS super-network.

    ``min_depth``/``max_depth`` count depth units; a unit is
    ``layers_per_unit`` consecutive sites (1 for plain chains, 3 for the
    residual blocks of ResNet12).
    """

    name: str
    layers: tuple[LayerSite, ...]
    input_shape: tuple[int, int, int]
    head_pool: int
    classes: int
    min_depth: int
    max_depth: int
    layers_per_unit: int = 1
    residual: bool = False
    global_expansion_choices: tuple[Fraction, ...] | None = None
    conventions: Conventions = field(default_factory=Conventions)
    description: str = ""

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise BackboneError("; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if not re.fullmatch(r"[A-Za-z0-9_.\-]+", self.name or ""):
            out.append(f"invalid backbone name {self.name!r}")
        if not self.layers:
            out.append("backbone has no layer sites")
        for site in self.layers:
            out.extend(site.problems())
        if self.layers_per_unit < 1:
            out.append("layers_per_unit must be >= 1")
        elif len(self.layers) % self.layers_per_unit:
            out.append("layer count is not a multiple of layers_per_unit")
        if not 1 <= self.min_depth <= self.max_depth:
            out.append(f"depth range [{self.min_depth}, {self.max_depth}] is invalid")
        if self.max_depth * self.layers_per_unit > len(self.layers):
            out.append("max_depth exceeds the number of layer sites")
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            out.append(f"input_shape {self.input_shape} must be three positive ints")
        if self.head_pool < 1 or self.classes < 1:
            out.append("head pool and classes must be >= 1")
        if self.residual and self.conventions.padding != "same":
            out.append("residual backbones need 'same' padding")
        ge = self.global_expansion_choices
        if ge is not None:
            if not ge or len(set(ge)) != len(ge) or any(g <= 0 for g in ge):
                out.append("global_expansion_choices must be non-empty, unique, positive")
        return out

    @property
    def depth_choices(self) -> range:
        return range(self.min_depth, self.max_depth + 1)

    def active_layers(self, depth: int) -> int:
        return depth * self.layers_per_unit

    def with_head(self, *, input_shape=None, head_pool=None, classes=None) -> "Backbone":
        from dataclasses import replace

        return replace(
            self,
            input_shape=tuple(input_shape) if input_shape is not None else self.input_shape,
            head_pool=head_pool if head_pool is not None else self.head_pool,
            classes=classes if classes is not None else self.classes,
        )


def _arch_key(arch: "Architecture"):
    return (arch.backbone.name, arch.active_depth, arch.global_expansion, arch.per_layer)


@dataclass(frozen=True, eq=False)
class Architecture:
    backbone: Backbone = field(repr=False)
    per_layer: tuple[tuple[int, Fraction, str], ...]
    active_depth: int
    global_expansion: Fraction | None = None

    def __eq__(self, other):
        if not isinstance(other, Architecture):
            return NotImplemented
        return _arch_key(self) == _arch_key(other)

    def __hash__(self):
        return self._hash

    @cached_property
    def _hash(self) -> int:
        return hash(_arch_key(self))

    @property
    def n_active(self) -> int:
        return self.backbone.active_layers(self.active_depth)

    def channels(self, index: int) -> int:
        site = self.backbone.layers[index]
        _, expansion, _ = self.per_layer[index]
        scale = expansion * (self.global_expansion if self.global_expansion is not None else 1)
        return max(1, round_half_up(site.base_channels * scale))

    @cached_property
    def _text(self) -> str:
        return encode(self)

    def encode(self) -> str:
        return self._text

    def __str__(self):
        return self._text


# --------------------------------------------------------------------------
# loading


def _parse_site(index: int, raw: Mapping, defaults: Mapping) -> LayerSite:
    known = {"name", "base_channels", "stride", "kernel_choices", "expansion_choices", "activation_choices"}
    unknown = set(raw) - known
    if unknown:
        raise BackboneError(f"layer {index}: unknown keys {sorted(unknown)}")
    merged = {**defaults, **raw}
    try:
        return LayerSite(
            position=index,
            name=str(merged.get("name", f"layer{index}")),
            base_channels=int(merged["base_channels"]),
            stride=int(merged.get("stride", 1)),
            kernel_choices=tuple(int(k) for k in merged.get("kernel_choices", KERNELS)),
            expansion_choices=tuple(to_fraction(e) for e in merged.get("expansion_choices", VGG_EXPANSIONS)),
            activation_choices=tuple(str(a) for a in merged.get("activation_choices", ACTIVATIONS)),
        )
    except KeyError as exc:
        raise BackboneError(f"layer {index}: missing {exc.args[0]!r}") from None


_BACKBONE_KEYS = {
    "name", "description", "input_shape", "head", "min_depth", "max_depth",
    "layers_per_unit", "residual", "global_expansion_choices", "conventions",
    "defaults", "layers", "convention_notes",
}


def backbone_from_dict(data: Mapping) -> Backbone:
    unknown = set(data) - _BACKBONE_KEYS
    if unknown:
        raise BackboneError(f"unknown backbone keys {sorted(unknown)}")
    defaults = dict(data.get("defaults", {}))
    layers = tuple(_parse_site(i, raw, defaults) for i, raw in enumerate(data.get("layers", [])))
    head = data.get("head", {})
    ge = data.get("global_expansion_choices")
    conv_raw = dict(data.get("conventions", {}))
    try:
        conventions = Conventions(**conv_raw)
    except TypeError as exc:
        raise BackboneError(f"bad conventions block: {exc}") from None
    return Backbone(
        name=str(data.get("name", "")),
        description=str(data.get("description", "")),
        layers=layers,
        input_shape=tuple(int(x) for x in data.get("input_shape", (3, 84, 84))),
        head_pool=int(head.get("pool", 1)),
        classes=int(head.get("classes", 5)),
        min_depth=int(data.get("min_depth", 1)),
        max_depth=int(data.get("max_depth", len(layers))),
        layers_per_unit=int(data.get("layers_per_unit", 1)),
        residual=bool(data.get("residual", False)),
        global_expansion_choices=tuple(to_fraction(g) for g in ge) if ge is not None else None,
        conventions=conventions,
    )


def backbone_to_dict(backbone: Backbone) -> dict:
    return {
        "name": backbone.name,
        "description": backbone.description,
        "input_shape": list(backbone.input_shape),
        "head": {"pool": backbone.head_pool, "classes": backbone.classes},
        "min_depth": backbone.min_depth,
        "max_depth": backbone.max_depth,
        "layers_per_unit": backbone.layers_per_unit,
        "residual": backbone.residual,
        "global_expansion_choices": (
            [format_decimal(g) for g in backbone.global_expansion_choices]
            if backbone.global_expansion_choices is not None
            else None
        ),
        "conventions": {
            "conv_bias": backbone.conventions.conv_bias,
            "norm_params_per_channel": backbone.conventions.norm_params_per_channel,
            "padding": backbone.conventions.padding,
            "downsample": backbone.conventions.downsample,
        },
        "layers": [
            {
                "name": s.name,
                "base_channels": s.base_channels,
                "stride": s.stride,
                "kernel_choices": list(s.kernel_choices),
                "expansion_choices": [format_decimal(e) for e in s.expansion_choices],
                "activation_choices": list(s.activation_choices),
            }
            for s in backbone.layers
        ],
    }


def load_backbone(source: str | Path) -> Backbone:
    """Load a backbone from a JSON path, or by shipped name (``vgg9``)."""
    path = Path(source)
    if path.suffix != ".json" or not path.exists():
        name = path.stem if path.suffix == ".json" else str(source)
        if name in SHIPPED_BACKBONES and not path.exists():
            text = resources.files("nasadapt.backbones").joinpath(f"{name}.json").read_text()
            return backbone_from_dict(json.loads(text))
        if not path.exists():
            raise FileNotFoundError(f"no backbone file or shipped backbone named {source!r}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise BackboneError(f"{path}: {exc}") from None
    return backbone_from_dict(data)


# --------------------------------------------------------------------------
# cardinality


@dataclass(frozen=True)
class SpaceCardinality:
    """``exact`` counts genomes (inert trailing choices included), which is how
    ``126**4 * 4`` is counted.  ``distinct_networks`` counts deployable
    networks, where choices past the active depth do not matter."""

    exact: int
    distinct_networks: int

    @property
    def as_float(self) -> float:
        return float(self.exact)


def space_size(backbone: Backbone) -> SpaceCardinality:
    problems = backbone.problems()
    if problems:
        raise BackboneError("; ".join(problems))
    ge = len(backbone.global_expansion_choices) if backbone.global_expansion_choices else 1
    per_site = [s.n_options for s in backbone.layers]
    genomes = math.prod(per_site) * len(backbone.depth_choices) * ge
    distinct = sum(math.prod(per_site[: backbone.active_layers(d)]) for d in backbone.depth_choices) * ge
    return SpaceCardinality(exact=genomes, distinct_networks=distinct)


def enumerate_architectures(backbone: Backbone) -> Iterator[Architecture]:
    """Every genome of the space, in a fixed order.  Only sensible for toy spaces."""
    import itertools

    site_options = [
        list(itertools.product(s.kernel_choices, s.expansion_choices, s.activation_choices))
        for s in backbone.layers
    ]
    ges = backbone.global_expansion_choices or (None,)
    for depth in backbone.depth_choices:
        for g in ges:
            for combo in itertools.product(*site_options):
                yield Architecture(backbone, tuple(combo), depth, g)


# --------------------------------------------------------------------------
# construction, sampling, mutation


def _rng(seed_or_rng) -> random.Random:
    if isinstance(seed_or_rng, random.Random):
        return seed_or_rng
    return random.Random(seed_or_rng)


def sample_uniform(backbone: Backbone, rng_seed) -> Architecture:
    """Uniform over genomes; deterministic for an int seed."""
    rng = _rng(rng_seed)
    per_layer = tuple(
        (rng.choice(s.kernel_choices), rng.choice(s.expansion_choices), rng.choice(s.activation_choices))
        for s in backbone.layers
    )
    depth = rng.choice(backbone.depth_choices)
    ge = rng.choice(backbone.global_expansion_choices) if backbone.global_expansion_choices else None
    return Architecture(backbone, per_layer, depth, ge)


def largest(backbone: Backbone) -> Architecture:
    def act(site):
        return CANONICAL_ACTIVATION if CANONICAL_ACTIVATION in site.activation_choices else site.activation_choices[0]

    per_layer = tuple((max(s.kernel_choices), max(s.expansion_choices), act(s)) for s in backbone.layers)
    ge = max(backbone.global_expansion_choices) if backbone.global_expansion_choices else None
    return Architecture(backbone, per_layer, backbone.max_depth, ge)


def smallest(backbone: Backbone) -> Architecture:
    def act(site):
        return CANONICAL_ACTIVATION if CANONICAL_ACTIVATION in site.activation_choices else site.activation_choices[0]

    per_layer = tuple((min(s.kernel_choices), min(s.expansion_choices), act(s)) for s in backbone.layers)
    ge = min(backbone.global_expansion_choices) if backbone.global_expansion_choices else None
    return Architecture(backbone, per_layer, backbone.min_depth, ge)


_DIMS = ("kernel", "expansion", "activation")


def genome_positions(backbone: Backbone) -> list[tuple]:
    """All genome coordinates: ``(layer, dim)`` triples, then depth, then GE."""
    positions: list[tuple] = [(i, d) for i in range(len(backbone.layers)) for d in range(3)]
    positions.append(("depth",))
    if backbone.global_expansion_choices:
        positions.append(("ge",))
    return positions


def _choices_at(backbone: Backbone, pos: tuple) -> Sequence:
    if pos[0] == "depth":
        return backbone.depth_choices
    if pos[0] == "ge":
        return backbone.global_expansion_choices or ()
    site = backbone.layers[pos[0]]
    return (site.kernel_choices, site.expansion_choices, site.activation_choices)[pos[1]]


def genome_value(arch: Architecture, pos: tuple):
    if pos[0] == "depth":
        return arch.active_depth
    if pos[0] == "ge":
        return arch.global_expansion
    return arch.per_layer[pos[0]][pos[1]]


def hamming(a: Architecture, b: Architecture) -> int:
    return sum(genome_value(a, p) != genome_value(b, p) for p in genome_positions(a.backbone))


def mutate(arch: Architecture, rng_seed, n_moves: int = 2) -> Architecture:
    """Change exactly ``n_moves`` distinct genome coordinates to new values."""
    rng = _rng(rng_seed)
    backbone = arch.backbone
    mutable = [p for p in genome_positions(backbone) if len(_choices_at(backbone, p)) >= 2]
    if not mutable:
        raise ImmutableArchitectureError("immutable architecture: no position has two or more choices")
    if n_moves > len(mutable):
        raise ValueError(f"n_moves={n_moves} exceeds the {len(mutable)} mutable positions")

    per_layer = [list(t) for t in arch.per_layer]
    depth, ge = arch.active_depth, arch.global_expansion
    for pos in rng.sample(mutable, n_moves):
        current = genome_value(arch, pos)
        new = rng.choice([c for c in _choices_at(backbone, pos) if c != current])
        if pos[0] == "depth":
            depth = new
        elif pos[0] == "ge":
            ge = new
        else:
            per_layer[pos[0]][pos[1]] = new
    return Architecture(backbone, tuple(tuple(t) for t in per_layer), depth, ge)


def validate(arch: Architecture) -> list[str]:
    """Every invariant violation of ``arch``; an empty list means valid."""
    backbone = arch.backbone
    out = []
    if len(arch.per_layer) != len(backbone.layers):
        out.append(f"per_layer has {len(arch.per_layer)} entries, backbone has {len(backbone.layers)} sites")
    if not backbone.min_depth <= arch.active_depth <= backbone.max_depth:
        out.append(f"depth out of range: {arch.active_depth} not in [{backbone.min_depth}, {backbone.max_depth}]")
    ge = arch.global_expansion
    if backbone.global_expansion_choices is None:
        if ge is not None:
            out.append("global_expansion set but backbone has no global expansion gene")
    elif ge not in backbone.global_expansion_choices:
        out.append(f"global_expansion {ge}: choice not in set")
    for i, (site, choice) in enumerate(zip(backbone.layers, arch.per_layer)):
        if len(choice) != 3:
            out.append(f"layer {i}: expected (kernel, expansion, activation), got {choice!r}")
            continue
        k, e, a = choice
        if k not in site.kernel_choices:
            out.append(f"layer {i}: kernel {k} choice not in set")
        if e not in site.expansion_choices:
            out.append(f"layer {i}: expansion {e} choice not in set")
        if a not in site.activation_choices:
            out.append(f"layer {i}: activation {a!r} choice not in set")
    return out


# --------------------------------------------------------------------------
# canonical text form:  <name>:d<depth>[:g<ge>]/<k>,<e>,<act>;...

_HEADER = re.compile(r"([A-Za-z0-9_.\-]+):d(\d+)(?::g([0-9.]+))?/")
_TRIPLE = re.compile(r"(\d+),([0-9.]+),([A-Za-z0-9_]+)")


def encode(arch: Architecture) -> str:
    head = f"{arch.backbone.name}:d{arch.active_depth}"
    if arch.global_expansion is not None:
        head += f":g{format_decimal(arch.global_expansion)}"
    body = ";".join(f"{k},{format_decimal(e)},{a}" for k, e, a in arch.per_layer)
    return f"{head}/{body}"


def network_key(arch: Architecture) -> str:
    """Genome text restricted to the active sites.  Two genomes that differ only
    in inert trailing choices deploy the same network and share a key."""
    head, _, body = encode(arch).partition("/")
    return head + "/" + ";".join(body.split(";")[: arch.n_active])


def decode(text: str, backbones: Backbone | Mapping[str, Backbone]) -> Architecture:
    """Parse a genome string; raises :class:`GenomeDecodeError` with a character offset."""
    if not text:
        raise GenomeDecodeError("empty genome string at position 0")
    m = _HEADER.match(text)
    if not m:
        raise GenomeDecodeError(f"malformed genome header at position 0: {text[:32]!r}")
    name = m.group(1)
    if isinstance(backbones, Backbone):
        registry = {backbones.name: backbones}
    else:
        registry = dict(backbones)
    if name not in registry:
        raise GenomeDecodeError(f"unknown backbone {name!r} at position 0")
    backbone = registry[name]
    depth = int(m.group(2))
    ge = _parse_decimal(m.group(3), m.start(3)) if m.group(3) is not None else None

    per_layer = []
    pos = m.end()
    for i in range(len(backbone.layers)):
        t = _TRIPLE.match(text, pos)
        if not t:
            raise GenomeDecodeError(f"malformed layer triple {i} at position {pos}: {text[pos:pos + 16]!r}")
        per_layer.append((int(t.group(1)), _parse_decimal(t.group(2), t.start(2)), t.group(3)))
        pos = t.end()
        if i < len(backbone.layers) - 1:
            if pos >= len(text) or text[pos] != ";":
                raise GenomeDecodeError(f"expected ';' at position {pos}")
            pos += 1
    if pos != len(text):
        raise GenomeDecodeError(f"trailing characters at position {pos}: {text[pos:pos + 16]!r}")
    arch = Architecture(backbone, tuple(per_layer), depth, ge)
    problems = validate(arch)
    if problems:
        raise GenomeDecodeError("decoded genome is invalid: " + "; ".join(problems))
    return arch


def _parse_decimal(text: str, pos: int) -> Fraction:
    if not re.fullmatch(r"\d+(\.\d+)?", text) or (("." in text) and text.endswith("0")):
        raise GenomeDecodeError(f"non-canonical decimal {text!r} at position {pos}")
    return Fraction(text)
