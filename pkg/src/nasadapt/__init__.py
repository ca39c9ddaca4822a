"""Hardware-aware architecture adaptation: search spaces, cost models, layer-wise
latency tables, a systolic-array cycle model and constraint-filtered genetic search."""

__version__ = "0.1.0"

from .search_space import Architecture, Backbone, decode, encode, load_backbone, space_size  # noqa: F401
