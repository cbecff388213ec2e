"""Differentiable edge-based optical proximity correction."""
import os

# TBB in this image is too old for numba; OpenMP is thread-safe for concurrent callers
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

from .errors import ConfigError, ContractError, DivergenceError, EdgeOPCError, GeometryError  # noqa: E402
from .geometry import Point, Polygon, SegmentSet, merge_corners, segment_edges, ste_round  # noqa: E402
from .litho import KernelSet, ProcessCorner, make_synthetic_kernels, simulate  # noqa: E402
from .raster import rasterize  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DivergenceError",
    "EdgeOPCError",
    "GeometryError",
    "KernelSet",
    "Point",
    "Polygon",
    "ProcessCorner",
    "SegmentSet",
    "make_synthetic_kernels",
    "merge_corners",
    "rasterize",
    "segment_edges",
    "simulate",
    "ste_round",
]
