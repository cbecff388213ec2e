"""Request and response bodies of the HTTP service.

Binary payloads (kernel files, masks) travel base64-encoded in their
on-disk formats, so the CLI can pass files through untouched.
"""
from __future__ import annotations

from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field


class Layout(BaseModel):
    model_config = ConfigDict(extra="forbid")

    # int first so integral coordinates round-trip as ints
    polygons: list[list[tuple[int | float, int | float]]]
    tags: list[Literal["main", "sraf"]] | None = None
    width: int | None = Field(default=None, ge=1)
    height: int | None = Field(default=None, ge=1)
    name: str | None = None


class SyntheticKernels(BaseModel):
    model_config = ConfigDict(extra="forbid")

    size: int = Field(default=151, ge=3)
    n_kernels: int = Field(default=3, ge=1)
    cutoff: float = Field(default=0.012, gt=0)
    coherence: float = Field(default=0.6, ge=0)
    defocus: float = 0.0
    aberration: float = 0.0
    seed: int = 0


class KernelSource(BaseModel):
    """Either a kernel file (base64 of its bytes) or synthetic parameters."""

    model_config = ConfigDict(extra="forbid")

    file_b64: str | None = None
    synthetic: SyntheticKernels | None = None


class OptimizeRequest(BaseModel):
    layout: Layout
    kernels: KernelSource
    config: dict[str, Any] = Field(default_factory=dict)
    rules: dict[str, float] | None = None


class IterationRecord(BaseModel):
    iteration: int
    l2: float
    pvb: float
    epe: float
    total: float
    l2_metric: float
    epe_count: int
    max_displacement: float
    gate_activations: int
    n_pairs: int
    n_srafs: int


class Metrics(BaseModel):
    l2: float
    pvb: float
    epe_count: int
    shots: int
    tat_seconds: float = 0.0


class OptimizeResponse(BaseModel):
    geometry: Layout
    mask_pgm_b64: str
    metrics: Metrics
    logs: list[IterationRecord]
    violations: int


class CheckRequest(BaseModel):
    layout: Layout
    rules: dict[str, float] | None = None


class ViolationRecord(BaseModel):
    kind: str
    rule: str
    segments: list[list[list[float]]]
    measured: float
    required: float


class CheckResponse(BaseModel):
    violations: list[ViolationRecord]


class MetricsRequest(BaseModel):
    mask_b64: str
    target: Layout
    kernels: KernelSource
    mask_width: int | None = None
    mask_height: int | None = None
    config: dict[str, Any] = Field(default_factory=dict)


class SeedsRequest(BaseModel):
    layout: Layout
    kernels: KernelSource
    config: dict[str, Any] = Field(default_factory=dict)


class Seed(BaseModel):
    center: tuple[float, float]
    size: tuple[int, int]
    score: float
    rect: tuple[int, int, int, int]
    grid_index: tuple[float, float]


class SeedsResponse(BaseModel):
    seeds: list[Seed]


class KernelsResponse(BaseModel):
    file_b64: str
    metadata: dict[str, Any]


class Health(BaseModel):
    status: str
    version: str
    threads: int
