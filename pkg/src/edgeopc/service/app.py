"""FastAPI wrapper around the core package.

Run with ``uvicorn edgeopc.service.app:app`` or ``edgeopc serve``. The
rasterizer thread count comes from ``EDGEOPC_THREADS`` at startup.
"""
from __future__ import annotations

import base64
import binascii
from contextlib import asynccontextmanager

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__, io
from ..errors import ConfigError, EdgeOPCError
from ..geometry import orient_rings, segment_edges
from ..litho import make_synthetic_kernels
from ..loss import make_epe_plan
from ..metrics import evaluate
from ..mrc import MrcRuleSet, check_violations
from ..optimizer import OptimizerConfig, _frame, optimize
from ..raster import configure_threads, rasterize
from ..sraf import generate_sraf_seeds
from . import models


@asynccontextmanager
async def _lifespan(app: FastAPI):
    configure_threads()
    yield


app = FastAPI(title="edgeopc", version=__version__, lifespan=_lifespan)


@app.exception_handler(EdgeOPCError)
def _domain_error(request: Request, exc: EdgeOPCError) -> JSONResponse:
    return JSONResponse(status_code=422, content={"detail": str(exc), "error": type(exc).__name__})


def _b64(data: str, what: str) -> bytes:
    try:
        return base64.b64decode(data, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise ConfigError(f"{what} is not valid base64") from exc


def _kernels(src: models.KernelSource):
    if src.file_b64 is not None:
        return io.kernels_from_bytes(_b64(src.file_b64, "kernel file"), "uploaded kernel file")
    if src.synthetic is not None:
        return make_synthetic_kernels(**src.synthetic.model_dump())
    raise ConfigError("kernels: give either file_b64 or synthetic parameters")


def _layout(layout: models.Layout) -> dict:
    return io.parse_layout(layout.model_dump(mode="json", exclude_none=True))


def _config(d: dict, layout: dict, rules: dict | None = None) -> OptimizerConfig:
    d = dict(d)
    if rules is not None:
        d["rules"] = MrcRuleSet.from_dict(rules)
    d.setdefault("width", layout["width"])
    d.setdefault("height", layout["height"])
    return OptimizerConfig.from_dict(d)


def _split(layout: dict):
    main = [p for p, t in zip(layout["polygons"], layout["tags"]) if t == "main"]
    assists = [p for p, t in zip(layout["polygons"], layout["tags"]) if t == "sraf"]
    return main, assists


def _target_mask(main, config: OptimizerConfig):
    polys = orient_rings(main)
    W, H = _frame(polys, config)
    segs = segment_edges(polys, config.seg_length, config.effective_min_seg_length)
    return segs, rasterize(segs, W, H), W, H


@app.get("/health", response_model=models.Health)
def health() -> models.Health:
    return models.Health(status="ok", version=__version__, threads=configure_threads())


@app.post("/optimize", response_model=models.OptimizeResponse)
def optimize_endpoint(req: models.OptimizeRequest) -> models.OptimizeResponse:
    layout = _layout(req.layout)
    config = _config(req.config, layout, req.rules)
    main, assists = _split(layout)
    result = optimize(main, config, _kernels(req.kernels), srafs=assists or None)
    H, W = result.mask.shape
    found = check_violations(result.segments, config.rules) if config.mrc_enabled else []
    return models.OptimizeResponse(
        geometry=models.Layout(**io.geometry_to_dict(result.segments, W, H)),
        mask_pgm_b64=base64.b64encode(io.pgm_bytes(result.mask)).decode("ascii"),
        metrics=models.Metrics(**result.metrics.to_dict()),
        logs=[models.IterationRecord(**entry.to_dict()) for entry in result.logs],
        violations=len(found),
    )


@app.post("/check", response_model=models.CheckResponse)
def check_endpoint(req: models.CheckRequest) -> models.CheckResponse:
    layout = _layout(req.layout)
    rules = MrcRuleSet.from_dict(req.rules) if req.rules is not None else MrcRuleSet()
    polys = orient_rings(layout["polygons"])
    # one segment per edge is enough: the checker reads the outline, not the cut
    segs = segment_edges(polys, 1e9, tags=layout["tags"])
    found = check_violations(segs, rules)
    return models.CheckResponse(violations=[models.ViolationRecord(**v.to_dict()) for v in found])


@app.post("/metrics", response_model=models.Metrics)
def metrics_endpoint(req: models.MetricsRequest) -> models.Metrics:
    layout = _layout(req.target)
    config = _config(req.config, layout)
    main, _ = _split(layout)
    mask = io.parse_mask(_b64(req.mask_b64, "mask"), req.mask_width or config.width,
                         req.mask_height or config.height, "uploaded mask")
    if config.width is None and config.height is None:
        config = _config(dict(req.config, width=mask.shape[1], height=mask.shape[0]), layout)
    segs, target, W, H = _target_mask(main, config)
    if mask.shape != (H, W):
        raise ConfigError(f"mask is {mask.shape[1]}x{mask.shape[0]} but the target frame is {W}x{H}")
    plan = make_epe_plan(segs, config.th_epe, config.gamma, (H, W))
    report = evaluate(mask, target, _kernels(req.kernels), plan, config.corners, config.threshold)
    return models.Metrics(**report.to_dict())


@app.post("/seeds", response_model=models.SeedsResponse)
def seeds_endpoint(req: models.SeedsRequest) -> models.SeedsResponse:
    layout = _layout(req.layout)
    config = _config(req.config, layout)
    main, _ = _split(layout)
    _, target, _, _ = _target_mask(main, config)
    seeds = generate_sraf_seeds(target, _kernels(req.kernels), config)
    return models.SeedsResponse(seeds=[models.Seed(**s.to_dict()) for s in seeds])


@app.post("/kernels", response_model=models.KernelsResponse)
def kernels_endpoint(req: models.SyntheticKernels) -> models.KernelsResponse:
    ks = make_synthetic_kernels(**req.model_dump())
    data = base64.b64encode(io.kernels_to_bytes(ks)).decode("ascii")
    return models.KernelsResponse(file_b64=data, metadata=ks.metadata)
