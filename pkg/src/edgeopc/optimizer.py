"""The edge optimization loop.

Every iteration runs round -> merge -> rasterize -> simulate -> loss, then
the backward chain: image gradient at segment midpoints times velocity,
rule gating, and a clipped gradient-descent step on the continuous
segment coordinates.
"""
from __future__ import annotations

import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError, DivergenceError, EdgeOPCError
from .geometry import Polygon, SegmentSet, concat_segsets, merge_corners, orient_rings, segment_edges, ste_round
from .litho import DEFAULT_CORNERS, DEFAULT_THRESHOLD, KernelSet, ProcessCorner, forward, resist_hard
from .loss import LossWeights, make_epe_plan, total_loss_and_grad
from .metrics import MetricsReport, evaluate, metric_epe, metric_l2
from .mrc import MrcRuleSet, extract_check_pairs, gate_gradients
from .raster import apply_step, compute_edge_gradients, edge_scalar, rasterize

log = logging.getLogger(__name__)

_STAGES = ("round", "merge", "rasterize", "forward", "loss")


@dataclass
class OptimizerConfig:
    iterations: int = 100
    learning_rate: float = 1.0
    clip: float | None = 2.0
    seg_length: float = 80.0
    # pieces shorter than this are folded into a neighbour; None means rules.min_width
    min_seg_length: float | None = None
    alpha: float = 50.0
    beta: float = 50.0
    gamma: float = 50.0
    weights: LossWeights = field(default_factory=LossWeights)
    th_epe: int = 15
    threshold: float = DEFAULT_THRESHOLD
    corners: tuple[ProcessCorner, ...] = DEFAULT_CORNERS
    mrc_enabled: bool = True
    rules: MrcRuleSet = field(default_factory=MrcRuleSet)
    sraf_enabled: bool = False
    max_srafs: int = 24
    sraf_size: int = 20
    sraf_factor: int = 4
    sraf_min_width: float = 10.0
    seed: int = 0
    gradient_mode: str = "midpoint"
    momentum: float = 0.0
    early_stop: bool = False
    early_stop_patience: int = 10
    early_stop_tol: float = 1e-3
    width: int | None = None
    height: int | None = None

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        elif not isinstance(self.weights, LossWeights):
            self.weights = LossWeights(*self.weights)
        if isinstance(self.rules, dict):
            self.rules = MrcRuleSet.from_dict(self.rules)
        self.corners = tuple(c if isinstance(c, ProcessCorner) else ProcessCorner(**c) for c in self.corners)
        if self.iterations < 1:
            raise ConfigError("iterations must be at least 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.clip is not None and not self.clip > 0:
            raise ConfigError("clip must be positive or None")
        if not self.seg_length > 0:
            raise ConfigError("seg_length must be positive")
        if self.gradient_mode not in ("midpoint", "mean"):
            raise ConfigError(f"unknown gradient_mode {self.gradient_mode!r}")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.rules.beta != self.beta:
            self.rules = replace(self.rules, beta=self.beta)

    @property
    def effective_min_seg_length(self) -> float:
        return self.rules.min_width if self.min_seg_length is None else self.min_seg_length

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["weights"] = asdict(self.weights)
        d["rules"] = self.rules.to_dict()
        d["corners"] = [asdict(c) for c in self.corners]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown optimizer settings: {sorted(unknown)}")
        return cls(**d)


@dataclass
class IterationLog:
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
    n_srafs: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimizeResult:
    segments: SegmentSet
    mask: np.ndarray
    metrics: MetricsReport
    logs: list[IterationLog]
    target: np.ndarray
    target_segments: SegmentSet

    def __iter__(self):
        # (final SegmentSet, final Mask, MetricsReport, list of IterationLog)
        return iter((self.segments, self.mask, self.metrics, self.logs))


def _frame(polys: Sequence[Polygon], config: OptimizerConfig) -> tuple[int, int]:
    if config.width and config.height:
        return int(config.width), int(config.height)
    xs = [v.x for p in polys for v in p.vertices]
    ys = [v.y for p in polys for v in p.vertices]
    if not xs:
        raise ConfigError("empty layout needs explicit width and height")
    return int(config.width or int(max(xs)) + 1), int(config.height or int(max(ys)) + 1)


def forward_geometry(S: SegmentSet, W: int, H: int, stages: list | None = None) -> tuple[SegmentSet, np.ndarray]:
    """Round, merge and rasterize; returns the merged geometry and its mask."""
    rounded = ste_round(S)
    if stages is not None:
        stages.append("round")
    merged = merge_corners(rounded)
    if stages is not None:
        stages.append("merge")
    mask = rasterize(merged, W, H)
    if stages is not None:
        stages.append("rasterize")
    return merged, mask


def optimize(target: Sequence[Polygon], config: OptimizerConfig | None = None, kernels: KernelSet | None = None,
             srafs: Sequence[Polygon] | None = None) -> OptimizeResult:
    """Optimize mask edge segments so the printed image matches ``target``.

    ``srafs`` are extra assist rectangles optimized alongside the main
    pattern; with ``config.sraf_enabled`` and no explicit list they are
    seeded from the low-resolution gradient. Unpacks as
    ``(segments, mask, metrics, logs)``.
    """
    config = config or OptimizerConfig()
    if kernels is None:
        raise ConfigError("a KernelSet is required")
    t0 = time.perf_counter()
    polys = orient_rings(list(target))
    W, H = _frame(polys, config)
    min_len = config.effective_min_seg_length
    target_segs = segment_edges(polys, config.seg_length, min_len)
    target_mask = rasterize(target_segs, W, H)
    plan = make_epe_plan(target_segs, config.th_epe, config.gamma, (H, W))

    if srafs is None and config.sraf_enabled:
        from .sraf import generate_sraf_seeds, seeds_to_polygons

        seeds = generate_sraf_seeds(target_mask, kernels, config)
        srafs = seeds_to_polygons(seeds, config)
    S = target_segs
    if srafs:
        sraf_segs = segment_edges(orient_rings(list(srafs)), config.seg_length, min(min_len, config.sraf_size),
                                  tags=["sraf"] * len(srafs))
        S = concat_segsets(target_segs, sraf_segs)

    logs: list[IterationLog] = []
    best_l2, stall = np.inf, 0
    velocity_buf = np.zeros(len(S))
    for it in range(config.iterations):
        stages: list[str] = []
        merged, mask = forward_geometry(S, W, H, stages)
        fwd = forward(mask, kernels, config.corners, config.alpha, config.threshold)
        stages.append("forward")
        try:
            bundle = total_loss_and_grad(fwd, target_mask, mask, plan, config.weights)
        except ContractError as exc:
            raise DivergenceError(f"iteration {it}: {exc}", logs) from exc
        stages.append("loss")
        assert tuple(stages) == _STAGES, stages
        if not np.isfinite(bundle.total):
            raise DivergenceError(f"iteration {it}: non-finite loss", logs)

        z_hard = resist_hard(fwd.nominal.corner.dose_scale * fwd.nominal.intensity, config.threshold)
        if srafs:
            from .sraf import prune_srafs

            keep = prune_srafs(merged, z_hard, config.sraf_min_width)
            if len(keep) < len(S.rings):
                # drop printing or collapsed assist features and redo this iteration's forward pass
                kept_old = np.concatenate([S.rings[k] for k in keep])
                velocity_buf = velocity_buf[kept_old]
                S = S.subset_rings(keep)
                merged, mask = forward_geometry(S, W, H)
                fwd = forward(mask, kernels, config.corners, config.alpha, config.threshold)
                bundle = total_loss_and_grad(fwd, target_mask, mask, plan, config.weights)
                z_hard = resist_hard(fwd.nominal.corner.dose_scale * fwd.nominal.intensity, config.threshold)
        l2_metric = metric_l2(z_hard, target_mask)
        epe_count = metric_epe(z_hard, target_mask, plan)

        grads = compute_edge_gradients(bundle.dL_dM, merged, S.velocities, config.gradient_mode)
        g = edge_scalar(grads, S.velocities)
        if config.momentum:
            velocity_buf = config.momentum * velocity_buf + g
            g = velocity_buf.copy()
        n_pairs = active = 0
        if config.mrc_enabled:
            pairs = extract_check_pairs(merged, config.rules)
            n_pairs = len(pairs)
            g, active = gate_gradients(g, S, pairs, config.rules, config.learning_rate, config.clip)
        step_grads = g[:, None, None] * S.velocities[:, None, :]
        step_grads = np.broadcast_to(step_grads, S.coords.shape).copy()
        S_new = apply_step(S, step_grads, config.learning_rate, config.clip)
        disp = float(np.abs(S_new.coords - S.coords).max()) if len(S) else 0.0
        S = S_new
        n_sraf = sum(1 for t in S.ring_tags if t == "sraf")
        logs.append(IterationLog(it, bundle.l2, bundle.pvb, bundle.epe, bundle.total, l2_metric, epe_count,
                                 disp, active, n_pairs, n_sraf))
        log.debug("iter %d total %.3f l2 %.0f epe %d", it, bundle.total, l2_metric, epe_count)

        if config.early_stop:
            if l2_metric < best_l2 * (1 - config.early_stop_tol):
                best_l2, stall = l2_metric, 0
            else:
                stall += 1
            if epe_count == 0 and stall >= config.early_stop_patience:
                break

    merged, mask = forward_geometry(S, W, H)
    if srafs:
        from .sraf import prune_srafs

        z_nom = resist_hard(_nominal_intensity(mask, kernels, config), config.threshold)
        keep = prune_srafs(merged, z_nom, config.sraf_min_width)
        if len(keep) < len(S.rings):
            S = S.subset_rings(keep)
            merged, mask = forward_geometry(S, W, H)
    report = evaluate(mask, target_mask, kernels, plan, config.corners, config.threshold,
                      tat_seconds=time.perf_counter() - t0)
    return OptimizeResult(merged, mask, report, logs, target_mask, target_segs)


def _nominal_intensity(mask, kernels, config):
    from .litho import pick_corners, simulate

    nom = pick_corners(config.corners)[0]
    return nom.dose_scale * simulate(mask, kernels)


def write_outputs(result: OptimizeResult, out_dir) -> dict[str, Path]:
    """Write the final mask (PGM), geometry, metrics and convergence log into ``out_dir``."""
    from . import io

    H, W = result.mask.shape
    return io.write_artifacts(out_dir, io.pgm_bytes(result.mask), io.geometry_to_dict(result.segments, W, H),
                              result.metrics.to_dict(), [e.to_dict() for e in result.logs])


def load_run_config(path, overrides: dict | None = None) -> dict:
    """Read a run file: paths ``layout``, ``kernels``, ``rules``, ``out`` plus an ``optimizer`` table.

    Relative paths resolve against the run file's directory; ``overrides``
    (e.g. from the command line) replace entries and resolve against the
    working directory.
    """
    from . import io

    path = Path(path)
    doc = io.load_config_dict(path)
    unknown = set(doc) - {"layout", "kernels", "rules", "out", "optimizer"}
    if unknown:
        raise ConfigError(f"{path}: unknown top-level keys {sorted(unknown)}")
    run = {k: (path.parent / doc[k]) for k in ("layout", "kernels", "rules", "out") if doc.get(k)}
    for k, v in (overrides or {}).items():
        if v is not None:
            run[k] = Path(v)
    opt = doc.get("optimizer", {})
    if not isinstance(opt, dict):
        raise ConfigError(f"{path}: [optimizer] must be a table")
    run["optimizer"] = dict(opt)
    for k in ("layout", "kernels", "out"):
        if k not in run:
            raise ConfigError(f"{path}: no {k!r} given in the run file or on the command line")
    return run


def run_job(run: dict) -> OptimizeResult:
    from . import io

    layout = io.load_layout(run["layout"])
    kernels = io.load_kernels(run["kernels"])
    opt = dict(run["optimizer"])
    if "rules" in run:
        opt["rules"] = io.load_rules(run["rules"])
    opt.setdefault("width", layout["width"])
    opt.setdefault("height", layout["height"])
    config = OptimizerConfig.from_dict(opt)
    main = [p for p, t in zip(layout["polygons"], layout["tags"]) if t == "main"]
    assists = [p for p, t in zip(layout["polygons"], layout["tags"]) if t == "sraf"]
    result = optimize(main, config, kernels, srafs=assists or None)
    write_outputs(result, run["out"])
    return result


def run_from_config(path, overrides: dict | None = None) -> int:
    """Load a run file, optimize and write the four artifacts; returns a process exit status."""
    try:
        run = load_run_config(path, overrides)
        result = run_job(run)
    except (EdgeOPCError, OSError) as exc:
        print(f"edgeopc: error: {exc}", file=sys.stderr)
        return 2
    print(MetricsReport.table_header())
    print(result.metrics.table_row(Path(run["layout"]).stem))
    return 0
