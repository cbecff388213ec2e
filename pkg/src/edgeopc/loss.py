"""Composite printability objective and its closed-form image gradient.

All gradients are hand-derived. For a loss ``L(Z)`` with ``Z`` the sigmoid
resist of a SOCS image, ``dL/dM`` is

    alpha * dose * sum_i sigma_i { h'_i (*) [G Z (1-Z) conj(M (*) h_i)]
                                  + conj(h'_i) (*) [G Z (1-Z) (M (*) h_i)] }

where ``G = dL/dZ`` and ``h'`` is the kernel rotated by 180 degrees. The two
terms are complex conjugates of each other, so their sum is real.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ConfigError, ContractError
from .geometry import SegmentSet
from .litho import (DEFAULT_THRESHOLD, CornerState, ForwardResult, KernelSet, ProcessCorner,
                    fields, intensity_from_fields, resist_sigmoid)

IMAG_TOL = 1e-9


@dataclass(frozen=True)
class LossWeights:
    w1: float = 1.0
    w2: float = 0.9
    w3: float = 100.0

    def __post_init__(self):
        ws = (self.w1, self.w2, self.w3)
        if any(w < 0 for w in ws):
            raise ConfigError("loss weights must be nonnegative")
        if not any(w > 0 for w in ws):
            raise ConfigError("at least one loss weight must be positive")


@dataclass
class EpeSamplePlan:
    """EPE measure points, as pixel indices ``(x, y)`` of the inside boundary pixel.

    ``horizontal[k]`` is True for points on horizontal target edges (their
    window runs along y); ``normals[k]`` is the outward edge normal.
    """

    xs: np.ndarray
    ys: np.ndarray
    horizontal: np.ndarray
    normals: np.ndarray
    th_epe: int = 15
    gamma: float = 50.0

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=np.int64)
        self.ys = np.asarray(self.ys, dtype=np.int64)
        self.horizontal = np.asarray(self.horizontal, dtype=bool)
        self.normals = np.asarray(self.normals, dtype=np.int64).reshape(-1, 2)
        if self.th_epe < 1:
            raise ConfigError("th_epe must be at least 1")

    def __len__(self):
        return len(self.xs)

    @property
    def hs(self) -> list[tuple[int, int]]:
        return [(int(x), int(y)) for x, y, h in zip(self.xs, self.ys, self.horizontal) if h]

    @property
    def vs(self) -> list[tuple[int, int]]:
        return [(int(x), int(y)) for x, y, h in zip(self.xs, self.ys, self.horizontal) if not h]

    def windows(self, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
        """Row and column indices of every window pixel, shape [n_samples, 2*th+1].

        Indices are clamped at the image border, not wrapped.
        """
        H, W = shape
        k = np.arange(-self.th_epe, self.th_epe + 1)
        h = self.horizontal[:, None]
        rows = np.where(h, self.ys[:, None] + k[None, :], self.ys[:, None])
        cols = np.where(h, self.xs[:, None], self.xs[:, None] + k[None, :])
        return np.clip(rows, 0, H - 1), np.clip(cols, 0, W - 1)


def _inside_pixel(horizontal_edge: bool, pos: int, sign: int) -> int:
    if horizontal_edge:
        return pos if sign > 0 else pos + 1
    return pos - 1 if sign > 0 else pos


def make_epe_plan(target: SegmentSet, th_epe: int = 15, gamma: float = 50.0,
                  shape: tuple[int, int] | None = None) -> EpeSamplePlan:
    """One sample per target segment midpoint, skipping those within ``th_epe`` of a corner."""
    xs, ys, hor, nrm = [], [], [], []
    c = target.coords
    for i in range(len(target)):
        if target.ring_tags[target.polygon_ids[i]] != "main":
            continue
        (x1, y1), (x2, y2) = c[i]
        edge = target.edge_ids[i]
        same = np.nonzero(target.edge_ids == edge)[0]
        ends = c[same].reshape(-1, 2)
        horiz = bool(y1 == y2)
        mid = (x1 + x2) / 2 if horiz else (y1 + y2) / 2
        axis = 0 if horiz else 1
        lo, hi = ends[:, axis].min(), ends[:, axis].max()
        if mid - lo < th_epe or hi - mid < th_epe:
            continue
        v = target.velocities[i].astype(np.int64)
        if horiz:
            x = int(math.floor(mid))
            y = _inside_pixel(True, int(round(y1)), int(v[1]))
        else:
            y = int(math.floor(mid))
            x = _inside_pixel(False, int(round(x1)), int(v[0]))
        if shape is not None and not (0 <= x < shape[1] and 0 <= y < shape[0]):
            continue
        xs.append(x)
        ys.append(y)
        hor.append(horiz)
        nrm.append(v)
    return EpeSamplePlan(np.array(xs, dtype=np.int64), np.array(ys, dtype=np.int64),
                         np.array(hor, dtype=bool), np.array(nrm, dtype=np.int64).reshape(-1, 2),
                         th_epe, gamma)


def _check_shapes(a, b):
    if np.shape(a) != np.shape(b):
        raise ConfigError(f"shape mismatch {np.shape(a)} vs {np.shape(b)}")


def loss_l2(z_nom: np.ndarray, target: np.ndarray) -> float:
    _check_shapes(z_nom, target)
    d = np.asarray(z_nom, dtype=np.float64) - target
    return float(np.sum(d * d))


def loss_pvb(z_max: np.ndarray, z_min: np.ndarray) -> float:
    _check_shapes(z_max, z_min)
    d = np.asarray(z_max, dtype=np.float64) - z_min
    return float(np.sum(d * d))


def epe_distance_sums(z_nom: np.ndarray, target: np.ndarray, plan: EpeSamplePlan) -> np.ndarray:
    """Windowed sums of ``(Z - T)^2`` across each sample's edge."""
    _check_shapes(z_nom, target)
    d = (np.asarray(z_nom, dtype=np.float64) - target) ** 2
    if len(plan) == 0:
        return np.zeros(0)
    rows, cols = plan.windows(d.shape)
    return d[rows, cols].sum(axis=1)


def loss_epe(d_sums: np.ndarray, gamma: float = 50.0) -> float:
    if gamma <= 0:
        raise ConfigError("gamma must be positive")
    return float(np.sum(expit(gamma * np.asarray(d_sums, dtype=np.float64))))


def backprop_resist(dL_dZ: np.ndarray, state: CornerState, alpha: float) -> np.ndarray:
    """Pull an image-space gradient ``dL/dZ`` back through resist and optics to ``dL/dM``."""
    z = state.z
    w = dL_dZ * (alpha * state.corner.dose_scale) * z * (1.0 - z)
    return backprop_intensity(w, state.kernels, state.fields)


def backprop_intensity(dL_dI: np.ndarray, kernels: KernelSet, A: np.ndarray) -> np.ndarray:
    """``dL/dM`` given ``dL/dI`` and the coherent fields ``A_i = M (*) h_i``."""
    _, flip = kernels.spectra(dL_dI.shape)
    out = np.zeros(dL_dI.shape, dtype=np.complex128)
    for k, sigma in enumerate(kernels.weights):
        a = A[k]
        flip_k = flip[k]
        # conj(h') padded has spectrum conj(flip[-f])
        conj_flip_k = np.conj(np.roll(flip_k[::-1, ::-1], 1, axis=(0, 1)))
        t1 = np.fft.ifft2(np.fft.fft2(dL_dI * np.conj(a)) * flip_k)
        t2 = np.fft.ifft2(np.fft.fft2(dL_dI * a) * conj_flip_k)
        out += sigma * (t1 + t2)
    scale = max(1.0, float(np.max(np.abs(out.real))))
    resid = float(np.max(np.abs(out.imag)))
    if resid > IMAG_TOL * scale:
        raise ContractError(f"image gradient has imaginary residue {resid:.3g}")
    return out.real.copy()


def _state_from_mask(z, mask, kernels, alpha, threshold, dose) -> CornerState:
    A = fields(mask, kernels)
    I = intensity_from_fields(A, kernels)
    expect = resist_sigmoid(dose * I, alpha, threshold)
    if np.shape(z) != expect.shape or np.max(np.abs(expect - z)) > 1e-9:
        raise ContractError("resist image is inconsistent with the mask, kernels and alpha given")
    return CornerState(ProcessCorner("given", dose), kernels, A, I, expect)


def grad_l2(z: np.ndarray, target: np.ndarray, mask: np.ndarray, kernels: KernelSet, alpha: float,
            threshold: float = DEFAULT_THRESHOLD, dose: float = 1.0) -> np.ndarray:
    """``d ||Z - T||^2 / dM`` for ``Z`` the sigmoid resist of ``mask``."""
    _check_shapes(z, target)
    state = _state_from_mask(z, mask, kernels, alpha, threshold, dose)
    return _grad_l2(state, target, alpha)


def _grad_l2(state: CornerState, target: np.ndarray, alpha: float) -> np.ndarray:
    return backprop_resist(2.0 * (state.z - target), state, alpha)


def grad_pvb(fwd: ForwardResult) -> np.ndarray:
    """``d ||Z_max - Z_min||^2 / dM`` from a forward pass."""
    zmax, zmin = fwd.max.z, fwd.min.z
    g = 2.0 * (zmax - zmin)
    if fwd.max.kernels is fwd.min.kernels and fwd.max.fields is fwd.min.fields:
        # corners share the optical fields; combine before one backprop
        a = fwd.alpha
        w = g * (a * fwd.max.corner.dose_scale) * zmax * (1 - zmax) \
            - g * (a * fwd.min.corner.dose_scale) * zmin * (1 - zmin)
        return backprop_intensity(w, fwd.max.kernels, fwd.max.fields)
    return backprop_resist(g, fwd.max, fwd.alpha) - backprop_resist(g, fwd.min, fwd.alpha)


def epe_weight_map(z_nom: np.ndarray, target: np.ndarray, plan: EpeSamplePlan) -> np.ndarray:
    """``dL_epe / dD`` per pixel: each window pixel collects its sample's sigmoid slope."""
    c = np.zeros(np.shape(z_nom), dtype=np.float64)
    if len(plan) == 0:
        return c
    s = expit(plan.gamma * epe_distance_sums(z_nom, target, plan))
    slope = plan.gamma * s * (1.0 - s)
    rows, cols = plan.windows(c.shape)
    np.add.at(c, (rows.ravel(), cols.ravel()), np.repeat(slope, rows.shape[1]))
    return c


def _grad_epe(state: CornerState, target: np.ndarray, plan: EpeSamplePlan, alpha: float) -> np.ndarray:
    c = epe_weight_map(state.z, target, plan)
    return backprop_resist(c * 2.0 * (state.z - target), state, alpha)


def grad_epe(z: np.ndarray, target: np.ndarray, mask: np.ndarray, plan: EpeSamplePlan,
             kernels: KernelSet, alpha: float, threshold: float = DEFAULT_THRESHOLD,
             dose: float = 1.0) -> np.ndarray:
    _check_shapes(z, target)
    state = _state_from_mask(z, mask, kernels, alpha, threshold, dose)
    return _grad_epe(state, target, plan, alpha)


@dataclass
class LossBundle:
    l2: float
    pvb: float
    epe: float
    total: float
    dL_dM: np.ndarray
    components: dict = field(default_factory=dict, repr=False)

    def scalars(self) -> dict:
        return {"l2": self.l2, "pvb": self.pvb, "epe": self.epe, "total": self.total}


def total_loss_and_grad(fwd: ForwardResult, target: np.ndarray, mask: np.ndarray,
                        plan: EpeSamplePlan, weights: LossWeights = LossWeights()) -> LossBundle:
    """Weighted total loss and ``dL/dM = w1 g_l2 + w2 g_pvb + w3 g_epe``.

    Components with zero weight are skipped (their gradient is taken as 0).
    """
    if not isinstance(weights, LossWeights):
        weights = LossWeights(*weights)
    _check_shapes(fwd.nominal.z, target)
    _check_shapes(mask, target)
    z_nom, z_max, z_min = fwd.images
    l2 = loss_l2(z_nom, target)
    pvb = loss_pvb(z_max, z_min)
    epe = loss_epe(epe_distance_sums(z_nom, target, plan), plan.gamma)
    zero = np.zeros(target.shape)
    g_l2 = _grad_l2(fwd.nominal, target, fwd.alpha) if weights.w1 else zero
    g_pvb = grad_pvb(fwd) if weights.w2 else zero
    g_epe = _grad_epe(fwd.nominal, target, plan, fwd.alpha) if weights.w3 else zero
    grad = weights.w1 * g_l2 + weights.w2 * g_pvb + weights.w3 * g_epe
    if not np.all(np.isfinite(grad)):
        raise ContractError("non-finite image gradient")
    total = weights.w1 * l2 + weights.w2 * pvb + weights.w3 * epe
    return LossBundle(l2, pvb, epe, total, grad, {"l2": g_l2, "pvb": g_pvb, "epe": g_epe})
