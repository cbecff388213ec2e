"""Forward lithography: SOCS aerial image, resist models, process corners.

Convolutions are periodic and done in the Fourier domain. Kernels are K x K
complex arrays centred at ``(K // 2, K // 2)``; they are zero-padded to the
mask shape with the centre moved to index ``(0, 0)``.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError

DEFAULT_THRESHOLD = 0.225


@dataclass
class KernelSet:
    """Optical kernels ``h_i`` (stored complex64) with descending weights ``sigma_i``."""

    kernels: np.ndarray
    weights: np.ndarray
    metadata: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.kernels = np.asarray(self.kernels, dtype=np.complex64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.kernels.ndim != 3 or self.kernels.shape[1] != self.kernels.shape[2]:
            raise ConfigError(f"kernels must have shape [N_k, K, K], got {self.kernels.shape}")
        if self.kernels.shape[1] % 2 == 0:
            raise ConfigError("kernel size K must be odd")
        if len(self.weights) != len(self.kernels) or len(self.weights) < 1:
            raise ConfigError("need one positive weight per kernel and at least one kernel")
        if np.any(self.weights <= 0) or np.any(np.diff(self.weights) > 0):
            raise ConfigError("kernel weights must be positive and sorted descending")
        if not np.all(np.isfinite(self.kernels)):
            raise ConfigError("kernel values must be finite")

    @property
    def n_kernels(self) -> int:
        return len(self.weights)

    @property
    def size(self) -> int:
        return self.kernels.shape[1]

    def truncated(self, n: int) -> "KernelSet":
        return KernelSet(self.kernels[:n], self.weights[:n], dict(self.metadata))

    def spectra(self, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
        """FFTs of the padded kernels and of their 180-degree flips, per mask shape."""
        with self._lock:
            hit = self._cache.get(shape)
        if hit is not None:
            return hit
        H, W = shape
        K = self.size
        if K > H or K > W:
            raise ConfigError(f"kernel size {K} exceeds mask shape {shape}")
        k = self.kernels.astype(np.complex128)
        fwd = np.fft.fft2(_pad_centered(k, shape))
        flipped = np.fft.fft2(_pad_centered(k[:, ::-1, ::-1], shape))
        fwd.setflags(write=False)
        flipped.setflags(write=False)
        with self._lock:
            self._cache[shape] = (fwd, flipped)
        return fwd, flipped

    def downsampled(self, factor: int) -> "KernelSet":
        """Kernels for a grid ``factor`` times coarser (area-averaged masks).

        Each coarse tap sums a ``factor``-wide box of fine taps, half-weighting
        the shared box edges when ``factor`` is even so symmetry is kept.
        """
        if factor == 1:
            return self
        K = self.size
        c = K // 2
        half = factor // 2
        taps = np.arange(-half, half + 1)
        w = np.ones(len(taps))
        if factor % 2 == 0:
            w[0] = w[-1] = 0.5
        n_out = c // factor
        Kc = 2 * n_out + 1
        src = self.kernels.astype(np.complex128)
        out = np.zeros((self.n_kernels, Kc, Kc), dtype=np.complex128)
        for ui in range(Kc):
            for vi in range(Kc):
                for a, wa in zip(taps, w):
                    for b, wb in zip(taps, w):
                        y = c + factor * (ui - n_out) + a
                        x = c + factor * (vi - n_out) + b
                        if 0 <= y < K and 0 <= x < K:
                            out[:, ui, vi] += wa * wb * src[:, y, x]
        meta = dict(self.metadata, downsampled=factor)
        return KernelSet(out, self.weights.copy(), meta)


def _pad_centered(k: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    H, W = shape
    K = k.shape[-1]
    c = K // 2
    pad = np.zeros(k.shape[:-2] + (H, W), dtype=k.dtype)
    pad[..., :K, :K] = k
    return np.roll(pad, (-c, -c), axis=(-2, -1))


def fields(mask: np.ndarray, kernels: KernelSet) -> np.ndarray:
    """Coherent fields ``M (*) h_i``, shape [N_k, H, W], complex128."""
    mask = np.asarray(mask, dtype=np.float64)
    fwd, _ = kernels.spectra(mask.shape)
    return np.fft.ifft2(np.fft.fft2(mask)[None] * fwd)


def intensity_from_fields(A: np.ndarray, kernels: KernelSet) -> np.ndarray:
    I = np.zeros(A.shape[1:], dtype=np.float64)
    for w, a in zip(kernels.weights, A):
        I += w * (a.real ** 2 + a.imag ** 2)
    return I


def simulate(mask: np.ndarray, kernels: KernelSet) -> np.ndarray:
    """Aerial intensity ``sum_i sigma_i |M (*) h_i|^2``."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise ConfigError("mask must be a 2-D array")
    return intensity_from_fields(fields(mask, kernels), kernels)


def resist_hard(I: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Constant-threshold resist: 1 where ``I > threshold``, else 0."""
    if threshold <= 0:
        raise ConfigError("intensity threshold must be positive")
    return (np.asarray(I) > threshold).astype(np.uint8)


def resist_sigmoid(I: np.ndarray, alpha: float, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    if alpha <= 0:
        raise ConfigError("sigmoid steepness must be positive")
    return expit(alpha * (np.asarray(I, dtype=np.float64) - threshold))


@dataclass(frozen=True)
class ProcessCorner:
    name: str
    dose_scale: float = 1.0
    defocus_kernel_index: int = 0

    def __post_init__(self):
        if not self.dose_scale > 0:
            raise ConfigError(f"corner {self.name!r}: dose_scale must be positive")


DEFAULT_CORNERS = (
    ProcessCorner("min", 0.98),
    ProcessCorner("nominal", 1.0),
    ProcessCorner("max", 1.02),
)


class CornerImages(NamedTuple):
    z_nom: np.ndarray
    z_max: np.ndarray
    z_min: np.ndarray


@dataclass
class CornerState:
    """Everything the backward pass needs about one imaged corner."""

    corner: ProcessCorner
    kernels: KernelSet
    fields: np.ndarray
    intensity: np.ndarray
    z: np.ndarray


@dataclass
class ForwardResult:
    nominal: CornerState
    max: CornerState
    min: CornerState
    alpha: float
    threshold: float

    @property
    def images(self) -> CornerImages:
        return CornerImages(self.nominal.z, self.max.z, self.min.z)


def pick_corners(corners: Sequence[ProcessCorner]) -> tuple[ProcessCorner, ProcessCorner, ProcessCorner]:
    """(nominal, highest dose, lowest dose)."""
    nominal = [c for c in corners if c.name == "nominal"]
    if not nominal:
        raise ConfigError("process corners must include one named 'nominal'")
    hi = max(corners, key=lambda c: c.dose_scale)
    lo = min(corners, key=lambda c: c.dose_scale)
    return nominal[0], hi, lo


def forward(mask: np.ndarray, kernels: KernelSet | Sequence[KernelSet],
            corners: Sequence[ProcessCorner] = DEFAULT_CORNERS, alpha: float = 50.0,
            threshold: float = DEFAULT_THRESHOLD) -> ForwardResult:
    """Image ``mask`` at nominal, max-dose and min-dose corners with the sigmoid resist.

    ``kernels`` may be a bank of KernelSets indexed by each corner's
    ``defocus_kernel_index``. Dose scales the intensity before thresholding.
    Fields are shared between corners that use the same KernelSet.
    """
    bank = [kernels] if isinstance(kernels, KernelSet) else list(kernels)
    nom, hi, lo = pick_corners(corners)
    mask = np.asarray(mask, dtype=np.float64)
    cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def state(c: ProcessCorner) -> CornerState:
        idx = c.defocus_kernel_index
        if not 0 <= idx < len(bank):
            raise ConfigError(f"corner {c.name!r} refers to missing kernel set {idx}")
        if idx not in cache:
            A = fields(mask, bank[idx])
            cache[idx] = (A, intensity_from_fields(A, bank[idx]))
        A, I = cache[idx]
        return CornerState(c, bank[idx], A, I, resist_sigmoid(c.dose_scale * I, alpha, threshold))

    return ForwardResult(state(nom), state(hi), state(lo), alpha, threshold)


def simulate_corners(mask: np.ndarray, kernels, corners: Sequence[ProcessCorner] = DEFAULT_CORNERS,
                     alpha: float = 50.0, threshold: float = DEFAULT_THRESHOLD) -> CornerImages:
    """Sigmoid resist images ``(Z_nom, Z_max, Z_min)``."""
    return forward(mask, kernels, corners, alpha, threshold).images


def hard_corners(mask: np.ndarray, kernels, corners: Sequence[ProcessCorner] = DEFAULT_CORNERS,
                 threshold: float = DEFAULT_THRESHOLD) -> CornerImages:
    """Binary resist images at the three corners (evaluation path)."""
    bank = [kernels] if isinstance(kernels, KernelSet) else list(kernels)
    nom, hi, lo = pick_corners(corners)
    intens: dict[int, np.ndarray] = {}

    def z(c):
        if c.defocus_kernel_index not in intens:
            intens[c.defocus_kernel_index] = simulate(mask, bank[c.defocus_kernel_index])
        return resist_hard(c.dose_scale * intens[c.defocus_kernel_index], threshold)

    return CornerImages(z(nom), z(hi), z(lo))


def make_synthetic_kernels(size: int = 151, n_kernels: int = 3, cutoff: float = 0.012,
                           coherence: float = 0.6, defocus: float = 0.0, aberration: float = 0.0,
                           seed: int = 0) -> KernelSet:
    """SOCS kernels of a synthetic partially coherent imaging system.

    A transmission cross coefficient matrix is built for a circular pupil of
    radius ``cutoff`` (cycles/pixel) and a disc source of relative radius
    ``coherence``, sampled on the kernel's own frequency grid, and
    eigendecomposed. ``defocus`` adds a quadratic pupil phase (waves at the
    pupil edge) and ``aberration`` adds seeded random low-order phase terms.
    Weights are the eigenvalues, rescaled so an infinite clear field images
    to intensity 1; ``metadata["energy_fraction"]`` records the share of the
    full eigenvalue sum the returned kernels capture.
    """
    if size % 2 == 0:
        raise ConfigError("kernel size must be odd")
    if n_kernels < 1:
        raise ConfigError("need at least one kernel")
    rng = np.random.default_rng(seed)
    c = size // 2
    fgrid = np.arange(-c, c + 1) / size
    fy, fx = np.meshgrid(fgrid, fgrid, indexing="ij")
    r_all = np.hypot(fx, fy)
    keep = r_all <= cutoff * (1 + coherence) + 1e-12
    fxs, fys = fx[keep], fy[keep]
    src = r_all <= cutoff * coherence + 1e-12
    sx, sy = fx[src], fy[src]
    coeffs = aberration * rng.standard_normal(4)

    def pupil(ux, uy):
        rho = np.hypot(ux, uy) / cutoff
        inside = rho <= 1 + 1e-12
        theta = np.arctan2(uy, ux)
        phase = defocus * rho ** 2 + coeffs[0] * rho * np.cos(theta) + coeffs[1] * rho * np.sin(theta) \
            + coeffs[2] * rho ** 2 * np.cos(2 * theta) + coeffs[3] * (3 * rho ** 3 - 2 * rho) * np.cos(theta)
        return inside * np.exp(2j * np.pi * phase)

    P = pupil(fxs[None, :] + sx[:, None], fys[None, :] + sy[:, None])
    tcc = (P.T @ P.conj()) / len(sx)
    lam, vec = np.linalg.eigh(tcc)
    order = np.argsort(lam)[::-1]
    lam, vec = lam[order], vec[:, order]
    lam = np.clip(lam, 0.0, None)
    total = lam.sum()
    n = min(n_kernels, int(np.sum(lam > total * 1e-12)))
    lam, vec = lam[:n], vec[:, :n]
    for j in range(n):
        k = np.argmax(np.abs(vec[:, j]))
        vec[:, j] *= np.exp(-1j * np.angle(vec[k, j]))

    xs = np.arange(-c, c + 1)
    # spatial kernel: h(y, x) = sum_f phi(f) exp(2 pi i f . (x, y))
    ey = np.exp(2j * np.pi * np.outer(xs, fys))
    ex = np.exp(2j * np.pi * np.outer(xs, fxs))
    taper = _taper(size)
    kern = np.empty((n, size, size), dtype=np.complex128)
    for j in range(n):
        kern[j] = (ey * vec[:, j][None, :]) @ ex.T * taper
        kern[j] /= np.sqrt(np.sum(np.abs(kern[j]) ** 2))
    dc = np.abs(kern.sum(axis=(1, 2))) ** 2
    scale = float(np.sum(lam * dc))
    weights = lam / scale
    meta = {
        "source": "synthetic",
        "size": size,
        "cutoff": cutoff,
        "coherence": coherence,
        "defocus": defocus,
        "aberration": aberration,
        "seed": seed,
        "energy_fraction": float(lam.sum() / total),
    }
    return KernelSet(kern.astype(np.complex64), weights, meta)


def _taper(size: int) -> np.ndarray:
    """Separable window, flat in the middle half and cosine-rolled to the border."""
    c = size // 2
    r = np.abs(np.arange(-c, c + 1)) / (c + 1)
    w = np.where(r < 0.5, 1.0, np.cos(np.pi * (r - 0.5)) ** 2)
    return np.outer(w, w)
