"""Local cross-correlation similarity, diffusion smoothness and their gradient.

Window sums run over the ``n^3`` neighbourhood of each voxel with zero
padding outside the grid and a constant divisor ``n^3``.  With window sums
``S_f, S_w, S_ff, S_ww, S_fw`` the per-voxel term is

    cross = S_fw - S_f S_w / n^3
    var_f = S_ff - S_f^2 / n^3,   var_w = S_ww - S_w^2 / n^3
    term  = cross^2 / ((var_f + eps) (var_w + eps))

and ``CC`` is the sum of terms over the grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter1d

from .volume import Volume3D
from .warp import DisplacementField, trilinear, warp_image, sample_coords

__all__ = [
    "LossConfig",
    "LossTerms",
    "box_sum",
    "local_means",
    "local_cc",
    "local_cc_map",
    "similarity_loss",
    "smoothness_loss",
    "total_loss",
    "total_loss_terms",
    "total_loss_grad",
]


@dataclass(frozen=True)
class LossConfig:
    window: int = 9
    lam: float = 1.0
    eps: float = 1e-5

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"window must be a positive odd integer, got {self.window}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not self.eps > 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")


@dataclass(frozen=True)
class LossTerms:
    total: float
    similarity: float
    smoothness: float


def _arr(x) -> np.ndarray:
    if isinstance(x, Volume3D):
        return x.data
    if isinstance(x, DisplacementField):
        return x.u
    return np.asarray(x, dtype=np.float64)


def box_sum(a: np.ndarray, n: int) -> np.ndarray:
    """Zero-padded ``n^3`` window sum (self-adjoint for odd ``n``)."""
    if n % 2 == 0:
        raise ValueError(f"window must be odd, got {n}")
    out = np.asarray(a, dtype=np.float64)
    if n == 1:
        return out.copy()
    for ax in range(3):
        out = uniform_filter1d(out, size=n, axis=ax, mode="constant", cval=0.0) * n
    return out


def local_means(I, n: int) -> Volume3D | np.ndarray:
    if n < 1 or n % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {n}")
    means = box_sum(_arr(I), n) / n**3
    return I.with_data(means) if isinstance(I, Volume3D) else means


def _window_stats(f: np.ndarray, w: np.ndarray, n: int):
    n3 = float(n**3)
    S_f = box_sum(f, n)
    S_w = box_sum(w, n)
    S_ff = box_sum(f * f, n)
    S_ww = box_sum(w * w, n)
    S_fw = box_sum(f * w, n)
    cross = S_fw - S_f * S_w / n3
    var_f = S_ff - S_f * S_f / n3
    var_w = S_ww - S_w * S_w / n3
    return S_f, S_w, cross, var_f, var_w


def local_cc_map(I_f, I_w, cfg: LossConfig) -> np.ndarray:
    """Per-voxel correlation terms, each in ``[0, 1]``."""
    f, w = _arr(I_f), _arr(I_w)
    if f.shape != w.shape:
        raise ValueError(f"dims mismatch: {f.shape} vs {w.shape}")
    _, _, cross, var_f, var_w = _window_stats(f, w, cfg.window)
    return cross * cross / ((var_f + cfg.eps) * (var_w + cfg.eps))


def local_cc(I_f, I_w, cfg: LossConfig) -> float:
    return float(local_cc_map(I_f, I_w, cfg).sum())


def _warped(I_m, f) -> np.ndarray:
    m = _arr(I_m)
    u = _arr(f)
    if u.shape[1:] != m.shape:
        raise ValueError(f"dims mismatch: image {m.shape}, field {u.shape[1:]}")
    return trilinear(m, sample_coords(u))


def similarity_loss(I_f, I_m, f, cfg: LossConfig) -> float:
    return -local_cc(I_f, _warped(I_m, f), cfg)


def _smooth_terms(u: np.ndarray) -> list[np.ndarray]:
    return [np.diff(u, axis=ax) for ax in (1, 2, 3)]


def smoothness_loss(f) -> float:
    """Sum of squared forward differences of all components along all axes."""
    u = _arr(f)
    return float(sum(np.sum(d * d) for d in _smooth_terms(u)))


def total_loss_terms(I_f, I_m, f, cfg: LossConfig) -> LossTerms:
    sim = similarity_loss(I_f, I_m, f, cfg)
    smooth = smoothness_loss(f)
    return LossTerms(sim + cfg.lam * smooth, sim, smooth)


def total_loss(I_f, I_m, f, cfg: LossConfig) -> float:
    return total_loss_terms(I_f, I_m, f, cfg).total


def _smoothness_grad(u: np.ndarray) -> np.ndarray:
    g = np.zeros_like(u)
    for ax in (1, 2, 3):
        d = np.diff(u, axis=ax)
        n = u.shape[ax]
        hi = [slice(None)] * 4
        lo = [slice(None)] * 4
        hi[ax] = slice(1, n)
        lo[ax] = slice(0, n - 1)
        g[tuple(hi)] += 2.0 * d
        g[tuple(lo)] -= 2.0 * d
    return g


def _cc_grad_wrt_warped(f: np.ndarray, w: np.ndarray, cfg: LossConfig) -> np.ndarray:
    """d CC / d I_w at every voxel."""
    n = cfg.window
    n3 = float(n**3)
    S_f, S_w, cross, var_f, var_w = _window_stats(f, w, n)
    A = var_f + cfg.eps
    B = var_w + cfg.eps
    d_fw = 2.0 * cross / (A * B)
    d_ww = -cross * cross / (A * B * B)
    d_w = -d_fw * S_f / n3 - 2.0 * d_ww * S_w / n3
    return box_sum(d_fw, n) * f + box_sum(d_w, n) + 2.0 * w * box_sum(d_ww, n)


def total_loss_grad(I_f, I_m, f, cfg: LossConfig, return_terms: bool = False):
    """Gradient of the total loss with respect to the displacement, shape ``(3, D, H, W)``."""
    fixed, moving, u = _arr(I_f), _arr(I_m), _arr(f)
    if fixed.shape != moving.shape or u.shape[1:] != fixed.shape:
        raise ValueError(f"dims mismatch: fixed {fixed.shape}, moving {moving.shape}, "
                         f"field {u.shape[1:]}")
    warped, dwarp = trilinear(moving, sample_coords(u), with_grad=True)
    dcc = _cc_grad_wrt_warped(fixed, warped, cfg)
    grad = -dcc[None] * dwarp
    if cfg.lam:
        grad += cfg.lam * _smoothness_grad(u)
    bad = ~np.isfinite(grad)
    if bad.any():
        c, z, y, x = (int(i[0]) for i in np.nonzero(bad))
        raise FloatingPointError(f"non-finite gradient at voxel (z={z}, y={y}, x={x}), component {c}")
    if return_terms:
        sim = -float((local_cc_map(fixed, warped, cfg)).sum())
        smooth = smoothness_loss(u)
        return grad, LossTerms(sim + cfg.lam * smooth, sim, smooth)
    return grad
