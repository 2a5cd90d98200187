"""Analytic phantom pairs with known ground-truth displacement.

The moving image is a smooth two-compartment ellipsoid phantom.  The fixed
image is the same phantom evaluated analytically at ``p + truth(p)``, so
warping the moving image by the truth reproduces the fixed image up to
interpolation error only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import LabelMap, Volume3D, normalize_unit
from .warp import DisplacementField

__all__ = ["SynthPair", "synth_pair", "phantom", "phantom_labels", "truth_field", "KINDS",
           "SWIRL_MAX"]

KINDS = ("translate", "scale", "swirl")
# largest swirl amplitude (radians) with peak shear r*|dtheta/dr| <= 1
SWIRL_MAX = float(np.e / 2.0)
_EDGE = 0.06


@dataclass(frozen=True)
class SynthPair:
    fixed: Volume3D
    moving: Volume3D
    truth: DisplacementField
    labels_fixed: LabelMap
    labels_moving: LabelMap


def _geometry(dims):
    D, H, W = dims
    c = np.array([(D - 1) / 2.0, (H - 1) / 2.0, (W - 1) / 2.0])
    outer = np.array([0.34 * D, 0.33 * H, 0.33 * W])
    inner_c = c + np.array([0.0, 0.07 * H, -0.06 * W])
    inner = np.array([0.22 * D, 0.15 * H, 0.17 * W])
    return c, outer, inner_c, inner


def _rho(coords, center, radii):
    return np.sqrt(sum(((coords[d] - center[d]) / radii[d]) ** 2 for d in range(3)))


def _texture(coords, seed: int, n_waves: int = 6) -> np.ndarray:
    """Sum of plane waves with wavelengths of roughly 8-20 voxels, values in [-1, 1]."""
    rng = np.random.default_rng(seed)
    tex = np.zeros(coords.shape[1:])
    for _ in range(n_waves):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        k = 2 * np.pi / rng.uniform(8.0, 20.0) * direction
        phase = rng.uniform(0, 2 * np.pi)
        tex += np.cos(sum(k[d] * coords[d] for d in range(3)) + phase)
    return tex / n_waves


def phantom(coords: np.ndarray, dims, seed: int = 0) -> np.ndarray:
    """Evaluate the phantom at arbitrary (voxel-unit) coordinates ``(3, ...)``."""
    c, outer, inner_c, inner = _geometry(dims)
    ro = _rho(coords, c, outer)
    ri = _rho(coords, inner_c, inner)
    body = 0.5 * (1.0 - np.tanh((ro - 1.0) / _EDGE))
    core = 0.5 * (1.0 - np.tanh((ri - 1.0) / _EDGE))
    ramp = 1.0 + 0.25 * (coords[1] - c[1]) / outer[1]
    # texture everywhere keeps every correlation window non-degenerate
    return 0.45 * body * ramp + 0.4 * core + 0.12 * _texture(coords, seed)


def phantom_labels(coords: np.ndarray, dims) -> np.ndarray:
    c, outer, inner_c, inner = _geometry(dims)
    lab = np.zeros(coords.shape[1:], dtype=np.int64)
    lab[_rho(coords, c, outer) <= 1.0] = 1
    lab[_rho(coords, inner_c, inner) <= 1.0] = 2
    return lab


def truth_field(kind: str, dims, magnitude) -> np.ndarray:
    """Ground-truth displacement ``(3, D, H, W)`` for a deformation kind."""
    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij"))
    c = np.array([(n - 1) / 2.0 for n in dims])
    if kind == "translate":
        t = np.asarray(magnitude, dtype=np.float64).reshape(-1)
        if t.size != 3 or not np.all(np.isfinite(t)):
            raise ValueError("translate magnitude must be a finite (z, y, x) triple")
        return np.broadcast_to(t[:, None, None, None], grid.shape).copy()
    if kind == "scale":
        s = float(np.asarray(magnitude, dtype=np.float64).reshape(-1)[0])
        if not s > 0 or not np.isfinite(s):
            raise ValueError(f"scale factor {s} exceeds the fold-free bound (must be > 0)")
        return (s - 1.0) * (grid - c[:, None, None, None])
    if kind == "swirl":
        a = float(np.asarray(magnitude, dtype=np.float64).reshape(-1)[0])
        if not abs(a) <= SWIRL_MAX:
            raise ValueError(f"swirl amplitude {a} exceeds the fold-free bound {SWIRL_MAX:.4f}")
        sigma = 0.25 * min(dims[1], dims[2])
        dy = grid[1] - c[1]
        dx = grid[2] - c[2]
        theta = a * np.exp(-(dy**2 + dx**2) / (2 * sigma**2))
        ct, st = np.cos(theta), np.sin(theta)
        u = np.zeros_like(grid)
        u[1] = ct * dy - st * dx - dy
        u[2] = st * dy + ct * dx - dx
        return u
    raise ValueError(f"unknown deformation kind '{kind}', expected one of {KINDS}")


def synth_pair(kind: str, dims=(16, 64, 64), magnitude=(0.0, 2.0, 3.0), seed: int = 7,
               spacing=(1.0, 1.0, 1.0)) -> SynthPair:
    dims = tuple(int(d) for d in dims)
    u = truth_field(kind, dims, magnitude)
    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij"))
    warped_coords = grid + u
    moving = normalize_unit(Volume3D(phantom(grid, dims, seed), spacing))
    fixed = normalize_unit(Volume3D(phantom(warped_coords, dims, seed), spacing))
    return SynthPair(
        fixed=fixed,
        moving=moving,
        truth=DisplacementField(u, spacing),
        labels_fixed=LabelMap(phantom_labels(warped_coords, dims), spacing),
        labels_moving=LabelMap(phantom_labels(grid, dims), spacing),
    )
