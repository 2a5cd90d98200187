"""Displacement fields, trilinear / nearest-neighbour warping and Jacobians.

A displacement ``u`` maps voxel ``p`` to ``p' = p + u(p)`` (voxel units,
components ordered ``(z, y, x)``).  Sample coordinates outside the grid are
clamped to its boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import LabelMap, Volume3D, VolumeFormatError, read_payload, write_payload

__all__ = [
    "DisplacementField",
    "sample_coords",
    "trilinear",
    "warp_image",
    "warp_image_with_grad",
    "warp_labels",
    "jacobian_determinant",
    "load_field",
    "save_field",
]


@dataclass(frozen=True)
class DisplacementField:
    """Per-voxel displacement, ``u`` of shape ``(3, D, H, W)``."""

    u: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        a = np.array(self.u, dtype=np.float64, copy=True)
        if a.ndim != 4 or a.shape[0] != 3:
            raise ValueError(f"displacement must have shape (3, D, H, W), got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("displacement field contains non-finite values")
        a.flags.writeable = False
        object.__setattr__(self, "u", a)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.u.shape[1:]  # type: ignore[return-value]

    @classmethod
    def zeros(cls, dims, spacing=(1.0, 1.0, 1.0)) -> "DisplacementField":
        return cls(np.zeros((3, *dims)), spacing)

    @classmethod
    def constant(cls, dims, vec, spacing=(1.0, 1.0, 1.0)) -> "DisplacementField":
        u = np.empty((3, *dims))
        u[:] = np.asarray(vec, dtype=np.float64)[:, None, None, None]
        return cls(u, spacing)


def _grid(dims) -> np.ndarray:
    return np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij"))


def sample_coords(u: np.ndarray) -> np.ndarray:
    """Unclamped sample positions ``p + u(p)``, shape ``(3, D, H, W)``."""
    return _grid(u.shape[1:]) + u


def trilinear(img: np.ndarray, coords: np.ndarray, with_grad: bool = False):
    """Sample ``img`` at ``coords`` (shape ``(3, ...)``) with edge clamping.

    With ``with_grad`` also return the derivative of the sampled value with
    respect to each coordinate, shape ``(3, ...)``; it is zero along axes
    where the coordinate was clamped.
    """
    dims = img.shape
    c0, c1, frac, inside = [], [], [], []
    for d in range(3):
        hi = dims[d] - 1
        c = np.clip(coords[d], 0.0, hi)
        i0 = np.floor(c).astype(np.intp)
        i0 = np.minimum(i0, max(hi - 1, 0))
        f = c - i0
        c0.append(i0)
        c1.append(np.minimum(i0 + 1, hi))
        frac.append(f)
        inside.append((coords[d] >= 0.0) & (coords[d] <= hi))

    def corner(bz, by, bx):
        return img[(c1 if bz else c0)[0], (c1 if by else c0)[1], (c1 if bx else c0)[2]]

    fz, fy, fx = frac
    wz = (1 - fz, fz)
    wy = (1 - fy, fy)
    wx = (1 - fx, fx)
    out = np.zeros(coords.shape[1:])
    if with_grad:
        grad = np.zeros(coords.shape)
        sgn = (-1.0, 1.0)
    for bz in (0, 1):
        for by in (0, 1):
            for bx in (0, 1):
                v = corner(bz, by, bx)
                out += v * (wz[bz] * wy[by] * wx[bx])
                if with_grad:
                    grad[0] += v * (sgn[bz] * wy[by] * wx[bx])
                    grad[1] += v * (wz[bz] * sgn[by] * wx[bx])
                    grad[2] += v * (wz[bz] * wy[by] * sgn[bx])
    if with_grad:
        for d in range(3):
            # a singleton axis has no interpolation direction
            if dims[d] == 1:
                grad[d] = 0.0
            else:
                grad[d] = np.where(inside[d], grad[d], 0.0)
        return out, grad
    return out


def _field_array(f) -> np.ndarray:
    return f.u if isinstance(f, DisplacementField) else np.asarray(f, dtype=np.float64)


def warp_image(m: Volume3D, f: DisplacementField) -> Volume3D:
    """Trilinear warp ``I_w(p) = I_m(p + u(p))``."""
    u = _field_array(f)
    if u.shape[1:] != m.dims:
        raise ValueError(f"dims mismatch: image {m.dims}, field {u.shape[1:]}")
    if not np.all(np.isfinite(u)):
        raise ValueError("non-finite displacement")
    return m.with_data(trilinear(m.data, sample_coords(u)))


def warp_image_with_grad(img: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Warped image and its derivative with respect to each displacement component."""
    return trilinear(img, sample_coords(u), with_grad=True)


def warp_labels(labels: LabelMap, f: DisplacementField) -> LabelMap:
    """Nearest-neighbour warp; output labels are a subset of the input's."""
    u = _field_array(f)
    if u.shape[1:] != labels.dims:
        raise ValueError(f"dims mismatch: labels {labels.dims}, field {u.shape[1:]}")
    coords = sample_coords(u)
    idx = []
    for d, n in enumerate(labels.dims):
        # floor(x + 0.5) so ties round up consistently on both sides of zero
        idx.append(np.clip(np.floor(coords[d] + 0.5), 0, n - 1).astype(np.intp))
    return LabelMap(labels.labels[idx[0], idx[1], idx[2]], labels.spacing)


def jacobian_determinant(f: DisplacementField) -> Volume3D:
    """``det(I + grad u)`` per voxel.

    Central differences in the interior and one-sided differences at the
    boundary (``numpy.gradient`` with ``edge_order=1``).
    """
    u = _field_array(f)
    dims = u.shape[1:]
    if any(n < 2 for n in dims):
        raise ValueError(f"jacobian needs every axis >= 2, got dims {dims}")
    J = np.empty((*dims, 3, 3))
    for i in range(3):
        grads = np.gradient(u[i], axis=(0, 1, 2), edge_order=1)
        for j in range(3):
            J[..., i, j] = grads[j] + (1.0 if i == j else 0.0)
    det = (
        J[..., 0, 0] * (J[..., 1, 1] * J[..., 2, 2] - J[..., 1, 2] * J[..., 2, 1])
        - J[..., 0, 1] * (J[..., 1, 0] * J[..., 2, 2] - J[..., 1, 2] * J[..., 2, 0])
        + J[..., 0, 2] * (J[..., 1, 0] * J[..., 2, 1] - J[..., 1, 1] * J[..., 2, 0])
    )
    spacing = f.spacing if isinstance(f, DisplacementField) else (1.0, 1.0, 1.0)
    return Volume3D(det, spacing)


def load_field(path) -> DisplacementField:
    header, arr = read_payload(path)
    if header["components"] != 3:
        raise VolumeFormatError(f"{path}: field needs components: 3, got {header['components']}")
    if header["dtype"] == "u16":
        raise VolumeFormatError(f"{path}: field payload must be f32 or f64")
    return DisplacementField(arr.astype(np.float64), tuple(header["spacing"]))


def save_field(f: DisplacementField, path, dtype: str = "f64") -> None:
    if dtype not in ("f32", "f64"):
        raise VolumeFormatError("field payload must be f32 or f64")
    write_payload(path, f.u, f.spacing, dtype)
