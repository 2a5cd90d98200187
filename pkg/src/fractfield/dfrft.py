"""Discrete fractional Fourier transform via discrete Hermite-Gaussians.

The order-``p`` kernel of length ``n`` is

    K_p[m, l] = sum_k u_k[m] * exp(-1j * pi/2 * p * k) * u_k[l]

where ``u_k`` are eigenvectors of the symmetric matrix that commutes with
the unitary DFT (Candan's ``S`` matrix).  ``K_1`` is the unitary DFT,
``K_0`` the identity, and ``K_a @ K_b == K_{a+b}``.

Eigenvectors are computed separately in the even and odd subspaces so every
basis vector is an exact eigenvector of the DFT even when eigenvalues of
``S`` come close.  Both subspace blocks are Jacobi matrices, so the i-th
eigenvector (by decreasing eigenvalue) has exactly i sign changes; even
vectors receive Hermite index ``2i`` and odd vectors ``2i + 1``.  For even
``n`` this skips ``n - 1`` and includes ``n``.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .volume import ComplexVolume3D, Volume3D

__all__ = [
    "FrftPlan",
    "canonical_order",
    "build_plan",
    "get_plan",
    "plans_for",
    "kernel",
    "frft_1d",
    "frft_axis",
    "frft_3d",
    "ifrft_3d",
    "log_magnitude",
    "inv_log_magnitude",
    "log_magnitude_array",
    "inv_log_magnitude_array",
    "commuting_matrix",
]

_ZERO_MAG = 1e-300


def canonical_order(p: float) -> float:
    """Representative of ``p`` in ``[0, 4)``; the transform has period 4 in ``p``."""
    # rounding keeps p and p + 4k on the same cache entry despite fmod residue
    q = round(float(np.mod(float(p), 4.0)), 12)
    return 0.0 if q >= 4.0 else q


def commuting_matrix(n: int) -> np.ndarray:
    """Symmetric ``n x n`` matrix that commutes with the unitary DFT."""
    S = np.diag(2.0 * np.cos(2.0 * np.pi * np.arange(n) / n))
    for i in range(n):
        S[i, (i + 1) % n] += 1.0
        S[(i + 1) % n, i] += 1.0
    return S


def _even_odd_transform(n: int) -> tuple[np.ndarray, int]:
    """Orthogonal map splitting R^n into even and odd sequences.

    Returns ``(P, n_even)``; rows ``[:n_even]`` of ``P`` span the even
    subspace and the rest the odd one.
    """
    P = np.zeros((n, n))
    r = 1.0 / np.sqrt(2.0)
    h = n // 2
    P[0, 0] = 1.0
    if n % 2 == 0:
        for i in range(1, h):
            P[i, i] = P[i, n - i] = r
            P[h + i, i] = r
            P[h + i, n - i] = -r
        P[h, h] = 1.0
    else:
        for i in range(1, h + 1):
            P[i, i] = P[i, n - i] = r
            P[h + i, i] = r
            P[h + i, n - i] = -r
    return P, h + 1


def _sign_changes(v: np.ndarray) -> int:
    s = np.sign(v[v != 0])
    return int(np.count_nonzero(s[1:] != s[:-1]))


def _fix_sign(v: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(np.abs(v) > 1e-12)
    if nz.size and v[nz[0]] < 0:
        return -v
    return v


@dataclass(frozen=True, eq=False)
class FrftPlan:
    """Cached eigenbasis for one axis length.

    Attributes
    ----------
    n : int
        Axis length.
    basis : ndarray, shape (n, n)
        Orthonormal columns ``u_k`` ordered by Hermite index.
    eig_indices : ndarray of int
        Hermite index assigned to each column.
    half_crossings : ndarray of int
        Sign changes of each column's even/odd half-vector, the quantity
        the Hermite index is derived from (``k = 2*c + parity``).
    """

    n: int
    basis: np.ndarray
    eig_indices: np.ndarray
    half_crossings: np.ndarray
    _kernels: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def kernel(self, p: float) -> np.ndarray:
        return kernel(self, p)


def build_plan(n: int) -> FrftPlan:
    """Construct the discrete Hermite-Gaussian basis for length ``n``."""
    n = int(n)
    if n < 2:
        raise ValueError(f"FrFT plan needs n >= 2, got {n}")
    S = commuting_matrix(n)
    P, n_even = _even_odd_transform(n)
    T = P @ S @ P.T
    T = 0.5 * (T + T.T)
    try:
        w_e, v_e = np.linalg.eigh(T[:n_even, :n_even])
        if n_even < n:
            w_o, v_o = np.linalg.eigh(T[n_even:, n_even:])
        else:
            v_o = np.zeros((0, 0))
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"eigensolver failed to converge for n={n}") from exc

    # decreasing eigenvalue order == increasing number of oscillations
    v_e = v_e[:, ::-1]
    v_o = v_o[:, ::-1]
    cols: dict[int, np.ndarray] = {}
    crossings: dict[int, int] = {}
    for i in range(v_e.shape[1]):
        cols[2 * i] = _fix_sign(P[:n_even].T @ v_e[:, i])
        crossings[2 * i] = _sign_changes(v_e[:, i])
    for i in range(v_o.shape[1]):
        cols[2 * i + 1] = _fix_sign(P[n_even:].T @ v_o[:, i])
        crossings[2 * i + 1] = _sign_changes(v_o[:, i])

    ks = np.array(sorted(cols), dtype=np.int64)
    basis = np.stack([cols[k] for k in ks], axis=1)
    basis.flags.writeable = False
    ks.flags.writeable = False
    half = np.array([crossings[k] for k in ks], dtype=np.int64)
    half.flags.writeable = False
    return FrftPlan(n=n, basis=basis, eig_indices=ks, half_crossings=half)


@lru_cache(maxsize=None)
def get_plan(n: int) -> FrftPlan:
    """Shared per-length plan cache."""
    return build_plan(n)


def plans_for(dims: Sequence[int]) -> tuple:
    """One plan per axis; axes of length 1 get ``None`` (the transform is trivial there)."""
    return tuple(get_plan(int(d)) if int(d) > 1 else None for d in dims)


def kernel(plan: FrftPlan, p: float) -> np.ndarray:
    """Order-``p`` kernel matrix (complex, symmetric, unitary); cached per order."""
    q = canonical_order(p)
    K = plan._kernels.get(q)
    if K is not None:
        return K
    with plan._lock:
        K = plan._kernels.get(q)
        if K is None and q == 0.0:
            K = np.eye(plan.n, dtype=np.complex128)
            K.flags.writeable = False
            plan._kernels[q] = K
        elif K is None:
            phase = np.exp(-0.5j * np.pi * q * plan.eig_indices)
            A = (plan.basis * phase) @ plan.basis.T
            K = 0.5 * (A + A.T)
            K.flags.writeable = False
            plan._kernels[q] = K
    return K


def frft_1d(plan: FrftPlan, x, p: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.complex128)
    if x.shape != (plan.n,):
        raise ValueError(f"length mismatch: plan n={plan.n}, input shape {x.shape}")
    return kernel(plan, p) @ x


def frft_axis(a: np.ndarray, p: float, axis: int, plan: FrftPlan | None = None) -> np.ndarray:
    """Apply the 1D transform along one axis of an array of any rank."""
    a = np.asarray(a)
    n = a.shape[axis]
    if n == 1 or canonical_order(p) == 0.0:
        return a.astype(np.complex128, copy=True)
    if plan is None:
        plan = get_plan(n)
    elif plan.n != n:
        raise ValueError(f"plan length {plan.n} does not match axis {axis} of length {n}")
    K = kernel(plan, p)
    moved = np.moveaxis(a.astype(np.complex128, copy=False), axis, -1)
    return np.moveaxis(moved @ K.T, -1, axis)


def _apply_3d(data: np.ndarray, p: float, plans, axes_order: Sequence[int]) -> np.ndarray:
    out = data
    for ax in axes_order:
        out = frft_axis(out, p, ax, plans[ax])
    return out


def _check_plans(dims, plans):
    if plans is None:
        return plans_for(dims)
    if len(plans) != 3:
        raise ValueError("need one plan per axis")
    for d, pl in zip(dims, plans):
        if d == 1 and pl is None:
            continue
        if pl is None or pl.n != d:
            raise ValueError(f"plan/dims mismatch: dims {tuple(dims)}, plans "
                             f"{[None if q is None else q.n for q in plans]}")
    return plans


def frft_3d(v, p: float, plans=None, axes_order: Sequence[int] = (2, 1, 0)) -> ComplexVolume3D:
    """Separable 3D transform: along x, then y, then z (array axes 2, 1, 0)."""
    data = v.data if isinstance(v, (Volume3D, ComplexVolume3D)) else np.asarray(v)
    plans = _check_plans(data.shape, plans)
    return ComplexVolume3D(_apply_3d(data, p, plans, axes_order))


def ifrft_3d(X, p: float, plans=None) -> ComplexVolume3D:
    """Inverse of :func:`frft_3d`: order ``-p`` along z, then y, then x."""
    return frft_3d(X, -p, plans, axes_order=(0, 1, 2))


def log_magnitude_array(data: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    data = np.asarray(data, dtype=np.complex128)
    mag = np.abs(data)
    small = mag < _ZERO_MAG
    phase = np.where(small, 1.0 + 0j, data / np.where(small, 1.0, mag))
    return np.log1p(mag), phase


def inv_log_magnitude_array(a: np.ndarray, phase: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if np.any(a < 0):
        raise ValueError("log-magnitude must be non-negative")
    return np.expm1(a) * phase


def log_magnitude(X) -> tuple[Volume3D, ComplexVolume3D]:
    """Split into ``A = log(1 + |X|)`` and a unit-modulus phase (1 where ``|X| == 0``)."""
    data = X.data if isinstance(X, ComplexVolume3D) else X
    A, phase = log_magnitude_array(data)
    return Volume3D(A), ComplexVolume3D(phase)


def inv_log_magnitude(A, phase) -> ComplexVolume3D:
    a = A.data if isinstance(A, Volume3D) else A
    ph = phase.data if isinstance(phase, ComplexVolume3D) else phase
    return ComplexVolume3D(inv_log_magnitude_array(a, ph))
