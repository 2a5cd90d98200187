"""Direct first-order optimization of a displacement field under the total loss.

Adam updates on the field, optionally coarse-to-fine.  The loss trace is
always evaluated at full resolution so entries from different pyramid
levels are comparable.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .losses import LossConfig, total_loss_grad, total_loss_terms
from .metrics import MetricReport, evaluate
from .volume import LabelMap, Volume3D
from .warp import DisplacementField, trilinear, warp_image, warp_labels

__all__ = ["RegistrationConfig", "RegistrationResult", "TraceRow", "register",
           "pyramid_factors", "downsample", "upsample_field"]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegistrationConfig:
    iterations: int = 200
    step_size: float = 0.25
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    pyramid_levels: int = 2
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    warmup: int = 10

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    level: int
    total: float
    similarity: float
    smoothness: float


@dataclass
class RegistrationResult:
    field: DisplacementField
    warped: Volume3D
    loss_trace: list[TraceRow]
    initial: TraceRow
    wall_time: float
    metrics: MetricReport | None = None

    def best_so_far(self) -> np.ndarray:
        return np.minimum.accumulate([r.total for r in self.loss_trace])


def pyramid_factors(dims) -> tuple[int, int, int]:
    """Per-axis downsampling factor for one pyramid step (axes that are odd or tiny stay)."""
    return tuple(2 if (n % 2 == 0 and n >= 4) else 1 for n in dims)  # type: ignore[return-value]


def downsample(img: np.ndarray, factors) -> np.ndarray:
    """Average-pool by per-axis integer factors."""
    D, H, W = img.shape
    fz, fy, fx = factors
    return img.reshape(D // fz, fz, H // fy, fy, W // fx, fx).mean(axis=(1, 3, 5))


def upsample_field(u: np.ndarray, fine_dims, factors) -> np.ndarray:
    """Trilinear upsampling of a coarse displacement, scaling components by the factors."""
    coords = np.stack(np.meshgrid(
        *[(np.arange(n, dtype=np.float64) - (f - 1) / 2.0) / f for n, f in zip(fine_dims, factors)],
        indexing="ij"))
    return np.stack([f * trilinear(u[d], coords) for d, f in enumerate(factors)])


def _step(cfg: RegistrationConfig, k: int) -> float:
    """Step for iteration ``k`` (1-based) within a level.

    Fresh moments make the first bias-corrected update ``+-step`` at every
    voxel; a linear warmup keeps that from scrambling the upsampled field.
    """
    if cfg.warmup:
        return cfg.step_size * min(1.0, k / cfg.warmup)
    return cfg.step_size


def _level_iterations(total: int, levels: int) -> list[int]:
    base = total // levels
    its = [base] * levels
    its[-1] += total - base * levels
    return its


def register(I_f: Volume3D, I_m: Volume3D, cfg: RegistrationConfig = RegistrationConfig(),
             labels_f: LabelMap | None = None, labels_m: LabelMap | None = None
             ) -> RegistrationResult:
    """Register ``I_m`` onto ``I_f``; returns the field mapping fixed to moving coordinates."""
    if I_f.dims != I_m.dims:
        raise ValueError(f"dims mismatch: fixed {I_f.dims}, moving {I_m.dims}")
    t0 = time.perf_counter()
    fixed, moving = I_f.data, I_m.data
    lcfg = cfg.loss

    # build the pyramid, finest first
    pyr = [(fixed, moving, (1, 1, 1))]
    for _ in range(cfg.pyramid_levels - 1):
        f_prev, m_prev, _ = pyr[-1]
        fac = pyramid_factors(f_prev.shape)
        if fac == (1, 1, 1):
            break
        pyr.append((downsample(f_prev, fac), downsample(m_prev, fac), fac))
    pyr.reverse()
    its = _level_iterations(cfg.iterations, len(pyr))

    def full_res(u_level, level_idx):
        u = u_level
        for j in range(level_idx + 1, len(pyr)):
            u = upsample_field(u, pyr[j][0].shape, pyr[j][2])
        return u

    def trace_row(it, lv, u_full):
        t = total_loss_terms(fixed, moving, u_full, lcfg)
        if not np.isfinite(t.total):
            raise FloatingPointError(f"non-finite loss at iteration {it}")
        return TraceRow(it, lv, t.total, t.similarity, t.smoothness)

    u = np.zeros((3, *pyr[0][0].shape))
    initial = trace_row(-1, 0, np.zeros((3, *fixed.shape)))
    trace: list[TraceRow] = []
    it = 0
    for lv, ((f_l, m_l, _), n_it) in enumerate(zip(pyr, its)):
        if lv > 0:
            u = upsample_field(u, f_l.shape, pyr[lv][2])
        m1 = np.zeros_like(u)
        m2 = np.zeros_like(u)
        for k in range(1, n_it + 1):
            try:
                g = total_loss_grad(f_l, m_l, u, lcfg)
            except FloatingPointError as exc:
                raise FloatingPointError(f"iteration {it}: {exc}") from exc
            m1 = cfg.beta1 * m1 + (1 - cfg.beta1) * g
            m2 = cfg.beta2 * m2 + (1 - cfg.beta2) * g * g
            mh = m1 / (1 - cfg.beta1**k)
            vh = m2 / (1 - cfg.beta2**k)
            u = u - _step(cfg, k) * mh / (np.sqrt(vh) + cfg.eps_adam)
            trace.append(trace_row(it, lv, full_res(u, lv)))
            it += 1
        log.debug("level %d done after %d iterations, total %.6g", lv, n_it, trace[-1].total)

    spacing = I_f.spacing
    field_out = DisplacementField(u, spacing)
    warped = warp_image(I_m, field_out)
    metrics = None
    if labels_f is not None and labels_m is not None:
        metrics = evaluate(labels_f, warp_labels(labels_m, field_out), field_out)
    return RegistrationResult(field_out, warped, trace, initial, time.perf_counter() - t0, metrics)
