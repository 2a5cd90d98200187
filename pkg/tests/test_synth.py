import numpy as np
import pytest

from fractfield.metrics import folding_fraction
from fractfield.synth import SWIRL_MAX, phantom, phantom_labels, synth_pair, truth_field
from fractfield.volume import Volume3D
from fractfield.warp import jacobian_determinant, warp_image

DIMS = (12, 24, 24)


def test_translate_truth_constant():
    p = synth_pair("translate", DIMS, (0, 2, 3))
    assert np.all(p.truth.u[0] == 0) and np.all(p.truth.u[1] == 2) and np.all(p.truth.u[2] == 3)
    assert folding_fraction(p.truth) == 0.0


def test_scale_truth_affine():
    p = synth_pair("scale", DIMS, 1.1)
    det = jacobian_determinant(p.truth).data
    assert np.max(np.abs(det[1:-1, 1:-1, 1:-1] - 1.331)) <= 1e-10


def test_swirl_fold_free():
    for a in (0.3, 1.0, SWIRL_MAX):
        assert folding_fraction(synth_pair("swirl", DIMS, a).truth) == 0.0


def test_magnitude_bounds():
    with pytest.raises(ValueError, match="fold-free"):
        truth_field("swirl", DIMS, SWIRL_MAX + 0.01)
    with pytest.raises(ValueError, match="fold-free"):
        truth_field("scale", DIMS, 0.0)
    with pytest.raises(ValueError, match="triple"):
        truth_field("translate", DIMS, (1, 2))
    with pytest.raises(ValueError, match="unknown deformation"):
        truth_field("shear", DIMS, 1)


def test_pair_is_analytic_and_normalized():
    p = synth_pair("swirl", DIMS, 0.5, seed=3)
    for v in (p.fixed, p.moving):
        assert v.data.min() == 0.0 and v.data.max() == 1.0
    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=float) for n in DIMS], indexing="ij"))
    raw = phantom(grid + p.truth.u, DIMS, 3)
    expect = (raw - raw.min()) / (raw.max() - raw.min())
    assert np.max(np.abs(p.fixed.data - expect)) <= 1e-12
    assert np.array_equal(p.labels_fixed.labels, phantom_labels(grid + p.truth.u, DIMS))
    assert p.labels_moving.label_set == frozenset({0, 1, 2})
    # resampling the moving image by the truth approximates the analytic fixed image
    w = warp_image(p.moving, p.truth).data
    assert np.mean(np.abs(w - p.fixed.data)) < 0.02


def test_deterministic_and_seeded():
    a = synth_pair("scale", DIMS, 1.1, seed=7)
    b = synth_pair("scale", DIMS, 1.1, seed=7)
    c = synth_pair("scale", DIMS, 1.1, seed=8)
    assert np.array_equal(a.fixed.data, b.fixed.data)
    assert not np.array_equal(a.moving.data, c.moving.data)


def test_spacing_passthrough():
    p = synth_pair("translate", DIMS, (0, 1, 0), spacing=(2.0, 1.0, 1.0))
    assert p.fixed.spacing == p.truth.spacing == p.labels_fixed.spacing == (2.0, 1.0, 1.0)
