import numpy as np
import pytest
from hypothesis import given, strategies as st

from fractfield.metrics import (
    dsc,
    evaluate,
    folding_fraction,
    hausdorff,
    hd95,
    jacobian_std,
    overall_and_avg_dsc,
)
from fractfield.volume import LabelMap
from fractfield.warp import DisplacementField


def lm(a, spacing=(1.0, 1.0, 1.0)):
    return LabelMap(np.asarray(a, dtype=np.int64), spacing)


def test_dsc_examples():
    a = np.zeros((2, 4, 4), int)
    a[0, :2, :2] = 1
    assert dsc(lm(a), lm(a), 1) == 1.0
    b = np.zeros_like(a)
    b[1, 2:, 2:] = 1
    assert dsc(lm(a), lm(b), 1) == 0.0
    x = np.zeros((1, 1, 10), int)
    y = np.zeros_like(x)
    x[0, 0, :8] = 1
    y[0, 0, 2:] = 1
    assert x.sum() == 8 and y.sum() == 8 and (x & y).sum() == 6
    assert dsc(lm(x), lm(y), 1) == 0.75
    assert dsc(lm(a), lm(a), 7) == 1.0  # both empty
    with pytest.raises(ValueError, match="dims mismatch"):
        dsc(lm(a), lm(np.zeros((2, 4, 3), int)), 1)


@given(st.integers(0, 10**6))
def test_dsc_symmetry(seed):
    r = np.random.default_rng(seed)
    x, y = lm(r.integers(0, 3, (3, 4, 5))), lm(r.integers(0, 3, (3, 4, 5)))
    for label in (1, 2):
        assert dsc(x, y, label) == dsc(y, x, label)


@given(st.integers(0, 10**6))
def test_dsc_monotone_in_intersection(seed):
    # move one voxel of Y from outside X to inside X: sizes fixed, overlap grows
    r = np.random.default_rng(seed)
    x = r.random(40) < 0.5
    y = r.random(40) < 0.5
    src = np.flatnonzero(y & ~x)
    dst = np.flatnonzero(~y & x)
    if not (src.size and dst.size):
        return
    y2 = y.copy()
    y2[src[0]] = False
    y2[dst[0]] = True
    X, Y, Y2 = (lm(v.reshape(2, 4, 5).astype(int)) for v in (x, y, y2))
    assert dsc(X, Y2, 1) >= dsc(X, Y, 1)


def test_overall_and_avg():
    a = np.zeros((1, 3, 4), int)
    a[0, 0, :2] = 1
    b = np.zeros_like(a)
    b[0, 0, 1:3] = 1
    o, v = overall_and_avg_dsc(lm(a), lm(b))
    assert o == v == dsc(lm(a), lm(b), 1)
    x = np.zeros((1, 3, 4), int)
    y = np.zeros_like(x)
    x[0, 0, :] = 1
    y[0, 0, :] = 1
    x[0, 1, :] = 2
    y[0, 2, :] = 2
    o, v = overall_and_avg_dsc(lm(x), lm(y))
    assert dsc(lm(x), lm(y), 1) == 1 and dsc(lm(x), lm(y), 2) == 0
    assert o == 0.5 and v == 0.5
    with pytest.raises(ValueError, match="no foreground"):
        overall_and_avg_dsc(lm(np.zeros((1, 1, 2), int)), lm(np.zeros((1, 1, 2), int)))


def test_hd95_examples():
    x = np.zeros((1, 1, 8), int)
    y = np.zeros_like(x)
    x[0, 0, 1] = 1
    y[0, 0, 4] = 1
    assert hd95(lm(x, (1, 1.8, 1.8)), lm(y, (1, 1.8, 1.8)), 1) == pytest.approx(5.4, abs=1e-12)
    assert hd95(lm(x), lm(y), 1, spacing=(1, 1, 1.8)) == pytest.approx(5.4, abs=1e-12)
    a = np.zeros((4, 5, 6), int)
    a[1:3, 1:4, 1:5] = 1
    assert hd95(lm(a), lm(a), 1) == 0.0
    with pytest.raises(ValueError, match="undefined distance"):
        hd95(lm(a), lm(np.zeros_like(a)), 1)


@given(st.integers(0, 10**6))
def test_hd95_properties(seed):
    r = np.random.default_rng(seed)
    x = lm((r.random((4, 5, 6)) < 0.3).astype(int))
    y = lm((r.random((4, 5, 6)) < 0.3).astype(int))
    if not (x.labels.any() and y.labels.any()):
        return
    h = hd95(x, y, 1)
    assert h == hd95(y, x, 1)
    assert h <= hausdorff(x, y, 1)
    assert abs(hd95(x, y, 1, spacing=(2, 2, 2)) - 2 * h) <= 1e-12


def _fold_line_field():
    u = np.zeros((3, 5, 6, 7))
    u[2, 2, 3, :] = -2.0 * np.arange(7)
    return DisplacementField(u)


def test_folding_examples(rng):
    assert folding_fraction(DisplacementField.zeros((3, 4, 5))) == 0.0
    # only the 7 voxels on the line have d(u_x)/dx = -2
    assert folding_fraction(_fold_line_field()) == pytest.approx(100 * 7 / 210, abs=1e-12)
    small = rng.uniform(-0.1, 0.1, size=(3, 6, 7, 8))
    assert folding_fraction(DisplacementField(small)) == 0.0


def test_jacobian_std_examples():
    assert jacobian_std(DisplacementField.zeros((4, 4, 4))) == 0.0
    dims = (5, 6, 7)
    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=float) for n in dims], indexing="ij"))
    assert jacobian_std(DisplacementField(0.1 * grid)) <= 1e-12
    # one of four x-lines has slope 2: dets are 1,1,1,3 in equal proportion
    u = np.zeros((3, 2, 2, 2))
    u[2, 1, 1, :] = [0.0, 2.0]
    s = jacobian_std(DisplacementField(u), include_boundary=True)
    assert s == pytest.approx(np.std([1, 1, 1, 3]), abs=1e-12)
    assert s == pytest.approx(0.866025, abs=1e-6)
    with pytest.raises(ValueError, match="no interior"):
        jacobian_std(DisplacementField(u))


@given(st.integers(0, 10**6), st.tuples(*[st.floats(-5, 5)] * 3))
def test_constant_shift_invariance(seed, shift):
    u = np.random.default_rng(seed).normal(size=(3, 4, 5, 6)) * 0.4
    v = u + np.asarray(shift)[:, None, None, None]
    assert folding_fraction(DisplacementField(u)) == folding_fraction(DisplacementField(v))
    assert abs(jacobian_std(DisplacementField(u)) - jacobian_std(DisplacementField(v))) <= 1e-12


def test_evaluate_report(rng):
    a = np.zeros((4, 6, 6), int)
    a[1:3, 1:4, 1:4] = 1
    a[1:3, 4:6, 4:6] = 2
    b = np.roll(a, 1, axis=2)
    rep = evaluate(lm(a), lm(b), DisplacementField.zeros(a.shape))
    assert set(rep.per_label_dsc) == {1, 2}
    assert all(0 <= v <= 1 for v in rep.per_label_dsc.values())
    assert 0 <= rep.overall_dsc <= 1 and rep.folding_pct == 0 and rep.jacobian_std == 0
    assert "union" in rep.notes["overall_dsc"] and "mean" in rep.notes["avg_dsc"]
