from fractions import Fraction
from math import erf

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fractfield.dfrft import get_plan, kernel
from fractfield.fca import (
    FcaConfig,
    PatchEmbedConfig,
    ShapeAuditError,
    TokenGrid,
    WeightSet,
    attention_shapes,
    block_shapes,
    branch_kernel_names,
    branch_slices,
    count_branch_params,
    count_flops,
    cross_attention,
    fca_block,
    feature_extractor_shapes,
    frft_feature_extract,
    init_weights,
    level_chain_shapes,
    level_down,
    level_down_shapes,
    level_up,
    level_up_shapes,
    patch_embed,
    patch_embed_shapes,
    symmetric_block_weights,
)
from fractfield.volume import Volume3D


# --- patch embedding -------------------------------------------------------

def test_patch_embed_reference_shape():
    cfg = PatchEmbedConfig()
    w = init_weights(patch_embed_shapes(cfg), seed=0)
    t = patch_embed(Volume3D(np.zeros((16, 128, 128))), cfg, w)
    assert t.data.shape == (4, 32, 32, 48)
    assert t.n_tokens == 4096


def test_patch_embed_zero_and_onehot(rng):
    cfg = PatchEmbedConfig(patch=(2, 2, 2), embed_dim=6)
    v = rng.normal(size=(4, 2, 6))
    zero = WeightSet({"E": np.zeros((8, 6))}, patch_embed_shapes(cfg))
    assert np.all(patch_embed(v, cfg, zero).data == 0)
    E = np.zeros((8, 6))
    E[np.arange(6), np.arange(6)] = 1
    t = patch_embed(v, cfg, WeightSet({"E": E}))
    for i in range(2):
        for j in range(1):
            for k in range(3):
                patch = v[2 * i:2 * i + 2, 2 * j:2 * j + 2, 2 * k:2 * k + 2].ravel()
                assert np.array_equal(t.data[i, j, k], patch[:6])
    with pytest.raises(ValueError, match="not divisible"):
        patch_embed(np.zeros((3, 4, 4)), cfg, zero)


# --- channel split and accounting -------------------------------------------

def test_branch_slices():
    s = branch_slices(48, Fraction(1, 3))
    assert s["frft0"].tolist() == list(range(16))
    assert s["frft45"].tolist() == list(range(16, 32))
    assert s["frft90"].tolist() == list(range(32, 48))
    assert s["logmag"] is s["frft90"]
    full = branch_slices(8, 1)
    assert all(v.tolist() == list(range(8)) for v in full.values())
    with pytest.raises(ValueError, match="not a positive integer"):
        branch_slices(10, Fraction(1, 3))


def test_count_branch_params_examples():
    c = count_branch_params(48, 1)
    assert c["total"] == 82944 and c["frft0"] == 62208
    assert count_branch_params(48, Fraction(1, 3))["total"] == 9216 == 82944 // 9
    assert count_branch_params(1, 1) == {"frft0": 27, "frft45": 4, "frft90": 4, "logmag": 1,
                                         "total": 36}
    frac = count_branch_params(1, Fraction(1, 3), strict=False)
    assert frac["total"] == 4 and frac["frft45"] == Fraction(4, 9)
    with pytest.raises(ValueError):
        count_branch_params(1, Fraction(1, 3))


def test_count_flops_examples():
    assert count_flops(48, 1, 4, 32, 32)["total"] == 36 * 48**2 * 4096 == 339_738_624
    assert count_flops(12, 1, 1, 1, 1) == count_branch_params(12, 1)
    r = Fraction(count_flops(48, Fraction(1, 3), 4, 32, 32)["total"], count_flops(48, 1, 4, 32, 32)["total"])
    assert r == Fraction(1, 9)


@pytest.mark.parametrize("C,alpha", [(12, 1), (48, 1), (96, Fraction(1, 3)), (12, Fraction(1, 3))])
def test_weightset_audit_matches_formulas(C, alpha):
    ws = init_weights(feature_extractor_shapes(C, FcaConfig(channel_coeff=float(alpha))))
    ws.audit()
    assert ws.count(branch_kernel_names()) == count_branch_params(C, alpha)["total"]


def test_audit_detects_bad_shapes():
    shapes = attention_shapes(4)
    ws = init_weights(shapes)
    bad = ws.with_tensors({"q.w": np.zeros((4, 5))})
    with pytest.raises(ShapeAuditError, match="q.w"):
        bad.audit()
    missing = WeightSet({k: v for k, v in ws.tensors.items() if k != "o.b"}, shapes)
    with pytest.raises(ShapeAuditError, match="o.b"):
        missing.audit()


# --- feature extractor ------------------------------------------------------

def _fe_weights(C, cfg, seed=3):
    return init_weights(feature_extractor_shapes(C, cfg), seed=seed, scale=0.3)


def test_branch_suppression_identity(rng):
    C = 6
    cfg = FcaConfig(heads=1)
    w = _fe_weights(C, cfg)
    upd = {n: np.zeros_like(w[n]) for n in w.tensors if n.split(".")[0] in
           ("frft0", "frft45", "frft90", "logmag")}
    fuse = np.zeros((4 * C + C, C))
    fuse[4 * C:] = np.eye(C)
    upd["fuse.w"] = fuse
    upd["norm_in.scale"] = rng.uniform(0.5, 2, C)
    upd["norm_in.offset"] = rng.normal(size=C)
    w = w.with_tensors(upd)
    x = rng.normal(size=(2, 3, 4, C))
    out = frft_feature_extract(TokenGrid(x), cfg, w).data
    mu = x.mean(-1, keepdims=True)
    xn = (x - mu) / np.sqrt(((x - mu) ** 2).mean(-1, keepdims=True) + cfg.norm_eps)
    xn = xn * upd["norm_in.scale"] + upd["norm_in.offset"]
    assert np.array_equal(out, xn)


def test_single_branch_identity_on_unit_grid(rng):
    C = 4
    cfg = FcaConfig(heads=1)
    w = _fe_weights(C, cfg)
    k = np.zeros((3, 3, 3, C, C))
    k[1, 1, 1] = np.eye(C)
    w = w.with_tensors({"frft0.w": k, "norm_in.offset": np.full(C, 5.0)})
    x = rng.normal(size=(1, 1, 1, C))
    _, br = frft_feature_extract(TokenGrid(x), cfg, w, return_branches=True)
    mu = x.mean()
    xn = (x - mu) / np.sqrt(((x - mu) ** 2).mean() + cfg.norm_eps) + 5.0
    assert np.all(xn >= 0)
    assert np.max(np.abs(br["frft0"] - xn)) <= 1e-15


@given(st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3)),
       st.sampled_from([(3, Fraction(1, 3)), (6, Fraction(1, 3)), (4, 1), (2, 1)]),
       st.integers(0, 1000))
def test_feature_extract_shape_preserving(dims, ca, seed):
    C, alpha = ca
    cfg = FcaConfig(channel_coeff=float(alpha), heads=1)
    x = np.random.default_rng(seed).normal(size=(*dims, C))
    out = frft_feature_extract(TokenGrid(x, level=1), cfg, _fe_weights(C, cfg, seed))
    assert out.data.shape == x.shape and out.level == 1
    assert np.all(np.isfinite(out.data))


# --- attention --------------------------------------------------------------

def _attn_w(C, seed=0):
    return init_weights(attention_shapes(C), seed=seed, scale=0.5)


def test_attention_single_token(rng):
    C = 4
    w = _attn_w(C)
    q = TokenGrid(rng.normal(size=(1, 1, 1, C)))
    kv = TokenGrid(rng.normal(size=(1, 1, 1, C)))
    out, A = cross_attention(q, kv, w, heads=2, return_weights=True)
    assert np.all(A == 1.0)
    V = kv.data.reshape(1, C) @ w["v.w"] + w["v.b"]
    assert np.max(np.abs(out.data.reshape(1, C) - (V @ w["o.w"] + w["o.b"]))) <= 1e-14


def test_attention_identical_keys_uniform(rng):
    C = 4
    w = _attn_w(C).with_tensors({"k.w": np.zeros((C, C))})
    q = TokenGrid(rng.normal(size=(1, 2, 3, C)))
    _, A = cross_attention(q, TokenGrid(rng.normal(size=(1, 2, 3, C))), w, 2, return_weights=True)
    assert np.max(np.abs(A - 1 / 6)) <= 1e-15


def test_attention_three_token_hand_oracle():
    Wq = np.array([[1.0, 0.5], [-0.3, 2.0]])
    Wk = np.array([[0.2, -1.0], [0.7, 0.1]])
    Wv = np.array([[1.5, 0.0], [0.4, -0.6]])
    z = np.zeros(2)
    w = WeightSet({"q.w": Wq, "q.b": z, "k.w": Wk, "k.b": z, "v.w": Wv, "v.b": z,
                   "o.w": np.eye(2), "o.b": z})
    xq = np.array([[0.3, -1.2], [1.0, 0.4], [-0.5, 0.8]])
    xk = np.array([[0.9, 0.1], [-0.2, -0.7], [0.6, 1.3]])
    out = cross_attention(TokenGrid(xq.reshape(1, 1, 3, 2)), TokenGrid(xk.reshape(1, 1, 3, 2)),
                          w, heads=1).data.reshape(3, 2)
    for i in range(3):
        qi = [sum(xq[i, a] * Wq[a, c] for a in range(2)) for c in range(2)]
        logits = []
        for j in range(3):
            kj = [sum(xk[j, a] * Wk[a, c] for a in range(2)) for c in range(2)]
            logits.append((qi[0] * kj[0] + qi[1] * kj[1]) / np.sqrt(2))
        e = [np.exp(v) for v in logits]
        s = sum(e)
        expect = [0.0, 0.0]
        for j in range(3):
            vj = [sum(xk[j, a] * Wv[a, c] for a in range(2)) for c in range(2)]
            for c in range(2):
                expect[c] += e[j] / s * vj[c]
        assert np.max(np.abs(out[i] - expect)) <= 1e-12


@given(st.integers(1, 4), st.sampled_from([(4, 1), (4, 2), (4, 4), (6, 3)]), st.integers(0, 10**6))
def test_attention_rows_stochastic(n, ch, seed):
    C, h = ch
    r = np.random.default_rng(seed)
    q = TokenGrid(r.normal(size=(1, n, 2, C)) * 3)
    kv = TokenGrid(r.normal(size=(1, n, 2, C)) * 3)
    _, A = cross_attention(q, kv, _attn_w(C, seed), h, return_weights=True)
    assert np.all(A >= 0)
    assert np.max(np.abs(A.sum(-1) - 1)) <= 1e-12


def test_attention_errors(rng):
    w = _attn_w(4)
    a = TokenGrid(rng.normal(size=(1, 1, 2, 4)))
    with pytest.raises(ValueError, match="not divisible"):
        cross_attention(a, a, w, heads=3)
    with pytest.raises(ValueError, match="shape mismatch"):
        cross_attention(a, TokenGrid(rng.normal(size=(1, 2, 1, 4))), w, heads=2)


# --- full block ---------------------------------------------------------------

def test_block_symmetry(rng):
    C = 4
    cfg = FcaConfig(heads=2)
    w = symmetric_block_weights(C, cfg, seed=5)
    x = rng.normal(size=(2, 2, 3, C))
    a, b = fca_block(TokenGrid(x), TokenGrid(x), cfg, w)
    assert np.array_equal(a.data, b.data)
    y = rng.normal(size=x.shape)
    m1, f1 = fca_block(TokenGrid(x), TokenGrid(y), cfg, w)
    m2, f2 = fca_block(TokenGrid(y), TokenGrid(x), cfg, w)
    assert np.array_equal(m1.data, f2.data) and np.array_equal(f1.data, m2.data)


def test_block_zero_mlp_and_projection(rng):
    C = 4
    cfg = FcaConfig(heads=2)
    w = init_weights(block_shapes(C, cfg), seed=1)
    zeros = {n: np.zeros_like(v) for n, v in w.tensors.items()
             if ".mlp." in n or ".attn.o." in n}
    w = w.with_tensors(zeros)
    x, y = rng.normal(size=(2, 2, 2, C)), rng.normal(size=(2, 2, 2, C))
    m, f = fca_block(TokenGrid(x), TokenGrid(y), cfg, w)
    O_m = frft_feature_extract(TokenGrid(x), cfg, w.sub("m.fe")).data
    assert m.data.shape == x.shape and np.all(np.isfinite(m.data))
    assert np.array_equal(m.data, O_m)


def _oracle_block(xm, xf, w, heads, eps):
    """Straight-line evaluation of one block on a (1, 2, 2, C) grid, loops only."""
    D, H, W, C = xm.shape
    m = C
    KH = {p: kernel(get_plan(H), p) for p in (0.5, 1.0, -0.5, -1.0)}
    KW = {p: kernel(get_plan(W), p) for p in (0.5, 1.0, -0.5, -1.0)}

    def ln(v, s, o):
        mu = sum(v) / len(v)
        var = sum((a - mu) ** 2 for a in v) / len(v)
        return np.array([(a - mu) / np.sqrt(var + eps) * s[i] + o[i] for i, a in enumerate(v)])

    def ln_grid(g, s, o):
        out = np.zeros(g.shape, dtype=g.dtype)
        for y in range(H):
            for x in range(W):
                out[0, y, x] = ln(list(g[0, y, x]), s, o)
        return out

    def frft2(g, p):
        out = np.zeros(g.shape, dtype=complex)
        for y in range(H):
            for x in range(W):
                for yy in range(H):
                    for xx in range(W):
                        out[0, y, x] += KH[p][y, yy] * KW[p][x, xx] * g[0, yy, xx]
        return out

    def conv(g, k, b):
        kz = k.shape[0]
        r = kz // 2
        out = np.zeros((*g.shape[:3], k.shape[-1]))
        for y in range(H):
            for x in range(W):
                acc = b.copy()
                for dz in range(kz):
                    for dy in range(kz):
                        for dx in range(kz):
                            zz, yy, xs = dz - r, y + dy - r, x + dx - r
                            if zz == 0 and 0 <= yy < H and 0 <= xs < W:
                                acc = acc + g[0, yy, xs] @ k[dz, dy, dx]
                out[0, y, x] = acc
        return out

    relu = lambda a: np.maximum(a, 0)

    def fe(x, p):
        xn = ln_grid(x, p["norm_in.scale"], p["norm_in.offset"])
        b0 = relu(conv(xn, p["frft0.w"], p["frft0.b"]))
        outs = [b0]
        for name, order in (("frft45", 0.5), ("frft90", 1.0)):
            X = frft2(xn, order)
            z = relu(conv(np.concatenate([X.real, X.imag], -1), p[name + ".w"], p[name + ".b"]))
            outs.append(frft2(z[..., :m] + 1j * z[..., m:], -order).real)
        X = frft2(xn, 1.0)
        mag = np.abs(X)
        A = np.log(1 + mag)
        ph = np.where(mag < 1e-300, 1, X / np.where(mag == 0, 1, mag))
        a2 = relu(conv(A, p["logmag.w"], p["logmag.b"]))
        outs.append(frft2((np.exp(a2) - 1) * ph, -1.0).real)
        names = ("frft0", "frft45", "frft90", "logmag")
        normed = [ln_grid(o, p[f"norm_{n}.scale"], p[f"norm_{n}.offset"]) for o, n in zip(outs, names)]
        cat = np.concatenate(normed + [xn], -1)
        return np.einsum("zyxi,io->zyxo", cat, p["fuse.w"]) + p["fuse.b"]

    def attn(q, kv, p):
        dk = C // heads
        toks_q = [q[0, y, x] for y in range(H) for x in range(W)]
        toks_k = [kv[0, y, x] for y in range(H) for x in range(W)]
        Q = [t @ p["q.w"] + p["q.b"] for t in toks_q]
        K = [t @ p["k.w"] + p["k.b"] for t in toks_k]
        V = [t @ p["v.w"] + p["v.b"] for t in toks_k]
        res = []
        for i in range(len(Q)):
            o = np.zeros(C)
            for h in range(heads):
                s = slice(h * dk, (h + 1) * dk)
                lg = [float(Q[i][s] @ K[j][s]) / np.sqrt(dk) for j in range(len(K))]
                mx = max(lg)
                e = [np.exp(v - mx) for v in lg]
                for j in range(len(K)):
                    o[s] += e[j] / sum(e) * V[j][s]
            res.append(o @ p["o.w"] + p["o.b"])
        return np.array(res).reshape(q.shape)

    def tail(A, p):
        out = np.zeros_like(A)
        for y in range(H):
            for x in range(W):
                h = ln(list(A[0, y, x]), p["norm2.scale"], p["norm2.offset"])
                u = h @ p["mlp.w1"] + p["mlp.b1"]
                g = np.array([0.5 * v * (1 + erf(v / np.sqrt(2))) for v in u])
                out[0, y, x] = A[0, y, x] + g @ p["mlp.w2"] + p["mlp.b2"]
        return out

    pm = {k[2:]: v for k, v in w.tensors.items() if k.startswith("m.")}
    pf = {k[2:]: v for k, v in w.tensors.items() if k.startswith("f.")}
    fe_m = {k[3:]: v for k, v in pm.items() if k.startswith("fe.")}
    fe_f = {k[3:]: v for k, v in pf.items() if k.startswith("fe.")}
    at_m = {k[5:]: v for k, v in pm.items() if k.startswith("attn.")}
    at_f = {k[5:]: v for k, v in pf.items() if k.startswith("attn.")}
    Om, Of = fe(xm, fe_m), fe(xf, fe_f)
    return tail(attn(Om, Of, at_m) + Om, pm), tail(attn(Of, Om, at_f) + Of, pf)


def test_block_matches_straight_line_oracle(rng):
    C = 4
    cfg = FcaConfig(heads=2)
    w = init_weights(block_shapes(C, cfg), seed=11, scale=0.4)
    # non-trivial norm parameters and biases
    w = w.with_tensors({n: rng.normal(size=v.shape) * 0.3 + (1 if n.endswith("scale") else 0)
                        for n, v in w.tensors.items() if n.rsplit(".", 1)[-1] in
                        ("scale", "offset", "b", "b1", "b2")})
    xm, xf = rng.normal(size=(1, 2, 2, C)), rng.normal(size=(1, 2, 2, C))
    m, f = fca_block(TokenGrid(xm), TokenGrid(xf), cfg, w)
    om, of = _oracle_block(xm, xf, w, 2, cfg.norm_eps)
    assert np.max(np.abs(m.data - om)) <= 1e-12
    assert np.max(np.abs(f.data - of)) <= 1e-12


@given(st.tuples(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3)),
       st.sampled_from([(4, 2, 1.0), (6, 3, 1 / 3), (8, 4, 1.0)]), st.integers(0, 1000))
def test_block_shape_preserving(dims, chc, seed):
    C, h, a = chc
    cfg = FcaConfig(channel_coeff=a, heads=h)
    r = np.random.default_rng(seed)
    w = init_weights(block_shapes(C, cfg), seed=seed)
    w.audit()
    m, f = fca_block(TokenGrid(r.normal(size=(*dims, C))), TokenGrid(r.normal(size=(*dims, C))), cfg, w)
    assert m.data.shape == f.data.shape == (*dims, C)


def test_block_deterministic(rng):
    C = 4
    cfg = FcaConfig(heads=2)
    w = init_weights(block_shapes(C, cfg), seed=2)
    x, y = rng.normal(size=(2, 2, 2, C)), rng.normal(size=(2, 2, 2, C))
    a = fca_block(TokenGrid(x), TokenGrid(y), cfg, w)
    b = fca_block(TokenGrid(x), TokenGrid(y), cfg, w)
    assert np.array_equal(a[0].data, b[0].data) and np.array_equal(a[1].data, b[1].data)


# --- levels -------------------------------------------------------------------

def test_level_down_reference_shape():
    t = TokenGrid(np.zeros((4, 32, 32, 48)))
    d = level_down(t, init_weights(level_down_shapes(48)))
    assert d.data.shape == (2, 16, 16, 96) and d.level == 1
    with pytest.raises(ValueError, match="even"):
        level_down(TokenGrid(np.zeros((3, 2, 2, 4))), init_weights(level_down_shapes(4)))


def test_level_round_trip_pass_through(rng):
    C = 3
    x = rng.normal(size=(2, 4, 2, C))
    merge = np.zeros((8 * C, 2 * C))
    merge[:C, :C] = np.eye(C)  # keep the first voxel of each 2x2x2 cell
    down = level_down(TokenGrid(x), WeightSet({"merge.w": merge, "merge.b": np.zeros(2 * C)}))
    upw = {"expand.w": np.zeros((2 * C, C)), "expand.b": np.zeros(C),
           "fuse.w": np.vstack([np.zeros((C, C)), np.eye(C)]), "fuse.b": np.zeros(C)}
    up = level_up(down, TokenGrid(x), WeightSet(upw, level_up_shapes(C)))
    assert up.data.shape == x.shape and up.level == 0
    assert np.array_equal(up.data, x)
    with pytest.raises(ValueError, match="skip dims"):
        level_up(down, TokenGrid(np.zeros((2, 2, 2, C))), WeightSet(upw))


def test_level_chain():
    assert level_chain_shapes((4, 32, 32), 48, 3) == [(4, 32, 32, 48), (2, 16, 16, 96), (1, 8, 8, 192)]
    with pytest.raises(ValueError):
        level_chain_shapes((3, 4, 4), 8, 2)
