"""Patch embedding, fractional cross-attention blocks and their parameter accounting.

Everything here is a forward pass over ``numpy`` arrays.  Token grids use
layout ``(D, H, W, C)``; convolution kernels use ``(kz, ky, kx, C_in, C_out)``
and linear maps ``(C_in, C_out)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping

import numpy as np
from scipy.special import erf

from .dfrft import frft_axis, inv_log_magnitude_array, log_magnitude_array, plans_for
from .volume import Volume3D

__all__ = [
    "TokenGrid",
    "PatchEmbedConfig",
    "FcaConfig",
    "WeightSet",
    "ShapeAuditError",
    "BRANCHES",
    "branch_width",
    "branch_slices",
    "patch_embed_shapes",
    "feature_extractor_shapes",
    "attention_shapes",
    "block_shapes",
    "level_down_shapes",
    "level_up_shapes",
    "init_weights",
    "patch_embed",
    "frft_feature_extract",
    "cross_attention",
    "fca_block",
    "level_down",
    "level_up",
    "level_chain_shapes",
    "symmetric_block_weights",
    "branch_kernel_names",
    "count_branch_params",
    "count_flops",
    "layer_norm",
    "conv3d",
]

# (name, fractional order, kernel size attribute); order 1 is the 90 degree transform
BRANCHES = (("frft0", 0.0), ("frft45", 0.5), ("frft90", 1.0), ("logmag", 1.0))
_TABLE_FACTORS = {"frft0": 27, "frft45": 4, "frft90": 4, "logmag": 1}


class ShapeAuditError(ValueError):
    pass


@dataclass(frozen=True)
class TokenGrid:
    data: np.ndarray
    level: int = 0

    def __post_init__(self):
        a = np.array(self.data, dtype=np.float64, copy=True)
        if a.ndim != 4:
            raise ValueError(f"token grid must be (D, H, W, C), got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("token grid contains non-finite values")
        a.flags.writeable = False
        object.__setattr__(self, "data", a)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[:3]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    @property
    def n_tokens(self) -> int:
        d, h, w = self.dims
        return d * h * w


@dataclass(frozen=True)
class PatchEmbedConfig:
    patch: tuple[int, int, int] = (4, 4, 4)
    embed_dim: int = 48
    bias: bool = False


@dataclass(frozen=True)
class FcaConfig:
    channel_coeff: float = 1.0
    heads: int = 4
    levels: int = 3
    blocks_per_level: tuple[int, ...] = (2, 2, 2)
    spatial_kernel: int = 3
    spectral_kernel: int = 1
    mlp_ratio: int = 4
    norm_eps: float = 1e-5

    def __post_init__(self):
        if not 0 < self.channel_coeff <= 1:
            raise ValueError(f"channel_coeff must be in (0, 1], got {self.channel_coeff}")
        if self.heads < 1:
            raise ValueError("heads must be >= 1")
        if len(self.blocks_per_level) != self.levels:
            raise ValueError("blocks_per_level needs one entry per level")


# --- channel bookkeeping -----------------------------------------------------

def _alpha(alpha) -> Fraction:
    return Fraction(alpha).limit_denominator(10_000)


def branch_width(C: int, alpha) -> int:
    """Channels per branch, ``alpha * C``; must be a positive integer."""
    m = _alpha(alpha) * int(C)
    if m.denominator != 1 or m <= 0:
        raise ValueError(f"alpha*C = {m} is not a positive integer (C={C}, alpha={alpha})")
    return int(m)


def branch_slices(C: int, alpha) -> dict[str, np.ndarray]:
    """Input channel indices per branch.

    The 0/45/90 degree branches take consecutive runs of ``alpha*C`` channels
    starting at ``b*alpha*C`` (wrapping modulo C), so ``alpha = 1/3`` is an
    exact partition and ``alpha = 1`` gives every branch all channels.  The
    log-magnitude branch reads the magnitude of the 90 degree transform and
    therefore shares its channels.
    """
    m = branch_width(C, alpha)
    out = {}
    for b, name in enumerate(("frft0", "frft45", "frft90")):
        out[name] = (b * m + np.arange(m)) % C
    out["logmag"] = out["frft90"]
    return out


# --- weights -----------------------------------------------------------------

@dataclass(frozen=True)
class WeightSet:
    """Named parameter tensors with a shape audit."""

    tensors: Mapping[str, np.ndarray]
    expected: Mapping[str, tuple] = field(default_factory=dict)

    def __post_init__(self):
        frozen = {}
        for k, v in self.tensors.items():
            a = np.array(v, dtype=np.float64, copy=True)
            a.flags.writeable = False
            frozen[k] = a
        object.__setattr__(self, "tensors", frozen)
        object.__setattr__(self, "expected", {k: tuple(s) for k, s in self.expected.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def sub(self, prefix: str) -> "WeightSet":
        p = prefix.rstrip(".") + "."
        return WeightSet(
            {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)},
            {k[len(p):]: s for k, s in self.expected.items() if k.startswith(p)},
        )

    def with_tensors(self, updates: Mapping[str, np.ndarray]) -> "WeightSet":
        t = dict(self.tensors)
        t.update(updates)
        return WeightSet(t, self.expected)

    def audit(self) -> list[tuple[str, tuple, tuple, bool]]:
        """Rows ``(name, actual, expected, ok)``; raises if anything is off."""
        rows = []
        names = sorted(set(self.tensors) | set(self.expected))
        for n in names:
            act = tuple(self.tensors[n].shape) if n in self.tensors else None
            exp = self.expected.get(n)
            rows.append((n, act, exp, act is not None and act == exp))
        bad = [r for r in rows if not r[3]]
        if bad:
            raise ShapeAuditError(
                "shape audit failed: " + ", ".join(f"{n} {a} != {e}" for n, a, e, _ in bad)
            )
        return rows

    def count(self, names: Iterable[str] | None = None) -> int:
        keys = self.tensors if names is None else names
        return int(sum(self.tensors[k].size for k in keys))


def _prefixed(prefix: str, shapes: Mapping[str, tuple]) -> dict[str, tuple]:
    return {f"{prefix}.{k}": v for k, v in shapes.items()}


def patch_embed_shapes(cfg: PatchEmbedConfig) -> dict[str, tuple]:
    pz, py, px = cfg.patch
    shapes = {"E": (pz * py * px, cfg.embed_dim)}
    if cfg.bias:
        shapes["b"] = (cfg.embed_dim,)
    return shapes


def feature_extractor_shapes(C: int, cfg: FcaConfig) -> dict[str, tuple]:
    m = branch_width(C, cfg.channel_coeff)
    k, s = cfg.spatial_kernel, cfg.spectral_kernel
    shapes = {
        "norm_in.scale": (C,), "norm_in.offset": (C,),
        "frft0.w": (k, k, k, m, m), "frft0.b": (m,),
        "frft45.w": (s, s, s, 2 * m, 2 * m), "frft45.b": (2 * m,),
        "frft90.w": (s, s, s, 2 * m, 2 * m), "frft90.b": (2 * m,),
        "logmag.w": (s, s, s, m, m), "logmag.b": (m,),
        "fuse.w": (4 * m + C, C), "fuse.b": (C,),
    }
    for name, _ in BRANCHES:
        shapes[f"norm_{name}.scale"] = (m,)
        shapes[f"norm_{name}.offset"] = (m,)
    return shapes


def attention_shapes(C: int) -> dict[str, tuple]:
    return {
        "q.w": (C, C), "q.b": (C,), "k.w": (C, C), "k.b": (C,),
        "v.w": (C, C), "v.b": (C,), "o.w": (C, C), "o.b": (C,),
    }


def block_shapes(C: int, cfg: FcaConfig) -> dict[str, tuple]:
    if C % cfg.heads:
        raise ValueError(f"C={C} is not divisible by heads={cfg.heads}")
    hid = cfg.mlp_ratio * C
    shapes: dict[str, tuple] = {}
    for s in ("m", "f"):
        shapes.update(_prefixed(f"{s}.fe", feature_extractor_shapes(C, cfg)))
        shapes.update(_prefixed(f"{s}.attn", attention_shapes(C)))
        shapes.update({
            f"{s}.norm2.scale": (C,), f"{s}.norm2.offset": (C,),
            f"{s}.mlp.w1": (C, hid), f"{s}.mlp.b1": (hid,),
            f"{s}.mlp.w2": (hid, C), f"{s}.mlp.b2": (C,),
        })
    return shapes


def level_down_shapes(C: int) -> dict[str, tuple]:
    return {"merge.w": (8 * C, 2 * C), "merge.b": (2 * C,)}


def level_up_shapes(C: int) -> dict[str, tuple]:
    """Weights for going from level ``l+1`` (``2C`` channels) back to level ``l`` (``C``)."""
    return {"expand.w": (2 * C, C), "expand.b": (C,), "fuse.w": (2 * C, C), "fuse.b": (C,)}


def init_weights(shapes: Mapping[str, tuple], seed: int = 0, scale: float = 0.02) -> WeightSet:
    """Seeded uniform ``[-scale, scale]`` kernels; norm scales 1, biases and offsets 0."""
    rng = np.random.default_rng(seed)
    t = {}
    for name in sorted(shapes):
        shp = shapes[name]
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "scale":
            t[name] = np.ones(shp)
        elif leaf in ("offset",) or leaf.startswith("b"):
            t[name] = np.zeros(shp)
        else:
            t[name] = rng.uniform(-scale, scale, size=shp)
    return WeightSet(t, shapes)


def symmetric_block_weights(C: int, cfg: FcaConfig, seed: int = 0) -> WeightSet:
    """Block weights with identical moving and fixed stream parameters."""
    w = init_weights(block_shapes(C, cfg), seed)
    t = dict(w.tensors)
    for k in list(t):
        if k.startswith("f."):
            t[k] = t["m." + k[2:]]
    return WeightSet(t, w.expected)


# --- primitives --------------------------------------------------------------

def layer_norm(x: np.ndarray, scale: np.ndarray, offset: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * scale + offset


def conv3d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Zero-padded 'same' cross-correlation of a ``(D, H, W, C_in)`` grid."""
    kz, ky, kx, cin, cout = w.shape
    if x.shape[-1] != cin:
        raise ValueError(f"conv expects {cin} input channels, got {x.shape[-1]}")
    D, H, W = x.shape[:3]
    pz, py, px = kz // 2, ky // 2, kx // 2
    xp = np.pad(x, ((pz, pz), (py, py), (px, px), (0, 0)))
    out = np.zeros((D, H, W, cout))
    for dz in range(kz):
        for dy in range(ky):
            for dx in range(kx):
                out += xp[dz:dz + D, dy:dy + H, dx:dx + W] @ w[dz, dy, dx]
    if b is not None:
        out += b
    return out


def _relu(x):
    return np.maximum(x, 0.0)


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def _frft_spatial(x: np.ndarray, p: float, plans) -> np.ndarray:
    """Separable transform over the three spatial axes of a ``(D, H, W, C)`` array."""
    out = x
    for ax in (2, 1, 0):
        out = frft_axis(out, p, ax, plans[ax])
    return out


def _ifrft_spatial(X: np.ndarray, p: float, plans) -> np.ndarray:
    out = X
    for ax in (0, 1, 2):
        out = frft_axis(out, -p, ax, plans[ax])
    return out


# --- operations --------------------------------------------------------------

def patch_embed(v: Volume3D | np.ndarray, cfg: PatchEmbedConfig, w: WeightSet) -> TokenGrid:
    data = v.data if isinstance(v, Volume3D) else np.asarray(v, dtype=np.float64)
    D, H, W = data.shape
    pz, py, px = cfg.patch
    if D % pz or H % py or W % px:
        raise ValueError(f"volume dims {(D, H, W)} not divisible by patch {cfg.patch}")
    E = w["E"]
    if E.shape != (pz * py * px, cfg.embed_dim):
        raise ShapeAuditError(f"E has shape {E.shape}, expected {(pz * py * px, cfg.embed_dim)}")
    blocks = data.reshape(D // pz, pz, H // py, py, W // px, px)
    blocks = blocks.transpose(0, 2, 4, 1, 3, 5).reshape(D // pz, H // py, W // px, pz * py * px)
    tokens = blocks @ E
    if cfg.bias:
        tokens = tokens + w["b"]
    return TokenGrid(tokens, level=0)


def frft_feature_extract(t: TokenGrid, cfg: FcaConfig, w: WeightSet, plans=None,
                         return_branches: bool = False):
    """Four-branch fractional Fourier feature extractor with skip connection.

    Returns a grid with the input's shape; with ``return_branches=True`` also a
    dict of the raw (pre-normalization) branch outputs.
    """
    x = t.data
    C = x.shape[-1]
    m = branch_width(C, cfg.channel_coeff)
    if plans is None:
        plans = plans_for(x.shape[:3])
    eps = cfg.norm_eps
    xn = layer_norm(x, w["norm_in.scale"], w["norm_in.offset"], eps)
    sl = branch_slices(C, cfg.channel_coeff)

    branches: dict[str, np.ndarray] = {}
    branches["frft0"] = _relu(conv3d(xn[..., sl["frft0"]], w["frft0.w"], w["frft0.b"]))

    for name, p in (("frft45", 0.5), ("frft90", 1.0)):
        X = _frft_spatial(xn[..., sl[name]], p, plans)
        z = _relu(conv3d(np.concatenate([X.real, X.imag], axis=-1), w[f"{name}.w"], w[f"{name}.b"]))
        Y = _ifrft_spatial(z[..., :m] + 1j * z[..., m:], p, plans)
        branches[name] = Y.real

    X = _frft_spatial(xn[..., sl["logmag"]], 1.0, plans)
    A, phase = log_magnitude_array(X)
    a2 = _relu(conv3d(A, w["logmag.w"], w["logmag.b"]))
    Xr = inv_log_magnitude_array(a2, phase)
    branches["logmag"] = _ifrft_spatial(Xr, 1.0, plans).real

    parts = [layer_norm(branches[n], w[f"norm_{n}.scale"], w[f"norm_{n}.offset"], eps)
             for n, _ in BRANCHES]
    parts.append(xn)
    fused = np.concatenate(parts, axis=-1) @ w["fuse.w"] + w["fuse.b"]
    out = TokenGrid(fused, t.level)
    if return_branches:
        return out, branches
    return out


def cross_attention(q_src: TokenGrid, kv_src: TokenGrid, w: WeightSet, heads: int,
                    return_weights: bool = False):
    """Multi-head attention with queries from ``q_src`` and keys/values from ``kv_src``."""
    if q_src.data.shape != kv_src.data.shape:
        raise ValueError(f"shape mismatch: {q_src.data.shape} vs {kv_src.data.shape}")
    C = q_src.channels
    if C % heads:
        raise ValueError(f"C={C} is not divisible by heads={heads}")
    dk = C // heads
    N = q_src.n_tokens
    xq = q_src.data.reshape(N, C)
    xkv = kv_src.data.reshape(N, C)
    Q = (xq @ w["q.w"] + w["q.b"]).reshape(N, heads, dk).transpose(1, 0, 2)
    K = (xkv @ w["k.w"] + w["k.b"]).reshape(N, heads, dk).transpose(1, 0, 2)
    V = (xkv @ w["v.w"] + w["v.b"]).reshape(N, heads, dk).transpose(1, 0, 2)
    logits = Q @ K.transpose(0, 2, 1) / np.sqrt(dk)
    logits -= logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    attn = e / e.sum(axis=-1, keepdims=True)
    out = (attn @ V).transpose(1, 0, 2).reshape(N, C)
    out = out @ w["o.w"] + w["o.b"]
    grid = TokenGrid(out.reshape(q_src.data.shape), q_src.level)
    if return_weights:
        return grid, attn
    return grid


def _stream_tail(A: np.ndarray, w: WeightSet, eps: float) -> np.ndarray:
    h = layer_norm(A, w["norm2.scale"], w["norm2.offset"], eps)
    h = _gelu(h @ w["mlp.w1"] + w["mlp.b1"]) @ w["mlp.w2"] + w["mlp.b2"]
    return A + h


def fca_block(F_m: TokenGrid, F_f: TokenGrid, cfg: FcaConfig, w: WeightSet, plans=None
              ) -> tuple[TokenGrid, TokenGrid]:
    """One fractional cross-attention block over the moving and fixed streams."""
    if F_m.data.shape != F_f.data.shape:
        raise ValueError(f"stream shapes differ: {F_m.data.shape} vs {F_f.data.shape}")
    if plans is None:
        plans = plans_for(F_m.dims)
    wm, wf = w.sub("m"), w.sub("f")
    O_m = frft_feature_extract(F_m, cfg, wm.sub("fe"), plans)
    O_f = frft_feature_extract(F_f, cfg, wf.sub("fe"), plans)
    A_m = cross_attention(O_m, O_f, wm.sub("attn"), cfg.heads).data + O_m.data
    A_f = cross_attention(O_f, O_m, wf.sub("attn"), cfg.heads).data + O_f.data
    return (TokenGrid(_stream_tail(A_m, wm, cfg.norm_eps), F_m.level),
            TokenGrid(_stream_tail(A_f, wf, cfg.norm_eps), F_f.level))


def level_down(t: TokenGrid, w: WeightSet) -> TokenGrid:
    """Merge 2x2x2 neighbourhoods: dims halve, channels double."""
    D, H, W, C = t.data.shape
    if D % 2 or H % 2 or W % 2:
        raise ValueError(f"level_down needs even dims, got {(D, H, W)}")
    x = t.data.reshape(D // 2, 2, H // 2, 2, W // 2, 2, C)
    x = x.transpose(0, 2, 4, 1, 3, 5, 6).reshape(D // 2, H // 2, W // 2, 8 * C)
    return TokenGrid(x @ w["merge.w"] + w["merge.b"], t.level + 1)


def level_up(t: TokenGrid, skip: TokenGrid, w: WeightSet) -> TokenGrid:
    """Double dims, project to the skip's channel count, concatenate, fuse back to it."""
    D, H, W, _ = t.data.shape
    if skip.dims != (2 * D, 2 * H, 2 * W):
        raise ValueError(f"skip dims {skip.dims} do not match upsampled {(2 * D, 2 * H, 2 * W)}")
    up = t.data.repeat(2, axis=0).repeat(2, axis=1).repeat(2, axis=2)
    up = up @ w["expand.w"] + w["expand.b"]
    cat = np.concatenate([up, skip.data], axis=-1)
    return TokenGrid(cat @ w["fuse.w"] + w["fuse.b"], skip.level)


def level_chain_shapes(dims, channels: int, levels: int) -> list[tuple[int, int, int, int]]:
    """Encoder shapes ``(D_l, H_l, W_l, C_l)`` for ``l = 0..levels-1``."""
    D, H, W = dims
    out = []
    C = channels
    for lv in range(levels):
        out.append((D, H, W, C))
        if lv < levels - 1:
            if D % 2 or H % 2 or W % 2:
                raise ValueError(f"level {lv} dims {(D, H, W)} cannot be halved")
            D, H, W, C = D // 2, H // 2, W // 2, 2 * C
    return out


# --- accounting --------------------------------------------------------------

def count_branch_params(C: int, alpha, strict: bool = True) -> dict[str, int | Fraction]:
    """Convolution-kernel parameter counts per branch (biases excluded).

    With ``strict=False`` a non-integral ``alpha*C`` is allowed and the
    formula values come back as exact fractions.
    """
    a = _alpha(alpha)
    if strict:
        m = branch_width(C, a)
        counts: dict = {k: f * m * m for k, f in _TABLE_FACTORS.items()}
    else:
        m2 = (a * int(C)) ** 2
        counts = {k: _as_int(f * m2) for k, f in _TABLE_FACTORS.items()}
    counts["total"] = _as_int(sum(Fraction(v) for v in counts.values()))
    return counts


def count_flops(C: int, alpha, D: int, H: int, W: int, strict: bool = True) -> dict:
    vox = int(D) * int(H) * int(W)
    return {k: _as_int(Fraction(v) * vox) for k, v in count_branch_params(C, alpha, strict).items()}


def _as_int(x):
    x = Fraction(x)
    return int(x) if x.denominator == 1 else x


def branch_kernel_names() -> list[str]:
    return [f"{n}.w" for n, _ in BRANCHES]
