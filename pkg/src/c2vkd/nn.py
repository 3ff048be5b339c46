"""Differentiable layers shared by the teacher and student networks."""

from __future__ import annotations

import functools
import math

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    _record,
    concat,
    gelu,
    layer_norm,
    linear,
    matmul,
    mean,
    relu,
    reshape,
    softmax,
    transpose,
)


class Module:
    """Parameter container.  Parameters are the ``Tensor`` attributes with
    ``requires_grad`` set, collected recursively through sub-modules and
    lists of sub-modules."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, (list, tuple)):
                        for j, sub in enumerate(item):
                            if isinstance(sub, Module):
                                yield from sub.named_parameters(f"{name}.{i}.{j}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        if missing:
            raise KeyError(f"missing parameters: {missing}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _param(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


def _init_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [B,C,H,W] with ``weight`` [O,C,kh,kw]."""
    B, C, H, W = x.shape
    O, Ci, kh, kw = weight.shape
    if C != Ci:
        raise ShapeError(f"conv2d: input has {C} channels, weight expects {Ci} (weight {weight.shape})")
    Hp, Wp = H + 2 * padding - kh, W + 2 * padding - kw
    if Hp < 0 or Wp < 0 or Hp % stride or Wp % stride:
        raise ShapeError(
            f"conv2d: spatial extent {(H, W)} with kernel {(kh, kw)}, pad {padding}, stride {stride} does not tile exactly"
        )
    Ho, Wo = Hp // stride + 1, Wp // stride + 1
    # channels-last columns [B, Ho, Wo, kh, kw, C]: each kernel offset is one
    # strided slice copy, cheaper than materialising a 6-d window view
    xp = x.data.transpose(0, 2, 3, 1)
    if padding:
        xp = np.pad(xp, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    cols = np.empty((B, Ho, Wo, kh, kw, C))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride, :]
    cols = cols.reshape(B * Ho * Wo, kh * kw * C)
    wk = weight.data.transpose(0, 2, 3, 1).reshape(O, -1)
    out = cols @ wk.T
    if bias is not None:
        out += bias.data
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def rule(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (g2.T @ cols).reshape(O, kh, kw, C).transpose(0, 3, 1, 2)
        gcols = (g2 @ wk).reshape(B, Ho, Wo, kh, kw, C)
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, padding : padding + H, padding : padding + W, :] if padding else gxp
        gx = gx.transpose(0, 3, 1, 2)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(np.ascontiguousarray(out), parents, rule)


class Conv2dLayer(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1, padding: int | None = None, rng=None):
        if kernel % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {kernel}")
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_ch * kernel * kernel
        self.weight = _param(_init_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in) * math.sqrt(3.0))
        self.bias = _param(np.zeros(out_ch))
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d_forward(self, x)


def conv2d_forward(layer: Conv2dLayer, x: Tensor) -> Tensor:
    return conv2d(x, layer.weight, layer.bias, layer.stride, layer.padding)


# ---------------------------------------------------------------------------
# dense layers
# ---------------------------------------------------------------------------


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = _param(_init_uniform(rng, (d_in, d_out), d_in))
        self.bias = _param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = _param(np.ones(dim))
        self.beta = _param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class MhsaLayer(Module):
    """Multi-head self-attention with square projections.  No positional
    information is injected here."""

    def __init__(self, dim: int, num_heads: int, rng=None):
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by num_heads {num_heads}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.w_q = _param(_init_uniform(rng, (dim, dim), dim))
        self.w_k = _param(_init_uniform(rng, (dim, dim), dim))
        self.w_v = _param(_init_uniform(rng, (dim, dim), dim))
        self.w_o = _param(_init_uniform(rng, (dim, dim), dim))

    def __call__(self, tokens: Tensor) -> Tensor:
        return mhsa_forward(self, tokens)


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    """Row-stochastic attention of ``q`` [..., T, d] over ``k`` [..., T, d]."""
    scores = matmul(q, transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))
    return softmax(scores * (1.0 / math.sqrt(q.shape[-1])), axis=-1)


def mhsa_forward(layer: MhsaLayer, tokens: Tensor) -> Tensor:
    if tokens.ndim != 3 or tokens.shape[-1] != layer.dim:
        raise ShapeError(f"mhsa: expected [B,T,{layer.dim}] tokens, got {tokens.shape}")
    B, T, D = tokens.shape
    h, hd = layer.num_heads, layer.head_dim

    def heads(w):
        return transpose(reshape(linear(tokens, w), (B, T, h, hd)), (0, 2, 1, 3))

    q, k, v = heads(layer.w_q), heads(layer.w_k), heads(layer.w_v)
    attn = attention_weights(q, k)
    mixed = transpose(matmul(attn, v), (0, 2, 1, 3))
    return linear(reshape(mixed, (B, T, D)), layer.w_o)


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng=None):
        self.fc1 = Linear(dim, hidden, rng=rng)
        self.fc2 = Linear(hidden, dim, rng=rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm encoder block."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: int = 2, rng=None):
        self.norm1 = LayerNorm(dim)
        self.attn = MhsaLayer(dim, num_heads, rng=rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, dim * mlp_ratio, rng=rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


# ---------------------------------------------------------------------------
# patches and pooling
# ---------------------------------------------------------------------------


def patch_partition(x: Tensor, p: int) -> Tensor:
    """[B,C,H,W] -> [B,T,C*p*p], raster-ordered non-overlapping patches, each
    flattened channel-major."""
    B, C, H, W = x.shape
    if H % p or W % p:
        raise ShapeError(f"patch_partition: {(H, W)} not divisible by patch size {p}")
    hp, wp = H // p, W // p
    y = reshape(x, (B, C, hp, p, wp, p))
    y = transpose(y, (0, 2, 4, 1, 3, 5))
    return reshape(y, (B, hp * wp, C * p * p))


def patch_merge(tokens: Tensor, channels: int, p: int, grid: tuple[int, int]) -> Tensor:
    """Exact inverse of ``patch_partition``."""
    B, T, Z = tokens.shape
    hp, wp = grid
    if T != hp * wp or Z != channels * p * p:
        raise ShapeError(f"patch_merge: tokens {tokens.shape} do not fit grid {grid} with C={channels}, p={p}")
    y = reshape(tokens, (B, hp, wp, channels, p, p))
    y = transpose(y, (0, 3, 1, 4, 2, 5))
    return reshape(y, (B, channels, hp * p, wp * p))


def tokens_to_map(tokens: Tensor, grid: tuple[int, int]) -> Tensor:
    """[B,T,D] -> [B,D,h,w]; token t lands at (t div w, t mod w)."""
    B, T, D = tokens.shape
    h, w = grid
    if T != h * w:
        raise ShapeError(f"tokens_to_map: {T} tokens do not fill grid {grid}")
    return reshape(transpose(tokens, (0, 2, 1)), (B, D, h, w))


def map_to_tokens(fmap: Tensor) -> Tensor:
    """[B,D,h,w] -> [B,h*w,D] in raster order."""
    B, D, h, w = fmap.shape
    return transpose(reshape(fmap, (B, D, h * w)), (0, 2, 1))


def global_avg_pool(F: Tensor) -> Tensor:
    """Mean over positions: [B,D,h,w] -> [B,D] or [B,T,D] -> [B,D]."""
    if F.ndim == 4:
        return mean(F, axis=(2, 3))
    if F.ndim == 3:
        return mean(F, axis=1)
    raise ShapeError(f"global_avg_pool: expected rank 3 or 4, got {F.shape}")


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k×k mean pooling over the last two axes."""
    *lead, H, W = x.shape
    if H % k or W % k:
        raise ShapeError(f"avg_pool2d: {(H, W)} not divisible by {k}")
    y = reshape(x, tuple(lead) + (H // k, k, W // k, k))
    n = len(lead)
    return mean(y, axis=(n + 1, n + 3))


@functools.lru_cache(maxsize=None)
def _bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Interpolation weights with half-pixel centers (align_corners=False)."""
    A = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        A[i, i0] += 1.0 - frac
        A[i, i1] += frac
    return A


def resize_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear resize of the last two axes of ``x``."""
    H, W = x.shape[-2:]
    Ho, Wo = size
    if min(H, W, Ho, Wo) <= 0:
        raise ShapeError(f"resize_bilinear: zero-sized map {(H, W)} -> {size}")
    Ah = _bilinear_matrix(Ho, H)
    Aw = _bilinear_matrix(Wo, W)
    out = Ah @ x.data @ Aw.T

    def rule(g):
        return (Ah.T @ g @ Aw,)

    return _record(out, (x,), rule)


def bias_add_channels(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias [C] to [B,C,H,W]."""
    if x.shape[1] != bias.shape[0]:
        raise ShapeError(f"bias_add_channels: {x.shape} vs bias {bias.shape}")
    b = bias.data[None, :, None, None]
    return _record(x.data + b, (x, bias), lambda g: (g, g.sum(axis=(0, 2, 3))))


__all__ = [
    "Module",
    "Conv2dLayer",
    "conv2d",
    "conv2d_forward",
    "Linear",
    "LayerNorm",
    "MhsaLayer",
    "mhsa_forward",
    "attention_weights",
    "Mlp",
    "TransformerBlock",
    "patch_partition",
    "patch_merge",
    "tokens_to_map",
    "map_to_tokens",
    "global_avg_pool",
    "avg_pool2d",
    "resize_bilinear",
    "relu",
    "concat",
]
