"""Convolutional teacher, patch-attention student and the two training-only
heads that map their last-stage features into a common space."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import (
    Conv2dLayer,
    LayerNorm,
    Linear,
    MhsaLayer,
    Module,
    TransformerBlock,
    _param,
    avg_pool2d,
    conv2d_forward,
    global_avg_pool,
    map_to_tokens,
    patch_merge,
    patch_partition,
    resize_bilinear,
)
from .tensor import ShapeError, Tensor, broadcast_to, concat, linear, relu, reshape, slice_axis


@dataclass
class FeatureBundle:
    """Logits at input resolution plus last-stage features of one network."""

    logits: Tensor
    features: Tensor


class TeacherNet(Module):
    """Four conv stages of two 3×3 convs each; the second and third stage
    open with a 2×2 average-pool downsampling.  A 1×1 segmentation head is
    upsampled bilinearly to input resolution."""

    def __init__(self, num_classes: int = 4, widths=(16, 32, 64, 64), in_ch: int = 3, seed: int = 0):
        if len(widths) != 4:
            raise ValueError(f"teacher needs 4 stage widths, got {widths}")
        rng = np.random.default_rng(seed)
        self.num_classes = num_classes
        self.widths = tuple(int(w) for w in widths)
        self.downsample = (False, True, True, False)
        stages = []
        prev = in_ch
        for w in self.widths:
            stages.append([Conv2dLayer(prev, w, 3, rng=rng), Conv2dLayer(w, w, 3, rng=rng)])
            prev = w
        self.stages = stages
        self.head = Conv2dLayer(prev, num_classes, 1, rng=rng)

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    def __call__(self, x: Tensor) -> FeatureBundle:
        return teacher_forward(self, x)


def teacher_forward(net: TeacherNet, x: Tensor) -> FeatureBundle:
    B, C, H, W = x.shape
    if H % 4 or W % 4:
        raise ShapeError(f"teacher input {(H, W)} must be divisible by 4")
    h = x
    for down, stage in zip(net.downsample, net.stages):
        if down:
            h = avg_pool2d(h, 2)
        for layer in stage:
            h = relu(conv2d_forward(layer, h))
    logits = resize_bilinear(conv2d_forward(net.head, h), (H, W))
    return FeatureBundle(logits, h)


class StudentNet(Module):
    """Patch embedding with learnable positions, pre-norm transformer blocks
    and a per-token linear decoder unfolded back to pixels."""

    def __init__(
        self,
        num_classes: int = 4,
        image_size: int = 32,
        patch_size: int = 4,
        dim: int = 64,
        depth: int = 4,
        num_heads: int = 4,
        mlp_ratio: int = 1,
        in_ch: int = 3,
        seed: int = 0,
    ):
        if image_size % patch_size:
            raise ValueError(f"image size {image_size} not divisible by patch size {patch_size}")
        rng = np.random.default_rng(seed)
        self.num_classes = num_classes
        self.patch_size = patch_size
        self.grid = (image_size // patch_size, image_size // patch_size)
        self.dim = dim
        self.embed = Linear(in_ch * patch_size * patch_size, dim, rng=rng)
        self.pos = _param(np.zeros((1, self.grid[0] * self.grid[1], dim)))
        self.blocks = [TransformerBlock(dim, num_heads, mlp_ratio, rng=rng) for _ in range(depth)]
        self.norm = LayerNorm(dim)
        self.decoder = Linear(dim, num_classes * patch_size * patch_size, rng=rng)

    @property
    def feature_dim(self) -> int:
        return self.dim

    def __call__(self, x: Tensor) -> FeatureBundle:
        return student_forward(self, x)


def student_forward(net: StudentNet, x: Tensor) -> FeatureBundle:
    B, C, H, W = x.shape
    p = net.patch_size
    if H % p or W % p:
        raise ShapeError(f"student input {(H, W)} must be divisible by patch size {p}")
    grid = (H // p, W // p)
    T = grid[0] * grid[1]
    tokens = net.embed(patch_partition(x, p))
    if net.pos.shape[1] != T:
        raise ShapeError(f"student positional table has {net.pos.shape[1]} slots, input gives {T} tokens")
    tokens = tokens + broadcast_to(net.pos, (B, T, net.dim))
    for block in net.blocks:
        tokens = block(tokens)
    per_token = net.decoder(net.norm(tokens))
    logits = patch_merge(per_token, net.num_classes, p, grid)
    return FeatureBundle(logits, tokens)


def predict(net, x: Tensor) -> np.ndarray:
    """Inference path: argmax over classes of the network's logits only."""
    return np.argmax(net(x).logits.data, axis=1)


class AttentionPoolHead(Module):
    """GAP token prepended to the spatial tokens, then one MHSA layer.
    Output token 0 is the global descriptor."""

    def __init__(self, in_dim: int, dim: int = 64, num_heads: int = 4, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.proj = Linear(in_dim, dim, rng=rng) if in_dim != dim else None
        self.attn = MhsaLayer(dim, num_heads, rng=rng)

    def __call__(self, F_C: Tensor):
        return attention_pool(self, F_C)


def attention_pool(head: AttentionPoolHead, F_C: Tensor) -> tuple[Tensor, Tensor]:
    if F_C.ndim != 4:
        raise ShapeError(f"attention_pool expects [B,D,h,w] features, got {F_C.shape}")
    tokens = map_to_tokens(F_C)
    B, T, Dc = tokens.shape
    gap = reshape(global_avg_pool(F_C), (B, 1, Dc))
    seq = concat([gap, tokens], axis=1)
    if head.proj is not None:
        seq = head.proj(seq)
    out = head.attn(seq)
    D = out.shape[-1]
    global_tok = reshape(slice_axis(out, 1, 0, 1), (B, D))
    return global_tok, slice_axis(out, 1, 1, T + 1)


class AlignHead(Module):
    """Linear map from student width to the common dimension."""

    def __init__(self, in_dim: int, dim: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.weight = _param(rng.uniform(-1, 1, (in_dim, dim)) / np.sqrt(in_dim))
        self.bias = _param(np.zeros(dim))

    def __call__(self, F_V: Tensor):
        return align_head(self, F_V)


def align_head(head: AlignHead, F_V: Tensor) -> tuple[Tensor, Tensor]:
    pooled = global_avg_pool(F_V)
    return linear(pooled, head.weight, head.bias), linear(F_V, head.weight, head.bias)
