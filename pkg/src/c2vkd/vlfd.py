"""Feature-space distillation losses: linguistic (global descriptor),
global-wise (spatial map) and patch-wise (affinity) terms.

Teacher-side inputs are treated as constants: they are detached before use,
so no gradient can reach teacher parameters through these losses.
"""

from __future__ import annotations

import numpy as np

from .nn import avg_pool2d, patch_partition, resize_bilinear, tokens_to_map
from .tensor import (
    ShapeError,
    Tensor,
    _record,
    kl_div,
    matmul,
    mean,
    reshape,
    softmax,
    sub,
    transpose,
)


def _const(t: Tensor) -> Tensor:
    return t.detach() if isinstance(t, Tensor) else Tensor(t)


def linguistic_loss(gv: Tensor, gc: Tensor) -> Tensor:
    """Per-sample KL between the softmax-normalized global descriptors
    (student first), divided by the descriptor width and batch-averaged."""
    gc = _const(gc)
    if gv.shape != gc.shape:
        raise ShapeError(f"linguistic_loss: student {gv.shape} vs teacher {gc.shape}")
    D = gv.shape[-1]
    return kl_div(softmax(gv, -1), softmax(gc, -1), validate=False) * (1.0 / D)


def reverse_map(F_V: Tensor, grid: tuple[int, int] | None = None) -> Tensor:
    """Rebuild student tokens [B,T,D] into a [B,D,h,w] map, token t at
    raster cell (t div w, t mod w)."""
    if grid is None:
        side = int(round(np.sqrt(F_V.shape[1])))
        grid = (side, side)
    return tokens_to_map(F_V, grid)


def _reduce_to(m: Tensor, size: tuple[int, int]) -> Tensor:
    h, w = m.shape[-2:]
    if (h, w) == size:
        return m
    if h % size[0] == 0 and w % size[1] == 0 and h // size[0] == w // size[1]:
        return avg_pool2d(m, h // size[0])
    return resize_bilinear(m, size)


def global_loss(F_V: Tensor, F_C: Tensor, grid: tuple[int, int] | None = None) -> Tensor:
    """KL(student || teacher) between channel-averaged feature maps, each
    softmax-normalized over spatial positions on the coarser grid."""
    F_C = _const(F_C)
    sv = mean(reverse_map(F_V, grid), axis=1)
    sc = mean(F_C, axis=1)
    if 0 in sv.shape or 0 in sc.shape:
        raise ShapeError(f"global_loss: zero-sized map {sv.shape} / {sc.shape}")
    hv, wv = sv.shape[-2:]
    hc, wc = sc.shape[-2:]
    size = (min(hv, hc), min(wv, wc))
    sv, sc = _reduce_to(sv, size), _reduce_to(sc, size)
    B = sv.shape[0]
    n = size[0] * size[1]
    pv = softmax(reshape(sv, (B, n)), -1)
    pc = softmax(reshape(sc, (B, n)), -1)
    return kl_div(pv, pc, validate=False)


def _row_normalize(F: Tensor) -> Tensor:
    """L2-normalize the last axis; all-zero rows stay zero."""
    x = F.data
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    nz = norm > 0
    safe = np.where(nz, norm, 1.0)
    out = np.where(nz, x / safe, 0.0)

    def rule(g):
        radial = (g * out).sum(axis=-1, keepdims=True)
        return (np.where(nz, (g - out * radial) / safe, 0.0),)

    return _record(out, (F,), rule)


def patch_affinity(F: Tensor) -> Tensor:
    """Cosine affinity [B,T,T] between the token rows of ``F`` [B,T,Z]."""
    if F.ndim == 2:
        F = reshape(F, (1,) + F.shape)
    if F.shape[1] < 1:
        raise ShapeError("patch_affinity: need at least one token")
    N = _row_normalize(F)
    return matmul(N, transpose(N, (0, 2, 1)))


def teacher_patches(F_C: Tensor, grid: tuple[int, int]) -> Tensor:
    """Split teacher features [B,D,h,w] with the student's partition so that
    token t covers the same image region as student token t."""
    _, _, h, w = F_C.shape
    if h % grid[0] or w % grid[1] or h // grid[0] != w // grid[1]:
        raise ShapeError(f"teacher feature grid {(h, w)} cannot be split into student grid {grid}")
    return patch_partition(F_C, h // grid[0])


def patch_loss(M_C: Tensor, M_V: Tensor) -> Tensor:
    """Mean squared difference over all batch × T × T affinity entries."""
    if M_C.shape != M_V.shape:
        raise ShapeError(f"patch_loss: affinity shapes {M_C.shape} and {M_V.shape} differ")
    d = sub(M_V, M_C)
    return mean(d * d)


def patch_wise_loss(F_V: Tensor, F_C: Tensor, grid: tuple[int, int]) -> Tensor:
    """Affinity MSE between student tokens and the teacher's partitioned map."""
    M_C = patch_affinity(teacher_patches(_const(F_C), grid))
    return patch_loss(M_C, patch_affinity(F_V))
