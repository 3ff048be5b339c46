"""Synthetic shape-segmentation data, augmentation, batching, and the binary
tensor container used for datasets and checkpoints.

Container layout (all integers little-endian)::

    b"C2VT" | version u32 | count u32 |
    per entry: name_len u16 | name utf-8 | rank u8 | extents u32 * rank |
               payload float64 * prod(extents), row-major
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"C2VT"
VERSION = 1
META_KEY = "__meta__"

# one shape family per foreground class, cycled when K > 6
SHAPES = ("rect", "circle", "stripe", "ring", "cross")


class ContainerError(Exception):
    """Base class for malformed tensor containers."""


class BadMagicError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class DuplicateNameError(ContainerError):
    pass


class UnsupportedVersionError(ContainerError):
    pass


@dataclass
class SynthSample:
    image: np.ndarray  # [3,H,W] float64 in [0,1]
    label: np.ndarray  # [H,W] int64


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def class_color(k: int) -> np.ndarray:
    """Mean RGB of class ``k``.  Foreground hues are spread around a circle
    of modest saturation; the background sits at mid grey."""
    if k == 0:
        return np.array([0.5, 0.5, 0.5])
    angle = 2 * math.pi * (k - 1) / 5.0
    return 0.5 + 0.22 * np.array([math.cos(angle), math.cos(angle - 2.094), math.cos(angle + 2.094)])


def _shape_mask(kind: str, rng: np.random.Generator, H: int, W: int) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W]
    s = min(H, W)
    if kind == "rect":
        h = rng.integers(s // 5, s // 2 + 1)
        w = rng.integers(s // 5, s // 2 + 1)
        y0 = rng.integers(0, H - h + 1)
        x0 = rng.integers(0, W - w + 1)
        return (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
    if kind == "circle":
        r = rng.uniform(s * 0.14, s * 0.3)
        cy, cx = rng.uniform(r, H - r), rng.uniform(r, W - r)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "stripe":
        theta = rng.uniform(0, math.pi)
        cy, cx = rng.uniform(H * 0.25, H * 0.75), rng.uniform(W * 0.25, W * 0.75)
        half = rng.uniform(s * 0.08, s * 0.14)
        dist = (xx - cx) * math.sin(theta) - (yy - cy) * math.cos(theta)
        return np.abs(dist) <= half
    if kind == "ring":
        r = rng.uniform(s * 0.18, s * 0.3)
        t = rng.uniform(s * 0.08, s * 0.12)
        cy, cx = rng.uniform(r, H - r), rng.uniform(r, W - r)
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        return (d <= r) & (d >= r - t)
    if kind == "cross":
        arm = rng.integers(s // 4, s // 2)
        t = max(2, s // 10)
        cy, cx = rng.integers(arm, H - arm + 1), rng.integers(arm, W - arm + 1)
        vert = (np.abs(xx - cx) < t / 2 + 0.5) & (np.abs(yy - cy) <= arm)
        horz = (np.abs(yy - cy) < t / 2 + 0.5) & (np.abs(xx - cx) <= arm)
        return vert | horz
    raise ValueError(f"unknown shape family {kind!r}")


def generate_sample(seed: int, index: int, H: int, W: int, K: int) -> SynthSample:
    rng = np.random.default_rng([seed, index])
    yy, xx = np.mgrid[0:H, 0:W]
    # background texture: a random low-frequency plaid
    fy, fx = rng.uniform(0.1, 0.6, size=2)
    py, px = rng.uniform(0, 2 * math.pi, size=2)
    texture = 0.08 * (np.sin(fy * yy + py) + np.sin(fx * xx + px))
    image = class_color(0)[:, None, None] + texture[None]
    label = np.zeros((H, W), dtype=np.int64)

    present = rng.random(K - 1) < 0.75
    if not present.any():
        present[rng.integers(0, K - 1)] = True
    order = rng.permutation(np.arange(1, K))
    for k in order:
        if not present[k - 1]:
            continue
        mask = _shape_mask(SHAPES[(k - 1) % len(SHAPES)], rng, H, W)
        if not mask.any():
            continue
        jitter = rng.normal(0.0, 0.04, size=3)
        color = class_color(k) + jitter
        image[:, mask] = color[:, None]
        label[mask] = k
    image = image + rng.normal(0.0, 0.1, size=image.shape)
    return SynthSample(np.clip(image, 0.0, 1.0), label)


def generate_dataset(seed: int, n: int, H: int = 32, W: int = 32, K: int = 4) -> list[SynthSample]:
    """``n`` samples; sample ``i`` draws from its own stream keyed by
    (seed, i), so any subset can be regenerated independently."""
    if K < 2:
        raise ValueError(f"need at least 2 classes, got K={K}")
    if H % 4 or W % 4:
        raise ValueError(f"image size {(H, W)} must be divisible by 4")
    return [generate_sample(seed, i, H, W, K) for i in range(n)]


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def _resize_image(img: np.ndarray, H: int, W: int) -> np.ndarray:
    from .nn import _bilinear_matrix

    Ah = _bilinear_matrix(H, img.shape[-2])
    Aw = _bilinear_matrix(W, img.shape[-1])
    return Ah @ img @ Aw.T


def _resize_label(lbl: np.ndarray, H: int, W: int) -> np.ndarray:
    h, w = lbl.shape
    ri = np.minimum(((np.arange(H) + 0.5) * h / H).astype(np.int64), h - 1)
    ci = np.minimum(((np.arange(W) + 0.5) * w / W).astype(np.int64), w - 1)
    return lbl[ri][:, ci]


def flip(s: SynthSample) -> SynthSample:
    return SynthSample(s.image[:, :, ::-1].copy(), s.label[:, ::-1].copy())


def augment(s: SynthSample, rng: np.random.Generator, crop: int | None = None, force_flip: bool | None = None) -> SynthSample:
    """Random horizontal flip (p=0.5) and random square crop resized back to
    the input size.  Image and label always share the same window."""
    _, H, W = s.image.shape
    do_flip = rng.random() < 0.5 if force_flip is None else force_flip
    if do_flip:
        s = flip(s)
    crop = min(H, W) if crop is None else crop
    if crop > min(H, W) or crop < 1:
        raise ValueError(f"crop size {crop} outside 1..{min(H, W)}")
    y0 = int(rng.integers(0, H - crop + 1))
    x0 = int(rng.integers(0, W - crop + 1))
    if crop == H and crop == W:
        return s
    img = s.image[:, y0 : y0 + crop, x0 : x0 + crop]
    lbl = s.label[y0 : y0 + crop, x0 : x0 + crop]
    return SynthSample(_resize_image(img, H, W), _resize_label(lbl, H, W))


def stack(samples: list[SynthSample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.stack([s.label for s in samples])


def batch_stream(data: list[SynthSample], batch_size: int, seed: int, crop: int | None = None, augment_data: bool = True):
    """Endless reshuffled batches.  Epoch ``e`` uses permutation stream
    (seed, e); the augmentation of draw ``j`` uses stream (seed, e, j)."""
    epoch = 0
    while True:
        perm = np.random.default_rng([seed, epoch]).permutation(len(data))
        for start in range(0, len(perm) - batch_size + 1, batch_size):
            idx = perm[start : start + batch_size]
            if augment_data:
                batch = [augment(data[i], np.random.default_rng([seed, epoch, start + j]), crop) for j, i in enumerate(idx)]
            else:
                batch = [data[i] for i in idx]
            yield stack(batch)
        epoch += 1


# ---------------------------------------------------------------------------
# tensor container
# ---------------------------------------------------------------------------


def encode_container(entries: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ContainerError(f"entry name too long ({len(raw)} bytes)")
        if arr.ndim > 0xFF:
            raise ContainerError(f"rank {arr.ndim} too large")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_container(buf: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedError(f"file ends inside {what} (need {n} bytes at offset {pos}, have {len(buf) - pos})")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if len(buf) < 4 or buf[:4] != MAGIC:
        if len(buf) < 4 and MAGIC.startswith(buf):
            raise TruncatedError("file ends inside magic")
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    pos = 4
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise UnsupportedVersionError(f"container version {version} not supported")
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        (nlen,) = struct.unpack("<H", take(2, f"entry {i} name length"))
        try:
            name = take(nlen, f"entry {i} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ContainerError(f"entry {i} name is not valid UTF-8") from exc
        if name in out:
            raise DuplicateNameError(f"duplicate entry name {name!r}")
        (rank,) = struct.unpack("<B", take(1, f"entry {name!r} rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"entry {name!r} extents"))
        n = math.prod(shape)
        if math.prod(max(e, 1) for e in shape) > len(buf):
            raise TruncatedError(f"entry {name!r} extents {shape} exceed the file size")
        payload = take(8 * n, f"entry {name!r} payload")
        out[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(buf):
        raise ContainerError(f"{len(buf) - pos} trailing bytes after last entry")
    return out


def save_container(path, entries: dict[str, np.ndarray]) -> None:
    path = Path(path)
    data = encode_container(entries)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def load_container(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return decode_container(f.read())


def pack_meta(meta: dict) -> np.ndarray:
    raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float64)


def unpack_meta(arr: np.ndarray) -> dict:
    return json.loads(bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8"))


def save_dataset(path, samples: list[SynthSample]) -> None:
    entries = {}
    for i, s in enumerate(samples):
        entries[f"image_{i}"] = s.image
        entries[f"label_{i}"] = s.label.astype(np.float64)
    save_container(path, entries)


def load_dataset(path) -> list[SynthSample]:
    entries = load_container(path)
    n = sum(1 for k in entries if k.startswith("image_"))
    out = []
    for i in range(n):
        try:
            img, lbl = entries[f"image_{i}"], entries[f"label_{i}"]
        except KeyError as exc:
            raise ContainerError(f"dataset entry {exc.args[0]} missing") from exc
        out.append(SynthSample(img, lbl.astype(np.int64)))
    return out
