"""Seedable construction of pretext batches.

Every view goes through augment -> rotate -> corrupt. Images are float
arrays ``C×H×W`` in [0, 1]; all randomness comes from an explicit
``numpy.random.Generator``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import ContractError

CLEAN, DROPPED, REPLACED, BLURRED, GREYED = range(5)
MASK_LABELS = ("clean", "dropped", "replaced", "blurred", "greyed")

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class AugmentParams:
    crop_scale: tuple[float, float] = (0.6, 1.0)
    hflip_prob: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not (0 < lo <= hi <= 1):
            raise ValueError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        if not 0 <= self.hflip_prob <= 1:
            raise ValueError("hflip_prob must be in [0, 1]")
        if min(self.brightness, self.contrast, self.saturation) < 0:
            raise ValueError("jitter strengths must be >= 0")


IDENTITY_AUGMENT = AugmentParams(crop_scale=(1.0, 1.0), hflip_prob=0.0, brightness=0.0, contrast=0.0, saturation=0.0)


@dataclass(frozen=True)
class CorruptionParams:
    """Local and global corruption settings.

    Block extents are in patch units. Drop and replace are given as fractions
    of the patch grid; blur and grey as block counts.
    """

    patch_size: int = 4
    drop_fraction: tuple[float, float] = (0.1, 0.3)
    replace_fraction: tuple[float, float] = (0.05, 0.15)
    block_height: tuple[int, int] = (1, 4)
    block_width: tuple[int, int] = (1, 4)
    blur_blocks: tuple[int, int] = (1, 3)
    blur_sigma: float = 1.0
    blur_kernel: int = 5
    grey_blocks: tuple[int, int] = (1, 3)
    colour_strength: float = 0.4

    def __post_init__(self):
        for name in ("drop_fraction", "replace_fraction"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi <= 1:
                raise ValueError(f"{name} must satisfy 0 <= lo <= hi <= 1")
        for name in ("block_height", "block_width"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} must satisfy 1 <= lo <= hi")
        for name in ("blur_blocks", "grey_blocks"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ValueError(f"{name} must satisfy 0 <= lo <= hi")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ValueError("blur_kernel must be odd")
        if self.blur_sigma <= 0:
            raise ValueError("blur_sigma must be > 0")
        if self.colour_strength < 0:
            raise ValueError("colour_strength must be >= 0")


NO_CORRUPTION = CorruptionParams(
    drop_fraction=(0.0, 0.0),
    replace_fraction=(0.0, 0.0),
    blur_blocks=(0, 0),
    grey_blocks=(0, 0),
    colour_strength=0.0,
)


@dataclass
class PretextBatch:
    corrupted_views: np.ndarray  # 2N×C×H×W
    clean_targets: np.ndarray  # 2N×C×H×W
    rotation_labels: np.ndarray  # 2N, values in 0..3
    pair_index: np.ndarray  # 2N, view -> partner view
    source_index: np.ndarray  # 2N, view -> source image
    masks: np.ndarray  # 2N×T per-patch labels

    def __len__(self) -> int:
        return len(self.rotation_labels)


# -- colour helpers ------------------------------------------------------


def grey(image: np.ndarray) -> np.ndarray:
    """Luminance ``0.299 R + 0.587 G + 0.114 B`` broadcast to every channel."""
    if image.shape[0] != 3:
        return image.copy()
    y = np.tensordot(LUMA.astype(image.dtype), image, axes=1)
    return np.broadcast_to(y, image.shape).copy()


def adjust_brightness(img: np.ndarray, factor: float) -> np.ndarray:
    return img * factor


def adjust_contrast(img: np.ndarray, factor: float) -> np.ndarray:
    m = grey(img).mean()
    return m + factor * (img - m)


def adjust_saturation(img: np.ndarray, factor: float) -> np.ndarray:
    g = grey(img)
    return g + factor * (img - g)


def colour_jitter(img: np.ndarray, rng: np.random.Generator, brightness: float, contrast: float, saturation: float) -> np.ndarray:
    """Brightness, contrast, saturation in that order; each factor ~ U[1-s, 1+s]."""
    out = img
    if brightness > 0:
        out = adjust_brightness(out, rng.uniform(max(0.0, 1 - brightness), 1 + brightness))
    if contrast > 0:
        out = adjust_contrast(out, rng.uniform(max(0.0, 1 - contrast), 1 + contrast))
    if saturation > 0:
        out = adjust_saturation(out, rng.uniform(max(0.0, 1 - saturation), 1 + saturation))
    return out


# -- geometry ------------------------------------------------------------


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of a ``C×H×W`` array."""
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()

    def coords(n_in, n_out):
        x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        x = np.clip(x, 0, n_in - 1)
        lo = np.floor(x).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (x - lo)

    y0, y1, wy = coords(h, out_h)
    x0, x1, wx = coords(w, out_w)
    wy = wy.astype(img.dtype)[None, :, None]
    wx = wx.astype(img.dtype)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, :, ::-1].copy()


def rotate90(image: np.ndarray, k: int) -> np.ndarray:
    """Rotate a square ``C×H×W`` image by ``k`` quarter-turns counter-clockwise.

    With row 0 at the top, one quarter-turn maps ``out[r, c] = in[c, W-1-r]``.
    """
    if image.shape[-1] != image.shape[-2]:
        raise ContractError(f"rotate90 needs a square image, got {image.shape}")
    if k not in (0, 1, 2, 3):
        raise ContractError(f"k must be 0..3, got {k}")
    return np.ascontiguousarray(np.rot90(image, k, axes=(-2, -1)))


def augment_view(image: np.ndarray, params: AugmentParams, rng: np.random.Generator, out_size: int | None = None) -> np.ndarray:
    """Random square crop resized to ``out_size``, optional h-flip, colour jitter, clamp."""
    c, h, w = image.shape
    out_size = out_size or h
    scale = rng.uniform(*params.crop_scale)
    side = int(round(np.sqrt(scale * h * w)))
    side = min(side, h, w)
    if side < 1:
        side = min(h, w)
        top = left = 0
    else:
        top = int(rng.integers(0, h - side + 1))
        left = int(rng.integers(0, w - side + 1))
    if side == h == w:
        top = left = 0
    crop = image[:, top : top + side, left : left + side]
    out = resize_bilinear(crop, out_size, out_size)
    if rng.random() < params.hflip_prob:
        out = hflip(out)
    out = colour_jitter(out, rng, params.brightness, params.contrast, params.saturation)
    return np.clip(out, 0.0, 1.0).astype(image.dtype, copy=False)


# -- corruption ------------------------------------------------------------


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    if size % 2 == 0:
        raise ValueError("kernel size must be odd")
    x = np.arange(size) - size // 2
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float, size: int) -> np.ndarray:
    """Separable Gaussian filter with edge-replicated borders."""
    k = gaussian_kernel(size, sigma).astype(img.dtype)
    r = size // 2
    pad = np.pad(img, ((0, 0), (r, r), (r, r)), mode="edge")
    h, w = img.shape[1:]
    rows = sum(k[i] * pad[:, i : i + h, :] for i in range(size))
    return sum(k[i] * rows[:, :, i : i + w] for i in range(size))


def _fill_blocks(labels: np.ndarray, value: int, target: int, params: CorruptionParams, rng: np.random.Generator) -> None:
    """Label ``target`` clean patches with ``value``, growing rectangular blocks.

    Blocks are aligned to the patch grid and clipped to it. Only clean patches
    are relabelled, and the last block is truncated so the count is exact.
    """
    gh, gw = labels.shape
    remaining = min(target, int((labels == CLEAN).sum()))
    attempts = 0
    while remaining > 0 and attempts < 64 * gh * gw:
        attempts += 1
        bh = int(rng.integers(params.block_height[0], params.block_height[1] + 1))
        bw = int(rng.integers(params.block_width[0], params.block_width[1] + 1))
        bh, bw = min(bh, gh), min(bw, gw)
        r = int(rng.integers(0, gh - bh + 1))
        c = int(rng.integers(0, gw - bw + 1))
        block = labels[r : r + bh, c : c + bw]
        rows, cols = np.nonzero(block == CLEAN)
        rows, cols = rows[:remaining], cols[:remaining]
        if rows.size == 0:
            continue
        block[rows, cols] = value
        remaining -= rows.size
    if remaining > 0:
        # fragmented grid: finish with single free patches
        free = np.flatnonzero(labels.reshape(-1) == CLEAN)
        pick = rng.choice(free, size=remaining, replace=False)
        labels.reshape(-1)[pick] = value


def _block_count(labels: np.ndarray, value: int, count: int, params: CorruptionParams, rng: np.random.Generator) -> None:
    gh, gw = labels.shape
    for _ in range(count):
        bh = min(int(rng.integers(params.block_height[0], params.block_height[1] + 1)), gh)
        bw = min(int(rng.integers(params.block_width[0], params.block_width[1] + 1)), gw)
        r = int(rng.integers(0, gh - bh + 1))
        c = int(rng.integers(0, gw - bw + 1))
        block = labels[r : r + bh, c : c + bw]
        block[block == CLEAN] = value


def fraction_target(frac_range: tuple[float, float], n: int, rng: np.random.Generator) -> int:
    """Patch count for a fraction drawn from ``frac_range``, kept inside the range."""
    lo, hi = frac_range
    if hi == 0:
        return 0
    f = rng.uniform(lo, hi)
    k = int(round(f * n))
    kmin, kmax = int(np.ceil(lo * n - 1e-9)), int(np.floor(hi * n + 1e-9))
    if kmin <= kmax:
        k = min(max(k, kmin), kmax)
    return k


def corrupt(
    image: np.ndarray,
    params: CorruptionParams,
    rng: np.random.Generator,
    replacement_source: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Apply global colour distortion, then local drop / replace / blur / grey.

    Returns ``(corrupted, mask)`` where ``mask`` is a flat per-patch label
    array in row-major grid order. Each patch receives at most one local
    transform.
    """
    c, h, w = image.shape
    p = params.patch_size
    if h % p or w % p:
        raise ContractError(f"image {h}x{w} not divisible by patch size {p}")
    if replacement_source is not None and replacement_source.shape != image.shape:
        raise ContractError("replacement_source must match image shape")
    gh, gw = h // p, w // p
    n = gh * gw
    labels = np.full((gh, gw), CLEAN, dtype=np.int8)

    _fill_blocks(labels, DROPPED, fraction_target(params.drop_fraction, n, rng), params, rng)
    if replacement_source is not None:
        _fill_blocks(labels, REPLACED, fraction_target(params.replace_fraction, n, rng), params, rng)
    if params.blur_blocks[1] > 0:
        _block_count(labels, BLURRED, int(rng.integers(params.blur_blocks[0], params.blur_blocks[1] + 1)), params, rng)
    if params.grey_blocks[1] > 0:
        _block_count(labels, GREYED, int(rng.integers(params.grey_blocks[0], params.grey_blocks[1] + 1)), params, rng)

    out = image.copy()
    s = params.colour_strength
    if s > 0:
        out = colour_jitter(out, rng, s, s, s)
        out = np.clip(out, 0.0, 1.0).astype(image.dtype, copy=False)

    pix = np.kron(labels, np.ones((p, p), dtype=np.int8))
    sel = pix == DROPPED
    if sel.any():
        noise = rng.random((c, h, w)).astype(image.dtype)
        out[:, sel] = noise[:, sel]
    sel = pix == REPLACED
    if sel.any():
        out[:, sel] = replacement_source[:, sel]
    sel = pix == BLURRED
    if sel.any():
        blurred = gaussian_blur(out, params.blur_sigma, params.blur_kernel)
        out[:, sel] = blurred[:, sel]
    sel = pix == GREYED
    if sel.any():
        g = grey(out)
        out[:, sel] = g[:, sel]
    return out, labels.reshape(-1)


def make_pretext_batch(
    images: np.ndarray,
    augment: AugmentParams,
    corruption: CorruptionParams,
    rng: np.random.Generator,
    out_size: int | None = None,
    rotate: bool = True,
) -> PretextBatch:
    """Two views per source image; views ``2i`` and ``2i+1`` are partners.

    Each view is augmented, rotated by an independently drawn quarter-turn
    count, snapshotted as the clean target, then corrupted with replacement
    patches taken from a clean view of a different source image.
    """
    n = len(images)
    if n < 2:
        raise ContractError("a pretext batch needs at least 2 source images")
    views, labels, sources = [], [], []
    for i in range(n):
        for _ in range(2):
            v = augment_view(images[i], augment, rng, out_size)
            k = int(rng.integers(0, 4)) if rotate else 0
            views.append(rotate90(v, k))
            labels.append(k)
            sources.append(i)
    clean = np.stack(views)
    sources = np.asarray(sources)
    corrupted = np.empty_like(clean)
    masks = []
    m = len(clean)
    for j in range(m):
        # any view of another source image
        other = int(rng.integers(0, m - 2))
        other = other if other < 2 * sources[j] else other + 2
        out, mask = corrupt(clean[j], corruption, rng, clean[other])
        corrupted[j] = out
        masks.append(mask)
    pair = np.arange(m) ^ 1
    return PretextBatch(
        corrupted_views=corrupted,
        clean_targets=clean,
        rotation_labels=np.asarray(labels, dtype=np.int64),
        pair_index=pair,
        source_index=sources,
        masks=np.stack(masks),
    )
