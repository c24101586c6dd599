"""Shared invariant checks for the corruption pipeline."""

import math

import numpy as np

from sit.pretext import BLURRED, CLEAN, DROPPED, GREYED, REPLACED, CorruptionParams, corrupt, gaussian_blur, gaussian_kernel, grey


def random_params(rng):
    p = int(rng.choice([2, 4, 8]))
    grid = int(rng.integers(2, 6))
    drop_lo = float(rng.uniform(0, 0.5))
    drop_hi = float(rng.uniform(drop_lo, 0.5))
    rep_lo = float(rng.uniform(0, 0.4))
    rep_hi = float(rng.uniform(rep_lo, 0.5))
    bh = sorted(int(v) for v in rng.integers(1, 5, 2))
    bw = sorted(int(v) for v in rng.integers(1, 5, 2))
    params = CorruptionParams(
        patch_size=p,
        drop_fraction=(drop_lo, drop_hi),
        replace_fraction=(rep_lo, rep_hi),
        block_height=tuple(bh),
        block_width=tuple(bw),
        blur_blocks=tuple(sorted(int(v) for v in rng.integers(0, 4, 2))),
        blur_sigma=float(rng.uniform(0.3, 2.0)),
        blur_kernel=int(rng.choice([1, 3, 5, 7])),
        grey_blocks=tuple(sorted(int(v) for v in rng.integers(0, 4, 2))),
        colour_strength=float(rng.choice([0.0, rng.uniform(0, 0.8)])),
    )
    return params, grid * p


def corruption_violations(seed):
    """Run one random corruption case; return a list of broken invariants."""
    rng = np.random.default_rng(seed)
    params, size = random_params(rng)
    image = rng.random((3, size, size))
    source = rng.random((3, size, size))
    out, mask = corrupt(image, params, np.random.default_rng(seed + 1), source)
    bad = []
    p = params.patch_size
    n = (size // p) ** 2
    if mask.shape != (n,) or not set(np.unique(mask)) <= {CLEAN, DROPPED, REPLACED, BLURRED, GREYED}:
        bad.append("mask shape or labels")
        return bad
    if out.shape != image.shape or out.min() < 0 or out.max() > 1:
        bad.append("output range")

    n_drop = int((mask == DROPPED).sum())
    lo, hi = params.drop_fraction
    kmin, kmax = math.ceil(lo * n - 1e-9), math.floor(hi * n + 1e-9)
    if kmin <= kmax and not kmin <= n_drop <= kmax:
        bad.append(f"drop count {n_drop} outside [{lo}, {hi}]·{n}")
    n_rep = int((mask == REPLACED).sum())
    lo, hi = params.replace_fraction
    free = n - n_drop
    kmin = math.ceil(lo * n - 1e-9)
    kmax = math.floor(hi * n + 1e-9)
    if kmin <= kmax and not (min(kmin, free) <= n_rep <= kmax):
        bad.append(f"replace count {n_rep} outside [{lo}, {hi}]·{n}")

    pix = np.kron(mask.reshape(size // p, size // p), np.ones((p, p), dtype=np.int8))
    if not np.array_equal(out[:, pix == REPLACED], source[:, pix == REPLACED]):
        bad.append("replaced pixels differ from source")
    g = out[:, pix == GREYED]
    if g.size and not (np.array_equal(g[0], g[1]) and np.array_equal(g[1], g[2])):
        bad.append("greyed pixels not R=G=B")

    k = gaussian_kernel(params.blur_kernel, params.blur_sigma)
    if abs(k.sum() - 1.0) > 1e-6:
        bad.append("kernel not normalised")

    if params.colour_strength == 0:
        clean = pix == CLEAN
        if not np.array_equal(out[:, clean], image[:, clean]):
            bad.append("clean pixels changed")
        # rebuild the pre-blur image: blurred and greyed pixels still held the input then
        pre = out.copy()
        keep = (pix == BLURRED) | (pix == GREYED)
        pre[:, keep] = image[:, keep]
        sel = pix == BLURRED
        if not np.allclose(out[:, sel], gaussian_blur(pre, params.blur_sigma, params.blur_kernel)[:, sel], atol=1e-12):
            bad.append("blurred pixels do not match a Gaussian filter")
        sel = pix == GREYED
        if not np.allclose(out[:, sel], grey(image)[:, sel], atol=1e-12):
            bad.append("greyed pixels are not the luminance")
        if n_drop == 0 and n_rep == 0 and not (pix == BLURRED).any() and not (pix == GREYED).any():
            if not np.array_equal(out, image):
                bad.append("no-op corruption changed the image")
    return bad
