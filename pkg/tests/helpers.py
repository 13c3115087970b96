"""Shared test utilities: independent brute-force oracles and the gradient
check harness.

The oracles here deliberately avoid the library's own code paths: metric
oracles count voxels and compare all surface pairs directly, the connected
component oracle is a hand-rolled flood fill, and gradient checks use
central finite differences.  Keeping them independent is what makes the
dual-route acceptance checks meaningful.
"""

import numpy as np

from liverseg.autodiff import Tensor, add, mul, sum_all
from liverseg.fusion import FusionHead
from liverseg.nets import DenseUNetConfig, ParameterSet, build_dense_block
from liverseg.ops import (
    BatchNormState,
    ConvSpec,
    LossWeights,
    avg_pool,
    batch_norm,
    conv,
    max_pool,
    softmax_channels,
    upsample,
    weighted_cross_entropy,
)

# ---------------------------------------------------------------------------
# brute-force metric oracles


def bf_dice(a, b):
    a, b = np.asarray(a, bool).ravel(), np.asarray(b, bool).ravel()
    inter = sum(1 for x, y in zip(a, b) if x and y)
    na, nb = int(a.sum()), int(b.sum())
    return 1.0 if na + nb == 0 else 2.0 * inter / (na + nb)


def bf_voe(a, b):
    a, b = np.asarray(a, bool).ravel(), np.asarray(b, bool).ravel()
    inter = sum(1 for x, y in zip(a, b) if x and y)
    union = sum(1 for x, y in zip(a, b) if x or y)
    return 0.0 if union == 0 else 1.0 - inter / union


def bf_rvd(a, b):
    na, nb = int(np.asarray(a, bool).sum()), int(np.asarray(b, bool).sum())
    return None if na == 0 else (nb - na) / na


def bf_surface(mask):
    """Voxels of the mask with a 6-neighbour outside it (border = outside)."""
    mask = np.asarray(mask, bool)
    out = np.zeros_like(mask)
    shape = mask.shape
    for idx in zip(*np.nonzero(mask)):
        for axis in range(3):
            for step in (-1, 1):
                j = list(idx)
                j[axis] += step
                if not (0 <= j[axis] < shape[axis]) or not mask[tuple(j)]:
                    out[idx] = True
                    break
            if out[idx]:
                break
    return out


def bf_surface_distances(a, b, spacing):
    """O(S^2) pairwise symmetric surface distances (ASD, RMSD) in mm."""
    sa = np.argwhere(bf_surface(a)).astype(np.float64) * np.asarray(spacing)
    sb = np.argwhere(bf_surface(b)).astype(np.float64) * np.asarray(spacing)
    if len(sa) == 0 or len(sb) == 0:
        return None
    d2 = ((sa[:, None, :] - sb[None, :, :]) ** 2).sum(-1)
    nearest_ab = np.sqrt(d2.min(axis=1))
    nearest_ba = np.sqrt(d2.min(axis=0))
    all_d = np.concatenate([nearest_ab, nearest_ba])
    return float(all_d.mean()), float(np.sqrt((all_d ** 2).mean()))


def bf_largest_component(mask, connectivity=26):
    """Flood-fill component labeling; returns the largest component mask.

    Ties go to the component containing the smallest raster-order voxel.
    """
    mask = np.asarray(mask) > 0
    shape = mask.shape
    if connectivity == 6:
        offsets = [
            (dx, dy, dz)
            for dx in (-1, 0, 1)
            for dy in (-1, 0, 1)
            for dz in (-1, 0, 1)
            if abs(dx) + abs(dy) + abs(dz) == 1
        ]
    else:
        offsets = [
            (dx, dy, dz)
            for dx in (-1, 0, 1)
            for dy in (-1, 0, 1)
            for dz in (-1, 0, 1)
            if (dx, dy, dz) != (0, 0, 0)
        ]
    seen = np.zeros(shape, dtype=bool)
    best = None
    best_size = -1
    for seed in zip(*np.nonzero(mask)):
        if seen[seed]:
            continue
        comp = []
        stack = [seed]
        seen[seed] = True
        while stack:
            v = stack.pop()
            comp.append(v)
            for off in offsets:
                w = (v[0] + off[0], v[1] + off[1], v[2] + off[2])
                if all(0 <= w[i] < shape[i] for i in range(3)) and mask[w] and not seen[w]:
                    seen[w] = True
                    stack.append(w)
        if len(comp) > best_size:  # first-seen wins ties (raster order)
            best_size = len(comp)
            best = comp
    out = np.zeros(shape, dtype=np.uint8)
    if best:
        for v in best:
            out[v] = 1
    return out


# ---------------------------------------------------------------------------
# gradient-check op registry


def _square_loss(*ys):
    total = None
    for y in ys:
        term = sum_all(mul(y, y))
        total = term if total is None else add(total, term)
    return total


def _rand(rng, shape):
    return Tensor(rng.normal(size=shape), dtype=np.float64)


def _away_from(rng, shape, thresholds, margin=1e-3):
    x = rng.normal(size=shape)
    for t in thresholds:
        close = np.abs(x - t) < margin
        while close.any():
            x[close] = rng.normal(size=int(close.sum()))
            close = np.abs(x - t) < margin
    return Tensor(x, dtype=np.float64)


def _pool_safe_input(rng, shape, window, stride, margin=1e-3):
    """Random input whose pooling windows have no near-ties at the top."""
    from liverseg import backend
    from liverseg.ops import _pad_spatial

    for _ in range(50):
        x = rng.normal(size=shape)
        out_sp = tuple(-(-n // s) for n, s in zip(shape[2:], stride))
        xpad, _ = _pad_spatial(x, shape[2:], window, stride, value=-np.inf)
        if len(window) == 2:
            cols = backend.reference.im2col2d(xpad, window, stride, out_sp)
        else:
            cols = backend.reference.im2col3d(xpad, window, stride, out_sp)
        top2 = np.sort(cols, axis=2)[:, :, -2:, :]
        gap = top2[:, :, 1, :] - top2[:, :, 0, :]
        finite = np.isfinite(gap)
        if not finite.any() or gap[finite].min() > margin:
            return Tensor(x, dtype=np.float64)
    raise AssertionError("could not sample a tie-free pooling input")


def check_conv(rng, dims):
    c_in, c_out = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    k = int(rng.choice([1, 3]))
    s = int(rng.choice([1, 2]))
    spatial = tuple(int(rng.integers(3, 6)) for _ in range(dims))
    spec = ConvSpec(dims, (k,) * dims, (s,) * dims, c_out)
    x = _rand(rng, (1, c_in) + spatial)
    w = _rand(rng, (c_out, c_in) + (k,) * dims)
    b = _rand(rng, (c_out,))
    return lambda xx, ww, bb: _square_loss(conv(xx, spec, ww, bb)), [x, w, b]


def check_pool(rng, dims, kind):
    c = int(rng.integers(1, 3))
    spatial = tuple(int(rng.integers(4, 7)) for _ in range(dims))
    window = (2,) * dims if kind == "avg" else (3,) * dims
    stride = (2,) * dims
    shape = (1, c) + spatial
    if kind == "max":
        x = _pool_safe_input(rng, shape, window, stride)
        return lambda xx: _square_loss(max_pool(xx, window, stride)), [x]
    x = _rand(rng, shape)
    return lambda xx: _square_loss(avg_pool(xx, window, stride)), [x]


def check_batchnorm(rng, dims):
    c = int(rng.integers(1, 4))
    spatial = tuple(int(rng.integers(2, 5)) for _ in range(dims))
    x = _rand(rng, (2, c) + spatial)
    gamma = _rand(rng, (c,))
    beta = _rand(rng, (c,))

    def f(xx, gg, bb):
        state = BatchNormState(gg, bb, np.zeros(c), np.ones(c))
        return _square_loss(batch_norm(xx, state, train=True))

    return f, [x, gamma, beta]


def check_upsample(rng, dims):
    c = int(rng.integers(1, 3))
    spatial = tuple(int(rng.integers(2, 5)) for _ in range(dims))
    factors = tuple(int(rng.choice([1, 2])) for _ in range(dims))
    x = _rand(rng, (1, c) + spatial)
    return lambda xx: _square_loss(upsample(xx, factors)), [x]


def check_softmax(rng):
    shape = (2, 3, 3, 3)
    x = _rand(rng, shape)
    return lambda xx: _square_loss(softmax_channels(xx)), [x]


def check_wce(rng):
    shape = (2, 3, 3, 3)
    x = _rand(rng, shape)
    labels = rng.integers(0, 3, size=(2, 3, 3))
    w = LossWeights(1.0, 3.0, 10.0)
    return lambda xx: weighted_cross_entropy(softmax_channels(xx), labels, w), [x]


def check_dense_block(rng):
    cfg = DenseUNetConfig(
        dims=2, growth_rate=2, bottleneck_width=4, block_repeats=(2, 2, 2, 2),
        compression=0.5, stem_channels=4, upsample_channels=(4, 4, 4, 4, 4),
    )
    params = ParameterSet()
    block, _ = build_dense_block(3, 2, cfg, params=params, seed=int(rng.integers(1 << 30)), dtype=np.float64)
    x = _rand(rng, (1, 3, 4, 4))
    tensors = [x] + params.tensors()

    def f(xx, *_ps):
        return _square_loss(block(xx, train=True))

    return f, tensors


def check_fusion_head(rng):
    params = ParameterSet()
    head = FusionHead(params, channels=2, num_classes=3,
                      seed=int(rng.integers(1 << 30)), dtype=np.float64)
    z = _rand(rng, (1, 2, 4, 4, 3))
    tensors = [z] + params.tensors()

    def f(zz, *_ps):
        fused, probs = head(zz, train=True)
        return add(_square_loss(fused), _square_loss(probs))

    return f, tensors


GRADIENT_CHECKS = {
    "conv2d": lambda rng: check_conv(rng, 2),
    "conv3d": lambda rng: check_conv(rng, 3),
    "maxpool2d": lambda rng: check_pool(rng, 2, "max"),
    "maxpool3d": lambda rng: check_pool(rng, 3, "max"),
    "avgpool2d": lambda rng: check_pool(rng, 2, "avg"),
    "avgpool3d": lambda rng: check_pool(rng, 3, "avg"),
    "batchnorm2d": lambda rng: check_batchnorm(rng, 2),
    "batchnorm3d": lambda rng: check_batchnorm(rng, 3),
    "upsample_bilinear": lambda rng: check_upsample(rng, 2),
    "upsample_trilinear": lambda rng: check_upsample(rng, 3),
    "softmax": check_softmax,
    "weighted_cross_entropy": check_wce,
    "dense_block": check_dense_block,
    "fusion_head": check_fusion_head,
}


# ---------------------------------------------------------------------------
# phantom / training fixtures


def write_phantom_cases(dirname, seeds, extents=(32, 32, 8), spacing=(1.0, 1.0, 2.0),
                        split="train", tumor_radius_mm=(2.5, 4.5)):
    import os

    from liverseg.phantom import PhantomSpec, generate_phantom
    from liverseg.volume import CaseEntry, write_manifest, write_volume

    os.makedirs(dirname, exist_ok=True)
    entries = []
    for i, seed in enumerate(seeds):
        spec = PhantomSpec(seed=seed, extents=extents, spacing=spacing,
                           tumor_radius_mm=tumor_radius_mm)
        img, lab = generate_phantom(spec)
        cid = f"case_{i:03d}"
        write_volume(img, os.path.join(dirname, cid + ".img"))
        write_volume(lab, os.path.join(dirname, cid + ".seg"))
        entries.append(CaseEntry(cid, cid + ".img", cid + ".seg", split))
    manifest = os.path.join(dirname, "manifest.tsv")
    write_manifest(manifest, entries)
    return manifest
