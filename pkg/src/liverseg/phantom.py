"""Synthetic abdominal phantoms: a liver ellipsoid containing spherical
tumors, on a soft-tissue background with Gaussian noise.

Tissue HU levels approximate contrast CT: background ~ -80, liver ~ +60,
tumors ~ -10 (hypodense).  A configurable fraction of tumors gets a blurred
boundary, mimicking lesions without a clear edge.  Labels stay crisp and
follow the generating geometry: 0 background, 1 liver, 2 tumor; tumors lie
strictly inside the liver ellipsoid.  Everything is deterministic per seed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from liverseg.volume import Volume

log = logging.getLogger(__name__)


@dataclass
class PhantomSpec:
    seed: int = 0
    extents: tuple = (64, 64, 16)
    spacing: tuple = (1.0, 1.0, 2.5)
    background_hu: float = -80.0
    liver_hu: float = 60.0
    tumor_hu: float = -10.0
    noise_hu: float = 8.0
    liver_axis_fraction: tuple = (0.30, 0.40)   # semi-axis as fraction of extent
    tumor_count_range: tuple = (1, 3)
    tumor_radius_mm: tuple = (3.0, 7.0)
    blur_fraction: float = 0.3                  # tumors with smoothed boundary
    blur_sigma_mm: float = 1.2
    placement_retries: int = 60


def _mm_grids(extents, spacing):
    axes = [(np.arange(n) - (n - 1) / 2.0) * s for n, s in zip(extents, spacing)]
    return np.meshgrid(*axes, indexing="ij")


def generate_phantom(spec):
    """Return (image Volume in HU float32, label Volume uint8)."""
    rng = np.random.default_rng(spec.seed)
    xs, ys, zs = _mm_grids(spec.extents, spec.spacing)

    half_mm = [n * s / 2.0 for n, s in zip(spec.extents, spec.spacing)]
    lo, hi = spec.liver_axis_fraction
    semi = [rng.uniform(lo, hi) * 2 * h for h in half_mm]
    center = [rng.uniform(-0.08, 0.08) * 2 * h for h in half_mm]
    liver = (
        ((xs - center[0]) / semi[0]) ** 2
        + ((ys - center[1]) / semi[1]) ** 2
        + ((zs - center[2]) / semi[2]) ** 2
    ) <= 1.0

    n_tumors = int(rng.integers(spec.tumor_count_range[0], spec.tumor_count_range[1] + 1))
    tumor_masks = []
    placed = 0
    for _ in range(n_tumors):
        ok = False
        for _ in range(spec.placement_retries):
            r = rng.uniform(*spec.tumor_radius_mm)
            # candidate center must keep the whole ball inside the ellipsoid
            shrunk = [max(a - r - 1.0, 0.1) for a in semi]
            cx = center[0] + rng.uniform(-1, 1) * shrunk[0]
            cy = center[1] + rng.uniform(-1, 1) * shrunk[1]
            cz = center[2] + rng.uniform(-1, 1) * shrunk[2]
            fit = (
                ((cx - center[0]) / shrunk[0]) ** 2
                + ((cy - center[1]) / shrunk[1]) ** 2
                + ((cz - center[2]) / shrunk[2]) ** 2
            )
            if fit > 1.0:
                continue
            ball = ((xs - cx) ** 2 + (ys - cy) ** 2 + (zs - cz) ** 2) <= r * r
            if not ball.any():
                continue
            tumor_masks.append(ball & liver)
            placed += 1
            ok = True
            break
        if not ok:
            log.warning("phantom seed %d: tumor placement failed, generating %d of %d",
                        spec.seed, placed, n_tumors)

    labels = np.zeros(spec.extents, dtype=np.uint8)
    labels[liver] = 1
    tumor_all = np.zeros(spec.extents, dtype=bool)
    for m in tumor_masks:
        tumor_all |= m
    labels[tumor_all] = 2

    image = np.full(spec.extents, spec.background_hu, dtype=np.float32)
    image[liver] = spec.liver_hu
    sigma_vox = [spec.blur_sigma_mm / s for s in spec.spacing]
    for m in tumor_masks:
        delta = np.zeros(spec.extents, dtype=np.float32)
        delta[m] = spec.tumor_hu - spec.liver_hu
        if rng.uniform() < spec.blur_fraction:
            delta = gaussian_filter(delta, sigma=sigma_vox)
        image += delta
    if spec.noise_hu > 0:
        image += rng.normal(0.0, spec.noise_hu, size=spec.extents).astype(np.float32)

    return (
        Volume(image.astype(np.float32), spec.spacing),
        Volume(labels, spec.spacing),
    )
