"""Cascaded inference: coarse liver localization on a resampled grid, ROI
crop with margin, fine prediction inside the ROI, two-threshold label
decision, and post-processing (largest connected component refinement of
the liver, suppression of tumors outside it).

Prediction pads inputs to stride-compatible extents (in-plane multiples of
32, depth multiples of 4) with edge replication and strips the padding
afterwards.  Long volumes are processed in z-slabs with a halo; the slice
network touches only a ±1 slice neighbourhood per output slice, so slab
evaluation reproduces whole-volume evaluation exactly there, and the halo
bounds the volumetric branch's seam effect.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from liverseg.autodiff import Tensor
from liverseg.fusion import HybridModel, slices_to_triplets
from liverseg.ops import softmax_channels
from liverseg.volume import Volume, hu_window, normalize_windowed, resample, resize_nearest

INPLANE_MULTIPLE = 32
DEPTH_MULTIPLE = 4


def _round_up(n, m):
    return max(((n + m - 1) // m) * m, m)


def pad_to_grid(data, inplane=INPLANE_MULTIPLE, depth=DEPTH_MULTIPLE):
    """Edge-pad (X, Y, Z) data so the network stride chain divides cleanly."""
    x, y, z = data.shape
    target = (_round_up(x, inplane), _round_up(y, inplane), _round_up(z, depth))
    pads = [(0, t - n) for n, t in zip(data.shape, target)]
    if any(p != (0, 0) for p in pads):
        data = np.pad(data, pads, mode="edge")
    crop = tuple(slice(0, n) for n in (x, y, z))
    return data, crop


def _predict_triplet_probs(net2d, padded, chunk):
    """Per-slice class probabilities for a padded (X, Y, Z) volume."""
    x, y, z = padded.shape
    vol = Tensor(padded[None, None].astype(np.float32))
    triplets = slices_to_triplets(vol).data  # (z, 3, X, Y)
    probs = np.empty((net2d.cfg.num_classes, x, y, z), dtype=np.float32)
    for lo in range(0, z, chunk):
        hi = min(lo + chunk, z)
        _, logits = net2d.forward(Tensor(triplets[lo:hi]), train=False)
        p = softmax_channels(logits).data  # (hi-lo, C, X, Y)
        probs[:, :, :, lo:hi] = p.transpose(1, 2, 3, 0)
    return probs


def predict_probs_2d(net2d, image, chunk=8, slab=None, halo=4):
    """Class probabilities from the slice network on an (X, Y, Z) image in
    [0, 1].  ``slab`` caps the number of slices processed at once; cores are
    stitched from slabs extended by ``halo`` slices each side."""
    image = np.asarray(image, dtype=np.float32)
    x, y, z = image.shape
    if slab is None or z <= slab:
        padded, crop = pad_to_grid(image)
        probs = _predict_triplet_probs(net2d, padded, chunk)
        return probs[(slice(None),) + crop]
    out = np.empty((net2d.cfg.num_classes, x, y, z), dtype=np.float32)
    for lo in range(0, z, slab):
        hi = min(lo + slab, z)
        wlo, whi = max(lo - halo, 0), min(hi + halo, z)
        padded, crop = pad_to_grid(image[:, :, wlo:whi])
        probs = _predict_triplet_probs(net2d, padded, chunk)[(slice(None),) + crop]
        out[:, :, :, lo:hi] = probs[:, :, :, lo - wlo : hi - wlo]
    return out


def predict_probs_hybrid(model, image, slab=None, halo=4):
    """Fused class probabilities from the full hybrid model."""
    image = np.asarray(image, dtype=np.float32)
    x, y, z = image.shape
    if slab is None or z <= slab:
        padded, crop = pad_to_grid(image)
        out = model.forward(Tensor(padded[None, None]), train=False)
        return out.probs_fused.data[0][(slice(None),) + crop]
    result = np.empty((model.cfg2d.num_classes, x, y, z), dtype=np.float32)
    for lo in range(0, z, slab):
        hi = min(lo + slab, z)
        wlo, whi = max(lo - halo, 0), min(hi + halo, z)
        padded, crop = pad_to_grid(image[:, :, wlo:whi])
        out = model.forward(Tensor(padded[None, None]), train=False)
        probs = out.probs_fused.data[0][(slice(None),) + crop]
        result[:, :, :, lo:hi] = probs[:, :, :, lo - wlo : hi - wlo]
    return result


@dataclass(frozen=True)
class RoiBox:
    """Half-open per-axis (lo, hi) voxel bounds in the fine-resolution frame."""

    lo: tuple
    hi: tuple
    margin: int

    def slices(self):
        return tuple(slice(l, h) for l, h in zip(self.lo, self.hi))

    @property
    def extents(self):
        return tuple(h - l for l, h in zip(self.lo, self.hi))


def coarse_liver(image_native, coarse_net, coarse_spacing, hu_lo=-200.0, hu_hi=250.0, tau=0.5):
    """Binary liver mask at native extents from the coarse localizer.

    The native-HU volume is windowed, resampled to the coarse grid,
    normalized, and segmented slice-wise; the mask is brought back to the
    native grid by nearest-neighbour resizing.  An empty mask is returned
    as-is; the caller falls back to a whole-volume ROI.
    """
    windowed = hu_window(image_native, hu_lo, hu_hi)
    coarse = resample(windowed, coarse_spacing, "trilinear")
    norm = normalize_windowed(coarse.data, hu_lo, hu_hi)
    probs = predict_probs_2d(coarse_net, norm)
    mask = (probs[1] >= tau).astype(np.uint8)
    return resize_nearest(mask, image_native.extents)


def roi_crop(data, mask, margin):
    """Crop to the mask's bounding box dilated by ``margin`` voxels per axis."""
    mask = np.asarray(mask) > 0
    if not mask.any():
        raise ValueError("roi_crop: empty mask (caller should fall back to whole volume)")
    idx = np.nonzero(mask)
    lo = tuple(max(int(i.min()) - margin, 0) for i in idx)
    hi = tuple(min(int(i.max()) + margin + 1, n) for i, n in zip(idx, data.shape))
    box = RoiBox(lo, hi, margin)
    return data[box.slices()], box


def paste_back(sub, box, full_extents, fill=0):
    out = np.full(full_extents, fill, dtype=sub.dtype)
    out[box.slices()] = sub
    return out


def decide_labels(probs, tau_liver=0.5, tau_tumor=0.5, mode="threshold"):
    """Per-voxel labels from 3-class probabilities.

    Threshold mode: tumor where p_tumor >= tau_tumor, else liver where
    p_liver + p_tumor >= tau_liver, else background.  ``mode='argmax'``
    takes the most probable class instead.
    """
    probs = np.asarray(probs)
    if probs.shape[0] != 3:
        raise ValueError(f"decide_labels: expected 3 class channels, got {probs.shape[0]}")
    if mode == "argmax":
        return probs.argmax(axis=0).astype(np.uint8)
    if mode != "threshold":
        raise ValueError(f"decide_labels: unknown mode {mode!r}")
    labels = np.zeros(probs.shape[1:], dtype=np.uint8)
    organ = (probs[1] + probs[2]) >= tau_liver
    labels[organ] = 1
    labels[probs[2] >= tau_tumor] = 2
    return labels


_CONN_STRUCTURE = {6: 1, 18: 2, 26: 3}


def largest_component(mask, connectivity=26):
    """Keep only the largest connected component; ties go to the component
    whose first voxel in raster order comes first."""
    mask = np.asarray(mask) > 0
    if not mask.any():
        return np.zeros_like(mask, dtype=np.uint8)
    if connectivity not in _CONN_STRUCTURE:
        raise ValueError(f"connectivity must be one of {sorted(_CONN_STRUCTURE)}")
    structure = ndimage.generate_binary_structure(mask.ndim, _CONN_STRUCTURE[connectivity])
    labeled, n = ndimage.label(mask, structure=structure)
    if n == 1:
        return mask.astype(np.uint8)
    sizes = np.bincount(labeled.ravel())
    sizes[0] = 0
    keep = int(sizes.argmax())  # labels are assigned in raster order
    return (labeled == keep).astype(np.uint8)


def suppress_outside_lesions(labels, connectivity=26):
    """Erase tumor voxels outside the refined liver region (the largest
    connected component of liver-plus-tumor)."""
    labels = np.asarray(labels)
    if labels.size and labels.max() > 2:
        raise ValueError("labels must be in {0, 1, 2}")
    refined = largest_component(labels > 0, connectivity).astype(bool)
    out = labels.copy()
    out[(labels == 2) & ~refined] = 0
    return out


def postprocess_labels(labels, connectivity=26, fill_holes=False):
    """Largest-component refinement of the organ, then outside-tumor removal.

    With ``fill_holes``, interior holes of the refined component become
    liver.  Tumor voxels never increase.
    """
    labels = np.asarray(labels)
    refined = largest_component(labels > 0, connectivity).astype(bool)
    if not refined.any():
        return np.zeros_like(labels, dtype=np.uint8)
    if fill_holes:
        refined = ndimage.binary_fill_holes(refined)
    out = np.zeros_like(labels, dtype=np.uint8)
    out[refined] = 1
    out[refined & (labels == 2)] = 2
    return out


@dataclass
class InferenceSettings:
    tau_liver: float = 0.5
    tau_tumor: float = 0.5
    decide_mode: str = "threshold"
    roi_margin: int = 10
    connectivity: int = 26
    fill_holes: bool = False
    coarse_spacing: tuple = (2.0, 2.0, 2.5)
    hu_lo: float = -200.0
    hu_hi: float = 250.0
    slab: int | None = None


def infer_case(image_native, model, settings, coarse_net=None):
    """Run the full cascade on one native-HU image volume.

    Returns (label Volume, info dict).  ``model`` is a hybrid model or a
    bare slice network; ``coarse_net`` is optional (whole-volume ROI when
    missing or when the coarse mask comes back empty).
    """
    info = {"roi": "whole-volume"}
    windowed = hu_window(image_native, settings.hu_lo, settings.hu_hi)
    norm = normalize_windowed(windowed.data, settings.hu_lo, settings.hu_hi)

    box = None
    if coarse_net is not None:
        mask = coarse_liver(
            image_native, coarse_net, settings.coarse_spacing, settings.hu_lo, settings.hu_hi
        )
        if mask.any():
            _, box = roi_crop(norm, mask, settings.roi_margin)
            info["roi"] = f"box lo={box.lo} hi={box.hi}"
        else:
            info["roi"] = "whole-volume (empty coarse mask)"

    sub = norm if box is None else norm[box.slices()]
    if isinstance(model, HybridModel):
        probs = predict_probs_hybrid(model, sub, slab=settings.slab)
    else:
        probs = predict_probs_2d(model, sub, slab=settings.slab)
    labels_sub = decide_labels(probs, settings.tau_liver, settings.tau_tumor, settings.decide_mode)
    labels = labels_sub if box is None else paste_back(labels_sub, box, norm.shape)
    labels = postprocess_labels(labels, settings.connectivity, settings.fill_holes)
    return Volume(labels, image_native.spacing, image_native.origin), info
