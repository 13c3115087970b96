"""Bridging the slice-wise 2D network and the volumetric 3D network.

A volume batch (n, 1, H, W, D) is decomposed into n*D adjacent-slice
triplets: group g of a case holds slices (g-1, g, g+1) with edge
replication, so every slice is the center of exactly one group.  The
inverse transform reassembles per-group maps into a volume by assigning
each group's map to its center slice; restricted to center channels the
round trip is the identity, bit for bit.

The volumetric branch consumes the raw volume concatenated with the
reassembled 2D class probabilities (auto-context).  Its output feature is
summed with the reassembled 2D feature and the fusion head (BN-ReLU-3x3x3
conv keeping the feature width, then a 1x1x1 classifier) produces the
final per-voxel probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from liverseg.autodiff import Tensor, add, as_tensor, concat_channels, node, relu
from liverseg.nets import BNLayer, ConvLayer, DenseUNet, ParameterSet
from liverseg.ops import softmax_channels


def _triplet_index(depth):
    """(D, 3) slice indices per group: clamp(g - 1 + c, 0, D - 1)."""
    g = np.arange(depth)[:, None] + np.array([-1, 0, 1])[None, :]
    return np.clip(g, 0, depth - 1)


def slices_to_triplets(vol):
    """(n, 1, H, W, D) volume batch -> (n*D, 3, H, W) triplet batch."""
    vol = as_tensor(vol)
    if vol.data.ndim != 5 or vol.data.shape[1] != 1:
        raise ValueError(f"slices_to_triplets: expected (n, 1, H, W, D), got {vol.data.shape}")
    n, _, h, w, d = vol.data.shape
    idx = _triplet_index(d)
    stack = vol.data[:, 0].transpose(0, 3, 1, 2)  # (n, D, H, W)
    out = stack[:, idx].transpose(0, 1, 2, 3, 4).reshape(n * d, 3, h, w)

    def bwd(g):
        gg = g.reshape(n, d, 3, h, w)
        dstack = np.zeros((n, d, h, w), dtype=g.dtype)
        for c in range(3):  # clamped duplicates must accumulate
            np.add.at(dstack, (slice(None), idx[:, c]), gg[:, :, c])
        return (dstack.transpose(0, 2, 3, 1)[:, None],)

    return node(np.ascontiguousarray(out), "slices_to_triplets", (vol,), bwd)


def triplets_to_volume(t, provenance):
    """(n*D, C, H, W) per-group maps -> (n, C, H, W, D) volume batch.

    ``provenance`` is the (n, D) pair recorded when the triplets were made;
    group g is written to z-position g of its case (center-slice rule).
    """
    t = as_tensor(t)
    n, d = provenance
    if t.data.ndim != 4 or t.data.shape[0] != n * d:
        raise ValueError(
            f"triplets_to_volume: batch {t.data.shape} does not match provenance n={n}, D={d}"
        )
    _, c, h, w = t.data.shape
    out = t.data.reshape(n, d, c, h, w).transpose(0, 2, 3, 4, 1)

    def bwd(g):
        return (g.transpose(0, 4, 1, 2, 3).reshape(n * d, c, h, w),)

    return node(np.ascontiguousarray(out), "triplets_to_volume", (t,), bwd)


def fuse_context_input(vol, probs_volume):
    """Concatenate the raw volume with reassembled 2D class probabilities."""
    vol = as_tensor(vol)
    probs_volume = as_tensor(probs_volume)
    if vol.data.shape[0] != probs_volume.data.shape[0] or vol.data.shape[2:] != probs_volume.data.shape[2:]:
        raise ValueError(
            f"fuse_context_input: shapes {vol.data.shape} and {probs_volume.data.shape} "
            "must agree on batch and spatial extents"
        )
    return concat_channels([vol, probs_volume])


def hybrid_sum(feat3d, feat2d_volume):
    """Elementwise sum of the volumetric and reassembled slice features."""
    feat3d = as_tensor(feat3d)
    feat2d_volume = as_tensor(feat2d_volume)
    if feat3d.data.shape != feat2d_volume.data.shape:
        raise ValueError(
            f"hybrid_sum: shape mismatch {feat3d.data.shape} vs {feat2d_volume.data.shape}"
        )
    return add(feat3d, feat2d_volume)


class FusionHead:
    """BN-ReLU-3x3x3 conv keeping the feature width, then a 1x1x1 classifier."""

    def __init__(self, params, channels, num_classes=3, seed=0, dtype=np.float32,
                 bn_epsilon=1e-5, bn_momentum=0.99):
        rng = np.random.default_rng(seed)
        self.bn = BNLayer(params, "hff/bn", channels, dtype, bn_epsilon, bn_momentum)
        self.conv = ConvLayer(params, "hff/conv", 3, channels, channels, (3, 3, 3), (1, 1, 1), rng, dtype)
        self.classifier = ConvLayer(params, "hffcls/conv", 3, channels, num_classes, (1, 1, 1), (1, 1, 1), rng, dtype)

    def __call__(self, z, train=False):
        fused = self.conv(relu(self.bn(z, train)))
        probs = softmax_channels(self.classifier(fused))
        return fused, probs


def hff(z, head, train=False):
    """Apply the fusion head; returns (fused feature, per-voxel probabilities)."""
    return head(z, train=train)


@dataclass
class HybridOutputs:
    probs_2d: Tensor          # per-triplet class probabilities (n*D, C, H, W)
    probs_2d_volume: Tensor   # reassembled to (n, C, H, W, D)
    feature_2d_volume: Tensor
    feature_3d: Tensor
    hybrid: Tensor            # sum of the two feature volumes
    fused: Tensor             # fusion-head feature
    probs_fused: Tensor       # final per-voxel probabilities


PARAM_GROUPS = ("2d", "2dcls", "3d", "hff", "hffcls")


def group_of(name):
    """Map a parameter name to its training group."""
    if name.startswith("2d/cls/"):
        return "2dcls"
    if name.startswith("2d/"):
        return "2d"
    if name.startswith("3d/"):
        return "3d"
    if name.startswith("hffcls/"):
        return "hffcls"
    if name.startswith("hff/"):
        return "hff"
    raise ValueError(f"parameter {name!r} belongs to no known group")


class HybridModel:
    """Slice network + volume network + fusion head over one parameter set."""

    def __init__(self, cfg2d, cfg3d, seed=0, dtype=np.float32, bn_epsilon=1e-5, bn_momentum=0.99):
        if cfg2d.upsample_channels[-1] != cfg3d.upsample_channels[-1]:
            raise ValueError(
                "feature widths must match for fusion: "
                f"{cfg2d.upsample_channels[-1]} vs {cfg3d.upsample_channels[-1]}"
            )
        if cfg3d.in_channels != 1 + cfg2d.num_classes:
            raise ValueError(
                f"volume branch expects {1 + cfg2d.num_classes} input channels "
                f"(volume + class probabilities), config says {cfg3d.in_channels}"
            )
        self.cfg2d = cfg2d
        self.cfg3d = cfg3d
        self.params = ParameterSet()
        bn = dict(bn_epsilon=bn_epsilon, bn_momentum=bn_momentum)
        self.net2d = DenseUNet(cfg2d, params=self.params, prefix="2d/", seed=seed, dtype=dtype, **bn)
        self.net3d = DenseUNet(cfg3d, params=self.params, prefix="3d/", seed=seed + 1,
                               dtype=dtype, with_classifier=False, **bn)
        self.head = FusionHead(self.params, cfg2d.upsample_channels[-1],
                               num_classes=cfg2d.num_classes, seed=seed + 2, dtype=dtype,
                               bn_epsilon=bn_epsilon, bn_momentum=bn_momentum)

    def forward(self, vol, train=False, train_2d=None, use_skips_2d=None):
        """Full hybrid forward on a (n, 1, H, W, D) volume batch.

        ``train_2d`` lets the slice branch run in eval mode while the rest
        trains (the stage that freezes it does exactly that);
        it defaults to ``train``.
        """
        vol = as_tensor(vol)
        n, _, h, w, d = vol.data.shape
        if train_2d is None:
            train_2d = train
        triplets = slices_to_triplets(vol)
        feat2d, logits2d = self.net2d.forward(triplets, train=train_2d, use_skips=use_skips_2d)
        probs2d = softmax_channels(logits2d)
        feat2d_vol = triplets_to_volume(feat2d, (n, d))
        probs2d_vol = triplets_to_volume(probs2d, (n, d))
        context = fuse_context_input(vol, probs2d_vol)
        feat3d, _ = self.net3d.forward(context, train=train)
        z = hybrid_sum(feat3d, feat2d_vol)
        fused, probs_fused = self.head(z, train=train)
        return HybridOutputs(
            probs_2d=probs2d,
            probs_2d_volume=probs2d_vol,
            feature_2d_volume=feat2d_vol,
            feature_3d=feat3d,
            hybrid=z,
            fused=fused,
            probs_fused=probs_fused,
        )

    def group_names(self, group):
        return [n for n in self.params.names() if group_of(n) == group]

    def freeze_groups(self, groups):
        groups = set(groups)
        self.params.freeze(lambda n: group_of(n) in groups)

    def unfreeze_all(self):
        self.params.unfreeze()
