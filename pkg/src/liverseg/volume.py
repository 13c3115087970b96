"""Volume container, file format, CT preprocessing, and resampling.

A volume is a 3D array in (x, y, z) axis order with physical voxel spacing
in millimetres.  On disk it is a raw little-endian payload next to a plain
text ``.hdr`` sidecar (extents, spacing, origin, dtype); round trips are
lossless.

Preprocessing order is fixed: HU window to [-200, 250], optional
resampling, then normalization to [0, 1] via (v + 200) / 450.  The phantom
manifests record this string so inference applies exactly what training
saw.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

HU_WINDOW = (-200.0, 250.0)
PREPROCESS_RECIPE = "window[-200,250] -> resample -> normalize (v+200)/450"

_DTYPES = {
    "float32": np.float32,
    "float64": np.float64,
    "int16": np.int16,
    "uint8": np.uint8,
}


class VolumeError(ValueError):
    pass


@dataclass
class Volume:
    """3D scalar image with physical spacing; labels use the uint8 dtype."""

    data: np.ndarray
    spacing: tuple
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise VolumeError(f"volume must be 3D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise VolumeError(f"spacing must be 3 positive values, got {self.spacing}")

    @property
    def extents(self):
        return self.data.shape

    def copy(self):
        return Volume(self.data.copy(), self.spacing, self.origin)


def write_volume(vol, path):
    """Write raw payload at ``path`` and a text header at ``path + '.hdr'``."""
    dtype_name = vol.data.dtype.name
    if dtype_name not in _DTYPES:
        raise VolumeError(f"unsupported dtype {dtype_name}; use one of {sorted(_DTYPES)}")
    le = vol.data.astype(vol.data.dtype.newbyteorder("<"), copy=False)
    with open(path, "wb") as f:
        f.write(np.ascontiguousarray(le).tobytes())
    lines = [
        "format: liverseg-volume-1",
        "extents: " + " ".join(str(int(e)) for e in vol.extents),
        "spacing: " + " ".join(repr(float(s)) for s in vol.spacing),
        "origin: " + " ".join(repr(float(o)) for o in vol.origin),
        f"dtype: {dtype_name}",
    ]
    with open(path + ".hdr", "w") as f:
        f.write("\n".join(lines) + "\n")


def read_volume(path):
    hdr_path = path + ".hdr"
    if not os.path.exists(hdr_path):
        raise VolumeError(f"missing header sidecar {hdr_path}")
    fields = {}
    with open(hdr_path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition(":")
            fields[key.strip()] = value.strip()
    if fields.get("format") != "liverseg-volume-1":
        raise VolumeError(f"{hdr_path}: unknown format {fields.get('format')!r}")
    dtype_name = fields.get("dtype", "")
    if dtype_name not in _DTYPES:
        raise VolumeError(f"{hdr_path}: unknown dtype {dtype_name!r}")
    extents = tuple(int(v) for v in fields["extents"].split())
    spacing = tuple(float(v) for v in fields["spacing"].split())
    origin = tuple(float(v) for v in fields.get("origin", "0 0 0").split())
    dtype = np.dtype(_DTYPES[dtype_name]).newbyteorder("<")
    expected = int(np.prod(extents)) * dtype.itemsize
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) != expected:
        raise VolumeError(
            f"{path}: payload is {len(raw)} bytes but header expects {expected} "
            f"({extents} of {dtype_name})"
        )
    data = np.frombuffer(raw, dtype=dtype).reshape(extents)
    return Volume(data.astype(_DTYPES[dtype_name], copy=True), spacing, origin)


def hu_window(vol, lo=HU_WINDOW[0], hi=HU_WINDOW[1]):
    """Clamp HU values to the liver-relevant window (idempotent)."""
    return Volume(np.clip(vol.data, lo, hi), vol.spacing, vol.origin)


def normalize_windowed(data, lo=HU_WINDOW[0], hi=HU_WINDOW[1]):
    """Map windowed HU values to [0, 1] as float32."""
    return ((np.asarray(data, dtype=np.float32) - lo) / (hi - lo)).astype(np.float32)


def _axis_coords(n_in, n_out, in_spacing, out_spacing):
    """Source coordinates (fractional voxel index) for each output index."""
    return np.arange(n_out) * (out_spacing / in_spacing)


def _gather_linear(data, axis, coords):
    n = data.shape[axis]
    i0 = np.clip(np.floor(coords).astype(int), 0, n - 1)
    i1 = np.minimum(i0 + 1, n - 1)
    w = (coords - i0).astype(data.dtype if data.dtype.kind == "f" else np.float64)
    moved = np.moveaxis(data, axis, -1)
    out = moved[..., i0] * (1 - w) + moved[..., i1] * w
    return np.moveaxis(out, -1, axis)


def _gather_nearest(data, axis, coords):
    n = data.shape[axis]
    idx = np.clip(np.rint(coords).astype(int), 0, n - 1)
    moved = np.moveaxis(data, axis, -1)
    return np.moveaxis(moved[..., idx], -1, axis)


def resample(vol, target_spacing, mode):
    """Resample onto a grid with the given spacing.

    New extents are round(old * spacing / target) per axis.  Images use
    trilinear interpolation (``mode='trilinear'``), label volumes nearest
    neighbour (``mode='nearest'``).  Identical spacing is a bit-equal fast
    path.
    """
    target_spacing = tuple(float(s) for s in target_spacing)
    if min(target_spacing) <= 0:
        raise VolumeError(f"target spacing must be positive, got {target_spacing}")
    if mode not in ("trilinear", "nearest"):
        raise VolumeError(f"resample mode must be 'trilinear' or 'nearest', got {mode!r}")
    if target_spacing == vol.spacing:
        return vol.copy()
    new_extents = tuple(
        int(round(n * s / t)) for n, s, t in zip(vol.extents, vol.spacing, target_spacing)
    )
    if min(new_extents) < 1:
        raise VolumeError(
            f"resampling {vol.extents} @ {vol.spacing} to {target_spacing} "
            f"gives degenerate extents {new_extents}"
        )
    data = vol.data
    if mode == "trilinear":
        data = data.astype(np.float32, copy=False)
    for axis in range(3):
        coords = _axis_coords(vol.extents[axis], new_extents[axis], vol.spacing[axis], target_spacing[axis])
        if mode == "trilinear":
            data = _gather_linear(data, axis, coords)
        else:
            data = _gather_nearest(data, axis, coords)
    return Volume(np.ascontiguousarray(data), target_spacing, vol.origin)


def resize_nearest(data, target_extents):
    """Nearest-neighbour resize of a 3D array onto exact target extents."""
    out = data
    for axis in range(3):
        n_in, n_out = out.shape[axis], target_extents[axis]
        if n_in == n_out:
            continue
        coords = np.arange(n_out) * (n_in / n_out) + 0.5 * (n_in / n_out) - 0.5
        out = _gather_nearest(out, axis, coords)
    return np.ascontiguousarray(out)


@dataclass
class CaseEntry:
    case_id: str
    image: str
    label: str
    split: str = "train"


@dataclass
class Manifest:
    cases: list
    preprocess: str = PREPROCESS_RECIPE
    path: str = ""

    def split(self, tag):
        return [c for c in self.cases if c.split == tag]


def write_manifest(path, cases, preprocess=PREPROCESS_RECIPE):
    with open(path, "w") as f:
        f.write(f"# preprocess: {preprocess}\n")
        f.write("# case\timage\tlabel\tsplit\n")
        for c in cases:
            f.write(f"{c.case_id}\t{c.image}\t{c.label}\t{c.split}\n")


def read_manifest(path):
    base = os.path.dirname(os.path.abspath(path))
    cases = []
    preprocess = PREPROCESS_RECIPE
    with open(path) as f:
        for line in f:
            line = line.rstrip("\n")
            if line.startswith("# preprocess:"):
                preprocess = line.split(":", 1)[1].strip()
                continue
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise VolumeError(f"{path}: malformed manifest row {line!r}")
            case_id, image, label, split = parts
            cases.append(
                CaseEntry(
                    case_id,
                    os.path.join(base, image),
                    os.path.join(base, label),
                    split,
                )
            )
    return Manifest(cases, preprocess, os.path.abspath(path))
