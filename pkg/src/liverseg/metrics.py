"""Segmentation evaluation: Dice (per case and pooled-global), volumetric
overlap error, relative volume difference, symmetric surface distances in
millimetres, and tumor-burden RMSE.

Conventions (matching the common challenge evaluators): two empty masks
have Dice 1; surface distances are undefined when either mask is empty and
are reported as explicit flags, never silent zeros; RVD is signed as
(|prediction| - |truth|) / |truth|.  Surfaces are mask voxels with at least
one background 6-neighbour, with the volume border counting as background.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


def _counts(truth, pred):
    truth = np.asarray(truth, dtype=bool)
    pred = np.asarray(pred, dtype=bool)
    if truth.shape != pred.shape:
        raise ValueError(f"mask shapes differ: {truth.shape} vs {pred.shape}")
    inter = int(np.logical_and(truth, pred).sum())
    return int(truth.sum()), int(pred.sum()), inter


def dice(truth, pred):
    """2|A∩B| / (|A| + |B|); both empty counts as perfect agreement (1)."""
    a, b, inter = _counts(truth, pred)
    if a + b == 0:
        return 1.0
    return 2.0 * inter / (a + b)


def dice_aggregate(pairs):
    """(per-case mean, pooled global) Dice over (truth, pred) mask pairs."""
    if not pairs:
        raise ValueError("dice_aggregate: need at least one case")
    per_case = [dice(t, p) for t, p in pairs]
    inter = sum(_counts(t, p)[2] for t, p in pairs)
    total = sum(_counts(t, p)[0] + _counts(t, p)[1] for t, p in pairs)
    global_dice = 1.0 if total == 0 else 2.0 * inter / total
    return float(np.mean(per_case)), global_dice


def voe(truth, pred):
    """Volumetric overlap error, 1 - |A∩B| / |A∪B|."""
    a, b, inter = _counts(truth, pred)
    union = a + b - inter
    if union == 0:
        return 0.0
    return 1.0 - inter / union


def rvd(truth, pred):
    """Signed relative volume difference (|pred| - |truth|) / |truth|.

    Undefined (None) when the truth mask is empty.
    """
    a, b, _ = _counts(truth, pred)
    if a == 0:
        return None
    return (b - a) / a


def surface_voxels(mask):
    """Mask voxels with a background 6-neighbour; borders count as background."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.zeros_like(mask)
    interior = ndimage.binary_erosion(
        mask, structure=ndimage.generate_binary_structure(mask.ndim, 1), border_value=0
    )
    return mask & ~interior


def surface_distances(truth, pred, spacing):
    """(ASD, RMSD) in mm over the symmetric multiset of nearest-surface
    distances (anisotropic Euclidean, voxel centers).

    Returns None when either mask is empty (reported as undefined upstream).
    """
    truth = np.asarray(truth, dtype=bool)
    pred = np.asarray(pred, dtype=bool)
    if truth.shape != pred.shape:
        raise ValueError(f"mask shapes differ: {truth.shape} vs {pred.shape}")
    if not truth.any() or not pred.any():
        return None
    surf_t = surface_voxels(truth)
    surf_p = surface_voxels(pred)
    # distance field to the other surface, sampled on this surface
    dist_to_p = ndimage.distance_transform_edt(~surf_p, sampling=spacing)
    dist_to_t = ndimage.distance_transform_edt(~surf_t, sampling=spacing)
    d = np.concatenate([dist_to_p[surf_t], dist_to_t[surf_p]])
    return float(d.mean()), float(np.sqrt((d ** 2).mean()))


def tumor_burden(labels):
    """Tumor volume over whole-organ (liver plus tumor) volume.

    None when the organ is empty.
    """
    labels = np.asarray(labels)
    organ = int((labels > 0).sum())
    if organ == 0:
        return None
    return int((labels == 2).sum()) / organ


def tumor_burden_rmse(case_pairs):
    """RMSE of per-case burden differences over (truth, pred) label volumes.

    Cases where either organ mask is empty are excluded and returned
    alongside the score.
    """
    residuals = []
    excluded = []
    for case_id, truth, pred in case_pairs:
        bt = tumor_burden(truth)
        bp = tumor_burden(pred)
        if bt is None or bp is None:
            excluded.append(case_id)
            continue
        residuals.append(bp - bt)
    if not residuals:
        return None, excluded
    return float(np.sqrt(np.mean(np.square(residuals)))), excluded


STRUCTURES = {"liver": lambda labels: labels > 0, "tumor": lambda labels: labels == 2}

REPORT_FIELDS = (
    "case",
    "dice",
    "voe",
    "rvd",
    "asd_mm",
    "rmsd_mm",
    "tumor_burden_pred",
    "tumor_burden_true",
    "flags",
)


@dataclass
class CaseRecord:
    case: str
    dice: float
    voe: float
    rvd: float | None
    asd_mm: float | None
    rmsd_mm: float | None
    tumor_burden_pred: float | None
    tumor_burden_true: float | None
    flags: list = field(default_factory=list)


@dataclass
class MetricsReport:
    """Per-case records by structure plus global aggregates."""

    per_case: dict            # structure -> [CaseRecord]
    dice_per_case_mean: dict  # structure -> float
    dice_global: dict         # structure -> float
    tumor_burden_rmse: float | None
    excluded_cases: list


def evaluate_cases(cases, spacing_by_case=None):
    """Compute the full report from (case_id, truth_labels, pred_labels).

    ``spacing_by_case`` maps case_id to mm spacing (default isotropic 1 mm).
    """
    per_case = {s: [] for s in STRUCTURES}
    pairs = {s: [] for s in STRUCTURES}
    for case_id, truth, pred in cases:
        spacing = (spacing_by_case or {}).get(case_id, (1.0, 1.0, 1.0))
        bt = tumor_burden(truth)
        bp = tumor_burden(pred)
        for struct, select in STRUCTURES.items():
            t = select(np.asarray(truth))
            p = select(np.asarray(pred))
            flags = []
            r = rvd(t, p)
            if r is None:
                flags.append("rvd_undefined")
            sd = surface_distances(t, p, spacing)
            if sd is None:
                flags.append("surface_distance_undefined")
                asd = rmsd = None
            else:
                asd, rmsd = sd
            per_case[struct].append(
                CaseRecord(case_id, dice(t, p), voe(t, p), r, asd, rmsd, bp, bt, flags)
            )
            pairs[struct].append((t, p))
    mean = {}
    pooled = {}
    for struct in STRUCTURES:
        mean[struct], pooled[struct] = dice_aggregate(pairs[struct])
    burden_rmse, excluded = tumor_burden_rmse([(c, t, p) for c, t, p in cases])
    return MetricsReport(per_case, mean, pooled, burden_rmse, excluded)


def _fmt(value):
    if value is None:
        return "undefined"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def format_report(report):
    """Serialize a report as structured text, one document per run."""
    lines = ["# liverseg metrics report"]
    for struct in STRUCTURES:
        lines.append(f"[per-case {struct}]")
        lines.append("\t".join(REPORT_FIELDS))
        for rec in report.per_case[struct]:
            lines.append(
                "\t".join(
                    [
                        rec.case,
                        _fmt(rec.dice),
                        _fmt(rec.voe),
                        _fmt(rec.rvd),
                        _fmt(rec.asd_mm),
                        _fmt(rec.rmsd_mm),
                        _fmt(rec.tumor_burden_pred),
                        _fmt(rec.tumor_burden_true),
                        ",".join(rec.flags) if rec.flags else "-",
                    ]
                )
            )
        lines.append(f"[global {struct}]")
        lines.append(f"dice_per_case_mean\t{_fmt(report.dice_per_case_mean[struct])}")
        lines.append(f"dice_global\t{_fmt(report.dice_global[struct])}")
    lines.append("[global burden]")
    lines.append(f"tumor_burden_rmse\t{_fmt(report.tumor_burden_rmse)}")
    if report.excluded_cases:
        lines.append("excluded_cases\t" + ",".join(report.excluded_cases))
    return "\n".join(lines) + "\n"
