"""Deterministic coronary-calcium quantification.

Pipeline: threshold the 65x65x5 scoring patch at 130 HU, label connected
lesions (26-connectivity), then derive the classical scores: Agatston
(per-lesion, per-slice area x density weight, scaled by slice thickness
over 3 mm), volume in mm^3, square root of volume, and the conventional
risk category. All functions are pure.
"""

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .imaging import ScoringPatch

DEFAULT_THRESHOLD_HU = 130
DEFAULT_MIN_AREA_MM2 = 1.0

# 26-connectivity in 3D (8-connectivity in-plane)
_STRUCTURE_26 = np.ones((3, 3, 3), dtype=bool)


class RiskCategory(enum.IntEnum):
    NONE = 0
    I = 1
    II = 2
    III = 3
    IV = 4


@dataclass(frozen=True)
class CalciumMask:
    """Boolean calcium mask over a scoring patch.

    mask[v] is true exactly where the source HU is >= threshold_hu.
    source_hu is retained so lesion peak densities can be computed.
    """

    mask: np.ndarray
    spacing: tuple
    threshold_hu: int = DEFAULT_THRESHOLD_HU
    source_hu: np.ndarray | None = None

    def __post_init__(self):
        m = np.ascontiguousarray(self.mask, dtype=bool)
        if m.ndim != 3:
            raise ValueError(f"mask must be 3D, got shape {m.shape}")
        m.flags.writeable = False
        object.__setattr__(self, "mask", m)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if self.source_hu is not None:
            src = np.ascontiguousarray(self.source_hu)
            if src.shape != m.shape:
                raise ValueError(
                    f"source HU shape {src.shape} does not match mask {m.shape}"
                )
            src.flags.writeable = False
            object.__setattr__(self, "source_hu", src)


@dataclass(frozen=True)
class Lesion:
    """One connected calcified component.

    voxels: (n, 3) array of (row, col, slice) indices, lexicographically sorted
    area_mm2_by_slice: per-slice in-plane area
    peak_hu_by_slice: per-slice maximum HU (absent when the mask has no source HU)
    """

    voxels: np.ndarray
    area_mm2_by_slice: dict
    peak_hu_by_slice: dict
    peak_hu: float

    @property
    def n_voxels(self) -> int:
        return self.voxels.shape[0]


@dataclass(frozen=True)
class ScoreReport:
    """All calcium quantities for one subject."""

    agatston: float
    risk_category: RiskCategory
    volume_mm3: float
    sqrt_volume: float
    subjective_grade: int | None = None

    def __post_init__(self):
        if self.agatston < 0 or self.volume_mm3 < 0:
            raise ValueError("scores must be non-negative")
        if not math.isclose(self.sqrt_volume ** 2, self.volume_mm3,
                            rel_tol=1e-9, abs_tol=1e-12):
            raise ValueError(
                f"sqrt_volume^2 = {self.sqrt_volume ** 2} inconsistent with "
                f"volume_mm3 = {self.volume_mm3}"
            )
        if self.subjective_grade is not None and self.subjective_grade not in (0, 1, 2, 3):
            raise ValueError(f"subjective grade must be in 0..3, got {self.subjective_grade}")


def detect_calcium(patch: ScoringPatch, threshold_hu: int = DEFAULT_THRESHOLD_HU) -> CalciumMask:
    """Threshold the patch: a voxel is calcium iff HU >= threshold_hu."""
    return CalciumMask(
        mask=patch.voxels >= threshold_hu,
        spacing=patch.spacing,
        threshold_hu=int(threshold_hu),
        source_hu=patch.voxels,
    )


def find_lesions(mask: CalciumMask, min_area_mm2: float = DEFAULT_MIN_AREA_MM2) -> list:
    """Label connected components (26-connectivity) and keep those whose
    maximum single-slice area reaches min_area_mm2.

    Returned lesions are ordered by decreasing voxel count, ties broken by
    smallest flat voxel index.
    """
    pixel_area = mask.spacing[0] * mask.spacing[1]
    labels, n_components = ndimage.label(mask.mask, structure=_STRUCTURE_26)
    lesions = []
    for comp in range(1, n_components + 1):
        rows, cols, slices = np.nonzero(labels == comp)
        slice_ids, counts = np.unique(slices, return_counts=True)
        areas = {int(s): float(c * pixel_area) for s, c in zip(slice_ids, counts)}
        if max(areas.values()) < min_area_mm2:
            continue
        voxels = np.stack([rows, cols, slices], axis=1)
        order = np.lexsort((slices, cols, rows))
        voxels = voxels[order]
        if mask.source_hu is not None:
            hu = mask.source_hu[rows, cols, slices]
            peaks = {int(s): float(hu[slices == s].max()) for s in slice_ids}
            peak = float(hu.max())
        else:
            peaks = {}
            peak = float("nan")
        lesions.append(Lesion(
            voxels=voxels,
            area_mm2_by_slice=areas,
            peak_hu_by_slice=peaks,
            peak_hu=peak,
        ))
    flat_index = [
        int(np.ravel_multi_index(l.voxels[0], mask.mask.shape)) for l in lesions
    ]
    order = sorted(range(len(lesions)), key=lambda i: (-lesions[i].n_voxels, flat_index[i]))
    return [lesions[i] for i in order]


def hu_weight(peak_hu: float) -> int:
    """Classical Agatston density weight from a lesion's slice peak HU."""
    if peak_hu < 130:
        return 0
    if peak_hu < 200:
        return 1
    if peak_hu < 300:
        return 2
    if peak_hu < 400:
        return 3
    return 4


def agatston_score(lesions, spacing) -> float:
    """Sum over lesions and slices of area x density weight, scaled by
    slice thickness over the 3 mm reference."""
    z_factor = float(spacing[2]) / 3.0
    total = 0.0
    for lesion in lesions:
        for slice_id, area in lesion.area_mm2_by_slice.items():
            if slice_id not in lesion.peak_hu_by_slice:
                raise ValueError("lesion lacks peak HU; build masks via detect_calcium")
            total += area * hu_weight(lesion.peak_hu_by_slice[slice_id])
    return total * z_factor


def volume_score(mask: CalciumMask) -> float:
    """Total volume in mm^3 of mask-true voxels."""
    voxel_volume = mask.spacing[0] * mask.spacing[1] * mask.spacing[2]
    return float(np.count_nonzero(mask.mask)) * voxel_volume


def sqrt_volume_score(volume_mm3: float) -> float:
    if volume_mm3 < 0:
        raise ValueError(f"volume must be non-negative, got {volume_mm3}")
    return math.sqrt(volume_mm3)


def risk_category(agatston: float) -> RiskCategory:
    """Conventional Agatston categories: 0, (0,10], (10,100], (100,400], >400."""
    if agatston < 0:
        raise ValueError(f"Agatston score must be non-negative, got {agatston}")
    if agatston == 0:
        return RiskCategory.NONE
    if agatston <= 10:
        return RiskCategory.I
    if agatston <= 100:
        return RiskCategory.II
    if agatston <= 400:
        return RiskCategory.III
    return RiskCategory.IV


def normalize_score(score: float, min_value: float, max_value: float) -> float:
    """Affine map of [min, max] onto [-1, 1]; out-of-range scores clamp."""
    if min_value >= max_value:
        raise ValueError(f"need min < max, got ({min_value}, {max_value})")
    clamped = min(max(score, min_value), max_value)
    return 2.0 * (clamped - min_value) / (max_value - min_value) - 1.0


def lesion_union_mask(lesions, shape, spacing, threshold_hu: int) -> CalciumMask:
    """Mask covering exactly the voxels of the given lesions."""
    mask = np.zeros(shape, dtype=bool)
    for lesion in lesions:
        mask[lesion.voxels[:, 0], lesion.voxels[:, 1], lesion.voxels[:, 2]] = True
    return CalciumMask(mask=mask, spacing=spacing, threshold_hu=threshold_hu)


def score_report(patch: ScoringPatch,
                 threshold_hu: int = DEFAULT_THRESHOLD_HU,
                 min_area_mm2: float = DEFAULT_MIN_AREA_MM2,
                 subjective_grade: int | None = None) -> ScoreReport:
    """Full quantification of one scoring patch.

    The reported volume covers lesion voxels only, so that zero Agatston,
    zero volume, and "no lesions" coincide even when isolated voxels fall
    below the minimum lesion area.
    """
    mask = detect_calcium(patch, threshold_hu)
    lesions = find_lesions(mask, min_area_mm2)
    agatston = agatston_score(lesions, mask.spacing)
    volume = volume_score(
        lesion_union_mask(lesions, mask.mask.shape, mask.spacing, threshold_hu)
    )
    return ScoreReport(
        agatston=agatston,
        risk_category=risk_category(agatston),
        volume_mm3=volume,
        sqrt_volume=sqrt_volume_score(volume),
        subjective_grade=subjective_grade,
    )
