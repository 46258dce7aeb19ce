"""Synthetic cardiac CT phantom generation.

Each subject is a small HU volume with soft-tissue background, a ring
texture whose signed amplitude is a latent (non-calcium) risk factor,
ellipsoidal calcifications planted inside the scoring window around a
recorded center, and Gaussian noise. Ground-truth masks and scores come
from the noise-free rendering, and survival labels follow a known
logistic risk model, so every downstream result can be checked against
the planted truth.
"""

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError
from .imaging import CtVolume, HU_MAX, HU_MIN, extract_scoring_patch
from .scoring import ScoreReport, normalize_score, score_report
from .seeding import derive_seed
from .volume_io import write_volume

MANIFEST_NAME = "manifest.csv"
MANIFEST_COLUMNS = [
    "subject_id", "volume_file", "center_row", "center_col", "center_slice",
    "grade", "gt_agatston", "gt_volume_mm3", "label",
]

DEFAULT_GRADE_CUTPOINTS = (10.0, 100.0, 400.0)


@dataclass(frozen=True)
class LabelModel:
    """Logistic survival model: p(nonsurvivor) =
    sigmoid(a * agatston_norm + b * latent + bias), where agatston_norm
    maps [0, agatston_ref] onto [-1, 1] with clamping."""

    a: float = 2.0
    b: float = 2.0
    bias: float = 0.0
    agatston_ref: float = 300.0

    def probability(self, gt_agatston: float, latent_factor: float) -> float:
        ag_norm = normalize_score(gt_agatston, 0.0, self.agatston_ref)
        logit = self.a * ag_norm + self.b * latent_factor + self.bias
        return 1.0 / (1.0 + math.exp(-logit))


@dataclass(frozen=True)
class PhantomSpec:
    """Generation parameters for a synthetic cohort."""

    n_subjects: int = 180
    balanced: bool = True
    volume_shape: tuple = (200, 200, 9)          # (rows, cols, slices)
    spacing: tuple = (0.7, 0.7, 3.0)             # mm
    background_hu_mean: float = 40.0
    background_hu_std: float = 10.0
    noise_sigma: float = 15.0
    lesion_rate: float = 1.5                     # Poisson mean lesion count
    lesion_radius_mm: tuple = (1.0, 4.0)
    # discrete calibration densities, like the hydroxyapatite inserts of
    # physical CAC phantoms; keeping each level well clear of the 200/300/400
    # weight cut-points makes the planted score measurable under noise
    lesion_hu_levels: tuple = (220.0, 320.0, 450.0)
    latent_amplitude: float = 0.10
    latent_period_mm: float = 40.0
    label_model: LabelModel = field(default_factory=LabelModel)
    grade_noise: float = 0.10
    grade_cutpoints: tuple = DEFAULT_GRADE_CUTPOINTS
    center_jitter_px: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be >= 1")
        if self.balanced and self.n_subjects % 2:
            raise ValueError("balanced cohorts need an even n_subjects")
        if self.lesion_rate < 0:
            raise ValueError("lesion rate must be >= 0")
        lo, hi = self.lesion_radius_mm
        if lo > hi:
            raise ValueError(f"lesion_radius_mm range is empty: ({lo}, {hi})")
        if lo <= 0:
            raise ValueError("lesion radii must be positive")
        if hi > 6.0:
            raise ValueError("lesion radius above 6 mm cannot fit the scoring window")
        if not self.lesion_hu_levels:
            raise ValueError("need at least one lesion HU level")
        if min(self.lesion_hu_levels) < 130:
            raise ValueError("lesion HU below the 130 HU detection threshold "
                             "breaks the planted ground truth")
        bg_peak = (self.background_hu_mean + 4 * self.background_hu_std) \
            * (1.0 + self.latent_amplitude)
        if bg_peak >= 130:
            raise ValueError("background can cross the 130 HU threshold; "
                             "lower its mean/std or the latent amplitude")
        if not 0 <= self.grade_noise <= 1:
            raise ValueError("grade_noise must be a probability")
        if len(self.grade_cutpoints) != 3 or not all(
                a < b for a, b in zip(self.grade_cutpoints, self.grade_cutpoints[1:])):
            raise ValueError("grade cutpoints must be 3 strictly increasing values")
        rows, cols, slices = self.volume_shape
        if rows < 161 or cols < 161 or slices < 5:
            raise ValueError("volume too small for both patch geometries")


@dataclass(frozen=True)
class PlantedLesion:
    """One ellipsoid: center offset from the recorded center (mm, in
    (row, col, slice) axes), semi-axes (mm), and its HU value."""

    offset_mm: tuple
    radii_mm: tuple
    hu: float


@dataclass(frozen=True)
class PhantomSample:
    volume: CtVolume
    center: tuple                     # (row, col, slice)
    gt_mask: np.ndarray               # planted calcium voxels, full volume
    gt_scores: ScoreReport
    latent_factor: float
    label: int
    risk_p: float
    lesions: tuple = ()

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 (survivor) or 1 (nonsurvivor), got {self.label}")


def rasterize_ellipsoid(shape, spacing, center_mm, radii_mm) -> np.ndarray:
    """Voxelize an ellipsoid by center-of-voxel inclusion: voxel (r, c, s)
    is inside iff sum(((coord - center) / radius)^2) <= 1, with voxel
    centers at index * spacing."""
    rows, cols, slices = shape
    ry = (np.arange(rows) * spacing[1] - center_mm[0]) / radii_mm[0]
    cx = (np.arange(cols) * spacing[0] - center_mm[1]) / radii_mm[1]
    sz = (np.arange(slices) * spacing[2] - center_mm[2]) / radii_mm[2]
    return (ry[:, None, None] ** 2 + cx[None, :, None] ** 2
            + sz[None, None, :] ** 2) <= 1.0


def _ring_modulation(spec: PhantomSpec, center) -> np.ndarray:
    """In-plane ring texture around the recorded center, values in [0, 1].

    The nonzero mean is deliberate: besides the ring pattern itself, the
    signed latent factor shifts the average soft-tissue intensity, a
    global cue that survives random crops, resizing and pooling.  Lesion
    voxels are rendered as constant plateaus on top, so the scalar CAC
    measurements stay blind to this cue by construction."""
    rows, cols, _ = spec.volume_shape
    dy = (np.arange(rows) - center[0]) * spec.spacing[1]
    dx = (np.arange(cols) - center[1]) * spec.spacing[0]
    r = np.hypot(dy[:, None], dx[None, :])
    return 0.5 + 0.5 * np.cos(2.0 * np.pi * r / spec.latent_period_mm)


def render_sample(spec: PhantomSpec, subject_id: str, center, lesions,
                  background_level: float, latent_factor: float,
                  noise: np.ndarray | None = None) -> tuple:
    """Deterministic rendering of one subject.

    Returns (volume, gt_mask, gt_report) where gt_mask/gt_report are
    computed from the noise-free rendering.
    """
    rows, cols, slices = spec.volume_shape
    ring = _ring_modulation(spec, center)
    background = background_level * (
        1.0 + spec.latent_amplitude * latent_factor * ring
    )
    hu = np.repeat(background[:, :, None], slices, axis=2)

    gt_mask = np.zeros(spec.volume_shape, dtype=bool)
    center_mm = (center[0] * spec.spacing[1],
                 center[1] * spec.spacing[0],
                 center[2] * spec.spacing[2])
    for lesion in lesions:
        lesion_center = tuple(c + o for c, o in zip(center_mm, lesion.offset_mm))
        mask = rasterize_ellipsoid(spec.volume_shape, spec.spacing,
                                   lesion_center, lesion.radii_mm)
        hu[mask] = np.maximum(hu[mask], lesion.hu)
        gt_mask |= mask

    clean = np.clip(np.rint(hu), HU_MIN, HU_MAX).astype(np.int16)
    if noise is None:
        rendered = clean
    else:
        rendered = np.clip(np.rint(hu + noise), HU_MIN, HU_MAX).astype(np.int16)

    clean_volume = CtVolume(voxels=clean, spacing=spec.spacing, id=subject_id)
    gt_report = score_report(
        extract_scoring_patch(clean_volume, center[:2], center[2])
    )
    volume = CtVolume(voxels=rendered, spacing=spec.spacing, id=subject_id)
    return volume, gt_mask, gt_report


def _sample_lesions(spec: PhantomSpec, rng: np.random.Generator) -> list:
    """Draw Poisson-many ellipsoids that fit entirely inside the 65x65x5
    scoring window around the recorded center."""
    count = int(rng.poisson(spec.lesion_rate))
    in_plane_half = 32 * min(spec.spacing[0], spec.spacing[1])
    z_half = 2 * spec.spacing[2]
    lesions = []
    for _ in range(count):
        radii = tuple(rng.uniform(*spec.lesion_radius_mm) for _ in range(3))
        lim_r = max(0.0, in_plane_half - radii[0] - spec.spacing[1])
        lim_c = max(0.0, in_plane_half - radii[1] - spec.spacing[0])
        lim_z = max(0.0, z_half - radii[2])
        offset = (rng.uniform(-lim_r, lim_r),
                  rng.uniform(-lim_c, lim_c),
                  rng.uniform(-lim_z, lim_z))
        level = int(rng.integers(0, len(spec.lesion_hu_levels)))
        hu = float(np.rint(spec.lesion_hu_levels[level]))
        lesions.append(PlantedLesion(offset_mm=offset, radii_mm=radii, hu=hu))
    return lesions


def assign_grade(agatston: float, cutpoints=DEFAULT_GRADE_CUTPOINTS,
                 noise_probability: float = 0.0,
                 rng: np.random.Generator | None = None) -> int:
    """4-point subjective-style grade (0 none, 1 minimal, 2 moderate,
    3 severe) bucketed by Agatston cutpoints, with optional +-1 flips
    mimicking inter-reader variation."""
    if len(cutpoints) != 3 or not all(a < b for a, b in zip(cutpoints, cutpoints[1:])):
        raise ValueError(f"cutpoints must be strictly increasing, got {cutpoints}")
    if agatston == 0:
        grade = 0
    elif agatston <= cutpoints[0]:
        grade = 1
    elif agatston <= cutpoints[1]:
        grade = 2
    else:
        grade = 3
    if noise_probability > 0:
        if rng is None:
            raise ValueError("grade noise needs an rng")
        if rng.uniform() < noise_probability:
            step = 1 if rng.uniform() < 0.5 else -1
            grade = min(3, max(0, grade + step))
    return grade


def assign_label(gt_agatston: float, latent_factor: float, model: LabelModel,
                 rng: np.random.Generator) -> tuple:
    """Bernoulli survival label from the logistic risk model.

    Returns (label, probability); label 1 means nonsurvivor.
    """
    p = model.probability(gt_agatston, latent_factor)
    return int(rng.uniform() < p), p


def generate_sample(spec: PhantomSpec, rng: np.random.Generator,
                    subject_id: str = "subject") -> PhantomSample:
    """Generate one subject from a PhantomSpec using the given rng stream."""
    rows, cols, slices = spec.volume_shape
    j = spec.center_jitter_px
    center = (rows // 2 + int(rng.integers(-j, j + 1)),
              cols // 2 + int(rng.integers(-j, j + 1)),
              slices // 2)
    background_level = float(np.clip(
        rng.normal(spec.background_hu_mean, spec.background_hu_std),
        spec.background_hu_mean - 4 * spec.background_hu_std,
        spec.background_hu_mean + 4 * spec.background_hu_std,
    ))
    latent_factor = float(rng.uniform(-1.0, 1.0))
    lesions = _sample_lesions(spec, rng)
    noise = rng.normal(0.0, spec.noise_sigma, spec.volume_shape) \
        if spec.noise_sigma > 0 else None
    volume, gt_mask, gt_report = render_sample(
        spec, subject_id, center, lesions, background_level, latent_factor, noise
    )
    grade = assign_grade(gt_report.agatston, spec.grade_cutpoints,
                         spec.grade_noise, rng)
    gt_report = replace(gt_report, subjective_grade=grade)
    label, p = assign_label(gt_report.agatston, latent_factor, spec.label_model, rng)
    return PhantomSample(
        volume=volume, center=center, gt_mask=gt_mask, gt_scores=gt_report,
        latent_factor=latent_factor, label=label, risk_p=p, lesions=tuple(lesions),
    )


def generate_cohort(spec: PhantomSpec) -> list:
    """Generate the full cohort deterministically.

    Each attempt uses a seed derived from (spec.seed, attempt index), so
    results do not depend on scheduling. In balanced mode, attempts are
    kept only while their label's quota (n/2 each) is open, mirroring a
    case-control cohort design.
    """
    quota = {0: spec.n_subjects // 2, 1: spec.n_subjects - spec.n_subjects // 2} \
        if spec.balanced else None
    samples = []
    attempt = 0
    max_attempts = 200 * spec.n_subjects + 1000
    while len(samples) < spec.n_subjects:
        if attempt >= max_attempts:
            raise RuntimeError(
                f"balanced cohort did not fill after {max_attempts} attempts; "
                "label model is too skewed"
            )
        rng = np.random.default_rng(derive_seed(spec.seed, "subject", attempt))
        subject_id = f"S{len(samples):04d}"
        sample = generate_sample(spec, rng, subject_id)
        attempt += 1
        if quota is not None:
            if quota[sample.label] == 0:
                continue
            quota[sample.label] -= 1
        samples.append(sample)
    return samples


@dataclass(frozen=True)
class ManifestRow:
    subject_id: str
    volume_file: str
    center_row: int
    center_col: int
    center_slice: int
    grade: int
    gt_agatston: float
    gt_volume_mm3: float
    label: int


def _format_float(x: float) -> str:
    return repr(float(x))


def generate_dataset(spec: PhantomSpec, out_dir) -> Path:
    """Write one volume file per subject plus the manifest CSV; returns
    the manifest path. Regenerating with the same spec is byte-identical."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directory {out_dir}: {exc}") from exc
    samples = generate_cohort(spec)
    manifest_path = out_dir / MANIFEST_NAME
    rows = []
    for sample in samples:
        fname = f"{sample.volume.id}.cacv"
        write_volume(out_dir / fname, sample.volume)
        rows.append([
            sample.volume.id, fname,
            str(sample.center[0]), str(sample.center[1]), str(sample.center[2]),
            str(sample.gt_scores.subjective_grade),
            _format_float(sample.gt_scores.agatston),
            _format_float(sample.gt_scores.volume_mm3),
            str(sample.label),
        ])
    with open(manifest_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        writer.writerows(rows)
    return manifest_path


def load_manifest(path) -> list:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != MANIFEST_COLUMNS:
                raise DataError(f"manifest {path} has unexpected header {header}")
            rows = []
            for rec in reader:
                if len(rec) != len(MANIFEST_COLUMNS):
                    raise DataError(f"manifest {path}: malformed row {rec}")
                rows.append(ManifestRow(
                    subject_id=rec[0], volume_file=rec[1],
                    center_row=int(rec[2]), center_col=int(rec[3]),
                    center_slice=int(rec[4]), grade=int(rec[5]),
                    gt_agatston=float(rec[6]), gt_volume_mm3=float(rec[7]),
                    label=int(rec[8]),
                ))
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    return rows
