"""Phantom generation: planted ground truth must be recoverable."""

import math

import numpy as np
import pytest

from cacrisk.imaging import extract_scoring_patch
from cacrisk.phantom import (
    LabelModel,
    PhantomSpec,
    assign_grade,
    generate_cohort,
    generate_dataset,
    generate_sample,
    load_manifest,
    rasterize_ellipsoid,
)
from cacrisk.scoring import score_report
from cacrisk.volume_io import read_volume


def small_spec(**kw):
    defaults = dict(n_subjects=4, balanced=False, seed=3)
    defaults.update(kw)
    return PhantomSpec(**defaults)


# ------------------------------------------------------------------- spec


def test_spec_validation():
    with pytest.raises(ValueError):
        PhantomSpec(n_subjects=0)
    with pytest.raises(ValueError):
        PhantomSpec(n_subjects=5, balanced=True)
    with pytest.raises(ValueError):
        PhantomSpec(lesion_radius_mm=(3.0, 2.0))
    with pytest.raises(ValueError):
        PhantomSpec(lesion_radius_mm=(0.0, 2.0))
    with pytest.raises(ValueError):
        PhantomSpec(lesion_hu_levels=())
    with pytest.raises(ValueError):
        PhantomSpec(lesion_hu_levels=(129.0,))
    with pytest.raises(ValueError):
        PhantomSpec(background_hu_mean=120.0)  # background reaches 130 HU
    with pytest.raises(ValueError):
        PhantomSpec(grade_cutpoints=(10.0, 10.0, 400.0))
    with pytest.raises(ValueError):
        PhantomSpec(volume_shape=(100, 100, 9))
    with pytest.raises(ValueError):
        PhantomSpec(grade_noise=1.5)


# -------------------------------------------------------------- rasterize


def test_rasterize_matches_per_voxel_enumeration():
    rng = np.random.default_rng(0)
    shape, spacing = (40, 40, 7), (0.7, 0.7, 3.0)
    for _ in range(10):
        center = (rng.uniform(5, 20), rng.uniform(5, 20), rng.uniform(3, 15))
        radii = tuple(rng.uniform(0.8, 5.0) for _ in range(3))
        mask = rasterize_ellipsoid(shape, spacing, center, radii)
        for _ in range(200):
            r = int(rng.integers(0, shape[0]))
            c = int(rng.integers(0, shape[1]))
            s = int(rng.integers(0, shape[2]))
            inside = (
                ((r * spacing[1] - center[0]) / radii[0]) ** 2
                + ((c * spacing[0] - center[1]) / radii[1]) ** 2
                + ((s * spacing[2] - center[2]) / radii[2]) ** 2
            ) <= 1.0
            assert mask[r, c, s] == inside


def test_rasterize_sphere_volume_converges():
    # fine spacing: voxelized volume approaches (4/3) pi r^3
    shape, spacing, r = (80, 80, 80), (0.25, 0.25, 0.25), 5.0
    mask = rasterize_ellipsoid(shape, spacing, (10.0, 10.0, 10.0), (r, r, r))
    vox_volume = mask.sum() * spacing[0] * spacing[1] * spacing[2]
    assert vox_volume == pytest.approx(4.0 / 3.0 * math.pi * r ** 3, rel=0.02)


# ------------------------------------------------------------ label model


def test_label_model_probability_values():
    m = LabelModel(a=2.0, b=2.0, bias=0.0, agatston_ref=300.0)
    # zero calcium maps to -1, so logit = -2 + 2 * latent
    assert m.probability(0.0, 0.0) == pytest.approx(1 / (1 + math.exp(2)))
    assert m.probability(0.0, 1.0) == pytest.approx(0.5)
    # at the reference the normalized score saturates at +1
    assert m.probability(300.0, 1.0) == pytest.approx(1 / (1 + math.exp(-4)))
    assert m.probability(10_000.0, 1.0) == m.probability(300.0, 1.0)
    mid = LabelModel(a=3.0, b=0.0, bias=0.0, agatston_ref=300.0)
    assert mid.probability(150.0, 0.77) == pytest.approx(0.5)


def test_label_model_monotone_in_both_inputs():
    m = LabelModel(a=1.5, b=2.5, bias=-0.3, agatston_ref=200.0)
    ps = [m.probability(ag, 0.1) for ag in np.linspace(0, 250, 30)]
    assert all(a <= b for a, b in zip(ps, ps[1:]))
    ps = [m.probability(50.0, l) for l in np.linspace(-1, 1, 30)]
    assert all(a < b for a, b in zip(ps, ps[1:]))


# ----------------------------------------------------------------- grades


def test_grade_buckets():
    assert assign_grade(0.0) == 0
    assert assign_grade(0.1) == 1
    assert assign_grade(10.0) == 1
    assert assign_grade(10.5) == 2
    assert assign_grade(100.0) == 2
    assert assign_grade(100.5) == 3
    assert assign_grade(5000.0) == 3


def test_grade_noise_flips_at_most_one_step():
    rng = np.random.default_rng(1)
    for ag in (0.0, 5.0, 50.0, 500.0):
        base = assign_grade(ag)
        for _ in range(50):
            g = assign_grade(ag, noise_probability=1.0, rng=rng)
            assert abs(g - base) <= 1
            assert 0 <= g <= 3
    with pytest.raises(ValueError):
        assign_grade(1.0, noise_probability=0.5, rng=None)
    with pytest.raises(ValueError):
        assign_grade(1.0, cutpoints=(5.0, 4.0, 3.0))


# ------------------------------------------------------------- generation


def test_noise_free_ground_truth_is_exact():
    """Scoring the stored noise-free volume reproduces the manifest's
    planted scores exactly."""
    spec = small_spec(n_subjects=6, noise_sigma=0.0, seed=11)
    rng_stream = [generate_sample(spec, np.random.default_rng(i), f"S{i}")
                  for i in range(6)]
    for sample in rng_stream:
        patch = extract_scoring_patch(
            sample.volume, sample.center[:2], sample.center[2])
        report = score_report(patch)
        assert report.agatston == sample.gt_scores.agatston
        assert report.volume_mm3 == sample.gt_scores.volume_mm3


def test_lesions_confined_to_scoring_window():
    spec = small_spec(n_subjects=1, lesion_rate=6.0, seed=21)
    for i in range(8):
        sample = generate_sample(spec, np.random.default_rng(i))
        rows, cols, slices = np.nonzero(sample.gt_mask)
        if rows.size == 0:
            continue
        cr, cc, cs = sample.center
        assert rows.min() >= cr - 32 and rows.max() <= cr + 32
        assert cols.min() >= cc - 32 and cols.max() <= cc + 32
        assert slices.min() >= cs - 2 and slices.max() <= cs + 2


def test_latent_amplitude_zero_gives_flat_background():
    spec = small_spec(n_subjects=1, latent_amplitude=0.0, noise_sigma=0.0,
                      lesion_rate=0.0)
    sample = generate_sample(spec, np.random.default_rng(5))
    assert np.unique(sample.volume.voxels).size == 1


def test_latent_sign_shifts_mean_intensity():
    spec = small_spec(n_subjects=1, latent_amplitude=0.4, noise_sigma=0.0,
                      lesion_rate=0.0, background_hu_std=0.0)
    means = {}
    for i in range(40):
        s = generate_sample(spec, np.random.default_rng(i))
        means[i] = (s.latent_factor, float(s.volume.voxels.mean()))
    pos = [m for l, m in means.values() if l > 0.3]
    neg = [m for l, m in means.values() if l < -0.3]
    assert np.mean(pos) > np.mean(neg)


def test_noisy_scores_stay_within_5_percent():
    """Measured Agatston on noisy volumes tracks the planted score: with
    sigma <= 20 HU and all lesion densities >= 200 HU, relative error
    stays below 5% whenever calcium is present (500 subjects)."""
    spec = PhantomSpec(
        n_subjects=500, balanced=False, noise_sigma=20.0,
        lesion_hu_levels=(220.0, 320.0, 450.0), seed=77,
    )
    cohort = generate_cohort(spec)
    checked = 0
    worst = 0.0
    for sample in cohort:
        gt = sample.gt_scores.agatston
        if gt == 0.0:
            continue
        patch = extract_scoring_patch(
            sample.volume, sample.center[:2], sample.center[2])
        measured = score_report(patch).agatston
        rel = abs(measured - gt) / gt
        worst = max(worst, rel)
        checked += 1
    assert checked > 300
    assert worst <= 0.05, f"worst relative error {worst:.4f} over {checked}"


def test_balanced_cohort_is_exactly_balanced():
    spec = PhantomSpec(n_subjects=40, balanced=True, seed=13)
    cohort = generate_cohort(spec)
    labels = [s.label for s in cohort]
    assert sum(labels) == 20
    assert len(cohort) == 40


def test_cohort_deterministic():
    spec = PhantomSpec(n_subjects=10, balanced=True, seed=29)
    a = generate_cohort(spec)
    b = generate_cohort(spec)
    for sa, sb in zip(a, b):
        np.testing.assert_array_equal(sa.volume.voxels, sb.volume.voxels)
        assert sa.label == sb.label
        assert sa.latent_factor == sb.latent_factor


# ---------------------------------------------------------------- dataset


def test_dataset_round_trip_and_byte_identity(tmp_path):
    spec = PhantomSpec(n_subjects=8, balanced=True, seed=5)
    d1, d2 = tmp_path / "one", tmp_path / "two"
    m1 = generate_dataset(spec, d1)
    m2 = generate_dataset(spec, d2)
    assert m1.read_bytes() == m2.read_bytes()
    for f in sorted(p.name for p in d1.iterdir()):
        assert (d1 / f).read_bytes() == (d2 / f).read_bytes()

    rows = load_manifest(d1)
    assert len(rows) == 8
    cohort = generate_cohort(spec)
    for row, sample in zip(rows, cohort):
        assert row.subject_id == sample.volume.id
        assert row.label == sample.label
        assert row.grade == sample.gt_scores.subjective_grade
        assert row.gt_agatston == sample.gt_scores.agatston
        vol = read_volume(d1 / row.volume_file)
        np.testing.assert_array_equal(vol.voxels, sample.volume.voxels)


def test_manifest_rejects_unknown_header(tmp_path):
    from cacrisk.errors import DataError

    bad = tmp_path / "manifest.csv"
    bad.write_text("id,who,knows\n1,2,3\n")
    with pytest.raises(DataError):
        load_manifest(tmp_path)


def test_noise_free_dataset_scores_match_manifest(tmp_path):
    spec = PhantomSpec(n_subjects=6, balanced=False, noise_sigma=0.0, seed=9)
    generate_dataset(spec, tmp_path / "d")
    for row in load_manifest(tmp_path / "d"):
        vol = read_volume(tmp_path / "d" / row.volume_file)
        patch = extract_scoring_patch(
            vol, (row.center_row, row.center_col), row.center_slice)
        report = score_report(patch)
        assert report.agatston == row.gt_agatston
        assert report.volume_mm3 == row.gt_volume_mm3
