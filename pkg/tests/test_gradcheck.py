"""Finite-difference gradient verification: catches what it should,
passes what it must."""

import numpy as np
import pytest
import torch

from cacrisk.net import BackboneConfig, HyRiskNet, RiskNet
from cacrisk.net.gradcheck import GradCheckResult, _sample_coords, gradient_check

torch.set_num_threads(1)

CFG = BackboneConfig(depth="micro", feature_dim=16, input_size=32)


def batch(n=4, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.normal(0.0, 1.0, (n, 3, 32, 32))
    labels = rng.integers(0, 2, n)
    scores = rng.uniform(-1.0, 1.0, n)
    return images, labels, scores


def test_correct_image_model_passes():
    torch.manual_seed(0)
    model = RiskNet(CFG)
    images, labels, _ = batch()
    result = gradient_check(model, images, labels, n_coords=60)
    assert result.max_rel_error < 1e-4
    assert result.passed()
    assert result.n_coords >= 60


def test_correct_hybrid_model_passes():
    torch.manual_seed(1)
    model = HyRiskNet(CFG)
    with torch.no_grad():
        model.head.weight[:, -1] = torch.tensor([-0.3, 0.3])
    images, labels, scores = batch(seed=1)
    result = gradient_check(model, images, labels, scores=scores, n_coords=60)
    assert result.max_rel_error < 1e-4


def test_corrupted_gradient_is_flagged():
    torch.manual_seed(2)
    model = RiskNet(CFG)
    images, labels, _ = batch(seed=2)
    result = gradient_check(model, images, labels, n_coords=60,
                            corrupt="head.weight")
    assert result.max_rel_error > 1e-1
    assert not result.passed()
    assert result.worst_param == "head.weight"


def test_corrupt_rejects_unknown_parameter():
    model = RiskNet(CFG)
    images, labels, _ = batch()
    with pytest.raises(ValueError):
        gradient_check(model, images, labels, corrupt="no.such.tensor")


def test_argument_validation():
    model = RiskNet(CFG)
    images, labels, _ = batch()
    with pytest.raises(ValueError):
        gradient_check(model, images, labels, epsilon=1e-8)
    with pytest.raises(ValueError):
        gradient_check(model, images, labels, epsilon=1e-2)
    with pytest.raises(ValueError):
        gradient_check(model, images, labels, n_coords=0)


def test_every_tensor_gets_at_least_two_coords():
    torch.manual_seed(3)
    model = RiskNet(CFG)
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    rng = np.random.default_rng(0)
    coords = _sample_coords(named, 1, rng)
    per_tensor = {}
    for name, idx in coords:
        per_tensor.setdefault(name, set()).add(idx)
    sizes = {n: p.numel() for n, p in named}
    for name, size in sizes.items():
        assert len(per_tensor[name]) >= min(2, size)
    # indices are unique within a tensor and in range
    for name, picks in per_tensor.items():
        assert all(0 <= i < sizes[name] for i in picks)


def test_check_does_not_mutate_the_model():
    torch.manual_seed(4)
    model = RiskNet(CFG)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    images, labels, _ = batch(seed=4)
    gradient_check(model, images, labels, n_coords=20)
    after = model.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_check_is_deterministic():
    torch.manual_seed(5)
    model = RiskNet(CFG)
    images, labels, _ = batch(seed=5)
    a = gradient_check(model, images, labels, n_coords=30, seed=9)
    b = gradient_check(model, images, labels, n_coords=30, seed=9)
    assert a == b


def test_stationary_coordinate_reads_as_zero_error():
    """With all scores zero, the score column's analytic and numeric
    gradients are both exactly zero; the relative-error floor keeps
    that from dividing 0 by 0."""
    torch.manual_seed(6)
    model = HyRiskNet(CFG)
    images, labels, _ = batch(seed=6)
    scores = np.zeros(4)
    result = gradient_check(model, images, labels, scores=scores, n_coords=60)
    assert result.max_rel_error < 1e-4


def test_result_pass_threshold():
    result = GradCheckResult(max_rel_error=5e-5, n_coords=200,
                             worst_param="head.weight", epsilon=1e-5)
    assert result.passed()
    assert not result.passed(tol=1e-5)
