"""Model family: backbone geometry, heads, schedules, hybrid identity."""

import numpy as np
import pytest
import torch

from cacrisk.errors import ConfigError
from cacrisk.net import BackboneConfig, HyRiskNet, RiskNet, build_backbone, lr_schedule
from cacrisk.net.models import extend_to_hybrid
from cacrisk.net.training import DEFAULT_LR, TrainConfig, NormalizationStats

torch.set_num_threads(1)


# ------------------------------------------------------------------- config


def test_backbone_config_depth_parsing():
    assert BackboneConfig(depth="34").depth == 34
    assert BackboneConfig(depth=18).feature_dim == 512
    assert BackboneConfig(depth=34).feature_dim == 512
    assert BackboneConfig(depth=50).feature_dim == 2048
    assert BackboneConfig(depth=101).feature_dim == 2048
    assert BackboneConfig(depth=152).feature_dim == 2048
    # the fixed widths win over whatever was passed in
    assert BackboneConfig(depth=18, feature_dim=64).feature_dim == 512


def test_backbone_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        BackboneConfig(depth="resnet")
    with pytest.raises(ConfigError):
        BackboneConfig(depth=20)
    with pytest.raises(ConfigError):
        BackboneConfig(depth="micro", feature_dim=4)
    with pytest.raises(ConfigError):
        BackboneConfig(input_size=16)


def test_backbone_config_round_trip():
    for cfg in (BackboneConfig(), BackboneConfig(depth=50),
                BackboneConfig(depth="micro", feature_dim=32, input_size=96)):
        assert BackboneConfig.from_dict(cfg.to_dict()) == cfg


# ------------------------------------------------------------------ shapes


@pytest.mark.parametrize("depth,expected", [
    (18, 512), (34, 512), (50, 2048), (101, 2048), (152, 2048),
])
def test_standard_backbone_feature_shapes(depth, expected):
    torch.manual_seed(0)
    net = build_backbone(BackboneConfig(depth=depth))
    net.eval()
    with torch.no_grad():
        out = net(torch.randn(1, 3, 224, 224))
    assert out.shape == (1, expected)


def test_micro_backbone_feature_shapes():
    torch.manual_seed(0)
    for fd, size in ((16, 32), (64, 112), (24, 56)):
        net = build_backbone(BackboneConfig(depth="micro", feature_dim=fd,
                                            input_size=size))
        net.eval()
        with torch.no_grad():
            out = net(torch.randn(2, 3, size, size))
        assert out.shape == (2, fd)


def test_backbone_input_validation():
    net = build_backbone(BackboneConfig(depth="micro", feature_dim=16, input_size=64))
    with pytest.raises(ValueError):
        net(torch.randn(1, 1, 64, 64))
    with pytest.raises(ValueError):
        net(torch.randn(1, 3, 32, 32))
    with pytest.raises(ValueError):
        net(torch.randn(3, 64, 64))


# ------------------------------------------------------------------- heads


def small_config():
    return BackboneConfig(depth="micro", feature_dim=16, input_size=32)


def test_risknet_probabilities_sum_to_one():
    torch.manual_seed(1)
    model = RiskNet(small_config())
    model.eval()
    with torch.no_grad():
        logits = model(torch.randn(8, 3, 32, 32))
        probs = torch.softmax(logits, dim=1)
    assert logits.shape == (8, 2)
    assert torch.allclose(probs.sum(dim=1), torch.ones(8), atol=1e-12)


def test_hyrisknet_validates_scores():
    torch.manual_seed(2)
    model = HyRiskNet(small_config())
    images = torch.randn(4, 3, 32, 32)
    with pytest.raises(ValueError):
        model(images, torch.zeros(4, 1))
    with pytest.raises(ValueError):
        model(images, torch.zeros(3))
    with pytest.raises(ValueError):
        model(images, torch.full((4,), 1.5))


def test_extend_to_hybrid_identity():
    """Zero score column: hybrid logits equal image-only logits exactly,
    for every score value."""
    torch.manual_seed(3)
    base = RiskNet(small_config())
    base.eval()
    hybrid = extend_to_hybrid(base)
    hybrid.eval()
    images = torch.randn(10, 3, 32, 32)
    with torch.no_grad():
        expected = base(images)
        for scores in (torch.zeros(10), torch.linspace(-1, 1, 10)):
            assert torch.equal(hybrid(images, scores), expected)


def test_hybrid_score_column_changes_output_when_nonzero():
    torch.manual_seed(4)
    base = RiskNet(small_config())
    hybrid = extend_to_hybrid(base)
    with torch.no_grad():
        hybrid.head.weight[:, -1] = torch.tensor([-0.5, 0.5])
    hybrid.eval()
    images = torch.randn(5, 3, 32, 32)
    with torch.no_grad():
        low = hybrid.predict_proba(images, torch.full((5,), -1.0))
        high = hybrid.predict_proba(images, torch.full((5,), 1.0))
    assert (high > low).all()


def test_hybrid_monotone_in_score():
    torch.manual_seed(5)
    hybrid = HyRiskNet(small_config())
    with torch.no_grad():
        hybrid.head.weight[:, -1] = torch.tensor([-1.0, 1.0])
    hybrid.eval()
    image = torch.randn(1, 3, 32, 32)
    with torch.no_grad():
        probs = [float(hybrid.predict_proba(image, torch.tensor([s])))
                 for s in np.linspace(-1, 1, 9)]
    assert all(a < b for a, b in zip(probs, probs[1:]))


# ---------------------------------------------------------------- schedule


def test_lr_schedule_decays_every_5_epochs():
    for e in range(0, 101):
        expected = 1e-4 * 0.9 ** (e // 5)
        assert lr_schedule(1e-4, e) == pytest.approx(expected, rel=1e-12)
    assert lr_schedule(2e-3, 0) == 2e-3
    assert lr_schedule(2e-3, 4) == 2e-3
    assert lr_schedule(2e-3, 5) == pytest.approx(1.8e-3)


def test_lr_schedule_custom_step():
    assert lr_schedule(1.0, 6, factor=0.5, every=2) == pytest.approx(0.125)


# ------------------------------------------------------------ train config


def test_train_config_strategy_defaults():
    assert TrainConfig(strategy="scratch").initial_lr == DEFAULT_LR["scratch"]
    assert TrainConfig(strategy="finetune").initial_lr == DEFAULT_LR["finetune"]
    assert TrainConfig(strategy="pretrained_frozen").initial_lr \
        == DEFAULT_LR["pretrained_frozen"]
    assert TrainConfig(strategy="scratch", learning_rate=3e-3).initial_lr == 3e-3


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(strategy="sgd")
    with pytest.raises(ConfigError):
        TrainConfig(epochs=-1)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=-1e-4)
    with pytest.raises(ConfigError):
        TrainConfig(score_source="volume")


def test_normalization_stats_round_trip():
    stats = NormalizationStats(channel_mean=(1.0, 2.0, 3.0),
                               channel_std=(4.0, 5.0, 6.0),
                               score_source="agatston",
                               score_min=0.0, score_max=212.5)
    assert NormalizationStats.from_dict(stats.to_dict()) == stats
