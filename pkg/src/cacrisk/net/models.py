"""Risk prediction heads on top of the residual backbone.

Two variants:

* ``RiskNet``: image-only.  Backbone features go straight into a
  two-way linear classifier.
* ``HyRiskNet``: hybrid.  One normalized calcium score per subject is
  concatenated onto the feature vector before the classifier, so the
  head is ``Linear(feature_dim + 1, 2)``.

Both emit two logits (survival, nonsurvival); ``predict_proba`` returns
the softmax probability of the nonsurvival class.
"""

import copy

import torch
from torch import nn

from .backbone import BackboneConfig, build_backbone

SCORE_RANGE = (-1.0, 1.0)


class RiskNet(nn.Module):
    """Image-only mortality risk classifier."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self.backbone = build_backbone(config)
        self.head = nn.Linear(config.feature_dim, 2)
        nn.init.zeros_(self.head.bias)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(images))

    def predict_proba(self, images: torch.Tensor) -> torch.Tensor:
        """Softmax probability of nonsurvival, shape (B,)."""
        return torch.softmax(self.forward(images), dim=1)[:, 1]


class HyRiskNet(nn.Module):
    """Hybrid classifier: image features plus one scalar score."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self.backbone = build_backbone(config)
        self.head = nn.Linear(config.feature_dim + 1, 2)
        nn.init.zeros_(self.head.bias)

    def forward(self, images: torch.Tensor, scores: torch.Tensor) -> torch.Tensor:
        if scores.ndim != 1:
            raise ValueError(f"scores must be 1-D, got shape {tuple(scores.shape)}")
        if scores.shape[0] != images.shape[0]:
            raise ValueError(
                f"batch mismatch: {images.shape[0]} images vs {scores.shape[0]} scores"
            )
        lo, hi = SCORE_RANGE
        if torch.any(scores < lo) or torch.any(scores > hi):
            raise ValueError(f"scores must lie in [{lo}, {hi}]")
        features = self.backbone(images)
        combined = torch.cat([features, scores.to(features.dtype).unsqueeze(1)], dim=1)
        return self.head(combined)

    def predict_proba(self, images: torch.Tensor, scores: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.forward(images, scores), dim=1)[:, 1]


def extend_to_hybrid(model: RiskNet) -> HyRiskNet:
    """Grow an image-only model into a hybrid one.

    The backbone is copied verbatim and the head gains one input column,
    initialized to zero, so the new model's output on any batch equals
    the old model's output when given the same images (the score input
    contributes nothing until trained).
    """
    hybrid = HyRiskNet(model.config)
    hybrid.backbone.load_state_dict(copy.deepcopy(model.backbone.state_dict()))
    with torch.no_grad():
        hybrid.head.weight.zero_()
        hybrid.head.weight[:, : model.config.feature_dim] = model.head.weight
        hybrid.head.bias.copy_(model.head.bias)
    return hybrid
