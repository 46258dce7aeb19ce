"""Residual convolutional backbones for risk prediction.

The backbone maps a 3-channel image tensor to a flat feature vector via
a stack of residual blocks and global average pooling.  Classification
heads live in ``models``; this module only produces features.

Supported depths:

* ``18`` / ``34``: two-conv basic blocks, 512-dim features.
* ``50`` / ``101`` / ``152``: bottleneck blocks, 2048-dim features.
* ``micro``: a three-block net sized for small synthetic studies where
  the full-depth variants would dominate the runtime budget.  Its
  feature width is configurable (default 64).
"""

from dataclasses import dataclass

import torch
from torch import nn

from ..errors import ConfigError

STANDARD_DEPTHS = (18, 34, 50, 101, 152)

# depth -> (block kind, blocks per stage)
_STAGE_PLANS = {
    18: ("basic", (2, 2, 2, 2)),
    34: ("basic", (3, 4, 6, 3)),
    50: ("bottleneck", (3, 4, 6, 3)),
    101: ("bottleneck", (3, 4, 23, 3)),
    152: ("bottleneck", (3, 8, 36, 3)),
}


@dataclass(frozen=True)
class BackboneConfig:
    """Architecture selector for the residual backbone.

    Attributes:
        depth: one of 18, 34, 50, 101, 152, or the string "micro".
        feature_dim: output feature width.  Fixed by depth for the
            standard variants (512 basic / 2048 bottleneck); free for
            "micro".
        input_size: expected square input side in pixels.
    """

    depth: int | str = "micro"
    feature_dim: int = 64
    input_size: int = 224

    def __post_init__(self):
        depth = self.depth
        if isinstance(depth, str) and depth != "micro":
            if not depth.isdigit():
                raise ConfigError(f"unknown backbone depth {depth!r}")
            depth = int(depth)
            object.__setattr__(self, "depth", depth)
        if depth != "micro" and depth not in STANDARD_DEPTHS:
            raise ConfigError(
                f"backbone depth must be one of {STANDARD_DEPTHS} or 'micro', got {depth!r}"
            )
        if depth in (18, 34):
            object.__setattr__(self, "feature_dim", 512)
        elif depth in (50, 101, 152):
            object.__setattr__(self, "feature_dim", 2048)
        elif self.feature_dim < 8:
            raise ConfigError(f"micro feature_dim must be >= 8, got {self.feature_dim}")
        if self.input_size < 32:
            raise ConfigError(f"input_size must be >= 32, got {self.input_size}")

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "feature_dim": self.feature_dim,
            "input_size": self.input_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(
            depth=d["depth"],
            feature_dim=int(d["feature_dim"]),
            input_size=int(d["input_size"]),
        )


def _conv3x3(cin: int, cout: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)


def _conv1x1(cin: int, cout: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 1, stride=stride, bias=False)


class BasicBlock(nn.Module):
    """Two 3x3 convolutions with an identity (or projected) shortcut."""

    expansion = 1

    def __init__(self, cin: int, planes: int, stride: int = 1):
        super().__init__()
        self.conv1 = _conv3x3(cin, planes, stride)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = _conv3x3(planes, planes)
        self.bn2 = nn.BatchNorm2d(planes)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or cin != planes:
            self.shortcut = nn.Sequential(_conv1x1(cin, planes, stride), nn.BatchNorm2d(planes))
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


class BottleneckBlock(nn.Module):
    """1x1 reduce, 3x3, 1x1 expand (x4) with shortcut."""

    expansion = 4

    def __init__(self, cin: int, planes: int, stride: int = 1):
        super().__init__()
        cout = planes * self.expansion
        self.conv1 = _conv1x1(cin, planes)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = _conv3x3(planes, planes, stride)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv3 = _conv1x1(planes, cout)
        self.bn3 = nn.BatchNorm2d(cout)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(_conv1x1(cin, cout, stride), nn.BatchNorm2d(cout))
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + self.shortcut(x))


class ResidualBackbone(nn.Module):
    """Convolutional feature extractor: stem, residual stages, global pool."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        if config.depth == "micro":
            self._build_micro(config.feature_dim)
        else:
            self._build_standard(config.depth)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.feature_dim = config.feature_dim
        self._init_weights()

    def _build_micro(self, feature_dim: int):
        w = max(8, feature_dim // 4)
        self.stem = nn.Sequential(
            nn.Conv2d(3, w, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(w),
            nn.ReLU(inplace=True),
        )
        self.stages = nn.Sequential(
            BasicBlock(w, 2 * w, stride=2),
            BasicBlock(2 * w, 2 * w, stride=2),
            BasicBlock(2 * w, feature_dim, stride=2),
        )

    def _build_standard(self, depth: int):
        kind, plan = _STAGE_PLANS[depth]
        block = BasicBlock if kind == "basic" else BottleneckBlock
        self.stem = nn.Sequential(
            nn.Conv2d(3, 64, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(64),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        stages = []
        cin = 64
        for i, (planes, n_blocks) in enumerate(zip((64, 128, 256, 512), plan)):
            for j in range(n_blocks):
                stride = 2 if (i > 0 and j == 0) else 1
                stages.append(block(cin, planes, stride))
                cin = planes * block.expansion
        self.stages = nn.Sequential(*stages)

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected input of shape (B, 3, H, W), got {tuple(x.shape)}")
        n = self.config.input_size
        if x.shape[2] != n or x.shape[3] != n:
            raise ValueError(
                f"expected {n}x{n} input for this backbone, got {x.shape[2]}x{x.shape[3]}"
            )
        out = self.stages(self.stem(x))
        return torch.flatten(self.pool(out), 1)


def build_backbone(config: BackboneConfig) -> ResidualBackbone:
    return ResidualBackbone(config)
