"""Two-stage training for the risk networks.

Stage 1 trains an image-only ``RiskNet`` under one of three
initialization strategies:

* ``scratch``: random init, lr 1e-4, decayed by 0.9 every 5 epochs.
* ``finetune``: starts from supplied backbone weights, all layers
  trainable at a constant lr 1e-5.
* ``pretrained_frozen``: starts from supplied backbone weights, only
  the classification head trains (backbone kept in eval mode so its
  batch-norm statistics stay put).

Stage 2 grows the stage-1 model into a ``HyRiskNet`` whose head takes
one extra input: a calcium score normalized to [-1, 1].  The new head
column starts at zero, so before any stage-2 epoch the hybrid model is
exactly the stage-1 model.  All layers then fine-tune jointly.

Both stages use Adam on two-way cross-entropy.  Given the same samples,
config, and seed, training is deterministic on a fixed machine.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn

from ..errors import ConfigError, NumericError
from ..imaging import (EVAL_SCALES, PatchStack, augment, center_view,
                       channel_stats, normalize_patch)
from ..scoring import normalize_score
from ..seeding import derive_seed
from .backbone import BackboneConfig
from .models import HyRiskNet, RiskNet, extend_to_hybrid

STRATEGIES = ("scratch", "finetune", "pretrained_frozen")
SCORE_SOURCES = ("grade", "agatston")
DEFAULT_LR = {"scratch": 1e-4, "finetune": 1e-5, "pretrained_frozen": 1e-5}
GRADE_RANGE = (0.0, 3.0)


@dataclass
class TrainSample:
    """One subject's network inputs: raw patch, outcome, calcium scores."""

    patch: PatchStack
    label: int
    grade: int | None = None
    agatston: float | None = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


@dataclass(frozen=True)
class NormalizationStats:
    """Input normalization learned from a training split.

    channel_mean/channel_std standardize the image channels;
    score_min/score_max map the auxiliary calcium score onto [-1, 1]
    (score_source says which score that is, None for image-only models).
    """

    channel_mean: tuple
    channel_std: tuple
    score_source: str | None = None
    score_min: float = 0.0
    score_max: float = 1.0

    def to_dict(self) -> dict:
        return {
            "channel_mean": list(self.channel_mean),
            "channel_std": list(self.channel_std),
            "score_source": self.score_source,
            "score_min": self.score_min,
            "score_max": self.score_max,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(
            channel_mean=tuple(float(v) for v in d["channel_mean"]),
            channel_std=tuple(float(v) for v in d["channel_std"]),
            score_source=d.get("score_source"),
            score_min=float(d.get("score_min", 0.0)),
            score_max=float(d.get("score_max", 1.0)),
        )


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = "scratch"
    learning_rate: float | None = None
    epochs: int = 30
    batch_size: int = 16
    decay_factor: float = 0.9
    decay_every: int = 5
    seed: int = 0
    score_source: str = "grade"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ConfigError(f"decay_factor must be in (0, 1], got {self.decay_factor}")
        if self.decay_every < 1:
            raise ConfigError(f"decay_every must be >= 1, got {self.decay_every}")
        if self.score_source not in SCORE_SOURCES:
            raise ConfigError(
                f"score_source must be one of {SCORE_SOURCES}, got {self.score_source!r}"
            )

    @property
    def initial_lr(self) -> float:
        return DEFAULT_LR[self.strategy] if self.learning_rate is None else self.learning_rate


@dataclass
class TrainResult:
    model: nn.Module
    stats: NormalizationStats
    epoch_losses: list = field(default_factory=list)
    config: TrainConfig | None = None

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1] if self.epoch_losses else math.nan


def lr_schedule(initial: float, epoch: int, factor: float = 0.9, every: int = 5) -> float:
    """Step-decay learning rate: initial * factor^(epoch // every)."""
    if initial <= 0:
        raise ValueError(f"initial lr must be > 0, got {initial}")
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if every < 1:
        raise ValueError(f"decay period must be >= 1, got {every}")
    return initial * factor ** (epoch // every)


def _to_tensor(views, stats: NormalizationStats) -> torch.Tensor:
    arrs = []
    for v in views:
        normed = normalize_patch(v, stats.channel_mean, stats.channel_std)
        arrs.append(np.transpose(normed.pixels, (2, 0, 1)))
    return torch.from_numpy(np.stack(arrs)).float()


def _normalized_scores(samples, stats: NormalizationStats) -> torch.Tensor:
    vals = []
    for s in samples:
        raw = s.grade if stats.score_source == "grade" else s.agatston
        if raw is None:
            raise ValueError(f"sample is missing its {stats.score_source} score")
        vals.append(normalize_score(float(raw), stats.score_min, stats.score_max))
    return torch.tensor(vals, dtype=torch.float32)


def _set_lr(optimizer, lr: float):
    for group in optimizer.param_groups:
        group["lr"] = lr


def _run_epochs(model, samples, scores, config: TrainConfig, frozen_backbone: bool):
    """Shared optimization loop.  scores is None for image-only models."""
    n = len(samples)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=config.initial_lr)
    loss_fn = nn.CrossEntropyLoss()
    labels_all = torch.tensor([s.label for s in samples], dtype=torch.long)
    rng = np.random.default_rng(derive_seed(config.seed, "augment"))
    input_size = model.config.input_size

    epoch_losses = []
    for epoch in range(config.epochs):
        if config.strategy == "scratch":
            _set_lr(optimizer, lr_schedule(config.initial_lr, epoch,
                                           config.decay_factor, config.decay_every))
        model.train()
        if frozen_backbone:
            model.backbone.eval()
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2:
                # batch norm needs more than one sample per batch;
                # a singleton remainder is folded into the next epoch's shuffle
                continue
            views = [augment(samples[i].patch, rng, out_size=input_size) for i in idx]
            x = _to_tensor(views, model_stats(model))
            y = labels_all[idx]
            optimizer.zero_grad()
            logits = model(x) if scores is None else model(x, scores[idx])
            loss = loss_fn(logits, y)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            loss.backward()
            optimizer.step()
            total += float(loss.item()) * len(idx)
            seen += len(idx)
        epoch_losses.append(total / seen if seen else math.nan)
    return epoch_losses


# stats ride along on the module so the loop above can reach them; they are
# set once before training and serialized with the checkpoint afterwards
def attach_stats(model: nn.Module, stats: NormalizationStats):
    model._norm_stats = stats


def model_stats(model: nn.Module) -> NormalizationStats:
    stats = getattr(model, "_norm_stats", None)
    if stats is None:
        raise ValueError("model has no attached normalization stats")
    return stats


def _check_labels(samples):
    labels = {s.label for s in samples}
    if len(samples) < 2 or labels != {0, 1}:
        raise ValueError("training set must contain both outcome classes")


def train_stage1(samples, backbone_config: BackboneConfig, config: TrainConfig,
                 initial_state: dict | None = None) -> TrainResult:
    """Train an image-only RiskNet on raw patches.

    initial_state is a backbone state_dict, required for the finetune
    and pretrained_frozen strategies and rejected for scratch.
    """
    samples = list(samples)
    _check_labels(samples)
    if config.strategy == "scratch":
        if initial_state is not None:
            raise ConfigError("scratch strategy does not take initial weights")
    elif initial_state is None:
        raise ConfigError(f"{config.strategy} strategy needs pretrained backbone weights")

    torch.manual_seed(derive_seed(config.seed, "init") % (2 ** 63))
    model = RiskNet(backbone_config)
    if initial_state is not None:
        model.backbone.load_state_dict(initial_state)
    if config.strategy == "pretrained_frozen":
        for p in model.backbone.parameters():
            p.requires_grad_(False)

    mean, std = channel_stats(s.patch for s in samples)
    stats = NormalizationStats(channel_mean=tuple(mean), channel_std=tuple(std))
    attach_stats(model, stats)

    losses = _run_epochs(model, samples, None, config,
                         frozen_backbone=config.strategy == "pretrained_frozen")
    model.eval()
    return TrainResult(model=model, stats=stats, epoch_losses=losses, config=config)


def _score_bounds(samples, source: str) -> tuple:
    if source == "grade":
        return GRADE_RANGE
    values = [s.agatston for s in samples]
    if any(v is None for v in values):
        raise ValueError("samples are missing agatston scores")
    top = max(values)
    # all-zero training split: any positive span works, scores all map to -1
    return (0.0, float(top) if top > 0 else 1.0)


def train_stage2(stage1: TrainResult, samples, config: TrainConfig) -> TrainResult:
    """Extend a trained RiskNet with a score input and fine-tune jointly.

    With epochs=0 the returned hybrid reproduces the stage-1 model
    exactly (the new head column is zero-initialized).
    """
    samples = list(samples)
    _check_labels(samples)
    if not isinstance(stage1.model, RiskNet):
        raise ConfigError("stage 2 must start from an image-only stage-1 model")

    lo, hi = _score_bounds(samples, config.score_source)
    stats = replace(stage1.stats, score_source=config.score_source,
                    score_min=lo, score_max=hi)

    torch.manual_seed(derive_seed(config.seed, "stage2") % (2 ** 63))
    model = extend_to_hybrid(stage1.model)
    attach_stats(model, stats)

    scores = _normalized_scores(samples, stats)
    losses = _run_epochs(model, samples, scores, config, frozen_backbone=False)
    model.eval()
    return TrainResult(model=model, stats=stats, epoch_losses=losses, config=config)


def predict_proba(model: nn.Module, samples, batch_size: int = 32,
                  scales=EVAL_SCALES) -> np.ndarray:
    """Nonsurvival probabilities for raw-patch samples.

    Deterministic multi-scale evaluation: probabilities are averaged
    over center crops at each scale in `scales` (by default the ends
    and midpoint of the training augmentation range).  Works for both
    model kinds; hybrid models read the score named in their
    normalization stats off each sample.
    """
    samples = list(samples)
    stats = model_stats(model)
    model.eval()
    needs_scores = isinstance(model, HyRiskNet)
    scores = _normalized_scores(samples, stats) if needs_scores else None
    out = np.zeros(len(samples), dtype=np.float64)
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            acc = np.zeros(len(chunk), dtype=np.float64)
            for scale in scales:
                views = [center_view(s.patch, model.config.input_size, scale)
                         for s in chunk]
                x = _to_tensor(views, stats)
                if needs_scores:
                    p = model.predict_proba(x, scores[start:start + len(chunk)])
                else:
                    p = model.predict_proba(x)
                acc += p.numpy().astype(np.float64)
            out[start:start + len(chunk)] = acc / len(scales)
    return out
