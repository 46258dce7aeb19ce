"""End-to-end glue: datasets in, cross-validated comparisons out.

A study is a directory of volume files plus a manifest.  Loading it
runs the calcium quantification once per subject (on the stored, noisy
volume, exactly what a clinical pipeline would see) and extracts the
raw network patch.  The comparison harness then wraps everything as
scoring methods:

    fixed      agatston, agatston_category, volume, sqrt_volume, grade
    trainable  risknet, hyrisknet_grade, hyrisknet_agatston

The three network methods share one stage-1 model per fold: training is
deterministic in (samples, config, seed), so memoizing stage 1 and
branching stage 2 off it returns bit-identical results to retraining
from scratch, at a third of the cost.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import ConfigError, DataError
from .imaging import PatchStack, extract_network_patch, extract_scoring_patch
from .net.backbone import BackboneConfig
from .net.checkpoint import load_checkpoint
from .net.training import (
    TrainConfig,
    TrainResult,
    TrainSample,
    predict_proba,
    train_stage1,
    train_stage2,
)
from .evaluation import FixedScoreMethod, TrainableMethod
from .phantom import load_manifest
from .scoring import score_report
from .volume_io import read_volume

NETWORK_METHODS = ("risknet", "hyrisknet_grade", "hyrisknet_agatston")


@dataclass
class Subject:
    """Everything the comparison needs about one subject."""

    id: str
    label: int
    grade: int
    measured: object          # ScoreReport from the stored volume
    patch: PatchStack

    @property
    def agatston(self) -> float:
        return self.measured.agatston


def load_study(dataset_dir) -> list:
    """Load a dataset directory: manifest, volumes, scores, patches."""
    dataset_dir = Path(dataset_dir)
    rows = load_manifest(dataset_dir)
    if not rows:
        raise DataError(f"dataset {dataset_dir} has an empty manifest")
    subjects = []
    for row in rows:
        volume = read_volume(dataset_dir / row.volume_file)
        center = (row.center_row, row.center_col)
        scoring_patch = extract_scoring_patch(volume, center, row.center_slice)
        measured = score_report(scoring_patch, subjective_grade=row.grade)
        patch = extract_network_patch(volume, center, row.center_slice)
        subjects.append(Subject(
            id=row.subject_id,
            label=row.label,
            grade=row.grade,
            measured=measured,
            patch=patch,
        ))
    return subjects


def labels_of(subjects) -> np.ndarray:
    return np.array([s.label for s in subjects], dtype=np.int64)


def to_train_samples(subjects, idx=None) -> list:
    pool = subjects if idx is None else [subjects[int(i)] for i in idx]
    return [TrainSample(patch=s.patch, label=s.label, grade=s.grade,
                        agatston=s.agatston) for s in pool]


def _backbone_config(config: RunConfig) -> BackboneConfig:
    return BackboneConfig(
        depth=config["backbone.depth"],
        feature_dim=config["backbone.feature_dim"],
        input_size=config["backbone.input_size"],
    )


def _train_config(config: RunConfig, seed: int, stage: int,
                  score_source: str = "grade") -> TrainConfig:
    if stage == 1:
        strategy = config["train.strategy"]
        learning_rate = config["train.learning_rate"]
        epochs = config["train.epochs"]
    else:
        strategy = "finetune"
        learning_rate = config["train.stage2_learning_rate"]
        epochs = config["train.stage2_epochs"]
    return TrainConfig(
        strategy=strategy,
        learning_rate=learning_rate,
        epochs=epochs,
        batch_size=config["train.batch_size"],
        decay_factor=config["train.decay_factor"],
        decay_every=config["train.decay_every"],
        seed=seed,
        score_source=score_source,
    )


def _initial_backbone_state(config: RunConfig):
    """Backbone weights for the finetune / pretrained_frozen strategies."""
    if config["train.strategy"] == "scratch":
        return None
    weights = config["train.weights"]
    if not weights:
        raise ConfigError(
            f"train.strategy = {config['train.strategy']} needs train.weights "
            "pointing at a checkpoint"
        )
    model, _ = load_checkpoint(weights)
    return model.backbone.state_dict()


class NetworkTrainer:
    """Per-fold network training with a shared stage-1 cache."""

    def __init__(self, subjects, config: RunConfig):
        self.subjects = subjects
        self.config = config
        self.backbone_config = _backbone_config(config)
        self.initial_state = _initial_backbone_state(config)
        self._stage1_cache = {}

    def stage1(self, train_idx, fold_seed: int) -> TrainResult:
        key = (np.asarray(train_idx, dtype=np.intp).tobytes(), int(fold_seed))
        if key not in self._stage1_cache:
            samples = to_train_samples(self.subjects, train_idx)
            cfg = _train_config(self.config, fold_seed, stage=1)
            self._stage1_cache[key] = train_stage1(
                samples, self.backbone_config, cfg, initial_state=self.initial_state
            )
        return self._stage1_cache[key]

    def stage2(self, train_idx, fold_seed: int, score_source: str) -> TrainResult:
        base = self.stage1(train_idx, fold_seed)
        samples = to_train_samples(self.subjects, train_idx)
        cfg = _train_config(self.config, fold_seed, stage=2, score_source=score_source)
        return train_stage2(base, samples, cfg)

    def _score_fn(self, score_source: str | None):
        def fit_and_score(train_idx, test_idx, fold_seed):
            if score_source is None:
                result = self.stage1(train_idx, fold_seed)
            else:
                result = self.stage2(train_idx, fold_seed, score_source)
            return predict_proba(result.model, to_train_samples(self.subjects, test_idx))
        return fit_and_score

    def method(self, name: str) -> TrainableMethod:
        if name == "risknet":
            return TrainableMethod(name, self._score_fn(None))
        if name == "hyrisknet_grade":
            return TrainableMethod(name, self._score_fn("grade"))
        if name == "hyrisknet_agatston":
            return TrainableMethod(name, self._score_fn("agatston"))
        raise ConfigError(f"unknown network method {name!r}")


def build_methods(subjects, config: RunConfig, names=None) -> list:
    """Instantiate comparison methods by name, sharing one trainer."""
    names = tuple(names if names is not None else config["eval.methods"])
    fixed = {
        "agatston": np.array([s.agatston for s in subjects], dtype=np.float64),
        "agatston_category": np.array(
            [int(s.measured.risk_category) for s in subjects], dtype=np.float64),
        "volume": np.array([s.measured.volume_mm3 for s in subjects], dtype=np.float64),
        "sqrt_volume": np.array([s.measured.sqrt_volume for s in subjects],
                                dtype=np.float64),
        "grade": np.array([s.grade for s in subjects], dtype=np.float64),
    }
    trainer = NetworkTrainer(subjects, config) if any(
        n in NETWORK_METHODS for n in names) else None
    methods = []
    for name in names:
        if name in fixed:
            methods.append(FixedScoreMethod(name, fixed[name]))
        elif name in NETWORK_METHODS:
            methods.append(trainer.method(name))
        else:
            raise ConfigError(f"unknown method {name!r}")
    return methods
