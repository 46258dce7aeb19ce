from .backbone import BackboneConfig, build_backbone
from .models import HyRiskNet, RiskNet
from .training import (
    NormalizationStats,
    TrainConfig,
    TrainResult,
    TrainSample,
    lr_schedule,
    predict_proba,
    train_stage1,
    train_stage2,
)
from .gradcheck import gradient_check
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "BackboneConfig", "build_backbone", "RiskNet", "HyRiskNet",
    "TrainConfig", "TrainResult", "TrainSample", "lr_schedule",
    "predict_proba", "train_stage1", "train_stage2", "gradient_check",
    "NormalizationStats", "load_checkpoint", "save_checkpoint",
]
