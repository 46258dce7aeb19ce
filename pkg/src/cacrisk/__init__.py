"""Coronary artery calcium scoring and mortality-risk evaluation.

Submodules:

    imaging     CT volume container, patch extraction, augmentation
    volume_io   binary volume file format
    scoring     Agatston / volume quantification and risk categories
    phantom     synthetic cohort generator with known ground truth
    net         risk networks, training, gradient check, checkpoints
    evaluation  ROC / AUC, cross-validation, method comparison
    pipeline    dataset loading and method assembly
    config      flat key = value run configuration
    cli         command-line entry point
"""

__version__ = "1.0.0"
