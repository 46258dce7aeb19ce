"""ROC/AUC computation and cross-validated method comparison.

Two independent AUC routes are kept on purpose: roc_curve() integrates
the threshold-sweep curve with the trapezoid rule, while auc() computes
the Mann-Whitney concordance statistic from midranks. They agree to
numerical precision and the tests enforce it.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import EvaluationError
from .seeding import derive_seed


def _validate_scores_labels(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 1 or labels.shape != scores.shape:
        raise ValueError(
            f"scores and labels must be equal-length 1D, got {scores.shape} vs {labels.shape}"
        )
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be binary 0/1")
    labels = labels.astype(np.int64)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise EvaluationError("AUC undefined: only one class present")
    return scores, labels, n_pos, labels.size - n_pos


@dataclass(frozen=True)
class RocCurve:
    """Threshold-sweep ROC curve. points run from (0,0) to (1,1); auc is
    the trapezoidal integral of tpr over fpr."""

    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


def roc_curve(scores, labels) -> RocCurve:
    """Standard descending-threshold sweep; tied scores collapse into a
    single step."""
    scores, labels, n_pos, n_neg = _validate_scores_labels(scores, labels)
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    # last index of each tied group
    distinct = np.nonzero(np.diff(sorted_scores))[0]
    cut = np.r_[distinct, sorted_labels.size - 1]
    tp = np.cumsum(sorted_labels)[cut]
    fp = np.cumsum(1 - sorted_labels)[cut]
    fpr = np.r_[0.0, fp / n_neg]
    tpr = np.r_[0.0, tp / n_pos]
    thresholds = np.r_[np.inf, sorted_scores[cut]]
    area = float(np.trapezoid(tpr, fpr))
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thresholds, auc=area)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: (concordant + 0.5 * tied) / (n_pos * n_neg),
    computed via tie-averaged ranks."""
    scores, labels, n_pos, n_neg = _validate_scores_labels(scores, labels)
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    boundaries = np.r_[0, np.nonzero(np.diff(sorted_scores))[0] + 1, scores.size]
    for lo, hi in zip(boundaries[:-1], boundaries[1:]):
        ranks[order[lo:hi]] = 0.5 * (lo + hi - 1) + 1.0  # midrank, 1-based
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def kfold_split(n_subjects: int, labels=None, k: int = 10,
                stratified: bool = True, seed: int = 0) -> list:
    """Partition subject indices into k disjoint test folds whose sizes
    differ by at most one; stratified mode additionally balances each
    label across folds. Deterministic in (n, labels, k, seed)."""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if k > n_subjects:
        raise ValueError(f"k = {k} exceeds the {n_subjects} subjects")
    rng = np.random.default_rng(derive_seed(seed, "kfold"))
    folds = [[] for _ in range(k)]
    if stratified:
        if labels is None:
            raise ValueError("stratified split needs labels")
        labels = np.asarray(labels)
        if labels.shape != (n_subjects,):
            raise ValueError(f"labels shape {labels.shape} does not match n = {n_subjects}")
        start = 0
        for cls in np.unique(labels):
            idx = np.nonzero(labels == cls)[0]
            rng.shuffle(idx)
            for j, i in enumerate(idx):
                folds[(start + j) % k].append(int(i))
            start = (start + idx.size) % k
    else:
        idx = np.arange(n_subjects)
        rng.shuffle(idx)
        for j, i in enumerate(idx):
            folds[j % k].append(int(i))
    return [np.array(sorted(f), dtype=np.intp) for f in folds]


@dataclass(frozen=True)
class FixedScoreMethod:
    """A method with one precomputed score per subject (Agatston, grade,
    volume, ...); cross-validation folds just index into it."""

    name: str
    values: np.ndarray

    def fold_scores(self, train_idx, test_idx, fold_seed: int) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)[test_idx]


@dataclass(frozen=True)
class TrainableMethod:
    """A method fitted per fold. fit_and_score(train_idx, test_idx, seed)
    returns one risk score per test subject."""

    name: str
    fit_and_score: object

    def fold_scores(self, train_idx, test_idx, fold_seed: int) -> np.ndarray:
        return np.asarray(self.fit_and_score(train_idx, test_idx, fold_seed),
                          dtype=np.float64)


@dataclass(frozen=True)
class CvResult:
    method: str
    fold_aucs: tuple
    mean: float
    std: float            # sample standard deviation (n-1)
    folds: tuple          # test-fold index arrays
    curves: tuple         # per-fold RocCurve


def cross_validate(labels, method, k: int = 10, seed: int = 0,
                   stratified: bool = True, folds=None) -> CvResult:
    """k-fold cross-validation of one method. Fixed methods skip fitting;
    trainable ones are fitted on each fold's training complement with a
    fold-derived seed, so parallel and serial execution agree."""
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    if folds is None:
        folds = kfold_split(n, labels, k=k, stratified=stratified, seed=seed)
    all_idx = np.arange(n)
    fold_aucs = []
    curves = []
    for i, test_idx in enumerate(folds):
        train_idx = np.setdiff1d(all_idx, test_idx)
        try:
            scores = method.fold_scores(train_idx, test_idx,
                                        derive_seed(seed, "fold", i))
            curve = roc_curve(scores, labels[test_idx])
        except Exception as exc:
            raise RuntimeError(f"method {method.name!r} failed on fold {i}: {exc}") from exc
        fold_aucs.append(auc(scores, labels[test_idx]))
        curves.append(curve)
    arr = np.array(fold_aucs)
    return CvResult(
        method=method.name,
        fold_aucs=tuple(fold_aucs),
        mean=float(arr.mean()),
        std=float(arr.std(ddof=1)),
        folds=tuple(np.asarray(f) for f in folds),
        curves=tuple(curves),
    )


def compare_methods(labels, methods, k: int = 10, seed: int = 0,
                    stratified: bool = True) -> list:
    """Cross-validate every method over identical folds; returns one
    CvResult per method, in input order."""
    if len(methods) < 2:
        raise ValueError("compare_methods needs at least 2 methods")
    labels = np.asarray(labels, dtype=np.int64)
    folds = kfold_split(labels.size, labels, k=k, stratified=stratified, seed=seed)
    return [cross_validate(labels, m, k=k, seed=seed, folds=folds) for m in methods]


def _fmt(x: float) -> str:
    return repr(float(x))


def write_summary_csv(path, results) -> None:
    """One row per method: method,auc_mean,auc_std,fold_auc_0,..."""
    k = max(len(r.fold_aucs) for r in results)
    header = ["method", "auc_mean", "auc_std"] + [f"fold_auc_{i}" for i in range(k)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for r in results:
            writer.writerow([r.method, _fmt(r.mean), _fmt(r.std)]
                            + [_fmt(a) for a in r.fold_aucs])


def write_roc_csv(path, results) -> None:
    """Long-form ROC export: method,fold,threshold,fpr,tpr."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method", "fold", "threshold", "fpr", "tpr"])
        for r in results:
            for fold, curve in enumerate(r.curves):
                for t, f, tp in zip(curve.thresholds, curve.fpr, curve.tpr):
                    writer.writerow([r.method, fold, _fmt(t), _fmt(f), _fmt(tp)])


def plot_roc_svg(path, results, seed: int = 0) -> None:
    """Overlaid per-fold ROC curves plus each method's vertical mean curve."""
    import matplotlib
    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = str(seed)
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 6))
    colors = plt.cm.tab10(np.linspace(0, 1, max(len(results), 2)))
    grid = np.linspace(0, 1, 101)
    for r, color in zip(results, colors):
        for curve in r.curves:
            ax.plot(curve.fpr, curve.tpr, color=color, alpha=0.18, linewidth=0.8)
        mean_tpr = np.mean([np.interp(grid, c.fpr, c.tpr) for c in r.curves], axis=0)
        ax.plot(grid, mean_tpr, color=color, linewidth=1.8,
                label=f"{r.method} (AUC {r.mean:.3f} ± {r.std:.3f})")
    ax.plot([0, 1], [0, 1], "k--", linewidth=0.8, alpha=0.5)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
