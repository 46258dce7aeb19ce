"""Command-line interface.

Subcommands:

    phantom    generate a synthetic cohort dataset
    score      quantify calcium for every subject in a dataset
    train      train a risk network on a dataset, save a checkpoint
    eval       cross-validated AUC of a fixed method or a checkpoint
    compare    cross-validate several methods on shared folds
    gradcheck  finite-difference audit of the network gradients

Exit codes: 0 success, 2 configuration problem, 3 data problem,
4 numerical failure.  All commands take --config (flat key = value
file), repeatable --set key=value overrides, and --seed as a shorthand
for --set run.seed=N.  Outputs are deterministic for a fixed config;
timestamps go only to run.log.
"""

import argparse
import csv
import datetime
import sys
from pathlib import Path

import numpy as np
import torch

from . import phantom as ph
from .config import ALL_METHODS, RunConfig, load_config, write_resolved
from .errors import ConfigError, DataError, EvaluationError, NumericError
from .evaluation import compare_methods, cross_validate, plot_roc_svg, \
    write_roc_csv, write_summary_csv
from .net.backbone import BackboneConfig
from .net.checkpoint import fingerprint_file, load_checkpoint, save_checkpoint
from .net.gradcheck import gradient_check
from .net.models import HyRiskNet, RiskNet
from .net.training import attach_stats, NormalizationStats, predict_proba
from .pipeline import NETWORK_METHODS, build_methods, labels_of, load_study, \
    to_train_samples, NetworkTrainer
from .seeding import derive_seed

FIXED_METHODS = tuple(m for m in ALL_METHODS if m not in NETWORK_METHODS)
GRADCHECK_TOL = 1e-4


def _fmt(x: float) -> str:
    return repr(float(x))


def _log(out_dir: Path, lines):
    """Append timestamped lines to run.log (the only timestamped artifact)."""
    stamp = datetime.datetime.now().isoformat(timespec="seconds")
    with open(out_dir / "run.log", "a") as fh:
        for line in lines:
            fh.write(f"{stamp} {line}\n")


def _write_run_artifacts(out_dir: Path, config: RunConfig, produced, seeds=None):
    """resolved.cfg + seeds.txt + files.csv manifest of produced outputs."""
    write_resolved(config, out_dir / "resolved.cfg")
    if seeds:
        with open(out_dir / "seeds.txt", "w") as fh:
            for name, value in seeds:
                fh.write(f"{name} = {value}\n")
    listed = sorted(set(list(produced) + ["resolved.cfg"]
                        + (["seeds.txt"] if seeds else [])))
    with open(out_dir / "files.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["file"])
        for name in listed:
            writer.writerow([name])


def _load_run_config(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"run.seed={args.seed}")
    return load_config(args.config, overrides)


def _phantom_spec(config: RunConfig) -> ph.PhantomSpec:
    return ph.PhantomSpec(
        n_subjects=config["phantom.n_subjects"],
        balanced=config["phantom.balanced"],
        volume_shape=(config["phantom.rows"], config["phantom.cols"],
                      config["phantom.slices"]),
        spacing=(config["phantom.spacing_x"], config["phantom.spacing_y"],
                 config["phantom.spacing_z"]),
        background_hu_mean=config["phantom.background_hu_mean"],
        background_hu_std=config["phantom.background_hu_std"],
        noise_sigma=config["phantom.noise_sigma"],
        lesion_rate=config["phantom.lesion_rate"],
        lesion_radius_mm=(config["phantom.lesion_radius_min_mm"],
                          config["phantom.lesion_radius_max_mm"]),
        lesion_hu_levels=config["phantom.lesion_hu_levels"],
        latent_amplitude=config["phantom.latent_amplitude"],
        latent_period_mm=config["phantom.latent_period_mm"],
        label_model=ph.LabelModel(
            a=config["phantom.label_a"], b=config["phantom.label_b"],
            bias=config["phantom.label_bias"],
            agatston_ref=config["phantom.agatston_ref"]),
        grade_noise=config["phantom.grade_noise"],
        grade_cutpoints=config["phantom.grade_cutpoints"],
        center_jitter_px=config["phantom.center_jitter_px"],
        seed=config["run.seed"],
    )


def cmd_phantom(args) -> int:
    config = _load_run_config(args)
    try:
        spec = _phantom_spec(config)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = ph.generate_dataset(spec, out_dir)
    rows = ph.load_manifest(manifest)
    produced = [ph.MANIFEST_NAME] + [r.volume_file for r in rows]
    _write_run_artifacts(out_dir, config, produced,
                         seeds=[("run.seed", spec.seed)])
    _log(out_dir, [f"phantom: wrote {len(rows)} subjects to {out_dir}"])
    print(f"wrote {len(rows)} subjects to {out_dir}")
    return 0


SCORE_COLUMNS = ["subject_id", "agatston", "risk_category", "volume_mm3",
                 "sqrt_volume", "grade", "label"]


def cmd_score(args) -> int:
    subjects = load_study(args.data)
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SCORE_COLUMNS)
        for s in subjects:
            writer.writerow([
                s.id, _fmt(s.measured.agatston), int(s.measured.risk_category),
                _fmt(s.measured.volume_mm3), _fmt(s.measured.sqrt_volume),
                s.grade, s.label,
            ])
    print(f"scored {len(subjects)} subjects -> {out}")
    return 0


def cmd_train(args) -> int:
    config = _load_run_config(args)
    subjects = load_study(args.data)
    trainer = NetworkTrainer(subjects, config)
    seed = derive_seed(config["run.seed"], "train")
    all_idx = np.arange(len(subjects))
    stage1 = trainer.stage1(all_idx, seed)
    stage2_epochs = config["train.stage2_epochs"]
    if stage2_epochs > 0:
        result = trainer.stage2(all_idx, seed, config["train.score_source"])
        stage = 2
    else:
        result, stage = stage1, 1
    manifest = Path(args.data) / ph.MANIFEST_NAME
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, result.model, strategy=config["train.strategy"],
                    stage=stage, data_fingerprint=fingerprint_file(manifest),
                    train_epochs=len(result.epoch_losses))
    print(f"stage {stage} model saved to {out} "
          f"(final loss {result.final_loss:.4f})")
    return 0


def _checkpoint_method(ckpt_path, subjects, dataset_dir):
    from .evaluation import FixedScoreMethod

    model, header = load_checkpoint(ckpt_path)
    manifest = Path(dataset_dir) / ph.MANIFEST_NAME
    actual = fingerprint_file(manifest)
    recorded = header.get("data_fingerprint", "")
    if recorded and recorded != actual:
        raise ConfigError(
            f"checkpoint {ckpt_path} was trained on a different dataset "
            f"(fingerprint {recorded[:12]}.. vs {actual[:12]}..); refusing to evaluate"
        )
    scores = predict_proba(model, to_train_samples(subjects))
    return FixedScoreMethod(f"checkpoint:{Path(ckpt_path).name}", scores)


def cmd_eval(args) -> int:
    config = _load_run_config(args)
    if bool(args.checkpoint) == bool(args.method):
        raise ConfigError("eval needs exactly one of --checkpoint or --method")
    subjects = load_study(args.data)
    labels = labels_of(subjects)
    if args.method:
        if args.method in NETWORK_METHODS:
            raise ConfigError(
                f"{args.method} must be trained per fold; use the compare command"
            )
        if args.method not in FIXED_METHODS:
            raise ConfigError(
                f"unknown method {args.method!r}; choose from {list(FIXED_METHODS)}"
            )
        method = build_methods(subjects, config, names=[args.method])[0]
    else:
        method = _checkpoint_method(args.checkpoint, subjects, args.data)
    result = cross_validate(labels, method, k=config["eval.k"],
                            seed=config["run.seed"],
                            stratified=config["eval.stratified"])
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_summary_csv(out_dir / "summary.csv", [result])
    write_roc_csv(out_dir / "roc.csv", [result])
    _write_run_artifacts(out_dir, config, ["summary.csv", "roc.csv"],
                         seeds=[("run.seed", config["run.seed"])])
    _log(out_dir, [f"eval {method.name}: AUC {result.mean:.4f} +/- {result.std:.4f}"])
    print(f"{method.name}: AUC {result.mean:.4f} +/- {result.std:.4f} "
          f"over {config['eval.k']} folds")
    return 0


def cmd_compare(args) -> int:
    config = _load_run_config(args)
    subjects = load_study(args.data)
    labels = labels_of(subjects)
    methods = build_methods(subjects, config)
    if len(methods) < 2:
        raise ConfigError("compare needs at least two methods in eval.methods")
    results = compare_methods(labels, methods, k=config["eval.k"],
                              seed=config["run.seed"],
                              stratified=config["eval.stratified"])
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_summary_csv(out_dir / "summary.csv", results)
    write_roc_csv(out_dir / "roc.csv", results)
    produced = ["summary.csv", "roc.csv"]
    if args.plot:
        plot_roc_svg(out_dir / "roc.svg", results, seed=config["run.seed"])
        produced.append("roc.svg")
    _write_run_artifacts(out_dir, config, produced,
                         seeds=[("run.seed", config["run.seed"])])
    lines = [f"{r.method}: AUC {r.mean:.4f} +/- {r.std:.4f}" for r in results]
    _log(out_dir, lines)
    print("\n".join(lines))
    return 0


def cmd_gradcheck(args) -> int:
    config = _load_run_config(args)
    backbone = BackboneConfig(depth=config["backbone.depth"],
                              feature_dim=config["backbone.feature_dim"],
                              input_size=config["backbone.input_size"])
    seed = config["run.seed"]
    torch.manual_seed(derive_seed(seed, "gradcheck-model") % (2 ** 63))
    model = HyRiskNet(backbone) if args.hybrid else RiskNet(backbone)
    attach_stats(model, NormalizationStats(channel_mean=(0.0,) * 3,
                                           channel_std=(1.0,) * 3))
    rng = np.random.default_rng(derive_seed(seed, "gradcheck-batch"))
    n = args.batch
    images = rng.standard_normal((n, 3, backbone.input_size, backbone.input_size))
    labels = rng.integers(0, 2, size=n)
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    scores = rng.uniform(-1, 1, size=n) if args.hybrid else None
    result = gradient_check(model, images, labels, scores=scores,
                            epsilon=args.epsilon, n_coords=args.coords,
                            seed=seed, corrupt=args.corrupt)
    print(f"max relative error {result.max_rel_error:.3e} over "
          f"{result.n_coords} coordinates (worst: {result.worst_param})")
    if not result.passed(GRADCHECK_TOL):
        raise NumericError(
            f"gradient check failed: {result.max_rel_error:.3e} >= {GRADCHECK_TOL}"
        )
    print("gradient check passed")
    return 0


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="shorthand for --set run.seed=N")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cacrisk",
        description="Coronary calcium scoring and mortality-risk evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic cohort")
    _add_common(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("score", help="quantify calcium per subject")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("train", help="train a risk network")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="cross-validated AUC of one method")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--checkpoint", help="trained model checkpoint")
    p.add_argument("--method", help=f"one of {', '.join(FIXED_METHODS)}")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="cross-validate several methods")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--plot", action="store_true", help="also write roc.svg")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    _add_common(p)
    p.add_argument("--hybrid", action="store_true",
                   help="check the score-fusion model instead of image-only")
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--coords", type=int, default=200)
    p.add_argument("--corrupt", metavar="PARAM",
                   help="negate this parameter's gradient (self-test)")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def _root_cause(exc: BaseException) -> BaseException:
    seen = set()
    while exc.__cause__ is not None and id(exc) not in seen:
        seen.add(id(exc))
        exc = exc.__cause__
    return exc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError, NumericError, EvaluationError) as e:
        code = _exit_code(e)
        print(f"error: {e}", file=sys.stderr)
        return code
    except RuntimeError as e:
        root = _root_cause(e)
        if isinstance(root, (ConfigError, DataError, NumericError, EvaluationError)):
            print(f"error: {e}", file=sys.stderr)
            return _exit_code(root)
        raise


def _exit_code(e: BaseException) -> int:
    if isinstance(e, ConfigError):
        return 2
    if isinstance(e, DataError):
        return 3
    return 4


if __name__ == "__main__":
    sys.exit(main())
