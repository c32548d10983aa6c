"""Command-line interface.

Subcommands cover the individual pipeline stages (``synth-gen``, ``train``,
``calibrate``, ``predict``, ``evaluate``) plus the full cross-validated grid
(``run``) and artifact regeneration (``report``). Progress goes to stderr;
machine-readable output goes to files or stdout. Exit codes: 0 success,
1 invalid input or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from .calibrate import (
    AUX,
    BASE,
    METHODS,
    PLATT,
    REGIMES,
    CalibrationSettings,
    McConfig,
    McDropoutPredictor,
    NetworkPredictor,
    apply_aux_conv,
    apply_platt,
    calibrate_pipeline,
)
from .exceptions import (
    ConfigError,
    DataError,
    FormatError,
    GridError,
    MetricError,
    ParameterError,
    SegcalibError,
    SplitError,
)
from .grids import predicted_class, split_folds
from .metrics import (
    CONFIDENCE_MODES,
    PREDICTION_CONFIDENCE,
    dice_score,
    subject_ece,
    wilcoxon_signed_rank,
)
from .pipeline import (
    RunConfig,
    RunLogger,
    _split_calibration,
    _subseed,
    _train_base,
    render_table,
    results_from_json,
    run_experiment,
    write_artifacts,
)
from .seeding import TAG_CALIBRATE, TAG_SPLIT, TAG_TRAIN
from .storage import (
    checkpoint_kind,
    load_aux_checkpoint,
    load_dataset,
    load_network_checkpoint,
    load_platt_checkpoint,
    load_predictions,
    save_aux_checkpoint,
    save_dataset,
    save_network_checkpoint,
    save_platt_checkpoint,
    save_predictions,
)
from .synth import SynthConfig, generate_subjects

_VALIDATION_ERRORS = (
    ConfigError,
    ParameterError,
    GridError,
    SplitError,
    DataError,
    MetricError,
    FormatError,
    FileNotFoundError,
    NotADirectoryError,
)

THREADS_ENV = "SEG_CALIB_THREADS"


class _Parser(argparse.ArgumentParser):
    """argparse that exits with code 1 on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _threads_from(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from exc
    return 1


def _log(message: str) -> None:
    print(message, file=sys.stderr, flush=True)


_SYNTH_KEYS = {f.name for f in dataclasses.fields(SynthConfig)}
_DATASET_KEYS = _SYNTH_KEYS | {"path", "subjects"}
_RUN_KEYS = {
    f.name
    for f in dataclasses.fields(RunConfig)
    if f.name not in ("dataset_path", "synth", "n_subjects")
}
_TUPLE_KEYS = ("n_shapes", "axis_range", "regimes", "methods")


def load_run_config(path) -> RunConfig:
    """Parse a TOML run configuration.

    Two sections are recognised, ``[dataset]`` and ``[run]``; unknown
    sections or keys are errors so typos fail fast. The dataset section
    either points at an existing directory (``path``) or configures the
    synthetic generator.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    with open(path, "rb") as handle:
        try:
            raw = tomllib.load(handle)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    unknown_sections = set(raw) - {"dataset", "run"}
    if unknown_sections:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown_sections)}")
    dataset = dict(raw.get("dataset", {}))
    run = dict(raw.get("run", {}))
    for section, keys, allowed in (("dataset", dataset, _DATASET_KEYS), ("run", run, _RUN_KEYS)):
        bad = set(keys) - allowed
        if bad:
            raise ConfigError(f"{path}: unknown {section} keys {sorted(bad)}")

    kwargs = {}
    dataset_path = dataset.pop("path", None)
    if dataset_path is not None:
        if not Path(dataset_path).is_dir():
            raise ConfigError(f"{path}: dataset.path {dataset_path!r} is not a directory")
        kwargs["dataset_path"] = str(dataset_path)
    n_subjects = dataset.pop("subjects", None)
    if n_subjects is not None:
        kwargs["n_subjects"] = int(n_subjects)
    synth_kwargs = {
        k: tuple(v) if k in _TUPLE_KEYS and isinstance(v, list) else v
        for k, v in dataset.items()
    }
    kwargs["synth"] = SynthConfig(**synth_kwargs)
    for key, value in run.items():
        kwargs[key] = tuple(value) if key in _TUPLE_KEYS and isinstance(value, list) else value
    return RunConfig(**kwargs)


def _cmd_synth_gen(args) -> int:
    config = SynthConfig(
        grid_size=args.grid_size,
        noise_sigma=args.noise_sigma,
        blur_sigma=args.blur_sigma,
        seed=args.seed,
    )
    subjects = generate_subjects(config, args.subjects)
    paths = save_dataset(subjects, args.out)
    _log(f"wrote {len(paths)} subjects to {args.out}")
    return 0


def _fold_splits(subject_ids, folds, seed, fold):
    split = split_folds(sorted(subject_ids), folds, _subseed(seed, TAG_SPLIT))
    if not (0 <= fold < folds):
        raise ConfigError(f"fold must lie in [0, {folds}), got {fold}")
    train_ids = split.rest_ids(fold)
    model_train, calib_fit, calib_val = _split_calibration(train_ids, 0.25, seed, fold)
    return split, model_train, calib_fit, calib_val


def _cmd_train(args) -> int:
    subjects = load_dataset(args.data)
    by_id = {s.id: s for s in subjects}
    if args.regime not in REGIMES:
        raise ConfigError(f"regime must be one of {REGIMES}, got {args.regime!r}")
    _, model_train, calib_fit, calib_val = _fold_splits(by_id, args.folds, args.seed, args.fold)
    config = RunConfig(
        regimes=(args.regime,),
        methods=(BASE,),
        folds=args.folds,
        seed=args.seed,
        max_epochs=args.max_epochs,
    )
    train_seed = _subseed(args.seed, TAG_TRAIN, args.fold, 0)
    params, history = _train_base(
        args.regime,
        [by_id[i] for i in model_train],
        [by_id[i] for i in calib_fit + calib_val],
        config,
        train_seed,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / f"weights_{args.regime}_fold{args.fold}.scw1"
    save_network_checkpoint(out_path, params, regime=args.regime)
    _log(f"trained {len(history)} epochs, final val loss {history[-1].val_loss:.6f}")
    print(out_path)
    return 0


def _cmd_calibrate(args) -> int:
    from .network import NO_DROPOUT
    from .pipeline import _jsonable

    subjects = load_dataset(args.data)
    by_id = {s.id: s for s in subjects}
    params, regime, _ = load_network_checkpoint(args.weights)
    if regime not in REGIMES:
        raise ConfigError(
            f"checkpoint {args.weights} has no training regime tag; "
            "calibration needs one to choose its loss and learning rate"
        )
    _, _, calib_fit, calib_val = _fold_splits(by_id, args.folds, args.seed, args.fold)
    settings = CalibrationSettings(
        seed=_subseed(args.seed, TAG_CALIBRATE, args.fold, 0, METHODS.index(args.method)),
        threads=_threads_from(args),
        mc_samples=args.mc_samples,
    )
    predictor, info = calibrate_pipeline(
        args.method,
        params,
        regime,
        [by_id[i] for i in calib_fit],
        [by_id[i] for i in calib_val],
        settings,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / f"calibrator_{args.method}_fold{args.fold}.scw1"
    if args.method == PLATT:
        save_platt_checkpoint(out_path, info["platt"])
    elif args.method == AUX:
        save_aux_checkpoint(out_path, info["aux"])
    elif isinstance(predictor, McDropoutPredictor):
        save_network_checkpoint(out_path, predictor.params, regime=regime,
                                dropout=predictor.config.dropout)
    else:
        save_network_checkpoint(out_path, predictor.params, regime=regime, dropout=NO_DROPOUT)
    _log(f"calibrated with {args.method}: {json.dumps(_jsonable(info), sort_keys=True)}")
    print(out_path)
    return 0


def _cmd_predict(args) -> int:
    subjects = load_dataset(args.data)
    params, _, dropout = load_network_checkpoint(args.weights)
    threads = _threads_from(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    calibrator_apply = None
    if args.calibrator is not None:
        kind = checkpoint_kind(args.calibrator)
        if kind == "platt":
            platt = load_platt_checkpoint(args.calibrator)
            calibrator_apply = lambda z: apply_platt(platt, z)
        elif kind == "aux_conv":
            aux = load_aux_checkpoint(args.calibrator)
            calibrator_apply = lambda z: apply_aux_conv(aux, z)
        else:
            raise ConfigError(
                f"{args.calibrator} holds network weights; pass it as --weights instead"
            )

    if args.mc_samples is not None:
        if not dropout.sites or dropout.rate == 0.0:
            raise ConfigError(
                "--mc-samples requires a checkpoint retrained with dropout sites"
            )
        if calibrator_apply is not None:
            raise ConfigError("--calibrator cannot be combined with --mc-samples")
        mc = McDropoutPredictor(
            params, McConfig(n_samples=args.mc_samples, dropout=dropout, seed=args.seed), threads
        )
        for subject in subjects:
            mean, std = mc.predict_with_std(subject)
            save_predictions(out_dir / f"{subject.id}.scv1", mean, std)
    else:
        network = NetworkPredictor(params)
        for subject in subjects:
            logits = network.predict_logits(subject)
            probs = calibrator_apply(logits) if calibrator_apply else network.predict_proba(subject)
            save_predictions(out_dir / f"{subject.id}.scv1", probs)
    _log(f"wrote {len(subjects)} prediction files to {out_dir}")
    return 0


def _evaluate_dir(subjects, pred_dir, n_bins, mode):
    per_dice, per_ece = {}, {}
    for subject in subjects:
        path = Path(pred_dir) / f"{subject.id}.scv1"
        if not path.exists():
            raise DataError(f"{pred_dir} has no prediction for subject {subject.id}")
        probs = load_predictions(path)["probabilities"]
        per_dice[subject.id] = dice_score(predicted_class(probs, 0.5), subject.labels)
        per_ece[subject.id] = subject_ece(probs, subject.labels, subject.eval_mask, n_bins, mode)
    return per_dice, per_ece


def _cmd_evaluate(args) -> int:
    subjects = load_dataset(args.data)
    if args.mode not in CONFIDENCE_MODES:
        raise ConfigError(f"mode must be one of {CONFIDENCE_MODES}")
    report = {"mode": args.mode, "n_bins": args.n_bins, "predictions": []}
    vectors = []
    for pred_dir in args.pred:
        per_dice, per_ece = _evaluate_dir(subjects, pred_dir, args.n_bins, args.mode)
        vectors.append(per_ece)
        report["predictions"].append(
            {
                "path": str(pred_dir),
                "mean_dice": float(np.mean(list(per_dice.values()))),
                "mean_ece": float(np.mean(list(per_ece.values()))),
                "per_subject_dice": per_dice,
                "per_subject_ece": per_ece,
            }
        )
    if len(vectors) == 2:
        ids = sorted(vectors[0])
        result = wilcoxon_signed_rank(
            [vectors[0][i] for i in ids], [vectors[1][i] for i in ids]
        )
        report["ece_wilcoxon"] = {
            "statistic": result.statistic,
            "p_value": result.p_value,
            "n_effective": result.n_effective,
            "method": result.method,
        }
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def _cmd_run(args) -> int:
    config = load_run_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    overrides["threads"] = _threads_from(args)
    config = dataclasses.replace(config, **overrides)
    logger = RunLogger()
    results = run_experiment(config, out_dir=args.out, logger=logger)
    print(render_table(results))
    return 0


def _cmd_report(args) -> int:
    run_dir = Path(args.run)
    results_path = run_dir / "results.json"
    if not results_path.exists():
        raise ConfigError(f"{results_path} does not exist; run the experiment first")
    payload = json.loads(results_path.read_text(encoding="utf-8"))
    results = results_from_json(payload)
    out_dir = Path(args.out) if args.out else run_dir
    write_artifacts(results, out_dir)
    print(render_table(results))
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="segcalib", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed")
    common.add_argument("--threads", type=int, default=None,
                        help=f"worker threads (default: ${THREADS_ENV} or 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--subjects", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid-size", type=int, default=64)
    p.add_argument("--noise-sigma", type=float, default=0.3)
    p.add_argument("--blur-sigma", type=float, default=1.5)
    p.set_defaults(func=_cmd_synth_gen)

    p = sub.add_parser("train", parents=[common], help="train one regime on one fold")
    p.add_argument("--data", required=True)
    p.add_argument("--regime", required=True, choices=REGIMES)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--max-epochs", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("calibrate", parents=[common], help="fit one calibration method")
    p.add_argument("--data", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--method", required=True,
                   choices=[m for m in METHODS if m != BASE])
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--mc-samples", type=int, default=20)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("predict", parents=[common], help="write probability maps")
    p.add_argument("--data", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--calibrator", default=None)
    p.add_argument("--mc-samples", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="score prediction directories")
    p.add_argument("--data", required=True)
    p.add_argument("--pred", action="append", required=True,
                   help="prediction directory (repeat to compare two)")
    p.add_argument("--n-bins", type=int, default=20)
    p.add_argument("--mode", default=PREDICTION_CONFIDENCE)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("run", parents=[common], help="run the full experiment grid")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("report", parents=[common], help="re-emit artifacts from a run")
    p.add_argument("--run", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "seed", None) is None:
        args.seed = 0
    try:
        return args.func(args)
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SegcalibError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - last resort
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
