"""Cross-validated train / calibrate / evaluate experiments.

For every fold, the held-out subjects are used exclusively for reported
metrics. The remaining training portion is split again: the larger part
trains the base network and the smaller "calibration split" provides the
base model's early-stopping signal and all data any calibration method may
fit on (itself sub-split into a fitting part and an early-stop part). A
runtime assertion guarantees no subject that influenced any fit or
learning-rate choice is ever scored.

Every stochastic stage derives its stream from the run seed, so a run is a
pure function of its configuration: re-running with identical seeds and any
thread count reproduces identical artifacts byte for byte.
"""

from __future__ import annotations

import dataclasses
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, TextIO

import numpy as np

from .calibrate import (
    CalibrationSettings,
    METHODS,
    REGIMES,
    calibrate_pipeline,
)
from .exceptions import ConfigError, SegcalibError
from .grids import Subject, predicted_class, split_folds
from .metrics import (
    CONFIDENCE_MODES,
    HIGHER,
    LOWER,
    PREDICTION_CONFIDENCE,
    ReliabilityBins,
    best_marking,
    dice_score,
    ece,
    subject_bin_distribution,
    subject_ece,
)
from .network import CROSS_ENTROPY, SOFT_DICE, SegmentationNetwork
from .seeding import TAG_CALIBRATE, TAG_SPLIT, TAG_TRAIN
from .storage import load_dataset
from .synth import SynthConfig, generate_subjects

_REGIME_LOSS = {
    "ce": (CROSS_ENTROPY, False),
    "ce_sd": (SOFT_DICE, True),
    "sd": (SOFT_DICE, False),
}


def _subseed(seed: int, *tags: int) -> int:
    """Independent 63-bit integer seed derived from (seed, tags)."""
    state = np.random.SeedSequence((int(seed),) + tuple(int(t) for t in tags))
    return int(state.generate_state(1, dtype=np.uint64)[0] >> 1)


@dataclass(frozen=True)
class RunConfig:
    """Settings of one full experiment grid."""

    dataset_path: Optional[str] = None
    synth: SynthConfig = SynthConfig()
    n_subjects: int = 50
    folds: int = 5
    regimes: tuple[str, ...] = REGIMES
    methods: tuple[str, ...] = METHODS
    seed: int = 0
    threads: int = 1
    n_bins: int = 20
    confidence_mode: str = PREDICTION_CONFIDENCE
    max_epochs: int = 50
    batch_size: int = 8
    pretrain_epochs: int = 10
    dropout_rate: float = 0.2
    mc_samples: int = 20
    aux_kernel_size: int = 5
    calib_fraction: float = 0.25
    min_bin_count: int = 10

    def __post_init__(self):
        if not self.regimes or not self.methods:
            raise ConfigError("at least one regime and one method are required")
        for regime in self.regimes:
            if regime not in REGIMES:
                raise ConfigError(f"unknown regime {regime!r}; expected one of {REGIMES}")
        for method in self.methods:
            if method not in METHODS:
                raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")
        if self.confidence_mode not in CONFIDENCE_MODES:
            raise ConfigError(f"unknown confidence mode {self.confidence_mode!r}")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if not (0.0 < self.calib_fraction < 1.0):
            raise ConfigError("calib_fraction must lie in (0, 1)")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")


@dataclass
class CellResult:
    """Aggregated evaluation of one (regime, method) cell across folds."""

    regime: str
    method: str
    per_subject_dice: dict[str, float] = field(default_factory=dict)
    per_subject_ece: dict[str, float] = field(default_factory=dict)
    bins: Optional[ReliabilityBins] = None
    pooled_ece: float = float("nan")
    info: dict = field(default_factory=dict)
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None

    # Means reduce in sorted-id order so they are identical no matter how
    # the per-subject values were accumulated or restored.
    @property
    def mean_dice(self) -> float:
        return float(np.mean([self.per_subject_dice[k] for k in sorted(self.per_subject_dice)]))

    @property
    def mean_ece(self) -> float:
        return float(np.mean([self.per_subject_ece[k] for k in sorted(self.per_subject_ece)]))


@dataclass
class ExperimentResults:
    config: RunConfig
    cells: dict[tuple[str, str], CellResult]
    best_dice: dict[str, set[str]]
    best_ece: dict[str, set[str]]
    fold_assignment: dict[str, int]

    def cell(self, regime: str, method: str) -> CellResult:
        return self.cells[(regime, method)]


class RunLogger:
    """Collects progress lines and mirrors them to a stream (stderr)."""

    def __init__(self, stream: Optional[TextIO] = None):
        self.stream = stream if stream is not None else sys.stderr
        self.lines: list[str] = []
        self._start = time.monotonic()

    def log(self, message: str) -> None:
        line = f"[{time.monotonic() - self._start:8.1f}s] {message}"
        self.lines.append(line)
        if self.stream is not None:
            print(line, file=self.stream, flush=True)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.lines) + "\n", encoding="utf-8")


def assert_evaluation_hygiene(fit_ids, eval_ids) -> None:
    """Raise if any subject that influenced fitting would be scored."""
    overlap = set(fit_ids) & set(eval_ids)
    if overlap:
        raise ConfigError(
            f"evaluation hygiene violated: {sorted(overlap)} appear in both the "
            "fitting data and the evaluation fold"
        )


def _split_calibration(train_ids: Sequence[str], fraction: float, seed: int, fold: int):
    """Partition a fold's training portion into model-train / calib-fit /
    calib-val id lists, deterministically in (seed, fold)."""
    rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence((int(seed), TAG_SPLIT, int(fold))))
    )
    ids = sorted(train_ids)
    order = rng.permutation(len(ids))
    shuffled = [ids[int(i)] for i in order]
    n_calib = max(2, int(round(fraction * len(ids))))
    if len(ids) - n_calib < 1:
        raise ConfigError(
            f"training portion of fold {fold} is too small ({len(ids)} subjects) "
            f"for a calibration split of {n_calib}"
        )
    calib = shuffled[:n_calib]
    model_train = shuffled[n_calib:]
    n_val = max(1, int(round(0.25 * n_calib)))
    calib_val = calib[:n_val]
    calib_fit = calib[n_val:]
    return model_train, calib_fit, calib_val


def _load_subjects(config: RunConfig, logger: RunLogger) -> list[Subject]:
    if config.dataset_path is not None:
        logger.log(f"loading dataset from {config.dataset_path}")
        return load_dataset(config.dataset_path)
    logger.log(
        f"generating {config.n_subjects} synthetic subjects "
        f"(grid {config.synth.grid_size}, blur {config.synth.blur_sigma}, "
        f"noise {config.synth.noise_sigma}, seed {config.synth.seed})"
    )
    return generate_subjects(config.synth, config.n_subjects)


def _train_base(regime: str, train_subjects, val_subjects, config: RunConfig, seed: int):
    loss, pretrains = _REGIME_LOSS[regime]
    network = SegmentationNetwork(
        loss=loss,
        max_epochs=config.max_epochs,
        batch_size=config.batch_size,
        pretrain_epochs=config.pretrain_epochs if pretrains else 0,
        seed=seed,
    )
    network.fit(train_subjects, val_subjects)
    return network.params_, network.history_


def _evaluate_predictor(predictor, eval_subjects, config: RunConfig):
    """Per-subject Dice and ECE plus bin tallies on the evaluation subjects.

    Subjects are processed independently (optionally in a thread pool) and
    reduced in subject order, so the result never depends on thread count.
    """

    def score(subject: Subject):
        probs = predictor.predict_proba(subject)
        dice = dice_score(predicted_class(probs, 0.5), subject.labels)
        e = subject_ece(probs, subject.labels, subject.eval_mask, config.n_bins, config.confidence_mode)
        bins = ReliabilityBins(config.n_bins, config.confidence_mode)
        bins.add_probabilities(probs, subject.labels, subject.eval_mask, subject.id)
        return subject.id, dice, e, bins

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            rows = list(pool.map(score, eval_subjects))
    else:
        rows = [score(subject) for subject in eval_subjects]

    dices, eces = {}, {}
    merged = ReliabilityBins(config.n_bins, config.confidence_mode)
    for subject_id, dice, e, bins in rows:
        dices[subject_id] = dice
        eces[subject_id] = e
        merged = merged.merge(bins)
    return dices, eces, merged


def run_experiment(
    config: RunConfig,
    out_dir=None,
    logger: Optional[RunLogger] = None,
) -> ExperimentResults:
    """Run the full grid and (optionally) write artifacts to ``out_dir``.

    A failure in one (regime, method) cell is recorded as that cell's error
    and the remaining cells continue.
    """
    logger = logger or RunLogger()
    subjects = _load_subjects(config, logger)
    by_id = {subject.id: subject for subject in subjects}
    split = split_folds(sorted(by_id), config.folds, _subseed(config.seed, TAG_SPLIT))

    cells: dict[tuple[str, str], CellResult] = {
        (regime, method): CellResult(regime=regime, method=method)
        for regime in config.regimes
        for method in config.methods
    }

    for fold in range(config.folds):
        eval_ids = split.fold_ids(fold)
        train_ids = split.rest_ids(fold)
        model_train_ids, calib_fit_ids, calib_val_ids = _split_calibration(
            train_ids, config.calib_fraction, config.seed, fold
        )
        fit_ids = model_train_ids + calib_fit_ids + calib_val_ids
        assert_evaluation_hygiene(fit_ids, eval_ids)

        model_train = [by_id[i] for i in model_train_ids]
        calib_fit = [by_id[i] for i in calib_fit_ids]
        calib_val = [by_id[i] for i in calib_val_ids]
        calib_all = calib_fit + calib_val
        eval_subjects = [by_id[i] for i in eval_ids]

        for r_index, regime in enumerate(config.regimes):
            train_seed = _subseed(config.seed, TAG_TRAIN, fold, r_index)
            try:
                base_params, history = _train_base(
                    regime, model_train, calib_all, config, train_seed
                )
                logger.log(
                    f"fold {fold} regime {regime}: base trained "
                    f"({len(history)} epochs, val loss {history[-1].val_loss:.4f})"
                )
            except SegcalibError as exc:
                for method in config.methods:
                    cell = cells[(regime, method)]
                    cell.error = f"fold {fold}: base training failed: {exc}"
                    logger.log(f"fold {fold} regime {regime}: FAILED base training: {exc}")
                continue

            for m_index, method in enumerate(config.methods):
                cell = cells[(regime, method)]
                if cell.error is not None:
                    continue
                settings = CalibrationSettings(
                    aux_kernel_size=config.aux_kernel_size,
                    dropout_rate=config.dropout_rate,
                    mc_samples=config.mc_samples,
                    max_epochs=config.max_epochs,
                    seed=_subseed(config.seed, TAG_CALIBRATE, fold, r_index, m_index),
                    threads=config.threads,
                )
                try:
                    predictor, info = calibrate_pipeline(
                        method, base_params, regime, calib_fit, calib_val, settings
                    )
                    dices, eces, bins = _evaluate_predictor(predictor, eval_subjects, config)
                except SegcalibError as exc:
                    cell.error = f"fold {fold}: {exc}"
                    logger.log(f"fold {fold} regime {regime} method {method}: FAILED: {exc}")
                    continue
                cell.per_subject_dice.update(dices)
                cell.per_subject_ece.update(eces)
                cell.bins = bins if cell.bins is None else cell.bins.merge(bins)
                if info:
                    cell.info[f"fold{fold}"] = _jsonable(info)
                logger.log(
                    f"fold {fold} regime {regime} method {method}: "
                    f"dice {np.mean(list(dices.values())):.4f} "
                    f"ece {np.mean(list(eces.values())):.4f}"
                )

    for cell in cells.values():
        if cell.ok and cell.bins is not None:
            cell.pooled_ece = ece(cell.bins)

    best_dice: dict[str, set[str]] = {}
    best_ece: dict[str, set[str]] = {}
    for regime in config.regimes:
        ok_methods = {
            method: cells[(regime, method)].per_subject_dice
            for method in config.methods
            if cells[(regime, method)].ok
        }
        if len(ok_methods) >= 2:
            best_dice[regime] = best_marking(ok_methods, HIGHER)
            best_ece[regime] = best_marking(
                {m: cells[(regime, m)].per_subject_ece for m in ok_methods}, LOWER
            )
        else:
            best_dice[regime] = set(ok_methods)
            best_ece[regime] = set(ok_methods)

    results = ExperimentResults(
        config=config,
        cells=cells,
        best_dice=best_dice,
        best_ece=best_ece,
        fold_assignment=dict(split.assignment),
    )
    if out_dir is not None:
        write_artifacts(results, out_dir, logger)
    return results


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.integer, np.floating)):
        return value.item()
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return _jsonable(dataclasses.asdict(value))
    return value


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def emit_scatter_csv(results: ExperimentResults, path) -> None:
    """One row per (regime, method) with mean Dice and mean ECE."""
    lines = ["regime,method,mean_dice,mean_ece"]
    for regime in results.config.regimes:
        for method in results.config.methods:
            cell = results.cells[(regime, method)]
            if cell.ok and cell.per_subject_dice:
                lines.append(
                    f"{regime},{method},{_fmt(cell.mean_dice)},{_fmt(cell.mean_ece)}"
                )
            else:
                lines.append(f"{regime},{method},nan,nan")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def emit_reliability_csv(cell: CellResult, path, min_bin_count: int = 10) -> None:
    """Per-bin pooled counts, mean confidence/accuracy, and the standard
    deviation of qualifying subjects' bin accuracies."""
    if cell.bins is None:
        raise ConfigError(f"cell ({cell.regime}, {cell.method}) has no bin data")
    bins = cell.bins
    distribution = subject_bin_distribution(bins, min_bin_count)
    edges = bins.bin_edges()
    acc = bins.accuracy()
    conf = bins.confidence()
    lines = ["bin_low,bin_high,count,mean_conf,mean_acc,subject_acc_std"]
    for k in range(bins.n_bins):
        std = distribution[k].std if distribution[k] is not None else float("nan")
        lines.append(
            f"{_fmt(edges[k])},{_fmt(edges[k + 1])},{bins.counts[k]},"
            f"{_fmt(conf[k])},{_fmt(acc[k])},{_fmt(std)}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def emit_violin_csv(cell: CellResult, path, min_bin_count: int = 10) -> None:
    """One row per (bin, qualifying subject) with that subject's bin accuracy."""
    if cell.bins is None:
        raise ConfigError(f"cell ({cell.regime}, {cell.method}) has no bin data")
    distribution = subject_bin_distribution(cell.bins, min_bin_count)
    lines = ["bin_index,subject_id,accuracy,count"]
    for stats in distribution:
        if stats is None:
            continue
        for sid, accuracy, count in zip(stats.subject_ids, stats.accuracies, stats.counts):
            lines.append(f"{stats.bin_index},{sid},{_fmt(accuracy)},{count}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def render_table(results: ExperimentResults) -> str:
    """Plain-text results table: Dice and ECE% blocks, methods by regimes.

    A ``*`` marks the best value in a column or any value statistically
    indistinguishable from it (paired signed-rank test, p >= 0.05).
    """
    regimes = list(results.config.regimes)
    methods = list(results.config.methods)
    width = max(len(m) for m in methods) + 2
    col = 12

    def row(label, values):
        return label.ljust(width) + "".join(v.rjust(col) for v in values)

    def block(metric, best, scale):
        lines = [row("method", [r.upper() for r in regimes])]
        for method in methods:
            values = []
            for regime in regimes:
                cell = results.cells[(regime, method)]
                if not cell.ok or not cell.per_subject_dice:
                    values.append("failed")
                    continue
                value = cell.mean_dice if metric == "dice" else cell.mean_ece
                mark = "*" if method in best.get(regime, set()) else " "
                values.append(f"{value * scale:.3f}{mark}")
            lines.append(row(method, values))
        return lines

    out = ["Dice (higher is better)"]
    out += block("dice", results.best_dice, 1.0)
    out.append("")
    out.append("ECE% (lower is better)")
    out += block("ece", results.best_ece, 100.0)
    out.append("")
    out.append("* best in column, or not significantly different from the best")
    return "\n".join(out)


def results_to_json(results: ExperimentResults) -> dict:
    payload = {
        "config": _jsonable(dataclasses.asdict(results.config)),
        "confidence_mode": results.config.confidence_mode,
        "n_bins": results.config.n_bins,
        "min_bin_count": results.config.min_bin_count,
        "fold_assignment": results.fold_assignment,
        "best_dice": {r: sorted(v) for r, v in results.best_dice.items()},
        "best_ece": {r: sorted(v) for r, v in results.best_ece.items()},
        "cells": [],
    }
    for (regime, method), cell in results.cells.items():
        entry = {
            "regime": regime,
            "method": method,
            "error": cell.error,
            "per_subject_dice": cell.per_subject_dice,
            "per_subject_ece": cell.per_subject_ece,
            "info": cell.info,
        }
        if cell.ok and cell.per_subject_dice:
            entry["mean_dice"] = cell.mean_dice
            entry["mean_ece"] = cell.mean_ece
            entry["pooled_ece"] = cell.pooled_ece
        if cell.bins is not None:
            entry["bins"] = {
                "n_bins": cell.bins.n_bins,
                "mode": cell.bins.mode,
                "counts": cell.bins.counts.tolist(),
                "confidence_sums": cell.bins.confidence_sums.tolist(),
                "correct_sums": cell.bins.correct_sums.tolist(),
                "per_subject": {
                    sid: [c.tolist(), k.tolist()]
                    for sid, (c, k) in cell.bins.per_subject.items()
                },
            }
        payload["cells"].append(entry)
    return payload


def results_from_json(payload: dict) -> ExperimentResults:
    config_dict = dict(payload["config"])
    config_dict["synth"] = SynthConfig(
        **{
            k: tuple(v) if isinstance(v, list) else v
            for k, v in config_dict["synth"].items()
        }
    )
    for key in ("regimes", "methods"):
        config_dict[key] = tuple(config_dict[key])
    config = RunConfig(**config_dict)
    cells = {}
    for entry in payload["cells"]:
        cell = CellResult(
            regime=entry["regime"],
            method=entry["method"],
            per_subject_dice=dict(entry["per_subject_dice"]),
            per_subject_ece=dict(entry["per_subject_ece"]),
            info=entry.get("info", {}),
            error=entry.get("error"),
        )
        if "bins" in entry:
            raw = entry["bins"]
            bins = ReliabilityBins(raw["n_bins"], raw["mode"])
            bins.counts = np.asarray(raw["counts"], dtype=np.int64)
            bins.confidence_sums = np.asarray(raw["confidence_sums"])
            bins.correct_sums = np.asarray(raw["correct_sums"])
            bins.per_subject = {
                sid: (np.asarray(c, dtype=np.int64), np.asarray(k))
                for sid, (c, k) in raw["per_subject"].items()
            }
            cell.bins = bins
            cell.pooled_ece = entry.get("pooled_ece", float("nan"))
        cells[(entry["regime"], entry["method"])] = cell
    return ExperimentResults(
        config=config,
        cells=cells,
        best_dice={r: set(v) for r, v in payload["best_dice"].items()},
        best_ece={r: set(v) for r, v in payload["best_ece"].items()},
        fold_assignment=dict(payload["fold_assignment"]),
    )


def write_artifacts(results: ExperimentResults, out_dir, logger: Optional[RunLogger] = None) -> None:
    """Write results.json, table.txt, scatter.csv, and per-cell CSVs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.json").write_text(
        json.dumps(results_to_json(results), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    (out / "table.txt").write_text(render_table(results) + "\n", encoding="utf-8")
    emit_scatter_csv(results, out / "scatter.csv")
    for (regime, method), cell in results.cells.items():
        if cell.bins is None:
            continue
        emit_reliability_csv(
            cell, out / f"reliability_{regime}_{method}.csv", results.config.min_bin_count
        )
        emit_violin_csv(cell, out / f"violin_{regime}_{method}.csv", results.config.min_bin_count)
    if logger is not None:
        logger.save(out / "run_log.txt")
        logger.log(f"artifacts written to {out}")
