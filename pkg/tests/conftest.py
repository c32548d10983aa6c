"""Shared fixtures.

The expensive session fixtures run the default-scale experiment once and
train one fold's base models once; acceptance tests and the slower
behavioural tests share them.
"""

from __future__ import annotations

import numpy as np
import pytest

from segcalib.calibrate import attach_logits
from segcalib.grids import split_folds
from segcalib.pipeline import (
    RunConfig,
    RunLogger,
    _split_calibration,
    _subseed,
    _train_base,
    run_experiment,
)
from segcalib.seeding import TAG_SPLIT, TAG_TRAIN
from segcalib.synth import SynthConfig, generate_subjects

ACCEPTANCE_SEED = 7
ACCEPTANCE_SYNTH = SynthConfig(seed=11)
ACCEPTANCE_SUBJECTS = 50
ACCEPTANCE_FOLDS = 5


def small_synth_config(seed: int = 0, grid_size: int = 16) -> SynthConfig:
    """A fast generator config for unit tests."""
    return SynthConfig(grid_size=grid_size, axis_range=(2.0, 4.0), seed=seed)


@pytest.fixture(scope="session")
def small_subjects():
    return generate_subjects(small_synth_config(seed=5), 8)


@pytest.fixture(scope="session")
def default_subjects():
    """The 50 default-scale subjects used by the acceptance experiment."""
    return generate_subjects(ACCEPTANCE_SYNTH, ACCEPTANCE_SUBJECTS)


@pytest.fixture(scope="session")
def acceptance_config():
    return RunConfig(
        synth=ACCEPTANCE_SYNTH,
        n_subjects=ACCEPTANCE_SUBJECTS,
        folds=ACCEPTANCE_FOLDS,
        regimes=("ce", "sd"),
        methods=("base", "platt", "aux", "finetune", "mc_decoder", "mc_center"),
        seed=ACCEPTANCE_SEED,
    )


@pytest.fixture(scope="session")
def acceptance_results(acceptance_config, tmp_path_factory):
    """One full cross-validated run of the CE and SD regimes (minutes)."""
    out_dir = tmp_path_factory.mktemp("acceptance_run")
    logger = RunLogger(stream=None)
    results = run_experiment(acceptance_config, out_dir=out_dir, logger=logger)
    results.out_dir = out_dir
    return results


@pytest.fixture(scope="session")
def fold0_models(default_subjects, acceptance_config):
    """CE and SD base models of fold 0, trained exactly as the pipeline does,
    plus that fold's subject partitions (with logits attached to the
    calibration split for calibrator fitting)."""
    by_id = {s.id: s for s in default_subjects}
    split = split_folds(sorted(by_id), ACCEPTANCE_FOLDS, _subseed(ACCEPTANCE_SEED, TAG_SPLIT))
    eval_ids = split.fold_ids(0)
    model_train_ids, calib_fit_ids, calib_val_ids = _split_calibration(
        split.rest_ids(0), acceptance_config.calib_fraction, ACCEPTANCE_SEED, 0
    )
    model_train = [by_id[i] for i in model_train_ids]
    calib = [by_id[i] for i in calib_fit_ids + calib_val_ids]
    models = {}
    for r_index, regime in enumerate(("ce", "sd")):
        params, _ = _train_base(
            regime, model_train, calib, acceptance_config,
            _subseed(ACCEPTANCE_SEED, TAG_TRAIN, 0, r_index),
        )
        models[regime] = params
    return {
        "models": models,
        "by_id": by_id,
        "eval_ids": eval_ids,
        "calib_fit_ids": calib_fit_ids,
        "calib_val_ids": calib_val_ids,
        "calib_fit": lambda regime: attach_logits(
            models[regime], [by_id[i] for i in calib_fit_ids]
        ),
        "calib_val": lambda regime: attach_logits(
            models[regime], [by_id[i] for i in calib_val_ids]
        ),
    }
