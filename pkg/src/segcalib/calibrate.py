"""Post hoc calibration of a trained segmentation network.

Four families are provided, all consuming the frozen base network's logit
maps:

* affine logit scaling (two parameters, fitted with masked cross-entropy),
* a single k x k convolutional recalibration layer that generalises the
  affine transform by letting neighbouring logits influence the scaling,
* last-layer fine-tuning (delegated to :mod:`segcalib.network`),
* Monte Carlo dropout prediction (sampled stochastic forwards, averaged).

Fitting uses Adam with plateau decay and early stopping on a held-out
validation subset, mirroring the network training schedule.
"""

from __future__ import annotations

import dataclasses
import warnings
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .exceptions import ConfigError, DataError, ParameterError
from .grids import Subject, stable_sigmoid
from .layers import conv2d
from .network import (
    CENTER_SITES,
    CROSS_ENTROPY,
    DECODER_SITES,
    MIN_IMPROVEMENT,
    SOFT_DICE,
    DropoutConfig,
    NetParams,
    TrainConfig,
    finetune_last_layer,
    forward,
    insert_dropout_and_retrain,
)
from .seeding import TAG_CALIBRATE, TAG_MC, derive_rng
from .validation import as_grid

BASE = "base"
PLATT = "platt"
AUX = "aux"
FINETUNE = "finetune"
MC_DECODER = "mc_decoder"
MC_CENTER = "mc_center"
METHODS = (BASE, PLATT, AUX, FINETUNE, MC_DECODER, MC_CENTER)
POST_HOC_METHODS = (PLATT, AUX, FINETUNE)

CE_REGIME = "ce"
CE_SD_REGIME = "ce_sd"
SD_REGIME = "sd"
REGIMES = (CE_REGIME, CE_SD_REGIME, SD_REGIME)


class DegenerateLabelsWarning(UserWarning):
    """Calibration labels contain a single class; the offset can drift."""


@dataclass(frozen=True)
class PlattParams:
    """Affine logit recalibration: probability = sigmoid(a * z + b)."""

    a: float
    b: float

    def __post_init__(self):
        if not (np.isfinite(self.a) and np.isfinite(self.b)):
            raise ParameterError("Platt parameters must be finite")


@dataclass(frozen=True)
class AuxConvParams:
    """Single-layer convolutional recalibration of the logit map."""

    kernel: np.ndarray
    bias: float

    def __post_init__(self):
        kernel = np.asarray(self.kernel, dtype=np.float64)
        if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1]:
            raise ParameterError("kernel must be square")
        if kernel.shape[0] % 2 == 0 or kernel.shape[0] < 1:
            raise ParameterError("kernel size must be odd and >= 1")
        if not (np.all(np.isfinite(kernel)) and np.isfinite(self.bias)):
            raise ParameterError("calibrator parameters must be finite")
        kernel.setflags(write=False)
        object.__setattr__(self, "kernel", kernel)

    @property
    def k(self) -> int:
        return self.kernel.shape[0]


def platt_to_aux_conv(params: PlattParams) -> AuxConvParams:
    """Explicit widening of an affine calibrator to a 1x1 convolution."""
    return AuxConvParams(kernel=np.array([[params.a]]), bias=params.b)


def apply_platt(params: PlattParams, logits) -> np.ndarray:
    """sigmoid(a * z + b), elementwise."""
    z = as_grid(logits, "logits")
    return stable_sigmoid(params.a * z + params.b)


def apply_aux_conv(params: AuxConvParams, logits) -> np.ndarray:
    """sigmoid of the zero-padded k x k convolution of the logit map.

    Zero is the maximum-uncertainty logit, which makes it the least biased
    padding value.
    """
    z = as_grid(logits, "logits")
    weights = params.kernel[np.newaxis, np.newaxis]
    out, _ = conv2d(z[np.newaxis], weights, np.array([params.bias]), params.k // 2)
    return stable_sigmoid(out[0])


@dataclass(frozen=True)
class CalibrationFitConfig:
    """Adam schedule for calibrator fitting.

    Batches are whole subjects. The default of one subject per batch keeps
    the optimizer step count on a handful of calibration subjects comparable
    to what the same epoch budget yields on a large slice-batched dataset;
    the objective (voxel-mean cross-entropy) is unchanged by the batching.
    """

    learning_rate: float = 5e-3
    max_epochs: int = 50
    batch_size: int = 1
    plateau_patience: int = 5
    plateau_factor: float = 0.1
    early_stop_patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.max_epochs < 0 or self.batch_size < 1:
            raise ParameterError("invalid calibration fit configuration")
        if not (0.0 < self.plateau_factor < 1.0):
            raise ParameterError("plateau_factor must lie in (0, 1)")


def _require_logits(subjects: Sequence[Subject]) -> None:
    for subject in subjects:
        if subject.logits is None:
            raise DataError(f"subject {subject.id} has no cached logits")


def _warn_if_single_class(subjects: Sequence[Subject]) -> None:
    total = 0.0
    count = 0
    for subject in subjects:
        total += float((subject.labels * subject.eval_mask).sum())
        count += int(subject.eval_mask.sum())
    if total == 0.0 or total == count:
        warnings.warn(
            "calibration labels are single-class; the offset is weakly "
            "constrained and bounded only by early stopping",
            DegenerateLabelsWarning,
            stacklevel=3,
        )


def masked_mean_ce(probs: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    """Masked mean cross-entropy of probabilities (clipped away from 0/1)."""
    p = np.clip(probs, 1e-12, 1.0 - 1e-12)
    per_voxel = -(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p))
    return float((per_voxel * mask).sum() / mask.sum())


def calibration_objective(
    subjects: Sequence[Subject], apply_fn: Callable[[np.ndarray], np.ndarray]
) -> float:
    """Mean over subjects of the masked mean CE of calibrated probabilities."""
    _require_logits(subjects)
    return float(
        np.mean(
            [masked_mean_ce(apply_fn(s.logits), s.labels, s.eval_mask) for s in subjects]
        )
    )


def _fit_adam_vector(
    theta0: np.ndarray,
    batch_loss_grad: Callable[[np.ndarray, list[Subject]], tuple[float, np.ndarray]],
    val_loss: Callable[[np.ndarray], float],
    subjects: Sequence[Subject],
    config: CalibrationFitConfig,
) -> np.ndarray:
    """Generic Adam driver over a flat parameter vector.

    Shuffled whole-subject batches, per-epoch validation loss, plateau decay
    and early stopping with the same semantics as network training. Returns
    the parameters with the best validation loss.
    """
    rng = derive_rng(config.seed, TAG_CALIBRATE)
    theta = theta0.astype(np.float64).copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    t = 0
    lr = config.learning_rate
    best_val = np.inf
    best_theta = theta.copy()
    gate = np.inf
    plateau_wait = 0
    stop_wait = 0
    subjects = list(subjects)

    for _ in range(config.max_epochs):
        order = rng.permutation(len(subjects))
        for start in range(0, len(order), config.batch_size):
            batch = [subjects[int(i)] for i in order[start : start + config.batch_size]]
            _, grad = batch_loss_grad(theta, batch)
            t += 1
            m = 0.9 * m + 0.1 * grad
            v = 0.999 * v + 0.001 * grad * grad
            m_hat = m / (1.0 - 0.9**t)
            v_hat = v / (1.0 - 0.999**t)
            theta = theta - lr * m_hat / (np.sqrt(v_hat) + 1e-8)
        current = val_loss(theta)
        if current < best_val:
            best_val = current
            best_theta = theta.copy()
        if current < gate - MIN_IMPROVEMENT:
            gate = current
            plateau_wait = 0
            stop_wait = 0
        else:
            plateau_wait += 1
            stop_wait += 1
            if plateau_wait >= config.plateau_patience:
                lr *= config.plateau_factor
                plateau_wait = 0
            if stop_wait >= config.early_stop_patience:
                break
    return best_theta


def fit_platt(
    fit_subjects: Sequence[Subject],
    val_subjects: Sequence[Subject],
    config: CalibrationFitConfig = CalibrationFitConfig(),
) -> PlattParams:
    """Fit the affine logit calibrator by masked cross-entropy.

    Starts from the identity (a, b) = (1, 0); early stopping uses
    ``val_subjects``, which must be disjoint from the fitting subjects.
    """
    if not fit_subjects or not val_subjects:
        raise ParameterError("fit and validation subject lists must be nonempty")
    _require_logits(fit_subjects)
    _require_logits(val_subjects)
    _warn_if_single_class(fit_subjects)

    def batch_loss_grad(theta, batch):
        a, b = theta
        loss = 0.0
        grad = np.zeros(2)
        for subject in batch:
            z = subject.logits
            y = subject.labels
            mask = subject.eval_mask
            n = mask.sum()
            zt = a * z + b
            p = stable_sigmoid(zt)
            loss += float(((np.logaddexp(0.0, zt) - y * zt) * mask).sum() / n) / len(batch)
            residual = (p - y) * mask / n
            grad[0] += float((residual * z).sum()) / len(batch)
            grad[1] += float(residual.sum()) / len(batch)
        return loss, grad

    def val_loss(theta):
        params = PlattParams(a=float(theta[0]), b=float(theta[1]))
        return calibration_objective(val_subjects, lambda z: apply_platt(params, z))

    theta = _fit_adam_vector(np.array([1.0, 0.0]), batch_loss_grad, val_loss, fit_subjects, config)
    return PlattParams(a=float(theta[0]), b=float(theta[1]))


def fit_aux_conv(
    fit_subjects: Sequence[Subject],
    val_subjects: Sequence[Subject],
    k: int = 5,
    config: CalibrationFitConfig = CalibrationFitConfig(),
) -> AuxConvParams:
    """Fit the k x k convolutional calibrator by masked cross-entropy.

    Initialisation is the identity (centre tap 1, all other taps and the
    bias 0), so the unfitted calibrator reproduces the base probabilities
    and the fitted one can only improve the objective up to optimiser noise.
    """
    if k < 1 or k % 2 == 0:
        raise ParameterError(f"kernel size must be odd and >= 1, got {k}")
    if not fit_subjects or not val_subjects:
        raise ParameterError("fit and validation subject lists must be nonempty")
    _require_logits(fit_subjects)
    _require_logits(val_subjects)
    for subject in fit_subjects:
        if min(subject.shape) <= k:
            raise ParameterError(f"grids must be larger than the kernel size {k}")
    _warn_if_single_class(fit_subjects)
    pad = k // 2

    def unpack(theta):
        return theta[:-1].reshape(k, k), float(theta[-1])

    def batch_loss_grad(theta, batch):
        kernel, bias = unpack(theta)
        weights = kernel[np.newaxis, np.newaxis]
        loss = 0.0
        grad = np.zeros_like(theta)
        for subject in batch:
            z = subject.logits
            y = subject.labels
            mask = subject.eval_mask
            n = mask.sum()
            out, cols = conv2d(z[np.newaxis], weights, np.array([bias]), pad)
            zt = out[0]
            p = stable_sigmoid(zt)
            loss += float(((np.logaddexp(0.0, zt) - y * zt) * mask).sum() / n) / len(batch)
            residual = ((p - y) * mask / n).ravel()
            grad[:-1] += (residual @ cols) / len(batch)
            grad[-1] += float(residual.sum()) / len(batch)
        return loss, grad

    def val_loss(theta):
        kernel, bias = unpack(theta)
        params = AuxConvParams(kernel=kernel, bias=bias)
        return calibration_objective(val_subjects, lambda z: apply_aux_conv(params, z))

    theta0 = np.zeros(k * k + 1)
    theta0[(k * k) // 2] = 1.0  # centre tap
    theta = _fit_adam_vector(theta0, batch_loss_grad, val_loss, fit_subjects, config)
    kernel, bias = unpack(theta)
    return AuxConvParams(kernel=kernel, bias=bias)


@dataclass(frozen=True)
class McConfig:
    """Monte Carlo dropout sampling settings."""

    n_samples: int = 20
    dropout: DropoutConfig = DropoutConfig()
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ParameterError("n_samples must be >= 1")


def mc_predict(
    params: NetParams,
    image,
    config: McConfig,
    threads: int = 1,
):
    """Sample ``n_samples`` dropout forwards and average the sigmoid maps.

    Sample ``i`` draws its masks from a stream keyed by (seed, i), so the
    result is independent of execution order and of ``threads``; samples are
    combined by index. Returns ``(mean_prob, per_voxel_std)`` where the std
    is the population standard deviation over samples (zero for one sample).
    With inactive dropout every sample is identical, so the deterministic
    forward is returned directly (bit-exactly, with zero std).
    """
    if not config.dropout.active:
        logits, _ = forward(params, image)
        probs = stable_sigmoid(logits)
        return probs, np.zeros_like(probs)

    def one_sample(i: int) -> np.ndarray:
        rng = derive_rng(config.seed, TAG_MC, i)
        logits, _ = forward(params, image, config.dropout, rng)
        return stable_sigmoid(logits)

    indices = range(config.n_samples)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            samples = list(pool.map(one_sample, indices))
    else:
        samples = [one_sample(i) for i in indices]
    stack = np.stack(samples)
    return stack.mean(axis=0), stack.std(axis=0)


def _subject_tag(subject_id: str) -> int:
    # Stable across processes, unlike hash().
    return zlib.crc32(subject_id.encode("utf-8"))


class Predictor:
    """Uniform interface: a fitted mapping from Subject to probability grid."""

    def predict_proba(self, subject: Subject) -> np.ndarray:
        raise NotImplementedError


class NetworkPredictor(Predictor):
    """Deterministic sigmoid of the network's logit map."""

    def __init__(self, params: NetParams):
        self.params = params

    def predict_logits(self, subject: Subject) -> np.ndarray:
        logits, _ = forward(self.params, subject.image)
        return logits

    def predict_proba(self, subject: Subject) -> np.ndarray:
        return stable_sigmoid(self.predict_logits(subject))


class CalibratedLogitPredictor(NetworkPredictor):
    """Network logits passed through a fitted logit-map calibrator."""

    def __init__(self, params: NetParams, apply_fn: Callable[[np.ndarray], np.ndarray]):
        super().__init__(params)
        self.apply_fn = apply_fn

    def predict_proba(self, subject: Subject) -> np.ndarray:
        return self.apply_fn(self.predict_logits(subject))


class McDropoutPredictor(Predictor):
    """Mean probability over test-time dropout samples.

    Each subject gets its own sample streams, keyed by a CRC of its id, so
    predictions do not depend on evaluation order.
    """

    def __init__(self, params: NetParams, config: McConfig, threads: int = 1):
        self.params = params
        self.config = config
        self.threads = threads

    def _subject_config(self, subject: Subject) -> McConfig:
        seed = (self.config.seed << 32) ^ _subject_tag(subject.id)
        return dataclasses.replace(self.config, seed=seed)

    def predict_proba(self, subject: Subject) -> np.ndarray:
        mean, _ = mc_predict(self.params, subject.image, self._subject_config(subject), self.threads)
        return mean

    def predict_with_std(self, subject: Subject):
        return mc_predict(self.params, subject.image, self._subject_config(subject), self.threads)


def attach_logits(params: NetParams, subjects: Sequence[Subject]) -> list[Subject]:
    """Run the deterministic forward pass and cache logits on each subject."""
    out = []
    for subject in subjects:
        logits, _ = forward(params, subject.image)
        out.append(subject.with_logits(logits))
    return out


@dataclass(frozen=True)
class CalibrationSettings:
    """Knobs shared by the calibration methods in one experiment cell.

    ``batch_size`` applies to the logit-calibrator fits and
    ``retrain_batch_size`` to the methods that resume network training on
    the calibration split (fine-tuning and dropout retraining). Both default
    to single-subject batches so the optimizer step count on a
    handful-of-subjects calibration split is comparable to what the same
    epoch budget yields on a large dataset.
    """

    aux_kernel_size: int = 5
    dropout_rate: float = 0.2
    mc_samples: int = 20
    mc_lr_candidates: tuple[float, ...] = (1e-3, 1e-4, 1e-5)
    finetune_lr_ce: float = 1e-4
    finetune_lr_sd: float = 1e-3
    max_epochs: int = 50
    batch_size: int = 1
    retrain_batch_size: int = 1
    seed: int = 0
    threads: int = 1


def _is_sd_based(regime: str) -> bool:
    if regime not in REGIMES:
        raise ConfigError(f"unknown weight regime {regime!r}")
    return regime in (CE_SD_REGIME, SD_REGIME)


def calibrate_pipeline(
    method: str,
    base_params: NetParams,
    regime: str,
    calib_fit: Sequence[Subject],
    calib_val: Sequence[Subject],
    settings: CalibrationSettings = CalibrationSettings(),
):
    """Fit one calibration method and return ``(predictor, info)``.

    Fitting only ever sees ``calib_fit`` and ``calib_val``; evaluation
    subjects must not be passed here. ``info`` records fitted parameters or
    selected learning rates for the run log.
    """
    if method not in METHODS:
        raise ConfigError(f"unknown calibration method {method!r}")
    sd_based = _is_sd_based(regime)
    fit_config = CalibrationFitConfig(
        max_epochs=settings.max_epochs,
        batch_size=settings.batch_size,
        seed=settings.seed,
    )

    if method == BASE:
        return NetworkPredictor(base_params), {}

    if method in (PLATT, AUX):
        fit = attach_logits(base_params, calib_fit)
        val = attach_logits(base_params, calib_val)
        if method == PLATT:
            params = fit_platt(fit, val, fit_config)
            return (
                CalibratedLogitPredictor(base_params, lambda z: apply_platt(params, z)),
                {"platt": params},
            )
        params = fit_aux_conv(fit, val, settings.aux_kernel_size, fit_config)
        return (
            CalibratedLogitPredictor(base_params, lambda z: apply_aux_conv(params, z)),
            {"aux": params},
        )

    if method == FINETUNE:
        lr = settings.finetune_lr_sd if sd_based else settings.finetune_lr_ce
        config = TrainConfig(
            loss=CROSS_ENTROPY,
            learning_rate=lr,
            max_epochs=settings.max_epochs,
            batch_size=settings.retrain_batch_size,
            seed=settings.seed,
        )
        tuned, log = finetune_last_layer(base_params, calib_fit, calib_val, config)
        return NetworkPredictor(tuned), {"finetune_lr": lr, "epochs": len(log)}

    sites = DECODER_SITES if method == MC_DECODER else CENTER_SITES
    loss = SOFT_DICE if sd_based else CROSS_ENTROPY
    config = TrainConfig(
        loss=loss,
        max_epochs=settings.max_epochs,
        batch_size=settings.retrain_batch_size,
        seed=settings.seed,
    )
    retrained, chosen_lr, log = insert_dropout_and_retrain(
        base_params,
        sites,
        settings.dropout_rate,
        calib_fit,
        calib_val,
        loss,
        settings.mc_lr_candidates,
        config,
    )
    mc_config = McConfig(
        n_samples=settings.mc_samples,
        dropout=DropoutConfig(sites=sites, rate=settings.dropout_rate),
        seed=settings.seed,
    )
    predictor = McDropoutPredictor(retrained, mc_config, settings.threads)
    return predictor, {"mc_lr": chosen_lr, "sites": sites, "epochs": len(log)}


class PlattCalibrator(BaseEstimator):
    """Estimator wrapper for the affine logit calibrator."""

    def __init__(
        self,
        learning_rate: float = 5e-3,
        max_epochs: int = 50,
        batch_size: int = 1,
        seed: int = 0,
    ):
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, subjects: Sequence[Subject], validation_subjects: Sequence[Subject]):
        config = CalibrationFitConfig(
            learning_rate=self.learning_rate,
            max_epochs=self.max_epochs,
            batch_size=self.batch_size,
            seed=self.seed,
        )
        params = fit_platt(subjects, validation_subjects, config)
        self.a_ = params.a
        self.b_ = params.b
        self.params_ = params
        return self

    def transform(self, logits) -> np.ndarray:
        if not hasattr(self, "params_"):
            raise NotFittedError("PlattCalibrator must be fitted before transform")
        return apply_platt(self.params_, logits)


class AuxConvCalibrator(BaseEstimator):
    """Estimator wrapper for the convolutional logit calibrator."""

    def __init__(
        self,
        kernel_size: int = 5,
        learning_rate: float = 5e-3,
        max_epochs: int = 50,
        batch_size: int = 1,
        seed: int = 0,
    ):
        self.kernel_size = kernel_size
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, subjects: Sequence[Subject], validation_subjects: Sequence[Subject]):
        config = CalibrationFitConfig(
            learning_rate=self.learning_rate,
            max_epochs=self.max_epochs,
            batch_size=self.batch_size,
            seed=self.seed,
        )
        params = fit_aux_conv(subjects, validation_subjects, self.kernel_size, config)
        self.kernel_ = np.array(params.kernel)
        self.bias_ = params.bias
        self.params_ = params
        return self

    def transform(self, logits) -> np.ndarray:
        if not hasattr(self, "params_"):
            raise NotFittedError("AuxConvCalibrator must be fitted before transform")
        return apply_aux_conv(self.params_, logits)
