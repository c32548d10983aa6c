"""A small fully convolutional segmentation network with manual gradients.

The architecture is fixed: three padded 3x3 convolutions with 8 channels and
ReLU, followed by a 1x1 convolution producing a single logit per voxel. All
arithmetic is float64 and every gradient is computed analytically; the test
suite checks each one against central finite differences.

Dropout can be inserted at three sites, named for the layer they precede:
``before_L2``, ``before_L3``, ``before_L4``. The two standard placements are
``DECODER_SITES`` (the two sites nearest the output head) and
``CENTER_SITES`` (the two interior sites).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .exceptions import (
    GridError,
    MetricError,
    NumericError,
    ParameterError,
    TrainingError,
)
from .grids import Subject, predicted_class, sigmoid_map, stable_sigmoid
from .layers import (
    conv2d,
    conv2d_input_grad,
    conv2d_param_grads,
    dropout_mask,
    relu,
    relu_grad,
)
from .seeding import TAG_TRAIN, derive_rng
from .validation import as_grid, check_binary_grid, check_same_shape

CROSS_ENTROPY = "cross_entropy"
SOFT_DICE = "soft_dice"
LOSSES = (CROSS_ENTROPY, SOFT_DICE)

# (kernel size, in channels, out channels, relu)
ARCHITECTURE = (
    (3, 1, 8, True),
    (3, 8, 8, True),
    (3, 8, 8, True),
    (1, 8, 1, False),
)
N_LAYERS = len(ARCHITECTURE)
LAST_LAYER = N_LAYERS - 1

DROPOUT_SITES = ("before_L2", "before_L3", "before_L4")
DECODER_SITES = ("before_L3", "before_L4")
CENTER_SITES = ("before_L2", "before_L3")

# Plateau / early-stop "improvement" means a decrease larger than this.
MIN_IMPROVEMENT = 1e-4

_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8


def architecture_fingerprint() -> str:
    """Compact descriptor of the fixed layer stack, stored in checkpoints."""
    parts = []
    for k, c_in, c_out, use_relu in ARCHITECTURE:
        suffix = "+relu" if use_relu else ""
        parts.append(f"conv{k}x{k}:{c_in}->{c_out}{suffix}")
    return "|".join(parts)


def site_layer(site: str) -> int:
    """Index of the layer a dropout site precedes (``before_L2`` -> 1)."""
    if site not in DROPOUT_SITES:
        raise ParameterError(f"unknown dropout site {site!r}")
    return int(site[-1]) - 1


def _read_only(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class NetParams:
    """All weights and biases plus per-layer freeze flags.

    A frozen layer receives zero gradients and is never changed by an
    optimizer step.
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    frozen: tuple[bool, ...] = (False,) * N_LAYERS

    def __post_init__(self):
        if len(self.weights) != N_LAYERS or len(self.biases) != N_LAYERS:
            raise ParameterError(f"expected {N_LAYERS} layers")
        for i, (k, c_in, c_out, _) in enumerate(ARCHITECTURE):
            if self.weights[i].shape != (c_out, c_in, k, k):
                raise ParameterError(
                    f"layer {i + 1} weights must be {(c_out, c_in, k, k)}, "
                    f"got {self.weights[i].shape}"
                )
            if self.biases[i].shape != (c_out,):
                raise ParameterError(f"layer {i + 1} bias must be ({c_out},)")
            if not (np.all(np.isfinite(self.weights[i])) and np.all(np.isfinite(self.biases[i]))):
                raise ParameterError(f"layer {i + 1} has non-finite parameters")
        if len(self.frozen) != N_LAYERS:
            raise ParameterError("frozen flags must cover every layer")
        object.__setattr__(self, "weights", tuple(_read_only(w) for w in self.weights))
        object.__setattr__(self, "biases", tuple(_read_only(b) for b in self.biases))
        object.__setattr__(self, "frozen", tuple(bool(f) for f in self.frozen))

    def with_frozen(self, frozen: Sequence[bool]) -> "NetParams":
        return dataclasses.replace(self, frozen=tuple(frozen))


def init_params(seed: int) -> NetParams:
    """He-initialised weights for the ReLU layers, scaled-down head, zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for k, c_in, c_out, use_relu in ARCHITECTURE:
        fan_in = c_in * k * k
        std = np.sqrt(2.0 / fan_in) if use_relu else np.sqrt(1.0 / fan_in)
        weights.append(rng.normal(0.0, std, size=(c_out, c_in, k, k)))
        biases.append(np.zeros(c_out))
    return NetParams(weights=tuple(weights), biases=tuple(biases))


@dataclass(frozen=True)
class DropoutConfig:
    """Dropout placement: a subset of DROPOUT_SITES and a rate in [0, 1)."""

    sites: tuple[str, ...] = ()
    rate: float = 0.0

    def __post_init__(self):
        for site in self.sites:
            site_layer(site)
        if not (0.0 <= self.rate < 1.0):
            raise ParameterError(f"dropout rate must be in [0, 1), got {self.rate}")
        object.__setattr__(self, "sites", tuple(self.sites))

    @property
    def active(self) -> bool:
        return bool(self.sites) and self.rate > 0.0


NO_DROPOUT = DropoutConfig()


@dataclass
class ForwardCache:
    """Intermediate values needed by :func:`backward`."""

    params: NetParams
    shape: tuple[int, int]
    cols: list[np.ndarray] = field(default_factory=list)
    pre_activations: list[Optional[np.ndarray]] = field(default_factory=list)
    dropout_masks: dict[int, np.ndarray] = field(default_factory=dict)


def forward(
    params: NetParams,
    image,
    dropout: DropoutConfig = NO_DROPOUT,
    rng: Optional[np.random.Generator] = None,
    dropout_masks: Optional[dict[int, np.ndarray]] = None,
):
    """Run the network on one image grid.

    Returns ``(logits, cache)``. With inactive dropout the pass is
    deterministic. With active dropout, scaled keep masks are sampled from
    ``rng`` (or taken from ``dropout_masks``, keyed by layer index, which
    makes the pass a deterministic function of the masks; gradient checks
    rely on this).
    """
    img = as_grid(image, "image")
    if img.shape[0] < 3 or img.shape[1] < 3:
        raise GridError(f"image must be at least 3x3, got {img.shape}")

    drop_layers = {site_layer(s) for s in dropout.sites} if dropout.active else set()
    if drop_layers and dropout_masks is None and rng is None:
        raise ParameterError("active dropout requires an rng or explicit masks")

    cache = ForwardCache(params=params, shape=img.shape)
    x = img[np.newaxis]
    for i, (k, _, _, use_relu) in enumerate(ARCHITECTURE):
        if i in drop_layers:
            if dropout_masks is not None:
                mask = dropout_masks[i]
            else:
                mask = dropout_mask(rng, x.shape, dropout.rate)
            cache.dropout_masks[i] = mask
            x = x * mask
        out, cols = conv2d(x, params.weights[i], params.biases[i], k // 2)
        cache.cols.append(cols)
        if use_relu:
            cache.pre_activations.append(out)
            x = relu(out)
        else:
            cache.pre_activations.append(None)
            x = out
    logits = x[0]
    if not np.all(np.isfinite(logits)):
        raise NumericError("network produced non-finite logits")
    return logits, cache


def ce_loss_and_grad(logits, labels, mask):
    """Masked mean binary cross-entropy on logits and its gradient.

    Per voxel the loss is softplus(z) - y*z, the logit form of
    -[y log p + (1-y) log(1-p)], evaluated without forming p. The gradient
    w.r.t. z is (sigmoid(z) - y) / n_mask inside the mask, zero outside.
    """
    z = as_grid(logits, "logits")
    y = check_binary_grid(labels, "labels")
    m = check_binary_grid(mask, "mask")
    check_same_shape(("logits", z), ("labels", y), ("mask", m))
    n = m.sum()
    if n < 1:
        raise MetricError("cross-entropy is undefined on an empty mask")
    per_voxel = np.logaddexp(0.0, z) - y * z
    loss = float((per_voxel * m).sum() / n)
    dlogits = (stable_sigmoid(z) - y) * m / n
    return loss, dlogits


def softdice_loss_and_grad(logits, labels, mask, epsilon: float = 1.0):
    """Masked soft Dice loss on logits and its gradient.

    With p = sigmoid(z) and masked sums I = sum(p*y), Sp = sum(p),
    Sy = sum(y), the loss is 1 - (2I + eps) / (Sp + Sy + eps). The gradient
    follows from the quotient rule through the sigmoid.
    """
    z = as_grid(logits, "logits")
    y = check_binary_grid(labels, "labels")
    m = check_binary_grid(mask, "mask")
    check_same_shape(("logits", z), ("labels", y), ("mask", m))
    if m.sum() < 1:
        raise MetricError("soft Dice is undefined on an empty mask")
    p = stable_sigmoid(z)
    intersection = float((p * y * m).sum())
    sum_p = float((p * m).sum())
    sum_y = float((y * m).sum())
    numer = 2.0 * intersection + epsilon
    denom = sum_p + sum_y + epsilon
    loss = 1.0 - numer / denom
    dloss_dp = -(2.0 * y * denom - numer) / denom**2
    dlogits = dloss_dp * p * (1.0 - p) * m
    return loss, dlogits


def backward(cache: ForwardCache, dlogits) -> list[tuple[np.ndarray, np.ndarray]]:
    """Gradients of a scalar loss w.r.t. every parameter.

    ``dlogits`` is the loss gradient at the logit map. Dropout masks are
    reused from the cache. Frozen layers get zero gradient entries.
    """
    d = as_grid(dlogits, "dlogits")
    if d.shape != cache.shape:
        raise ParameterError(f"dlogits shape {d.shape} does not match cache {cache.shape}")
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * N_LAYERS  # type: ignore[list-item]
    d = d[np.newaxis]
    for i in range(N_LAYERS - 1, -1, -1):
        k, c_in, c_out, use_relu = ARCHITECTURE[i]
        if use_relu:
            d = relu_grad(d, cache.pre_activations[i])
        dw, db = conv2d_param_grads(cache.cols[i], d, (c_out, c_in, k, k))
        grads[i] = (dw, db)
        if i > 0:
            d = conv2d_input_grad(d, cache.params.weights[i], k // 2)
            if i in cache.dropout_masks:
                d = d * cache.dropout_masks[i]
    for i in range(N_LAYERS):
        if cache.params.frozen[i]:
            grads[i] = (np.zeros_like(grads[i][0]), np.zeros_like(grads[i][1]))
    return grads


@dataclass(frozen=True)
class AdamState:
    """First and second moment estimates per layer, plus the step count."""

    step: int
    m_weights: tuple[np.ndarray, ...]
    v_weights: tuple[np.ndarray, ...]
    m_biases: tuple[np.ndarray, ...]
    v_biases: tuple[np.ndarray, ...]


def init_adam(params: NetParams) -> AdamState:
    return AdamState(
        step=0,
        m_weights=tuple(np.zeros_like(w) for w in params.weights),
        v_weights=tuple(np.zeros_like(w) for w in params.weights),
        m_biases=tuple(np.zeros_like(b) for b in params.biases),
        v_biases=tuple(np.zeros_like(b) for b in params.biases),
    )


def adam_step(params: NetParams, grads, state: AdamState, lr: float):
    """One bias-corrected Adam update. Frozen layers keep their parameters
    and moment state untouched. Returns ``(params, state)``."""
    t = state.step + 1
    c1 = 1.0 - _ADAM_BETA1**t
    c2 = 1.0 - _ADAM_BETA2**t
    new_w, new_b = list(params.weights), list(params.biases)
    m_w, v_w = list(state.m_weights), list(state.v_weights)
    m_b, v_b = list(state.m_biases), list(state.v_biases)
    for i in range(N_LAYERS):
        if params.frozen[i]:
            continue
        for arrs, g in (((new_w, m_w, v_w), grads[i][0]), ((new_b, m_b, v_b), grads[i][1])):
            values, m, v = arrs
            m[i] = _ADAM_BETA1 * m[i] + (1.0 - _ADAM_BETA1) * g
            v[i] = _ADAM_BETA2 * v[i] + (1.0 - _ADAM_BETA2) * g * g
            values[i] = values[i] - lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + _ADAM_EPS)
    out_params = NetParams(weights=tuple(new_w), biases=tuple(new_b), frozen=params.frozen)
    out_state = AdamState(
        step=t,
        m_weights=tuple(m_w),
        v_weights=tuple(v_w),
        m_biases=tuple(m_b),
        v_biases=tuple(v_b),
    )
    return out_params, out_state


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings for one training run."""

    loss: str
    learning_rate: float = 5e-3
    max_epochs: int = 50
    batch_size: int = 8
    plateau_patience: int = 5
    plateau_factor: float = 0.1
    early_stop_patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ParameterError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.learning_rate <= 0:
            raise ParameterError("learning_rate must be positive")
        if not (0.0 < self.plateau_factor < 1.0):
            raise ParameterError("plateau_factor must lie in (0, 1)")
        if self.max_epochs < 0 or self.batch_size < 1:
            raise ParameterError("max_epochs must be >= 0 and batch_size >= 1")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    learning_rate: float


def _loss_fn(loss: str):
    return ce_loss_and_grad if loss == CROSS_ENTROPY else softdice_loss_and_grad


def subject_loss(params: NetParams, subject: Subject, loss: str) -> float:
    """Deterministic (dropout-free) loss of one subject."""
    logits, _ = forward(params, subject.image)
    value, _ = _loss_fn(loss)(logits, subject.labels, subject.eval_mask)
    return value


def mean_loss(params: NetParams, subjects: Sequence[Subject], loss: str) -> float:
    return float(np.mean([subject_loss(params, s, loss) for s in subjects]))


def _zero_grads(params: NetParams):
    return [(np.zeros_like(w), np.zeros_like(b)) for w, b in zip(params.weights, params.biases)]


def train(
    params: NetParams,
    train_subjects: Sequence[Subject],
    val_subjects: Sequence[Subject],
    config: TrainConfig,
    dropout: DropoutConfig = NO_DROPOUT,
):
    """Mini-batch training with plateau decay and early stopping.

    Batches are whole subjects; the batch gradient is the mean of the
    per-subject gradients (each already averaged over its mask voxels).
    After every epoch the validation loss is computed without dropout. The
    learning rate is multiplied by ``plateau_factor`` after
    ``plateau_patience`` epochs without an improvement larger than
    ``MIN_IMPROVEMENT``; training stops after ``early_stop_patience`` such
    epochs or at ``max_epochs``. Returns the weights with the best
    validation loss together with the epoch log.
    """
    if not train_subjects or not val_subjects:
        raise ParameterError("train and validation subject lists must be nonempty")
    log: list[EpochRecord] = []
    if config.max_epochs == 0:
        return params, log

    loss_and_grad = _loss_fn(config.loss)
    rng = derive_rng(config.seed, TAG_TRAIN)
    state = init_adam(params)
    lr = config.learning_rate
    best_val = np.inf
    best_params = params
    gate = np.inf
    plateau_wait = 0
    stop_wait = 0

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train_subjects))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            grads = _zero_grads(params)
            batch_loss = 0.0
            for idx in batch:
                subject = train_subjects[int(idx)]
                try:
                    logits, cache = forward(params, subject.image, dropout, rng)
                except NumericError as exc:
                    raise TrainingError(f"epoch {epoch}: {exc}", log) from exc
                value, dlogits = loss_and_grad(logits, subject.labels, subject.eval_mask)
                subject_grads = backward(cache, dlogits)
                for i in range(N_LAYERS):
                    grads[i] = (
                        grads[i][0] + subject_grads[i][0] / len(batch),
                        grads[i][1] + subject_grads[i][1] / len(batch),
                    )
                batch_loss += value / len(batch)
            if not np.isfinite(batch_loss):
                raise TrainingError(f"training loss diverged in epoch {epoch}", log)
            params, state = adam_step(params, grads, state, lr)
            epoch_losses.append(batch_loss)

        try:
            val_loss = mean_loss(params, val_subjects, config.loss)
        except NumericError as exc:
            raise TrainingError(f"epoch {epoch}: {exc}", log) from exc
        log.append(EpochRecord(epoch, float(np.mean(epoch_losses)), val_loss, lr))
        if not np.isfinite(val_loss):
            raise TrainingError(f"validation loss diverged in epoch {epoch}", log)

        if val_loss < best_val:
            best_val = val_loss
            best_params = params
        if val_loss < gate - MIN_IMPROVEMENT:
            gate = val_loss
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

    return best_params, log


def best_val_loss(log: Sequence[EpochRecord]) -> float:
    return min(record.val_loss for record in log) if log else np.inf


def finetune_last_layer(
    params: NetParams,
    train_subjects: Sequence[Subject],
    val_subjects: Sequence[Subject],
    config: TrainConfig,
):
    """Retrain only the logit head with cross-entropy.

    Every other layer is frozen for the duration and is bit-identical
    afterwards. Returns ``(params, log)`` with the original freeze flags
    restored.
    """
    if config.loss != CROSS_ENTROPY:
        raise ParameterError("last-layer fine-tuning uses the cross-entropy loss")
    freeze = tuple(i != LAST_LAYER for i in range(N_LAYERS))
    tuned, log = train(params.with_frozen(freeze), train_subjects, val_subjects, config)
    return tuned.with_frozen(params.frozen), log


def insert_dropout_and_retrain(
    params: NetParams,
    sites: Sequence[str],
    rate: float,
    train_subjects: Sequence[Subject],
    val_subjects: Sequence[Subject],
    loss: str,
    lr_candidates: Sequence[float],
    config: TrainConfig,
):
    """Insert dropout and retrain all layers after the earliest site.

    Dropout shifts the input statistics of the layers that follow it, so
    those layers are retrained (with dropout active) while the earlier
    layers stay frozen. One model is trained per candidate learning rate and
    the one with the lowest validation loss is returned as
    ``(params, chosen_lr, log)``.
    """
    if not sites:
        raise ParameterError("at least one dropout site is required")
    if not lr_candidates:
        raise ParameterError("at least one learning-rate candidate is required")
    earliest = min(site_layer(site) for site in sites)
    freeze = tuple(i < earliest for i in range(N_LAYERS))
    dropout = DropoutConfig(sites=tuple(sites), rate=rate)

    best = None
    for lr in lr_candidates:
        run_config = dataclasses.replace(config, loss=loss, learning_rate=lr)
        trained, log = train(
            params.with_frozen(freeze), train_subjects, val_subjects, run_config, dropout
        )
        candidate = (best_val_loss(log), lr, trained, log)
        if best is None or candidate[0] < best[0]:
            best = candidate
    _, chosen_lr, trained, log = best
    return trained.with_frozen(params.frozen), chosen_lr, log


class SegmentationNetwork(BaseEstimator):
    """Estimator wrapper around the functional training loop.

    ``fit`` takes training and validation subject lists. With
    ``pretrain_epochs > 0`` and a non-CE loss, an initial cross-entropy
    phase runs before the main loss (the two-stage regime); otherwise a
    single phase is trained. After fitting, ``params_`` holds the weights
    and ``history_`` the epoch records of every phase.
    """

    def __init__(
        self,
        loss: str = CROSS_ENTROPY,
        learning_rate: float = 5e-3,
        max_epochs: int = 50,
        batch_size: int = 8,
        plateau_patience: int = 5,
        plateau_factor: float = 0.1,
        early_stop_patience: int = 10,
        pretrain_epochs: int = 0,
        dropout_sites: tuple[str, ...] = (),
        dropout_rate: float = 0.0,
        seed: int = 0,
    ):
        self.loss = loss
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.plateau_patience = plateau_patience
        self.plateau_factor = plateau_factor
        self.early_stop_patience = early_stop_patience
        self.pretrain_epochs = pretrain_epochs
        self.dropout_sites = dropout_sites
        self.dropout_rate = dropout_rate
        self.seed = seed

    def _config(self, loss: str, max_epochs: int, early_stop: int) -> TrainConfig:
        return TrainConfig(
            loss=loss,
            learning_rate=self.learning_rate,
            max_epochs=max_epochs,
            batch_size=self.batch_size,
            plateau_patience=self.plateau_patience,
            plateau_factor=self.plateau_factor,
            early_stop_patience=early_stop,
            seed=self.seed,
        )

    def fit(self, subjects: Sequence[Subject], validation_subjects: Sequence[Subject]):
        dropout = DropoutConfig(sites=tuple(self.dropout_sites), rate=self.dropout_rate)
        params = init_params(self.seed)
        history: list[EpochRecord] = []
        if self.pretrain_epochs > 0 and self.loss != CROSS_ENTROPY:
            # Warm-up phase; patience set so it never stops early.
            config = self._config(CROSS_ENTROPY, self.pretrain_epochs, self.pretrain_epochs + 1)
            params, log = train(params, subjects, validation_subjects, config, dropout)
            history.extend(log)
        config = self._config(self.loss, self.max_epochs, self.early_stop_patience)
        params, log = train(params, subjects, validation_subjects, config, dropout)
        history.extend(log)
        self.params_ = params
        self.history_ = history
        return self

    def _fitted_params(self) -> NetParams:
        if not hasattr(self, "params_"):
            raise NotFittedError("SegmentationNetwork must be fitted before predicting")
        return self.params_

    @staticmethod
    def _image_of(subject_or_image):
        if isinstance(subject_or_image, Subject):
            return subject_or_image.image
        return subject_or_image

    def predict_logits(self, subject_or_image) -> np.ndarray:
        logits, _ = forward(self._fitted_params(), self._image_of(subject_or_image))
        return logits

    def predict_proba(self, subject_or_image) -> np.ndarray:
        return sigmoid_map(self.predict_logits(subject_or_image))

    def predict(self, subject_or_image, threshold: float = 0.5) -> np.ndarray:
        return predicted_class(self.predict_proba(subject_or_image), threshold)
