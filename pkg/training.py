"""
Desk-scale supervised training around the normalization layers.

A synthetic class-conditional image dataset, i.i.d. and class-restricted
batch samplers, a small network of pointwise channel mixing, normalization
and ReLU blocks with a pooled linear classifier, and an SGD-with-momentum
loop that applies weight decay after every step.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from bounds import RangeTracker
from errors import ConfigurationError, NumericError, SamplingError, TrainingError
from layers import NormLayer, relative_error
from models import ModelSpec, SyntheticSpec, TrainConfig
from partition import NormScheme, partition_of
from regularize import decay_step, decay_weights
from tensor import Tensor4

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ["epoch", "split", "alpha", "accuracy", "xent"]
EVAL_CHUNK = 256


@dataclass(frozen=True, eq=False)
class Dataset:
    """Images (n, c, h, w) with integer labels."""
    x: np.ndarray
    y: np.ndarray
    n_classes: int

    def __len__(self) -> int:
        return int(self.y.size)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(int(k) for k in self.x.shape[1:])

    def batch(self, indices: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return self.x[indices], self.y[indices]

    def label_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.n_classes)


@dataclass(frozen=True, eq=False)
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset


def make_dataset(spec: SyntheticSpec) -> Splits:
    """
    Class-conditional Gaussian patterns: every class k owns a prototype made of
    a per-channel offset plus a spatial texture, and an example of class k is
    separation * prototype_k + noise * N(0, 1).
    """
    rng = np.random.default_rng(spec.seed)
    shape = (spec.channels, spec.height, spec.width)
    offsets = rng.normal(size=(spec.n_classes, spec.channels, 1, 1))
    textures = rng.normal(size=(spec.n_classes,) + shape)
    prototypes = offsets + 0.5 * textures

    def draw(per_class: int) -> Dataset:
        labels = np.repeat(np.arange(spec.n_classes), per_class)
        labels = labels[rng.permutation(labels.size)]
        noise = rng.normal(size=(labels.size,) + shape)
        x = spec.separation * prototypes[labels] + spec.noise * noise
        return Dataset(x=x, y=labels, n_classes=spec.n_classes)

    splits = Splits(train=draw(spec.n_train_per_class),
                    val=draw(spec.n_val_per_class),
                    test=draw(spec.n_test_per_class))
    logger.debug("Synthetic dataset %s: %d/%d/%d examples", shape,
                 len(splits.train), len(splits.val), len(splits.test))
    return splits


def iid_batches(dataset: Dataset, batch_size: int, seed: int, epoch: int = 0) -> List[np.ndarray]:
    """
    Index arrays of one epoch: a uniform shuffle cut into disjoint batches.
    An incomplete trailing batch is dropped.
    """
    if batch_size < 1 or batch_size > len(dataset):
        raise SamplingError(
            f"Batch size {batch_size} does not fit a dataset of {len(dataset)} examples")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(dataset))
    n_batches = len(dataset) // batch_size
    return [order[i * batch_size:(i + 1) * batch_size] for i in range(n_batches)]


def non_iid_batches(dataset: Dataset, batch_size: int, classes_per_batch: int, seed: int,
                    epoch: int = 0) -> List[np.ndarray]:
    """
    Index arrays of one epoch where every batch holds exactly `classes_per_batch`
    distinct classes with batch_size / classes_per_batch examples each.

    Classes are drawn independently for every batch; examples are drawn
    without replacement within a class. The batch is shuffled so that
    contiguous example blocks (ghost or batch-group) mix its classes.
    """
    if classes_per_batch < 1 or batch_size % classes_per_batch != 0:
        raise ConfigurationError(
            f"classes_per_batch {classes_per_batch} does not divide batch size {batch_size}")
    if classes_per_batch > dataset.n_classes:
        raise SamplingError(
            f"{classes_per_batch} classes per batch requested, dataset has {dataset.n_classes}")
    per_class = batch_size // classes_per_batch
    by_class = [np.flatnonzero(dataset.y == k) for k in range(dataset.n_classes)]
    short = [k for k, members in enumerate(by_class) if members.size < per_class]
    if short:
        raise SamplingError(
            f"Classes {short} have fewer than {per_class} examples for a batch")

    rng = np.random.default_rng([seed, epoch])
    batches = []
    for _ in range(len(dataset) // batch_size):
        classes = rng.choice(dataset.n_classes, size=classes_per_batch, replace=False)
        picks = [rng.choice(by_class[k], size=per_class, replace=False) for k in classes]
        batches.append(rng.permutation(np.concatenate(picks)))
    return batches


def softmax_xent(logits, label: int) -> Tuple[float, np.ndarray]:
    """Cross-entropy of one example and its gradient softmax(logits) - onehot(label)."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.size:
        raise ConfigurationError(f"Label {label} outside {logits.size} classes")
    shifted = logits - logits.max()
    log_z = np.log(np.sum(np.exp(shifted)))
    probs = np.exp(shifted - log_z)
    grad = probs.copy()
    grad[label] -= 1.0
    return float(log_z - shifted[label]), grad


def softmax_xent_batch(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy of a batch and the gradient of that mean."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=1))
    losses = log_z - shifted[np.arange(n), labels]
    grad = np.exp(shifted - log_z[:, None])
    grad[np.arange(n), labels] -= 1.0
    return float(losses.mean()), grad / n


class Network:
    """
    Blocks of pointwise channel mixing -> normalization -> ReLU, then global
    average pooling and a linear classifier. Each block owns its own
    NormLayer.
    """

    def __init__(self, spec: ModelSpec, in_channels: int, n_classes: int, scheme: NormScheme,
                 epsilon: float = 1e-5, rho: float = 0.99, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.spec = spec
        self.in_channels = in_channels
        self.n_classes = n_classes
        self.scheme = scheme
        self.mixing: List[np.ndarray] = []
        self.norms: List[NormLayer] = []
        fan_in = in_channels
        for width in spec.widths:
            self.mixing.append(rng.normal(size=(width, fan_in)) * np.sqrt(2.0 / fan_in))
            self.norms.append(NormLayer(width, scheme, epsilon, rho))
            fan_in = width
        self.classifier_w = rng.normal(size=(n_classes, fan_in)) * np.sqrt(1.0 / fan_in)
        self.classifier_b = np.zeros(n_classes)
        self._trace: Optional[list] = None

    @property
    def epsilon(self) -> float:
        return self.norms[0].params.epsilon

    @property
    def rho(self) -> float:
        return self.norms[0].moving.rho

    def parameters(self) -> Dict[str, np.ndarray]:
        """Live parameter arrays by name; SGD updates them in place."""
        params = {}
        for i, (w, norm) in enumerate(zip(self.mixing, self.norms)):
            params[f"mix{i}"] = w
            params[f"gamma{i}"] = norm.params.gamma
            params[f"beta{i}"] = norm.params.beta
        params["classifier_w"] = self.classifier_w
        params["classifier_b"] = self.classifier_b
        return params

    def weights(self) -> Dict[str, np.ndarray]:
        """Parameters subject to plain weight decay (mixing and classifier matrices)."""
        weights = {f"mix{i}": w for i, w in enumerate(self.mixing)}
        weights["classifier_w"] = self.classifier_w
        return weights

    def set_weights(self, weights: Dict[str, np.ndarray]):
        for name, value in weights.items():
            if name == "classifier_w":
                self.classifier_w = value
            else:
                self.mixing[int(name[len("mix"):])] = value

    def check_shape(self, batch_size: int, height: int, width: int, mode: str = "train"):
        """Raise ConfigurationError if the scheme cannot run on every block at this shape."""
        for norm in self.norms:
            partition_of(norm.scheme, (batch_size, norm.n_channels, height, width), mode)

    def _forward(self, x: np.ndarray, train: bool, alpha: Optional[float], extrapolate: bool,
                 tracker: Optional[RangeTracker]) -> np.ndarray:
        trace = []
        activation = x
        mode = "train" if train else "infer"
        for i, (w, norm) in enumerate(zip(self.mixing, self.norms)):
            mixed = np.einsum("oc,nchw->nohw", w, activation)
            normed = norm.forward(Tensor4(mixed), train=train, alpha=alpha,
                                  extrapolate=extrapolate).values
            if tracker is not None:
                tracker.record(i, mode, norm.last_normalized)
            trace.append((activation, normed > 0.0))
            activation = np.maximum(normed, 0.0)
        pooled = activation.mean(axis=(2, 3))
        self._trace = trace + [pooled] if train else None
        return pooled @ self.classifier_w.T + self.classifier_b

    def forward_train(self, x: np.ndarray, tracker: Optional[RangeTracker] = None) -> np.ndarray:
        """Training-mode logits; updates every layer's moving moments."""
        return self._forward(x, True, None, False, tracker)

    def forward_infer(self, x: np.ndarray, alpha: Optional[float] = None, extrapolate: bool = False,
                      tracker: Optional[RangeTracker] = None) -> np.ndarray:
        """Inference logits with example weighing alpha (defaults to the scheme's)."""
        return self._forward(x, False, alpha, extrapolate, tracker)

    def backward(self, d_logits: np.ndarray) -> Dict[str, np.ndarray]:
        """Gradients of every parameter from the last training forward pass."""
        if self._trace is None:
            raise ConfigurationError("backward needs a preceding training forward pass")
        *blocks, pooled = self._trace
        grads = {
            "classifier_w": d_logits.T @ pooled,
            "classifier_b": d_logits.sum(axis=0),
        }
        d_pooled = d_logits @ self.classifier_w
        height, width = blocks[-1][1].shape[2:]
        d_act = np.broadcast_to(d_pooled[:, :, None, None] / (height * width),
                                blocks[-1][1].shape)
        for i in reversed(range(len(blocks))):
            block_input, active = blocks[i]
            d_normed = d_act * active
            bundle = self.norms[i].backward(Tensor4(d_normed))
            grads[f"gamma{i}"] = bundle.d_gamma
            grads[f"beta{i}"] = bundle.d_beta
            d_mixed = bundle.d_input.values
            grads[f"mix{i}"] = np.einsum("nohw,nchw->oc", d_mixed, block_input)
            d_act = np.einsum("oc,nohw->nchw", self.mixing[i], d_mixed)
        return grads


class MomentumSGD:
    """vel <- momentum * vel + grad; param <- param - lr * vel."""

    def __init__(self, learning_rate: float, momentum: float):
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]):
        for name, param in params.items():
            vel = self.velocity.get(name)
            vel = grads[name].copy() if vel is None else self.momentum * vel + grads[name]
            self.velocity[name] = vel
            param -= self.learning_rate * vel


def apply_weight_decay(model: Network, config: TrainConfig):
    """Decoupled decay of gamma/beta toward their targets and of the weight matrices."""
    for norm in model.norms:
        norm.params = decay_step(norm.params, config.wd)
    model.set_weights(decay_weights(model.weights(), config.wd))


def evaluate(model: Network, dataset: Dataset, alpha: Optional[float] = None,
             extrapolate: bool = False, tracker: Optional[RangeTracker] = None) -> Tuple[float, float]:
    """(accuracy, mean cross-entropy) over the dataset with inference-mode normalization."""
    correct = 0
    total_loss = 0.0
    for start in range(0, len(dataset), EVAL_CHUNK):
        x, y = dataset.x[start:start + EVAL_CHUNK], dataset.y[start:start + EVAL_CHUNK]
        logits = model.forward_infer(x, alpha=alpha, extrapolate=extrapolate, tracker=tracker)
        loss, _ = softmax_xent_batch(logits, y)
        total_loss += loss * y.size
        correct += int(np.sum(np.argmax(logits, axis=1) == y))
    return correct / len(dataset), total_loss / len(dataset)


def _epoch_batches(dataset: Dataset, config: TrainConfig, epoch: int) -> List[np.ndarray]:
    if config.sampling == "non_iid":
        return non_iid_batches(dataset, config.batch_size, config.classes_per_batch,
                               config.seed, epoch)
    return iid_batches(dataset, config.batch_size, config.seed, epoch)


def build_model(model_spec: ModelSpec, dataset: Dataset, config: TrainConfig) -> Network:
    """Network for this dataset, checked against the training batch shape."""
    channels, height, width = dataset.image_shape
    model = Network(model_spec, channels, dataset.n_classes, config.scheme,
                    epsilon=config.epsilon, rho=config.rho, seed=config.seed)
    model.check_shape(config.batch_size, height, width, "train")
    return model


def train(model_spec: ModelSpec, data: Splits, config: TrainConfig,
          tracker: Optional[RangeTracker] = None,
          extrapolate: bool = False) -> Tuple[Network, pd.DataFrame]:
    """
    Train a fresh network and return it with its history
    (`epoch,split,alpha,accuracy,xent`; train rows carry no alpha).
    """
    model = build_model(model_spec, data.train, config)
    optimizer = MomentumSGD(config.learning_rate, config.momentum)
    rows = []
    logger.info("Training %s at B=%d for %d epochs", config.scheme.spec_string(False),
                config.batch_size, config.epochs)

    for epoch in range(1, config.epochs + 1):
        correct = 0
        seen = 0
        loss_sum = 0.0
        try:
            for indices in _epoch_batches(data.train, config, epoch):
                x, y = data.train.batch(indices)
                logits = model.forward_train(x, tracker=tracker)
                loss, d_logits = softmax_xent_batch(logits, y)
                if not np.isfinite(loss):
                    raise TrainingError("Training loss diverged", epoch)
                optimizer.step(model.parameters(), model.backward(d_logits))
                apply_weight_decay(model, config)
                loss_sum += loss * y.size
                correct += int(np.sum(np.argmax(logits, axis=1) == y))
                seen += y.size
        except NumericError as e:
            raise TrainingError(str(e), epoch) from e

        if epoch % config.eval_every != 0 and epoch != config.epochs:
            continue
        rows.append({"epoch": epoch, "split": "train", "alpha": np.nan,
                     "accuracy": correct / seen, "xent": loss_sum / seen})
        for alpha in config.alpha_grid:
            accuracy, xent = evaluate(model, data.val, alpha, extrapolate)
            rows.append({"epoch": epoch, "split": "val", "alpha": alpha,
                         "accuracy": accuracy, "xent": xent})
        logger.debug("Epoch %d: train loss %.4f, train accuracy %.4f",
                     epoch, loss_sum / seen, correct / seen)

    history = pd.DataFrame(rows, columns=HISTORY_COLUMNS)
    return model, history


def network_gradient_check(model: Network, x: np.ndarray, labels: np.ndarray,
                           step: float = 1e-5) -> float:
    """
    Largest ``relative_error`` between backward and central differences of
    the mean cross-entropy. Each parameter array is scaled by its own largest
    gradient magnitude.
    Moving moments are restored afterwards.
    """
    saved_moving = [norm.moving for norm in model.norms]

    def loss_at() -> float:
        loss, _ = softmax_xent_batch(model.forward_train(x), labels)
        return loss

    _, d_logits = softmax_xent_batch(model.forward_train(x), labels)
    grads = model.backward(d_logits)

    worst = 0.0
    for name, param in model.parameters().items():
        flat = param.reshape(-1)
        numeric = np.zeros(flat.size)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            plus = loss_at()
            flat[i] = saved - step
            minus = loss_at()
            flat[i] = saved
            numeric[i] = (plus - minus) / (2.0 * step)
        analytic = grads[name].reshape(-1)
        error = relative_error(analytic, numeric)
        logger.debug("Gradient check %s: %.3e", name, error)
        worst = max(worst, error)

    for norm, moving in zip(model.norms, saved_moving):
        norm.moving = moving
    return worst


def linear_probe_accuracy(train_set: Dataset, test_set: Dataset, ridge: float = 1e-3) -> float:
    """Test accuracy of a ridge-regressed one-hot linear classifier on raw pixels."""
    def features(d: Dataset) -> np.ndarray:
        flat = d.x.reshape(len(d), -1)
        return np.hstack([flat, np.ones((len(d), 1))])

    a = features(train_set)
    targets = np.eye(train_set.n_classes)[train_set.y]
    weights = np.linalg.solve(a.T @ a + ridge * np.eye(a.shape[1]), a.T @ targets)
    predictions = np.argmax(features(test_set) @ weights, axis=1)
    return float(np.mean(predictions == test_set.y))


def norm_params_summary(model: Network) -> Dict[str, float]:
    """Mean gamma and beta over all normalization layers."""
    gammas = np.concatenate([norm.params.gamma for norm in model.norms])
    betas = np.concatenate([norm.params.beta for norm in model.norms])
    return {"mean_gamma": float(gammas.mean()), "mean_beta": float(betas.mean())}
