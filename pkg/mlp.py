"""
Feed-forward detector network written directly on numpy.

Inputs are sparse binary rows (CSR) or dense real rows (used for
finite-difference checks). The output is a single sigmoid unit trained with a
class-weighted binary cross-entropy; Adam with decoupled weight decay updates
the parameters. ``fit`` is the shared epoch/minibatch loop with validation-F1
checkpoint selection; adversarial training plugs its own batch step into it.
"""
import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, PositiveInt
from scipy import sparse
from scipy.special import expit

from evaluation import confusion, f1
from features import LabeledDataset, SparseBinaryVector, samples_to_csr, split_dataset
from utils import PROBABILITY_EPSILON, DataError, TraceError, make_rng

logger = logging.getLogger(__name__)

InputBatch = Union[sparse.spmatrix, np.ndarray]


class MlpConfig(BaseModel):
    """Architecture and optimisation settings; defaults are the tuned detector values."""

    hidden_sizes: List[PositiveInt] = Field(default_factory=lambda: [256, 32, 256], min_length=1)
    activation: Literal["relu", "leaky_relu"] = "leaky_relu"
    leaky_slope: float = Field(default=0.01, ge=0.0, lt=1.0)
    dropout_rate: float = Field(default=0.70, ge=0.0, lt=1.0)
    pos_class_weight: float = Field(default=8.5, gt=0.0)
    learning_rate: float = Field(default=0.001, gt=0.0)
    weight_decay: float = Field(default=0.00246, ge=0.0)
    adam_beta1: float = Field(default=0.99, ge=0.0, lt=1.0)
    adam_beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    adam_epsilon: float = Field(default=1e-8, gt=0.0)
    epochs: int = Field(default=10, ge=0)
    batch_size: int = Field(default=32, ge=1)
    validation_fraction: float = Field(default=0.2, gt=0.0, lt=1.0)
    seed: int = 0


@dataclass
class Prediction:
    probability: float
    logit: float
    embedding: np.ndarray


@dataclass
class ForwardTrace:
    """Everything backward() needs; arrays carry a leading batch axis."""

    inputs: InputBatch
    pre_activations: List[np.ndarray]
    post_activations: List[np.ndarray]
    dropout_masks: List[Optional[np.ndarray]]
    logits: np.ndarray
    probabilities: np.ndarray
    mode: str
    step: int
    model_id: int

    @property
    def embeddings(self) -> np.ndarray:
        return self.post_activations[-1]


@dataclass
class Gradients:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    inputs: np.ndarray
    input_indices: Optional[np.ndarray] = None

    def parameters(self) -> List[np.ndarray]:
        return [g for pair in zip(self.weights, self.biases) for g in pair]


class MlpModel:
    """
    Parameters theta of one detector plus its Adam state.

    weights[l] has shape (fan_in, fan_out): d -> hidden_sizes... -> 1.
    """

    def __init__(self, config: MlpConfig, input_dim: int, weights: List[np.ndarray], biases: List[np.ndarray]):
        self.config = config
        self.input_dim = input_dim
        self.weights = weights
        self.biases = biases
        self.adam_m = [np.zeros_like(p) for p in self.parameters()]
        self.adam_v = [np.zeros_like(p) for p in self.parameters()]
        self.step = 0
        self.best_params: Optional[List[np.ndarray]] = None
        self.best_epoch: Optional[int] = None
        self.history: List[float] = []
        self.final_delta = None

    def parameters(self) -> List[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def set_parameters(self, params: Sequence[np.ndarray]) -> None:
        params = list(params)
        self.weights = [np.array(p, dtype=np.float64) for p in params[0::2]]
        self.biases = [np.array(p, dtype=np.float64) for p in params[1::2]]

    @property
    def embedding_size(self) -> int:
        return self.weights[-1].shape[0]

    def copy(self) -> "MlpModel":
        return copy.deepcopy(self)

    # Detector surface used by cascades and evaluation
    def predict(self, x: SparseBinaryVector) -> Prediction:
        return predict_batch(self, [x])[0]

    def predict_proba(self, samples: Sequence[SparseBinaryVector]) -> np.ndarray:
        return predict_proba(self, samples)

    def logits(self, samples: Sequence[SparseBinaryVector]) -> np.ndarray:
        return forward_batch(self, samples, mode="infer").logits

    def embeddings(self, samples: Sequence[SparseBinaryVector]) -> np.ndarray:
        return forward_batch(self, samples, mode="infer").embeddings


def init_params(config: MlpConfig, input_dim: int) -> MlpModel:
    """He-uniform (fan-in) weights, zero biases; deterministic in config.seed."""
    if input_dim < 1:
        raise DataError(f"input dimension must be >= 1, got {input_dim}")
    rng = make_rng(config.seed, 0)
    sizes = [input_dim, *config.hidden_sizes, 1]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out, dtype=np.float64))
    return MlpModel(config, input_dim, weights, biases)


def _as_matrix(samples, input_dim: int) -> InputBatch:
    if isinstance(samples, SparseBinaryVector):
        samples = [samples]
    if isinstance(samples, (sparse.spmatrix, np.ndarray)):
        matrix = samples
        if isinstance(matrix, np.ndarray) and matrix.ndim == 1:
            matrix = matrix.reshape(1, -1)
    else:
        matrix = samples_to_csr(list(samples), input_dim)
    if matrix.shape[1] != input_dim:
        raise DataError(f"input dimension {matrix.shape[1]} != model input dimension {input_dim}")
    return matrix


def _activate(z: np.ndarray, config: MlpConfig) -> np.ndarray:
    if config.activation == "relu":
        return np.maximum(z, 0.0)
    return np.where(z > 0, z, config.leaky_slope * z)


def _activation_grad(z: np.ndarray, config: MlpConfig) -> np.ndarray:
    if config.activation == "relu":
        return (z > 0).astype(np.float64)
    return np.where(z > 0, 1.0, config.leaky_slope)


def forward_batch(model: MlpModel, samples, mode: str = "infer", rng: Optional[np.random.Generator] = None) -> ForwardTrace:
    """Forward pass over a batch; train mode applies inverted dropout after every hidden layer."""
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    config = model.config
    inputs = _as_matrix(samples, model.input_dim)
    use_dropout = mode == "train" and config.dropout_rate > 0
    if use_dropout and rng is None:
        raise ValueError("train mode with dropout needs an explicit rng")

    pre, post, masks = [], [], []
    hidden = inputs
    for layer, (weight, bias) in enumerate(zip(model.weights[:-1], model.biases[:-1])):
        z = np.asarray(hidden @ weight) + bias
        a = _activate(z, config)
        mask = None
        if use_dropout:
            mask = (rng.random(a.shape) >= config.dropout_rate) / (1.0 - config.dropout_rate)
            a = a * mask
        pre.append(z)
        post.append(a)
        masks.append(mask)
        hidden = a
    logits = (np.asarray(hidden @ model.weights[-1]) + model.biases[-1])[:, 0]
    pre.append(logits[:, None])
    return ForwardTrace(
        inputs=inputs,
        pre_activations=pre,
        post_activations=post,
        dropout_masks=masks,
        logits=logits,
        probabilities=expit(logits),
        mode=mode,
        step=model.step,
        model_id=id(model),
    )


def forward(model: MlpModel, x, mode: str = "infer", rng: Optional[np.random.Generator] = None) -> ForwardTrace:
    """Single-sample forward pass (a batch of one)."""
    return forward_batch(model, x, mode=mode, rng=rng)


def loss_weighted_bce(probability, target, pos_class_weight: float = 1.0):
    """-[w*t*log p + (1-t)*log(1-p)] with p clamped to [eps, 1-eps]; works elementwise."""
    p = np.clip(probability, PROBABILITY_EPSILON, 1.0 - PROBABILITY_EPSILON)
    loss = -(pos_class_weight * target * np.log(p) + (1.0 - target) * np.log(1.0 - p))
    return float(loss) if np.ndim(loss) == 0 else loss


def backward(model: MlpModel, trace: ForwardTrace, targets, input_indices: Optional[np.ndarray] = None) -> Gradients:
    """
    Exact gradients of the batch-mean weighted BCE.

    Parameter gradients are averaged over the batch; input gradients are
    returned per sample, restricted to ``input_indices`` when given.
    """
    if trace.mode != "train":
        raise TraceError("backward() needs a trace produced in train mode")
    if trace.model_id != id(model) or trace.step != model.step:
        raise TraceError("stale trace: the model changed after this forward pass")
    config = model.config
    n = trace.logits.shape[0]
    t = np.broadcast_to(np.asarray(targets, dtype=np.float64), (n,))
    w = config.pos_class_weight
    p = trace.probabilities

    delta = (p * (w * t + 1.0 - t) - w * t)[:, None]
    n_layers = len(model.weights)
    grad_w: List[Optional[np.ndarray]] = [None] * n_layers
    grad_b: List[Optional[np.ndarray]] = [None] * n_layers
    for layer in range(n_layers - 1, -1, -1):
        layer_input = trace.inputs if layer == 0 else trace.post_activations[layer - 1]
        grad_w[layer] = np.asarray(layer_input.T @ delta) / n
        grad_b[layer] = delta.mean(axis=0)
        if layer == 0:
            break
        upstream = delta @ model.weights[layer].T
        mask = trace.dropout_masks[layer - 1]
        if mask is not None:
            upstream = upstream * mask
        delta = upstream * _activation_grad(trace.pre_activations[layer - 1], config)

    first = model.weights[0]
    if input_indices is None:
        grad_inputs = delta @ first.T
    else:
        input_indices = np.asarray(input_indices, dtype=np.int64)
        grad_inputs = delta @ first[input_indices].T
    return Gradients(grad_w, grad_b, grad_inputs, input_indices)


def adam_step(model: MlpModel, grads: Gradients) -> MlpModel:
    """Decoupled weight decay (theta -= lr*wd*theta) then bias-corrected Adam, in place."""
    config = model.config
    params = model.parameters()
    grad_list = grads.parameters()
    if len(grad_list) != len(params) or any(g.shape != p.shape for g, p in zip(grad_list, params)):
        raise ValueError("gradient shapes do not match model parameters")
    model.step += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    lr, eps = config.learning_rate, config.adam_epsilon
    correction1 = 1.0 - b1 ** model.step
    correction2 = 1.0 - b2 ** model.step
    for i, (param, grad) in enumerate(zip(params, grad_list)):
        if config.weight_decay:
            param -= lr * config.weight_decay * param
        model.adam_m[i] = b1 * model.adam_m[i] + (1.0 - b1) * grad
        model.adam_v[i] = b2 * model.adam_v[i] + (1.0 - b2) * grad * grad
        m_hat = model.adam_m[i] / correction1
        v_hat = model.adam_v[i] / correction2
        param -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return model


def predict_proba(model: MlpModel, samples) -> np.ndarray:
    return forward_batch(model, samples, mode="infer").probabilities


def predict_batch(model: MlpModel, samples) -> List[Prediction]:
    """Infer-mode predictions in input order."""
    trace = forward_batch(model, samples, mode="infer")
    return [
        Prediction(float(p), float(z), e)
        for p, z, e in zip(trace.probabilities, trace.logits, trace.embeddings)
    ]


# ── Training ────────────────────────────────────────────────────────────────

@dataclass
class Batch:
    samples: List[SparseBinaryVector]
    inputs: sparse.csr_matrix
    targets: np.ndarray
    rows: np.ndarray = field(repr=False, default=None)


BatchStep = Callable[[MlpModel, Batch, np.random.Generator], None]


def standard_step(model: MlpModel, batch: Batch, rng: np.random.Generator) -> None:
    trace = forward_batch(model, batch.inputs, mode="train", rng=rng)
    adam_step(model, backward(model, trace, batch.targets))


def validation_f1(model: MlpModel, inputs: InputBatch, hard_targets: np.ndarray) -> float:
    predicted = (predict_proba(model, inputs) >= 0.5).astype(np.int64)
    return f1(confusion(predicted, hard_targets))


def split_train_validation(dataset: LabeledDataset, config: MlpConfig) -> Tuple[LabeledDataset, LabeledDataset]:
    if len(dataset) == 0:
        raise DataError("cannot train on an empty dataset")
    train_set, val_set = split_dataset(dataset, config.validation_fraction, config.seed)
    if len(set(train_set.hard_labels().tolist())) < 2:
        raise DataError("training split contains a single class")
    return train_set, val_set


def fit(dataset: LabeledDataset, config: MlpConfig, epochs: int, batch_step: BatchStep) -> MlpModel:
    """
    Shared training loop: seeded 80/20 split, shuffled minibatches, one
    ``batch_step`` per minibatch, validation F1 after every epoch. Returns the
    model restored to the best-F1 epoch (ties keep the earlier epoch).
    """
    train_set, val_set = split_train_validation(dataset, config)
    model = init_params(config, dataset.dimension)
    if epochs == 0:
        logger.info("epochs=0, returning initialised parameters")
        return model

    train_inputs = train_set.to_csr()
    train_targets = train_set.label_array()
    val_inputs = val_set.to_csr()
    val_targets = val_set.hard_labels()
    shuffle_rng = make_rng(config.seed, 1)
    dropout_rng = make_rng(config.seed, 2)

    best_f1 = -1.0
    for epoch in range(epochs):
        order = shuffle_rng.permutation(len(train_set))
        for start in range(0, order.shape[0], config.batch_size):
            rows = order[start:start + config.batch_size]
            batch = Batch(
                samples=[train_set.samples[i] for i in rows],
                inputs=train_inputs[rows],
                targets=train_targets[rows],
                rows=rows,
            )
            batch_step(model, batch, dropout_rng)
        score = validation_f1(model, val_inputs, val_targets)
        model.history.append(score)
        if score > best_f1:
            best_f1 = score
            model.best_epoch = epoch
            model.best_params = [p.copy() for p in model.parameters()]
        logger.info("epoch %d/%d val_f1=%.4f best_epoch=%d", epoch + 1, epochs, score, model.best_epoch + 1)

    model.set_parameters(model.best_params)
    return model


def train(dataset: LabeledDataset, config: MlpConfig) -> MlpModel:
    """Standard (non-adversarial) training with best-validation-F1 selection."""
    logger.info("Training MLP %s on %d samples", config.hidden_sizes, len(dataset))
    return fit(dataset, config, config.epochs, standard_step)
