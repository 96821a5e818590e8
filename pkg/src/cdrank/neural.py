"""Minimal dense network engine: forward, exact gradients, SGD training.

Everything here is plain numpy. Models are lists of weight matrices with one
activation per layer; training is minibatch SGD with a continuously decayed
learning rate and early stopping on validation loss. Dropout uses inverted
scaling and only fires in train mode, so evaluation is deterministic.

The public `gradients` function differentiates the eval-mode forward pass,
which is what `gradient_check` compares against central finite differences.
Training internally backpropagates through the sampled dropout masks.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from ._validation import as_rng, check_binary_labels, check_in, check_matrix
from .errors import NumericalError

HIDDEN_ACTIVATIONS = ("relu", "sigmoid", "identity")
# relu is allowed on the output so an encoder half of a deeper model stays a
# valid model on its own
OUTPUT_ACTIVATIONS = ("identity", "sigmoid", "relu")
LOSSES = ("bce", "mse")

_EPS = 1e-12


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _apply_activation(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return sigmoid(z)
    return z


def _activation_grad(a, kind):
    # derivative expressed through the activation value itself
    if kind == "relu":
        return (a > 0).astype(np.float64)
    if kind == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(a)


@dataclass
class MlpModel:
    """Dense network parameters. weights[i] has shape (dims[i+1], dims[i])."""

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]
    dropout_rate: float = 0.0

    def __post_init__(self):
        dims = list(self.layer_dims)
        if len(dims) < 2:
            raise ValueError("layer_dims needs an input and an output size")
        if any(d < 1 for d in dims):
            raise ValueError("layer_dims must be positive")
        n_layers = len(dims) - 1
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise ValueError("weights/biases do not match layer_dims")
        if len(self.activations) != n_layers:
            raise ValueError("need one activation per layer")
        for act in self.activations[:-1]:
            check_in(act, HIDDEN_ACTIVATIONS, "hidden activation")
        check_in(self.activations[-1], OUTPUT_ACTIVATIONS, "output activation")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i + 1], dims[i]) or b.shape != (dims[i + 1],):
                raise ValueError(f"layer {i} parameter shapes do not match layer_dims")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "MlpModel":
        return MlpModel(
            layer_dims=list(self.layer_dims),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            activations=list(self.activations),
            dropout_rate=self.dropout_rate,
        )


def init_model(
    layer_dims,
    hidden_activation: str = "relu",
    output_activation: str = "identity",
    dropout_rate: float = 0.0,
    seed: int = 0,
) -> MlpModel:
    """Seeded uniform init: He-style range for relu, Xavier for the rest."""
    check_in(hidden_activation, HIDDEN_ACTIVATIONS, "hidden_activation")
    check_in(output_activation, OUTPUT_ACTIVATIONS, "output_activation")
    dims = [int(d) for d in layer_dims]
    rng = as_rng(seed)
    weights, biases = [], []
    acts = [hidden_activation] * (len(dims) - 2) + [output_activation]
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        if acts[i] == "relu":
            bound = np.sqrt(6.0 / fan_in)
        else:
            bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpModel(dims, weights, biases, acts, dropout_rate)


def forward(model: MlpModel, X, mode: str = "eval", rng=None):
    """Run the network, returning activations per layer (input included).

    Train mode applies inverted dropout to every hidden activation and needs
    an rng; eval mode is deterministic and ignores dropout entirely.
    """
    acts, _ = _forward_cache(model, X, mode, rng)
    return acts


def _forward_cache(model: MlpModel, X, mode: str, rng=None):
    check_in(mode, ("train", "eval"), "mode")
    X = check_matrix(X, "batch", n_cols=model.layer_dims[0])
    if mode == "train" and model.dropout_rate > 0.0 and rng is None:
        raise ValueError("train-mode forward with dropout needs an rng")
    keep = 1.0 - model.dropout_rate
    acts = [X]
    masks = [None] * model.n_layers
    a = X
    for i in range(model.n_layers):
        z = a @ model.weights[i].T + model.biases[i]
        a = _apply_activation(z, model.activations[i])
        is_hidden = i < model.n_layers - 1
        if is_hidden and mode == "train" and model.dropout_rate > 0.0:
            mask = (as_rng(rng).random(a.shape) < keep).astype(np.float64) / keep
            a = a * mask
            masks[i] = mask
        acts.append(a)
    return acts, masks


def loss_value(pred, target, loss: str) -> float:
    check_in(loss, LOSSES, "loss")
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("prediction and target shapes differ")
    # overflow here is diagnosed by the caller via the non-finite loss value
    with np.errstate(over="ignore"):
        if loss == "mse":
            return float(np.mean((pred - target) ** 2))
        p = np.clip(pred, _EPS, 1.0 - _EPS)
        return float(np.mean(-(target * np.log(p) + (1.0 - target) * np.log(1.0 - p))))


def _output_preact_grad(a_out, target, loss: str, output_activation: str):
    """d(mean loss)/d(output preactivation)."""
    n = a_out.size
    if loss == "bce":
        if output_activation != "sigmoid":
            raise ValueError("bce loss requires a sigmoid output layer")
        return (a_out - target) / n
    da = 2.0 * (a_out - target) / n
    return da * _activation_grad(a_out, output_activation)


def _backward(model: MlpModel, acts, masks, dz_out):
    """Backprop from output-preactivation grad; returns (dweights, dbiases)."""
    dw = [None] * model.n_layers
    db = [None] * model.n_layers
    dz = dz_out
    for i in range(model.n_layers - 1, -1, -1):
        a_prev = acts[i]
        dw[i] = dz.T @ a_prev
        db[i] = dz.sum(axis=0)
        if i == 0:
            break
        da = dz @ model.weights[i]
        if masks[i - 1] is not None:
            da = da * masks[i - 1]
        dz = da * _activation_grad(acts[i], model.activations[i - 1])
    return dw, db


def backward_from_embedding_grad(model: MlpModel, acts, masks, d_embedding):
    """Backprop an arbitrary gradient on the output activation.

    Used by siamese training, where the loss lives on a distance between two
    forward passes rather than on the network output directly.
    """
    dz_out = d_embedding * _activation_grad(acts[-1], model.activations[-1])
    return _backward(model, acts, masks, dz_out)


def gradients(model: MlpModel, X, target, loss: str):
    """Exact gradients of the mean eval-mode loss for every weight and bias."""
    check_in(loss, LOSSES, "loss")
    acts, masks = _forward_cache(model, X, "eval")
    target = np.asarray(target, dtype=np.float64).reshape(acts[-1].shape)
    dz_out = _output_preact_grad(acts[-1], target, loss, model.activations[-1])
    return _backward(model, acts, masks, dz_out)


def gradient_check(model: MlpModel, X, target, loss: str, h: float = 1e-5) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Pairs where both gradients are below 1e-6 in magnitude count as agreeing
    (the finite-difference estimate is pure roundoff noise down there, and a
    zero model on a zero batch would otherwise divide 0 by 0).
    """
    X = check_matrix(X, "batch", n_cols=model.layer_dims[0])
    target = np.asarray(target, dtype=np.float64)
    dw, db = gradients(model, X, target, loss)

    def loss_at() -> float:
        out = forward(model, X, "eval")[-1]
        return loss_value(out, target.reshape(out.shape), loss)

    worst = 0.0
    for grads, params in ((dw, model.weights), (db, model.biases)):
        for g, p in zip(grads, params):
            flat_p = p.ravel()
            flat_g = g.ravel()
            for j in range(flat_p.size):
                orig = flat_p[j]
                flat_p[j] = orig + h
                up = loss_at()
                flat_p[j] = orig - h
                down = loss_at()
                flat_p[j] = orig
                numeric = (up - down) / (2.0 * h)
                analytic = flat_g[j]
                denom = max(abs(analytic), abs(numeric))
                if denom < 1e-6:
                    continue
                worst = max(worst, abs(analytic - numeric) / denom)
    return worst


@dataclass
class TrainConfig:
    loss: str = "bce"
    learning_rate: float = 0.01
    decay_rate: float = 0.99
    decay_steps: int = 1024
    batch_size: int = 512
    max_epochs: int = 1000
    patience: int = 10
    min_delta: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        check_in(self.loss, LOSSES, "loss")
        if self.learning_rate <= 0 or self.decay_rate <= 0 or self.decay_rate > 1:
            raise ValueError("learning_rate must be > 0 and decay_rate in (0, 1]")
        if self.decay_steps < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("decay_steps, batch_size and max_epochs must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.min_delta < 0:
            raise ValueError("min_delta must be >= 0")


@dataclass
class TrainReport:
    epochs_run: int = 0
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    stopped_early: bool = False
    train_curve: list[float] = field(default_factory=list)
    val_curve: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "epochs_run": self.epochs_run,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "stopped_early": self.stopped_early,
            "train_curve": list(self.train_curve),
            "val_curve": list(self.val_curve),
        }


class EarlyStopper:
    """Patience-based stopper; the first observation always becomes the best."""

    def __init__(self, patience: int, min_delta: float):
        self.patience = patience
        self.min_delta = min_delta
        self.best: float | None = None
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float) -> tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        if self.best is None or self.best - val_loss >= self.min_delta:
            self.best = val_loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True, False
        self.bad_epochs += 1
        return False, self.bad_epochs >= self.patience


def decayed_learning_rate(config: TrainConfig, step: int) -> float:
    """Continuous exponential decay: lr * decay_rate ** (step / decay_steps)."""
    return config.learning_rate * config.decay_rate ** (step / config.decay_steps)


def train(model: MlpModel, train_set, val_set, config: TrainConfig):
    """Minibatch SGD with early stopping. Returns (best model, report).

    train_set and val_set are (X, y) pairs. The returned model carries the
    parameters of the epoch with the lowest validation loss.
    """
    X, y = train_set
    Xv, yv = val_set
    X = check_matrix(X, "train X", n_cols=model.layer_dims[0])
    Xv = check_matrix(Xv, "val X", n_cols=model.layer_dims[0])
    out_dim = model.layer_dims[-1]
    y = np.asarray(y, dtype=np.float64).reshape(X.shape[0], out_dim)
    yv = np.asarray(yv, dtype=np.float64).reshape(Xv.shape[0], out_dim)
    if config.loss == "bce":
        check_binary_labels(y, "train y")
        check_binary_labels(yv, "val y")

    work = model.copy()
    rng = as_rng(config.seed)
    stopper = EarlyStopper(config.patience, config.min_delta)
    report = TrainReport()
    best_params = (copy.deepcopy(work.weights), copy.deepcopy(work.biases))
    n = X.shape[0]
    step = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        batch_losses = []
        # divergence is diagnosed from the epoch losses, so let overflow
        # produce inf/nan here instead of warning
        with np.errstate(over="ignore", invalid="ignore"):
            for start in range(0, n, config.batch_size):
                idx = order[start : start + config.batch_size]
                xb, yb = X[idx], y[idx]
                acts, masks = _forward_cache(work, xb, "train", rng)
                dz_out = _output_preact_grad(
                    acts[-1], yb, config.loss, work.activations[-1]
                )
                dw, db = _backward(work, acts, masks, dz_out)
                lr = decayed_learning_rate(config, step)
                for i in range(work.n_layers):
                    work.weights[i] -= lr * dw[i]
                    work.biases[i] -= lr * db[i]
                step += 1
                batch_losses.append(loss_value(acts[-1], yb, config.loss))
            train_loss = float(np.mean(batch_losses))
            val_out = forward(work, Xv, "eval")[-1]
            val_loss = loss_value(val_out, yv, config.loss)
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise NumericalError(
                f"loss diverged at epoch {epoch} "
                f"(train={train_loss}, val={val_loss})"
            )
        report.train_curve.append(train_loss)
        report.val_curve.append(val_loss)
        report.epochs_run = epoch
        improved, stop = stopper.update(epoch, val_loss)
        if improved:
            best_params = (copy.deepcopy(work.weights), copy.deepcopy(work.biases))
        if stop:
            report.stopped_early = True
            break
    report.best_epoch = stopper.best_epoch
    report.best_val_loss = float(stopper.best)
    best = work.copy()
    best.weights, best.biases = best_params
    return best, report


def train_autoencoder(
    matrix,
    config: TrainConfig,
    hidden_dims=(64, 16),
    activation: str = "relu",
    dropout_rate: float = 0.0,
    val_fraction: float = 0.1,
):
    """Train a symmetric encoder/decoder under MSE on the rows of `matrix`.

    The architecture mirrors hidden_dims around the bottleneck, so (64, 16)
    on d-dimensional data gives layers d-64-16-64-d. Returns the full model
    and its report; `encoder_half` extracts the embedding network.
    """
    if config.loss != "mse":
        raise ValueError("autoencoder training requires the mse loss")
    X = check_matrix(matrix, "matrix")
    hidden = [int(h) for h in hidden_dims]
    if not hidden:
        raise ValueError("hidden_dims must name at least a bottleneck width")
    d = X.shape[1]
    dims = [d] + hidden + hidden[-2::-1] + [d]
    model = init_model(dims, activation, "identity", dropout_rate, config.seed)

    n = X.shape[0]
    if n < 2:
        raise ValueError("autoencoder training needs at least 2 rows")
    n_val = min(max(1, int(n * val_fraction + 0.5)), n - 1)
    order = as_rng(config.seed).permutation(n)
    val_idx, train_idx = order[:n_val], order[n_val:]
    return train(model, (X[train_idx], X[train_idx]), (X[val_idx], X[val_idx]), config)


def encoder_half(model: MlpModel, n_encoder_layers: int) -> MlpModel:
    """First n_encoder_layers of an autoencoder as a standalone model."""
    if not 1 <= n_encoder_layers <= model.n_layers:
        raise ValueError("n_encoder_layers out of range")
    k = n_encoder_layers
    return MlpModel(
        layer_dims=list(model.layer_dims[: k + 1]),
        weights=[w.copy() for w in model.weights[:k]],
        biases=[b.copy() for b in model.biases[:k]],
        activations=list(model.activations[:k]),
        dropout_rate=0.0,
    )


def model_to_dict(model: MlpModel, seed=None, config=None) -> dict:
    """JSON-ready snapshot; weights are row-major nested lists."""
    payload = {
        "layer_dims": [int(d) for d in model.layer_dims],
        "activations": list(model.activations),
        "dropout_rate": float(model.dropout_rate),
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
        "seed": seed,
        "config": config,
    }
    return payload


def model_from_dict(payload: dict) -> MlpModel:
    return MlpModel(
        layer_dims=[int(d) for d in payload["layer_dims"]],
        weights=[np.asarray(w, dtype=np.float64) for w in payload["weights"]],
        biases=[np.asarray(b, dtype=np.float64) for b in payload["biases"]],
        activations=list(payload["activations"]),
        dropout_rate=float(payload.get("dropout_rate", 0.0)),
    )
