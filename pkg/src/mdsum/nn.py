"""Dense feed-forward networks with hand-written backprop and Adam.

The networks here are small (a few hundred units), fully-connected, tanh in
the hidden layers and identity at the output, operating on float64 arrays.
Gradients are exact analytic derivatives; the optimizer callers rely on
them matching finite differences to high precision, so nothing in this
module is allowed to approximate.

Weights for layer l have shape (fan_out, fan_in) and act on row batches as
``X @ W.T + b``.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .util import NumericalError, canonical_json, decode_floats, encode_floats, sha256_hex


@dataclass
class Mlp:
    layer_dims: tuple
    weights: list  # list of (fan_out, fan_in) float64 arrays
    biases: list  # list of (fan_out,) float64 arrays
    activation: str = "tanh"


@dataclass
class Gradients:
    weights: list
    biases: list


@dataclass
class AdamState:
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m_weights: list = field(default_factory=list)
    v_weights: list = field(default_factory=list)
    m_biases: list = field(default_factory=list)
    v_biases: list = field(default_factory=list)


@dataclass
class TrainOptions:
    learning_rate: float = 5e-4
    batch_size: int = 128
    max_epochs: int = 500
    patience: int = 20
    val_fraction: float = 0.10


@dataclass
class TrainReport:
    epochs: int
    best_val_loss: float
    step_losses: list
    val_losses: list


_ACTIVATIONS = {"tanh"}


def mlp_init(layer_dims, rng: np.random.Generator, activation: str = "tanh") -> Mlp:
    """Glorot-uniform weights, zero biases.

    The limit a = sqrt(6 / (fan_in + fan_out)) keeps tanh pre-activations
    in their linear regime at the start of training.
    """
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2:
        raise ValueError(f"need at least input and output dims, got {dims}")
    if any(d <= 0 for d in dims):
        raise ValueError(f"all layer dims must be positive, got {dims}")
    if activation not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(layer_dims=dims, weights=weights, biases=biases, activation=activation)


def forward_batch(mlp: Mlp, inputs: np.ndarray):
    """Forward pass on a (B, d_in) batch.

    Returns (outputs, activations) where activations[l] is the
    post-activation output of layer l, with activations[0] the input batch.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != mlp.layer_dims[0]:
        raise ValueError(
            f"expected batch of shape (B, {mlp.layer_dims[0]}), got {x.shape}"
        )
    acts = [x]
    h = x
    last = len(mlp.weights) - 1
    for l, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        pre = h @ w.T + b
        h = pre if l == last else np.tanh(pre)
        acts.append(h)
    return h, acts


def mlp_forward(mlp: Mlp, x) -> np.ndarray:
    """Forward pass on a single input vector."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != mlp.layer_dims[0]:
        raise ValueError(f"expected vector of length {mlp.layer_dims[0]}, got shape {v.shape}")
    out, _ = forward_batch(mlp, v[None, :])
    return out[0]


def backward_from_output_grad(mlp: Mlp, activations: list, grad_out: np.ndarray) -> Gradients:
    """Backprop an arbitrary (B, d_out) output gradient to parameter gradients."""
    g = grad_out
    n_layers = len(mlp.weights)
    d_weights = [None] * n_layers
    d_biases = [None] * n_layers
    for l in range(n_layers - 1, -1, -1):
        h_prev = activations[l]
        d_weights[l] = g.T @ h_prev
        d_biases[l] = g.sum(axis=0)
        if l > 0:
            # activations[l] for l >= 1 is tanh output, so tanh' = 1 - h^2
            g = (g @ mlp.weights[l]) * (1.0 - activations[l] ** 2)
    return Gradients(weights=d_weights, biases=d_biases)


def mse_loss_grad(outputs: np.ndarray, targets: np.ndarray):
    """Mean over batch rows of the squared Euclidean error, with gradient."""
    diff = outputs - targets
    loss = float(np.sum(diff * diff) / outputs.shape[0])
    return loss, (2.0 / outputs.shape[0]) * diff


def mlp_backward(mlp: Mlp, inputs, targets):
    """MSE loss and exact parameter gradients on a batch.

    Returns (loss, Gradients). Loss is the batch mean of the squared
    Euclidean error between network outputs and targets.
    """
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"batch size mismatch: {x.shape[0]} inputs vs {y.shape[0]} targets")
    if y.ndim != 2 or y.shape[1] != mlp.layer_dims[-1]:
        raise ValueError(f"expected targets of shape (B, {mlp.layer_dims[-1]}), got {y.shape}")
    outputs, acts = forward_batch(mlp, x)
    loss, grad_out = mse_loss_grad(outputs, y)
    if not np.isfinite(loss):
        raise NumericalError("non-finite loss in mlp_backward")
    return loss, backward_from_output_grad(mlp, acts, grad_out)


def mlp_input_gradient(mlp: Mlp, x, upstream) -> np.ndarray:
    """Gradient of upstream . output with respect to the input vector."""
    v = np.asarray(x, dtype=np.float64)
    _, acts = forward_batch(mlp, v[None, :])
    g = np.asarray(upstream, dtype=np.float64)[None, :]
    for l in range(len(mlp.weights) - 1, 0, -1):
        g = (g @ mlp.weights[l]) * (1.0 - acts[l] ** 2)
    return (g @ mlp.weights[0])[0]


def adam_init(mlp: Mlp, learning_rate: float = 5e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    if not (0.0 < learning_rate):
        raise ValueError(f"learning rate must be positive, got {learning_rate}")
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
        raise ValueError(f"betas must lie in [0, 1), got {beta1}, {beta2}")
    return AdamState(
        learning_rate=learning_rate, beta1=beta1, beta2=beta2, eps=eps, step=0,
        m_weights=[np.zeros_like(w) for w in mlp.weights],
        v_weights=[np.zeros_like(w) for w in mlp.weights],
        m_biases=[np.zeros_like(b) for b in mlp.biases],
        v_biases=[np.zeros_like(b) for b in mlp.biases],
    )


def _adam_update(p, g, m, v, state: AdamState, t: int):
    m *= state.beta1
    m += (1.0 - state.beta1) * g
    v *= state.beta2
    v += (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    p -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)


def adam_step(state: AdamState, mlp: Mlp, grads: Gradients):
    """One Adam update with bias correction. Mutates mlp and state in place."""
    for i, (gw, gb) in enumerate(zip(grads.weights, grads.biases)):
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise NumericalError(f"non-finite gradient in layer {i}")
    state.step += 1
    t = state.step
    for i in range(len(mlp.weights)):
        _adam_update(mlp.weights[i], grads.weights[i], state.m_weights[i],
                     state.v_weights[i], state, t)
        _adam_update(mlp.biases[i], grads.biases[i], state.m_biases[i],
                     state.v_biases[i], state, t)
    return mlp, state


def _snapshot(mlp: Mlp):
    return [w.copy() for w in mlp.weights], [b.copy() for b in mlp.biases]


def fit_mlp(mlp: Mlp, inputs, targets, opts: TrainOptions, rng: np.random.Generator,
            loss_grad: Optional[Callable] = None) -> TrainReport:
    """Mini-batch Adam training with early stopping.

    A val_fraction split is held aside; training stops when the validation
    loss has not improved for `patience` epochs (or at max_epochs), and the
    best-validation parameters are restored. loss_grad(outputs, targets)
    must return (scalar loss, d loss / d outputs); the default is MSE.
    """
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 training rows, got {n}")
    if loss_grad is None:
        loss_grad = mse_loss_grad

    n_val = max(1, int(round(opts.val_fraction * n)))
    if n_val >= n:
        raise ValueError(f"validation split leaves no training rows (n={n})")
    perm = rng.permutation(n)
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    x_val, y_val = x[val_idx], y[val_idx]
    x_tr, y_tr = x[train_idx], y[train_idx]
    n_tr = x_tr.shape[0]

    adam = adam_init(mlp, learning_rate=opts.learning_rate)
    best_val = np.inf
    best_params = _snapshot(mlp)
    stale = 0
    step_losses: list = []
    val_losses: list = []
    epochs_run = 0

    for epoch in range(opts.max_epochs):
        order = rng.permutation(n_tr)
        for start in range(0, n_tr, opts.batch_size):
            idx = order[start:start + opts.batch_size]
            out, acts = forward_batch(mlp, x_tr[idx])
            loss, grad_out = loss_grad(out, y_tr[idx])
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite training loss at epoch {epoch}")
            grads = backward_from_output_grad(mlp, acts, grad_out)
            adam_step(adam, mlp, grads)
            step_losses.append(loss)
        val_out, _ = forward_batch(mlp, x_val)
        val_loss, _ = loss_grad(val_out, y_val)
        val_losses.append(val_loss)
        epochs_run = epoch + 1
        if val_loss < best_val:
            best_val = val_loss
            best_params = _snapshot(mlp)
            stale = 0
        else:
            stale += 1
            if stale >= opts.patience:
                break

    mlp.weights, mlp.biases = best_params
    return TrainReport(epochs=epochs_run, best_val_loss=float(best_val),
                       step_losses=step_losses, val_losses=val_losses)


def mlp_to_payload(mlp: Mlp) -> dict:
    return {
        "kind": "mlp",
        "layer_dims": list(mlp.layer_dims),
        "activation": mlp.activation,
        "weights": [encode_floats(w) for w in mlp.weights],
        "biases": [encode_floats(b) for b in mlp.biases],
    }


def mlp_from_payload(payload: dict) -> Mlp:
    if payload.get("kind") != "mlp":
        raise ValueError(f"not an mlp payload: kind={payload.get('kind')!r}")
    if payload["activation"] not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {payload['activation']!r}")
    return Mlp(
        layer_dims=tuple(payload["layer_dims"]),
        weights=[decode_floats(p) for p in payload["weights"]],
        biases=[decode_floats(p) for p in payload["biases"]],
        activation=payload["activation"],
    )


def mlp_save(mlp: Mlp, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(mlp_to_payload(mlp), fh)


def mlp_load(path) -> Mlp:
    with open(path, "r", encoding="utf-8") as fh:
        return mlp_from_payload(json.load(fh))


def mlp_hash(mlp: Mlp) -> str:
    """Content hash of the exact parameter values."""
    return sha256_hex(canonical_json(mlp_to_payload(mlp)))


def clone_mlp(mlp: Mlp) -> Mlp:
    return copy.deepcopy(mlp)
