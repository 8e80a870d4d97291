"""
Minimal fully connected ReLU network with exact reverse-mode gradients.

Parameters live in one flat float64 vector (layer-major; each layer stores its
(in x out) weight matrix row-major followed by its bias). Every function here
is pure apart from `train`, which advances an OptimState it owns. Outputs are
per-sample pure: a row of a batched forward pass equals the single-sample
pass on that row up to floating-point round-off, not bitwise.
"""

import logging
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from errors import RejectedInputError
from models import LossKind, MLPSpec, OptimState, ParamVector, TrainConfig

# (params) -> (weighted loss, weighted gradient) added to each step's objective
AuxObjective = Callable[[np.ndarray], tuple[float, np.ndarray]]
# (state after the step, epoch index) -> None
StepCallback = Callable[[OptimState, int], None]


def _check_params(spec: MLPSpec, params: np.ndarray) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.shape[0] != spec.n_params:
        raise RejectedInputError(
            f"parameter vector has shape {params.shape}, spec {list(spec.layer_sizes)} needs ({spec.n_params},)"
        )
    if not np.all(np.isfinite(params)):
        raise RejectedInputError("parameter vector contains NaN or inf")
    return params


def _as_batch(spec: MLPSpec, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise RejectedInputError(f"input has shape {x.shape}, expected trailing dimension {spec.input_dim}")
    return X, single


def unflatten(spec: MLPSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split the flat vector into per-layer (W, b) views."""
    params = _check_params(spec, params)
    layers = []
    offset = 0
    for n_in, n_out in spec.layer_shapes:
        W = params[offset:offset + n_in * n_out].reshape(n_in, n_out)
        offset += n_in * n_out
        b = params[offset:offset + n_out]
        offset += n_out
        layers.append((W, b))
    return layers


def flatten(layers: Iterable[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Inverse of `unflatten`."""
    parts = []
    for W, b in layers:
        parts.append(np.ravel(W))
        parts.append(np.ravel(b))
    return np.concatenate(parts).astype(np.float64)


def init_params(spec: MLPSpec, seed: int | Sequence[int]) -> ParamVector:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for n_in, n_out in spec.layer_shapes:
        limit = math.sqrt(6.0 / (n_in + n_out))
        layers.append((rng.uniform(-limit, limit, size=(n_in, n_out)), np.zeros(n_out)))
    return flatten(layers)


def _forward_cache(spec: MLPSpec, params: np.ndarray, X: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Activations a_0..a_L and pre-activations z_1..z_L for a batch."""
    layers = unflatten(spec, params)
    acts = [X]
    pres = []
    a = X
    for i, (W, b) in enumerate(layers):
        z = a @ W + b
        pres.append(z)
        a = z if i == len(layers) - 1 else np.maximum(z, 0.0)
        acts.append(a)
    return acts, pres


def _backward(spec: MLPSpec, params: np.ndarray, acts: list[np.ndarray], pres: list[np.ndarray],
              dout: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. params of sum_n dout[n] . f(x_n), via reverse mode."""
    layers = unflatten(spec, params)
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(layers)  # type: ignore[list-item]
    delta = dout
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        grads[i] = (acts[i].T @ delta, delta.sum(axis=0))
        if i > 0:
            # ReLU subgradient at exactly 0 is 0
            delta = (delta @ W.T) * (pres[i - 1] > 0)
    return flatten(grads)


def _backward_per_sample(spec: MLPSpec, params: np.ndarray, acts: list[np.ndarray], pres: list[np.ndarray],
                         dout: np.ndarray) -> np.ndarray:
    """Same as `_backward` but keeps one gradient row per sample: (N, P)."""
    layers = unflatten(spec, params)
    n = dout.shape[0]
    parts: list[list[np.ndarray]] = [None] * len(layers)  # type: ignore[list-item]
    delta = dout
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        dW = np.einsum("ni,nj->nij", acts[i], delta).reshape(n, -1)
        parts[i] = [dW, delta]
        if i > 0:
            delta = (delta @ W.T) * (pres[i - 1] > 0)
    return np.concatenate([p for pair in parts for p in pair], axis=1)


def forward(spec: MLPSpec, params: ParamVector, x: np.ndarray) -> np.ndarray:
    """Raw outputs (logits) for one input vector or a row-stacked batch."""
    X, single = _as_batch(spec, x)
    acts, _ = _forward_cache(spec, params, X)
    out = acts[-1]
    return out[0] if single else out


def forward_with_pullback(spec: MLPSpec, params: ParamVector,
                          X: np.ndarray) -> tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]:
    """Batch outputs plus a closure mapping dL/d(outputs) to dL/dw."""
    params = _check_params(spec, params)
    X, _ = _as_batch(spec, X)
    acts, pres = _forward_cache(spec, params, X)

    def pullback(dout: np.ndarray) -> np.ndarray:
        return _backward(spec, params, acts, pres, np.asarray(dout, dtype=np.float64))

    return acts[-1], pullback


def forward_batch(spec: MLPSpec, params: ParamVector, X: np.ndarray) -> np.ndarray:
    """Raw outputs for a batch, always 2-D."""
    X, _ = _as_batch(spec, X)
    return _forward_cache(spec, params, X)[0][-1]


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax along the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    m = np.max(z, axis=-1, keepdims=True)
    return z - (m + np.log(np.sum(np.exp(z - m), axis=-1, keepdims=True)))


def predict_proba(spec: MLPSpec, params: ParamVector, X: np.ndarray) -> np.ndarray:
    return softmax(forward_batch(spec, params, X))


def predict(spec: MLPSpec, params: ParamVector, X: np.ndarray) -> np.ndarray:
    return np.argmax(forward_batch(spec, params, X), axis=1)


def accuracy(spec: MLPSpec, params: ParamVector, X: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return 0.0
    return float(np.mean(predict(spec, params, X) == y))


def loss_euclidean(output: float, y: float) -> float:
    """1/2 (y - f)^2."""
    return 0.5 * (float(y) - float(output)) ** 2


def loss_ce(logits: np.ndarray, label: int) -> float:
    """-log softmax(logits)[label], evaluated in log-space."""
    z = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < z.shape[-1]:
        raise RejectedInputError(f"label {label} out of range for {z.shape[-1]} outputs")
    m = np.max(z)
    lse = m + math.log(float(np.sum(np.exp(z - m))))
    return float(lse - z[label])


def ce_per_sample(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Vectorised cross-entropy, one value per row."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise RejectedInputError(f"labels out of range for {logits.shape[1]} outputs")
    return -log_softmax(logits)[np.arange(len(labels)), labels]


def loss_and_grad(spec: MLPSpec, params: ParamVector, X: np.ndarray, targets: np.ndarray,
                  loss_kind: LossKind = "ce",
                  aux_objective: AuxObjective | None = None) -> tuple[float, np.ndarray]:
    """
    Mean loss over the batch and its exact gradient.

    Args:
        spec: Network architecture
        params: Flat parameter vector
        X: Row-stacked inputs
        targets: Real targets (euclidean) or class indices (ce / combined)
        loss_kind: "euclidean", "ce", or "combined" (ce plus `aux_objective`)
        aux_objective: Caller-supplied extra term, required for "combined"

    Returns:
        (mean loss, gradient with the ParamVector layout)
    """
    params = _check_params(spec, params)
    X, _ = _as_batch(spec, X)
    n = X.shape[0]
    if n == 0:
        raise RejectedInputError("batch is empty")
    acts, pres = _forward_cache(spec, params, X)
    out = acts[-1]

    if loss_kind == "euclidean":
        if spec.output_dim != 1:
            raise RejectedInputError("euclidean loss needs a scalar-output model")
        residual = out[:, 0] - np.asarray(targets, dtype=np.float64).reshape(n)
        loss = float(np.mean(0.5 * residual ** 2))
        dout = residual[:, None] / n
    elif loss_kind in ("ce", "combined"):
        labels = np.asarray(targets, dtype=np.int64).reshape(n)
        loss = float(np.mean(ce_per_sample(out, labels)))
        dout = softmax(out)
        dout[np.arange(n), labels] -= 1.0
        dout /= n
    else:
        raise RejectedInputError(f"unknown loss kind: {loss_kind}")

    grad = _backward(spec, params, acts, pres, dout)
    if loss_kind == "combined" and aux_objective is None:
        raise RejectedInputError("combined loss needs an auxiliary objective")
    if aux_objective is not None:
        aux_loss, aux_grad = aux_objective(params)
        loss += aux_loss
        grad = grad + aux_grad
    return loss, grad


def grad_loss(spec: MLPSpec, params: ParamVector, X: np.ndarray, targets: np.ndarray,
              loss_kind: LossKind = "ce", aux_objective: AuxObjective | None = None) -> np.ndarray:
    """Exact mean gradient of the chosen loss over the batch."""
    return loss_and_grad(spec, params, X, targets, loss_kind, aux_objective)[1]


def grad_output(spec: MLPSpec, params: ParamVector, x: np.ndarray, output_index: int = 0) -> np.ndarray:
    """Gradient of the raw output f_k(x; w) w.r.t. w."""
    if not 0 <= output_index < spec.output_dim:
        raise RejectedInputError(f"output index {output_index} out of range for {spec.output_dim} outputs")
    params = _check_params(spec, params)
    X, _ = _as_batch(spec, np.asarray(x, dtype=np.float64).reshape(-1))
    acts, pres = _forward_cache(spec, params, X)
    dout = np.zeros((1, spec.output_dim))
    dout[0, output_index] = 1.0
    return _backward(spec, params, acts, pres, dout)


def per_sample_output_grads(spec: MLPSpec, params: ParamVector, X: np.ndarray, output_index: int = 0) -> np.ndarray:
    """Row n holds grad_w f_k(x_n; w)."""
    if not 0 <= output_index < spec.output_dim:
        raise RejectedInputError(f"output index {output_index} out of range for {spec.output_dim} outputs")
    params = _check_params(spec, params)
    X, _ = _as_batch(spec, X)
    acts, pres = _forward_cache(spec, params, X)
    dout = np.zeros((X.shape[0], spec.output_dim))
    dout[:, output_index] = 1.0
    return _backward_per_sample(spec, params, acts, pres, dout)


def jacobian_sq_norms(spec: MLPSpec, params: ParamVector, X: np.ndarray) -> np.ndarray:
    """Per-sample squared Frobenius norm of the output Jacobian d f / d w."""
    X, _ = _as_batch(spec, X)
    total = np.zeros(X.shape[0])
    for k in range(spec.output_dim):
        g = per_sample_output_grads(spec, params, X, k)
        total += np.einsum("np,np->n", g, g)
    return total


def sgd_step(state: OptimState, grad: np.ndarray, config: TrainConfig, epoch: int = 0) -> OptimState:
    """SGD with momentum and coupled weight decay; learning rate follows the epoch schedule."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.params.shape:
        raise RejectedInputError(f"gradient shape {grad.shape} != params shape {state.params.shape}")
    buffer = config.momentum * state.momentum_buffer + (grad + config.weight_decay * state.params)
    params = state.params - config.lr_at_epoch(epoch) * buffer
    return OptimState(params=params, momentum_buffer=buffer, step_count=state.step_count + 1)


def plain_gd_step(spec: MLPSpec, params: ParamVector, x: np.ndarray, y: float, eta: float) -> ParamVector:
    """w - eta * grad_w L(x) for a single sample under euclidean loss."""
    if spec.output_dim != 1:
        raise RejectedInputError("plain GD step is defined for scalar-output models")
    params = _check_params(spec, params)
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    g = grad_loss(spec, params, x, np.array([y], dtype=np.float64), "euclidean")
    return params - eta * g


def train(spec: MLPSpec, state: OptimState, X: np.ndarray, y: np.ndarray, config: TrainConfig, seed: int,
          callbacks: Iterable[StepCallback] = (), loss_kind: LossKind = "ce",
          aux_objective: AuxObjective | None = None) -> tuple[OptimState, list[float]]:
    """
    Mini-batch SGD over the labeled view for `config.epochs` epochs.

    Shuffle order depends only on (seed, epoch). Callbacks run after every
    optimizer step; they are how EMA teachers and checkpoints are maintained.

    Returns:
        (final state, mean training loss per epoch)
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    n = X.shape[0]
    if n == 0:
        raise RejectedInputError("cannot train on an empty labeled set")
    callbacks = list(callbacks)
    steps_per_epoch = math.ceil(n / config.batch_size)
    logging.debug(f"Training {list(spec.layer_sizes)} on {n} samples: {config.epochs} epochs x {steps_per_epoch} steps")

    trace = []
    for epoch in range(config.epochs):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        batch_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grad = loss_and_grad(spec, state.params, X[idx], y[idx], loss_kind, aux_objective)
            state = sgd_step(state, grad, config, epoch)
            batch_losses.append(loss)
            for callback in callbacks:
                callback(state, epoch)
        trace.append(float(np.mean(batch_losses)))
    return state, trace


def derive_seed(*keys: int) -> int:
    """Independent 32-bit seed for a named random stream, e.g. derive_seed(run_seed, stream, cycle)."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


class CheckpointAt:
    """Step callback that keeps a copy of the parameters once `step_count` reaches `target_step`."""

    def __init__(self, target_step: int, initial_params: ParamVector):
        if target_step < 0:
            raise RejectedInputError(f"checkpoint step must be nonnegative, got {target_step}")
        self.target_step = target_step
        self.params = np.array(initial_params, dtype=np.float64) if target_step == 0 else None

    def __call__(self, state: OptimState, epoch: int) -> None:
        if state.step_count == self.target_step:
            self.params = state.params.copy()
