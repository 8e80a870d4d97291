"""
Temporal output discrepancy scores and the checks that tie them to sample loss.

The bound checks evaluate the proved inequalities for a scalar-output network
trained by plain single-sample gradient descent:

    |f(x; w_{t+1}) - f(x; w_t)| <= eta * sqrt(2 L_t) * ||grad_w f||^2
    |f(x; w_{t+T}) - f(x; w_t)| <= sqrt(2) * eta * sum_tau sqrt(L_tau) * ||grad_w f_tau||^2
                                <= sqrt(2T) * eta * C * sqrt(sum_tau L_tau)

with L = 1/2 (y - f)^2 and C >= ||grad_w f||^2 along the window.
"""

import logging
import math
import warnings
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

import config
from errors import RejectedInputError
from model_core import (
    forward,
    forward_batch,
    grad_output,
    jacobian_sq_norms,
    loss_euclidean,
    plain_gd_step,
    softmax,
)
from models import (
    BoundReport,
    EstimationQuality,
    GradStats,
    LipschitzReport,
    MLPSpec,
    OutputSpace,
    ParamVector,
    Snapshot,
    Trajectory,
)


def _outputs(spec: MLPSpec, params: ParamVector, X: np.ndarray, output_space: OutputSpace) -> np.ndarray:
    out = forward_batch(spec, params, X)
    if output_space == "probs":
        return softmax(out)
    if output_space == "logits":
        return out
    raise RejectedInputError(f"unknown output space: {output_space}")


def _params_of(w: ParamVector | Snapshot) -> np.ndarray:
    return w.params if isinstance(w, Snapshot) else np.asarray(w, dtype=np.float64)


def tod(spec: MLPSpec, w_a: ParamVector, w_b: ParamVector, x: np.ndarray,
        output_space: OutputSpace = "probs") -> float:
    """L2 distance between the two models' outputs on x."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return float(tod_scores(spec, w_a, w_b, x, output_space)[0])


def tod_scores(spec: MLPSpec, w_a: ParamVector, w_b: ParamVector, xs: np.ndarray,
               output_space: OutputSpace = "probs") -> np.ndarray:
    """Per-sample output discrepancy between two parameter vectors, in input order."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.shape[0] == 0:
        return np.zeros(0)
    diff = _outputs(spec, _params_of(w_a), xs, output_space) - _outputs(spec, _params_of(w_b), xs, output_space)
    return np.sqrt(np.einsum("nk,nk->n", diff, diff))


def cod_scores(spec: MLPSpec, w_c: Snapshot, w_prev: Snapshot, xs: np.ndarray,
               output_space: OutputSpace = "probs") -> np.ndarray:
    """
    Cyclic output discrepancy: TOD between the end-of-cycle models of two consecutive cycles.

    Cycle numbering puts the random initialisation at cycle 0, so the first
    cycle's scores compare against the initial model.
    """
    if w_c.cycle != w_prev.cycle + 1:
        raise RejectedInputError(
            f"COD needs consecutive cycles, got {w_prev.cycle} -> {w_c.cycle}"
        )
    return tod_scores(spec, w_c.params, w_prev.params, xs, output_space)


def emaod_scores(spec: MLPSpec, w: ParamVector, w_teacher: ParamVector, xs: np.ndarray,
                 output_space: OutputSpace = "probs") -> np.ndarray:
    """TOD against the EMA teacher instead of the previous cycle's model."""
    return tod_scores(spec, w, w_teacher, xs, output_space)


def _bound_report(check: str, lhs: float, rhs: float, eta: float, T: int, slack: float, trial: int,
                  rhs_unsquared: float | None = None) -> BoundReport:
    if rhs > 0:
        ratio = lhs / rhs
    else:
        ratio = 0.0 if lhs == 0 else math.inf
    satisfied = lhs <= rhs * (1 + slack)
    if not satisfied:
        logging.warning(f"{check} trial {trial}: lhs {lhs:.6g} > rhs {rhs:.6g} (1+{slack}) at eta={eta}, T={T}")
    return BoundReport(
        check=check,
        trial=trial,
        lhs=lhs,
        rhs=rhs,
        ratio=ratio,
        eta=eta,
        T=T,
        slack=slack,
        satisfied_with_slack=satisfied,
        rhs_unsquared=rhs_unsquared,
    )


def _require_scalar_output(spec: MLPSpec) -> None:
    if spec.output_dim != 1:
        raise RejectedInputError("bound checks are defined for scalar-output models")


def verify_theorem1(spec: MLPSpec, params: ParamVector, x: np.ndarray, y: float, eta: float,
                    slack: float = config.DEFAULT_SLACK, trial: int = 0) -> BoundReport:
    """One plain GD step: output movement against eta * sqrt(2L) * ||grad_w f||^2."""
    _require_scalar_output(spec)
    params = np.asarray(params, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    f_before = float(forward(spec, params, x)[0])
    f_after = float(forward(spec, plain_gd_step(spec, params, x, y, eta), x)[0])
    g = grad_output(spec, params, x, 0)
    grad_sq = float(g @ g)
    root_2l = math.sqrt(2.0 * loss_euclidean(f_before, y))
    return _bound_report(
        "theorem1",
        lhs=abs(f_after - f_before),
        rhs=eta * root_2l * grad_sq,
        eta=eta,
        T=1,
        slack=slack,
        trial=trial,
        rhs_unsquared=eta * root_2l * math.sqrt(grad_sq),
    )


def record_trajectory(spec: MLPSpec, params: ParamVector, x: np.ndarray, y: float, eta: float,
                      n_steps: int, cycle: int = 0) -> Trajectory:
    """Run `n_steps` plain GD steps on (x, y), recording steps 0..n_steps."""
    _require_scalar_output(spec)
    if n_steps < 0:
        raise RejectedInputError("n_steps must be nonnegative")
    w = np.asarray(params, dtype=np.float64).copy()
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    snapshots, outputs, losses, grad_sq = [], [], [], []
    for step in range(n_steps + 1):
        f = float(forward(spec, w, x)[0])
        g = grad_output(spec, w, x, 0)
        snapshots.append(Snapshot(params=w, cycle=cycle, epoch=0, step=step))
        outputs.append(f)
        losses.append(loss_euclidean(f, y))
        grad_sq.append(float(g @ g))
        if step < n_steps:
            w = plain_gd_step(spec, w, x, y, eta)
    return Trajectory(spec=spec, x=x, y=float(y), eta=eta, snapshots=snapshots,
                      outputs=outputs, losses=losses, grad_sq=grad_sq)


def _window(trajectory: Trajectory, t: int, T: int) -> list[int]:
    """Positions of steps t..t+T in the trajectory; every step must be present."""
    if T < 1 or t < 0:
        raise RejectedInputError(f"need t >= 0 and T >= 1, got t={t}, T={T}")
    position = {step: i for i, step in enumerate(trajectory.steps)}
    missing = [s for s in range(t, t + T + 1) if s not in position]
    if missing:
        raise RejectedInputError(f"trajectory is missing steps {missing[:5]}{'...' if len(missing) > 5 else ''}")
    return [position[s] for s in range(t, t + T + 1)]


def verify_corollary_T(trajectory: Trajectory, t: int, T: int,
                       slack: float = config.DEFAULT_SLACK, trial: int = 0) -> BoundReport:
    """T-step discrepancy against the sum of per-step bounds."""
    pos = _window(trajectory, t, T)
    lhs = abs(trajectory.outputs[pos[-1]] - trajectory.outputs[pos[0]])
    terms = pos[:-1]
    rhs = math.sqrt(2.0) * trajectory.eta * sum(
        math.sqrt(trajectory.losses[i]) * trajectory.grad_sq[i] for i in terms
    )
    rhs_unsquared = math.sqrt(2.0) * trajectory.eta * sum(
        math.sqrt(trajectory.losses[i]) * math.sqrt(trajectory.grad_sq[i]) for i in terms
    )
    return _bound_report("corollary_T", lhs, rhs, trajectory.eta, T, slack, trial, rhs_unsquared)


def verify_corollary_accumulated(trajectory: Trajectory, t: int, T: int, C: float,
                                 slack: float = config.DEFAULT_SLACK, trial: int = 0) -> BoundReport:
    """T-step discrepancy against sqrt(2T) * eta * C * sqrt(accumulated loss)."""
    if C <= 0:
        raise RejectedInputError("C must be positive")
    pos = _window(trajectory, t, T)
    terms = pos[:-1]
    observed = max(trajectory.grad_sq[i] for i in terms)
    if C < observed:
        raise RejectedInputError(f"C={C:.6g} is below the observed max ||grad f||^2={observed:.6g}")
    lhs = abs(trajectory.outputs[pos[-1]] - trajectory.outputs[pos[0]])
    accumulated = sum(trajectory.losses[i] for i in terms)
    rhs = math.sqrt(2.0 * T) * trajectory.eta * C * math.sqrt(accumulated)
    return _bound_report("corollary_accumulated", lhs, rhs, trajectory.eta, T, slack, trial)


def estimate_C(spec: MLPSpec, snapshots: Sequence[ParamVector | Snapshot], xs: np.ndarray) -> GradStats:
    """Statistics of ||grad_w f||^2 (output-Jacobian Frobenius norm) over samples x snapshots."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    if len(snapshots) == 0 or xs.shape[0] == 0:
        raise RejectedInputError("estimate_C needs at least one snapshot and one sample")
    values = np.concatenate([jacobian_sq_norms(spec, _params_of(w), xs) for w in snapshots])
    return GradStats(mean=float(values.mean()), std=float(values.std()), max=float(values.max()),
                     count=int(values.size))


def grad_norm_profile(spec: MLPSpec, snapshots: Sequence[ParamVector | Snapshot], xs: np.ndarray) -> list[float]:
    """Mean ||grad_w f||^2 over xs, one value per snapshot."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    return [float(jacobian_sq_norms(spec, _params_of(w), xs).mean()) for w in snapshots]


def spectral_norm(r: np.ndarray, tol: float = config.POWER_ITERATION_TOL,
                  max_iter: int = config.POWER_ITERATION_MAX_ITER) -> float:
    """Largest singular value of r by power iteration on the smaller Gram matrix."""
    r = np.atleast_2d(np.asarray(r, dtype=np.float64))
    gram = r.T @ r if r.shape[1] <= r.shape[0] else r @ r.T
    v = np.random.default_rng(0).standard_normal(gram.shape[0])
    v /= np.linalg.norm(v)
    eig = 0.0
    for _ in range(max_iter):
        w = gram @ v
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            return 0.0
        v = w / norm
        converged = abs(norm - eig) <= tol * norm
        eig = norm
        if converged:
            break
    else:
        logging.debug(f"power iteration hit {max_iter} iterations without reaching tol={tol}")
    return math.sqrt(eig)


def lipschitz_check(W: np.ndarray, b: np.ndarray, r: np.ndarray, x: np.ndarray, trial: int = 0) -> LipschitzReport:
    """
    ReLU layer perturbation: ||relu((W+r)^T x + b) - relu(W^T x + b)|| <= ||x|| * ||r||_2.

    W and r are (d_in, d_out), b is (d_out,), x is (d_in,). No slack.
    """
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    r = np.atleast_2d(np.asarray(r, dtype=np.float64))
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if r.shape != W.shape or b.shape[0] != W.shape[1] or x.shape[0] != W.shape[0]:
        raise RejectedInputError(
            f"incompatible shapes: W {W.shape}, r {r.shape}, b {b.shape}, x {x.shape}"
        )
    perturbed = np.maximum(0.0, (W + r).T @ x + b)
    base = np.maximum(0.0, W.T @ x + b)
    lhs = float(np.linalg.norm(perturbed - base))
    rhs = float(np.linalg.norm(x)) * spectral_norm(r)
    return LipschitzReport(trial=trial, lhs=lhs, rhs=rhs, satisfied=lhs <= rhs)


def _descending_order(values: np.ndarray) -> np.ndarray:
    """Indices sorted by descending value, ties by ascending index."""
    return np.lexsort((np.arange(len(values)), -values))


def loss_estimation_quality(scores: np.ndarray, true_losses: np.ndarray) -> EstimationQuality:
    """Spearman correlation, decile-mean true losses and recall@p of a label-free score."""
    scores = np.asarray(scores, dtype=np.float64)
    true_losses = np.asarray(true_losses, dtype=np.float64)
    if scores.shape != true_losses.shape:
        raise RejectedInputError(f"length mismatch: {scores.shape} scores vs {true_losses.shape} losses")
    n = scores.shape[0]
    if n < config.N_DECILES:
        raise RejectedInputError(f"need at least {config.N_DECILES} samples, got {n}")

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rho, _ = spearmanr(scores, true_losses)
    rho = None if not np.isfinite(rho) else float(rho)

    by_score = _descending_order(scores)
    by_loss = _descending_order(true_losses)
    deciles = [float(true_losses[band].mean()) for band in np.array_split(by_score, config.N_DECILES)]

    recall = {}
    for p in config.RECALL_PERCENTS:
        m = max(1, int(round(n * p / 100)))
        hits = np.intersect1d(by_score[:m], by_loss[:m]).size
        recall[p] = hits / m
    return EstimationQuality(spearman_rho=rho, decile_mean_losses=deciles, recall_at_p=recall)
