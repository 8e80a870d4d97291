"""Label-free model selection: rank trained candidates by their output discrepancy on the test inputs."""

import logging
import math
from typing import Collection

import numpy as np

import config
from active_loop import uncertainty_scores
from errors import RejectedInputError
from loss_estimation import tod_scores
from model_core import CheckpointAt, ce_per_sample, forward_batch, init_params, predict, predict_proba, train
from models import (
    CandidateModel,
    CandidatePool,
    Dataset,
    MLPSpec,
    OptimState,
    OutputSpace,
    RankingResult,
    TrainConfig,
)

UNCERTAINTY_METHODS = ("entropy", "least_conf", "margin_conf", "ratio_conf")


def _check_test_set(xs: np.ndarray) -> np.ndarray:
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    if xs.shape[0] == 0:
        raise RejectedInputError("test set is empty")
    return xs


def avg_tod(spec: MLPSpec, candidate: CandidateModel, xs: np.ndarray, output_space: OutputSpace = "probs") -> float:
    """Mean squared output discrepancy between a candidate and its baseline checkpoint."""
    xs = _check_test_set(xs)
    scores = tod_scores(spec, candidate.params, candidate.baseline, xs, output_space)
    return float(np.mean(scores ** 2))


def _criterion(method: str, spec: MLPSpec, candidate: CandidateModel, xs: np.ndarray,
               output_space: OutputSpace) -> float:
    if method == "tod":
        return avg_tod(spec, candidate, xs, output_space)
    if method == "train_loss":
        return candidate.final_train_loss
    if method in UNCERTAINTY_METHODS:
        return float(np.mean(uncertainty_scores(method, predict_proba(spec, candidate.params, xs))))
    raise RejectedInputError(f"unknown selection method: {method}")


def rank_models(method: str, spec: MLPSpec, candidates: list[CandidateModel], xs: np.ndarray,
                output_space: OutputSpace = "probs", seed: int | None = None) -> RankingResult:
    """
    Sort candidates by ascending criterion, lower meaning predicted better; ties go to the smaller id.

    `random` is a control selector: a seeded permutation with the draw as its criterion.
    """
    if len(candidates) < 2:
        raise RejectedInputError(f"ranking needs at least 2 candidates, got {len(candidates)}")
    xs = _check_test_set(xs)
    if method == "random":
        if seed is None:
            raise RejectedInputError("random control needs a seed")
        draws = np.random.default_rng(seed).random(len(candidates))
        values = {c.id: float(v) for c, v in zip(candidates, draws)}
    else:
        values = {c.id: _criterion(method, spec, c, xs, output_space) for c in candidates}
    order = sorted(values, key=lambda i: (values[i], i))
    return RankingResult(method=method, order=order, values=values)


def topk_hit(ranking: RankingResult, true_best_id: int | Collection[int], k: int) -> bool:
    """True when a best candidate is among the first k; with tied best accuracies any of them counts."""
    if not 1 <= k <= len(ranking.order):
        raise RejectedInputError(f"k must lie in [1, {len(ranking.order)}], got {k}")
    best = {true_best_id} if isinstance(true_best_id, int) else set(true_best_id)
    if not best:
        raise RejectedInputError("need at least one best candidate id")
    unknown = best - set(ranking.values)
    if unknown:
        raise RejectedInputError(f"unknown candidate id: {min(unknown)}")
    return not best.isdisjoint(ranking.order[:k])


def _per_sample_criteria(method: str, spec: MLPSpec, candidates: list[CandidateModel], X: np.ndarray,
                         output_space: OutputSpace) -> np.ndarray:
    """(n_candidates, n_samples) matrix of per-sample selection criteria."""
    rows = []
    for c in candidates:
        if method == "tod":
            rows.append(tod_scores(spec, c.params, c.baseline, X, output_space) ** 2)
        elif method in UNCERTAINTY_METHODS:
            rows.append(uncertainty_scores(method, predict_proba(spec, c.params, X)))
        else:
            raise RejectedInputError(f"method {method!r} has no per-sample criterion")
    return np.vstack(rows)


def _argmin_by_id(criteria: np.ndarray, ids: np.ndarray) -> np.ndarray:
    # rows in ascending id order, so argmin's first-occurrence rule breaks ties by id
    order = np.argsort(ids, kind="stable")
    return ids[order][np.argmin(criteria[order], axis=0)]


def sample_level_select(method: str, spec: MLPSpec, candidates: list[CandidateModel], x: np.ndarray,
                        output_space: OutputSpace = "probs") -> int:
    """Id of the candidate with the lowest criterion on this one input."""
    if not candidates:
        raise RejectedInputError("need at least one candidate")
    X = np.asarray(x, dtype=np.float64).reshape(1, -1)
    ids = np.array([c.id for c in candidates])
    return int(_argmin_by_id(_per_sample_criteria(method, spec, candidates, X, output_space), ids)[0])


def sample_level_accuracy(method: str, spec: MLPSpec, candidates: list[CandidateModel], X: np.ndarray,
                          y: np.ndarray, output_space: OutputSpace = "probs") -> float:
    """Accuracy when every test input is classified by its own selected candidate."""
    if not candidates:
        raise RejectedInputError("need at least one candidate")
    X = _check_test_set(X)
    ids = np.array([c.id for c in candidates])
    chosen = _argmin_by_id(_per_sample_criteria(method, spec, candidates, X, output_space), ids)
    predictions = {c.id: predict(spec, c.params, X) for c in candidates}
    pred = np.array([predictions[int(cid)][n] for n, cid in enumerate(chosen)])
    return float(np.mean(pred == np.asarray(y)))


def build_candidate_pool(dataset: Dataset, spec: MLPSpec, n_models: int, train_config: TrainConfig,
                         gap_epochs: int | None = None, gap_steps: int | None = None, seed: int = 0,
                         min_epochs: int | None = None, max_epochs: int | None = None,
                         constant_lr: bool = True) -> CandidatePool:
    """
    Train n_models candidates on the full train split, keeping each one's baseline checkpoint.

    Candidate i gets its own init/shuffle seed and an epoch budget spread
    evenly over [min_epochs, max_epochs] (all train_config.epochs when unset).
    The baseline is the checkpoint `gap_steps` optimizer steps (or
    `gap_epochs` epochs, one epoch when neither is given) before the final
    weights. `constant_lr` switches the learning-rate drop off.
    """
    if n_models < 2:
        raise RejectedInputError(f"candidate pool needs at least 2 models, got {n_models}")
    if gap_epochs is not None and gap_steps is not None:
        raise RejectedInputError("give at most one of gap_epochs and gap_steps")
    if gap_epochs is None and gap_steps is None:
        gap_epochs = config.DEFAULT_GAP_EPOCHS
    if min_epochs is None or max_epochs is None:
        budgets = [train_config.epochs] * n_models
    else:
        if not 0 < min_epochs <= max_epochs:
            raise RejectedInputError(f"bad epoch range [{min_epochs}, {max_epochs}]")
        budgets = [int(round(e)) for e in np.linspace(min_epochs, max_epochs, n_models)]

    X_train, y_train = dataset.X_train, dataset.y_train
    if constant_lr:
        train_config = train_config.model_copy(update={"lr_drop_at_frac": 1.0})
    steps_per_epoch = math.ceil(X_train.shape[0] / train_config.batch_size)
    gap = gap_steps if gap_steps is not None else gap_epochs * steps_per_epoch
    if gap == 0:
        logging.warning("Baseline gap is 0 steps: every baseline equals its model and all TOD criteria are zero")

    candidates = []
    true_test_acc = {}
    for i, epochs in enumerate(budgets):
        total_steps = epochs * steps_per_epoch
        if gap > total_steps:
            raise RejectedInputError(f"baseline gap of {gap} steps exceeds the {total_steps} training steps of model {i}")
        model_seed = seed * 1000 + i
        params = init_params(spec, [model_seed, 0])
        checkpoint = CheckpointAt(total_steps - gap, params)
        state, _ = train(spec, OptimState.fresh(params), X_train, y_train,
                         train_config.model_copy(update={"epochs": epochs}), seed=model_seed,
                         callbacks=[checkpoint])
        final_loss = float(np.mean(ce_per_sample(forward_batch(spec, state.params, X_train), y_train)))
        candidates.append(CandidateModel(id=i, params=state.params, baseline=checkpoint.params,
                                         final_train_loss=final_loss, seed=model_seed, epochs=epochs,
                                         gap_steps=gap))
        true_test_acc[i] = float(np.mean(predict(spec, state.params, dataset.X_test) == dataset.y_test))
        logging.debug(f"Candidate {i}: {epochs} epochs, train loss {final_loss:.4f}, test acc {true_test_acc[i]:.4f}")

    return CandidatePool(candidates=candidates, true_test_acc=true_test_acc)
