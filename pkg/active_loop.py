"""Pool-based active learning: pool bookkeeping, acquisition, EMA teacher and the semisupervised objective."""

import logging
import math
import time

import numpy as np
from scipy.special import entr

import config
from errors import RejectedInputError
from loss_estimation import cod_scores, emaod_scores, loss_estimation_quality, tod_scores
from model_core import (
    CheckpointAt,
    accuracy,
    ce_per_sample,
    derive_seed,
    forward_batch,
    forward_with_pullback,
    init_params,
    jacobian_sq_norms,
    loss_and_grad,
    predict,
    predict_proba,
    sgd_step,
    softmax,
    train,
)
from models import (
    ALConfig,
    CycleRecord,
    Dataset,
    MLPSpec,
    OptimState,
    OutputSpace,
    ParamVector,
    PoolState,
    SamplerName,
    Snapshot,
    TrainConfig,
)

# Named random streams of one run; every draw is keyed by (run seed, stream, cycle)
_STREAM_INIT = 1
_STREAM_SHUFFLE = 2
_STREAM_UNLABELED = 3
_STREAM_RANDOM_SAMPLER = 4
# cycle index of the model trained on the initial pool before any acquisition
_BASELINE_CYCLE = 0


def _fraction_count(n: int, frac: float) -> int:
    # tolerance keeps e.g. 1000 * 0.15 from flooring to 149
    return int(math.floor(n * frac + 1e-9))


def init_pool(n_train: int, start_frac: float, seed: int) -> PoolState:
    """Uniformly random labeled subset of size floor(n_train * start_frac)."""
    n_labeled = _fraction_count(n_train, start_frac)
    if n_labeled < 1 or n_labeled >= n_train:
        raise RejectedInputError(
            f"start_frac={start_frac} gives {n_labeled} labeled of {n_train}; need 1 <= labeled < n_train"
        )
    rng = np.random.default_rng(seed)
    labeled = np.sort(rng.choice(n_train, size=n_labeled, replace=False))
    unlabeled = np.setdiff1d(np.arange(n_train), labeled)
    return PoolState(labeled=tuple(labeled.tolist()), unlabeled=tuple(unlabeled.tolist()), cycle=0)


def grow_pool(pool: PoolState, chosen: np.ndarray) -> PoolState:
    """Move the oracle-annotated indices from the unlabeled to the labeled pool."""
    chosen_set = set(int(i) for i in chosen)
    if not chosen_set <= set(pool.unlabeled):
        raise RejectedInputError("can only annotate indices from the unlabeled pool")
    labeled = tuple(sorted(set(pool.labeled) | chosen_set))
    unlabeled = tuple(i for i in pool.unlabeled if i not in chosen_set)
    return PoolState(labeled=labeled, unlabeled=unlabeled, cycle=pool.cycle + 1)


def ema_update(w_teacher: ParamVector, w: ParamVector, alpha: float) -> ParamVector:
    """alpha * w_teacher + (1 - alpha) * w."""
    w_teacher = np.asarray(w_teacher, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if w_teacher.shape != w.shape:
        raise RejectedInputError(f"teacher shape {w_teacher.shape} != student shape {w.shape}")
    if not 0 <= alpha < 1:
        raise RejectedInputError(f"EMA decay must lie in [0, 1), got {alpha}")
    return alpha * w_teacher + (1 - alpha) * w


def unsup_loss_and_grad(spec: MLPSpec, w: ParamVector, w_teacher: ParamVector, X_unlabeled: np.ndarray,
                        output_space: OutputSpace = "probs") -> tuple[float, np.ndarray]:
    """
    Consistency loss (1/|B|) sum_x ||f(x; w) - f(x; w_teacher)||^2 and its gradient w.r.t. w.

    The teacher is a constant: no gradient flows through it.
    """
    X_unlabeled = np.atleast_2d(np.asarray(X_unlabeled, dtype=np.float64))
    n = X_unlabeled.shape[0]
    if n == 0:
        raise RejectedInputError("unlabeled batch is empty")
    student, pullback = forward_with_pullback(spec, w, X_unlabeled)
    teacher = forward_batch(spec, w_teacher, X_unlabeled)
    if output_space == "probs":
        p, q = softmax(student), softmax(teacher)
        diff = p - q
        d_p = 2.0 * diff / n
        # softmax Jacobian-vector product: p * (d_p - <d_p, p>)
        dout = p * (d_p - np.sum(d_p * p, axis=1, keepdims=True))
    elif output_space == "logits":
        diff = student - teacher
        dout = 2.0 * diff / n
    else:
        raise RejectedInputError(f"unknown output space: {output_space}")
    loss = float(np.sum(diff * diff) / n)
    return loss, pullback(dout)


def combined_step(spec: MLPSpec, state: OptimState, X_labeled: np.ndarray, y_labeled: np.ndarray,
                  X_unlabeled: np.ndarray, w_teacher: ParamVector, lam: float, alpha: float,
                  train_config: TrainConfig, epoch: int = 0,
                  output_space: OutputSpace = "probs") -> tuple[OptimState, ParamVector]:
    """One SGD step on mean CE + lam * consistency loss, then one EMA update of the teacher."""
    _, grad = loss_and_grad(spec, state.params, X_labeled, y_labeled, "ce")
    _, unsup_grad = unsup_loss_and_grad(spec, state.params, w_teacher, X_unlabeled, output_space)
    state = sgd_step(state, grad + lam * unsup_grad, train_config, epoch)
    return state, ema_update(w_teacher, state.params, alpha)


def ramped_alpha(alpha: float, n_updates: int) -> float:
    """EMA decay for the next update: min(alpha, 1 - 1/(n_updates + 1))."""
    return min(alpha, 1.0 - 1.0 / (n_updates + 1))


class EMATeacher:
    """
    Mean-teacher parameters, updated once after every optimizer step.

    With `warmup` the decay ramps as min(alpha, 1 - 1/(t + 1)) over the
    t updates made so far.
    """

    def __init__(self, params: ParamVector, alpha: float, warmup: bool = False):
        self.params = np.array(params, dtype=np.float64)
        self.alpha = alpha
        self.warmup = warmup
        self.n_updates = 0

    def __call__(self, state: OptimState, epoch: int) -> None:
        alpha = ramped_alpha(self.alpha, self.n_updates) if self.warmup else self.alpha
        self.params = ema_update(self.params, state.params, alpha)
        self.n_updates += 1


class ConsistencyObjective:
    """lam * consistency loss on a fresh with-replacement unlabeled batch per step."""

    def __init__(self, spec: MLPSpec, X_unlabeled: np.ndarray, baseline, lam: float, batch_size: int,
                 output_space: OutputSpace, rng: np.random.Generator):
        self.spec = spec
        self.X_unlabeled = X_unlabeled
        # zero-arg callable so an EMA teacher is read at call time
        self.baseline = baseline
        self.lam = lam
        self.batch_size = batch_size
        self.output_space = output_space
        self.rng = rng

    def __call__(self, params: np.ndarray) -> tuple[float, np.ndarray]:
        idx = self.rng.integers(0, self.X_unlabeled.shape[0], size=self.batch_size)
        loss, grad = unsup_loss_and_grad(self.spec, params, self.baseline(), self.X_unlabeled[idx],
                                         self.output_space)
        return self.lam * loss, self.lam * grad


def uncertainty_scores(kind: str, probs: np.ndarray) -> np.ndarray:
    """Per-sample uncertainty of a posterior, higher = more uncertain."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if kind == "entropy":
        return entr(probs).sum(axis=1)
    if kind == "least_conf":
        return 1.0 - probs.max(axis=1)
    if probs.shape[1] < 2:
        raise RejectedInputError(f"{kind} needs at least two classes")
    top2 = -np.sort(-probs, axis=1)[:, :2]
    if kind == "margin_conf":
        return -(top2[:, 0] - top2[:, 1])
    if kind == "ratio_conf":
        return -(top2[:, 0] / np.maximum(top2[:, 1], config.RATIO_FLOOR))
    raise RejectedInputError(f"unknown uncertainty measure: {kind}")


def acquisition_scores(sampler: SamplerName, spec: MLPSpec, current: Snapshot, xs: np.ndarray,
                       previous: Snapshot | None = None, teacher: ParamVector | None = None,
                       output_space: OutputSpace = "probs",
                       rng: np.random.Generator | None = None) -> np.ndarray:
    """
    Score candidates for annotation; higher means more informative for every sampler.

    `previous` is required by cod (previous cycle's model, or a checkpoint of
    the current cycle when scoring with an intra-cycle gap), `teacher` by
    emaod and `rng` by random.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    if sampler == "cod":
        if previous is None:
            raise RejectedInputError("cod needs the previous model snapshot")
        if previous.cycle == current.cycle:
            return tod_scores(spec, current.params, previous.params, xs, output_space)
        return cod_scores(spec, current, previous, xs, output_space)
    if sampler == "emaod":
        if teacher is None:
            raise RejectedInputError("emaod needs the EMA teacher")
        return emaod_scores(spec, current.params, teacher, xs, output_space)
    if sampler == "random":
        if rng is None:
            raise RejectedInputError("random sampler needs a seeded generator")
        return rng.random(xs.shape[0])
    if sampler in ("entropy", "least_conf", "margin_conf", "ratio_conf"):
        return uncertainty_scores(sampler, predict_proba(spec, current.params, xs))
    raise RejectedInputError(f"unknown sampler: {sampler}")


def select_top_b(scores: np.ndarray, unlabeled_indices: np.ndarray, b: int) -> np.ndarray:
    """Indices of the b largest scores (ties by ascending index), returned ascending."""
    scores = np.asarray(scores, dtype=np.float64)
    unlabeled_indices = np.asarray(unlabeled_indices, dtype=np.int64)
    if scores.shape != unlabeled_indices.shape:
        raise RejectedInputError("need one score per unlabeled index")
    if not 0 <= b <= unlabeled_indices.shape[0]:
        raise RejectedInputError(f"budget {b} exceeds the {unlabeled_indices.shape[0]} unlabeled samples")
    order = np.lexsort((unlabeled_indices, -scores))
    return np.sort(unlabeled_indices[order[:b]])


def inject_label_noise(labels: np.ndarray, p: float, n_classes: int, seed: int) -> np.ndarray:
    """Replace each label, with probability p, by a uniform draw over the other classes."""
    labels = np.asarray(labels, dtype=np.int64)
    if not 0 <= p <= 1:
        raise RejectedInputError(f"noise probability must lie in [0, 1], got {p}")
    if p == 0:
        return labels.copy()
    if n_classes < 2:
        raise RejectedInputError("label noise needs at least two classes")
    rng = np.random.default_rng(seed)
    flip = rng.random(labels.shape[0]) < p
    offsets = rng.integers(1, n_classes, size=labels.shape[0])
    return np.where(flip, (labels + offsets) % n_classes, labels)


def per_class_accuracy(spec: MLPSpec, params: ParamVector, X: np.ndarray, y: np.ndarray,
                       n_classes: int) -> list[float | None]:
    pred = predict(spec, params, X)
    result = []
    for k in range(n_classes):
        mask = y == k
        result.append(float(np.mean(pred[mask] == k)) if mask.any() else None)
    return result


def _first_cycle_baseline(spec: MLPSpec, al_config: ALConfig, train_config: TrainConfig, X_labeled: np.ndarray,
                          y_labeled: np.ndarray, seed: int) -> tuple[Snapshot, int]:
    """
    Previous-model snapshot for cycle 1's COD, plus the optimizer steps it took.

    "trained": a supervised model fit to the initial random labeled pool from
    its own init and shuffle streams. "init": the untrained cycle-1 initialisation.
    """
    if al_config.first_cycle_baseline == "init":
        return Snapshot(params=init_params(spec, [seed, _STREAM_INIT, 1]), cycle=0, epoch=0, step=0), 0
    state, _ = train(
        spec, OptimState.fresh(init_params(spec, [seed, _STREAM_INIT, _BASELINE_CYCLE])), X_labeled, y_labeled,
        train_config, seed=derive_seed(seed, _STREAM_SHUFFLE, _BASELINE_CYCLE), loss_kind="ce",
    )
    logging.debug(f"Seed {seed}: cycle-1 baseline trained for {state.step_count} steps on {y_labeled.size} labels")
    return Snapshot(params=state.params, cycle=0, epoch=train_config.epochs, step=state.step_count), state.step_count


def run_active_learning(dataset: Dataset, spec: MLPSpec, al_config: ALConfig, train_config: TrainConfig,
                        seed: int, oracle_labels: np.ndarray | None = None) -> tuple[list[CycleRecord], ParamVector]:
    """
    Full active learning run: train, score the unlabeled pool, annotate the top b, repeat.

    Args:
        dataset: Train/test split; pool indices refer to rows of the train split
        spec: Task model architecture (input/output sizes must match the dataset)
        al_config: Schedule, sampler and semisupervised settings
        train_config: SGD settings used in every cycle
        seed: Run seed; pool, initialisations and shuffles depend only on (seed, cycle)
        oracle_labels: Labels the oracle returns for train rows (e.g. noisy); defaults to the clean ones

    Returns:
        (one CycleRecord per cycle, final model parameters)
    """
    if spec.input_dim != dataset.n_features or spec.output_dim != dataset.n_classes:
        raise RejectedInputError(
            f"model {list(spec.layer_sizes)} does not match dataset with d={dataset.n_features}, K={dataset.n_classes}"
        )
    X_train, y_clean = dataset.X_train, dataset.y_train
    y_oracle = y_clean if oracle_labels is None else np.asarray(oracle_labels, dtype=np.int64)
    X_test, y_test = dataset.X_test, dataset.y_test
    n_train = X_train.shape[0]

    pool = init_pool(n_train, al_config.start_frac, seed)
    budget = _fraction_count(n_train, al_config.budget_frac)
    if budget < 1:
        raise RejectedInputError(f"budget_frac={al_config.budget_frac} gives an empty budget for {n_train} samples")
    unlabeled_batch = al_config.unlabeled_batch_size or train_config.batch_size
    track_teacher = (al_config.semi_enabled and al_config.unsup_baseline == "ema") or al_config.sampler == "emaod"
    previous, global_step = _first_cycle_baseline(spec, al_config, train_config, X_train[np.array(pool.labeled)],
                                                  y_oracle[np.array(pool.labeled)], seed)
    params = previous.params
    records = []

    for cycle in range(1, al_config.cycles + 1):
        started = time.perf_counter()
        if al_config.warm_start and cycle > 1:
            start_params = params
        else:
            start_params = init_params(spec, [seed, _STREAM_INIT, cycle])
        labeled = np.array(pool.labeled)
        unlabeled = np.array(pool.unlabeled)
        steps_per_epoch = math.ceil(labeled.size / train_config.batch_size)

        callbacks = []
        teacher = EMATeacher(start_params, al_config.alpha, warmup=al_config.ema_warmup)
        if track_teacher:
            callbacks.append(teacher)
        gap_checkpoint = None
        if al_config.cod_gap_epochs is not None:
            total_steps = train_config.epochs * steps_per_epoch
            gap_checkpoint = CheckpointAt(max(0, total_steps - al_config.cod_gap_epochs * steps_per_epoch),
                                          start_params)
            callbacks.append(gap_checkpoint)

        aux = None
        if al_config.semi_enabled and unlabeled.size > 0:
            if al_config.unsup_baseline == "ema":
                baseline = lambda t=teacher: t.params
            else:
                baseline = lambda w=previous.params: w
            aux = ConsistencyObjective(
                spec, X_train[unlabeled], baseline, al_config.lam, unlabeled_batch, al_config.output_space,
                np.random.default_rng(derive_seed(seed, _STREAM_UNLABELED, cycle)),
            )

        state, trace = train(
            spec, OptimState.fresh(start_params), X_train[labeled], y_oracle[labeled], train_config,
            seed=derive_seed(seed, _STREAM_SHUFFLE, cycle), callbacks=callbacks, loss_kind="ce",
            aux_objective=aux,
        )
        params = state.params
        global_step += state.step_count
        current = Snapshot(params=params, cycle=cycle, epoch=train_config.epochs, step=global_step)
        if gap_checkpoint is not None:
            baseline_snapshot = Snapshot(params=gap_checkpoint.params, cycle=cycle,
                                         epoch=max(0, train_config.epochs - al_config.cod_gap_epochs),
                                         step=max(0, global_step - al_config.cod_gap_epochs * steps_per_epoch))
        else:
            baseline_snapshot = previous

        X_unl = X_train[unlabeled]
        acq_started = time.perf_counter()
        scores = acquisition_scores(
            al_config.sampler, spec, current, X_unl, previous=baseline_snapshot, teacher=teacher.params,
            output_space=al_config.output_space,
            rng=np.random.default_rng(derive_seed(seed, _STREAM_RANDOM_SAMPLER, cycle)),
        )
        acquisition_seconds = time.perf_counter() - acq_started

        mean_cod = mean_true_loss = None
        quality = None
        if unlabeled.size > 0:
            if al_config.sampler == "cod":
                cod = scores
            else:
                cod = tod_scores(spec, current.params, baseline_snapshot.params, X_unl, al_config.output_space)
            true_loss = ce_per_sample(forward_batch(spec, params, X_unl), y_clean[unlabeled])
            mean_cod = float(cod.mean())
            mean_true_loss = float(true_loss.mean())
            if unlabeled.size >= config.N_DECILES:
                quality = loss_estimation_quality(cod, true_loss)

        record = CycleRecord(
            seed=seed,
            cycle=cycle,
            sampler=al_config.sampler,
            semi=al_config.semi_enabled,
            labeled_frac=labeled.size / n_train,
            n_labeled=int(labeled.size),
            test_acc=accuracy(spec, params, X_test, y_test),
            per_class_acc=per_class_accuracy(spec, params, X_test, y_test, dataset.n_classes),
            mean_train_loss=float(np.mean(trace)),
            mean_cod=mean_cod,
            mean_true_loss=mean_true_loss,
            mean_grad_sq=float(jacobian_sq_norms(spec, params, X_train).mean()),
            spearman_cod_loss=quality.spearman_rho if quality else None,
            decile_mean_losses=quality.decile_mean_losses if quality else None,
            recall_at_p=quality.recall_at_p if quality else None,
            seconds=time.perf_counter() - started,
            acquisition_seconds=acquisition_seconds,
        )
        records.append(record)
        cod_text = f"{mean_cod:.4f}" if mean_cod is not None else "n/a"
        logging.info(
            f"Seed {seed} cycle {cycle}/{al_config.cycles} [{al_config.sampler}]: labeled {record.labeled_frac:.1%}, "
            f"test acc {record.test_acc:.4f}, mean COD {cod_text}"
        )

        if cycle < al_config.cycles:
            chosen = select_top_b(scores, unlabeled, budget)
            pool = grow_pool(pool, chosen)
        previous = current

    return records, params
