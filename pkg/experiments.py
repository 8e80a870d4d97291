"""
Command workflows behind the CLI: seeded multi-run experiments, sampler
comparisons, hyperparameter sweeps, bound verification and model-selection
studies. Every workflow writes its files plus a run_status.json and returns
the RunStatus; exit codes are decided by main.py.
"""

import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
from pydantic import ValidationError

import config
from active_loop import inject_label_noise, run_active_learning
from data_io import (
    gen_blobs,
    gen_two_moons,
    load_csv,
    save_candidates,
    save_checkpoint,
    write_json,
    write_jsonl,
    write_records_csv,
)
from errors import ConfigError, RejectedInputError
from loss_estimation import (
    lipschitz_check,
    record_trajectory,
    verify_corollary_accumulated,
    verify_corollary_T,
    verify_theorem1,
)
from model_core import derive_seed, init_params
from model_selection import build_candidate_pool, rank_models, sample_level_accuracy, topk_hit
from models import SAMPLERS, CycleRecord, Dataset, DatasetConfig, ExperimentConfig, MLPSpec, RunStatus
from report import AGGREGATE_COLUMNS, aggregate_records

RECORD_COLUMNS = (
    "seed", "cycle", "sampler", "semi", "labeled_frac", "n_labeled", "test_acc", "mean_train_loss",
    "mean_cod", "mean_true_loss", "mean_grad_sq", "spearman_cod_loss", "acquisition_seconds", "seconds",
)
TIMING_FIELDS = ("seconds", "acquisition_seconds")
REFERENCE_SAMPLER = "random"

# Random stream ids shared with nothing else in a run
_STREAM_NOISE = 5
_STREAM_RANDOM_CONTROL = 7

# Sweep shortcuts
GRID_ALIASES = {"lambda": "active.lambda", "lam": "active.lambda", "alpha": "active.alpha"}


# --- Config handling ------------------------------------------------------------


def format_validation_error(error: ValidationError) -> str:
    """One line per error, each prefixed with its dotted schema path."""
    lines = []
    for err in error.errors():
        path = ".".join(str(part) for part in err["loc"]) or "<root>"
        lines.append(f"{path}: {err['msg']}")
    return "\n".join(lines)


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Parse and validate a JSON experiment config; no path means all defaults."""
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(format_validation_error(e)) from e


def parse_value(text: str) -> Any:
    """CLI literal: JSON when it parses (numbers, booleans, lists, null), else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: ExperimentConfig, overrides: dict[str, Any]) -> ExperimentConfig:
    """Set dotted config paths (e.g. `active.sampler`) and revalidate the whole document."""
    data = cfg.model_dump(by_alias=True)
    for path, value in overrides.items():
        keys = GRID_ALIASES.get(path, path).split(".")
        if keys[-1] == "lam" and keys[:-1] == ["active"]:
            keys[-1] = "lambda"
        node = data
        for key in keys[:-1]:
            if not isinstance(node.get(key), dict):
                raise ConfigError(f"unknown config path: {path}")
            node = node[key]
        node[keys[-1]] = value
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(format_validation_error(e)) from e


def build_dataset(cfg: DatasetConfig) -> Dataset:
    if cfg.kind == "two_moons":
        return gen_two_moons(cfg.n, cfg.noise_sigma, cfg.test_frac, cfg.seed)
    if cfg.kind == "blobs":
        return gen_blobs(cfg.n, cfg.n_classes, cfg.dim, cfg.centers_scale, cfg.sigma, cfg.test_frac, cfg.seed)
    return load_csv(cfg.path, cfg.label_column, None if cfg.split_column else cfg.test_frac,
                    cfg.split_column, cfg.normalize, cfg.seed)


def build_spec(cfg: ExperimentConfig, dataset: Dataset) -> MLPSpec:
    """Explicit layer sizes must match the dataset; otherwise [d, *hidden, K]."""
    d, K = dataset.n_features, dataset.n_classes
    if cfg.model.layer_sizes is None:
        return MLPSpec(layer_sizes=(d, *cfg.model.hidden, K))
    sizes = tuple(cfg.model.layer_sizes)
    if len(sizes) < 2 or sizes[0] != d or sizes[-1] != K:
        raise ConfigError(f"model.layer_sizes: {list(sizes)} does not match dataset with d={d}, K={K}")
    return MLPSpec(layer_sizes=sizes)


# --- Job execution --------------------------------------------------------------


def run_jobs(fn: Callable, jobs: Sequence[tuple[Any, tuple]], n_workers: int = 1) -> tuple[dict, list[str]]:
    """
    Run fn(*args) for every (key, args) job, at most n_workers at a time.

    Results come back keyed in submission order regardless of completion
    order. A failing job is logged and listed in the returned failures.
    """
    results = {}
    failures = []

    def _record_failure(key, error: BaseException) -> None:
        logging.error(f"Job {key} failed: {type(error).__name__}: {error}")
        failures.append(f"{key}: {type(error).__name__}: {error}")

    if n_workers <= 1:
        for key, args in jobs:
            try:
                results[key] = fn(*args)
            except Exception as e:
                _record_failure(key, e)
        return results, failures

    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        futures = [(key, pool.submit(fn, *args)) for key, args in jobs]
        for key, future in futures:
            try:
                results[key] = future.result()
            except Exception as e:
                _record_failure(key, e)
    return results, failures


def _status(command: str, n_jobs: int, n_failed: int, output_dir: Path, files: list[Path],
            failures: list[str]) -> RunStatus:
    if n_failed == 0:
        status = "ok"
    elif n_failed < n_jobs:
        status = "partial"
    else:
        status = "failed"
    run_status = RunStatus(
        command=command,
        status=status,
        files=sorted(p.relative_to(output_dir).as_posix() for p in files),
        failures=failures,
    )
    write_json(output_dir / "run_status.json", run_status)
    return run_status


# --- Active learning ------------------------------------------------------------


def al_seed_job(cfg: ExperimentConfig, dataset: Dataset, seed: int) -> tuple[list[CycleRecord], np.ndarray]:
    """One full active learning run for one seed; the unit of parallel work."""
    spec = build_spec(cfg, dataset)
    oracle = None
    if cfg.noise.p > 0:
        oracle = inject_label_noise(dataset.y_train, cfg.noise.p, dataset.n_classes,
                                    derive_seed(seed, _STREAM_NOISE))
    return run_active_learning(dataset, spec, cfg.active, cfg.train, seed, oracle_labels=oracle)


def _record_rows(records: list[CycleRecord], record_timing: bool) -> list[dict]:
    rows = []
    for r in records:
        row = r.model_dump(mode="json")
        if not record_timing:
            for field in TIMING_FIELDS:
                row.pop(field)
        rows.append(row)
    return rows


def _write_seed_outputs(cfg: ExperimentConfig, spec: MLPSpec, directory: Path, seed: int,
                        records: list[CycleRecord], params: np.ndarray) -> list[Path]:
    rows = _record_rows(records, cfg.output.record_timing)
    files = [
        write_records_csv(directory / f"seed_{seed}.csv", rows, RECORD_COLUMNS),
        write_jsonl(directory / f"seed_{seed}.jsonl", rows),
    ]
    if cfg.output.save_checkpoints:
        files.append(save_checkpoint(directory / "checkpoints" / f"seed_{seed}.final.ckpt", spec, params))
    return files


def _al_runs(cfg: ExperimentConfig, dataset: Dataset, variants: list[tuple[str, ExperimentConfig]]):
    """All (variant label, seed) runs, in label-then-seed order."""
    jobs = [((label, seed), (variant_cfg, dataset, seed)) for label, variant_cfg in variants for seed in cfg.seeds]
    results, failures = run_jobs(al_seed_job, jobs, cfg.jobs)
    return jobs, results, failures


def _write_variant(cfg: ExperimentConfig, spec: MLPSpec, directory: Path, label: str, results: dict
                   ) -> tuple[list[Path], list[CycleRecord]]:
    files = []
    records = []
    for seed in cfg.seeds:
        if (label, seed) not in results:
            continue
        seed_records, params = results[(label, seed)]
        files.extend(_write_seed_outputs(cfg, spec, directory, seed, seed_records, params))
        records.extend(seed_records)
    if records:
        files.append(write_records_csv(directory / "aggregate.csv", aggregate_records(records), AGGREGATE_COLUMNS))
    return files, records


def run_al(cfg: ExperimentConfig, output_dir: Path) -> RunStatus:
    """`al run`: per-seed CSV/JSONL plus checkpoints, and the per-cycle mean/std aggregate."""
    dataset = build_dataset(cfg.dataset)
    spec = build_spec(cfg, dataset)
    print(f"Running {cfg.active.sampler} on {dataset.name} for seeds {cfg.seeds} ({cfg.active.cycles} cycles)")

    jobs, results, failures = _al_runs(cfg, dataset, [(cfg.active.sampler, cfg)])
    files, records = _write_variant(cfg, spec, output_dir, cfg.active.sampler, results)
    if records:
        final = [r.test_acc for r in records if r.cycle == cfg.active.cycles]
        print(f"✓ Final-cycle accuracy {np.mean(final):.4f} ± {np.std(final):.4f} over {len(final)} seeds")
    for failure in failures:
        print(f"⚠ {failure}")
    return _status("al run", len(jobs), len(failures), output_dir, files, failures)


def sampler_labels(samplers: Sequence[str]) -> list[tuple[str, str]]:
    """(label, sampler) pairs; repeats become `name#2`, ... and random is added when absent."""
    unknown = [s for s in samplers if s not in SAMPLERS]
    if unknown:
        raise RejectedInputError(f"unknown sampler(s) {unknown}; valid: {', '.join(SAMPLERS)}")
    if not samplers:
        raise RejectedInputError("no samplers given")
    samplers = list(samplers)
    if REFERENCE_SAMPLER not in samplers:
        samplers.append(REFERENCE_SAMPLER)
    seen: dict[str, int] = {}
    labels = []
    for sampler in samplers:
        seen[sampler] = seen.get(sampler, 0) + 1
        labels.append((sampler if seen[sampler] == 1 else f"{sampler}#{seen[sampler]}", sampler))
    return labels


def win_rate_rows(final_acc: dict[str, dict[int, float]], labels: list[str]) -> list[dict]:
    """Final-cycle wins/ties/losses of each label against the random reference, per shared seed."""
    reference = final_acc.get(REFERENCE_SAMPLER, {})
    rows = []
    for label in labels:
        mine = final_acc.get(label, {})
        seeds = sorted(set(mine) & set(reference))
        wins = sum(mine[s] > reference[s] for s in seeds)
        ties = sum(mine[s] == reference[s] for s in seeds)
        n = len(seeds)
        rows.append({
            "label": label,
            "n_seeds": n,
            "wins": wins,
            "ties": ties,
            "losses": n - wins - ties,
            "win_rate": wins / n if n else None,
            "win_or_tie_rate": (wins + ties) / n if n else None,
            "final_mean_acc": float(np.mean([mine[s] for s in seeds])) if n else None,
        })
    return rows


def run_compare(cfg: ExperimentConfig, samplers: Sequence[str], output_dir: Path) -> RunStatus:
    """`al compare`: paired runs (shared pools, inits and shuffles per seed) of several samplers."""
    labels = sampler_labels(samplers)
    dataset = build_dataset(cfg.dataset)
    spec = build_spec(cfg, dataset)
    variants = [(label, apply_overrides(cfg, {"active.sampler": sampler})) for label, sampler in labels]
    print(f"Comparing {', '.join(label for label, _ in labels)} on {dataset.name} for seeds {cfg.seeds}")

    jobs, results, failures = _al_runs(cfg, dataset, variants)
    files = []
    curve_rows = []
    final_acc: dict[str, dict[int, float]] = {}
    for label, sampler in labels:
        variant_files, records = _write_variant(cfg, spec, output_dir / label, label, results)
        files.extend(variant_files)
        final_acc[label] = {r.seed: r.test_acc for r in records if r.cycle == cfg.active.cycles}
        aggregate = aggregate_records(records)
        for row, std_row in zip(aggregate[::2], aggregate[1::2]):
            curve_rows.append({"label": label, "sampler": sampler, "cycle": row["cycle"],
                               "labeled_frac": row["labeled_frac"], "n_seeds": row["n_seeds"],
                               "mean_test_acc": row["test_acc"], "std_test_acc": std_row["test_acc"]})

    wins = win_rate_rows(final_acc, [label for label, _ in labels])
    files.append(write_records_csv(output_dir / "compare.csv", curve_rows,
                                   ("label", "sampler", "cycle", "labeled_frac", "n_seeds",
                                    "mean_test_acc", "std_test_acc")))
    files.append(write_records_csv(output_dir / "win_rates.csv", wins,
                                   ("label", "n_seeds", "wins", "ties", "losses", "win_rate",
                                    "win_or_tie_rate", "final_mean_acc")))
    for row in wins:
        if row["n_seeds"]:
            print(f"✓ {row['label']}: final acc {row['final_mean_acc']:.4f}, "
                  f"vs random {row['wins']}W/{row['ties']}T/{row['losses']}L")
    for failure in failures:
        print(f"⚠ {failure}")
    return _status("al compare", len(jobs), len(failures), output_dir, files, failures)


def parse_grid(items: Sequence[str]) -> dict[str, list[Any]]:
    """`key=v1,v2,...` items; keys are lambda, alpha or any dotted config path."""
    grid: dict[str, list[Any]] = {}
    for item in items:
        key, sep, values = item.partition("=")
        key = key.strip()
        if not sep or not key or not values.strip():
            raise ConfigError(f"grid entry must look like key=v1,v2: {item!r}")
        if key not in GRID_ALIASES and "." not in key:
            raise ConfigError(f"grid key must be lambda, alpha or a dotted config path: {key!r}")
        grid[key] = [parse_value(v.strip()) for v in values.split(",") if v.strip()]
    if not grid or any(not values for values in grid.values()):
        raise RejectedInputError("sweep grid is empty")
    return grid


def run_sweep(cfg: ExperimentConfig, grid: dict[str, list[Any]], output_dir: Path) -> RunStatus:
    """`al sweep`: full-factorial grid, each cell aggregated over the config's seeds."""
    if not grid or any(not values for values in grid.values()):
        raise RejectedInputError("sweep grid is empty")
    keys = list(grid)
    cells = [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]
    cell_cfgs = [apply_overrides(cfg, cell) for cell in cells]
    dataset = build_dataset(cfg.dataset)
    print(f"Sweeping {len(cells)} cells x {len(cfg.seeds)} seeds over {', '.join(keys)}")

    jobs = [((i, seed), (cell_cfg, dataset, seed)) for i, cell_cfg in enumerate(cell_cfgs) for seed in cfg.seeds]
    results, failures = run_jobs(al_seed_job, jobs, cfg.jobs)

    cell_rows, raw_rows = [], []
    for i, (cell, cell_cfg) in enumerate(zip(cells, cell_cfgs)):
        finals = []
        for seed in cfg.seeds:
            if (i, seed) not in results:
                continue
            records, _ = results[(i, seed)]
            final = records[-1].test_acc
            finals.append(final)
            raw_rows.append({**cell, "seed": seed, "final_test_acc": final})
        cell_rows.append({
            **cell,
            "n_seeds": len(finals),
            "mean_final_acc": float(np.mean(finals)) if finals else None,
            "std_final_acc": float(np.std(finals)) if finals else None,
        })

    files = [
        write_records_csv(output_dir / "sweep.csv", cell_rows, (*keys, "n_seeds", "mean_final_acc", "std_final_acc")),
        write_records_csv(output_dir / "sweep_raw.csv", raw_rows, (*keys, "seed", "final_test_acc")),
    ]
    scored = [row for row in cell_rows if row["mean_final_acc"] is not None]
    if scored:
        best = max(scored, key=lambda row: row["mean_final_acc"])
        setting = ", ".join(f"{k}={best[k]}" for k in keys)
        print(f"✓ Best cell: {setting} with mean final accuracy {best['mean_final_acc']:.4f}")
    for failure in failures:
        print(f"⚠ {failure}")
    return _status("al sweep", len(jobs), len(failures), output_dir, files, failures)


# --- Bound verification ---------------------------------------------------------


def _random_probe(seed: int, trial: int) -> tuple[MLPSpec, np.ndarray, np.ndarray, float]:
    """Random scalar-output network, input and target for one harness trial."""
    rng = np.random.default_rng([seed, trial])
    d = int(rng.integers(1, 5))
    hidden = [int(h) for h in rng.integers(2, 9, size=int(rng.integers(1, 3)))]
    spec = MLPSpec(layer_sizes=(d, *hidden, 1))
    params = init_params(spec, [seed, trial])
    x = rng.standard_normal(d)
    y = float(rng.normal(0.0, 2.0))
    return spec, params, x, y


def bound_trial_reports(seed: int, trial: int, etas: Sequence[float], Ts: Sequence[int],
                        slack: float) -> list[dict]:
    """Every bound check of one trial, as JSON-ready rows."""
    spec, params, x, y = _random_probe(seed, trial)
    rows = []
    for eta in etas:
        rows.append(verify_theorem1(spec, params, x, y, eta, slack, trial).model_dump())
        trajectory = record_trajectory(spec, params, x, y, eta, max(Ts))
        for T in Ts:
            rows.append(verify_corollary_T(trajectory, 0, T, slack, trial).model_dump())
            C = max(trajectory.grad_sq[:T])
            if C > 0:
                rows.append(verify_corollary_accumulated(trajectory, 0, T, C, slack, trial).model_dump())

    rng = np.random.default_rng([seed, trial, 1])
    d_in, d_out = int(rng.integers(2, 9)), int(rng.integers(1, 9))
    W = rng.standard_normal((d_in, d_out))
    r = rng.standard_normal((d_in, d_out)) * rng.uniform(0.01, 1.0)
    report = lipschitz_check(W, rng.standard_normal(d_out), r, rng.standard_normal(d_in), trial)
    rows.append({"check": "lipschitz", **report.model_dump()})
    return rows


def bound_summary_rows(rows: list[dict]) -> list[dict]:
    """Worst-case ratio and violation count per (check, eta, T)."""
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        key = (row["check"], row.get("eta"), row.get("T"))
        groups.setdefault(key, []).append(row)
    summary = []
    for (check, eta, T), group in sorted(groups.items(), key=lambda kv: (kv[0][0], -(kv[0][1] or 0), kv[0][2] or 0)):
        if check == "lipschitz":
            ratios = [g["lhs"] / g["rhs"] if g["rhs"] > 0 else 0.0 for g in group]
            violations = sum(not g["satisfied"] for g in group)
        else:
            ratios = [g["ratio"] for g in group]
            violations = sum(not g["satisfied_with_slack"] for g in group)
        summary.append({"check": check, "eta": eta, "T": T, "n_trials": len(group),
                        "max_ratio": max(ratios), "violations": violations})
    return summary


def acceptance_failures(rows: list[dict]) -> list[str]:
    """Lipschitz failures at any eta and bound violations at eta <= ACCEPTANCE_MAX_ETA."""
    problems = []
    for row in rows:
        if row["check"] == "lipschitz":
            if not row["satisfied"]:
                problems.append(f"lipschitz trial {row['trial']}: {row['lhs']:.6g} > {row['rhs']:.6g}")
        elif row["eta"] <= config.ACCEPTANCE_MAX_ETA and not row["satisfied_with_slack"]:
            problems.append(f"{row['check']} trial {row['trial']} eta={row['eta']} T={row['T']}: ratio {row['ratio']:.4f}")
    return problems


def run_verify_bounds(trials: int, etas: Sequence[float], Ts: Sequence[int], slack: float, seed: int,
                      output_dir: Path, n_workers: int = 1) -> tuple[RunStatus, list[str]]:
    """`verify bounds`: JSONL of every report, a per-(check, eta, T) summary and the acceptance verdict."""
    if trials < 1 or not etas or not Ts or any(e <= 0 for e in etas) or any(T < 1 for T in Ts):
        raise RejectedInputError("need trials >= 1, positive etas and T >= 1")
    print(f"Verifying bounds: {trials} trials, eta in {list(etas)}, T in {list(Ts)}, slack {slack}")
    jobs = [(trial, (seed, trial, tuple(etas), tuple(Ts), slack)) for trial in range(trials)]
    results, failures = run_jobs(bound_trial_reports, jobs, n_workers)
    rows = [row for trial in range(trials) if trial in results for row in results[trial]]
    summary = bound_summary_rows(rows)

    files = [
        write_jsonl(output_dir / "bounds.jsonl", rows),
        write_records_csv(output_dir / "bounds_summary.csv", summary,
                          ("check", "eta", "T", "n_trials", "max_ratio", "violations")),
    ]
    for row in summary:
        marker = "✓" if row["violations"] == 0 else "⚠"
        print(f"{marker} {row['check']:<22} eta={row['eta']!s:<7} T={row['T']!s:<3} "
              f"max ratio {row['max_ratio']:.4f} ({row['violations']}/{row['n_trials']} violations)")
    problems = acceptance_failures(rows)
    for problem in problems[:10]:
        print(f"⚠ {problem}")
    return _status("verify bounds", len(jobs), len(failures), output_dir, files, failures), problems


# --- Model selection ------------------------------------------------------------


def selection_job(cfg: ExperimentConfig, dataset: Dataset, seed: int, draw: int,
                  checkpoint_dir: Path | None) -> dict:
    """One candidate pool draw: top-k hits per method and sample-level accuracies."""
    spec = build_spec(cfg, dataset)
    sel = cfg.selection
    pool_seed = derive_seed(seed, draw)
    gap = {"gap_steps": sel.gap_steps} if sel.gap_steps is not None else {"gap_epochs": sel.gap_epochs}
    pool = build_candidate_pool(dataset, spec, sel.pool_size, cfg.train, seed=pool_seed,
                                min_epochs=sel.min_epochs, max_epochs=sel.max_epochs,
                                constant_lr=sel.constant_lr, **gap)
    if checkpoint_dir is not None:
        save_candidates(checkpoint_dir / f"seed_{seed}_draw_{draw}", spec, pool.candidates)

    X_test, y_test = dataset.X_test, dataset.y_test
    hits = []
    rankings = {m: rank_models(m, spec, pool.candidates, X_test) for m in sel.methods}
    rankings["random"] = rank_models("random", spec, pool.candidates, X_test,
                                     seed=derive_seed(pool_seed, _STREAM_RANDOM_CONTROL))
    for method, ranking in rankings.items():
        for k in sel.topk:
            hits.append({"seed": seed, "draw": draw, "method": method, "k": k,
                         "hit": topk_hit(ranking, pool.best_ids, k)})

    single = [pool.true_test_acc[c.id] for c in pool.candidates]
    sample_rows = []
    for method in sel.methods:
        if method == "train_loss":
            continue
        sample_rows.append({
            "seed": seed, "draw": draw, "method": method,
            "accuracy": sample_level_accuracy(method, spec, pool.candidates, X_test, y_test),
            "single_min": min(single), "single_mean": float(np.mean(single)), "single_max": max(single),
        })
    return {"hits": hits, "sample_level": sample_rows}


def run_select_study(cfg: ExperimentConfig, output_dir: Path) -> RunStatus:
    """`select run`: repeated seeded pool draws, model-level top-k hit rates and sample-level accuracy."""
    dataset = build_dataset(cfg.dataset)
    sel = cfg.selection
    checkpoint_dir = output_dir / "checkpoints" if cfg.output.save_checkpoints else None
    print(f"Model selection on {dataset.name}: pools of {sel.pool_size}, {sel.draws} draws per seed, "
          f"methods {', '.join(sel.methods)}")

    jobs = [((seed, draw), (cfg, dataset, seed, draw, checkpoint_dir))
            for seed in cfg.seeds for draw in range(sel.draws)]
    results, failures = run_jobs(selection_job, jobs, cfg.jobs)
    hits = [row for key, _ in jobs if key in results for row in results[key]["hits"]]
    sample_rows = [row for key, _ in jobs if key in results for row in results[key]["sample_level"]]

    rate_rows = []
    for method in [*sel.methods, "random"]:
        for k in sel.topk:
            outcomes = [h["hit"] for h in hits if h["method"] == method and h["k"] == k]
            if outcomes:
                rate_rows.append({"method": method, "k": k, "n_draws": len(outcomes),
                                  "hit_rate": float(np.mean(outcomes))})
    summary_rows = []
    for method in sel.methods:
        rows = [r for r in sample_rows if r["method"] == method]
        if not rows:
            continue
        summary_rows.append({
            "method": method,
            "n_draws": len(rows),
            "mean_accuracy": float(np.mean([r["accuracy"] for r in rows])),
            "mean_single_min": float(np.mean([r["single_min"] for r in rows])),
            "mean_single_mean": float(np.mean([r["single_mean"] for r in rows])),
            "mean_single_max": float(np.mean([r["single_max"] for r in rows])),
            "frac_ge_single_mean": float(np.mean([r["accuracy"] >= r["single_mean"] for r in rows])),
            "frac_ge_single_max": float(np.mean([r["accuracy"] >= r["single_max"] for r in rows])),
        })

    files = [
        write_records_csv(output_dir / "topk_draws.csv", hits, ("seed", "draw", "method", "k", "hit")),
        write_records_csv(output_dir / "topk_hit_rates.csv", rate_rows, ("method", "k", "n_draws", "hit_rate")),
        write_records_csv(output_dir / "sample_level.csv", sample_rows,
                          ("seed", "draw", "method", "accuracy", "single_min", "single_mean", "single_max")),
        write_records_csv(output_dir / "sample_level_summary.csv", summary_rows,
                          ("method", "n_draws", "mean_accuracy", "mean_single_min", "mean_single_mean",
                           "mean_single_max", "frac_ge_single_mean", "frac_ge_single_max")),
    ]
    if checkpoint_dir is not None:
        files.extend(p for p in sorted(checkpoint_dir.rglob("*")) if p.is_file())
    for row in rate_rows:
        print(f"✓ {row['method']:<12} top-{row['k']}: {row['hit_rate']:.2%} over {row['n_draws']} draws")
    for failure in failures:
        print(f"⚠ {failure}")
    return _status("select run", len(jobs), len(failures), output_dir, files, failures)
