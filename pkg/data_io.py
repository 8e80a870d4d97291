"""
Datasets and persistence.

Synthetic generators (two moons, Gaussian blobs), CSV loading with
train-only normalization, TODLAB-CKPT checkpoints and the atomic writers
used for every result file.
"""

import csv
import io
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from pydantic import BaseModel, ValidationError
from sklearn.datasets import make_blobs, make_moons
from sklearn.model_selection import train_test_split

import config
from errors import CheckpointFormatError, CSVParseError, RejectedInputError
from models import CandidateModel, Dataset, MLPSpec, ParamVector


# --- Atomic writers -----------------------------------------------------------


def _atomic_write(path: str | Path, data: str | bytes) -> Path:
    """Write the whole file to a temp sibling, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    kwargs = {} if isinstance(data, bytes) else {"encoding": "utf-8", "newline": ""}
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **kwargs) as f:
            f.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    logging.info(f"Wrote {path}")
    return path


def write_text(path: str | Path, text: str) -> Path:
    return _atomic_write(path, text)


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, BaseModel):
        return obj.model_dump(mode="json")
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def write_json(path: str | Path, obj: Any) -> Path:
    return _atomic_write(path, json.dumps(_jsonable(obj), indent=2) + "\n")


def write_jsonl(path: str | Path, rows: Iterable[Any]) -> Path:
    lines = [json.dumps(_jsonable(row)) for row in rows]
    return _atomic_write(path, "".join(line + "\n" for line in lines))


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_records_csv(path: str | Path, rows: Sequence[dict | BaseModel], columns: Sequence[str]) -> Path:
    """CSV with a fixed column order; missing values become empty cells."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        data = row.model_dump() if isinstance(row, BaseModel) else row
        writer.writerow([_cell(data.get(column)) for column in columns])
    return _atomic_write(path, buffer.getvalue())


def read_records_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


# --- Datasets -------------------------------------------------------------------


def _split_tags(labels: np.ndarray, test_frac: float, seed: int) -> np.ndarray:
    """Stratified train/test tags; class proportions kept within one sample per class."""
    if not 0 < test_frac < 1:
        raise RejectedInputError(f"test_frac must lie in (0, 1), got {test_frac}")
    try:
        _, test_idx = train_test_split(np.arange(labels.shape[0]), test_size=test_frac,
                                       random_state=seed, stratify=labels)
    except ValueError as e:
        raise RejectedInputError(f"cannot stratify split: {e}") from e
    split = np.full(labels.shape[0], "train", dtype="<U5")
    split[test_idx] = "test"
    return split


def _build_dataset(features: np.ndarray, labels: np.ndarray, n_classes: int, split: np.ndarray,
                   name: str, provenance: dict) -> Dataset:
    try:
        return Dataset(features=features, labels=labels, n_classes=n_classes, split=split,
                       name=name, provenance=provenance)
    except ValidationError as e:
        raise RejectedInputError(f"invalid dataset {name!r}: {e.errors()[0]['msg']}") from e


def gen_two_moons(n: int, noise_sigma: float, test_frac: float, seed: int) -> Dataset:
    """Two interleaving unit half-circles with Gaussian noise."""
    if n < 20:
        raise RejectedInputError(f"two moons needs n >= 20, got {n}")
    if noise_sigma < 0:
        raise RejectedInputError(f"noise_sigma must be nonnegative, got {noise_sigma}")
    features, labels = make_moons(n_samples=n, noise=noise_sigma, random_state=seed)
    provenance = {"generator": "two_moons", "n": n, "noise_sigma": noise_sigma,
                  "test_frac": test_frac, "seed": seed}
    return _build_dataset(features.astype(np.float64), labels, 2, _split_tags(labels, test_frac, seed),
                          "two_moons", provenance)


def gen_blobs(n: int, n_classes: int, dim: int, centers_scale: float, sigma: float, test_frac: float,
              seed: int) -> Dataset:
    """
    Isotropic Gaussian clusters around seeded centers drawn uniformly from [-scale, scale]^d.

    The test accuracy of the nearest-center classifier is stored in the
    provenance as a Bayes-rate estimate.
    """
    if n_classes < 2 or dim < 2:
        raise RejectedInputError(f"blobs need K >= 2 and d >= 2, got K={n_classes}, d={dim}")
    if n < 2 * n_classes:
        raise RejectedInputError(f"n={n} is too small for {n_classes} classes")
    if sigma < 0 or centers_scale <= 0:
        raise RejectedInputError("blobs need sigma >= 0 and centers_scale > 0")
    centers = np.random.default_rng(seed).uniform(-centers_scale, centers_scale, size=(n_classes, dim))
    features, labels = make_blobs(n_samples=n, centers=centers, cluster_std=sigma, random_state=seed)
    split = _split_tags(labels, test_frac, seed)

    test = split == "test"
    dists = np.linalg.norm(features[test][:, None, :] - centers[None, :, :], axis=2)
    nearest_center_acc = float(np.mean(np.argmin(dists, axis=1) == labels[test]))
    provenance = {"generator": "blobs", "n": n, "n_classes": n_classes, "dim": dim,
                  "centers_scale": centers_scale, "sigma": sigma, "test_frac": test_frac, "seed": seed,
                  "centers": centers.tolist(), "nearest_center_acc": nearest_center_acc}
    return _build_dataset(features.astype(np.float64), labels, n_classes, split, "blobs", provenance)


def _parse_float(cell: str, line_number: int, column: str) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise CSVParseError(f"non-numeric value {cell!r} in column {column!r}", line_number) from None
    if not np.isfinite(value):
        raise CSVParseError(f"non-finite value {cell!r} in column {column!r}", line_number)
    return value


def load_csv(path: str | Path, label_column: str = "label", test_frac: float | None = 0.2,
             split_column: str | None = None, normalize: bool = True, seed: int = 0) -> Dataset:
    """
    Load a rectangular numeric CSV with a header row.

    The split comes from `split_column` (values train/test) when given,
    otherwise a stratified split with `test_frac`. With `normalize`, each
    feature is standardized with train-split statistics; constant columns
    are left untouched and their std recorded as 0.
    """
    path = Path(path)
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header:
            raise CSVParseError("missing header row", 1)
        if label_column not in header:
            raise CSVParseError(f"unknown label column {label_column!r}", 1)
        if split_column is not None and split_column not in header:
            raise CSVParseError(f"unknown split column {split_column!r}", 1)
        feature_columns = [c for c in header if c not in (label_column, split_column)]
        if not feature_columns:
            raise CSVParseError("no feature columns", 1)

        rows, labels, tags = [], [], []
        for row in reader:
            line_number = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise CSVParseError(f"expected {len(header)} cells, got {len(row)}", line_number)
            cells = dict(zip(header, row))
            rows.append([_parse_float(cells[c], line_number, c) for c in feature_columns])
            label = _parse_float(cells[label_column], line_number, label_column)
            if label != int(label) or label < 0:
                raise CSVParseError(f"label {cells[label_column]!r} is not a nonnegative integer", line_number)
            labels.append(int(label))
            if split_column is not None:
                tag = cells[split_column].strip()
                if tag not in ("train", "test"):
                    raise CSVParseError(f"split must be 'train' or 'test', got {tag!r}", line_number)
                tags.append(tag)

    if not rows:
        raise CSVParseError("no data rows", 2)
    features = np.array(rows, dtype=np.float64)
    labels = np.array(labels, dtype=np.int64)
    n_classes = int(labels.max()) + 1
    if split_column is not None:
        split = np.array(tags, dtype="<U5")
    else:
        if test_frac is None:
            raise RejectedInputError("give test_frac or split_column")
        split = _split_tags(labels, test_frac, seed)

    provenance = {"source": str(path), "label_column": label_column, "split_column": split_column,
                  "test_frac": test_frac if split_column is None else None, "seed": seed,
                  "feature_columns": feature_columns, "normalized": normalize}
    if normalize:
        train = features[split == "train"]
        if train.shape[0] == 0:
            raise RejectedInputError("train split is empty")
        mean = train.mean(axis=0)
        std = train.std(axis=0)
        scaled = std > 0
        features[:, scaled] = (features[:, scaled] - mean[scaled]) / std[scaled]
        provenance["train_mean"] = [float(v) if s else 0.0 for v, s in zip(mean, scaled)]
        provenance["train_std"] = [float(v) if s else 0.0 for v, s in zip(std, scaled)]

    return _build_dataset(features, labels, n_classes, split, path.stem, provenance)


def save_csv(dataset: Dataset, path: str | Path) -> Path:
    """Write features (shortest round-trip floats), label and split, plus a `.meta.json` sidecar."""
    path = Path(path)
    names = dataset.provenance.get("feature_columns") or [f"x{j}" for j in range(dataset.n_features)]
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow([*names, "label", "split"])
    for features, label, tag in zip(dataset.features, dataset.labels, dataset.split):
        writer.writerow([*(repr(float(v)) for v in features), int(label), str(tag)])
    _atomic_write(path, buffer.getvalue())
    write_json(path.with_name(path.name + ".meta.json"), dataset.metadata())
    return path


def load_dataset_meta(csv_path: str | Path) -> dict:
    with open(Path(csv_path).with_name(Path(csv_path).name + ".meta.json"), "r", encoding="utf-8") as f:
        return json.load(f)


# --- Checkpoints ----------------------------------------------------------------


def _checkpoint_bytes(spec: MLPSpec, params: ParamVector) -> bytes:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.n_params,):
        raise RejectedInputError(f"expected {spec.n_params} params, got shape {params.shape}")
    header = f"{config.CKPT_MAGIC} {config.CKPT_VERSION}\n{','.join(str(s) for s in spec.layer_sizes)}\n"
    return header.encode("ascii") + params.astype("<f8").tobytes()


def save_checkpoint(path: str | Path, spec: MLPSpec, params: ParamVector) -> Path:
    """Header line, comma-separated layer sizes line, then little-endian float64 params."""
    return _atomic_write(path, _checkpoint_bytes(spec, params))


def load_checkpoint(path: str | Path) -> tuple[MLPSpec, ParamVector]:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 2)
    if len(parts) < 3:
        raise CheckpointFormatError(f"{path}: truncated header")
    magic_line, sizes_line, payload = parts
    try:
        magic, version = magic_line.decode("ascii").split(" ")
    except (UnicodeDecodeError, ValueError):
        raise CheckpointFormatError(f"{path}: not a TODLAB-CKPT file") from None
    if magic != config.CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
    if version != config.CKPT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version!r}")
    try:
        spec = MLPSpec(layer_sizes=tuple(int(s) for s in sizes_line.decode("ascii").split(",")))
    except (UnicodeDecodeError, ValueError) as e:
        raise CheckpointFormatError(f"{path}: bad layer sizes line") from e
    expected = spec.n_params * 8
    if len(payload) != expected:
        raise CheckpointFormatError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    params = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return spec, params


def save_candidates(directory: str | Path, spec: MLPSpec, candidates: Sequence[CandidateModel]) -> Path:
    """`<id>.final.ckpt` / `<id>.base.ckpt` per candidate plus `manifest.json`."""
    directory = Path(directory)
    manifest = []
    for c in candidates:
        save_checkpoint(directory / f"{c.id}.final.ckpt", spec, c.params)
        save_checkpoint(directory / f"{c.id}.base.ckpt", spec, c.baseline)
        manifest.append({"id": c.id, "final_train_loss": c.final_train_loss, "seed": c.seed,
                         "epochs": c.epochs, "gap_steps": c.gap_steps})
    return write_json(directory / "manifest.json", manifest)


def load_candidates(directory: str | Path) -> tuple[MLPSpec, list[CandidateModel]]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise CheckpointFormatError(f"{manifest_path} not found")
    with open(manifest_path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    spec = None
    candidates = []
    for entry in manifest:
        final_spec, params = load_checkpoint(directory / f"{entry['id']}.final.ckpt")
        base_spec, baseline = load_checkpoint(directory / f"{entry['id']}.base.ckpt")
        if final_spec != base_spec or (spec is not None and final_spec != spec):
            raise CheckpointFormatError(f"candidate {entry['id']}: checkpoint architectures differ")
        spec = final_spec
        candidates.append(CandidateModel(params=params, baseline=baseline, **entry))
    if spec is None:
        raise CheckpointFormatError(f"{manifest_path}: no candidates")
    return spec, candidates
