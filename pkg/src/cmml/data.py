"""Synthetic ReID-style task streams and the CSV feature-file format.

CSV layout: header ``id,label,task,f0,...,f{d-1}``, one sample per row,
UTF-8 with LF line endings.  ``label`` and ``task`` are nonnegative ints;
features are written with ``repr`` so they round-trip exactly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .episodes import LabeledDataset, TaskStream, query_gallery_split, split_classes

LATENT_DIM = 8


class DataFormatError(ValueError):
    pass


@dataclass
class SyntheticSpec:
    num_classes: int = 120
    samples_per_class: int = 20
    input_dim: int = 32
    noise: float = 0.15
    drift: float = 0.15  # radians of rotation added per task
    seed: int = 0
    latent_dim: int = LATENT_DIM
    # identities of one task differ only along these many latent factors and
    # vary per sample along the rest; None gives every task every factor
    task_factors: int | None = 4
    nuisance: float = 2.0  # per-sample spread along a task's unused factors

    def validate(self, num_tasks: int, test_classes: int) -> None:
        if self.noise <= 0:
            raise ValueError(f"noise must be > 0, got {self.noise}")
        if self.input_dim < self.latent_dim:
            raise ValueError(f"input_dim {self.input_dim} < latent_dim {self.latent_dim}")
        if self.task_factors is not None and not 1 <= self.task_factors <= self.latent_dim:
            raise ValueError(f"task_factors must be in 1..{self.latent_dim}, got {self.task_factors}")
        if self.nuisance < 0:
            raise ValueError(f"nuisance must be >= 0, got {self.nuisance}")
        if self.samples_per_class < 2:
            raise ValueError("samples_per_class must be >= 2")
        need = 3 * num_tasks + test_classes
        if self.num_classes < need:
            raise ValueError(
                f"{self.num_classes} classes cannot cover {num_tasks} tasks x 3 classes "
                f"+ {test_classes} test classes (need {need})"
            )

    def to_dict(self) -> dict:
        return asdict(self)


def _plane_rotation(dim: int, rng):
    """Random orthonormal basis; rotation by ``angle`` acts in consecutive coordinate pairs of it."""
    basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))

    def rotation(angle: float) -> np.ndarray:
        c, s = math.cos(angle), math.sin(angle)
        block = np.eye(dim)
        for i in range(0, dim - 1, 2):
            block[i, i], block[i, i + 1] = c, -s
            block[i + 1, i], block[i + 1, i + 1] = s, c
        return basis @ block @ basis.T

    return rotation


def task_factor_dims(spec: SyntheticSpec, task: int) -> np.ndarray:
    """Latent factors that separate the identities of ``task`` (0-based)."""
    if spec.task_factors is None:
        return np.arange(spec.latent_dim)
    return (task * spec.task_factors + np.arange(spec.task_factors)) % spec.latent_dim


def gen_synthetic(spec: SyntheticSpec, num_tasks: int = 5, test_classes: int = 20) -> TaskStream:
    """Gaussian identity clusters whose generating map rotates from task to task.

    Class centres are unit vectors in an 8-d latent space, mapped to the
    input space by a fixed random linear map.  Task ``k`` (1-based) sees that
    map rotated by ``(k - 1) * drift``; test identities use the mean rotation
    of the training tasks.

    With ``task_factors`` set, a task's centres live on the factors from
    ``task_factor_dims`` and every sample also moves along the remaining
    factors by ``nuisance / sqrt(latent_dim)`` per factor, so a model fitted to
    one task learns to ignore what the next one needs.  Test identities use
    every factor and carry no such variation.
    """
    spec.validate(num_tasks, test_classes)
    rng = np.random.default_rng(spec.seed)
    centres = rng.standard_normal((spec.num_classes, spec.latent_dim))
    lift = rng.standard_normal((spec.input_dim, spec.latent_dim)) / math.sqrt(spec.latent_dim)
    rotation = _plane_rotation(spec.input_dim, rng)
    order = rng.permutation(spec.num_classes)
    test_ids, train_ids = order[:test_classes], order[test_classes:]

    def draw(class_ids, angle, task_tag, dims):
        mapping = rotation(angle) @ lift
        unused = np.ones(spec.latent_dim, dtype=bool)
        unused[dims] = False
        spread = spec.nuisance / math.sqrt(spec.latent_dim)
        z_all = np.where(unused, 0.0, centres[class_ids])
        z_all /= np.linalg.norm(z_all, axis=1, keepdims=True)
        feats, labels = [], []
        for c, z in zip(class_ids, z_all):
            if unused.any():
                latent = z + spread * rng.standard_normal((spec.samples_per_class, spec.latent_dim)) * unused
                mean = latent @ mapping.T
            else:
                mean = mapping @ z
            feats.append(mean + spec.noise * rng.standard_normal((spec.samples_per_class, spec.input_dim)))
            labels.append(np.full(spec.samples_per_class, c))
        feats, labels = np.concatenate(feats), np.concatenate(labels)
        return LabeledDataset(feats, labels, np.full(len(labels), task_tag))

    tasks = [
        draw(np.sort(ids), k * spec.drift, k, task_factor_dims(spec, k))
        for k, ids in enumerate(split_classes(train_ids, num_tasks))
    ]
    test = draw(np.sort(test_ids), 0.5 * (num_tasks - 1) * spec.drift, num_tasks, np.arange(spec.latent_dim))
    query, gallery = query_gallery_split(test)
    offset = 0
    for ds in (*tasks, query, gallery):
        ds.ids = np.arange(offset, offset + len(ds))
        offset += len(ds)
    return TaskStream(tasks, query, gallery)


# --------------------------------------------------------------------------
# CSV


def write_dataset(dataset: LabeledDataset, path) -> None:
    n, d = dataset.features.shape
    ids = dataset.ids if dataset.ids is not None else np.arange(n)
    groups = dataset.groups if dataset.groups is not None else np.zeros(n, dtype=np.int64)
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "label", "task", *[f"f{j}" for j in range(d)]])
        for i in range(n):
            w.writerow([int(ids[i]), int(dataset.labels[i]), int(groups[i]),
                        *[repr(float(v)) for v in dataset.features[i]]])


def _parse_int(text, line, column):
    try:
        v = int(text)
    except ValueError:
        raise DataFormatError(f"line {line}, column {column!r}: expected an integer, got {text!r}") from None
    if v < 0:
        raise DataFormatError(f"line {line}, column {column!r}: must be nonnegative, got {v}")
    return v


def load_dataset(path) -> LabeledDataset:
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as f:
        rows = csv.reader(f)
        try:
            header = next(rows)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        if header[:3] != ["id", "label", "task"]:
            raise DataFormatError(f"{path}: header must start with id,label,task; got {header[:3]}")
        names = header[3:]
        if names != [f"f{j}" for j in range(len(names))]:
            raise DataFormatError(f"{path}: feature columns must be f0..f{len(names) - 1}")
        ids, labels, tasks, feats = [], [], [], []
        for line, row in enumerate(rows, start=2):
            if len(row) != len(header):
                raise DataFormatError(
                    f"{path}: line {line} has {len(row)} fields, expected {len(header)}"
                )
            ids.append(_parse_int(row[0], line, "id"))
            labels.append(_parse_int(row[1], line, "label"))
            tasks.append(_parse_int(row[2], line, "task"))
            values = []
            for name, text in zip(names, row[3:]):
                try:
                    v = float(text)
                except ValueError:
                    raise DataFormatError(
                        f"{path}: line {line}, column {name!r}: not a number: {text!r}"
                    ) from None
                if not math.isfinite(v):
                    raise DataFormatError(f"{path}: line {line}, column {name!r}: non-finite value")
                values.append(v)
            feats.append(values)
    features = np.array(feats, dtype=np.float64).reshape(len(feats), len(names))
    return LabeledDataset(features, np.array(labels, dtype=np.int64),
                          np.array(tasks, dtype=np.int64), np.array(ids, dtype=np.int64))


def split_by_task(dataset: LabeledDataset) -> list[LabeledDataset]:
    if dataset.groups is None:
        return [dataset]
    return [dataset.subset(np.flatnonzero(dataset.groups == t)) for t in np.unique(dataset.groups)]


def write_stream(stream: TaskStream, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train = stream.tasks[0]
    for t in stream.tasks[1:]:
        train = LabeledDataset(
            np.concatenate([train.features, t.features]),
            np.concatenate([train.labels, t.labels]),
            np.concatenate([train.groups, t.groups]),
            np.concatenate([train.ids, t.ids]) if train.ids is not None and t.ids is not None else None,
        )
    paths = {"train": out / "train.csv", "query": out / "query.csv", "gallery": out / "gallery.csv"}
    write_dataset(train, paths["train"])
    write_dataset(stream.query, paths["query"])
    write_dataset(stream.gallery, paths["gallery"])
    return paths


def load_stream(train_path, query_path, gallery_path) -> TaskStream:
    return TaskStream(
        split_by_task(load_dataset(train_path)),
        load_dataset(query_path),
        load_dataset(gallery_path),
    )
