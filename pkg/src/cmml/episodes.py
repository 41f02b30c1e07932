"""Class-disjoint task streams and N-way episode sampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class LabeledDataset:
    features: np.ndarray  # (n, d_in)
    labels: np.ndarray  # (n,) nonnegative ints
    groups: np.ndarray | None = None  # optional per-sample tag (task / camera)
    ids: np.ndarray | None = None  # optional sample ids, kept through subsetting

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise ValueError(
                f"features {self.features.shape} and labels {self.labels.shape} disagree"
            )
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("labels must be nonnegative")
        if self.groups is not None:
            self.groups = np.asarray(self.groups, dtype=np.int64)
            if self.groups.shape != self.labels.shape:
                raise ValueError("groups must have one entry per sample")
        if self.ids is not None:
            self.ids = np.asarray(self.ids, dtype=np.int64)
            if self.ids.shape != self.labels.shape:
                raise ValueError("ids must have one entry per sample")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index)
        return LabeledDataset(
            self.features[index],
            self.labels[index],
            None if self.groups is None else self.groups[index],
            None if self.ids is None else self.ids[index],
        )

    def select_classes(self, classes) -> "LabeledDataset":
        return self.subset(np.flatnonzero(np.isin(self.labels, classes)))


@dataclass
class TaskStream:
    tasks: list[LabeledDataset]
    query: LabeledDataset
    gallery: LabeledDataset

    def __post_init__(self):
        check_disjoint(self)

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def task_classes(self) -> list[set[int]]:
        return [set(t.classes.tolist()) for t in self.tasks]

    def test_classes(self) -> set[int]:
        return set(self.query.classes.tolist()) | set(self.gallery.classes.tolist())


def check_disjoint(stream: TaskStream) -> None:
    seen: set[int] = set()
    for i, cls in enumerate(stream.task_classes()):
        overlap = seen & cls
        if overlap:
            raise ValueError(f"task {i + 1} reuses classes {sorted(overlap)[:5]}")
        seen |= cls
    leak = seen & stream.test_classes()
    if leak:
        raise ValueError(f"test classes overlap training classes: {sorted(leak)[:5]}")


def split_classes(classes, num_tasks: int) -> list[np.ndarray]:
    """Near-equal consecutive groups; remainder classes go to the earliest tasks."""
    classes = np.asarray(classes)
    base, extra = divmod(len(classes), num_tasks)
    sizes = [base + (i < extra) for i in range(num_tasks)]
    return np.split(classes, np.cumsum(sizes)[:-1])


def query_gallery_split(test: LabeledDataset, rng=None):
    """First sample of each class (optionally after shuffling) is the query; the rest is gallery."""
    q_idx, g_idx = [], []
    for c in test.classes:
        idx = np.flatnonzero(test.labels == c)
        if rng is not None:
            idx = rng.permutation(idx)
        if idx.size < 2:
            raise ValueError(f"test class {c} needs at least 2 samples for a query and a gallery")
        q_idx.append(idx[0])
        g_idx.extend(idx[1:].tolist())
    return test.subset(np.array(q_idx)), test.subset(np.sort(np.array(g_idx)))


def make_task_stream(dataset: LabeledDataset, num_tasks: int, test_fraction: float, seed: int):
    if num_tasks < 1:
        raise ValueError("num_tasks must be >= 1")
    if not 0.0 <= test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in [0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    classes = rng.permutation(dataset.classes)
    n_test = int(round(test_fraction * len(classes)))
    train = classes[n_test:]
    if len(train) < 2 * num_tasks:
        raise ValueError(
            f"{len(classes)} classes ({n_test} held out for test) cannot fill "
            f"{num_tasks} tasks with at least 2 classes each"
        )
    tasks = [dataset.select_classes(g) for g in split_classes(train, num_tasks)]
    if n_test:
        query, gallery = query_gallery_split(dataset.select_classes(classes[:n_test]), rng)
    else:
        empty = dataset.subset(np.array([], dtype=np.int64))
        query, gallery = empty, empty
    return TaskStream(tasks, query, gallery)


@dataclass
class Episode:
    support_x: np.ndarray  # (N * n_s, d_in), grouped by class
    support_y: np.ndarray  # position in ``classes``, 0..N-1
    query_x: np.ndarray  # (N * n_q, d_in)
    query_y: np.ndarray
    classes: np.ndarray  # original labels of the N episode classes
    support_index: np.ndarray | None = None  # rows in the source dataset
    query_index: np.ndarray | None = None

    @property
    def num_classes(self) -> int:
        return len(self.classes)


def sample_episode(task: LabeledDataset, N: int, n_s: int, n_q: int, rng) -> Episode:
    classes, counts = np.unique(task.labels, return_counts=True)
    need = n_s + n_q
    eligible = classes[counts >= need]
    if N > len(eligible):
        if len(eligible) < 2:
            deficient = classes[counts < need].tolist()
            raise ValueError(
                f"cannot sample an episode with {need} samples per class: only "
                f"{len(eligible)} eligible classes; deficient classes {deficient}"
            )
        log.warning("episode size N=%d clamped to %d available classes", N, len(eligible))
        N = len(eligible)
    chosen = rng.choice(eligible, size=N, replace=False)
    s_idx, q_idx = [], []
    for c in chosen:
        pick = rng.choice(np.flatnonzero(task.labels == c), size=need, replace=False)
        s_idx.append(pick[:n_s])
        q_idx.append(pick[n_s:])
    s_idx = np.concatenate(s_idx)
    q_idx = np.concatenate(q_idx)
    return Episode(
        support_x=task.features[s_idx],
        support_y=np.repeat(np.arange(N), n_s),
        query_x=task.features[q_idx],
        query_y=np.repeat(np.arange(N), n_q),
        classes=chosen,
        support_index=s_idx,
        query_index=q_idx,
    )
