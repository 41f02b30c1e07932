"""Episodic hard-mining metric loss and the softmax-triplet baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import DiffNode, Tape

DEFAULT_MARGIN = 0.4
TRIPLET_MARGIN = 0.3


@dataclass
class HardMinedDistances:
    query_label: int
    positive: float  # farthest same-class support sample
    negatives: dict[int, float]  # nearest support sample of every other class
    positive_index: int = -1
    negative_index: dict[int, int] | None = None


def hard_mine(query_embedding, support_embeddings, support_labels, query_label) -> HardMinedDistances:
    q = np.asarray(query_embedding, dtype=np.float64).reshape(-1)
    s = np.asarray(support_embeddings, dtype=np.float64)
    y = np.asarray(support_labels)
    if s.ndim != 2 or s.shape[1] != q.shape[0] or y.shape != (s.shape[0],):
        raise ValueError(f"hard_mine: query {q.shape}, support {s.shape}, labels {y.shape} disagree")
    pos = np.flatnonzero(y == query_label)
    if pos.size == 0:
        raise ValueError(f"hard_mine: no support sample of the query class {query_label}")
    others = [c for c in dict.fromkeys(y.tolist()) if c != query_label]
    if not others:
        raise ValueError("hard_mine: need at least one support sample of another class")
    d = np.sqrt(((s - q) ** 2).sum(axis=1) + dc.DIST_EPS)
    ip = pos[np.argmax(d[pos])]
    negatives, neg_index = {}, {}
    for c in others:
        idx = np.flatnonzero(y == c)
        j = idx[np.argmin(d[idx])]
        negatives[c], neg_index[c] = float(d[j]), int(j)
    return HardMinedDistances(int(query_label), float(d[ip]), negatives, int(ip), neg_index)


def _nodes(*xs):
    """Lift arrays onto a common tape (a new one if none of ``xs`` is a node)."""
    tape = next((x.tape for x in xs if isinstance(x, DiffNode)), None) or Tape()
    return tape, [x if isinstance(x, DiffNode) else tape.constant(x) for x in xs]


def _onehot(labels, n) -> np.ndarray:
    labels = np.asarray(labels)
    return (labels[:, None] == np.arange(n)[None, :]).astype(np.float64)


def dmml_episode_loss(query_emb, support_emb, query_y, support_y, margin=DEFAULT_MARGIN) -> DiffNode:
    """Sum over queries of ``log(1 + sum_{c' != c} exp(d_c - d_c' + margin))``.

    ``d_c`` is the farthest support sample of the query's class and ``d_c'``
    the nearest support sample of class ``c'``.  Labels are episode positions
    ``0..N-1``.
    """
    if margin < 0:
        raise ValueError(f"margin must be >= 0, got {margin}")
    query_y = np.asarray(query_y)
    support_y = np.asarray(support_y)
    n_cls = int(support_y.max()) + 1 if support_y.size else 0
    if len(np.unique(support_y)) < 2:
        raise ValueError("dmml_episode_loss: an episode needs at least 2 classes")
    if not np.isin(query_y, support_y).all():
        raise ValueError("dmml_episode_loss: a query class has no support samples")
    tape, (q, s) = _nodes(query_emb, support_emb)

    dist = dc.euclidean(q, s)
    hardest_pos = dc.segment_max(dist, support_y, n_cls)
    hardest_neg = dc.segment_min(dist, support_y, n_cls)
    own = _onehot(query_y, n_cls)
    d_pos = dc.sum_rows(hardest_pos * own)
    z = d_pos - hardest_neg + margin
    # log(1 + sum exp z) == logsumexp over [0, z...] with the own class masked out
    z0 = dc.concat_cols(tape.constant(np.zeros((len(query_y), 1))), z)
    mask = np.concatenate([np.ones((len(query_y), 1), bool), own == 0], axis=1)
    return dc.sum_all(dc.logsumexp(z0, mask=mask))


@dataclass
class ClassifierHead:
    classes: np.ndarray  # original labels, one row each
    weight: np.ndarray  # (num_classes, d_emb)
    bias: np.ndarray  # (num_classes,)

    @classmethod
    def init(cls, classes, emb_dim: int, rng) -> "ClassifierHead":
        classes = np.asarray(classes)
        bound = np.sqrt(6.0 / (len(classes) + emb_dim))
        return cls(classes, rng.uniform(-bound, bound, (len(classes), emb_dim)), np.zeros(len(classes)))

    def index_of(self, labels) -> np.ndarray:
        labels = np.asarray(labels)
        lookup = {int(c): i for i, c in enumerate(self.classes)}
        missing = sorted({int(c) for c in labels} - lookup.keys())
        if missing:
            raise ValueError(f"classifier head has no row for classes {missing}")
        return np.array([lookup[int(c)] for c in labels])


def softmax_triplet_loss(emb, labels, head: ClassifierHead, margin=TRIPLET_MARGIN, head_nodes=None):
    """Cross-entropy on head logits plus batch-hard triplet loss, unit weights.

    ``head_nodes`` lets the caller pass ``(weight, bias)`` tape variables so
    the head is trained; otherwise the head enters as constants.
    """
    labels = np.asarray(labels)
    target = head.index_of(labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("softmax_triplet_loss: batch needs at least 2 classes")
    tape, (e,) = _nodes(emb)
    if head_nodes is None:
        w, b = tape.constant(head.weight), tape.constant(head.bias[None, :])
    else:
        w, b = head_nodes
    n = len(labels)

    logits = e @ w.T + b
    own = _onehot(target, len(head.classes))
    ce = dc.sum_all(dc.logsumexp(logits) - dc.sum_rows(logits * own)) / n

    dist = dc.euclidean(e, e)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    valid = pos_mask.any(axis=1)
    if not valid.any():
        raise ValueError("softmax_triplet_loss: no class has two samples in the batch")
    one_group = np.zeros(n, dtype=np.int64)
    d_pos = dc.segment_max(dist * pos_mask.astype(float), one_group, 1)
    d_neg = dc.segment_min(dist + np.where(same, 1e6, 0.0), one_group, 1)
    hinge = dc.relu(d_pos - d_neg + margin) * valid[:, None].astype(float)
    triplet = dc.sum_all(hinge) / float(valid.sum())
    return ce + triplet
