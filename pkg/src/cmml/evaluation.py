"""Retrieval metrics on unseen identities: AP, mAP and Rank-1."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from .episodes import LabeledDataset
from .model import ModelParams, embed

log = logging.getLogger(__name__)


@dataclass
class SessionReport:
    task: int
    mAP: float
    rank1: float
    num_queries: int
    gallery_size: int
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def average_precision(relevance) -> float:
    """Mean of precision@k over the ranks k that hold a relevant item.

    Sums use ``math.fsum`` so the result does not depend on summation order.
    """
    rel = np.asarray(relevance, dtype=bool)
    hits = np.flatnonzero(rel)
    if hits.size == 0:
        raise ValueError("average_precision: no relevant item in the ranking")
    return math.fsum(np.arange(1, hits.size + 1) / (hits + 1)) / hits.size


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def rank_metrics(dist: np.ndarray, query_labels, gallery_labels) -> tuple[float, float, int]:
    """mAP and Rank-1 from a ``(n_query, n_gallery)`` distance matrix.

    Ranking is by ascending distance, ties broken by gallery index.  Queries
    whose class is absent from the gallery are skipped with a warning.
    Returns ``(mAP, rank1, queries_used)``.
    """
    query_labels = np.asarray(query_labels)
    gallery_labels = np.asarray(gallery_labels)
    order = np.argsort(dist, axis=1, kind="stable")
    matches = gallery_labels[order] == query_labels[:, None]
    valid = matches.any(axis=1)
    if not valid.all():
        log.warning("%d queries have no gallery match and are excluded", int((~valid).sum()))
    if not valid.any():
        raise ValueError("no query has a matching identity in the gallery")
    aps = [average_precision(row) for row in matches[valid]]
    used = int(valid.sum())
    rank1 = int(matches[valid, 0].sum()) / used
    return math.fsum(aps) / used, rank1, used


def evaluate(params: ModelParams, query: LabeledDataset, gallery: LabeledDataset, task: int = 0) -> SessionReport:
    start = time.perf_counter()
    dist = pairwise_distances(embed(params, query.features), embed(params, gallery.features))
    mAP, rank1, used = rank_metrics(dist, query.labels, gallery.labels)
    return SessionReport(task, mAP, rank1, used, len(gallery), time.perf_counter() - start)


def session_summary(reports) -> dict[str, dict[str, float]]:
    reports = list(reports)
    if not reports:
        raise ValueError("session_summary: no sessions to summarise")
    out = {}
    for metric in ("mAP", "rank1"):
        values = [getattr(r, metric) for r in reports]
        out[metric] = {"last": values[-1], "avg": float(np.mean(values))}
    return out
