"""Finite-difference verification of every primitive and every training loss.

Losses are checked at the embedding level: the student's support and query
embeddings are the variables, teacher embeddings and labels are constants.
Instances are small and random so a full sweep finishes in seconds.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import grad_check
from .distill import EpisodeViews, decoupled_kd_term, dwopp_term, dwpp_term
from .losses import ClassifierHead, dmml_episode_loss, softmax_triplet_loss

TOLERANCE = 1e-4


@dataclass
class CheckSummary:
    name: str
    instances: int
    max_rel_error: float
    failed: bool
    seconds: float

    @property
    def passed(self) -> bool:
        return not self.failed and self.max_rel_error < TOLERANCE


def _episode_shape(rng):
    way = int(rng.integers(3, 6))  # the own-class exclusion needs 3 classes
    n_s = int(rng.integers(1, 4))
    n_q = int(rng.integers(1, 3))
    return way, n_s, n_q


def _labels(way, n):
    return np.repeat(np.arange(way), n)


def _dmml_case(rng):
    way, n_s, n_q = _episode_shape(rng)
    sy, qy = _labels(way, n_s), _labels(way, n_q)
    point = [rng.normal(size=(len(qy), 4)), rng.normal(size=(len(sy), 4))]
    return (lambda tape, q, s: dmml_episode_loss(q, s, qy, sy, 0.4)), point


def _kd_case(term):
    def build(rng):
        way, n_s, n_q = _episode_shape(rng)
        sy, qy = _labels(way, n_s), _labels(way, n_q)
        t_sup, t_qry = rng.normal(size=(len(sy), 4)), rng.normal(size=(len(qy), 4))

        def fn(tape, s_sup, s_qry):
            views = EpisodeViews(tape, tape.constant(t_sup), tape.constant(t_qry), s_sup, s_qry, sy, qy, way)
            return term(views)

        return fn, [rng.normal(size=t_sup.shape), rng.normal(size=t_qry.shape)]

    return build


def _triplet_case(rng):
    way = int(rng.integers(2, 5))
    labels = _labels(way, 2)
    head = ClassifierHead(np.arange(way), rng.normal(size=(way, 4)), rng.normal(size=way))

    def fn(tape, e, w, b):
        return softmax_triplet_loss(e, labels, head, head_nodes=(w, b))

    return fn, [rng.normal(size=(len(labels), 4)), head.weight, head.bias[None, :]]


LOSS_CASES = {
    "dmml_episode": _dmml_case,
    "dwpp": _kd_case(lambda v: dwpp_term(v, 10.0)),
    "dwopp": _kd_case(lambda v: dwopp_term(v, 1.0)),
    "decoupled_kd": _kd_case(lambda v: decoupled_kd_term(v, 0.5, 0.5, 1.0)),
    "softmax_triplet": _triplet_case,
}


def _binary(fn):
    def build(rng):
        return fn, [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]

    return build


PRIMITIVE_CASES = {
    "add": _binary(lambda t, a, b: dc.sum_all((a + b) * a)),
    "sub": _binary(lambda t, a, b: dc.sum_all((a - b) * (a - b))),
    "mul": _binary(lambda t, a, b: dc.sum_all(a * b)),
    "div": _binary(lambda t, a, b: dc.sum_all(a / (dc.exp(b) + 1.0))),
    "matmul": _binary(lambda t, a, b: dc.sum_all(a @ b.T)),
    "relu": _binary(lambda t, a, b: dc.sum_all(dc.relu(a) * b)),
    "exp": _binary(lambda t, a, b: dc.sum_all(dc.exp(a) * b)),
    "log": _binary(lambda t, a, b: dc.sum_all(dc.log(a * a + 1.0) * b)),
    "sqrt": _binary(lambda t, a, b: dc.sum_all(dc.sqrt(a * a + 0.5) * b)),
    "sqdist": _binary(lambda t, a, b: dc.sum_all(t.apply("sqdist", a, b) * 0.3)),
    "segment_max": _binary(lambda t, a, b: dc.sum_all(dc.segment_max(a * b, [0, 1, 0, 1], 2))),
    "segment_min": _binary(lambda t, a, b: dc.sum_all(dc.segment_min(a * b, [1, 1, 0, 0], 2))),
    "logsumexp": _binary(lambda t, a, b: dc.sum_all(dc.logsumexp(a * 1.5 + b))),
    "softmax": _binary(lambda t, a, b: dc.sum_all(dc.softmax(a, 0.7) * b)),
    "kl": _binary(lambda t, a, b: dc.sum_all(dc.kl(dc.softmax(a), dc.softmax(b)))),
}


def run_case(name: str, build, instances: int, seed: int = 0) -> CheckSummary:
    rng = np.random.default_rng([seed, *name.encode()])
    start = time.perf_counter()
    worst, failed = 0.0, False
    for _ in range(instances):
        fn, point = build(rng)
        res = grad_check(fn, point)
        failed |= res.failed
        worst = max(worst, res.max_rel_error)
    return CheckSummary(name, instances, worst, failed, time.perf_counter() - start)


def run_checks(instances: int = 50, seed: int = 0, primitives: bool = True) -> list[CheckSummary]:
    cases = dict(LOSS_CASES)
    if primitives:
        cases.update({f"primitive:{k}": v for k, v in PRIMITIVE_CASES.items()})
    return [run_case(name, build, instances, seed) for name, build in cases.items()]
