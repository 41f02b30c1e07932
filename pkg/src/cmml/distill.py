"""Prototype classifiers and distillation between a frozen teacher and the student.

Both temporary classifiers are built from the same episode: the teacher's
uses teacher embeddings for prototypes *and* queries, the student's uses
student embeddings for both.  KL is always ``KL(teacher || student)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import DiffNode, Tape
from .episodes import Episode
from .model import ModelParams, embed_on_tape, param_nodes

DWPP_TEMPERATURE = 10.0
DWOPP_TEMPERATURE = 1.0


@dataclass
class PrototypeSet:
    prototypes: np.ndarray  # (N, d_emb), row i belongs to classes[i]
    classes: np.ndarray
    role: str = "student"

    def __getitem__(self, c) -> np.ndarray:
        return self.prototypes[int(np.flatnonzero(self.classes == c)[0])]


def class_prototypes(support_emb, support_labels, role: str = "student") -> PrototypeSet:
    emb = np.asarray(support_emb, dtype=np.float64)
    labels = np.asarray(support_labels)
    if emb.ndim != 2 or labels.shape != (emb.shape[0],):
        raise ValueError(f"support embeddings {emb.shape} and labels {labels.shape} disagree")
    if emb.shape[0] == 0:
        raise ValueError("class_prototypes: empty support set")
    classes = np.array(list(dict.fromkeys(labels.tolist())))
    protos = np.stack([emb[labels == c].mean(axis=0) for c in classes])
    return PrototypeSet(protos, classes, role)


def averaging_matrix(support_y, num_classes: int) -> np.ndarray:
    """``(N, n_support)`` matrix whose product with support embeddings gives the centroids."""
    support_y = np.asarray(support_y)
    onehot = (np.arange(num_classes)[:, None] == support_y[None, :]).astype(np.float64)
    counts = onehot.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        empty = np.flatnonzero(counts[:, 0] == 0).tolist()
        raise ValueError(f"classes {empty} have no support samples")
    return onehot / counts


@dataclass
class ProtoDistribution:
    probs: np.ndarray
    classes: np.ndarray  # retained classes, aligned with probs
    temperature: float
    excluded: int | None = None


def _masked_softmax_1d(z, keep):
    z = np.where(keep, z, -np.inf)
    e = np.where(keep, np.exp(z - z.max()), 0.0)
    return e / e.sum()


def proto_probs(prototypes: PrototypeSet, query_embedding, T: float, exclude=None) -> ProtoDistribution:
    """``p_c`` proportional to ``exp(-d(query, u_c)) ** (1/T)`` over the retained classes."""
    if T <= 0:
        raise ValueError(f"temperature must be > 0, got {T}")
    q = np.asarray(query_embedding, dtype=np.float64).reshape(-1)
    d = np.sqrt(((prototypes.prototypes - q) ** 2).sum(axis=1) + dc.DIST_EPS)
    keep = np.ones(len(prototypes.classes), bool)
    if exclude is not None:
        keep = prototypes.classes != exclude
        if keep.sum() < 2:
            raise ValueError(
                f"excluding class {exclude} leaves {keep.sum()} classes; need at least 2 (N >= 3)"
            )
    p = _masked_softmax_1d(-d / T, keep)
    return ProtoDistribution(p[keep], prototypes.classes[keep], T, exclude)


def kl_div(p: ProtoDistribution, q: ProtoDistribution) -> float:
    if not np.array_equal(p.classes, q.classes) or p.excluded != q.excluded:
        raise ValueError("kl_div: distributions are over different class sets")
    tape = Tape()
    return dc.kl(tape.constant(p.probs), tape.constant(q.probs)).item()


# --------------------------------------------------------------------------
# episode-level distillation on a tape


@dataclass
class EpisodeViews:
    """One episode embedded by the teacher (constants) and the student (tape nodes)."""

    tape: Tape
    teacher_support: DiffNode
    teacher_query: DiffNode
    student_support: DiffNode
    student_query: DiffNode
    support_y: np.ndarray
    query_y: np.ndarray
    num_classes: int


def episode_views(teacher: ModelParams, student: ModelParams, episode: Episode, tape=None, student_layers=None):
    tape = tape or Tape()
    t_layers = param_nodes(tape, teacher if teacher.frozen else teacher.snapshot())
    s_layers = student_layers or param_nodes(tape, student)
    return EpisodeViews(
        tape,
        embed_on_tape(tape, t_layers, episode.support_x),
        embed_on_tape(tape, t_layers, episode.query_x),
        embed_on_tape(tape, s_layers, episode.support_x),
        embed_on_tape(tape, s_layers, episode.query_x),
        np.asarray(episode.support_y),
        np.asarray(episode.query_y),
        episode.num_classes,
    )


def proto_logits(support: DiffNode, query: DiffNode, support_y, num_classes: int) -> DiffNode:
    """Negative query-to-prototype distances, ``(n_query, N)``; gradient reaches the prototypes."""
    protos = support.tape.constant(averaging_matrix(support_y, num_classes)) @ support
    return -dc.euclidean(query, protos)


def _logits(views: EpisodeViews):
    t = proto_logits(views.teacher_support, views.teacher_query, views.support_y, views.num_classes)
    s = proto_logits(views.student_support, views.student_query, views.support_y, views.num_classes)
    return t, s


def _own_class(views: EpisodeViews) -> np.ndarray:
    return views.query_y[:, None] == np.arange(views.num_classes)[None, :]


def dwpp_term(views: EpisodeViews, T: float = DWPP_TEMPERATURE) -> DiffNode:
    if views.num_classes < 2:
        raise ValueError("DwPP needs at least 2 episode classes")
    t, s = _logits(views)
    return dc.sum_all(dc.kl(dc.softmax(t, T), dc.softmax(s, T)))


def dwopp_term(views: EpisodeViews, T: float = DWOPP_TEMPERATURE) -> DiffNode:
    if views.num_classes < 3:
        raise ValueError(
            "DwoPP needs N >= 3 episode classes: with N=2 the distribution without the "
            "query's class is a point mass and the loss is identically 0"
        )
    keep = ~_own_class(views)
    t, s = _logits(views)
    return dc.sum_all(dc.kl(dc.softmax(t, T, mask=keep), dc.softmax(s, T, mask=keep)))


def _split_probs(probs: DiffNode, own: np.ndarray):
    """Return (binary [p_pos, p_neg], distribution renormalised over negatives)."""
    own_f = own.astype(np.float64)
    p_pos = dc.sum_rows(probs * own_f)
    negs = probs * (1.0 - own_f)
    p_neg = dc.sum_rows(negs)  # summed rather than 1 - p_pos, to keep precision
    return dc.concat_cols(p_pos, p_neg), negs / p_neg


def decoupled_parts(views: EpisodeViews, T: float = 1.0):
    """Per-query ``(ppkd, npkd, teacher_p_pos)`` nodes, each ``(n_query, 1)``."""
    if views.num_classes < 3:
        raise ValueError("decoupled KD needs N >= 3 episode classes")
    own = _own_class(views)
    t, s = _logits(views)
    pt, ps = dc.softmax(t, T), dc.softmax(s, T)
    t_bin, t_neg = _split_probs(pt, own)
    s_bin, s_neg = _split_probs(ps, own)
    return dc.kl(t_bin, s_bin), dc.kl(t_neg, s_neg), t_bin.value[:, :1]


def decoupled_kd_term(views: EpisodeViews, alpha: float, beta: float, T: float = 1.0) -> DiffNode:
    _check_weights(alpha, beta)
    ppkd, npkd, _ = decoupled_parts(views, T)
    return dc.sum_all(ppkd) * float(alpha) + dc.sum_all(npkd) * float(beta)


def _check_weights(alpha, beta):
    if alpha < 0 or beta < 0:
        raise ValueError(f"alpha and beta must be >= 0, got {alpha}, {beta}")
    if abs(alpha + beta - 1.0) > 1e-9:
        raise ValueError(f"alpha + beta must equal 1, got {alpha} + {beta} = {alpha + beta}")


# --------------------------------------------------------------------------
# parameter-level entry points


def dwpp_loss(teacher: ModelParams, student: ModelParams, episode: Episode, T: float = DWPP_TEMPERATURE):
    return dwpp_term(episode_views(teacher, student, episode), T)


def dwopp_loss(teacher: ModelParams, student: ModelParams, episode: Episode, T: float = DWOPP_TEMPERATURE):
    return dwopp_term(episode_views(teacher, student, episode), T)


def decoupled_kd(teacher: ModelParams, student: ModelParams, episode: Episode, alpha: float, beta: float, T: float = 1.0):
    _check_weights(alpha, beta)
    return decoupled_kd_term(episode_views(teacher, student, episode), alpha, beta, T)


def dwpp_decomposition(teacher, student, episode, T: float = 1.0) -> dict:
    """Diagnostic: how well ``KD = PPKD + rho * NPKD`` holds for the two readings of rho.

    ``rho_negative_mass`` uses the teacher's pooled negative probability
    ``1 - p_pos`` (the decoupled-KD identity); ``rho_positive_prob`` uses
    ``p_pos`` itself.  Residuals are summed over queries.
    """
    views = episode_views(teacher, student, episode)
    kd = dwpp_term(views, T).item()
    ppkd, npkd, p_pos = decoupled_parts(views, T)
    pp, np_ = ppkd.value[:, 0], npkd.value[:, 0]
    p_pos = p_pos[:, 0]
    return {
        "kd": kd,
        "ppkd": float(pp.sum()),
        "npkd": float(np_.sum()),
        "teacher_p_pos": p_pos.tolist(),
        "residual_rho_negative_mass": kd - float((pp + (1.0 - p_pos) * np_).sum()),
        "residual_rho_positive_prob": kd - float((pp + p_pos * np_).sum()),
    }
