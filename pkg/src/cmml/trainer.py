"""Continual training over a task stream.

Each task is optimised episode by episode with the episodic metric loss,
plus ``lam`` times a distillation term against a frozen copy of the model
taken at the end of the previous task.  One Adam step per episode.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .diffcore import Tape
from .distill import (
    DWOPP_TEMPERATURE,
    DWPP_TEMPERATURE,
    EpisodeViews,
    decoupled_kd_term,
    dwopp_term,
    dwpp_term,
)
from .episodes import LabeledDataset, TaskStream, sample_episode
from .evaluation import SessionReport, evaluate
from .losses import ClassifierHead, dmml_episode_loss, softmax_triplet_loss
from .model import AdamState, ModelParams, adam_step, adam_update, embed, embed_on_tape, init_params, param_nodes

log = logging.getLogger(__name__)

METHODS = ("dmml_ft", "dwpp", "dwopp", "dkd", "bot_ft")
DISTILL_METHODS = ("dwpp", "dwopp", "dkd")


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class TrainConfig:
    method: str = "dwopp"
    alpha: float | None = None  # dkd only
    beta: float | None = None
    lam: float = 1.0
    margin: float = 0.4
    temperature: float | None = None  # None -> 10 for dwpp, 1 otherwise
    N: int = 32
    n_s: int = 5
    n_q: int = 1
    episodes_per_task: int = 500
    lr: float = 2e-4
    weight_decay: float = 1e-4
    seed: int = 0
    reset_optimizer: bool = True
    eval_every: int = 1  # in tasks; the final task is always evaluated
    emb_dim: int = 16
    hidden: tuple[int, ...] = (64, 64)
    triplet_margin: float = 0.3

    @classmethod
    def from_dict(cls, d: dict, path: str = "train") -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"{path}.{key}", "unknown field")
        d = dict(d)
        if "hidden" in d:
            if not isinstance(d["hidden"], (list, tuple)):
                raise ConfigError(f"{path}.hidden", "must be a list of layer widths")
            d["hidden"] = tuple(d["hidden"])
        cfg = cls(**d)
        cfg.validate(path)
        return cfg

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        out["temperature"] = self.resolved_temperature()
        return out

    def resolved_temperature(self) -> float:
        if self.temperature is not None:
            return float(self.temperature)
        return DWPP_TEMPERATURE if self.method == "dwpp" else DWOPP_TEMPERATURE

    @property
    def label(self) -> str:
        if self.method == "dkd":
            return f"dkd(alpha={self.alpha:g},beta={self.beta:g})"
        return self.method

    def validate(self, path: str = "train") -> None:
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(f"{path}.{name}", msg)

        need(self.method in METHODS, "method", f"must be one of {', '.join(METHODS)}; got {self.method!r}")
        for name in ("lam", "margin", "weight_decay", "triplet_margin"):
            v = getattr(self, name)
            need(isinstance(v, (int, float)) and not isinstance(v, bool) and v >= 0, name, "must be a number >= 0")
        need(isinstance(self.lr, (int, float)) and self.lr > 0, "lr", "must be > 0")
        if self.temperature is not None:
            need(isinstance(self.temperature, (int, float)) and self.temperature > 0, "temperature", "must be > 0")
        for name in ("N", "n_s", "n_q", "episodes_per_task", "eval_every", "emb_dim"):
            v = getattr(self, name)
            need(isinstance(v, int) and not isinstance(v, bool) and v >= 1, name, "must be an integer >= 1")
        need(isinstance(self.seed, int), "seed", "must be an integer")
        need(self.N >= 2, "N", "episodes need at least 2 classes")
        need(all(isinstance(h, int) and h >= 1 for h in self.hidden), "hidden", "widths must be positive integers")
        if self.method in ("dwopp", "dkd"):
            need(self.N >= 3, "N", f"{self.method} excludes the query class and needs N >= 3")
        if self.method == "dkd":
            need(self.alpha is not None and self.beta is not None, "alpha", "dkd needs alpha and beta")
            need(self.alpha >= 0 and self.beta >= 0, "alpha", "alpha and beta must be >= 0")
            need(abs(self.alpha + self.beta - 1.0) <= 1e-9, "beta", "alpha + beta must equal 1")
        elif self.alpha is not None or self.beta is not None:
            raise ConfigError(f"{path}.alpha", f"alpha/beta only apply to method dkd, not {self.method}")


@dataclass
class ContinualState:
    student: ModelParams
    adam: AdamState
    rng: np.random.Generator
    teacher: ModelParams | None = None
    task: int = 0  # number of tasks trained so far
    seen_classes: set = field(default_factory=set)
    reports: list[SessionReport] = field(default_factory=list)
    loss_trace: list[float] = field(default_factory=list)


def init_state(config: TrainConfig, in_dim: int) -> ContinualState:
    init_seq, episode_seq = np.random.SeedSequence(config.seed).spawn(2)
    widths = [in_dim, *config.hidden, config.emb_dim]
    return ContinualState(
        student=init_params(widths, init_seq),
        adam=_fresh_adam(config),
        rng=np.random.default_rng(episode_seq),
    )


def _fresh_adam(config: TrainConfig) -> AdamState:
    return AdamState(lr=config.lr, weight_decay=config.weight_decay)


def effective_way(task: LabeledDataset, config: TrainConfig) -> int:
    _, counts = np.unique(task.labels, return_counts=True)
    eligible = int((counts >= config.n_s + config.n_q).sum())
    if eligible < 2:
        raise ValueError(f"task has only {eligible} classes with >= {config.n_s + config.n_q} samples")
    if eligible < config.N:
        log.warning("N=%d clamped to the task's %d eligible classes", config.N, eligible)
    return min(config.N, eligible)


def _distill_term(config: TrainConfig, views: EpisodeViews):
    T = config.resolved_temperature()
    if config.method == "dwpp":
        return dwpp_term(views, T)
    if config.method == "dwopp":
        return dwopp_term(views, T)
    return decoupled_kd_term(views, config.alpha, config.beta, T)


def train_task(state: ContinualState, task: LabeledDataset, config: TrainConfig) -> ContinualState:
    classes = set(task.classes.tolist())
    reused = classes & state.seen_classes
    if reused:
        raise ValueError(f"task {state.task + 1} contains classes seen earlier: {sorted(reused)[:5]}")
    N = effective_way(task, config)
    teacher = state.teacher
    distill = config.method in DISTILL_METHODS and teacher is not None and config.lam > 0
    if distill and config.method in ("dwopp", "dkd") and N < 3:
        raise ValueError(f"{config.method} needs N >= 3 but task {state.task + 1} allows only {N}")
    if config.reset_optimizer:
        state.adam = _fresh_adam(config)
    teacher_sum = teacher.checksum() if teacher is not None else None

    head = head_adam = None
    if config.method == "bot_ft":
        head = ClassifierHead.init(task.classes, config.emb_dim, state.rng)
        head_adam = _fresh_adam(config)

    for _ in range(config.episodes_per_task):
        ep = sample_episode(task, N, config.n_s, config.n_q, state.rng)
        tape = Tape()
        layers = param_nodes(tape, state.student)
        if head is not None:
            x = np.concatenate([ep.support_x, ep.query_x])
            y = ep.classes[np.concatenate([ep.support_y, ep.query_y])]
            hw, hb = tape.variable(head.weight), tape.variable(head.bias[None, :])
            emb = embed_on_tape(tape, layers, x)
            loss = softmax_triplet_loss(emb, y, head, config.triplet_margin, head_nodes=(hw, hb))
        else:
            s_sup = embed_on_tape(tape, layers, ep.support_x)
            s_qry = embed_on_tape(tape, layers, ep.query_x)
            loss = dmml_episode_loss(s_qry, s_sup, ep.query_y, ep.support_y, config.margin)
            if distill:
                views = EpisodeViews(
                    tape,
                    tape.constant(embed(teacher, ep.support_x)),
                    tape.constant(embed(teacher, ep.query_x)),
                    s_sup,
                    s_qry,
                    ep.support_y,
                    ep.query_y,
                    N,
                )
                loss = loss + config.lam * _distill_term(config, views)
        value = loss.item()
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite loss at task {state.task + 1}")
        state.loss_trace.append(value)
        grads = tape.backward(loss)
        adam_step(state.student, [(grads[w], grads[b]) for w, b in layers], state.adam)
        if head is not None:
            adam_update([head.weight, head.bias], [grads[hw], grads[hb].reshape(-1)], head_adam)

    if teacher is not None and teacher.checksum() != teacher_sum:
        raise RuntimeError("teacher parameters changed during a task")
    state.teacher = state.student.snapshot()
    state.seen_classes |= classes
    state.task += 1
    return state


def run_stream(stream: TaskStream, config: TrainConfig, on_session=None):
    """Train on every task in order, evaluating on the unseen split after each.

    Returns ``(reports, final_params)``.
    """
    config.validate()
    state = init_state(config, stream.tasks[0].dim)
    last = stream.num_tasks
    for t, task in enumerate(stream.tasks, start=1):
        train_task(state, task, config)
        if t == last or t % config.eval_every == 0:
            report = evaluate(state.student, stream.query, stream.gallery, task=t)
            state.reports.append(report)
            log.info("%s task %d: mAP %.4f rank1 %.4f", config.label, t, report.mAP, report.rank1)
            if on_session is not None:
                on_session(report)
    return state.reports, state.student


