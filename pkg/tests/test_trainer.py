import numpy as np
import pytest

from cmml.data import SyntheticSpec, gen_synthetic
from cmml.episodes import LabeledDataset, TaskStream
from cmml.evaluation import session_summary
from cmml.trainer import ConfigError, TrainConfig, init_state, run_stream, train_task

SMALL = dict(episodes_per_task=40, N=6, hidden=(16,), emb_dim=8)


def small_stream(num_tasks=2, drift=0.3, seed=0):
    spec = SyntheticSpec(num_classes=40, samples_per_class=8, input_dim=12, noise=0.3, drift=drift, seed=seed)
    return gen_synthetic(spec, num_tasks, 10)


def test_first_task_has_no_distillation_term():
    stream = small_stream()
    traces = {}
    for method in ("dmml_ft", "dwpp", "dwopp"):
        state = init_state(TrainConfig(method=method, **SMALL), 12)
        train_task(state, stream.tasks[0], TrainConfig(method=method, **SMALL))
        traces[method] = state.loss_trace
    assert traces["dwpp"] == traces["dmml_ft"] == traces["dwopp"]


def test_zero_weight_distillation_matches_fine_tuning():
    stream = small_stream()
    _, ft = run_stream(stream, TrainConfig(method="dmml_ft", **SMALL))
    _, kd = run_stream(stream, TrainConfig(method="dwopp", lam=0.0, **SMALL))
    for a, b in zip(ft.weights + ft.biases, kd.weights + kd.biases):
        assert np.abs(a - b).max() <= 1e-12


def test_distillation_changes_the_second_task():
    stream = small_stream()
    _, ft = run_stream(stream, TrainConfig(method="dmml_ft", **SMALL))
    _, kd = run_stream(stream, TrainConfig(method="dwopp", **SMALL))
    assert ft.checksum() != kd.checksum()


def test_single_task_stream():
    reports, _ = run_stream(small_stream(num_tasks=1), TrainConfig(**SMALL))
    assert len(reports) == 1
    s = session_summary(reports)
    assert s["mAP"]["last"] == s["mAP"]["avg"]


def test_seeded_runs_are_identical():
    stream = small_stream(num_tasks=3)
    a, pa = run_stream(stream, TrainConfig(method="dkd", alpha=0.3, beta=0.7, **SMALL))
    b, pb = run_stream(stream, TrainConfig(method="dkd", alpha=0.3, beta=0.7, **SMALL))
    assert [(r.mAP, r.rank1) for r in a] == [(r.mAP, r.rank1) for r in b]
    assert pa.checksum() == pb.checksum()
    c, _ = run_stream(stream, TrainConfig(method="dkd", alpha=0.3, beta=0.7, seed=1, **SMALL))
    assert [r.mAP for r in c] != [r.mAP for r in a]


def test_avg_is_mean_of_sessions():
    reports, _ = run_stream(small_stream(num_tasks=3), TrainConfig(**SMALL))
    values = [r.mAP for r in reports]
    assert [r.task for r in reports] == [1, 2, 3]
    assert abs(session_summary(reports)["mAP"]["avg"] - sum(values) / 3) < 1e-12


def test_eval_every_skips_sessions_but_keeps_the_last():
    reports, _ = run_stream(small_stream(num_tasks=3), TrainConfig(eval_every=2, **SMALL))
    assert [r.task for r in reports] == [2, 3]


def test_teacher_is_frozen_snapshot_of_previous_task():
    stream = small_stream(num_tasks=3)
    cfg = TrainConfig(**SMALL)
    state = init_state(cfg, 12)
    train_task(state, stream.tasks[0], cfg)
    teacher = state.teacher
    before = teacher.checksum()
    assert teacher.frozen and before == state.student.checksum()
    train_task(state, stream.tasks[1], cfg)
    assert teacher.checksum() == before
    assert state.teacher is not teacher and state.teacher.checksum() == state.student.checksum()
    assert all(np.isfinite(state.loss_trace))


def test_bot_baseline_trains():
    stream = small_stream()
    reports, _ = run_stream(stream, TrainConfig(method="bot_ft", **SMALL))
    assert len(reports) == 2 and all(0.0 < r.mAP <= 1.0 for r in reports)


def test_reused_classes_rejected():
    stream = small_stream()
    cfg = TrainConfig(**SMALL)
    state = init_state(cfg, 12)
    train_task(state, stream.tasks[0], cfg)
    with pytest.raises(ValueError, match="seen earlier"):
        train_task(state, stream.tasks[0], cfg)


def test_no_shift_stability():
    # task 2 drawn from the same distribution as task 1
    spec = SyntheticSpec(num_classes=60, samples_per_class=10, input_dim=16, noise=0.3, drift=0.0, seed=5)
    stream = gen_synthetic(spec, 2, 20)
    drops = []
    for seed in range(3):
        reports, _ = run_stream(stream, TrainConfig(method="dwopp", episodes_per_task=200, N=10, seed=seed))
        drops.append(reports[0].mAP - reports[1].mAP)
    assert max(drops) <= 0.02, drops


@pytest.mark.parametrize(
    "fields, path",
    [
        ({"method": "dwopp", "N": 2}, "train.N"),
        ({"method": "dkd", "alpha": 0.5, "beta": 0.6}, "train.beta"),
        ({"method": "dkd"}, "train.alpha"),
        ({"method": "dwpp", "alpha": 0.5, "beta": 0.5}, "train.alpha"),
        ({"method": "sgd"}, "train.method"),
        ({"lr": -1.0}, "train.lr"),
        ({"episodes_per_task": 0}, "train.episodes_per_task"),
        ({"hidden": 64}, "train.hidden"),
        ({"bogus": 1}, "train.bogus"),
    ],
)
def test_config_errors_name_the_field(fields, path):
    with pytest.raises(ConfigError) as err:
        TrainConfig.from_dict(fields)
    assert err.value.path == path


def test_config_round_trip_resolves_temperature():
    cfg = TrainConfig.from_dict({"method": "dwpp", "hidden": [8, 8]})
    d = cfg.to_dict()
    assert d["temperature"] == 10.0 and d["hidden"] == [8, 8]
    assert TrainConfig.from_dict({**d, "temperature": None}).resolved_temperature() == 10.0
    assert TrainConfig().resolved_temperature() == 1.0
    assert TrainConfig(method="dkd", alpha=0.25, beta=0.75).label == "dkd(alpha=0.25,beta=0.75)"


def test_tiny_tasks_clamp_the_way():
    rng = np.random.default_rng(0)

    def task(classes):
        labels = np.repeat(classes, 6)
        return LabeledDataset(rng.normal(size=(len(labels), 4)), labels)

    stream = TaskStream([task([0, 1, 2]), task([3, 4, 5])], task([6, 7]).subset([0, 6]), task([6, 7]))
    reports, _ = run_stream(stream, TrainConfig(episodes_per_task=5, hidden=(8,), emb_dim=4))
    assert len(reports) == 2
