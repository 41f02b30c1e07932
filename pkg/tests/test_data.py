import numpy as np
import pytest

from cmml.data import (
    LATENT_DIM,
    DataFormatError,
    SyntheticSpec,
    gen_synthetic,
    load_dataset,
    load_stream,
    task_factor_dims,
    write_dataset,
    write_stream,
)
from cmml.episodes import LabeledDataset
from cmml.evaluation import evaluate, pairwise_distances, rank_metrics
from cmml.trainer import TrainConfig, init_state, train_task


def small_spec(**kw):
    base = dict(num_classes=40, samples_per_class=6, input_dim=12, seed=3)
    base.update(kw)
    return SyntheticSpec(**base)


def test_same_seed_is_bitwise_identical():
    a, b = gen_synthetic(small_spec(), 3, 10), gen_synthetic(small_spec(), 3, 10)
    for x, y in zip([*a.tasks, a.query, a.gallery], [*b.tasks, b.query, b.gallery]):
        assert x.features.tobytes() == y.features.tobytes()
        np.testing.assert_array_equal(x.labels, y.labels)
        np.testing.assert_array_equal(x.ids, y.ids)
    c = gen_synthetic(small_spec(seed=4), 3, 10)
    assert c.tasks[0].features.tobytes() != a.tasks[0].features.tobytes()


@pytest.mark.parametrize("seed", range(10))
def test_streams_are_class_disjoint(seed):
    stream = gen_synthetic(small_spec(seed=seed), 4, 8)
    parts = stream.task_classes() + [stream.test_classes()]
    assert sum(len(p) for p in parts) == len(set().union(*parts)) == 40
    assert len(stream.query) == 8
    assert set(stream.query.classes) == set(stream.gallery.classes)
    # ids are unique across the whole stream
    ids = np.concatenate([d.ids for d in (*stream.tasks, stream.query, stream.gallery)])
    assert len(np.unique(ids)) == len(ids)


def test_infeasible_counts_rejected():
    with pytest.raises(ValueError, match="need 35"):
        gen_synthetic(small_spec(num_classes=30), 5, 20)
    with pytest.raises(ValueError, match="noise"):
        gen_synthetic(small_spec(noise=0.0), 2, 5)


def _centroid_oracle_map(stream):
    """mAP when ranking gallery items by raw-input distance."""
    d = pairwise_distances(stream.query.features, stream.gallery.features)
    return rank_metrics(d, stream.query.labels, stream.gallery.labels)


def test_noiseless_undrifted_stream_is_separable():
    stream = gen_synthetic(small_spec(noise=1e-4, drift=0.0), 3, 10)
    mAP, rank1, _ = _centroid_oracle_map(stream)
    assert mAP > 0.99 and rank1 == 1.0


def test_overwhelming_noise_is_chance_level():
    # 10 test identities, 1 query each: chance Rank-1 is about 1/10 when
    # noise is 100x the unit-sphere centre spread
    rank1s = []
    for seed in range(20):
        stream = gen_synthetic(small_spec(noise=100.0, seed=seed), 3, 10)
        rank1s.append(_centroid_oracle_map(stream)[1])
    assert abs(np.mean(rank1s) - 0.1) < 0.06


def test_drift_makes_the_first_model_forget():
    # a model trained on the first task is scored on test identities that sit
    # half the stream's total rotation away; more drift, lower mAP.  Overlap
    # between rotated subspaces is monotone only up to a quarter turn, so the
    # test angle 2 * drift stays below pi / 2
    means = []
    for drift in (0.0, 0.3, 0.6):
        scores = []
        for seed in range(5):
            spec = SyntheticSpec(
                num_classes=60, samples_per_class=10, noise=0.3, drift=drift, seed=seed, task_factors=None
            )
            stream = gen_synthetic(spec, 5, 20)
            cfg = TrainConfig(method="dmml_ft", episodes_per_task=150, N=8, seed=seed)
            state = init_state(cfg, spec.input_dim)
            train_task(state, stream.tasks[0], cfg)
            scores.append(evaluate(state.student, stream.query, stream.gallery).mAP)
        means.append(np.mean(scores))
    assert means[0] > means[1] > means[2], means


def _rank(m, tol=1e-6):
    return int((np.linalg.svd(m, compute_uv=False) > tol).sum())


def test_task_identities_differ_only_along_their_factors():
    # without input noise: class means of one task span task_factors latent
    # directions, and the samples of one class spread over the other factors
    base = dict(noise=1e-12, drift=0.0, task_factors=3, samples_per_class=12, num_classes=60)
    still = gen_synthetic(small_spec(nuisance=0.0, **base), 2, 10)
    moving = gen_synthetic(small_spec(nuisance=1.0, **base), 2, 10)
    for task, spread in zip(still.tasks, moving.tasks):
        means = np.array([task.features[task.labels == c].mean(axis=0) for c in task.classes])
        assert _rank(means) == 3
        one = spread.features[spread.labels == spread.classes[0]]
        assert _rank(one - one.mean(axis=0)) == LATENT_DIM - 3
    test = np.concatenate([still.query.features, still.gallery.features])
    assert _rank(test) == LATENT_DIM


def test_all_factor_tasks_have_no_within_class_spread():
    spec = small_spec(noise=1e-12, task_factors=None)
    task = gen_synthetic(spec, 2, 10).tasks[0]
    one = task.features[task.labels == task.classes[0]]
    assert np.abs(one - one.mean(axis=0)).max() < 1e-10


def test_factor_blocks_cycle_through_the_latent_space():
    spec = SyntheticSpec(task_factors=3)
    assert [task_factor_dims(spec, k).tolist() for k in range(3)] == [[0, 1, 2], [3, 4, 5], [6, 7, 0]]
    assert task_factor_dims(SyntheticSpec(task_factors=None), 2).tolist() == list(range(8))
    with pytest.raises(ValueError, match="task_factors"):
        gen_synthetic(SyntheticSpec(task_factors=9))
    with pytest.raises(ValueError, match="nuisance"):
        gen_synthetic(SyntheticSpec(nuisance=-1.0))


def test_handwritten_file_round_trip(tmp_path):
    path = tmp_path / "two.csv"
    text = "id,label,task,f0,f1\n0,3,0,0.5,-1.25\n1,4,1,1e-05,2.0\n"
    path.write_bytes(text.encode())
    ds = load_dataset(path)
    np.testing.assert_array_equal(ds.features, [[0.5, -1.25], [1e-05, 2.0]])
    assert ds.labels.tolist() == [3, 4] and ds.groups.tolist() == [0, 1] and ds.ids.tolist() == [0, 1]
    out = tmp_path / "again.csv"
    write_dataset(ds, out)
    assert out.read_bytes() == text.encode()


def test_write_then_load_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    ds = LabeledDataset(rng.normal(size=(7, 3)) * 1e3, rng.integers(0, 5, 7), rng.integers(0, 2, 7), np.arange(7))
    write_dataset(ds, tmp_path / "x.csv")
    back = load_dataset(tmp_path / "x.csv")
    assert back.features.tobytes() == ds.features.tobytes()
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert b"\r" not in (tmp_path / "x.csv").read_bytes()


def test_stream_files_round_trip(tmp_path):
    stream = gen_synthetic(small_spec(), 3, 10)
    paths = write_stream(stream, tmp_path)
    back = load_stream(paths["train"], paths["query"], paths["gallery"])
    assert back.num_tasks == 3
    for a, b in zip(stream.tasks, back.tasks):
        assert a.features.tobytes() == b.features.tobytes()


@pytest.mark.parametrize(
    "body, pattern",
    [
        ("0,1,0,0.5,abc\n", r"line 2, column 'f1': not a number"),
        ("0,1,0,0.5\n", r"line 2 has 4 fields"),
        ("0,-1,0,0.5,1\n", r"line 2, column 'label': must be nonnegative"),
        ("0,1,0,0.5,1\n1,x,0,0.5,1\n", r"line 3, column 'label': expected an integer"),
        ("0,1,0,nan,1\n", r"line 2, column 'f0': non-finite"),
    ],
)
def test_malformed_rows_name_line_and_column(tmp_path, body, pattern):
    path = tmp_path / "bad.csv"
    path.write_text("id,label,task,f0,f1\n" + body)
    with pytest.raises(DataFormatError, match=pattern):
        load_dataset(path)


def test_bad_header_rejected(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("label,id,task,f0\n1,0,0,0.5\n")
    with pytest.raises(DataFormatError, match="header"):
        load_dataset(path)
