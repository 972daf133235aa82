import numpy as np
import pytest

from ppgnet.dataio import save_weights
from ppgnet.model import ModelConfig, build_model
from ppgnet.trainer import (
    TrainConfig,
    history_csv,
    kfold_folds,
    loso_folds,
    make_plan,
    parse_scheme,
    run_condition,
    sparse_subset,
    train,
)


def _snapshot(m):
    return {(b, n): a.copy() for b, n, a in m.state_arrays()}


@pytest.fixture(scope="module")
def tiny(small_dataset):
    return small_dataset.select(np.arange(0, len(small_dataset), 5))


def test_zero_learning_rate_keeps_weights(tiny):
    # fresh dropout masks or reshuffled batchnorm batches would move the loss without any update
    m = build_model(ModelConfig(seed=1, dropout=0.0))
    before = _snapshot(m)
    _, hist = train(m, tiny, TrainConfig(learning_rate=0.0, epochs=3, batch_size=4, shuffle=False))
    assert len(hist) == 3 and hist[0] == hist[1] == hist[2]
    after = _snapshot(m)
    changed = [k for k in before if not np.array_equal(before[k], after[k])]
    # batchnorm running statistics are state, not weights; they still track batches
    assert all(b == "BatchNormStats" for b, _ in changed)


def test_same_seed_same_history(tiny):
    runs = [train(build_model(ModelConfig(seed=2)), tiny, TrainConfig(epochs=2, batch_size=4, seed=9))[1]
            for _ in range(2)]
    assert runs[0] == runs[1]
    other = train(build_model(ModelConfig(seed=2)), tiny, TrainConfig(epochs=2, batch_size=4, seed=10))[1]
    assert other != runs[0]


def test_loss_decreases_on_learnable_data(tiny):
    _, hist = train(build_model(ModelConfig(seed=0)), tiny, TrainConfig(epochs=20, batch_size=11, seed=0))
    assert np.mean(hist[-10:]) < np.mean(hist[:10])


def test_config_validation(tiny):
    for bad in (TrainConfig(learning_rate=-1), TrainConfig(batch_size=0), TrainConfig(epochs=-1)):
        with pytest.raises(ValueError):
            bad.validate()
    with pytest.raises(ValueError):
        train(build_model(), tiny.select([]), TrainConfig(epochs=1))


def test_history_csv():
    assert history_csv([2.5, 1.0]) == "epoch,mean_loss\n1,2.5\n2,1.0\n"


def _check_partition(plan, dataset):
    test_counts = {}
    for fold in plan:
        tr, te = fold.split(dataset)
        assert len(tr) + len(te) == len(dataset)
        assert not set(tr.subject_ids) & set(te.subject_ids)
        for s in te.subject_ids:
            test_counts[s] = test_counts.get(s, 0) + 1
    assert set(test_counts) == set(dataset.subjects)
    assert sum(test_counts.values()) == len(dataset)


def test_loso_plan(small_dataset):
    plan = loso_folds(small_dataset)
    assert plan.scheme == "LOSO" and len(plan) == 3
    _check_partition(plan, small_dataset)
    with pytest.raises(ValueError):
        loso_folds(small_dataset.for_subjects(small_dataset.subjects[:1]))


def test_kfold_plan_subject_disjoint(small_dataset):
    plan = kfold_folds(small_dataset, k=3, seed=4)
    assert plan.scheme == "KFOLD(3)"
    _check_partition(plan, small_dataset)
    again = kfold_folds(small_dataset, k=3, seed=4)
    assert [f.test_subjects for f in plan] == [f.test_subjects for f in again]
    with pytest.raises(ValueError):
        kfold_folds(small_dataset, k=4)


def test_window_level_plan(small_dataset):
    plan = kfold_folds(small_dataset, k=5, by="window")
    assert plan.scheme == "KFOLD(5)-window"
    tests = np.concatenate([f.test_index for f in plan])
    assert np.array_equal(np.sort(tests), np.arange(len(small_dataset)))


def test_scheme_parsing(small_dataset):
    assert parse_scheme("LOSO") == ("loso", None)
    assert parse_scheme("kfold:3") == ("kfold", 3)
    assert len(make_plan(small_dataset, "kfold:3")) == 3
    with pytest.raises(ValueError):
        parse_scheme("bootstrap")


def test_sparse_subset_is_stratified_partition(small_dataset):
    sub, rest = sparse_subset(small_dataset, 0.15, seed=1)
    assert len(sub) + len(rest) == len(small_dataset)
    keys = lambda d: set(zip(d.subject_ids.tolist(), d.window_index.tolist()))  # noqa: E731
    assert not keys(sub) & keys(rest)
    for s in small_dataset.subjects:
        assert np.sum(sub.subject_ids == s) == round(0.15 * 17)
    with pytest.raises(ValueError):
        sparse_subset(small_dataset, 1.0)


@pytest.fixture(scope="module")
def source_weights(tmp_path_factory, small_dataset):
    path = tmp_path_factory.mktemp("src") / "source.weights"
    m = build_model(ModelConfig(seed=3))
    train(m, small_dataset.select(np.arange(0, len(small_dataset), 3)), TrainConfig(epochs=1, batch_size=17))
    save_weights(m, path)
    return path


def test_condition_two_is_evaluation_only(small_dataset, source_weights):
    res = run_condition(2, small_dataset, source_weights=source_weights)
    assert res.report.meta["epochs"] == 0 and res.report.meta["optimizer_steps"] == 0
    assert len(res.report) == len(small_dataset)


def test_condition_three_freezes_feature_blocks(tiny, source_weights):
    from ppgnet.dataio import read_weights

    _, stored = read_weights(source_weights)
    stored = {(b, n): a for b, n, a in stored}
    res = run_condition(3, tiny, source_weights=source_weights, k=3,
                        train_config=TrainConfig(epochs=1, batch_size=8))
    meta = res.report.meta
    counts = meta["parameter_counts"]
    assert meta["trainable_params"] == counts["LSTM2"] + counts["Linear"]
    for m in res.models:
        for (b, n), a in _snapshot(m).items():
            if b in ("LSTM2", "Linear"):
                continue
            assert np.array_equal(a, stored[(b, n)]), (b, n)


def test_condition_four_trains_on_subset_only(small_dataset, source_weights):
    res = run_condition(4, small_dataset, source_weights=source_weights,
                        train_config=TrainConfig(epochs=1, batch_size=8), split_seed=2)
    meta = res.report.meta
    sub, rest = sparse_subset(small_dataset, 0.15, seed=2)
    assert meta["n_train_windows"] == len(sub) and meta["n_eval_windows"] == len(rest) == len(res.report)
    assert sorted(map(tuple, meta["train_windows"])) == sorted(zip(sub.subject_ids, sub.window_index.tolist()))


def test_condition_needs_a_source(small_dataset):
    with pytest.raises(ValueError):
        run_condition(3, small_dataset)
    with pytest.raises(ValueError):
        run_condition(5, small_dataset)
