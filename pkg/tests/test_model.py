import numpy as np
import pytest

from ppgnet import autograd as ag
from ppgnet.model import BLOCK_NAMES, ConfigError, ModelConfig, build_model, expected_parameter_counts

# closed-form count under the single-bias LSTM convention, frozen at first build
DEFAULT_TOTAL = 400589
DEFAULT_COUNTS = {
    "Inception": 636,
    "SeqBlock1": 20576,
    "SeqBlock2": 61536,
    "LSTM1": 117440,
    "LSTM2": 200320,
    "Linear": 81,
}


@pytest.fixture(scope="module")
def model():
    return build_model()


def test_shape_ledger(model):
    assert model.shape_ledger() == {
        "inception": (16, 125),
        "SeqBlock1": (32, 31),
        "SeqBlock2": (32, 7),
        "flatten": (8, 224),
        "LSTM1": (8, 160),
        "LSTM2_input": (8, 384),
        "head_input": (80,),
        "output": (),
    }


def test_parameter_counts(model):
    counts = model.count_parameters()
    for block, n in DEFAULT_COUNTS.items():
        assert counts[block] == n
    assert counts["total"] == DEFAULT_TOTAL == sum(DEFAULT_COUNTS.values())
    assert counts["Linear"] == 80 * 1 + 1
    counts.pop("trainable")
    assert expected_parameter_counts(ModelConfig()) == counts


def test_count_is_pure_function_of_config():
    cfg = ModelConfig(lstm1_hidden=40, lstm2_input=224 + 80, seed=5)
    counts = build_model(cfg).count_parameters()
    assert counts.pop("trainable") == counts["total"]
    assert counts == expected_parameter_counts(cfg)
    assert build_model(ModelConfig(seed=9)).count_parameters()["total"] == DEFAULT_TOTAL


def test_freeze_accounting():
    m = build_model()
    m.freeze_except({"LSTM2", "Linear"})
    c = m.count_parameters()
    assert c["trainable"] == DEFAULT_COUNTS["LSTM2"] + DEFAULT_COUNTS["Linear"]
    with pytest.raises(KeyError):
        m.freeze_except({"LSTM3"})


def test_initialization_bounds():
    m = build_model(ModelConfig(seed=3))
    w = m.blocks["SeqBlock1"]["conv.weight"].data
    bound = 1 / np.sqrt(16 * 40)
    assert np.all(np.abs(w) <= bound) and np.abs(w).max() > 0.9 * bound
    lstm = m.blocks["LSTM2"]["l0.w_ih"].data
    assert np.all(np.abs(lstm) <= 1 / np.sqrt(384))


def test_config_invariants():
    with pytest.raises(ConfigError):
        build_model(ModelConfig(inception_channels=(3, 3, 3, 3, 3)))  # sums to 15
    with pytest.raises(ConfigError):
        build_model(ModelConfig(lstm2_input=304))


def test_zero_parameters_give_zero_output(rng):
    m = build_model()
    for _, _, p in m.named_parameters():
        p.data[:] = 0.0
    out = m.predict(rng.standard_normal((3, 1000)))
    assert np.all(out == 0.0)


def test_eval_forward_deterministic_and_batched(model, rng):
    x = rng.standard_normal((5, 1000))
    a = model.predict(x)
    b = model.predict(x)
    assert np.array_equal(a, b)
    looped = np.array([model.predict(x[i:i + 1])[0] for i in range(5)])
    np.testing.assert_allclose(a, looped, rtol=0, atol=1e-12)


def test_forward_rejects_wrong_length(model):
    with pytest.raises(ValueError):
        model.predict(np.zeros((1, 999)))


def _snapshot(m):
    return {(b, n): a.copy() for b, n, a in m.state_arrays()}


def test_frozen_blocks_bit_identical_after_sgd(rng):
    m = build_model(ModelConfig(seed=2))
    m.freeze_except({"LSTM2", "Linear"})
    before = _snapshot(m)
    x, y = rng.standard_normal((4, 1000)), rng.uniform(60, 120, 4)
    params = m.trainable_parameters()
    for _ in range(100):
        m.zero_grad()
        ag.mae_loss(m.forward(x, training=True, rng=rng), y).backward()
        ag.sgd_step(params, 0.02)
    after = _snapshot(m)
    changed = {b for (b, n), v in after.items() if not np.array_equal(v, before[(b, n)])}
    assert changed == {"LSTM2", "Linear"}


def test_freeze_all_blocks_is_no_freezing(rng):
    x, y = rng.standard_normal((3, 1000)), rng.uniform(60, 120, 3)
    runs = []
    for freeze in (None, set(BLOCK_NAMES)):
        m = build_model(ModelConfig(seed=4))
        if freeze is not None:
            m.freeze_except(freeze)
        m.zero_grad()
        ag.mae_loss(m.forward(x, training=True, rng=np.random.default_rng(0)), y).backward()
        ag.sgd_step(m.trainable_parameters(), 0.02)
        runs.append(_snapshot(m))
    assert all(np.array_equal(runs[0][k], runs[1][k]) for k in runs[0])


def test_freeze_nothing_changes_nothing(rng):
    m = build_model(ModelConfig(seed=6))
    m.freeze_except(set())
    before = _snapshot(m)
    x, y = rng.standard_normal((3, 1000)), rng.uniform(60, 120, 3)
    losses = []
    for _ in range(3):
        m.zero_grad()
        loss = ag.mae_loss(m.forward(x, training=True, rng=np.random.default_rng(1)), y)
        if loss.requires_grad:
            loss.backward()
        ag.sgd_step(m.trainable_parameters(), 0.02)
        losses.append(loss.item())
    assert losses[0] == losses[1] == losses[2]
    after = _snapshot(m)
    assert all(np.array_equal(after[k], before[k]) for k in before)


def test_copy_is_independent(model):
    twin = model.copy()
    twin.blocks["Linear"]["bias"].data[:] += 1.0
    assert not np.array_equal(twin.blocks["Linear"]["bias"].data, model.blocks["Linear"]["bias"].data)
