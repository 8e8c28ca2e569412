import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grunlab.errors import ConfigError, ContractError, DataError
from grunlab.intervention import Gate, GrunModule, GrunStack, ReftParams
from grunlab.model import ModelConfig, build_model, make_batch, sequence_nll
from grunlab.nn.gradcheck import check_gradients
from grunlab.nn.tensor import Tensor, concat
from grunlab.unlearn import (
    UnlearnConfig,
    UnlearnData,
    assign_templates,
    gate_loss,
    gd_loss,
    idk_loss,
    last_prompt_states,
    npo_forget_term,
    npo_loss,
    random_direction,
    reference_logprobs,
    rmu_loss,
    train_unlearn,
    write_log,
)

CFG = ModelConfig(vocab_size=24, d_model=16, n_layers=4, n_heads=2, max_seq_len=16)
TARGET = [([3, 4, 5], [6, 7, 2]), ([3, 8, 5], [9, 10, 2])]
RETAIN = [([3, 11, 5], [12, 13, 2]), ([3, 14, 5], [15, 16, 2]), ([3, 17, 5], [18, 19, 2])]


@pytest.fixture
def model():
    return build_model(CFG, 0)


def uniform_model(vocab):
    m = build_model(ModelConfig(vocab_size=vocab, d_model=8, n_layers=2, n_heads=2, max_seq_len=16), 0)
    m["head.w"].data[:] = 0.0
    return m


def g(x):
    return Tensor(np.asarray(x, dtype=np.float64), dtype=np.float64)


# ------------------------------------------------------------------ config
@pytest.mark.parametrize("kwargs", [
    {"method": "sgd"}, {"mode": "lora"}, {"lam": -1.0}, {"beta": 0.0}, {"rmu_coeff": 0.0},
    {"rmu_alpha": -1.0}, {"early_stop_tau": 0.0}, {"epochs": 0}, {"gate": "cubic"},
])
def test_config_rejects_bad_values(kwargs):
    with pytest.raises(ConfigError):
        UnlearnConfig(**kwargs)


def test_default_threshold_is_twice_uniform_nll():
    assert UnlearnConfig().tau(100) == pytest.approx(2 * math.log(100))
    assert UnlearnConfig(early_stop_tau=3.0).tau(100) == 3.0


@pytest.mark.parametrize("method", ["ga", "gd", "npo", "idk", "rmu"])
@pytest.mark.parametrize("mode", ["grun", "reft_only", "grun_no_gate_loss", "vanilla"])
def test_every_combination_is_valid(method, mode):
    UnlearnConfig(method=method, mode=mode)


# ---------------------------------------------------------------------- gd
def test_gd_uniform_model_cancels():
    m = uniform_model(4)
    t = make_batch([([1, 2], [3, 0])])
    r = make_batch([([2, 1], [0, 3, 1])])
    assert float(gd_loss(m, {}, t, r, 1.0).data) == pytest.approx(0.0, abs=1e-6)


def test_gd_lambda_zero_is_gradient_ascent(model):
    t = make_batch(TARGET)
    expected = -np.mean([float(sequence_nll(model, p, a).data) for p, a in TARGET])
    assert float(gd_loss(model, {}, t, None, 0.0).data) == pytest.approx(expected, abs=1e-6)


def test_gd_matches_sequence_nll_composition(model):
    t, r = make_batch(TARGET), make_batch(RETAIN[:2])
    nll = lambda pairs: np.mean([float(sequence_nll(model, p, a).data) for p, a in pairs])
    expected = -nll(TARGET) + 0.5 * nll(RETAIN[:2])
    assert float(gd_loss(model, {}, t, r, 0.5).data) == pytest.approx(expected, abs=1e-6)


def test_gd_errors(model):
    with pytest.raises(ConfigError):
        gd_loss(model, {}, make_batch(TARGET), make_batch(RETAIN), -1.0)
    with pytest.raises(ContractError):
        gd_loss(model, {}, make_batch(TARGET), None, 1.0)


# --------------------------------------------------------------------- npo
def test_npo_at_reference_is_two_ln2_over_beta(model):
    t = make_batch(TARGET)
    ref = reference_logprobs(model, {}, t)
    for beta in (0.1, 1.0, 2.5):
        forget = float(npo_loss(model, {}, ref, t, None, 0.0, beta).data)
        assert forget == pytest.approx(2 / beta * math.log(2), abs=1e-5)


def test_npo_scalar_example():
    val = float(npo_forget_term(g([-math.log(2)]), [0.0], 1.0).data)
    assert val == pytest.approx(2 * math.log(1.5), abs=1e-5)
    assert val == pytest.approx(0.81093, abs=1e-5)


@given(st.floats(-5, 5), st.floats(0.01, 3), st.floats(0.05, 3))
def test_npo_monotone_in_policy_logprob(logp, delta, beta):
    lo = float(npo_forget_term(g([logp]), [0.0], beta).data)
    hi = float(npo_forget_term(g([logp + delta]), [0.0], beta).data)
    assert hi > lo


def test_npo_rejects_nonpositive_beta():
    with pytest.raises(ConfigError):
        npo_forget_term(g([0.0]), [0.0], 0.0)


def test_npo_identity_init_grun_at_step_zero(model):
    rng = np.random.default_rng(0)
    stack = GrunStack([{l: GrunModule.init(16, l, rng=rng) for l in (2, 4)}])
    t = make_batch(TARGET)
    ref = reference_logprobs(model, {}, t)
    forget = float(npo_loss(model, stack.hooks(), ref, t, None, 0.0, 0.1).data)
    assert forget == pytest.approx(20 * math.log(2), abs=1e-5)


# --------------------------------------------------------------------- idk
def test_idk_template_assignment():
    assert assign_templates(range(5), 3) == [0, 1, 2, 0, 1]
    assert assign_templates(range(4), 1) == [0, 0, 0, 0]
    with pytest.raises(ConfigError):
        assign_templates([0], 0)


def test_idk_matches_per_example_oracle(model):
    templates = [[20, 21, 2], [22, 2], [23, 20, 22, 2]]
    prompts = [[3, i, 5] for i in (4, 8, 11, 14, 17)]
    loss = float(idk_loss(model, {}, prompts, range(5), None, 0.0, templates).data)
    choice = [0, 1, 2, 0, 1]
    oracle = np.mean([float(sequence_nll(model, p, templates[c]).data) for p, c in zip(prompts, choice)])
    assert loss == pytest.approx(oracle, abs=1e-6)


def test_idk_forget_term_zero_when_template_certain():
    m = build_model(CFG, 0)
    m["ln_f.g"].data[:] = 0.0
    m["ln_f.b"].data[:] = 1.0
    m["head.w"].data[:] = 0.0
    m["head.w"].data[:, 2] = 100.0
    assert float(idk_loss(m, {}, [[3, 4], [5, 6]], [0, 1], None, 0.0, [[2]]).data) == pytest.approx(0, abs=1e-6)


# --------------------------------------------------------------------- rmu
def test_rmu_mse_hand_example():
    h = g([[1.0, 0.0]])
    aim = np.array([0.0, 1.0])
    assert float(((h - aim) ** 2).mean().data) == 1.0


def test_rmu_identity_init_retain_term_zero(model):
    rng = np.random.default_rng(1)
    stack = GrunStack([{l: GrunModule.init(16, l, rng=rng) for l in (2, 4)}])
    t, r = make_batch(TARGET), make_batch(RETAIN)
    u = random_direction(16, 0)
    frozen, _ = last_prompt_states(model, {}, r, 2)
    full = float(rmu_loss(model, stack.hooks(), frozen.data, t, r, 2, 10.0, 100.0, u).data)
    forget_only = float(rmu_loss(model, stack.hooks(), frozen.data, t, None, 2, 10.0, 100.0, u).data)
    assert full == pytest.approx(forget_only, abs=1e-6)
    # forget term is zero when the state already sits at coeff * u
    states, _ = last_prompt_states(model, {}, t, 2)
    aim = states.data[0]
    coeff = float(np.linalg.norm(aim))
    single = make_batch(TARGET[:1])
    assert float(rmu_loss(model, {}, None, single, None, 2, coeff, 1.0, aim / coeff).data) == pytest.approx(0, abs=1e-9)


def test_rmu_errors(model):
    t = make_batch(TARGET)
    with pytest.raises(ConfigError):
        rmu_loss(model, {}, None, t, None, 2, 0.0, 1.0, np.ones(16))
    with pytest.raises(ContractError):
        rmu_loss(model, {}, None, t, None, 9, 1.0, 1.0, np.ones(16))


# -------------------------------------------------------------------- gate
def test_gate_loss_examples():
    assert float(gate_loss(g([0.5]), [1]).data) == pytest.approx(math.log(2), abs=1e-6)
    assert float(gate_loss(g([0.5]), [0]).data) == pytest.approx(0.69315, abs=1e-5)
    assert float(gate_loss(g([0.9]), [1]).data) == pytest.approx(0.10536, abs=1e-5)
    assert float(gate_loss(g([1.0, 0.0]), [1, 0]).data) < 1e-6


def test_gate_loss_averages_over_layers():
    a, b = g([0.5, 0.5]), g([0.9, 0.1])
    expected = (math.log(2) + -math.log(0.9)) / 2
    assert float(gate_loss([a, b], [1, 0]).data) == pytest.approx(expected, abs=1e-6)


def test_gate_loss_errors():
    with pytest.raises(ContractError):
        gate_loss(g([0.5]), [2])
    with pytest.raises(ContractError):
        gate_loss(g([0.5, 0.5]), [1])
    with pytest.raises(ContractError):
        gate_loss([], [])


@given(st.lists(st.floats(0.001, 0.999), min_size=1, max_size=8), st.data())
def test_gate_loss_minimised_at_labels(vals, data):
    labels = data.draw(st.lists(st.sampled_from([0, 1]), min_size=len(vals), max_size=len(vals)))
    loss = float(gate_loss(g(vals), labels).data)
    assert loss > 0
    assert float(gate_loss(g(np.asarray(labels, dtype=float)), labels).data) < 1e-6 < loss


def test_gradcheck_total_objective():
    m64 = build_model(CFG, 0).copy(np.float64)
    rng = np.random.default_rng(2)
    point = [rng.normal(0, 0.3, size=(2, 16)), rng.normal(0, 0.3, size=(2, 16)), rng.normal(0, 0.3, size=2),
             rng.normal(0, 0.3, size=16), rng.normal(size=())]
    t, r = make_batch(TARGET[:1]), make_batch(RETAIN[:1])

    def objective(R, W, b, w, gb):
        mod = GrunModule(ReftParams(R, W, b), Gate("linear", {"w": w, "b": gb}), 3)
        hooks = {3: mod}
        trace = {}
        lu = gd_loss(m64, hooks, t, r, 1.0, trace)
        gates = [mod.gate_value(trace["target_out"].pre_hook[3]), mod.gate_value(trace["retain_out"].pre_hook[3])]
        return lu + gate_loss([concat(gates)], [1, 0])

    report = check_gradients(objective, point, max_entries=12)
    assert report.passed(1e-4), report.max_rel_error


# ----------------------------------------------------------------- trainer
def data():
    return UnlearnData(list(TARGET), list(RETAIN), [[20, 2]])


def test_overlapping_splits_rejected(model):
    with pytest.raises(DataError):
        train_unlearn(model, UnlearnData(TARGET, RETAIN + TARGET[:1]), UnlearnConfig(epochs=1))
    with pytest.raises(DataError):
        train_unlearn(model, UnlearnData([], RETAIN), UnlearnConfig(epochs=1))


def test_grun_step_zero_state(model):
    res = train_unlearn(model, data(), UnlearnConfig(epochs=1, batch_size=2))
    first = res.log[0]
    assert first["L_G"] == pytest.approx(math.log(2), abs=1e-6)
    assert first["gate_mean_target"] == pytest.approx(0.5) and first["gate_mean_retain"] == pytest.approx(0.5)
    base_nll = float(np.mean([float(sequence_nll(model, p, a).data) for p, a in TARGET]))
    assert first["target_nll"] == pytest.approx(base_nll, abs=1e-5)


@pytest.mark.parametrize("mode", ["grun", "reft_only", "grun_no_gate_loss"])
def test_grun_modes_freeze_base(model, mode):
    before = {k: v.data.copy() for k, v in model.named_parameters()}
    res = train_unlearn(model, data(), UnlearnConfig(mode=mode, epochs=5, batch_size=2, lr=5e-2))
    assert res.model is model
    for k, v in model.named_parameters():
        assert np.array_equal(before[k], v.data)
    assert len(res.stack) == 1
    m = res.stack.requests[0][4]
    if mode == "reft_only":
        assert m.gate_override == 1.0 and all(r["L_G"] is None for r in res.log)
    elif mode == "grun_no_gate_loss":
        assert all(r["L_G"] is None for r in res.log)
    else:
        assert all(r["L_G"] is not None for r in res.log)
    assert not np.array_equal(m.reft.W.data, m.reft.R.data)


def test_vanilla_changes_parameters(model):
    before = model.checksum()
    res = train_unlearn(model, data(), UnlearnConfig(mode="vanilla", epochs=2, batch_size=2, lr=1e-3))
    assert model.checksum() == before
    assert res.model.checksum() != before and res.stack is None
    assert res.log[0]["gate_mean_target"] is None


def test_early_stop_at_threshold(model):
    cfg = UnlearnConfig(mode="vanilla", method="gd", epochs=200, batch_size=2, lr=2e-2)
    res = train_unlearn(model, data(), cfg)
    tau = cfg.tau(CFG.vocab_size)
    assert res.stopped_early and res.log[-1]["stopped_early"]
    assert res.log[-1]["target_nll"] > tau
    assert all(r["target_nll"] <= tau and not r["stopped_early"] for r in res.log[:-1])
    assert res.steps == len(res.log) - 1


def test_non_gd_methods_run_fixed_epochs(model):
    for method in ("npo", "idk", "rmu", "ga"):
        res = train_unlearn(model, data(), UnlearnConfig(method=method, epochs=3, batch_size=1))
        assert res.steps == 3 * len(TARGET) and not res.stopped_early


def test_grun_gates_learn_labels(model):
    # an untrained model barely mixes earlier tokens into the last state, so the
    # two classes differ in their final prompt token here
    target = [([3, 4, 5], [6, 7, 2]), ([3, 8, 5], [9, 10, 2])]
    retain = [([3, 11, 20], [12, 13, 2]), ([3, 14, 20], [15, 16, 2]), ([3, 17, 20], [18, 19, 2])]
    res = train_unlearn(model, UnlearnData(target, retain), UnlearnConfig(method="npo", epochs=400,
                                                                          batch_size=2, lr=3e-2))
    last = res.log[-1]
    assert last["gate_mean_target"] > 0.9 and last["gate_mean_retain"] < 0.1


def test_sequential_request_keeps_earlier_frozen(model):
    first = train_unlearn(model, UnlearnData(TARGET[:1], RETAIN), UnlearnConfig(epochs=3, batch_size=1))
    snap = first.stack.state_dict()
    second = train_unlearn(model, UnlearnData(TARGET[1:], RETAIN), UnlearnConfig(epochs=3, batch_size=1, seed=1),
                           first.stack)
    assert len(second.stack) == 2
    after = second.stack.state_dict()
    assert all(np.array_equal(snap[k], after[k]) for k in snap)
    assert all(np.array_equal(v, first.stack.state_dict()[k]) for k, v in snap.items())


def test_training_log_format(tmp_path, model):
    res = train_unlearn(model, data(), UnlearnConfig(epochs=2, batch_size=2))
    write_log(tmp_path / "log.jsonl", res.log)
    rows = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert len(rows) == 2
    assert set(rows[0]) == {"step", "L_u", "L_G", "target_nll", "retain_nll", "gate_mean_target",
                            "gate_mean_retain", "stopped_early"}


def test_training_is_deterministic(model):
    cfg = UnlearnConfig(epochs=3, batch_size=1)
    a = train_unlearn(model, data(), cfg)
    b = train_unlearn(model, data(), cfg)
    assert a.log == b.log
