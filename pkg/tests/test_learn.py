import math

import numpy as np
import pytest

from oldpf import autodiff as ad
from oldpf import learn, pf, ssm
from oldpf.flows import FlowArch, FlowModel
from oldpf.learn import AdamState, OnlineConfig, WindowAccumulator
from oldpf.oracle import finite_diff_grad


def one_param_store(value):
    store = ad.ParameterStore()
    store.add("p", np.array(value, dtype=float))
    return store


# -- Adam --------------------------------------------------------------------

def test_adam_zero_gradient_leaves_parameters():
    store = one_param_store([1.0, -2.0])
    state = AdamState()
    assert learn.adam_step(store, state)
    np.testing.assert_array_equal(store.values["p"], [1.0, -2.0])


def test_adam_first_step_is_signed_lr():
    store = one_param_store([0.0, 0.0, 0.0])
    store.grads["p"] = np.array([3.0, -0.01, 250.0])
    learn.adam_step(store, AdamState(lr=0.005))
    np.testing.assert_allclose(store.values["p"], [-0.005, 0.005, -0.005], rtol=1e-5)
    assert not store.grads["p"].any()


def test_adam_matches_hand_recurrence():
    store = one_param_store([0.5])
    state = AdamState(lr=0.1)
    grads = [2.0, -1.0, 0.5]
    m = v = 0.0
    p = 0.5
    for k, g in enumerate(grads, start=1):
        store.grads["p"] = np.array([g])
        learn.adam_step(store, state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        p -= 0.1 * (m / (1 - 0.9 ** k)) / (math.sqrt(v / (1 - 0.999 ** k)) + 1e-8)
        assert store.values["p"][0] == pytest.approx(p, rel=1e-12)
    assert state.step == 3 and state.m["p"].shape == (1,)


def test_adam_repeated_gradient_shrinks_step():
    store = one_param_store([0.0])
    state = AdamState(lr=0.01)
    store.grads["p"] = np.array([1.0])
    learn.adam_step(store, state)
    first = -store.values["p"][0]
    store.grads["p"] = np.array([1.0])
    learn.adam_step(store, state)
    second = -store.values["p"][0] - first
    # the bias-corrected ratio of a repeated gradient is exactly 1 up to eps
    assert 0 < second <= first


def test_adam_skips_non_finite_gradient(caplog):
    store = one_param_store([1.0])
    state = AdamState()
    store.grads["p"] = np.array([np.nan])
    assert not learn.adam_step(store, state)
    assert store.values["p"][0] == 1.0 and state.step == 0 and state.skipped == 1
    assert "skipped" in caplog.text
    assert not store.grads["p"].any()


# -- window loss ---------------------------------------------------------------

def ensemble(log_w, log_w_prev):
    log_w = np.asarray(log_w, dtype=float)
    return pf.ParticleEnsemble(ad.Node(np.zeros(log_w.shape + (1,))), ad.Node(log_w),
                               ad.Node(np.asarray(log_w_prev, dtype=float)))


def test_unit_ratios_give_zero_loss():
    acc = WindowAccumulator(3)
    for _ in range(3):
        acc.push(ensemble(np.log([0.2, 0.3, 0.5]), np.log([0.2, 0.3, 0.5])))
    assert learn.window_loss(acc).value == pytest.approx(0.0, abs=1e-15)


def test_equal_increments_after_resampling():
    c, L, n = 0.37, 4, 5
    acc = WindowAccumulator(L)
    for _ in range(L):
        acc.push(ensemble(np.full(n, math.log(c)), np.zeros(n)))
    assert learn.window_loss(acc).value == pytest.approx(-L * math.log(c), rel=1e-14)


def test_loss_matches_direct_product():
    rng = np.random.default_rng(0)
    L, n = 5, 7
    acc = WindowAccumulator(L)
    product = 1.0
    for _ in range(L):
        lw, lp = rng.normal(size=n), rng.normal(size=n)
        acc.push(ensemble(lw, lp))
        product *= np.sum(np.exp(lw)) / np.sum(np.exp(lp))
    assert math.exp(-learn.window_loss(acc).value) == pytest.approx(product, rel=1e-10)


def test_window_loss_requires_full_window():
    acc = WindowAccumulator(3)
    acc.push(ensemble([0.0], [0.0]))
    with pytest.raises(ValueError, match="1 of 3"):
        learn.window_loss(acc)
    with pytest.raises(ValueError):
        WindowAccumulator(0)


def test_flush_clears_terms_and_counts_windows():
    acc = WindowAccumulator(1)
    acc.push(ensemble([0.0], [0.0]))
    assert acc.full
    acc.flush()
    assert acc.terms == [] and acc.index == 1


def test_perfect_estimator_mse_is_zero():
    x = np.random.default_rng(0).normal(size=(10, 3))
    assert learn.standardized_mse(x, x, np.ones(3)).value == 0.0


# -- gradients against finite differences ------------------------------------

def deterministic_problem(seed=0, steps=3, n=10):
    params = ssm.lgssm_params("pretrain", 2)
    tr = ssm.lgssm_simulate(params, steps, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    model = FlowModel(2, 2, arch=FlowArch(hidden=8), seed=seed)
    # move every parameter off its initial value so no coupling is at identity
    for name in model.store.names():
        model.store.values[name] += 0.1 * rng.standard_normal(model.store.values[name].shape)
    init = rng.standard_normal((n, 2))
    noises = [rng.standard_normal((n, 2)) for _ in range(steps)]
    fcfg = pf.FilterConfig(n, -np.ones(2), np.ones(2), resample=False)
    return model, tr, fcfg, init, noises


@pytest.mark.parametrize("kind", ["elbo", "mse"])
def test_loss_gradient_matches_finite_differences(kind):
    model, tr, fcfg, init, noises = deterministic_problem()
    store = model.store

    def loss_fn(_):
        with ad.frozen(store):
            loss, _ = learn.filtering_loss(model, tr.observations, fcfg, None, init, noises, kind, tr.states[1:])
        return loss.value

    loss, _ = learn.filtering_loss(model, tr.observations, fcfg, None, init, noises, kind, tr.states[1:])
    store.zero_grad()
    ad.backward(loss, store)
    fd = finite_diff_grad(loss_fn, store, step=1e-6)
    for name in store.names():
        g, ref = store.grads[name], fd[name]
        scale = max(np.abs(ref).max(), 1e-8)
        assert np.max(np.abs(g - ref)) / scale < 1e-3, name


# -- pretraining ---------------------------------------------------------------

def test_pretraining_halves_validation_mse():
    train = ssm.generate_dataset("lgssm", "pretrain", 32, 20, seed=0)
    val = ssm.generate_dataset("lgssm", "pretrain", 16, 20, seed=1)
    std = learn.standardization(train)
    model = FlowModel(2, 2, arch=FlowArch(hidden=16), seed=0, **std)
    low, high = learn.init_bounds(train)
    fcfg = pf.FilterConfig(100, low, high)
    obs = np.stack([t.observations for t in val])
    truth = np.stack([t.states[1:] for t in val])

    def val_mse():
        with ad.frozen(model.store):
            loss, _ = learn.filtering_loss(model, obs, fcfg, np.random.default_rng(5), kind="mse", truths=truth)
        return loss.value

    before = val_mse()
    res = learn.pretrain(train, model, learn.PretrainConfig(epochs=20, batch_size=16), np.random.default_rng(0),
                         (low, high))
    after = val_mse()
    assert after <= 0.5 * before
    assert len(res.history) <= 20 and res.history[res.best_epoch] == min(res.history)


def test_pretrain_restores_best_parameters():
    train = ssm.generate_dataset("lgssm", "pretrain", 4, 5, seed=0)
    model = FlowModel(2, 2, arch=FlowArch(hidden=4), seed=0, **learn.standardization(train))
    res = learn.pretrain(train, model, learn.PretrainConfig(epochs=3, batch_size=2), np.random.default_rng(0))
    for name, value in res.params.items():
        np.testing.assert_array_equal(model.store.values[name], value)


def test_pretrain_non_finite_loss_aborts_with_context():
    train = ssm.generate_dataset("lgssm", "pretrain", 2, 3, seed=0)
    model = FlowModel(2, 2, seed=0)
    model.store.values["dyn.log_var"][:] = np.nan
    with pytest.raises(FloatingPointError, match="epoch 0, batch 0"):
        learn.pretrain(train, model, learn.PretrainConfig(epochs=1, batch_size=2), np.random.default_rng(0))


# -- online loop -----------------------------------------------------------------

def online_setup(T=40, n=20, window=10, lr=0.005, seed=0):
    params = ssm.lgssm_params("online", 2)
    tr = ssm.lgssm_simulate(params, T, np.random.default_rng(seed))
    model = FlowModel(2, 2, arch=FlowArch(hidden=8), seed=0, y_scale=np.full(2, 10.0), x_scale=np.full(2, 1.5))
    cfg = OnlineConfig(pf.FilterConfig(n, np.full(2, -3.0), np.full(2, 3.0)), window=window, lr=lr)
    return tr, model, cfg


def test_zero_lr_runs_are_bit_identical():
    tr, model, cfg = online_setup(lr=0.0)
    runs = [
        learn.frozen_run(tr.observations, model.copy(), cfg, np.random.default_rng(3)),
        learn.online_run(tr.observations, model.copy(), cfg, np.random.default_rng(3)),
        learn.supervised_online_run(tr.observations, tr.states[1:], model.copy(), cfg, np.random.default_rng(3)),
    ]
    for r in runs[1:]:
        assert r.estimates.tobytes() == runs[0].estimates.tobytes()


def test_window_longer_than_run_never_updates():
    tr, model, cfg = online_setup(T=15, window=20)
    before = model.store.snapshot()
    rec = learn.online_run(tr.observations, model, cfg, np.random.default_rng(0))
    assert rec.updates == 0 and rec.window_losses == []
    for name, value in before.items():
        np.testing.assert_array_equal(model.store.values[name], value)


def test_one_update_per_window_over_5000_steps():
    tr, model, cfg = online_setup(T=5000, n=10)
    rec = learn.online_run(tr.observations, model, cfg, np.random.default_rng(0))
    assert rec.updates + rec.skipped_updates == 500
    assert len(rec.window_losses) == 500 and rec.estimates.shape == (5000, 2)


def test_parameters_change_only_at_window_ends(monkeypatch):
    tr, model, cfg = online_setup(T=30, window=7)
    seen = []
    real = learn.adam_step

    def spy(store, state):
        seen.append(len(seen))
        return real(store, state)

    calls = []
    real_propose = learn.propose_and_weight

    def propose_spy(ens, y, m, rng=None, noise=None):
        calls.append((len(seen), m.store.snapshot()["dyn.b"].copy()))
        return real_propose(ens, y, m, rng, noise)

    monkeypatch.setattr(learn, "adam_step", spy)
    monkeypatch.setattr(learn, "propose_and_weight", propose_spy)
    learn.online_run(tr.observations, model, cfg, np.random.default_rng(0))
    assert len(seen) == 4
    # steps 1..7 use window 0 parameters, 8..14 window 1 and so on
    for t, (n_updates, b) in enumerate(calls, start=1):
        assert n_updates == (t - 1) // 7
        np.testing.assert_array_equal(b, calls[((t - 1) // 7) * 7][1])


def test_online_learning_moves_parameters_and_snapshots():
    tr, model, cfg = online_setup(T=40)
    cfg.snapshot_every = 2
    before = model.store.snapshot()
    rec = learn.online_run(tr.observations, model, cfg, np.random.default_rng(0))
    assert rec.updates == 4 and len(rec.snapshots) == 2
    assert [t for t, _ in rec.snapshots] == [20, 40]
    assert any(not np.array_equal(before[k], model.store.values[k]) for k in before)
    assert rec.squared_errors(tr.states[1:]).shape == (40,)


def test_supervised_run_needs_truths():
    tr, model, cfg = online_setup(T=10)
    with pytest.raises(ValueError, match="ground-truth"):
        learn._run(tr.observations, model, cfg, np.random.default_rng(0), "mse")


def test_online_runs_deterministic():
    tr, model, cfg = online_setup(T=30)
    a = learn.online_run(tr.observations, model.copy(), cfg, np.random.default_rng(1))
    b = learn.online_run(tr.observations, model.copy(), cfg, np.random.default_rng(1))
    assert a.estimates.tobytes() == b.estimates.tobytes()
    assert a.window_losses == b.window_losses
