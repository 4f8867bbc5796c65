import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from evbilevel.autodiff import ParamSet, ShapeError, Tape, sgd_step
from evbilevel.autodiff import tensor as T
from evbilevel.batch import make_batch
from evbilevel.bilevel import (
    BilevelProblem,
    TrainConfig,
    TrainingDiverged,
    TrainState,
    _run,
    alternating_train,
    bilevel_step,
    bilevel_train,
    fd_hvp,
    hypergradient,
    joint_step,
    load_checkpoint,
    lower_loss,
    network_problem,
    save_checkpoint,
    train,
    upper_loss,
)
from evbilevel.losses import den_loss, enh_loss
from evbilevel.networks import NetConfig, enhance_decomposed, init_denoiser, init_enhancer
from evbilevel.sim import SimConfig, make_dataset


@pytest.fixture(scope="module")
def batch():
    return make_batch(make_dataset(2, SimConfig(resolution=8)))


def _state(cfg=TrainConfig(iterations=4), seed=0):
    net = NetConfig(width=4, seed=seed)
    return TrainState(init_denoiser(net), init_enhancer(net), cfg)


# Losses.


def _l1_loop(a, b):
    a, b = np.ravel(a), np.ravel(b)
    acc = 0.0
    for i in range(a.size):
        acc += abs(a[i] - b[i])
    return acc / a.size


def _ce_loop(logits, target):
    n, c, h, w = logits.shape
    acc = 0.0
    for i in range(n):
        for y in range(h):
            for x in range(w):
                z = [logits[i, k, y, x] for k in range(c)]
                lse = math.log(sum(math.exp(v) for v in z))
                acc += lse - z[target[i, y, x]]
    return acc / (n * h * w)


def test_enh_loss_constants():
    rng = np.random.default_rng(0)
    high, l_t, r_t = rng.uniform(size=(1, 3, 4, 4)), rng.uniform(size=(1, 1, 4, 4)), rng.uniform(size=(1, 3, 4, 4))
    assert enh_loss(high, l_t, r_t, high, l_t, r_t).item() == 0.0
    assert enh_loss(high + 0.1, l_t, r_t, high, l_t, r_t).item() == pytest.approx(0.1, abs=1e-15)


def test_enh_loss_matches_loop():
    rng = np.random.default_rng(1)
    args = [rng.uniform(size=s) for s in [(2, 3, 4, 4), (2, 1, 4, 4), (2, 3, 4, 4)] * 2]
    expected = _l1_loop(args[0], args[3]) + 0.5 * _l1_loop(args[1], args[4]) + 0.5 * _l1_loop(args[2], args[5])
    assert enh_loss(*args).item() == pytest.approx(expected, abs=1e-12)


def test_enh_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        enh_loss(np.zeros((1, 3, 4, 4)), np.zeros((1, 1, 4, 4)), np.zeros((1, 3, 4, 4)),
                 np.zeros((1, 3, 4, 5)), np.zeros((1, 1, 4, 4)), np.zeros((1, 3, 4, 4)))


def test_den_loss_uniform_is_ln3():
    target = np.random.default_rng(2).integers(0, 3, size=(2, 4, 4))
    assert den_loss(np.zeros((2, 3, 4, 4)), target).item() == pytest.approx(math.log(3), abs=1e-15)


def test_den_loss_matches_loop():
    rng = np.random.default_rng(3)
    logits = rng.normal(scale=3, size=(2, 3, 5, 4))
    target = rng.integers(0, 3, size=(2, 5, 4))
    assert den_loss(logits, target).item() == pytest.approx(_ce_loop(logits, target), abs=1e-10)


def test_den_loss_confident_limit_and_stability():
    target = np.random.default_rng(4).integers(0, 3, size=(1, 4, 4))
    logits = 800.0 * np.moveaxis(np.eye(3)[target], -1, 1)
    assert den_loss(logits, target).item() < 1e-300
    assert np.isfinite(den_loss(-logits, target).item())


# Network objectives.


def test_lower_loss_without_events_has_no_denoiser_gradient(batch):
    st = _state()
    problem = BilevelProblem(
        lambda w, th: lower_loss(w, th, batch, use_events=False), lambda w, th: upper_loss(w, th, batch)
    )
    _, gw, gt = problem.psi(st.w, st.theta)
    assert gw.norm() == 0.0
    assert gt.norm() > 0.0
    _, gw, _ = network_problem(batch).psi(st.w, st.theta)
    assert gw.norm() > 0.0


def test_upper_loss_matches_components(batch):
    st = _state()
    from evbilevel.networks import denoiser_forward

    logits = denoiser_forward(st.w, batch.counts)
    l_den = den_loss(logits, batch.labels).item()
    probs = T.softmax(logits, axis=1)
    l_hat, r_hat, h_hat = enhance_decomposed(st.theta, batch.x_l, batch.x_r, probs)
    l_enh = enh_loss(h_hat, l_hat, r_hat, batch.high, batch.l_target, batch.r_target).item()
    assert upper_loss(st.w, st.theta, batch).item() == pytest.approx(l_den + l_enh, abs=1e-12)
    assert lower_loss(st.w, st.theta, batch).item() == pytest.approx(l_enh, abs=1e-12)
    assert upper_loss(st.w, st.theta, batch).item() >= l_den


# Finite-difference HVP.


def _scalar(name, value):
    return ParamSet({name: np.atleast_1d(np.asarray(value, dtype=float))})


def _grad_w(fn):
    def grad(w, theta):
        with Tape() as tape:
            loss = fn(tape.watch(w), dict(theta))
            return ParamSet(tape.backward(loss))

    return grad


def test_fd_hvp_exact_on_bilinear():
    rng = np.random.default_rng(5)
    for _ in range(100):
        m = rng.normal(size=(4, 3))
        w = ParamSet({"w": rng.normal(size=(1, 4))})
        theta = ParamSet({"t": rng.normal(size=(3, 1))})
        v = {"t": rng.normal(size=(3, 1))}
        hvp, eps = fd_hvp(_grad_w(lambda ww, tt: T.sum_(ww["w"] @ m @ tt["t"])), w, theta, v)
        expected = (m @ v["t"]).T
        assert np.linalg.norm(hvp["w"] - expected) <= 1e-9 * np.linalg.norm(expected)
        assert eps == pytest.approx(0.01 / np.linalg.norm(v["t"]))


def test_fd_hvp_zero_for_w_independent_psi():
    w, theta = _scalar("w", 1.0), _scalar("t", 2.0)
    grad = BilevelProblem(lambda ww, tt: T.sum_(tt["t"] * tt["t"]), None).psi
    hvp, _ = fd_hvp(lambda ww, tt: grad(ww, tt, want_theta=False)[1], w, theta, {"t": np.ones(1)})
    assert hvp["w"][0] == 0.0


def test_fd_hvp_zero_direction_skips():
    w, theta = _scalar("w", 1.0), _scalar("t", 2.0)
    hvp, eps = fd_hvp(lambda ww, tt: ParamSet(ww), w, theta, {"t": np.zeros(1)})
    assert eps == 0.0
    assert hvp["w"][0] == 0.0


def _smooth_net(rng):
    x = rng.normal(size=(6, 3))
    y = rng.normal(size=(6, 2))

    def psi(w, th):
        hidden = T.sigmoid(T.matmul(x, w["w1"]))
        out = T.sigmoid(hidden @ th["t1"]) @ th["t2"] + hidden @ w["w2"]
        return T.sum_(T.power(out - y, 2))

    w = ParamSet({"w1": rng.normal(size=(3, 4)), "w2": rng.normal(size=(4, 2))})
    theta = ParamSet({"t1": rng.normal(size=(4, 5)), "t2": rng.normal(size=(5, 2))})
    return psi, w, theta


def test_fd_hvp_richardson_on_small_nets():
    rng = np.random.default_rng(6)
    for _ in range(10):
        psi, w, theta = _smooth_net(rng)
        v = ParamSet((k, rng.normal(size=a.shape)) for k, a in theta.items())
        coarse, eps = fd_hvp(_grad_w(psi), w, theta, v, 0.01)
        fine, eps_fine = fd_hvp(_grad_w(psi), w, theta, v, 0.001)
        assert eps_fine == pytest.approx(eps / 10)
        diff = np.linalg.norm(coarse.flatten() - fine.flatten())
        assert diff <= 1e-3 * np.linalg.norm(fine.flatten())


# Hypergradient.


def _quadratic(a, c):
    psi = lambda w, th: 0.5 * T.sum_(T.power(th["t"] - a * w["w"], 2))
    phi = lambda w, th: 0.5 * T.sum_(T.power(th["t"] - c, 2))
    return BilevelProblem(psi, phi)


def test_quadratic_closed_form():
    rng = np.random.default_rng(7)
    for _ in range(100):
        a, c, eta = rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0.01, 1)
        w0, t0 = rng.uniform(-2, 2, size=2)
        rep = hypergradient(_quadratic(a, c), _scalar("w", w0), _scalar("t", t0), eta)
        t_prime = t0 - eta * (t0 - a * w0)
        expected = eta * a * (t_prime - c)
        assert rep.hypergrad["w"][0] == pytest.approx(expected, rel=1e-10, abs=1e-10)
        assert rep.direct["w"][0] == 0.0
        assert rep.theta_prime["t"][0] == pytest.approx(t_prime, abs=1e-15)


def test_zero_eta_gives_direct_gradient():
    problem = BilevelProblem(
        lambda w, th: T.sum_(w["w"] * th["t"] * th["t"]), lambda w, th: T.sum_(T.power(w["w"] - th["t"], 2))
    )
    w, theta = _scalar("w", 0.7), _scalar("t", -0.4)
    rep = hypergradient(problem, w, theta, 0.0)
    assert rep.hypergrad["w"][0] == 2 * (0.7 + 0.4)
    assert rep.correction_norm == 0.0


def test_phi_independent_of_theta_has_no_correction():
    problem = BilevelProblem(
        lambda w, th: T.sum_(w["w"] * th["t"] * th["t"]), lambda w, th: T.sum_(T.power(w["w"], 2))
    )
    rep = hypergradient(problem, _scalar("w", 0.5), _scalar("t", 1.5), 0.3)
    assert rep.fd_scale == 0.0
    assert rep.hypergrad.equals(rep.direct)
    assert rep.hypergrad["w"][0] == 1.0


def test_toy_bilevel_converges_to_fixed_point():
    a, c, eta_t, eta_w = 1.5, 0.6, 0.5, 0.5
    problem = _quadratic(a, c)
    w, theta = _scalar("w", -1.0), _scalar("t", 2.0)
    for _ in range(10_000):
        rep = hypergradient(problem, w, theta, eta_t)
        theta = sgd_step(theta, rep.grad_theta_psi, eta_t)
        w = sgd_step(w, rep.hypergrad, eta_w)
    assert abs(w["w"][0] - c / a) < 1e-4
    assert abs(theta["t"][0] - c) < 1e-4


# Training loops.


def test_zero_iterations_leave_parameters_unchanged(batch):
    for strategy in ("bilevel", "joint", "alternating"):
        st = _state(TrainConfig(iterations=0))
        w0, t0 = st.w.copy(), st.theta.copy()
        train(strategy, st, batch)
        assert st.w.equals(w0) and st.theta.equals(t0)
        assert st.log == []


def test_committed_step_shares_the_unrolled_gradient(batch):
    st = _state(TrainConfig(iterations=1, optimizer="sgd"))
    seen = []

    def observer(k, rep, committed):
        assert committed is rep.grad_theta_psi
        seen.append(rep)

    bilevel_train(st, batch, observer=observer)
    assert len(seen) == 1
    # with plain steps the committed lower iterate is exactly the unrolled one
    assert st.theta.equals(seen[0].theta_prime)


def test_sgd_upper_step_is_hypergradient_descent(batch):
    st = _state(TrainConfig(iterations=1, optimizer="sgd", eta_w=0.1))
    w0 = st.w.copy()
    rep = hypergradient(network_problem(batch), st.w, st.theta, st.config.eta_theta)
    bilevel_step(st, batch)
    assert st.w.equals(w0.axpy(-0.1, rep.hypergrad))


@pytest.mark.parametrize("strategy", ["bilevel", "joint", "alternating"])
def test_training_is_deterministic_and_finite(batch, strategy):
    a = train(strategy, _state(), batch)
    b = train(strategy, _state(), batch)
    assert a.w.equals(b.w) and a.theta.equals(b.theta)
    assert len(a.log) == 4
    for row in a.log:
        for key in ("psi", "phi", "grad_w_norm", "grad_theta_norm"):
            assert row[key] is None or np.isfinite(row[key])


def test_joint_with_zero_enhancement_weight(batch):
    st = _state(TrainConfig(iterations=1, enh_weight=0.0))
    t0 = st.theta.copy()
    row = joint_step(st, batch)
    assert row["grad_theta_norm"] == 0.0
    assert row["grad_w_norm"] > 0.0
    # zero Adam gradient leaves the enhancer in place
    assert st.theta.equals(t0)


def test_alternating_phase_two_freezes_denoiser(batch):
    st = _state(TrainConfig(iterations=4, alternating_split=0.5))
    alternating_train(st, batch, iterations=2)
    w_frozen, t_phase1 = st.w.copy(), st.theta.copy()
    assert st.theta.equals(_state().theta)
    alternating_train(st, batch)
    assert st.w.equals(w_frozen)
    assert not st.theta.equals(t_phase1)
    assert [r["phi"] is None for r in st.log] == [False, False, True, True]


@pytest.mark.parametrize("strategy", ["bilevel", "joint"])
def test_checkpoint_resume_is_bit_identical(batch, tmp_path, strategy):
    cfg = TrainConfig(iterations=4)
    straight = train(strategy, _state(cfg), batch)
    half = train(strategy, _state(cfg), batch, iterations=2)
    save_checkpoint(half, tmp_path / "half.bevl")
    resumed = load_checkpoint(tmp_path / "half.bevl", cfg)
    assert resumed.k == 2
    train(strategy, resumed, batch)
    assert resumed.w.equals(straight.w) and resumed.theta.equals(straight.theta)
    assert resumed.opt_w.step == straight.opt_w.step


def test_periodic_checkpoints(batch):
    saved = []
    st = _state(TrainConfig(iterations=4, checkpoint_every=2))
    bilevel_train(st, batch, checkpoint=lambda s: saved.append(s.k))
    assert saved == [2, 4]
    assert "fd_scale" in st.log[0]


def test_minibatch_sampling_is_seeded(batch):
    cfg = TrainConfig(iterations=2, batch_size=1, seed=3)
    a = train("joint", _state(cfg), batch)
    b = train("joint", _state(cfg), batch)
    assert a.w.equals(b.w)


def _fake_run(values, cfg=None):
    it = iter(values)
    st = TrainState(ParamSet(), ParamSet(), cfg or TrainConfig(iterations=len(values)))
    return _run(st, None, lambda s, b: {"psi": next(it)}, None, None)


def test_divergence_guard_trips_after_patience():
    with pytest.raises(TrainingDiverged, match="consecutive"):
        _fake_run([1.0] + [11.0] * 50)
    st = _fake_run([1.0] + [11.0] * 49 + [1.0] + [11.0] * 49)
    assert st.k == 100


def test_non_finite_loss_aborts():
    with pytest.raises(TrainingDiverged, match="non-finite"):
        _fake_run([1.0, float("nan")])


def test_config_validation():
    for bad in (dict(iterations=-1), dict(eta_w=0), dict(m_scale=0), dict(optimizer="rmsprop")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError):
        train("greedy", _state(), None)
