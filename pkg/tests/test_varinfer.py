from math import lgamma

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit, logsumexp

from kdarhmm import diffcore as dc
from kdarhmm.arhmm import ARHMMParams, SeriesWindow, sample
from kdarhmm.diffcore import Tape, Tensor, backward
from kdarhmm.distill import Discriminator, composite_objective, discriminator_loss, similarity_loss, student_features
from kdarhmm.varinfer import (
    WEIGHT_GRID,
    Adam,
    DistillationConstraint,
    FitResult,
    GlobalLayout,
    GlobalVariationalParams,
    ObjectiveWeights,
    RecognitionNet,
    TrainingConfig,
    elbo_estimate,
    elbo_single_draw,
    fit,
    gaussian_entropy,
    initial_params,
    recognition_potentials,
    reparam_sample,
    structured_local_posterior,
)

from .oracles import emission_table, enumerate_posterior

HALF_LOG_2PI_E = 0.5 * np.log(2 * np.pi * np.e)


def tiny_problem(seed, K=2, D=1, T=3, N=2, hidden=(3,)):
    rng = np.random.default_rng(seed)
    full = rng.normal(size=(N, D, T + 1))
    layout = GlobalLayout(K, D, 1)
    gv = GlobalVariationalParams(rng.normal(0, 0.5, layout.size), rng.normal(-1.5, 0.3, layout.size))
    net = RecognitionNet(K, D, 1, hidden).initialize(rng)
    return full, layout, gv, net


def net_potentials(net, full):
    """Recognition potentials (N, T, K) with plain numpy."""
    x = np.transpose(full, (0, 2, 1))
    inp = np.concatenate([x[:, 1:], x[:, :-1]], axis=2)
    h = inp
    for i in range(net.num_layers):
        h = h @ net.weights[f"W{i}"] + net.weights[f"c{i}"]
        if i < net.num_layers - 1:
            h = np.tanh(h)
    return h


def constrained_from_u(u, K, D):
    """Decode the unconstrained globals for r = 1 by hand."""
    pos = 0

    def take(n):
        nonlocal pos
        out = u[pos : pos + n]
        pos += n
        return out

    def sticks(v):
        off = -np.log(K - 1 - np.arange(K - 1))
        z = expit(v + off)
        x, rem, ld = np.empty(K), 1.0, 0.0
        for k in range(K - 1):
            x[k] = z[k] * rem
            ld += np.log(z[k] * (1 - z[k]) * rem)
            rem *= 1 - z[k]
        x[-1] = rem
        return x, ld

    init, ld_init = sticks(take(K - 1))
    rows = [sticks(take(K - 1)) for _ in range(K)]
    trans = np.stack([r[0] for r in rows])
    A = take(K * D * D).reshape(K, D, D)
    b = take(K * D).reshape(K, D)
    chol_u = take(K * D * (D + 1) // 2).reshape(K, -1)
    assert D == 1
    cov = np.exp(2 * chol_u).reshape(K, 1, 1)
    # d sigma^2 / du = 2 exp(2u)
    ld_cov = np.log(2.0) + 2 * chol_u[:, 0]
    logdet = ld_init + sum(r[1] for r in rows) + ld_cov.sum()
    prior = (K + 1) * lgamma(K)
    gauss = np.concatenate([A.ravel(), b.ravel()])
    prior += -0.5 * gauss @ gauss - 0.5 * np.log(2 * np.pi) * gauss.size
    prior += (-0.5 * chol_u**2 - 0.5 * np.log(2 * np.pi)).sum() - ld_cov.sum()
    return ARHMMParams(init, trans, A, b, cov), logdet, prior


def straight_line_elbo(u, omega, net, full, K):
    """Unit-weight ELBO for one global draw by explicit path enumeration."""
    params, logdet, prior = constrained_from_u(u, K, full.shape[1])
    pots = net_potentials(net, full)
    joint = local_h = 0.0
    for n in range(full.shape[0]):
        series = SeriesWindow.from_full(full[n], 1)
        em = emission_table(params, series)
        li, lt = np.log(params.initial_dist), np.log(params.transitions)
        q = enumerate_posterior(li, lt, pots[n])
        model_scores = enumerate_posterior(li, lt, em)["scores"]
        probs = np.exp(q["scores"] - q["log_evidence"])
        joint += probs @ model_scores
        local_h += q["entropy"]
    glob_h = omega.sum() + HALF_LOG_2PI_E * omega.size
    return joint + logdet + glob_h + local_h + prior, {"joint": joint, "local_entropy": local_h}


class TestReparamSample:
    def test_zero_noise_is_mean(self):
        mu = np.array([0.3, -1.2])
        np.testing.assert_array_equal(reparam_sample(mu, np.array([0.4, -2.0]), np.zeros(2)).value, mu)

    def test_unit_scale(self):
        mu = np.array([0.3, -1.2, 2.0])
        np.testing.assert_allclose(reparam_sample(mu, np.zeros(3), [1.0, 0.0, 0.0]).value, mu + [1, 0, 0])

    def test_empirical_mean(self):
        rng = np.random.default_rng(0)
        mu, omega = np.array([1.0, -2.0]), np.array([0.5, -1.0])
        draws = np.stack([reparam_sample(mu, omega, rng.standard_normal(2)).value for _ in range(10_000)])
        assert np.all(np.abs(draws.mean(axis=0) - mu) < 3 * np.exp(omega) / 100)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            reparam_sample(np.zeros(2), np.zeros(2), np.zeros(3))

    def test_differentiable_in_mu_and_omega(self):
        tape = Tape()
        mu, omega = tape.leaf(np.array([0.5])), tape.leaf(np.array([np.log(2.0)]))
        g = backward(tape, reparam_sample(mu, omega, np.array([3.0])).sum())
        assert g[mu][0] == 1.0 and g[omega][0] == pytest.approx(6.0)


class TestGaussianEntropy:
    def test_standard_normal(self):
        assert gaussian_entropy(np.zeros(1)).item() == pytest.approx(1.4189385332, abs=1e-10)

    def test_log_scale_shift(self):
        assert gaussian_entropy(np.array([np.log(2)])).item() == pytest.approx(np.log(2) + HALF_LOG_2PI_E)

    def test_additive(self):
        assert gaussian_entropy(np.zeros(3)).item() == pytest.approx(3 * HALF_LOG_2PI_E)


class TestRecognitionPotentials:
    def test_zero_network(self):
        net = RecognitionNet(4, 2, 1, (5,)).zeros()
        pots = recognition_potentials(net, SeriesWindow(np.ones((2, 6)), np.ones((2, 1))))
        np.testing.assert_array_equal(pots, np.zeros((4, 6)))

    def test_shape(self):
        net = RecognitionNet(5, 3, 1).initialize(np.random.default_rng(0))
        rng = np.random.default_rng(1)
        assert recognition_potentials(net, SeriesWindow(rng.normal(size=(3, 24)), rng.normal(size=(3, 1)))).shape == (5, 24)

    def test_input_dimension_is_current_plus_lags(self):
        assert RecognitionNet(5, 34, 2).input_dim == 34 * 3

    def test_gradient(self):
        rng = np.random.default_rng(2)
        net = RecognitionNet(2, 2, 1, (3,)).initialize(rng)
        series = SeriesWindow(rng.normal(size=(2, 3)), rng.normal(size=(2, 1)))
        w = rng.normal(size=(2, 3))
        for key in net.weights:
            def f(x, key=key):
                weights = {k: Tensor(v) for k, v in net.weights.items()}
                weights[key] = x
                return (recognition_potentials(net, series, weights) * w).sum()

            assert dc.check_gradient(f, net.weights[key]) < 1e-4, key

    def test_dimension_mismatch(self):
        net = RecognitionNet(2, 2, 1).initialize(np.random.default_rng(0))
        with pytest.raises(ValueError, match="does not match"):
            recognition_potentials(net, SeriesWindow(np.ones((3, 4)), np.ones((3, 1))))


class TestStructuredLocalPosterior:
    def test_uniform_everything(self):
        K, T = 3, 5
        post = structured_local_posterior(np.zeros((K, T)), np.full((K, K), 1 / K), np.full(K, 1 / K))
        np.testing.assert_allclose(post.marginals, 1 / K, atol=1e-12)

    def test_saturated_column(self):
        rng = np.random.default_rng(3)
        pots = rng.normal(size=(3, 4))
        pots[2, 1] += 1000.0
        post = structured_local_posterior(pots, rng.dirichlet(np.ones(3), 3), rng.dirichlet(np.ones(3)))
        np.testing.assert_allclose(post.marginals[:, 1], [0, 0, 1], atol=1e-9)

    def test_matches_enumeration(self):
        rng = np.random.default_rng(4)
        pots = rng.normal(size=(2, 3))
        trans, init = rng.dirichlet(np.ones(2), 2), rng.dirichlet(np.ones(2))
        post = structured_local_posterior(pots, trans, init)
        ref = enumerate_posterior(np.log(init), np.log(trans), pots.T)
        np.testing.assert_allclose(post.marginals, ref["marginals"], atol=1e-9)
        assert abs(post.entropy - ref["entropy"]) < 1e-9

    def test_invalid_transitions(self):
        with pytest.raises(ValueError, match="row-stochastic"):
            structured_local_posterior(np.zeros((2, 3)), np.array([[0.9, 0.2], [0.5, 0.5]]), np.array([0.5, 0.5]))


class TestElboEstimate:
    def test_single_state_has_exact_likelihood_and_no_local_entropy(self):
        full, layout, gv, net = tiny_problem(5, K=1)
        eps = np.random.default_rng(0).standard_normal((4, layout.size))
        br = elbo_estimate(gv, net, full, num_mc=4, eps=eps)
        assert br.local_entropy == pytest.approx(0.0, abs=1e-12)
        exact = []
        for s in range(4):
            p = layout.to_params(gv.mu + np.exp(gv.omega) * eps[s])
            exact.append(sum(logsumexp(emission_table(p, SeriesWindow.from_full(x, 1)).sum(axis=0)) for x in full))
        assert br.joint_logprob == pytest.approx(np.mean(exact), abs=1e-10)
        parts = br.joint_logprob + br.logdet_global + br.global_entropy + br.prior_logprob
        assert br.total == pytest.approx(parts, abs=1e-10)

    def test_loglik_coeff_is_linear(self):
        full, layout, gv, net = tiny_problem(6)
        one = elbo_estimate(gv, net, full, ObjectiveWeights(), num_mc=3, seed=1)
        two = elbo_estimate(gv, net, full, ObjectiveWeights(loglik_coeff=2.0), num_mc=3, seed=1)
        assert two.total - one.total == pytest.approx(one.joint_logprob, rel=1e-12)

    def test_matches_straight_line_evaluation(self):
        full, layout, gv, net = tiny_problem(7, K=2, D=1, T=3, N=2)
        eps = np.random.default_rng(1).standard_normal((1, layout.size))
        br = elbo_estimate(gv, net, full, num_mc=1, eps=eps)
        ref, parts = straight_line_elbo(gv.mu + np.exp(gv.omega) * eps[0], gv.omega, net, full, 2)
        assert abs(br.total - ref) < 1e-8
        assert abs(br.local_entropy - parts["local_entropy"]) < 1e-9
        assert br.logdet_local_placeholder == 0.0

    def test_total_is_weighted_sum(self):
        full, layout, gv, net = tiny_problem(8)
        w = ObjectiveWeights(loglik_coeff=1e3, determinants_coeff=2.0, global_entropy_coeff=0.5,
                             local_entropy_coeff=7.0, priors_coeff=1e-2)
        br = elbo_estimate(gv, net, full, w, num_mc=2, seed=3)
        expect = (1e3 * br.joint_logprob + 2.0 * (br.logdet_global + br.logdet_local_placeholder)
                  + 0.5 * br.global_entropy + 7.0 * br.local_entropy + 1e-2 * br.prior_logprob)
        assert br.total == pytest.approx(expect, rel=1e-9)

    def test_num_mc_must_be_positive(self):
        full, layout, gv, net = tiny_problem(9)
        with pytest.raises(ValueError):
            elbo_estimate(gv, net, full, num_mc=0)


@settings(max_examples=20)
@given(st.integers(0, 2**32 - 1))
def test_local_entropy_matches_enumeration(seed):
    full, layout, gv, net = tiny_problem(seed, N=1)
    eps = np.zeros((1, layout.size))
    br = elbo_estimate(gv, net, full, num_mc=1, eps=eps)
    p = layout.to_params(gv.mu)
    ref = enumerate_posterior(np.log(p.initial_dist), np.log(p.transitions), net_potentials(net, full)[0])
    assert abs(br.local_entropy - ref["entropy"]) < 1e-9


def draw_gradient_errors(seed, weights=ObjectiveWeights(), variant="baseline"):
    full, layout, gv, net = tiny_problem(seed, K=2, D=2, T=3, N=3)
    rng = np.random.default_rng(seed + 1)
    eps = rng.standard_normal(layout.size)
    values = {"mu": gv.mu, "omega": gv.omega, **{"rec." + k: v for k, v in net.weights.items()}}
    disc = Discriminator(2).initialize(rng)
    if variant == "disc":
        values.update({"disc." + k: v for k, v in disc.weights.items()})
    teacher = rng.normal(size=(3, 4))
    labels = np.array([0.0, 1.0, 1.0])

    def objective(key):
        def f(x):
            t = {k: Tensor(v) for k, v in values.items()}
            t[key] = x
            u = t["mu"] + dc.exp(t["omega"]) * eps
            rec = {k[4:]: v for k, v in t.items() if k.startswith("rec.")}
            br, loc = elbo_single_draw(u, t["omega"], layout, net, rec, full, weights, global_scale=0.5)
            feats = student_features(loc.posterior)
            sim = similarity_loss(feats, teacher) if variant == "kd" else None
            dl = None
            if variant == "disc":
                dl = discriminator_loss(feats, labels, disc, {k[5:]: v for k, v in t.items() if k.startswith("disc.")})
            return composite_objective(br, sim, dl, weights)
        return f

    return {k: dc.check_gradient(objective(k), v) for k, v in values.items()}


@pytest.mark.parametrize("variant", ["baseline", "kd", "disc"])
def test_composite_objective_gradients(variant):
    errors = draw_gradient_errors(11, ObjectiveWeights(similarity_coeff=3.0, discriminator_coeff=2.0), variant)
    assert max(errors.values()) < 1e-4, errors


def test_unit_weight_elbo_gradients():
    errors = draw_gradient_errors(12)
    assert max(errors.values()) < 1e-4, errors


def test_weights_are_validated_and_sampled_from_grid():
    with pytest.raises(ValueError):
        ObjectiveWeights(priors_coeff=-1.0)
    rng = np.random.default_rng(0)
    for _ in range(20):
        w = ObjectiveWeights.sample(rng).to_dict()
        for name, options in WEIGHT_GRID.items():
            assert w[name] in options


class TestAdam:
    def test_minimizes_quadratic(self):
        p = {"x": np.array([3.0, -2.0])}
        opt = Adam(p, lr=0.1)
        for _ in range(500):
            opt.step({"x": 2 * p["x"]})
        np.testing.assert_allclose(p["x"], 0.0, atol=1e-2)

    def test_first_step_has_learning_rate_magnitude(self):
        p = {"x": np.array([1.0, 1.0])}
        Adam(p, lr=0.01).step({"x": np.array([5.0, -1e-3])})
        np.testing.assert_allclose(p["x"], [0.99, 1.01], atol=1e-6)

    def test_restricted_step_leaves_other_keys(self):
        p = {"a": np.ones(2), "b": np.ones(2)}
        opt = Adam(p, lr=0.1)
        opt.step({"a": np.ones(2), "b": np.ones(2)}, keys=["a"])
        np.testing.assert_array_equal(p["b"], np.ones(2))
        assert opt.t == {"a": 1, "b": 0}
        opt.step({"a": np.ones(2), "b": np.ones(2)})
        # first real update of b is bias-corrected like any first step
        np.testing.assert_allclose(p["b"], 0.9, atol=1e-6)


def test_epoch_defaults_follow_the_variant():
    cfg = TrainingConfig()
    assert (cfg.epochs_for("baseline"), cfg.epochs_for("kd"), cfg.epochs_for("disc")) == (20, 10, 10)
    assert TrainingConfig(epochs=7).epochs_for("kd") == 7


def test_cosine_schedule():
    cfg = TrainingConfig(learning_rate=0.1, lr_schedule="cosine")
    assert cfg.learning_rate_at(0, 10) == pytest.approx(0.1)
    assert cfg.learning_rate_at(5, 10) == pytest.approx(0.05)
    rates = [cfg.learning_rate_at(e, 10) for e in range(10)]
    assert all(a > b > 0 for a, b in zip(rates, rates[1:]))
    assert TrainingConfig(learning_rate=0.1).learning_rate_at(9, 10) == 0.1
    with pytest.raises(ValueError):
        TrainingConfig(lr_schedule="step")


def small_dataset(N=30, seed=0):
    true = ARHMMParams([0.5, 0.5], [[0.9, 0.1], [0.1, 0.9]], [[[0.5]], [[-0.3]]], [[1.5], [-1.5]],
                       [[[0.2]], [[0.3]]])
    return np.stack([sample(true, 10, [[0.0]], seed * 1000 + i)[0].full() for i in range(N)])


class TestFit:
    def test_bit_reproducible(self):
        data = small_dataset()
        cfg = TrainingConfig(num_states=2, epochs=2, batch_size=8, seed=3, hidden_sizes=(4,))
        a, b = fit(data, cfg), fit(data, cfg)
        np.testing.assert_array_equal(a.variational.mu, b.variational.mu)
        np.testing.assert_array_equal(a.net.weights["W0"], b.net.weights["W0"])
        assert [r["elbo_eval"] for r in a.trace] == [r["elbo_eval"] for r in b.trace]

    def test_trace_columns(self):
        res = fit(small_dataset(), TrainingConfig(num_states=2, epochs=2, seed=0, hidden_sizes=(4,)))
        assert [r["epoch"] for r in res.trace] == [1, 2]
        for key in ("joint_logprob", "logdet_global", "global_entropy", "local_entropy", "prior_logprob",
                    "similarity_loss", "discriminator_loss", "seconds"):
            assert key in res.trace[0]

    def test_point_estimate_is_valid_model(self):
        res = fit(small_dataset(), TrainingConfig(num_states=2, epochs=1, seed=0, hidden_sizes=(4,)))
        res.params.validate()
        assert res.features(small_dataset(5, seed=9)).shape == (5, 2)

    def test_kd_and_disc_variants_run(self):
        data = small_dataset()
        cfg = TrainingConfig(num_states=2, epochs=1, batch_size=10, seed=0, hidden_sizes=(4,),
                             weights=ObjectiveWeights(similarity_coeff=10.0))
        kd = fit(data, cfg, DistillationConstraint("kd", teacher_features=np.random.default_rng(0).normal(size=(30, 3))))
        assert kd.variant == "kd" and kd.trace[0]["similarity_loss"] > 0
        disc = fit(data, cfg, DistillationConstraint("disc", labels=np.arange(30) % 2))
        assert disc.discriminator is not None and disc.trace[0]["discriminator_loss"] > 0

    def test_checkpoint_round_trip(self):
        res = fit(small_dataset(), TrainingConfig(num_states=2, epochs=1, seed=0, hidden_sizes=(4,)))
        back = FitResult.from_dict(res.to_dict())
        probe = small_dataset(4, seed=5)
        np.testing.assert_array_equal(back.features(probe), res.features(probe))
        assert back.config == res.config

    def test_rejects_missing_values(self):
        data = small_dataset()
        data[0, 0, 3] = np.nan
        with pytest.raises(ValueError, match="impute"):
            fit(data, TrainingConfig(num_states=2, epochs=1))

    def test_constraint_rows_must_match(self):
        with pytest.raises(ValueError, match="rows"):
            fit(small_dataset(), TrainingConfig(num_states=2, epochs=1),
                DistillationConstraint("disc", labels=np.zeros(5)))

    def test_constraint_needs_its_input(self):
        with pytest.raises(ValueError):
            DistillationConstraint("kd")


def test_cluster_initialization_separates_regimes():
    data = small_dataset(40)
    init = initial_params(data, 2, 1, np.random.default_rng(0))
    init.validate()
    # planted biases are +1.5 and -1.5
    assert abs(init.biases[0, 0] - init.biases[1, 0]) > 1.0


def test_default_initialization_without_rng():
    data = small_dataset(10)
    init = initial_params(data, 3, 1)
    np.testing.assert_array_equal(init.lag_matrices[:, 0, 0], 0.9)
    np.testing.assert_allclose(init.transitions, 1 / 3)
