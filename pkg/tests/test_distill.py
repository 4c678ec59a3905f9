import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kdarhmm import diffcore as dc
from kdarhmm.arhmm import SeriesWindow, StatePosterior, hmm_posterior
from kdarhmm.diffcore import Tensor
from kdarhmm.distill import (
    Discriminator,
    SimilarityConfig,
    binary_cross_entropy_logits,
    composite_objective,
    discriminator_loss,
    similarity_loss,
    similarity_matrix,
    student_features,
    write_similarity_csv,
)
from kdarhmm.varinfer import ElboBreakdown, ObjectiveWeights, RecognitionNet, recognition_potentials

ROOT_HALF = 1 / np.sqrt(2)


def posterior(marginals):
    m = np.asarray(marginals, dtype=float)
    return StatePosterior(m, None, 0.0, 0.0)


def breakdown(total):
    return ElboBreakdown(total=total, joint_logprob=total, logdet_global=0.0, logdet_local_placeholder=0.0,
                         global_entropy=0.0, local_entropy=0.0, prior_logprob=0.0)


class TestStudentFeatures:
    def test_uniform_marginals(self):
        np.testing.assert_allclose(student_features([posterior(np.full((4, 6), 0.25))]), [[0.25] * 4])

    def test_alternating_one_hot(self):
        m = np.array([[1, 0, 1, 0], [0, 1, 0, 1]])
        np.testing.assert_array_equal(student_features([posterior(m)]), [[0.5, 0.5]])

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        posts = [posterior(rng.dirichlet(np.ones(3), 7).T) for _ in range(5)]
        np.testing.assert_allclose(student_features(posts).sum(axis=1), 1.0)

    def test_empty(self):
        with pytest.raises(ValueError):
            student_features([])

    def test_mixed_shapes(self):
        with pytest.raises(ValueError, match="posterior 1"):
            student_features([posterior(np.full((2, 3), 0.5)), posterior(np.full((2, 4), 0.5))])

    def test_gradient_through_recognition_weights(self):
        rng = np.random.default_rng(1)
        net = RecognitionNet(2, 2, 1, (3,)).initialize(rng)
        series = SeriesWindow(rng.normal(size=(2, 3)), rng.normal(size=(2, 1)))
        log_trans = np.log([[0.7, 0.3], [0.4, 0.6]])
        log_init = np.log([0.5, 0.5])
        probe = rng.normal(size=2)
        for key in net.weights:
            def f(x, key=key):
                w = {k: Tensor(v) for k, v in net.weights.items()}
                w[key] = x
                pots = recognition_potentials(net, series, w).transpose().reshape(1, 3, 2)
                feats = student_features(hmm_posterior(log_init, log_trans, pots))
                return (feats.reshape(-1) * probe).sum()

            assert dc.check_gradient(f, net.weights[key]) < 1e-4, key


class TestSimilarityMatrix:
    def test_orthonormal_rows_give_identity(self):
        q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(4, 4)))
        np.testing.assert_allclose(similarity_matrix(q), np.eye(4), atol=1e-12)

    def test_hand_example(self):
        S = similarity_matrix(np.array([[1.0], [2.0]]))
        np.testing.assert_allclose(S, [[0.4472, 0.8944], [0.4472, 0.8944]], atol=1e-4)
        np.testing.assert_allclose(S[0], [1 / np.sqrt(5), 2 / np.sqrt(5)], rtol=1e-14)

    def test_duplicate_row(self):
        F = np.random.default_rng(1).normal(size=(3, 2))
        S = similarity_matrix(np.vstack([F, F[1]]))
        np.testing.assert_array_equal(S[1], S[3])

    def test_zero_row_stays_zero(self):
        S = similarity_matrix(np.array([[0.0, 0.0], [1.0, 2.0]]))
        assert np.all(np.isfinite(S))
        np.testing.assert_array_equal(S[0], [0.0, 0.0])

    def test_column_normalization_is_transpose_for_symmetric_gram(self):
        F = np.random.default_rng(2).normal(size=(4, 3))
        np.testing.assert_allclose(similarity_matrix(F, "column"), similarity_matrix(F).T, rtol=1e-12)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            similarity_matrix(np.array([[np.nan]]))

    def test_csv_export(self, tmp_path):
        S = similarity_matrix(np.random.default_rng(3).normal(size=(3, 2)))
        write_similarity_csv(tmp_path / "s.csv", S)
        np.testing.assert_array_equal(np.loadtxt(tmp_path / "s.csv", delimiter=","), S)


class TestSimilarityLoss:
    def test_identical_is_zero(self):
        F = np.random.default_rng(0).normal(size=(5, 3))
        assert similarity_loss(F, F) == 0.0

    def test_linear_in_gamma(self):
        rng = np.random.default_rng(1)
        Fs, Ft = rng.normal(size=(4, 2)), rng.normal(size=(4, 6))
        one = similarity_loss(Fs, Ft, SimilarityConfig(1.5))
        assert similarity_loss(Fs, Ft, SimilarityConfig(3.0)) == pytest.approx(2 * one, rel=1e-14)

    def test_hand_example(self):
        gamma = 0.7
        got = similarity_loss(np.eye(2), np.array([[1.0], [1.0]]), SimilarityConfig(gamma))
        assert got == pytest.approx(gamma / 4 * (2 * (1 - ROOT_HALF) ** 2 + 2 * 0.5), rel=1e-13)

    def test_row_mismatch(self):
        with pytest.raises(ValueError, match="rows"):
            similarity_loss(np.ones((3, 2)), np.ones((2, 2)))

    def test_negative_gamma(self):
        with pytest.raises(ValueError):
            SimilarityConfig(-1.0)

    def test_gradient_in_student_features(self):
        rng = np.random.default_rng(2)
        Fs, Ft = rng.dirichlet(np.ones(3), 4), rng.normal(size=(4, 5))
        assert dc.check_gradient(lambda x: similarity_loss(x, Ft, SimilarityConfig(2.0)), Fs) < 1e-4


matrices = st.tuples(st.integers(1, 6), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**32 - 1))


@settings(max_examples=100)
@given(matrices)
def test_loss_invariant_to_patient_relabeling(case):
    n, cs, ct, seed = case
    rng = np.random.default_rng(seed)
    Fs, Ft = rng.normal(size=(n, cs)), rng.normal(size=(n, ct))
    perm = rng.permutation(n)
    assert abs(similarity_loss(Fs, Ft) - similarity_loss(Fs[perm], Ft[perm])) < 1e-10


@settings(max_examples=100)
@given(matrices, st.floats(1e-3, 1e3))
def test_loss_invariant_to_global_scaling(case, scale):
    n, cs, ct, seed = case
    rng = np.random.default_rng(seed)
    Fs, Ft = rng.normal(size=(n, cs)), rng.normal(size=(n, ct))
    base = similarity_loss(Fs, Ft)
    assert abs(similarity_loss(scale * Fs, Ft) - base) < 1e-10
    assert abs(similarity_loss(Fs, scale * Ft) - base) < 1e-10


@settings(max_examples=100)
@given(matrices)
def test_normalized_rows_have_unit_norm(case):
    n, c, _, seed = case
    S = similarity_matrix(np.random.default_rng(seed).normal(size=(n, c)))
    np.testing.assert_allclose(np.linalg.norm(S, axis=1), 1.0, atol=1e-10)


def constant_discriminator(input_dim, logit):
    disc = Discriminator(input_dim)
    disc.weights = {"W0": np.zeros((input_dim, 16)), "c0": np.zeros(16), "W1": np.zeros((16, 1)), "c1": np.array([logit])}
    return disc


class TestDiscriminatorLoss:
    def test_half_probability_costs_log_two(self):
        loss = discriminator_loss(np.ones((5, 3)), [0, 1, 1, 0, 1], constant_discriminator(3, 0.0))
        assert loss == pytest.approx(np.log(2), rel=1e-14)

    def test_saturated_correct_predictions(self):
        F = np.array([[1.0], [-1.0], [2.0]])
        disc = Discriminator(1)
        disc.weights = {"W0": np.full((1, 16), 5.0), "c0": np.zeros(16), "W1": np.full((16, 1), 5.0), "c1": np.zeros(1)}
        probs = disc.predict_proba(F)
        y = (probs > 0.5).astype(float)
        assert np.all(np.maximum(probs, 1 - probs) >= 1 - 1e-9)
        assert discriminator_loss(F, y, disc) < 1e-8

    def test_gradients(self):
        rng = np.random.default_rng(0)
        F = rng.dirichlet(np.ones(3), 6)
        y = np.array([0, 1, 0, 1, 1, 0])
        disc = Discriminator(3).initialize(rng)
        assert dc.check_gradient(lambda x: discriminator_loss(x, y, disc), F) < 1e-4
        for key in disc.weights:
            def f(x, key=key):
                w = {k: Tensor(v) for k, v in disc.weights.items()}
                w[key] = x
                return discriminator_loss(F, y, disc, w)

            assert dc.check_gradient(f, disc.weights[key]) < 1e-4, key

    def test_labels_must_be_binary(self):
        with pytest.raises(ValueError, match="0 or 1"):
            discriminator_loss(np.ones((2, 1)), [0, 2], constant_discriminator(1, 0.0))

    def test_label_count(self):
        with pytest.raises(ValueError):
            discriminator_loss(np.ones((3, 1)), [0, 1], constant_discriminator(1, 0.0))

    def test_bce_is_stable_for_large_logits(self):
        assert binary_cross_entropy_logits(np.array([800.0, -800.0]), [1, 0]).item() == 0.0

    def test_checkpoint_round_trip(self):
        disc = Discriminator(4).initialize(np.random.default_rng(1))
        F = np.random.default_rng(2).normal(size=(3, 4))
        np.testing.assert_array_equal(Discriminator.from_dict(disc.to_dict()).predict_proba(F), disc.predict_proba(F))


class TestCompositeObjective:
    def test_baseline(self):
        assert composite_objective(breakdown(-12.5)) == 12.5

    def test_zero_similarity_matches_baseline(self):
        assert composite_objective(breakdown(-3.0), sim=0.0) == composite_objective(breakdown(-3.0))

    def test_unit_weight_additivity(self):
        assert composite_objective(breakdown(-3.0), sim=2.5) == pytest.approx(3.0 + 2.5)

    def test_coefficients_applied_once(self):
        w = ObjectiveWeights(similarity_coeff=10.0, discriminator_coeff=4.0)
        assert composite_objective(breakdown(-1.0), sim=0.5, weights=w) == pytest.approx(6.0)
        assert composite_objective(breakdown(-1.0), disc=0.5, weights=w) == pytest.approx(3.0)

    def test_both_constraints_rejected(self):
        with pytest.raises(ValueError, match="at most one"):
            composite_objective(breakdown(0.0), sim=1.0, disc=1.0)
