import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lmcca import tensor as T
from lmcca.attacks import AttackSpec, cca
from lmcca.masking import (LatentMask, cca_mask, consistency_profile, cosine_similarity,
                           default_beta, deviation, keep_vector, oracle_mask, sparsity, top_k_mask)
from lmcca.model import ArchConfig, build_model
from lmcca.selftest import brute_force_top_k

SMALL = ArchConfig("small-cnn", (1, 8, 8), 10, (3, 4), 16)


def identity_model(n):
    return build_model(ArchConfig("identity", (1, 1, n), 2, (), n), 0).eval()


def flat(values):
    return np.asarray(values, np.float32).reshape(1, 1, 1, -1)


vectors = st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=12)


# --- deviation ------------------------------------------------------------------

def test_deviation_examples():
    np.testing.assert_array_equal(deviation([1.0, 2.0], [1.0, 2.0]), [0, 0])
    np.testing.assert_array_equal(deviation([1.0, 2.0], [1.5, 1.0]), [0.5, 1.0])


def test_deviation_length_mismatch_rejected():
    with pytest.raises(ValueError):
        deviation([1.0], [1.0, 2.0])


@given(vectors, st.randoms())
def test_deviation_symmetric_non_negative(a, rnd):
    b = [rnd.uniform(-1e3, 1e3) for _ in a]
    d1, d2 = deviation(a, b), deviation(b, a)
    np.testing.assert_array_equal(d1, d2)
    assert (d1 >= 0).all()
    np.testing.assert_array_equal(deviation(a, a), 0)


# --- top-k -----------------------------------------------------------------------

def test_top_k_example():
    np.testing.assert_array_equal(top_k_mask([3, 1, 2, 0.5], 2).bits, [1, 0, 1, 0])


def test_top_k_boundaries():
    u = [0.3, 0.1, 0.2]
    np.testing.assert_array_equal(top_k_mask(u, 0).bits, [0, 0, 0])
    np.testing.assert_array_equal(top_k_mask(u, 3).bits, [1, 1, 1])


def test_top_k_out_of_range_rejected():
    for k in (-1, 4):
        with pytest.raises(ValueError):
            top_k_mask([1.0, 2.0, 3.0], k)


def test_top_k_ties_go_to_smaller_index():
    np.testing.assert_array_equal(top_k_mask([1, 2, 2, 2], 2).bits, [0, 1, 1, 0])
    np.testing.assert_array_equal(top_k_mask(np.zeros(4), 2).bits, [1, 1, 0, 0])


@settings(max_examples=300)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=8), st.data())
def test_top_k_matches_sort_oracle_on_grid(u, data):
    k = data.draw(st.integers(0, len(u)))
    np.testing.assert_array_equal(top_k_mask(u, k).bits, brute_force_top_k(np.array(u, float), k))


@given(vectors, st.data(), st.floats(1e-3, 1e3))
def test_top_k_popcount_and_scale_invariance(u, data, c):
    k = data.draw(st.integers(0, len(u)))
    m = top_k_mask(u, k)
    assert m.bits.sum() == k
    np.testing.assert_array_equal(top_k_mask(np.array(u) * c, k).bits, m.bits)


@given(vectors, st.data())
def test_selected_dominate_unselected(u, data):
    k = data.draw(st.integers(0, len(u)))
    bits = top_k_mask(u, k).bits
    u = np.array(u)
    if 0 < k < len(u):
        assert u[bits == 1].min() >= u[bits == 0].max()


def test_top_k_batched_rows_independent():
    u = np.array([[3, 1, 2], [0, 5, 5]], float)
    np.testing.assert_array_equal(top_k_mask(u, 1).bits, [[1, 0, 0], [0, 1, 0]])


def test_latent_mask_rejects_wrong_popcount():
    with pytest.raises(ValueError):
        LatentMask(np.array([1, 1, 0]), 1)


# --- keep vector ----------------------------------------------------------------

def test_keep_vector_examples():
    np.testing.assert_array_equal(keep_vector(top_k_mask([1.0, 2.0], 0)), [1, 1])
    np.testing.assert_array_equal(keep_vector(top_k_mask([1.0, 2.0], 2)), [0, 0])


@given(vectors, st.data())
def test_keep_plus_bits_is_ones(u, data):
    m = top_k_mask(u, data.draw(st.integers(0, len(u))))
    keep = keep_vector(m)
    np.testing.assert_array_equal(keep + m.bits, 1)
    assert keep.sum() == len(u) - m.k


# --- oracle / cca masks -------------------------------------------------------------

def test_oracle_mask_identity_example():
    model = identity_model(3)
    m = oracle_mask(model, flat([0, 0, 0]), flat([0.1, 0.3, 0.2]), 1)
    np.testing.assert_array_equal(m.bits.ravel(), [0, 1, 0])
    assert m.source == "oracle"


def test_oracle_mask_equal_inputs_degenerate():
    model = build_model(SMALL, 0)
    x = np.random.default_rng(0).uniform(0, 1, (1, 1, 8, 8)).astype(np.float32)
    m = oracle_mask(model, x, x, 3)
    np.testing.assert_array_equal(m.bits.ravel(), [1, 1, 1] + [0] * 13)


def test_oracle_mask_equals_composition():
    model = build_model(SMALL, 1).eval()
    rng = np.random.default_rng(1)
    x = rng.uniform(0, 1, (4, 1, 8, 8)).astype(np.float32)
    xo = np.clip(x + rng.uniform(-0.1, 0.1, x.shape), 0, 1).astype(np.float32)
    with T.no_grad():
        sigma = deviation(model.penultimate(x).data, model.penultimate(xo).data)
    np.testing.assert_array_equal(oracle_mask(model, x, xo, 4).bits, top_k_mask(sigma, 4).bits)


def test_cca_mask_identity_tie_breaks_to_first_feature():
    # binary fractions keep the two deviations exactly equal
    model = identity_model(2)
    spec = AttackSpec(epsilon=0.25, alpha=0.125, steps=1, clamp_lo=-1, clamp_hi=1)
    x_obs = flat([0.375, -0.25])
    x_hat = cca(model, x_obs, spec).data
    np.testing.assert_array_equal(x_hat.ravel(), [0.25, -0.125])
    m = cca_mask(model, x_obs, spec, 1)
    np.testing.assert_array_equal(m.bits.ravel(), [1, 0])
    assert m.source == "cca_reference"


def test_cca_mask_identity_decimal_inputs_deviate_by_alpha():
    # with 0.3 / -0.2 / 0.1 the two deviations agree only up to float32 rounding
    model = identity_model(2)
    spec = AttackSpec(epsilon=0.2, alpha=0.1, steps=1, clamp_lo=-1, clamp_hi=1)
    x_obs = flat([0.3, -0.2])
    sigma = deviation(cca(model, x_obs, spec).data, x_obs).ravel()
    np.testing.assert_allclose(sigma, [0.1, 0.1], atol=2e-8)
    assert cca_mask(model, x_obs, spec, 1).bits.sum() == 1


def test_cca_mask_zero_steps_degenerate():
    model = build_model(SMALL, 0)
    x = np.random.default_rng(2).uniform(0, 1, (1, 1, 8, 8)).astype(np.float32)
    m = cca_mask(model, x, AttackSpec(epsilon=0.1, alpha=0.02, steps=0), 2)
    np.testing.assert_array_equal(m.bits.ravel(), [1, 1] + [0] * 14)


def test_cca_mask_equals_explicit_pipeline():
    model = build_model(SMALL, 3).eval()
    x = np.random.default_rng(3).uniform(0, 1, (3, 1, 8, 8)).astype(np.float32)
    spec = AttackSpec(epsilon=0.1, alpha=0.03, steps=4, random_start=False)
    x_hat = cca(model, x, spec).data
    with T.no_grad():
        sigma = deviation(model.penultimate(x_hat).data, model.penultimate(x).data)
    np.testing.assert_array_equal(cca_mask(model, x, spec, 5).bits, top_k_mask(sigma, 5).bits)


# --- diagnostics ------------------------------------------------------------------

def test_sparsity_examples():
    assert sparsity(np.zeros(5)) == 0
    assert sparsity([0.0, 1e-9, 0.5], tol=1e-6) == 1


@given(st.lists(st.sampled_from([0.0, -1.0, 2.5, 1e-30]), max_size=10))
def test_sparsity_tol_zero_counts_nonzeros(z):
    assert sparsity(z, tol=0) == sum(1 for v in z if v != 0)


def test_sparsity_negative_tol_rejected():
    with pytest.raises(ValueError):
        sparsity([1.0], tol=-1)


def test_cosine_examples():
    assert cosine_similarity([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == pytest.approx(1.0)
    assert cosine_similarity([1.0, 0.0], [0.0, 3.0]) == 0.0


def test_cosine_zero_vector_warns():
    T.WARNINGS.clear()
    assert cosine_similarity([0.0, 0.0], [1.0, 1.0]) == 0.0
    assert T.WARNINGS["cosine_zero"] == 1


@given(vectors, st.randoms())
def test_cosine_bounded(a, rnd):
    b = [rnd.uniform(-5, 5) for _ in a]
    c = cosine_similarity(a, b)
    assert -1.0 <= c <= 1.0


@given(vectors, st.randoms(), st.floats(0, 100))
def test_consistency_partition_exact(a, rnd, beta):
    b = [rnd.uniform(-1e3, 1e3) for _ in a]
    prof = consistency_profile(a, b, beta)
    both = np.concatenate([prof.consistent, prof.inconsistent])
    assert sorted(both.tolist()) == list(range(len(a)))
    assert np.all(prof.sigma[prof.consistent] <= beta)
    assert np.all(prof.sigma[prof.inconsistent] > beta)


def test_default_beta_is_tenth_of_mean_abs():
    z = np.array([[1.0, -3.0], [0.0, 4.0]])
    assert default_beta(z) == pytest.approx(0.2)
