import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import TOL, away_from_zero, check
from memderain import autodiff as ad
from memderain.autodiff import Tensor
from memderain.errors import ContractError, DimensionError
from memderain.losses import (BSWConfig, LossWeights, background_prediction_loss, bsw_loss, bsw_loss_batch,
                              bsw_mask, channel_covariance, cross_information_loss, kmeans_1d,
                              masked_cov_l1, self_consistency_loss, total_loss, variance_matrix)


def _t(x):
    return Tensor(np.asarray(x, dtype=np.float64))


# ---- L1 terms ---------------------------------------------------------------

def test_background_loss_examples():
    z = np.zeros((1, 3, 2, 2))
    assert float(background_prediction_loss(_t(z), _t(z)).data) == 0.0
    assert float(background_prediction_loss(_t(z), _t(z + 1)).data) == 1.0
    a = np.random.default_rng(0).normal(size=(2, 3, 4, 4))
    b = np.random.default_rng(1).normal(size=(2, 3, 4, 4))
    assert float(background_prediction_loss(_t(a), _t(b)).data) == pytest.approx(
        float(background_prediction_loss(_t(b), _t(a)).data), abs=0)


def test_background_loss_shape_mismatch():
    with pytest.raises(DimensionError):
        background_prediction_loss(_t(np.zeros((1, 3, 2, 2))), _t(np.zeros((1, 3, 4, 4))))


def test_cross_and_self_examples():
    i = np.full((1, 3, 2, 2), 0.5)
    assert float(cross_information_loss(_t(i), _t(i)).data) == 0.0
    assert float(cross_information_loss(_t(i), _t(i - 0.25)).data) == pytest.approx(0.25)
    bg, rain = np.full_like(i, 0.2), np.full_like(i, 0.3)
    assert float(self_consistency_loss(_t(i), _t(bg), _t(rain)).data) == pytest.approx(0.0, abs=1e-15)
    assert float(self_consistency_loss(_t(i), _t(bg), _t(rain * 0)).data) == pytest.approx(0.3)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_l1_terms_nonnegative(seed):
    r = np.random.default_rng(seed)
    a, b, c = (r.normal(size=(2, 3, 4, 4)) for _ in range(3))
    for v in (background_prediction_loss(_t(a), _t(b)), cross_information_loss(_t(a), _t(b)),
              self_consistency_loss(_t(a), _t(b), _t(c))):
        assert float(v.data) >= 0.0


# ---- covariance / variance / mask -----------------------------------------

def test_covariance_of_constant_map_is_zero():
    cov = channel_covariance(_t(np.full((4, 3, 3), 2.5)))
    np.testing.assert_array_equal(cov.data, np.zeros((4, 4)))


def test_covariance_matches_numpy():
    q = np.random.default_rng(3).normal(size=(5, 4, 6))
    np.testing.assert_allclose(channel_covariance(_t(q)).data, np.cov(q.reshape(5, -1), bias=True), atol=1e-12)


def test_covariance_needs_three_dims():
    with pytest.raises(DimensionError):
        channel_covariance(_t(np.zeros((4, 9))))


@settings(max_examples=80, deadline=None)
@given(c=st.integers(1, 8), h=st.integers(2, 6), seed=st.integers(0, 2**31 - 1))
def test_covariance_symmetric_psd(c, h, seed):
    q = np.random.default_rng(seed).normal(size=(c, h, h)) * np.random.default_rng(seed).uniform(0.01, 10)
    cov = channel_covariance(_t(q)).data
    np.testing.assert_allclose(cov, cov.T, atol=1e-12)
    assert np.linalg.eigvalsh(cov).min() >= -1e-10 * max(1.0, np.abs(cov).max())


@settings(max_examples=80, deadline=None)
@given(c=st.integers(1, 8), seed=st.integers(0, 2**31 - 1))
def test_variance_matrix_identity(c, seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(c, c)), r.normal(size=(c, c))
    a, b = a + a.T, b + b.T
    V = variance_matrix(a, b)
    np.testing.assert_allclose(V, ((a - b) / 2) ** 2, rtol=0, atol=1e-12)
    assert np.all(V >= 0)
    np.testing.assert_array_equal(variance_matrix(a, a), np.zeros_like(a))


def test_variance_matrix_example():
    np.testing.assert_allclose(variance_matrix([[1.0]], [[3.0]]), [[1.0]])


def test_kmeans_1d_separated_groups():
    vals = np.array([0.0, 0.1, 5.0, 5.1, 10.0, 10.2, 20.0])
    labels = kmeans_1d(vals, 4)
    np.testing.assert_array_equal(labels, [0, 0, 1, 1, 2, 2, 3])


def test_kmeans_1d_brute_force():
    # exhaustive search over contiguous splits of the sorted values
    from itertools import combinations

    r = np.random.default_rng(0)
    for _ in range(20):
        vals = np.sort(r.normal(size=9))
        best = np.inf
        for cuts in combinations(range(1, 9), 3):
            parts = np.split(vals, cuts)
            best = min(best, sum(((p - p.mean()) ** 2).sum() for p in parts))
        labels = kmeans_1d(vals, 4)
        got = sum(((vals[labels == k] - vals[labels == k].mean()) ** 2).sum() for k in range(4))
        assert got == pytest.approx(best, abs=1e-12)


def test_mask_low_group_selected():
    V = np.array([[0.0, 0.0, 9.0],
                  [0.0, 1.0, 4.0],
                  [9.0, 4.0, 16.0]])
    mask = bsw_mask(V, BSWConfig(l=2, h=4))
    expected = np.array([[1, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=float)
    np.testing.assert_array_equal(mask, expected)


def test_mask_constant_variance_selects_everything():
    np.testing.assert_array_equal(bsw_mask(np.zeros((3, 3))), np.ones((3, 3)))


@settings(max_examples=80, deadline=None)
@given(c=st.integers(1, 8), seed=st.integers(0, 2**31 - 1), grouping=st.sampled_from(["cluster", "quantile"]))
def test_mask_symmetric_binary(c, seed, grouping):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(c, c)), r.normal(size=(c, c))
    mask = bsw_mask(variance_matrix(a + a.T, b + b.T), BSWConfig(grouping=grouping))
    np.testing.assert_array_equal(mask, mask.T)
    assert set(np.unique(mask)) <= {0.0, 1.0}
    assert mask.sum() >= 1


def test_bsw_config_validation():
    with pytest.raises(ContractError):
        BSWConfig(l=4, h=4)
    with pytest.raises(ContractError):
        BSWConfig(grouping="median")


def test_bsw_loss_zero_for_empty_mask():
    cov = _t(np.random.default_rng(0).normal(size=(4, 4)))
    assert float(masked_cov_l1(cov, np.zeros((4, 4))).data) == 0.0


def test_bsw_loss_identical_pair():
    # identical queries give V = 0, every entry is selected
    q = np.random.default_rng(1).normal(size=(3, 4, 4))
    loss, mask = bsw_loss(_t(q), _t(q), return_mask=True)
    np.testing.assert_array_equal(mask, np.ones((3, 3)))
    cov = np.cov(q.reshape(3, -1), bias=True)
    assert float(loss.data) == pytest.approx(np.abs(cov).sum() / 9, abs=1e-12)


def test_bsw_loss_nonnegative_and_batch_mean():
    r = np.random.default_rng(2)
    qw, qv = r.normal(size=(3, 4, 5, 5)), r.normal(size=(3, 4, 5, 5))
    per = [float(bsw_loss(_t(qw[i]), _t(qv[i])).data) for i in range(3)]
    assert min(per) >= 0
    assert float(bsw_loss_batch(_t(qw), _t(qv)).data) == pytest.approx(np.mean(per), abs=1e-14)


# ---- total ------------------------------------------------------------------

def test_total_loss_weights():
    _, rep = total_loss(0.0, 0.0, 1.0, 0.0)
    assert rep.total == pytest.approx(0.001, abs=1e-15)
    _, rep = total_loss(1.0, 1.0, 1.0, 1.0)
    w = LossWeights()
    assert rep.total == pytest.approx(w.lambda_b + w.lambda_s + w.lambda_c + w.lambda_w, abs=1e-15)
    _, rep = total_loss(0.0, 0.0, 0.0, 0.0)
    assert rep.total == 0.0
    assert (rep.loss_b, rep.loss_s, rep.loss_c, rep.loss_w) == (0.0, 0.0, 0.0, 0.0)


def test_default_weights():
    w = LossWeights()
    assert (w.lambda_b, w.lambda_s, w.lambda_c) == (1.0, 0.1, 0.001)


def test_negative_weight_rejected():
    with pytest.raises(ContractError):
        LossWeights(lambda_s=-0.1)


@settings(max_examples=40, deadline=None)
@given(terms=st.lists(st.floats(0, 10), min_size=4, max_size=4),
       lams=st.lists(st.floats(0, 5), min_size=4, max_size=4))
def test_total_loss_is_weighted_sum(terms, lams):
    _, rep = total_loss(*terms, weights=LossWeights(*lams))
    assert rep.total == pytest.approx(sum(t * l for t, l in zip(terms, lams)), rel=1e-12, abs=1e-12)
    assert rep.total >= 0


# ---- gradients, 20 random trials per loss ---------------------------------

@pytest.mark.parametrize("trial", range(20))
def test_grad_background_loss(trial):
    r = np.random.default_rng([trial, 21])
    a = r.uniform(-1, 1, (2, 3, 3, 3))
    b = a + away_from_zero(r.uniform(-1, 1, a.shape))
    assert check(lambda a, b: background_prediction_loss(a, b), [a, b]) < TOL


@pytest.mark.parametrize("trial", range(20))
def test_grad_cross_loss(trial):
    r = np.random.default_rng([trial, 22])
    a = r.uniform(-1, 1, (2, 3, 3, 3))
    b = a + away_from_zero(r.uniform(-1, 1, a.shape))
    assert check(lambda a, b: cross_information_loss(a, b), [a, b]) < TOL


@pytest.mark.parametrize("trial", range(20))
def test_grad_self_consistency_loss(trial):
    r = np.random.default_rng([trial, 23])
    bg, rain = r.uniform(-1, 1, (2, 3, 3, 3)), r.uniform(-1, 1, (2, 3, 3, 3))
    img = bg + rain + away_from_zero(r.uniform(-1, 1, bg.shape))
    assert check(lambda i, b, s: self_consistency_loss(i, b, s), [img, bg, rain]) < TOL


@pytest.mark.parametrize("trial", range(20))
def test_grad_bsw_loss(trial):
    r = np.random.default_rng([trial, 24])
    qw, qv = r.uniform(-1, 1, (4, 3, 3)), r.uniform(-1, 1, (4, 3, 3))
    # freeze the mask at the unperturbed point; the loss is piecewise smooth in the queries
    _, mask = bsw_loss(_t(qw), _t(qv), return_mask=True)

    def fn(a, b):
        ca, cb = channel_covariance(a), channel_covariance(b)
        return (masked_cov_l1(ca, mask) + masked_cov_l1(cb, mask)) * 0.5

    assert check(fn, [qw, qv]) < TOL
    # with the mask held fixed the full loss agrees with the frozen-mask form
    assert float(bsw_loss(_t(qw), _t(qv)).data) == pytest.approx(float(fn(_t(qw), _t(qv)).data), abs=1e-15)


@pytest.mark.parametrize("trial", range(20))
def test_grad_total_loss(trial):
    r = np.random.default_rng([trial, 25])
    x = r.uniform(0.5, 2.0, 4)

    def fn(x):
        return total_loss(x[0] * x[0], x[1], ad.tabs(x[2]), x[3] * x[0], LossWeights(1.0, 0.1, 0.001, 0.3))[0]

    assert check(fn, [x]) < TOL
