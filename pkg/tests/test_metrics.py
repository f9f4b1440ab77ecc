import math

import numpy as np
import pytest

from discondvae import metrics as M
from discondvae.data import FactorTable
from discondvae.distributions import gaussian_log_density
from discondvae.models import DiscondVAE, ModelConfig
from discondvae.rng import RandomSource
from discondvae.tensor import Tensor


def _full_crossing(cards, repeats=1):
    grids = np.meshgrid(*[np.arange(c) for c in cards], indexing="ij")
    idx = np.stack([g.reshape(-1) for g in grids], axis=1)
    idx = np.tile(idx, (repeats, 1))
    names = tuple(f"f{i}" for i in range(len(cards)))
    return FactorTable(idx.astype(np.int64), tuple(cards), names)


# -- representation dump ---------------------------------------------------

def test_dump_validation():
    with pytest.raises(M.MetricError, match="row counts"):
        M.RepresentationDump(np.zeros((3, 2)), np.zeros((4, 2)))
    bad = np.zeros((3, 2))
    bad[0, 0] = np.nan
    with pytest.raises(M.MetricError, match="non-finite"):
        M.RepresentationDump(bad, np.zeros((3, 2)))


def test_dump_round_trip(tmp_path):
    rs = np.random.RandomState(0)
    dump = M.RepresentationDump(rs.randn(7, 4).astype(np.float32),
                                rs.rand(7, 3).astype(np.float32))
    path = tmp_path / "reps.dcvk"
    dump.save(path)
    back = M.RepresentationDump.load(path)
    np.testing.assert_array_equal(back.cont, dump.cont)
    np.testing.assert_array_equal(back.alpha, dump.alpha)


def test_metric_csv(tmp_path):
    reports = [M.MetricReport("vote", 0.8125, "", 3, 200),
               M.MetricReport("gap", 0.25, "1", 3, 7680)]
    path = tmp_path / "m.csv"
    M.write_metric_csv(path, reports)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "metric,value,class,seed,n"
    assert lines[1] == "vote,0.812500,,3,200"
    assert lines[2] == "gap,0.250000,1,3,7680"


# -- variance-vote metric ----------------------------------------------------

def test_factorvae_perfect_representation():
    factors = _full_crossing((4, 5, 6))
    reps = factors.indices.astype(np.float64) * [2.0, -1.0, 0.5]
    score = M.factorvae_metric(reps, factors, RandomSource(0),
                               num_train_votes=300, num_eval_votes=100)
    assert score == 1.0


def test_factorvae_scale_invariance():
    factors = _full_crossing((4, 5, 6))
    reps = factors.indices.astype(np.float64)
    a = M.factorvae_metric(reps, factors, RandomSource(1),
                           num_train_votes=300, num_eval_votes=100)
    b = M.factorvae_metric(reps * [100.0, 0.01, 1e4], factors, RandomSource(1),
                           num_train_votes=300, num_eval_votes=100)
    assert a == b == 1.0


def test_factorvae_noise_representation_scores_low():
    rs = np.random.RandomState(2)
    factors = _full_crossing((4, 5, 6))
    reps = rs.randn(len(factors.indices), 4)
    score = M.factorvae_metric(reps, factors, RandomSource(2),
                               num_train_votes=300, num_eval_votes=100)
    assert score < 0.7


def test_factorvae_ignores_collapsed_dims():
    factors = _full_crossing((4, 5, 6))
    reps = factors.indices.astype(np.float64)
    with_dead = np.concatenate([np.full((reps.shape[0], 1), 3.25), reps], axis=1)
    score = M.factorvae_metric(with_dead, factors, RandomSource(3),
                               num_train_votes=300, num_eval_votes=100)
    assert score == 1.0


def test_factorvae_all_collapsed_raises():
    factors = _full_crossing((4, 5))
    reps = np.ones((len(factors.indices), 3))
    with pytest.raises(M.MetricError, match="collapsed"):
        M.factorvae_metric(reps, factors, RandomSource(0))


def test_factorvae_needs_two_varying_factors():
    idx = np.stack([np.arange(40) % 4, np.zeros(40, dtype=np.int64)], axis=1)
    factors = FactorTable(idx, (4, 3), ("a", "b"))
    with pytest.raises(M.MetricError, match="non-constant"):
        M.factorvae_metric(np.random.RandomState(0).randn(40, 2), factors, RandomSource(0))


def test_factorvae_deterministic_given_seed():
    factors = _full_crossing((4, 5, 6))
    reps = np.random.RandomState(4).randn(len(factors.indices), 3)
    a = M.factorvae_metric(reps, factors, RandomSource(11),
                           num_train_votes=200, num_eval_votes=50)
    b = M.factorvae_metric(reps, factors, RandomSource(11),
                           num_train_votes=200, num_eval_votes=50)
    assert a == b


# -- information gap -----------------------------------------------------------

def test_mig_near_one_for_axis_aligned_code():
    rs = np.random.RandomState(5)
    factors = _full_crossing((4, 5), repeats=40)  # N = 800
    reps = factors.indices + 0.01 * rs.randn(*factors.indices.shape)
    score = M.mig(reps, factors)
    assert 0.9 < score <= 1.0


def test_mig_noise_representation_scores_low():
    rs = np.random.RandomState(6)
    factors = _full_crossing((4, 5), repeats=40)
    reps = rs.randn(len(factors.indices), 3)
    assert M.mig(reps, factors) < 0.2


def test_mig_duplicated_best_dim_halves_score():
    rs = np.random.RandomState(7)
    factors = _full_crossing((4, 5), repeats=40)
    f = factors.indices.astype(np.float64)
    reps = np.stack([f[:, 0] + 0.01 * rs.randn(len(f)),
                     f[:, 0] + 0.01 * rs.randn(len(f)),
                     f[:, 1] + 0.01 * rs.randn(len(f))], axis=1)
    score = M.mig(reps, factors)
    assert 0.35 < score < 0.65


def test_mig_invariant_under_monotone_transforms():
    rs = np.random.RandomState(8)
    factors = _full_crossing((4, 5), repeats=10)
    reps = factors.indices + 0.1 * rs.randn(*factors.indices.shape)
    base = M.mig(reps, factors)
    assert M.mig(np.exp(reps), factors) == base
    assert M.mig(2.0 * reps + 5.0, factors) == base
    assert M.mig(reps ** 3, factors) == base  # odd power, strictly monotone


def test_mig_skips_constant_factor_with_warning():
    rs = np.random.RandomState(9)
    idx = np.stack([np.arange(200) % 4, np.zeros(200, dtype=np.int64)], axis=1)
    factors = FactorTable(idx, (4, 3), ("a", "b"))
    reps = idx[:, :1] + 0.01 * rs.randn(200, 1)
    with pytest.warns(UserWarning, match="single value"):
        score = M.mig(reps, factors)
    assert score > 0.9


def test_mig_all_constant_raises():
    idx = np.zeros((50, 2), dtype=np.int64)
    factors = FactorTable(idx, (2, 2), ("a", "b"))
    with pytest.raises(M.MetricError, match="no usable factors"):
        M.mig(np.random.RandomState(0).randn(50, 2), factors)


def test_mig_rejects_bad_bins():
    factors = _full_crossing((4, 5))
    with pytest.raises(M.MetricError, match="num_bins"):
        M.mig(np.zeros((20, 2)), factors, num_bins=1)


def test_equal_count_bins_are_balanced():
    x = np.random.RandomState(10).randn(200)
    bins = M._equal_count_bins(x, 20)
    np.testing.assert_array_equal(np.bincount(bins, minlength=20), np.full(20, 10))


def test_histogram_mi_independent_is_zero():
    # exactly balanced joint: MI must be exactly 0
    a = np.repeat(np.arange(4), 5)
    b = np.tile(np.arange(5), 4)
    assert M._histogram_mi(a, b, 4, 5) == pytest.approx(0.0, abs=1e-12)


def test_histogram_mi_identical_is_entropy():
    a = np.repeat(np.arange(4), 10)
    assert M._histogram_mi(a, a, 4, 4) == pytest.approx(math.log(4), rel=1e-10)


# -- conditional wrapper ----------------------------------------------------------

def _two_class_setup():
    # class 0: 150 rows with factor b pinned; class 1: 250 rows, both vary
    rs = np.random.RandomState(11)
    idx0 = np.stack([rs.randint(0, 4, 150), np.full(150, 2)], axis=1)
    idx1 = np.stack([rs.randint(0, 4, 250), rs.randint(0, 5, 250)], axis=1)
    idx = np.concatenate([idx0, idx1]).astype(np.int64)
    factors = FactorTable(idx, (4, 5), ("a", "b"))
    labels = np.array([0] * 150 + [1] * 250)
    reps = rs.randn(400, 3)
    return reps, factors, labels


def test_conditional_metric_weights_by_class_frequency():
    reps, factors, labels = _two_class_setup()
    seen = {}

    def fake_metric(r, table):
        seen[r.shape[0]] = table.names
        return float(table.indices.shape[1])

    weighted, per_class = M.conditional_metric(fake_metric, reps, factors, labels)
    assert per_class == {0: 1.0, 1: 2.0}
    assert weighted == pytest.approx((150 * 1.0 + 250 * 2.0) / 400)
    assert seen[150] == ("a",)        # pinned factor b dropped for class 0
    assert seen[250] == ("a", "b")


def test_conditional_metric_bounds():
    reps, factors, labels = _two_class_setup()
    weighted, per_class = M.conditional_metric(
        lambda r, t: float(len(t.names)), reps, factors, labels)
    assert min(per_class.values()) <= weighted <= max(per_class.values())


def test_conditional_metric_small_class_error():
    reps, factors, labels = _two_class_setup()
    labels = labels.copy()
    labels[:40] = 7  # 40-example class
    with pytest.raises(M.MetricError, match="class 7 has only 40"):
        M.conditional_metric(lambda r, t: 0.0, reps, factors, labels)


def test_conditional_metric_min_examples_override():
    reps, factors, labels = _two_class_setup()
    weighted, per_class = M.conditional_metric(
        lambda r, t: 1.0, reps, factors, labels, min_examples=10)
    assert weighted == 1.0


# -- clustering accuracy ----------------------------------------------------------

def test_accuracy_perfect_under_relabeling():
    truth = np.array([0, 0, 1, 1, 2, 2])
    assert M.unsupervised_accuracy(np.array([2, 2, 0, 0, 1, 1]), truth) == 1.0


def test_accuracy_majority_mapping_example():
    pred = np.array([0, 0, 0, 1])
    truth = np.array([0, 1, 0, 1])
    assert M.unsupervised_accuracy(pred, truth) == pytest.approx(0.75)


def test_accuracy_chance_level():
    rs = np.random.RandomState(12)
    truth = rs.randint(0, 2, 2000)
    pred = rs.randint(0, 2, 2000)
    acc = M.unsupervised_accuracy(pred, truth)
    assert 0.45 < acc < 0.58  # majority mapping biases slightly above 0.5


def test_accuracy_validation():
    with pytest.raises(M.MetricError, match="empty"):
        M.unsupervised_accuracy(np.array([]), np.array([]))
    with pytest.raises(M.MetricError, match="shape"):
        M.unsupervised_accuracy(np.zeros(3, dtype=int), np.zeros(4, dtype=int))


# -- extraction ---------------------------------------------------------------------

def _small_model(variant="exact", seed=0):
    pr = 0 if variant == "joint" else 2
    cfg = ModelConfig(variant=variant, public_dim=3, private_dim=pr, num_classes=3)
    return DiscondVAE(cfg, RandomSource(seed))


def test_extract_representations_matches_encode():
    m = _small_model()
    images = np.random.RandomState(13).rand(10, 1, 32, 32).astype(np.float32)
    dump = M.extract_representations(m, images, batch_size=4)
    out = m.encode(Tensor(images))
    np.testing.assert_allclose(dump.cont, m.continuous_means(out), atol=1e-6)
    np.testing.assert_allclose(dump.alpha, out.alpha.data, atol=1e-6)
    assert dump.cont.shape == (10, 5)


def test_extract_representations_leaves_no_gradients():
    m = _small_model()
    images = np.random.RandomState(14).rand(6, 1, 32, 32).astype(np.float32)
    M.extract_representations(m, images)
    assert all(p.grad is None for p in m.params.values())


# -- importance-weighted likelihood ---------------------------------------------------

def test_importance_nll_constant_loglik_closed_form():
    # proposal equals the prior, so z terms cancel and classes sum exactly
    consts = np.array([0.5, -1.0, 2.0, 0.3])

    def loglik(z, w, i):
        assert w is None
        return np.full(z.shape[0], consts[i])

    b = 3
    nll = M.importance_nll(np.zeros((b, 2)), np.zeros((b, 2)), loglik,
                           K=8, rng=RandomSource(0), num_classes=4)
    want = -(np.log(np.exp(consts - math.log(4)).sum()))
    np.testing.assert_allclose(nll, np.full(b, want), rtol=1e-10)


def test_importance_nll_exact_posterior_proposal_is_exact():
    # p(x|z) = N(x; z, s2), z ~ N(0,1): marginal is N(x; 0, 1+s2); with the
    # true posterior as proposal every importance weight equals the marginal
    s2 = 0.5
    x = np.array([0.3, -1.2, 2.0])
    post_mu = (x / (1 + s2))[:, None]
    post_lv = np.full((3, 1), math.log(s2 / (1 + s2)))

    def loglik(z, w, i):
        return gaussian_log_density(x[:, None], z, np.full_like(z, math.log(s2)))

    nll = M.importance_nll(post_mu, post_lv, loglik, K=2,
                           rng=RandomSource(1), num_classes=2)
    want = -gaussian_log_density(x[:, None], np.zeros((3, 1)),
                                 np.full((3, 1), math.log(1 + s2)))
    np.testing.assert_allclose(nll, want, rtol=1e-9)


def test_importance_nll_private_terms_cancel_at_prior():
    consts = np.array([1.0, -0.5])
    calls = []

    def loglik(z, w, i):
        calls.append((w.shape, i))
        return np.full(z.shape[0], consts[i])

    b, d, pr = 4, 2, 3
    nll = M.importance_nll(
        np.zeros((b, 2)), np.zeros((b, 2)), loglik, K=4, rng=RandomSource(2),
        num_classes=d, w_mu=np.zeros((b, d, pr)), w_logvar=np.zeros((b, d, pr)),
        prior_w_mu=np.zeros((d, pr)))
    want = -(np.log(np.exp(consts - math.log(2)).sum()))
    np.testing.assert_allclose(nll, np.full(b, want), rtol=1e-10)
    assert all(shape == (b, pr) for shape, _ in calls)


def test_importance_nll_deterministic_given_seed():
    def loglik(z, w, i):
        return -0.5 * (z ** 2).sum(axis=1)

    args = (np.full((3, 2), 0.2), np.full((3, 2), -0.1), loglik, 16)
    a = M.importance_nll(*args, rng=RandomSource(5), num_classes=2)
    b = M.importance_nll(*args, rng=RandomSource(5), num_classes=2)
    np.testing.assert_array_equal(a, b)
    c = M.importance_nll(*args, rng=RandomSource(6), num_classes=2)
    assert not np.array_equal(a, c)


@pytest.mark.parametrize("variant", ["exact", "approx", "joint"])
def test_iwae_nll_model_smoke(variant):
    m = _small_model(variant, seed=3)
    images = (np.random.RandomState(15).rand(6, 1, 32, 32) > 0.5).astype(np.float32)
    nll = M.iwae_nll(m, images, K=4, rng=RandomSource(7))
    assert np.isfinite(nll)
    assert nll > 0  # binary images under a Bernoulli decoder
    again = M.iwae_nll(m, images, K=4, rng=RandomSource(7))
    assert nll == again
