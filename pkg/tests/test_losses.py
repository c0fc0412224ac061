import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hcr.exceptions import ConfigError, EmptyBatch, NoNegatives, ShapeMismatch
from hcr.geometry import pairwise_distances, project_to_sphere, sample_uniform_sphere
from hcr.losses import (
    HcrConfig,
    ObjectiveConfig,
    SimilarityConfig,
    composite_loss,
    cross_entropy,
    gaussian_similarity,
    hcr_loss,
    info_nce,
    pgc_loss,
)

from gradcheck import numerical_gradient, relative_error

EPS = 1e-7


def const_distances(n, value):
    d = np.full((n, n), float(value))
    np.fill_diagonal(d, 0.0)
    return d


def random_distances(rng, n, lo=0.1, hi=2.0):
    d = np.triu(rng.uniform(lo, hi, (n, n)), 1)
    return d + d.T


# --- similarity -----------------------------------------------------------

def test_similarity_defaults():
    assert gaussian_similarity(0.0) == 1.0
    assert gaussian_similarity(math.sqrt(2)) == pytest.approx(math.exp(-2), abs=1e-12)
    assert gaussian_similarity(2.0) == pytest.approx(math.exp(-4), abs=1e-12)


def test_similarity_default_normalizer_gives_unit_peak():
    cfg = SimilarityConfig()
    assert cfg.normalizer == pytest.approx(cfg.sigma * math.sqrt(2 * math.pi))
    assert cfg.peak == pytest.approx(1.0)


def test_similarity_rejects_kernel_above_one():
    with pytest.raises(ConfigError):
        gaussian_similarity(0.5, SimilarityConfig(normalizer=3.0))
    # a peak outside [0, 2] may be scaled above 1 as long as [0, 2] stays <= 1
    gaussian_similarity(1.0, SimilarityConfig(mu=-1.0, sigma=0.5, normalizer=1.2))


def test_similarity_strictly_decreasing_on_0_2():
    s = gaussian_similarity(np.linspace(0, 2, 2001))
    assert np.all(np.diff(s) < 0)
    assert s.min() > 0 and s.max() <= 1


# --- HCR ------------------------------------------------------------------

def test_hcr_half_half_is_ln2():
    d = const_distances(5, math.sqrt(math.log(2)))
    assert hcr_loss(d, d).value == pytest.approx(math.log(2), abs=1e-9)


def test_hcr_zero_distances_is_clamped_binary_entropy():
    # p = q = 1 - eps after clamping
    expected = -(1 - EPS) * math.log(1 - EPS) - EPS * math.log(EPS)
    d = const_distances(4, 0.0)
    assert hcr_loss(d, d).value == pytest.approx(expected, rel=1e-9)


def test_hcr_single_pair():
    d_g = const_distances(2, math.sqrt(-math.log(0.8)))
    d_h = const_distances(2, math.sqrt(-math.log(0.2)))
    expected = -0.8 * math.log(0.2) - 0.2 * math.log(0.8)
    assert expected == pytest.approx(1.33217, abs=1e-5)
    assert hcr_loss(d_g, d_h).value == pytest.approx(expected, abs=1e-12)


def test_hcr_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        hcr_loss(np.zeros((3, 3)), np.zeros((4, 4)))


@pytest.mark.parametrize("p", np.linspace(0.025, 0.975, 20))
def test_bce_minimised_at_target(p):
    grid = np.arange(1e-3, 1.0, 1e-3)
    bce = -p * np.log(grid) - (1 - p) * np.log(1 - grid)
    assert abs(grid[np.argmin(bce)] - p) <= 1e-3


def test_hcr_self_agreement_is_mean_binary_entropy():
    rng = np.random.default_rng(4)
    d = random_distances(rng, 7)
    p = np.exp(-d[np.triu_indices(7, 1)] ** 2)
    entropy = np.mean(-p * np.log(p) - (1 - p) * np.log(1 - p))
    loss = hcr_loss(d, d)
    assert loss.value == pytest.approx(entropy, rel=1e-12)
    assert np.all(loss.grads["d_g"][np.triu_indices(7, 1)] != 0)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25)
def test_hcr_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    n = 6
    d_g, d_h = random_distances(rng, n), random_distances(rng, n)
    perm = rng.permutation(n)
    a = hcr_loss(d_g, d_h).value
    b = hcr_loss(d_g[np.ix_(perm, perm)], d_h[np.ix_(perm, perm)]).value
    assert a == pytest.approx(b, rel=1e-12)


def test_classifier_only_has_no_projection_gradient():
    rng = np.random.default_rng(5)
    loss = hcr_loss(random_distances(rng, 5), random_distances(rng, 5))
    assert set(loss.grads) == {"d_g"}

    u = sample_uniform_sphere(6, 3, 0)
    out = composite_loss(rng.standard_normal((6, 4)), u, None, None,
                         ObjectiveConfig(unsupervised_kind="none"))
    assert np.all(out.grads["projections"] == 0)


@pytest.mark.parametrize("flow", ["classifier_only", "both"])
def test_hcr_gradients_finite_differences(flow):
    rng = np.random.default_rng(6)
    cfg = HcrConfig(similarity_h=SimilarityConfig(sigma=0.9), gradient_flow=flow)
    for _ in range(10):
        d_g, d_h = random_distances(rng, 5), random_distances(rng, 5)
        loss = hcr_loss(d_g, d_h, cfg)
        num = numerical_gradient(lambda: hcr_loss(d_g, d_h, cfg).value, d_g)
        assert relative_error(loss.grads["d_g"], num) < 1e-5
        if flow == "both":
            num = numerical_gradient(lambda: hcr_loss(d_g, d_h, cfg).value, d_h)
            assert relative_error(loss.grads["d_h"], num) < 1e-5


# --- cross entropy --------------------------------------------------------

def test_cross_entropy_uniform():
    assert cross_entropy(np.zeros((3, 4)), [0, 1, 3]).value == pytest.approx(math.log(4))


def test_cross_entropy_margin_limit():
    values = [cross_entropy(np.array([[m, 0.0, 0.0]]), [0]).value for m in (1, 10, 40)]
    assert values[0] > values[1] > values[2] and values[2] < 1e-15


def test_cross_entropy_hand_computed():
    rng = np.random.default_rng(7)
    z = rng.standard_normal((3, 5))
    y = [4, 0, 2]
    expected = 0.0
    for row, label in zip(z, y):
        m = max(row)
        expected += m + math.log(sum(math.exp(v - m) for v in row)) - row[label]
    assert cross_entropy(z, y).value == pytest.approx(expected / 3, abs=1e-10)


def test_cross_entropy_mask():
    z = np.array([[5.0, 0.0], [0.0, 5.0]])
    loss = cross_entropy(z, [1, 1], [False, True])
    assert loss.value == pytest.approx(cross_entropy(z[1:], [1]).value)
    assert np.all(loss.grads["logits"][0] == 0)
    with pytest.raises(EmptyBatch):
        cross_entropy(z, [0, 1], [False, False])


# --- InfoNCE / PGC --------------------------------------------------------

def test_info_nce_uniform_logits():
    q = np.tile([[1.0, 0.0]], (5, 1))
    assert info_nce(q, q, 0.07).value == pytest.approx(math.log(5), abs=1e-12)


def test_info_nce_antipodal_pair_near_zero():
    q = np.array([[1.0, 0.0], [-1.0, 0.0]])
    value = info_nce(q, q, 0.07).value
    assert value == pytest.approx(math.log1p(math.exp(-2 / 0.07)), rel=1e-9)
    assert value < 1e-8


@pytest.mark.parametrize("b", [2, 8, 64])
def test_info_nce_opposed_negatives_closed_form(b):
    # q_i.k_i = 1 and q_i.k_j = -1; for b > 2 the Gram matrix needs non-unit rows
    q = np.eye(b)
    k = 2 * np.eye(b) - np.ones((b, b))
    closed = math.log1p((b - 1) * math.exp(-2 / 0.07))
    value = info_nce(q, k, 0.07).value
    assert value == pytest.approx(closed, rel=1e-6)
    assert value < 1e-8


def test_info_nce_two_rows_hand_computed():
    rng = np.random.default_rng(8)
    q = sample_uniform_sphere(2, 3, rng)
    k = sample_uniform_sphere(2, 3, rng)
    tau = 0.3
    total = 0.0
    for i in range(2):
        s = [float(q[i] @ k[j]) / tau for j in range(2)]
        total += -s[i] + math.log(math.exp(s[0]) + math.exp(s[1]))
    assert info_nce(q, k, tau).value == pytest.approx(total / 2, abs=1e-10)


def test_pgc_reduces_to_info_nce():
    rng = np.random.default_rng(9)
    q, k = sample_uniform_sphere(6, 4, rng), sample_uniform_sphere(6, 4, rng)
    a = pgc_loss(q, k, np.arange(6), 0.1)
    b = info_nce(q, k, 0.1)
    assert a.value == pytest.approx(b.value, abs=1e-12)
    np.testing.assert_allclose(a.grads["queries"], b.grads["queries"], atol=1e-12)


def test_pgc_no_negatives():
    u = sample_uniform_sphere(4, 3, 0)
    with pytest.raises(NoNegatives):
        pgc_loss(u, u, [2, 2, 2, 2])


def test_pgc_brute_force_enumeration():
    rng = np.random.default_rng(10)
    q, k = sample_uniform_sphere(4, 3, rng), sample_uniform_sphere(4, 3, rng)
    labels = [0, 1, 0, 1]
    tau = 0.2
    total = 0.0
    for i in range(4):
        positives = [j for j in range(4) if labels[j] == labels[i]]
        negatives = [j for j in range(4) if labels[j] != labels[i]]
        neg = sum(math.exp(q[i] @ k[j] / tau) for j in negatives)
        per_query = 0.0
        for p in positives:
            e = math.exp(q[i] @ k[p] / tau)
            per_query += -math.log(e / (e + neg))
        total += per_query / len(positives)
    assert pgc_loss(q, k, labels, tau).value == pytest.approx(total / 4, abs=1e-10)


def test_contrastive_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        info_nce(np.ones((3, 2)), np.ones((4, 2)))


# --- composite ------------------------------------------------------------

def _batch(rng, b=8, c=4, dh=5):
    logits = rng.standard_normal((b, c))
    proj = sample_uniform_sphere(b, dh, rng)
    keys = sample_uniform_sphere(b, dh, rng)
    labels = rng.integers(0, c, b)
    mask = rng.random(b) < 0.5
    mask[0] = True
    return logits, proj, keys, labels, mask


def test_composite_ablation_equals_cross_entropy():
    rng = np.random.default_rng(11)
    logits, proj, keys, labels, mask = _batch(rng)
    cfg = ObjectiveConfig(hcr=HcrConfig(weight=0.0), lambda_u=0.0)
    out = composite_loss(logits, proj, labels, mask, cfg, keys=keys)
    ce = cross_entropy(logits, labels, mask)
    assert out.value == ce.value
    np.testing.assert_array_equal(out.grads["logits"], ce.grads["logits"])


def test_composite_is_sum_of_components():
    rng = np.random.default_rng(12)
    logits, proj, keys, labels, mask = _batch(rng)
    out = composite_loss(logits, proj, labels, mask, ObjectiveConfig(), keys=keys)
    ce = cross_entropy(logits, labels, mask).value
    nce = info_nce(proj, keys, 0.07).value
    hcr = hcr_loss(pairwise_distances(project_to_sphere(logits)), pairwise_distances(proj)).value
    assert out.value == pytest.approx(ce + nce + hcr, abs=1e-12)
    assert (out.loss_s, out.loss_u, out.loss_hcr) == (ce, nce, hcr)


@pytest.mark.parametrize("kind", ["info_nce", "pgc"])
def test_composite_gradient_finite_differences(kind):
    rng = np.random.default_rng(13)
    logits, proj, keys, labels, mask = _batch(rng)
    pseudo = np.array([0, 1, 2, 0, 1, 2, 0, 1])
    cfg = ObjectiveConfig(hcr=HcrConfig(gradient_flow="both", weight=0.7),
                          unsupervised_kind=kind, lambda_u=0.5, tau=0.5)

    def f():
        return composite_loss(logits, proj, labels, mask, cfg, keys=keys,
                              pseudo_labels=pseudo).value

    out = composite_loss(logits, proj, labels, mask, cfg, keys=keys, pseudo_labels=pseudo)
    for name, x in (("logits", logits), ("projections", proj), ("keys", keys)):
        assert relative_error(out.grads[name], numerical_gradient(f, x)) < 1e-5
