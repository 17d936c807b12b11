import numpy as np
import pytest
from scipy.stats import chisquare

from conftest import random_instance
from ssldro.data import Dataset, build_support
from ssldro.mlmc import P_LEVEL, MLMCGradient, expected_draws, h_values, level_probability, unbiased_gradient
from ssldro.objective import SmoothingConfig, grad_phi_eps
from ssldro.transport import TransportCost

TC = TransportCost(2, 1)


def test_h_values_flip_and_self():
    L = Dataset([[0.0, 1.0]], [1.0])
    U = Dataset([[2.0, 0.0]])
    S = build_support(L, U)
    cfg = SmoothingConfig(0.5, 0.1)
    beta = np.array([0.2, -0.1])
    # support point 2 is the unlabeled point with label -1: flipped
    assert h_values(S, 2, L.X[0], 1.0, beta, 1.0, cfg, TC, "logistic")[:2] == (0.0, 0.0)
    h0, h1, h2 = h_values(S, 0, L.X[0], 1.0, beta, 3.0, cfg, TC, "logistic")
    expected = np.exp(np.logaddexp(0, -(L.X[0] @ beta)) / 0.5)
    assert h0 == pytest.approx(expected) and h1 == 0.0


def test_level_law_and_expected_draws(rng):
    est = MLMCGradient(build_support(Dataset([[0.0], [1.0]], [1.0, -1.0])), TC, "logistic", SmoothingConfig(1.0))
    _, _, G = est.sample(np.zeros((100_000, 1)), np.ones(100_000), np.zeros(1), 0.5, rng)
    assert G.min() == 0
    counts = np.bincount(G, minlength=8)
    observed = np.r_[counts[:7], counts[7:].sum()]
    probs = np.r_[level_probability(np.arange(7)), (1 - P_LEVEL) ** 7]
    assert chisquare(observed, probs * G.size).pvalue > 1e-3
    draws = 2.0 ** (G + 1) + 1
    assert draws.mean() == pytest.approx(expected_draws(), rel=0.05)
    assert expected_draws(0.4) == np.inf


def test_unbiased_against_exact_gradient(rng):
    for _ in range(3):
        L, U, S = random_instance(rng, n=3, n_unlabeled=2)
        cfg = SmoothingConfig(rng.choice([0.5, 1.0]), rng.uniform(0, 0.5))
        beta, lam = rng.normal(size=2), rng.uniform(0.1, 1.5)
        est = MLMCGradient(S, TC, "logistic", cfg)
        x, y = L.X[0], L.y[0]
        M = 200_000
        Lam, Gam, _ = est.sample(np.repeat(x[None], M, axis=0), np.full(M, y), beta, lam, rng)
        gb, gl = grad_phi_eps(S, x, y, beta, lam, cfg, TC, "logistic")
        for est_vals, exact in ((Lam, gl), (Gam[:, 0], gb[0]), (Gam[:, 1], gb[1])):
            se = est_vals.std(ddof=1) / np.sqrt(M)
            assert abs(est_vals.mean() - exact) <= 3 * se + 1e-12


def test_single_sample_api_and_determinism():
    L = Dataset([[0.0], [1.0]], [1.0, -1.0])
    S = build_support(L, Dataset([[0.5]]))
    cfg = SmoothingConfig(1.0, 0.1)
    a = unbiased_gradient(S, L.X[0], 1.0, np.ones(1), 0.3, cfg, TC, "logistic", np.random.default_rng(4))
    b = unbiased_gradient(S, L.X[0], 1.0, np.ones(1), 0.3, cfg, TC, "logistic", np.random.default_rng(4))
    assert a.Lambda == b.Lambda and np.array_equal(a.Gamma, b.Gamma)
    assert a.draws_used == 2 ** (a.G + 1) + 1
    with pytest.raises(ValueError):
        unbiased_gradient(S, L.X[0], 1.0, np.ones(1), -1.0, cfg, TC, "logistic", np.random.default_rng(0))


def test_missing_label_pool():
    S = build_support(Dataset([[0.0]], [1.0]))
    est = MLMCGradient(S, TC, "logistic", SmoothingConfig(1.0))
    with pytest.raises(ValueError):
        est.sample(np.zeros((1, 1)), [-1.0], np.zeros(1), 0.0, np.random.default_rng(0))


def test_batch_mean_reduces_spread():
    L = Dataset([[0.0], [1.0], [2.0]], [1.0, 1.0, -1.0])
    S = build_support(L, Dataset([[0.5], [1.5]]))
    est = MLMCGradient(S, TC, "logistic", SmoothingConfig(0.5, 0.1))
    rng = np.random.default_rng(1)
    singles = [est.sample_mean(L.X[0], 1.0, np.ones(1), 0.5, rng, batch=1)[0] for _ in range(400)]
    batched = [est.sample_mean(L.X[0], 1.0, np.ones(1), 0.5, rng, batch=16)[0] for _ in range(400)]
    assert np.std(batched) < np.std(singles)
