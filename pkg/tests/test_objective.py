import numpy as np
import pytest
from scipy.optimize import linprog
from scipy.special import logsumexp

from conftest import random_instance
from ssldro.data import Dataset, build_support
from ssldro.losses import get_loss
from ssldro.objective import (
    DualObjective, SmoothingConfig, default_epsilon, dual_value, grad_phi_eps, inner_max_exact, phi,
    phi_argmax, phi_eps,
)
from ssldro.transport import TransportCost

TC = TransportCost(2, 1)


def lp_worst_case(support, labeled, beta, delta, tc, loss):
    """Inner maximisation written as a plain LP and handed to HiGHS."""
    loss = get_loss(loss)
    cost = tc.matrix(labeled.X, labeled.y, support.X, support.y)
    n, M = cost.shape
    pairs = [(v, u) for v in range(n) for u in range(M) if np.isfinite(cost[v, u])]
    lu = loss.value(support.X, support.y, beta)
    obj = -np.array([lu[u] for v, u in pairs])
    A_eq = np.zeros((n, len(pairs)))
    for k, (v, u) in enumerate(pairs):
        A_eq[v, k] = 1.0
    A_ub = np.array([[cost[v, u] for v, u in pairs]])
    res = linprog(obj, A_ub=A_ub, b_ub=[delta], A_eq=A_eq, b_eq=np.full(n, 1.0 / n), bounds=(0, None),
                  method="highs")
    return -res.fun


def test_single_compatible_point_is_exact():
    L = Dataset([[1.0, 0.0]], [1.0])
    S = build_support(L)
    beta = np.array([0.3, -0.2])
    for eps in (1.0, 0.1, 1e-3):
        val = phi_eps(S, L.X[0], 1.0, beta, 0.7, SmoothingConfig(eps, 0.2), TC, "logistic")
        assert val == pytest.approx(0.7 * 0.2 + get_loss("logistic").value(L.X[0], 1.0, beta))


def test_phi_brute_force(rng):
    for _ in range(30):
        L, U, S = random_instance(rng, n=3, n_unlabeled=3)
        beta, lam, delta = rng.normal(size=2), rng.uniform(0, 3), rng.uniform(0, 1)
        x, y = L.X[0], L.y[0]
        best = max(
            get_loss("logistic").value(S.X[u], S.y[u], beta) - lam * TC(S.X[u], S.y[u], x, y)
            for u in range(len(S)) if S.y[u] == y
        )
        assert phi(S, x, y, beta, lam, delta, TC, "logistic") == pytest.approx(lam * delta + best)


def test_phi_argmax_ties_lowest_index():
    # two identical unlabeled points at the same distance and loss
    L = Dataset([[0.0]], [1.0])
    U = Dataset([[1.0], [1.0]])
    S = build_support(L, U)
    assert phi_argmax(S, L.X[0], 1.0, np.array([-5.0]), 0.0, TC, "logistic") == 1


def test_smoothing_sandwich(rng):
    for eps in (1.0, 0.1, 0.01):
        for _ in range(50):
            L, U, S = random_instance(rng, n=3, n_unlabeled=rng.integers(0, 4))
            beta, lam, delta = rng.normal(size=2) * 2, rng.uniform(0, 3), rng.uniform(0, 1)
            x, y = L.X[1], L.y[1]
            a = phi(S, x, y, beta, lam, delta, TC, "logistic")
            b = phi_eps(S, x, y, beta, lam, SmoothingConfig(eps, delta), TC, "logistic")
            assert a <= b  # exact: the smoothed maximum never rounds below the hard one
            assert b - a <= eps * np.log(len(S)) + 4 * np.spacing(abs(b))


def test_small_epsilon_recovers_phi(rng):
    L, U, S = random_instance(rng, n=2, n_unlabeled=1)
    beta = rng.normal(size=2)
    a = phi(S, L.X[0], L.y[0], beta, 0.5, 0.1, TC, "logistic")
    b = phi_eps(S, L.X[0], L.y[0], beta, 0.5, SmoothingConfig(1e-6, 0.1), TC, "logistic")
    assert abs(a - b) <= 1e-5


def test_phi_eps_matches_direct_logsumexp(rng):
    L, U, S = random_instance(rng, n=3, n_unlabeled=2)
    beta, lam, eps = rng.normal(size=2), 0.8, 0.3
    x, y = L.X[2], L.y[2]
    terms = [
        (get_loss("logistic").value(S.X[u], S.y[u], beta) - lam * TC(S.X[u], S.y[u], x, y)) / eps
        for u in range(len(S)) if S.y[u] == y
    ]
    val = phi_eps(S, x, y, beta, lam, SmoothingConfig(eps, 0.05), TC, "logistic")
    assert val == pytest.approx(lam * 0.05 + eps * logsumexp(terms))


@pytest.mark.parametrize("loss", ["logistic", "squared"])
def test_gradient_finite_differences(loss, rng):
    h = 1e-6
    for _ in range(25):
        L, U, S = random_instance(rng, n=3, n_unlabeled=2, loss=loss)
        cfg = SmoothingConfig(rng.choice([1.0, 0.3]), rng.uniform(0, 1))
        beta, lam = rng.normal(size=2), rng.uniform(0.1, 2)
        x, y = L.X[0], L.y[0]

        def f(b, l_):
            return phi_eps(S, x, y, b, l_, cfg, TC, loss)

        gb, gl = grad_phi_eps(S, x, y, beta, lam, cfg, TC, loss)
        fd_b = np.array([(f(beta + h * e, lam) - f(beta - h * e, lam)) / (2 * h) for e in np.eye(2)])
        fd_l = (f(beta, lam + h) - f(beta, lam - h)) / (2 * h)
        assert np.allclose(gb, fd_b, rtol=1e-6, atol=1e-7)
        assert gl == pytest.approx(fd_l, rel=1e-6, abs=1e-7)


def test_dual_objective_agrees_with_per_sample_functions(rng):
    L, U, S = random_instance(rng, n=4, n_unlabeled=3)
    obj = DualObjective(S, L, TC, "logistic", delta=0.2, epsilon=0.5)
    beta, lam = rng.normal(size=2), 0.9
    cfg = SmoothingConfig(0.5, 0.2)
    per = [phi_eps(S, x, y, beta, lam, cfg, TC, "logistic") for x, y in zip(L.X, L.y)]
    assert obj.smoothed_value(beta, lam) == pytest.approx(np.mean(per))
    grads = [grad_phi_eps(S, x, y, beta, lam, cfg, TC, "logistic") for x, y in zip(L.X, L.y)]
    _, gb, gl = obj.smoothed_grad(beta, lam)
    assert np.allclose(gb, np.mean([g[0] for g in grads], axis=0))
    assert gl == pytest.approx(np.mean([g[1] for g in grads]))
    hard = [phi(S, x, y, beta, lam, 0.2, TC, "logistic") for x, y in zip(L.X, L.y)]
    assert obj.value(beta, lam) == pytest.approx(np.mean(hard))


def test_default_epsilon():
    assert default_epsilon(100) == pytest.approx(1 / np.log(100))
    assert default_epsilon(1) == pytest.approx(1 / np.log(2))
    with pytest.raises(ValueError):
        SmoothingConfig(0.0)


@pytest.mark.parametrize("loss", ["logistic", "squared"])
def test_inner_max_matches_lp_oracle(loss, rng):
    for _ in range(25):
        n = rng.integers(1, 5)
        L, U, S = random_instance(rng, n=n, n_unlabeled=rng.integers(0, 4), d=rng.integers(1, 4), loss=loss)
        if loss == "squared":
            # give unlabeled points the labeled responses so transport is possible
            S = build_support(L, None)
            extra = rng.normal(size=(3, L.d))
            S = type(S)(np.vstack([S.X, extra]), np.r_[S.y, L.y[rng.integers(0, n, size=3)]],
                        np.r_[S.origin, np.full(3, 1)], S.n_labeled, 3)
        beta, delta = rng.normal(size=L.d), rng.uniform(0, 2)
        wc = inner_max_exact(S, L, beta, delta, TC, loss)
        assert wc.value == pytest.approx(lp_worst_case(S, L, beta, delta, TC, loss), abs=1e-9)
        wc.check(TC.matrix(L.X, L.y, S.X, S.y).T, delta)


def test_inner_max_delta_zero_is_identity(rng):
    L, U, S = random_instance(rng, n=4, n_unlabeled=3)
    wc = inner_max_exact(S, L, rng.normal(size=2), 0.0, TC, "logistic")
    expected = np.zeros((len(S), 4))
    expected[np.arange(4), np.arange(4)] = 0.25
    assert np.allclose(wc.plan, expected)
    assert wc.plan.sum() == pytest.approx(1.0, abs=1e-12)


def test_inner_max_cap():
    L = Dataset(np.zeros((10, 1)), np.ones(10))
    with pytest.raises(ValueError):
        inner_max_exact(build_support(L), L, np.zeros(1), 0.1, TC, "logistic", cap=50)


def test_dual_value_monotone_in_delta(rng):
    for _ in range(10):
        L, U, S = random_instance(rng, n=3, n_unlabeled=3)
        beta = rng.normal(size=2)
        vals = [dual_value(S, L, beta, d_, TC, "logistic")[0] for d_ in (0.0, 0.1, 0.5, 2.0)]
        assert all(a <= b + 1e-9 for a, b in zip(vals, vals[1:]))
        assert vals[0] >= DualObjective(S, L, TC, "logistic").empirical_risk(beta) - 1e-9
