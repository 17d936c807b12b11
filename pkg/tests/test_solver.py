import numpy as np
import pytest
from scipy.optimize import minimize, minimize_scalar

from ssldro.data import Dataset, build_support
from ssldro.objective import DualObjective, dual_value, inner_max_exact
from ssldro.solver import (
    DivergenceError, SgdConfig, accuracy, cross_validate_delta, exact_train, log_loss, norm_prox,
    penalized_logistic_objective, regularized_logistic_baseline, sgd_train, stratified_folds,
)
from ssldro.transport import TransportCost

TC = TransportCost(2, 1)


def logistic_mle(X, y):
    f = lambda b: np.mean(np.logaddexp(0, -y * (X @ b)))
    g = lambda b: -(X * (y / (1 + np.exp(y * (X @ b))))[:, None]).mean(0)
    return minimize(f, np.zeros(X.shape[1]), jac=g, method="BFGS", options={"gtol": 1e-12}).x


def overlapping_classes(rng, n, d):
    X = rng.normal(size=(n, d))
    y = np.where(X @ np.full(d, 0.5) + rng.logistic(size=n) > 0, 1.0, -1.0)
    return Dataset(X, y)


def test_sgd_delta_zero_squared_is_ols(rng):
    X = rng.normal(size=(50, 2))
    y = X @ np.array([1.0, -2.0]) + 0.05 * rng.normal(size=50)
    L = Dataset(X, y)
    m = sgd_train(build_support(L), L, 0.0, SgdConfig(iterations=10_000, gradient="exact"), loss="squared")
    assert np.linalg.norm(m.beta - np.linalg.lstsq(X, y, rcond=None)[0]) <= 1e-3


def test_sgd_is_deterministic(rng):
    L = overlapping_classes(rng, 6, 2)
    S = build_support(L, Dataset(rng.normal(size=(3, 2))))
    cfg = SgdConfig(iterations=300, seed=3)
    a, b = sgd_train(S, L, 0.1, cfg), sgd_train(S, L, 0.1, cfg)
    assert np.array_equal(a.beta, b.beta) and a.lam == b.lam


def test_sgd_lambda_stays_nonnegative(rng):
    L = overlapping_classes(rng, 6, 2)
    S = build_support(L, Dataset(rng.normal(size=(3, 2))))
    m = sgd_train(S, L, 5.0, SgdConfig(iterations=500, trace_every=50))
    assert m.lam >= 0


def test_sgd_divergence_is_reported():
    L = Dataset([[1e200], [-1e200]], [1e200, 3.0])
    with pytest.raises(DivergenceError):
        sgd_train(build_support(L), L, 0.0, SgdConfig(iterations=50, a=1e10, gradient="exact"), loss="squared")


def tiny_instance():
    # overlapping labels keep the optimum bounded
    L = Dataset([[-1.0], [0.5], [2.0], [1.0]], [-1.0, 1.0, 1.0, -1.0])
    U = Dataset([[0.0]])
    return L, build_support(L, U)


def grid_oracle(S, L, delta, eps):
    """min over (beta, lam) of the smoothed objective by a beta grid and 1-D lam minimisation."""
    obj = DualObjective(S, L, TC, "logistic", delta=delta, epsilon=eps)

    def over_lam(b):
        res = minimize_scalar(lambda l: obj.smoothed_value(np.array([b]), l), bounds=(0, 200), method="bounded",
                              options={"xatol": 1e-10})
        return min(res.fun, obj.smoothed_value(np.array([b]), 0.0))

    grid = np.linspace(-5, 100, 2101)
    vals = [over_lam(b) for b in grid]
    b0 = grid[int(np.argmin(vals))]
    res = minimize_scalar(over_lam, bounds=(b0 - 0.05, b0 + 0.05), method="bounded", options={"xatol": 1e-10})
    return res.fun


def test_tiny_instance_against_grid_oracle():
    L, S = tiny_instance()
    best = grid_oracle(S, L, 0.3, 0.5)
    ex = exact_train(S, L, 0.3, tc=TC, epsilon=0.5)
    assert ex.objective == pytest.approx(best, abs=1e-6)
    sg = sgd_train(S, L, 0.3, SgdConfig(iterations=20_000), epsilon=0.5)
    assert abs(sg.objective - best) <= 1e-2
    assert abs(sg.objective - ex.objective) <= 1e-2


def test_exact_delta_zero_logistic_is_mle(rng):
    L = overlapping_classes(rng, 200, 5)
    m = exact_train(build_support(L), L, 0.0)
    assert np.linalg.norm(m.beta - logistic_mle(L.X, L.y)) <= 1e-4


def test_exact_delta_zero_squared_is_ols(rng):
    X = rng.normal(size=(200, 5))
    y = X @ rng.normal(size=5) + 0.3 * rng.normal(size=200)
    L = Dataset(X, y)
    m = exact_train(build_support(L), L, 0.0, loss="squared")
    assert np.linalg.norm(m.beta - np.linalg.lstsq(X, y, rcond=None)[0]) <= 1e-4


def test_exact_objective_dominates_risk_and_matches_dual(rng):
    for _ in range(5):
        L = overlapping_classes(rng, 8, 2)
        S = build_support(L, Dataset(rng.normal(size=(4, 2))))
        m = exact_train(S, L, 0.2, epsilon=0.05)
        obj = DualObjective(S, L, TC, "logistic", delta=0.2, epsilon=0.05)
        assert m.objective >= obj.empirical_risk(m.beta)
        # smoothed optimum brackets the unsmoothed worst case at the same beta
        hard = dual_value(S, L, m.beta, 0.2, TC, "logistic")[0]
        assert hard - 1e-9 <= m.objective <= hard + 0.05 * np.log(len(S)) + 1e-9


@pytest.mark.parametrize("q,p", [(1, np.inf), (2, 2), (np.inf, 1)])
def test_regularization_bound(q, p, rng):
    tc = TransportCost(q, 1)
    for _ in range(10):
        L = overlapping_classes(rng, 5, 3)
        S = build_support(L, Dataset(rng.normal(size=(4, 3))))
        beta, delta = rng.normal(size=3) * 2, rng.uniform(0, 1)
        worst = inner_max_exact(S, L, beta, delta, tc, "logistic").value
        assert worst <= log_loss(beta, L) + delta * np.linalg.norm(beta, ord=p) + 1e-12


def test_stratified_folds_balance():
    y = np.array([1.0] * 6 + [-1.0] * 4)
    f = stratified_folds(y, 2, seed=0)
    for k in range(2):
        assert (y[f == k] == 1).sum() == 3 and (y[f == k] == -1).sum() == 2


def test_cv_grid_zero_and_duplicates(rng):
    L = overlapping_classes(rng, 12, 2)
    U = Dataset(rng.normal(size=(5, 2)))
    best, table = cross_validate_delta(L, U, [0.0], folds=3)
    assert best == 0.0 and len(table) == 1
    a = cross_validate_delta(L, U, [0.0, 0.1, 0.1, 1.0], folds=3)
    b = cross_validate_delta(L, U, [1.0, 0.1, 0.0], folds=3)
    assert a == b
    with pytest.raises(ValueError):
        cross_validate_delta(L, U, [0.1], folds=1)
    with pytest.raises(ValueError):
        cross_validate_delta(L, U, [], folds=3)


def test_cv_one_standard_error_rule(rng):
    L = overlapping_classes(rng, 20, 2)
    best, table = cross_validate_delta(L, None, [0.0, 0.05, 0.5, 2.0], folds=4)
    means = np.array([r["mean"] for r in table])
    i = int(np.argmin(means))
    threshold = means[i] + table[i]["se"]
    assert best == min(r["delta"] for r in table if r["mean"] <= threshold)


def test_cv_picks_nonzero_delta_on_small_mixture():
    """With 10 labeled points from a 2-D Gaussian mixture, CV should mostly pick delta > 0."""
    picks = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        y = np.r_[np.ones(5), -np.ones(5)]
        X = rng.normal(size=(10, 2)) + 0.8 * y[:, None]
        yu = rng.choice([-1.0, 1.0], size=60)
        U = Dataset(rng.normal(size=(60, 2)) + 0.8 * yu[:, None])
        best, _ = cross_validate_delta(Dataset(X, y), U, [0.0, 0.01, 0.1, 1.0], folds=5, seed=seed)
        picks.append(best)
    assert np.mean(np.array(picks) > 0) > 0.5


def test_norm_prox_is_minimiser(rng):
    for p in (1, 2, np.inf):
        for _ in range(20):
            v, t = rng.normal(size=4), rng.uniform(0.05, 1.5)
            z = norm_prox(v, t, p)
            f = lambda w: t * np.linalg.norm(w, ord=p) + 0.5 * np.sum((w - v) ** 2)
            for _ in range(20):
                assert f(z) <= f(z + 1e-3 * rng.normal(size=4)) + 1e-12


def cd_lasso_logistic(X, y, lam, sweeps=20_000):
    """Coordinate descent with exact 1-D minimisation per coordinate (independent oracle)."""
    n, d = X.shape
    b = np.zeros(d)
    for _ in range(sweeps):
        old = b.copy()
        for j in range(d):
            def f(t):
                bb = b.copy()
                bb[j] = t
                return np.mean(np.logaddexp(0, -y * (X @ bb))) + lam * abs(t)
            cands = [minimize_scalar(f, bounds=(lo, hi), method="bounded", options={"xatol": 1e-13}).x
                     for lo, hi in ((-50, 0), (0, 50))] + [0.0]
            b[j] = min(cands, key=f)
        if np.max(np.abs(b - old)) < 1e-12:
            break
    return b


def test_l1_baseline_matches_coordinate_descent(rng):
    L = overlapping_classes(rng, 30, 3)
    lam = 0.05
    m = regularized_logistic_baseline(L, lam, p_norm=1)
    oracle = cd_lasso_logistic(L.X, L.y, lam)
    f = lambda b: penalized_logistic_objective(b, L, lam, 1)
    assert f(m.beta) == pytest.approx(f(oracle), abs=1e-6)


@pytest.mark.parametrize("p", [2, np.inf])
def test_baseline_local_optimality(p, rng):
    L = overlapping_classes(rng, 30, 3)
    m = regularized_logistic_baseline(L, 0.05, p_norm=p)
    f = lambda b: penalized_logistic_objective(b, L, 0.05, p)
    for _ in range(50):
        assert f(m.beta) <= f(m.beta + 1e-4 * rng.normal(size=3)) + 1e-12


def test_baseline_limits(rng):
    L = overlapping_classes(rng, 100, 3)
    m0 = regularized_logistic_baseline(L, 0.0)
    assert np.linalg.norm(m0.beta - logistic_mle(L.X, L.y)) <= 1e-5
    big = regularized_logistic_baseline(L, 1e3)
    assert np.allclose(big.beta, 0.0) and big.objective == pytest.approx(np.log(2))


def test_metrics_tie_rule():
    ds = Dataset([[1.0], [2.0], [3.0]], [1.0, -1.0, 1.0])
    assert accuracy(np.zeros(1), ds) == pytest.approx(2 / 3)
    assert log_loss(np.zeros(1), ds) == pytest.approx(np.log(2))
