"""Dual objective of the semi-supervised DRO problem and its log-sum-exp smoothing.

For a labeled sample ``v = (x, y)`` and a support point ``u`` the score is
``l(u, beta) - lam * c(u, v)``.  The dual integrand is

    phi(v)     = lam * delta + max_u score(u)
    phi_eps(v) = lam * delta + eps * log(sum_u exp(score(u) / eps))

with label-flipped ``u`` (infinite cost) excluded.  The training problem is
``min_{beta, lam >= 0} mean_v phi(v)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

from .data import Dataset, SupportSet
from .losses import Loss, get_loss
from .transport import TransportCost

INNER_MAX_CAP = 10_000
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class SmoothingConfig:
    epsilon: float
    delta: float = 0.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not self.delta >= 0:
            raise ValueError(f"delta must be nonnegative, got {self.delta}")


def default_epsilon(support_size: int) -> float:
    """``1 / log |X_N|`` floored at 1e-4."""
    return max(1.0 / math.log(max(support_size, 2)), 1e-4)


def sample_scores(support: SupportSet, x, y, beta, lam, tc: TransportCost, loss) -> tuple:
    """Scores ``l(u) - lam * c(u, (x, y))`` of the label-compatible support points.

    Returns ``(idx, scores, costs)`` where ``idx`` indexes the support.
    """
    loss = get_loss(loss)
    idx = support.compatible(y)
    if idx.size == 0:
        raise ValueError("no support point shares the sample's label")
    Xu = support.X[idx]
    c = tc.to_points(Xu, support.y[idx], x, y)
    s = loss.value(Xu, support.y[idx], beta) - lam * c
    return idx, s, c


def _smooth_max(s, eps, axis=None):
    """``eps * log(sum exp(s / eps))`` written as ``max + eps * log(sum ...) >= max``.

    The correction term is a log of a sum containing ``exp(0) = 1``, so it is
    nonnegative and the result never rounds below the hard maximum.
    """
    m = np.max(s, axis=axis, keepdims=True)
    corr = eps * np.log(np.sum(np.exp((s - m) / eps), axis=axis, keepdims=True))
    out = m + corr
    return out.item() if axis is None else np.squeeze(out, axis=axis)


def phi(support: SupportSet, x, y, beta, lam, delta, tc, loss) -> float:
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    if len(support) == 0:
        raise ValueError("empty support")
    _, s, _ = sample_scores(support, x, y, beta, lam, tc, loss)
    return float(lam * delta + s.max())


def phi_argmax(support: SupportSet, x, y, beta, lam, tc, loss) -> int:
    """Support index attaining ``phi``; ties go to the lowest index."""
    idx, s, _ = sample_scores(support, x, y, beta, lam, tc, loss)
    return int(idx[np.argmax(s)])


def phi_eps(support: SupportSet, x, y, beta, lam, config: SmoothingConfig, tc, loss) -> float:
    if len(support) == 0:
        raise ValueError("empty support")
    _, s, _ = sample_scores(support, x, y, beta, lam, tc, loss)
    return float(lam * config.delta + _smooth_max(s, config.epsilon))


def grad_phi_eps(support: SupportSet, x, y, beta, lam, config: SmoothingConfig, tc, loss):
    """Gradient of ``phi_eps`` in ``(beta, lam)`` as softmax-weighted averages."""
    loss = get_loss(loss)
    idx, s, c = sample_scores(support, x, y, beta, lam, tc, loss)
    w = softmax(s / config.epsilon)
    g = loss.grad(support.X[idx], support.y[idx], beta)
    return w @ g, float(config.delta - w @ c)


class DualObjective:
    """``E_{P_n}`` of the dual integrand for a fixed support, labeled set and cost.

    The labeled-to-support cost matrix is computed once; it does not depend on
    ``(beta, lam)``.  All methods accept an optional ``rows`` selection of
    labeled samples and then average over those rows only.
    """

    def __init__(self, support: SupportSet, labeled: Dataset, tc: TransportCost, loss,
                 delta: float = 0.0, epsilon: float | None = None):
        if len(support) == 0:
            raise ValueError("empty support")
        if labeled.y is None:
            raise ValueError("labeled data required")
        self.support = support
        self.labeled = labeled
        self.tc = tc
        self.loss: Loss = get_loss(loss)
        self.delta = float(delta)
        self.epsilon = default_epsilon(len(support)) if epsilon is None else float(epsilon)
        # (n, M) cost from each labeled sample to each support point
        self.cost = tc.matrix(labeled.X, labeled.y, support.X, support.y)
        self.finite = np.isfinite(self.cost)
        if not np.all(self.finite.any(axis=1)):
            raise ValueError("a labeled sample has no label-compatible support point")
        self._cost0 = np.where(self.finite, self.cost, 0.0)

    @property
    def n(self) -> int:
        return len(self.labeled)

    def _scores(self, beta, lam, rows=None):
        lu = self.loss.value(self.support.X, self.support.y, beta)
        fin = self.finite if rows is None else self.finite[rows]
        c0 = self._cost0 if rows is None else self._cost0[rows]
        return lu, np.where(fin, lu[None, :] - lam * c0, -np.inf)

    def phi(self, beta, lam, rows=None) -> np.ndarray:
        _, s = self._scores(beta, lam, rows)
        return lam * self.delta + s.max(axis=1)

    def value(self, beta, lam, rows=None) -> float:
        return float(self.phi(beta, lam, rows).mean())

    def smoothed(self, beta, lam, rows=None) -> np.ndarray:
        _, s = self._scores(beta, lam, rows)
        return lam * self.delta + _smooth_max(s, self.epsilon, axis=1)

    def smoothed_value(self, beta, lam, rows=None) -> float:
        return float(self.smoothed(beta, lam, rows).mean())

    def smoothed_grad(self, beta, lam, rows=None):
        """Mean smoothed value and its gradient ``(value, dbeta, dlam)``."""
        _, s = self._scores(beta, lam, rows)
        eps = self.epsilon
        w = np.exp((s - s.max(axis=1, keepdims=True)) / eps)  # infinite-cost entries are exactly 0
        w /= w.sum(axis=1, keepdims=True)
        c0 = self._cost0 if rows is None else self._cost0[rows]
        gl = self.loss.grad(self.support.X, self.support.y, beta)
        value = float(np.mean(lam * self.delta + _smooth_max(s, eps, axis=1)))
        dbeta = (w @ gl).mean(axis=0)
        dlam = float(self.delta - np.mean(np.sum(w * c0, axis=1)))
        return value, dbeta, dlam

    def empirical_risk(self, beta) -> float:
        return float(self.loss.value(self.labeled.X, self.labeled.y, beta).mean())


@dataclass
class WorstCaseDistribution:
    """Optimal plan of the inner maximization.

    ``plan[u, v]`` is the mass moved from labeled sample ``v`` to support point ``u``.
    """

    plan: np.ndarray
    marginal: np.ndarray
    value: float
    budget_used: float

    def check(self, cost: np.ndarray, delta: float, tol: float = 1e-9) -> None:
        n = self.plan.shape[1]
        if np.any(self.plan < -tol):
            raise AssertionError("negative plan entries")
        if np.any(self.plan[~np.isfinite(cost)] > 0):
            raise AssertionError("mass on an infinite-cost pair")
        if not np.allclose(self.plan.sum(axis=0), 1.0 / n, atol=tol, rtol=0):
            raise AssertionError("column sums differ from 1/n")
        if self.budget_used > delta + tol:
            raise AssertionError(f"budget {self.budget_used} exceeds delta {delta}")


def _upper_frontier(c: np.ndarray, l: np.ndarray) -> list:
    """Vertices of the concave, nondecreasing envelope of points ``(c, l)``.

    Returns positions into ``c`` starting at the cheapest point and stopping
    once the envelope no longer increases.
    """
    order = np.lexsort((-l, c))  # by cost, best loss first on ties
    hull = []
    last_c = None
    for k in order:
        if last_c is not None and c[k] == last_c:
            continue
        last_c = c[k]
        while len(hull) >= 2:
            o, a = hull[-2], hull[-1]
            cross = (c[a] - c[o]) * (l[k] - l[o]) - (l[a] - l[o]) * (c[k] - c[o])
            if cross >= 0:
                hull.pop()
            else:
                break
        hull.append(k)
    out = [hull[0]]
    for k in hull[1:]:
        if l[k] <= l[out[-1]]:
            break
        out.append(k)
    return out


def inner_max_exact(support: SupportSet, labeled: Dataset, beta, delta, tc, loss,
                    cap: int = INNER_MAX_CAP) -> WorstCaseDistribution:
    """Exact worst-case distribution within transport budget ``delta``.

    Each labeled sample spreads mass ``1/n`` over label-compatible support
    points, so the linear program is a fractional multiple-choice knapsack.
    It is solved exactly by walking each sample's concave cost/loss frontier
    and spending the shared budget greedily on the steepest segments.
    """
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    n, M = len(labeled), len(support)
    if n * M > cap:
        raise ValueError(f"instance has {n * M} plan variables, cap is {cap}")
    loss = get_loss(loss)
    cost = tc.matrix(labeled.X, labeled.y, support.X, support.y)  # (n, M)
    lu = loss.value(support.X, support.y, beta)

    frontiers = []
    segments = []  # (slope, v, position along frontier)
    base = 0.0
    for v in range(n):
        cand = np.flatnonzero(np.isfinite(cost[v]))
        f = cand[_upper_frontier(cost[v, cand], lu[cand])]
        frontiers.append(f)
        base += lu[f[0]]
        for k in range(1, len(f)):
            dc = cost[v, f[k]] - cost[v, f[k - 1]]
            dl = lu[f[k]] - lu[f[k - 1]]
            segments.append((dl / dc, v, k))
    # stable sort keeps each sample's segments in frontier order on equal slopes
    segments.sort(key=lambda t: -t[0])

    budget = n * delta
    gain = 0.0
    position = np.zeros(n, dtype=int)
    frac = np.zeros(n)
    for slope, v, k in segments:
        if budget <= 0:
            break
        dc = cost[v, frontiers[v][k]] - cost[v, frontiers[v][k - 1]]
        take = min(1.0, budget / dc)
        gain += take * dc * slope
        budget -= take * dc
        if take < 1.0:
            frac[v] = take
            position[v] = k - 1
            break
        position[v] = k

    plan = np.zeros((M, n))
    for v in range(n):
        f, k = frontiers[v], position[v]
        if frac[v] > 0:
            plan[f[k], v] += (1.0 - frac[v]) / n
            plan[f[k + 1], v] += frac[v] / n
        else:
            plan[f[k], v] += 1.0 / n
    finite = np.isfinite(cost.T)
    spent = float(np.sum(plan[finite] * cost.T[finite]))
    return WorstCaseDistribution(plan, plan.sum(axis=1), (base + gain) / n, spent)


def dual_value(support: SupportSet, labeled: Dataset, beta, delta, tc, loss,
               tol: float = 1e-8, max_doublings: int = 60):
    """Minimize ``lam -> mean_v phi(v; beta, lam)`` over ``lam >= 0``.

    The upper end of the bracket ``[0, b]`` doubles from 1 until the function
    stops decreasing, then golden-section search narrows it to ``tol``.
    Returns ``(value, lam_opt)``.
    """
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    obj = DualObjective(support, labeled, tc, loss, delta=delta, epsilon=1.0)

    def g(lam):
        return obj.value(beta, lam)

    b = 1.0
    gb = g(b)
    for _ in range(max_doublings):
        g2 = g(2 * b)
        if g2 >= gb:
            break
        b, gb = 2 * b, g2
    else:
        raise RuntimeError(f"dual bracket did not close after {max_doublings} doublings")

    lo, hi = 0.0, 2 * b
    x1 = hi - _GOLDEN * (hi - lo)
    x2 = lo + _GOLDEN * (hi - lo)
    f1, f2 = g(x1), g(x2)
    while hi - lo > tol * max(1.0, hi):
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - _GOLDEN * (hi - lo)
            f1 = g(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + _GOLDEN * (hi - lo)
            f2 = g(x2)
    cands = [(g(0.0), 0.0), (f1, x1), (f2, x2), (gb, b)]
    value, lam = min(cands)
    return value, lam
