"""Robust Wasserstein profile (RWP) for linear regression and its limit laws.

Cost: ``||x - x'||_2^2`` between equal responses, ``inf`` otherwise.  The
support is every predictor (labeled and unlabeled) paired with the labeled
responses.  The profile at ``beta`` is the cheapest transport of the labeled
empirical measure onto that support under which the square-loss estimating
equation ``E[X (Y - beta'X)] = 0`` holds.  Its dual is

    R_n(beta) = max_lam (1/n) sum_i min_j { ||X_i - X_j||^2 - lam' X_j (Y_i - beta'X_j) }.

The scaled profile converges to a limit law whose ``1 - alpha`` quantile,
divided by the scaling rate, calibrates the uncertainty radius.  For ``d >= 2``
a limit draw needs the root ``zeta`` of

    z = -E[V psi'(zeta' V zeta)] zeta,    V = (e I - X beta')(e I - beta X'),

which is the minimiser of the strictly convex potential
``2 zeta'z + E[psi(zeta' V zeta)]``; the limit value is minus the minimum:

    d = 2 :  psi(q) = q - (1 - exp(-L q)) / L      (exponential first-hit time, rate L)
    d >= 3:  psi(q) = 2/(d+2) * L * q**(d/2 + 1)

with ``L(X) = gamma f_X(X) pi^(d/2) / Gamma(d/2 + 1)``.  ``z`` is Gaussian with
the covariance of the score ``X e``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.optimize import linprog
from scipy.spatial import cKDTree
from scipy.special import gammaln
from scipy.stats import multivariate_normal

_CHUNK = 2_000_000  # matrix entries per block when scanning all pairs
_LP_OPTIONS = {"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10}


@dataclass
class RwpInstance:
    X: np.ndarray
    Y: np.ndarray
    X_unlabeled: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.Y = np.asarray(self.Y, dtype=float).reshape(-1)
        d = self.X.shape[1]
        U = np.asarray(self.X_unlabeled, dtype=float)
        self.X_unlabeled = U.reshape(-1, d) if U.size else np.empty((0, d))
        self.beta = np.asarray(self.beta, dtype=float).reshape(-1)
        if self.beta.size != d or self.Y.size != self.X.shape[0]:
            raise ValueError("inconsistent RWP instance shapes")
        if self.X.shape[0] < 1:
            raise ValueError("need at least one labeled point")

    @property
    def predictors(self) -> np.ndarray:
        return np.vstack([self.X, self.X_unlabeled])

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def N(self) -> int:
        return self.n + self.X_unlabeled.shape[0]

    @property
    def gamma(self) -> float:
        return self.N / self.n


@dataclass
class RwpResult:
    value: float
    lam: np.ndarray
    iterations: int
    gap: float


def _pair_terms(inst: RwpInstance, rows, cols=None):
    """Costs and constraint vectors for pairs ``(i, j)``, ``i`` in rows."""
    P = inst.predictors if cols is None else inst.predictors[cols]
    Xi = inst.X[rows]
    c = np.sum((Xi[:, None, :] - P[None, :, :]) ** 2, axis=-1)
    g = P[None, :, :] * (inst.Y[rows][:, None] - P @ inst.beta)[:, :, None]
    return c, g


def _scan(inst: RwpInstance, lam, with_cost: bool = True):
    """Dual function at ``lam`` with the minimising ``j`` for every ``i``."""
    P = inst.predictors
    proj = P @ lam
    s = P @ inst.beta
    n, N = inst.n, inst.N
    # v_ij = |x_i|^2 + [x_i, y_i, 1] @ [-2 p_j; -proj_j; |p_j|^2 + proj_j s_j]; the first
    # term does not move the argmin, so one product per block ranks all j
    if with_cost:
        R = np.vstack([-2.0 * P.T, -proj[None, :], (np.sum(P * P, axis=1) + proj * s)[None, :]])
        A = np.hstack([inst.X, inst.Y[:, None], np.ones((n, 1))])
    else:
        R = np.vstack([-proj[None, :], (proj * s)[None, :]])
        A = np.hstack([inst.Y[:, None], np.ones((n, 1))])
    step = max(1, _CHUNK // max(N, 1))
    jmin = np.empty(n, dtype=int)
    for start in range(0, n, step):
        stop = min(n, start + step)
        jmin[start:stop] = np.argmin(A[start:stop] @ R, axis=1)
    # exact values at the chosen pair and at the zero-cost pair (i, i)
    rows = np.arange(n)
    vmin = _pair_value(inst, rows, jmin, proj, s, with_cost)
    vself = _pair_value(inst, rows, rows, proj, s, with_cost)
    use_self = vself < vmin
    jmin[use_self] = rows[use_self]
    vmin = np.minimum(vmin, vself)
    return float(vmin.mean()), jmin, vmin


def _pair_value(inst: RwpInstance, rows, cols, proj, s, with_cost: bool):
    v = -proj[cols] * (inst.Y[rows] - s[cols])
    if with_cost:
        c = np.sum((inst.X[rows] - inst.predictors[cols]) ** 2, axis=1)
        v = v + np.where(rows == cols, 0.0, c)
    return v


def _nearest(inst: RwpInstance, k: int) -> np.ndarray:
    k = min(k, inst.N)
    _, idx = cKDTree(inst.predictors).query(inst.X, k=k)
    return np.asarray(idx, dtype=int).reshape(inst.n, k)


class _Candidates:
    """Restricted pairs ``(i, j)`` with precomputed costs and constraint vectors."""

    def __init__(self, inst: RwpInstance, cols: np.ndarray):
        self.inst = inst
        self.cols = cols  # (n, k)
        self._fill()

    def _fill(self):
        inst = self.inst
        P = inst.predictors[self.cols]  # (n, k, d)
        self.c = np.sum((inst.X[:, None, :] - P) ** 2, axis=-1)
        self.c[self.cols == np.arange(inst.n)[:, None]] = 0.0
        self.g = P * (inst.Y[:, None] - P @ inst.beta)[:, :, None]

    def add(self, j):
        """Append column ``j[i]`` to row ``i`` where it is not present yet."""
        fresh = ~np.any(self.cols == j[:, None], axis=1)
        if not np.any(fresh):
            return False
        self.cols = np.concatenate([self.cols, j[:, None]], axis=1)
        self._fill()
        return True

    def evaluate(self, lam, with_cost: bool = True):
        vals = (self.c if with_cost else 0.0) - self.g @ lam
        j = np.argmin(vals, axis=1)
        rows = np.arange(self.inst.n)
        return float(vals[rows, j].mean()), -self.g[rows, j].mean(axis=0)


def _cutting_plane(inst: RwpInstance, cand: _Candidates, box: float, rtol: float, atol: float,
                   max_iter: int, with_cost: bool = True):
    """Cutting-plane maximisation of the dual (or of its recession function) on a box.

    Every cut is a supergradient inequality of either the full function or its
    restriction to candidate pairs (an upper bound of the full function), so
    the model bounds the maximum from above while full scans give the lower
    bound and new candidate pairs.
    """
    d = inst.X.shape[1]
    lam = np.zeros(d)
    best_val, best_lam = -math.inf, lam
    cut_v, cut_g, cut_l = [], [], []

    def add_cut(v, g, at):
        cut_v.append(v)
        cut_g.append(g)
        cut_l.append(at.copy())

    def full_scan(at):
        nonlocal best_val, best_lam
        v, jmin, _ = _scan(inst, at, with_cost)
        P = inst.predictors[jmin]
        add_cut(v, -(P * (inst.Y - P @ inst.beta)[:, None]).mean(axis=0), at)
        if v > best_val:
            best_val, best_lam = v, at.copy()
        return v, jmin

    def at_box():
        return bool(d) and np.max(np.abs(best_lam)) >= box * (1 - 1e-6)

    full_scan(lam)
    gap = math.inf
    for it in range(1, max_iter + 1):
        # model: max theta s.t. theta <= v_k + g_k'(lam - l_k), |lam| <= box
        # values are O(1/n); rescale theta so LP tolerances stay below the target gap
        scale = max(max(cut_v), abs(best_val)) or 1.0
        G = np.asarray(cut_g) / scale
        rhs = np.asarray(cut_v) / scale - np.einsum("kd,kd->k", G, np.asarray(cut_l))
        A = np.hstack([-G, np.ones((G.shape[0], 1))])
        res = linprog(np.r_[np.zeros(d), -1.0], A_ub=A, b_ub=rhs,
                      bounds=[(-box, box)] * d + [(None, None)], method="highs", options=_LP_OPTIONS)
        if res.status != 0:
            raise RuntimeError(f"RWP cutting-plane LP failed: {res.message}")
        prev = lam
        lam, upper = res.x[:d], float(res.x[d]) * scale
        gap = upper - best_val
        if it > 1 and np.array_equal(lam, prev):
            # the model stopped moving: take the exact value here and stop
            fv, jmin = full_scan(lam)
            if not cand.add(jmin) or fv >= best_val:
                return best_val, best_lam, upper, at_box(), it
        if gap <= rtol * abs(upper) + atol:
            return best_val, best_lam, upper, at_box(), it
        v, g = cand.evaluate(lam, with_cost)
        add_cut(v, g, lam)
        if upper - v <= rtol * abs(upper) + atol:
            # restricted model exhausted at lam; consult the full function
            fv, jmin = full_scan(lam)
            if fv < v:
                cand.add(jmin)
    raise RuntimeError(f"RWP dual did not converge in {max_iter} rounds (gap {gap:.3g})")


def rwp_dual(inst: RwpInstance, rtol: float = 1e-7, atol: float = 1e-14, max_iter: int = 5000,
             neighbours: int = 24, box: float = 1e3, box_max: float = 1e12) -> RwpResult:
    """Maximise the concave dual over ``lam`` by cutting planes.

    Stops once ``upper - lower <= rtol * |upper| + atol``.  If the maximiser
    sits on the box, the recession function ``mean_i min_j (-lam' g_ij)`` is
    maximised on the unit box: a positive value certifies that the dual is
    unbounded, i.e. no distribution on the support meets the estimating
    equation, and ``inf`` is returned.  Otherwise the box grows.
    """
    cols = np.concatenate([np.arange(inst.n)[:, None], _nearest(inst, neighbours)], axis=1)
    cand = _Candidates(inst, cols)
    total = 0
    while True:
        val, lam, upper, at_box, it = _cutting_plane(inst, cand, box, rtol, atol, max_iter)
        total += it
        if not at_box:
            return RwpResult(val, lam, total, upper - val)
        rec, _, _, _, it = _cutting_plane(inst, cand, 1.0, rtol, atol, max_iter, with_cost=False)
        total += it
        if rec > 1e-12:  # rounding noise aside, positive growth certifies unboundedness
            return RwpResult(math.inf, lam, total, math.inf)
        if box >= box_max:
            raise RuntimeError("RWP dual maximiser keeps growing without certified unboundedness")
        box *= 100.0


def rwp_value(inst: RwpInstance, **kwargs) -> float:
    return rwp_dual(inst, **kwargs).value


def rwp_primal(inst: RwpInstance) -> float:
    """Profile from the primal transport LP over all ``n * N`` pairs (small instances)."""
    n, N, d = inst.n, inst.N, inst.X.shape[1]
    c, g = _pair_terms(inst, np.arange(n))
    c[np.arange(n), np.arange(n)] = 0.0
    A_rows = sparse.kron(sparse.eye(n), np.ones((1, N)))
    A_est = np.concatenate([g[:, :, k].reshape(1, -1) for k in range(d)], axis=0)
    A = sparse.vstack([A_rows, sparse.csr_matrix(A_est)]).tocsr()
    b = np.concatenate([np.full(n, 1.0 / n), np.zeros(d)])
    res = linprog(c.reshape(-1), A_eq=A, b_eq=b, bounds=(0, None), method="highs", options=_LP_OPTIONS)
    if res.status == 2:
        return math.inf
    if res.status != 0:
        raise RuntimeError(f"RWP primal LP failed: {res.message}")
    return float(res.fun)


# ---------------------------------------------------------------------------
# limit laws


def scaling_rate(n: int, d: int) -> float:
    """Rate at which the profile is scaled for a nondegenerate limit."""
    if d <= 2:
        return float(n)
    return float(n) ** (0.5 + 3.0 / (2 * d + 2))


def plugin_moments(X, Y, beta):
    """``(E[X^2 e^2], E[(e - beta X)^2])`` estimated from one-dimensional data."""
    X = np.asarray(X, dtype=float).reshape(-1)
    e = np.asarray(Y, dtype=float) - beta * X
    b = float(np.asarray(beta).reshape(-1)[0])
    return float(np.mean(X * X * e * e)), float(np.mean((e - b * X) ** 2))


def kappa1(moments) -> float:
    num, den = moments
    if num <= 0 or den <= 0:
        raise ValueError("limit-law moments must be positive")
    return num / den


def sample_limit_d1(moments, rng, size: int = 1) -> np.ndarray:
    """Draws of ``kappa_1 * chi^2_1``."""
    k = kappa1(moments)
    z = rng.standard_normal(size)
    return k * z * z


@dataclass
class LimitLawSample:
    value: float
    d: int
    z: np.ndarray
    zeta: np.ndarray


def gaussian_density(X):
    """Gaussian fitted to the rows of ``X``, returned as a density evaluator."""
    X = np.asarray(X, dtype=float)
    mvn = multivariate_normal(mean=X.mean(axis=0), cov=np.atleast_2d(np.cov(X, rowvar=False)))
    return lambda pts: np.atleast_1d(mvn.pdf(pts))


def ball_volume(d: int) -> float:
    return math.exp(0.5 * d * math.log(math.pi) - gammaln(d / 2 + 1))


class PoolLimitLaw:
    """Limit law of the scaled profile for ``d >= 2`` with expectations over a Monte Carlo pool.

    Parameters
    ----------
    X, e:
        Pool of predictor draws ``(M, d)`` and residual draws ``(M,)``.
    beta:
        Profiled parameter.
    gamma:
        Ratio ``N / n`` of all predictors to labeled ones.
    density:
        Callable evaluating the predictor density at rows of ``X``; a Gaussian
        fitted to the pool is used when omitted.
    """

    def __init__(self, X, e, beta, gamma: float, density=None, tol: float = 1e-8, max_newton: int = 100):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        M, d = X.shape
        if d < 2:
            raise ValueError("use sample_limit_d1 for d = 1")
        if gamma <= 0:
            raise ValueError("gamma must be positive")
        self.X, self.e = X, np.asarray(e, dtype=float).reshape(-1)
        self.beta = np.asarray(beta, dtype=float).reshape(-1)
        self.d, self.M, self.gamma = d, M, float(gamma)
        self.tol, self.max_newton = tol, max_newton
        density = density or gaussian_density(X)
        self.rate = self.gamma * np.asarray(density(X), dtype=float).reshape(-1) * ball_volume(d)
        score = X * self.e[:, None]
        self.z_cov = score.T @ score / M
        # V_i = M_i' M_i with M_i = e_i I - beta X_i'
        Mi = self.e[:, None, None] * np.eye(d)[None] - self.beta[None, :, None] * X[:, None, :]
        self.V = np.einsum("mki,mkj->mij", Mi, Mi)
        if np.linalg.matrix_rank(self.V.mean(axis=0)) < d:
            raise ValueError("pooled E[V] is singular")

    # psi and its first two derivatives, per pool point, evaluated at q (S, M)
    def _psi(self, q):
        L = self.rate[None, :]
        if self.d == 2:
            x = L * q
            em = -np.expm1(-x)
            # x - (1 - exp(-x)) cancels for small x; use its Taylor series there
            c = (1.0 / 2, -1.0 / 6, 1.0 / 24, -1.0 / 120, 1.0 / 720, -1.0 / 5040, 1.0 / 40320)
            series = x * x * np.polynomial.polynomial.polyval(x, c)
            g = np.where(x < 0.05, series, x - em)
            return g / L, em, L * (1.0 - em)
        h = self.d / 2.0
        return (2.0 / (self.d + 2)) * L * q ** (h + 1), L * q ** h, h * L * q ** (h - 1)

    def _quad(self, zeta):
        Vz = np.einsum("mij,sj->smi", self.V, zeta)
        q = np.einsum("si,smi->sm", zeta, Vz)
        return np.maximum(q, 0.0), Vz

    def potential(self, zeta, z):
        zeta, z = np.atleast_2d(zeta), np.atleast_2d(z)
        q, _ = self._quad(zeta)
        psi, _, _ = self._psi(q)
        return 2.0 * np.sum(zeta * z, axis=1) + psi.mean(axis=1)

    def fixed_point_map(self, zeta):
        """``E[V psi'(zeta' V zeta)] zeta``; the root condition reads ``z = -map(zeta)``."""
        zeta = np.atleast_2d(zeta)
        q, Vz = self._quad(zeta)
        _, dpsi, _ = self._psi(q)
        return np.einsum("sm,smi->si", dpsi, Vz) / self.M

    def _start(self, z):
        """Minimiser of the potential along the ray ``-t * E[V]^{-1} z``."""
        u = -np.linalg.solve(self.V.mean(axis=0), z.T).T
        a = np.sum(u * z, axis=1)  # <= 0, the slope of the potential at t = 0
        q, _ = self._quad(u)  # (S, M)
        if self.d >= 3:
            b = np.mean(self.rate[None, :] * q ** (self.d / 2 + 1), axis=1) * 2.0 / (self.d + 2)
            with np.errstate(divide="ignore", invalid="ignore"):
                t = np.where(b > 0, (-2.0 * a / np.where(b > 0, (self.d + 2) * b, 1.0)) ** (1.0 / (self.d + 1)), 0.0)
            return t[:, None] * u

        # d = 2: the ray derivative 2a + 2t E[q psi'(t^2 q)] increases in t; bracket and
        # bisect to a few digits, Newton does the rest
        Lq = self.rate[None, :] * q

        def slope(t):
            return 2.0 * a + 2.0 * t * np.mean(q * -np.expm1(-(t[:, None] ** 2) * Lq), axis=1)

        live = a < 0
        lo, hi = np.zeros_like(a), np.ones_like(a)
        for _ in range(200):
            grow = live & (slope(hi) < 0)
            if not np.any(grow):
                break
            lo, hi = np.where(grow, hi, lo), np.where(grow, 2.0 * hi, hi)
        for _ in range(12):
            mid = 0.5 * (lo + hi)
            neg = slope(mid) < 0
            lo, hi = np.where(neg, mid, lo), np.where(neg, hi, mid)
        return np.where(live, 0.5 * (lo + hi), 0.0)[:, None] * u

    def solve(self, z):
        """Roots ``zeta`` for each row of ``z`` by damped Newton steps on the potential."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        zeta = self._start(z)
        scale = np.maximum(1.0, np.linalg.norm(z, axis=1))
        active = np.ones(z.shape[0], dtype=bool)
        for _ in range(self.max_newton):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            zt, zz = zeta[idx], z[idx]
            q, Vz = self._quad(zt)
            _, dpsi, d2psi = self._psi(q)
            resid = zz + np.einsum("sm,smi->si", dpsi, Vz) / self.M
            done = np.linalg.norm(resid, axis=1) <= self.tol * scale[idx]
            active[idx[done]] = False
            if np.all(done):
                break
            keep = ~done
            idx, zt, zz, resid = idx[keep], zt[keep], zz[keep], resid[keep]
            dpsi, d2psi, Vz = dpsi[keep], d2psi[keep], Vz[keep]
            H = (2.0 * np.einsum("sm,mij->sij", dpsi, self.V)
                 + 4.0 * np.einsum("sm,smi,smj->sij", d2psi, Vz, Vz)) / self.M
            grad = 2.0 * resid
            try:
                step = -np.linalg.solve(H, grad[:, :, None])[:, :, 0]
            except np.linalg.LinAlgError:
                step = -grad
            f0 = self.potential(zt, zz)
            t = np.ones(idx.size)
            slope = np.sum(grad * step, axis=1)
            for _ in range(60):
                f1 = self.potential(zt + t[:, None] * step, zz)
                ok = f1 <= f0 + 1e-4 * t * slope + 1e-15 * np.abs(f0)
                if np.all(ok):
                    break
                t = np.where(ok, t, 0.5 * t)
            zeta[idx] = zt + t[:, None] * step
        if np.any(active):
            raise RuntimeError("limit-law fixed point did not converge")
        return zeta

    def values(self, z, zeta):
        """Limit value ``-2 zeta'z - E[psi(zeta' V zeta)]``."""
        return -self.potential(zeta, z)

    def sample(self, rng, size: int, chunk: int = 256) -> np.ndarray:
        z = rng.multivariate_normal(np.zeros(self.d), self.z_cov, size=size)
        out = np.empty(size)
        for start in range(0, size, chunk):
            zs = z[start:start + chunk]
            out[start:start + chunk] = self.values(zs, self.solve(zs))
        return out

    def draw(self, rng) -> LimitLawSample:
        z = rng.multivariate_normal(np.zeros(self.d), self.z_cov, size=1)
        zeta = self.solve(z)
        return LimitLawSample(float(self.values(z, zeta)[0]), self.d, z[0], zeta[0])


def sample_limit_d2(X, e, beta, gamma, rng, size=1, density=None) -> np.ndarray:
    if np.atleast_2d(X).shape[1] != 2:
        raise ValueError("sample_limit_d2 needs two-dimensional predictors")
    return PoolLimitLaw(X, e, beta, gamma, density).sample(rng, size)


def sample_limit_d3plus(X, e, beta, gamma, rng, size=1, density=None) -> np.ndarray:
    if np.atleast_2d(X).shape[1] < 3:
        raise ValueError("sample_limit_d3plus needs d >= 3")
    return PoolLimitLaw(X, e, beta, gamma, density).sample(rng, size)


def select_delta(alpha: float, n: int, d: int, samples) -> float:
    """``1 - alpha`` quantile of limit-law draws divided by the scaling rate."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    samples = np.asarray(samples, dtype=float)
    return float(np.quantile(samples, 1.0 - alpha)) / scaling_rate(n, d)


def simulate_regression(n: int, gamma: float, beta, rng, noise: float = 1.0) -> RwpInstance:
    """Gaussian design ``X ~ N(0, I)``, ``Y = beta'X + noise * N(0, 1)``, ``N = round(gamma n)``."""
    beta = np.asarray(beta, dtype=float).reshape(-1)
    d = beta.size
    N = int(round(gamma * n))
    if N < n:
        raise ValueError("gamma must be at least 1")
    X = rng.standard_normal((n, d))
    Y = X @ beta + noise * rng.standard_normal(n)
    U = rng.standard_normal((N - n, d))
    return RwpInstance(X, Y, U, beta)


def simulate_scaled_profile(n: int, gamma: float, beta, reps: int, rng, noise: float = 1.0) -> np.ndarray:
    """``scaling_rate(n, d) * R_n(beta)`` over independent simulated instances."""
    d = np.asarray(beta).size
    out = np.empty(reps)
    for r in range(reps):
        out[r] = scaling_rate(n, d) * rwp_value(simulate_regression(n, gamma, beta, rng, noise))
    return out
