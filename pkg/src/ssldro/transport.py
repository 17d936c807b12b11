"""Ground cost and exact optimal-transport discrepancy on finite supports.

The cost between ``(x, y)`` and ``(x', y')`` is ``||x - x'||_q ** rho`` when the
labels agree and ``inf`` otherwise.  Infinite cost is IEEE ``inf`` so that
``exp(-inf / eps) == 0`` exactly downstream.

Discrepancies are computed with a transportation simplex (u-v method).  Mass
can only move inside a label class, so the problem splits into one finite-cost
transportation problem per class.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

LP_TOL = 1e-9


@dataclass(frozen=True)
class TransportCost:
    q: float = 2.0
    rho: float = 1.0

    def __post_init__(self):
        if not self.q >= 1:
            raise ValueError(f"norm order q must be >= 1, got {self.q}")
        if not self.rho >= 1:
            raise ValueError(f"exponent rho must be >= 1, got {self.rho}")

    def __call__(self, xu, yu, xv, yv) -> float:
        xu, xv = np.asarray(xu, dtype=float), np.asarray(xv, dtype=float)
        if xu.shape != xv.shape:
            raise ValueError(f"dimension mismatch {xu.shape} vs {xv.shape}")
        if yu != yv:
            return np.inf
        return float(np.linalg.norm(xu - xv, ord=self.q) ** self.rho)

    def to_points(self, X, y, x, label) -> np.ndarray:
        """Costs from every row of ``(X, y)`` to the single point ``(x, label)``."""
        X = np.asarray(X, dtype=float)
        d = np.linalg.norm(X - np.asarray(x, dtype=float), ord=self.q, axis=-1) ** self.rho
        return np.where(np.asarray(y) == label, d, np.inf)

    def matrix(self, Xa, ya, Xb, yb) -> np.ndarray:
        """Cost matrix of shape ``(len(Xa), len(Xb))``."""
        Xa, Xb = np.asarray(Xa, dtype=float), np.asarray(Xb, dtype=float)
        if Xa.shape[1] != Xb.shape[1]:
            raise ValueError(f"dimension mismatch {Xa.shape[1]} vs {Xb.shape[1]}")
        diff = Xa[:, None, :] - Xb[None, :, :]
        d = np.linalg.norm(diff, ord=self.q, axis=-1) ** self.rho
        same = np.asarray(ya)[:, None] == np.asarray(yb)[None, :]
        return np.where(same, d, np.inf)


@dataclass
class TransportPlan:
    """Optimal coupling stored densely; ``mass[u, v]`` moves from atom ``u`` of P to atom ``v`` of Q."""

    mass: np.ndarray
    value: float

    def entries(self, tol: float = 0.0):
        """Nonzero ``(u, v, mass)`` triples in row-major order."""
        u, v = np.nonzero(self.mass > tol)
        return [(int(a), int(b), float(self.mass[a, b])) for a, b in zip(u, v)]


def transportation_simplex(supply, demand, cost, max_iter: int = 10_000):
    """Solve ``min <C, pi>`` subject to row sums ``supply`` and column sums ``demand``.

    All costs must be finite and ``sum(supply) == sum(demand)``.  Returns the
    optimal plan and value.  Entering cells follow Bland's rule (first cell with
    negative reduced cost) to avoid cycling on degenerate tableaux.
    """
    a = np.asarray(supply, dtype=float).copy()
    b = np.asarray(demand, dtype=float).copy()
    C = np.asarray(cost, dtype=float)
    m, k = C.shape
    if not np.all(np.isfinite(C)):
        raise ValueError("transportation_simplex needs finite costs")
    if abs(a.sum() - b.sum()) > LP_TOL:
        raise ValueError("supply and demand totals differ")

    # north-west corner start; exactly m + k - 1 basic cells (some may carry 0)
    flow = np.zeros((m, k))
    basis = set()
    i = j = 0
    ra, rb = a.copy(), b.copy()
    while i < m and j < k:
        t = min(ra[i], rb[j])
        flow[i, j] = t
        basis.add((i, j))
        ra[i] -= t
        rb[j] -= t
        if i == m - 1 and j == k - 1:
            break
        if (ra[i] <= rb[j] and i < m - 1) or j == k - 1:
            i += 1
        else:
            j += 1

    for _ in range(max_iter):
        adj = [[] for _ in range(m + k)]
        for (r, c) in basis:
            adj[r].append(m + c)
            adj[m + c].append(r)
        # potentials: u_r + v_c = C[r, c] on basic cells
        pot = np.full(m + k, np.nan)
        pot[0] = 0.0
        queue = deque([0])
        while queue:
            node = queue.popleft()
            for nb in adj[node]:
                if np.isnan(pot[nb]):
                    r, c = (node, nb - m) if node < m else (nb, node - m)
                    pot[nb] = C[r, c] - pot[node]
                    queue.append(nb)
        u, v = pot[:m], pot[m:]
        reduced = C - u[:, None] - v[None, :]
        neg = np.argwhere(reduced < -1e-12)
        if neg.size == 0:
            return flow, float(np.sum(flow * C))
        ei, ej = (int(neg[0][0]), int(neg[0][1]))

        # tree path from column ej back to row ei closes the cycle
        parent = {m + ej: None}
        queue = deque([m + ej])
        while queue:
            node = queue.popleft()
            if node == ei:
                break
            for nb in adj[node]:
                if nb not in parent:
                    parent[nb] = node
                    queue.append(nb)
        path = []
        node = ei
        while parent[node] is not None:
            path.append(node)
            node = parent[node]
        path.append(node)
        path.reverse()  # m+ej, ..., ei
        cycle = []
        for p, q in zip(path[:-1], path[1:]):
            cycle.append((q, p - m) if q < m else (p, q - m))
        # cycle edges alternate -, +, -, ... starting next to the entering cell
        minus = cycle[0::2]
        plus = cycle[1::2]
        theta = min(flow[c] for c in minus)
        leaving = next(c for c in minus if flow[c] == theta)
        for c in minus:
            flow[c] -= theta
        for c in plus:
            flow[c] += theta
        flow[ei, ej] += theta
        basis.remove(leaving)
        flow[leaving] = 0.0
        basis.add((ei, ej))
    raise RuntimeError("transportation simplex did not converge")


def _as_distribution(p, size: int, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=float).reshape(-1)
    if p.shape[0] != size:
        raise ValueError(f"{name} has {p.shape[0]} weights for {size} atoms")
    if np.any(p < -LP_TOL):
        raise ValueError(f"{name} has negative weights")
    if abs(p.sum() - 1.0) > LP_TOL:
        raise ValueError(f"{name} sums to {p.sum()}, not 1")
    return np.clip(p, 0.0, None)


def optimal_plan(P, Xp, yp, Q, Xq, yq, tc: TransportCost) -> TransportPlan:
    """Exact optimal coupling between ``P`` on ``(Xp, yp)`` and ``Q`` on ``(Xq, yq)``.

    Returns a plan with value ``inf`` (and no mass) when label-class masses
    differ, since every coupling then moves mass across labels.
    """
    P = _as_distribution(P, len(Xp), "P")
    Q = _as_distribution(Q, len(Xq), "Q")
    yp, yq = np.asarray(yp), np.asarray(yq)
    C = tc.matrix(Xp, yp, Xq, yq)
    mass = np.zeros(C.shape)
    total = 0.0
    for label in np.union1d(yp, yq):
        rows = np.flatnonzero((yp == label) & (P > 0))
        cols = np.flatnonzero((yq == label) & (Q > 0))
        pm, qm = P[rows].sum(), Q[cols].sum()
        if abs(pm - qm) > LP_TOL:
            return TransportPlan(np.zeros(C.shape), np.inf)
        if rows.size == 0:
            continue
        # renormalise the class to remove round-off before the simplex
        supply = P[rows]
        demand = Q[cols] * (pm / qm)
        flow, val = transportation_simplex(supply, demand, C[np.ix_(rows, cols)])
        mass[np.ix_(rows, cols)] = flow
        total += val
    return TransportPlan(mass, total)


def discrepancy(P, Q, X, y, tc: TransportCost) -> float:
    """Optimal transport discrepancy between two distributions on the same atoms."""
    return optimal_plan(P, X, y, Q, X, y, tc).value


@dataclass
class MetricReport:
    symmetry: float
    identity: float
    triangle: float
    triples: int

    @property
    def ok(self) -> bool:
        return self.symmetry <= 1e-12 and self.identity <= 1e-12 and self.triangle <= 1e-9


def metric_check(tc: TransportCost, X, y, triples: int = 20, rng=None) -> MetricReport:
    """Probe the metric axioms of ``D_c ** (1/rho)`` on random distributions over ``(X, y)``.

    All sampled distributions share the same per-label masses so that every
    discrepancy is finite.  Reports the largest violation of each axiom.
    """
    rng = np.random.default_rng(rng)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    labels = np.unique(y)
    class_mass = rng.dirichlet(np.ones(labels.size))

    def draw():
        p = np.zeros(len(y))
        for lab, w in zip(labels, class_mass):
            idx = np.flatnonzero(y == lab)
            p[idx] = w * rng.dirichlet(np.ones(idx.size))
        return p / p.sum()

    def dist(p, q):
        return discrepancy(p, q, X, y, tc) ** (1.0 / tc.rho)

    sym = ident = tri = 0.0
    for _ in range(triples):
        p, q, r = draw(), draw(), draw()
        dpq, dqp = dist(p, q), dist(q, p)
        sym = max(sym, abs(dpq - dqp))
        ident = max(ident, dist(p, p))
        tri = max(tri, dist(p, r) - dpq - dist(q, r))
    return MetricReport(sym, ident, max(tri, 0.0), triples)
