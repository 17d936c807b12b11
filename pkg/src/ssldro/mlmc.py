"""Unbiased estimators of the smoothed dual gradient by randomized multilevel Monte Carlo.

Both components of the gradient of ``phi_eps`` are ratios of expectations
under the uniform law on the support,

    d/dlam  phi_eps = delta - E[h1(W)] / E[h0(W)]
    grad_beta phi_eps =       E[h2(W)] / E[h0(W)]

with ``h0 = tau_eps``, ``h1 = h0 * c`` and ``h2 = h0 * grad l``.  A geometric
level ``G`` selects ``2**(G+1)`` draws; the difference between the ratio of
full averages and the mean of the odd/even half-sample ratios, divided by
``P(G = g)``, debiases the single-draw ratio at ``W_0``.

Draws are taken uniformly over the label-compatible support points.  The
other points have ``h0 = 0`` and leave both ratios unchanged, so the target is
the same while no ratio can have an empty denominator.  Every ratio is
computed as a softmax-weighted average centred on its own maximum score, which
is invariant to any common rescaling of ``h0, h1, h2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SupportSet
from .losses import get_loss
from .objective import SmoothingConfig
from .transport import TransportCost

P_LEVEL = 1.0 - 2.0 ** -1.5


def level_probability(g, p: float = P_LEVEL):
    """``P(G = g)`` for the number of failures before the first success."""
    return p * (1.0 - p) ** np.asarray(g)


def expected_draws(p: float = P_LEVEL) -> float:
    """``E[2**(G+1) + 1]``; finite because ``2 * (1 - p) < 1``."""
    r = 2.0 * (1.0 - p)
    if r >= 1:
        return np.inf
    return 1.0 + 2.0 * p / (1.0 - r)


@dataclass
class GradientSample:
    Lambda: float
    Gamma: np.ndarray
    G: int
    draws_used: int


def h_values(support: SupportSet, w: int, x, y, beta, lam, config: SmoothingConfig,
             tc: TransportCost, loss, shift: float = 0.0):
    """``(h0, h1, h2)`` at support point ``w``, with ``h0 = exp((score - shift) / eps)``.

    A label-flipped ``w`` gives ``(0, 0, 0)``.
    """
    loss = get_loss(loss)
    xw, yw = support.X[w], support.y[w]
    if yw != y:
        return 0.0, 0.0, np.zeros(support.d)
    c = tc(xw, yw, x, y)
    h0 = float(np.exp((loss.value(xw, yw, beta) - lam * c - shift) / config.epsilon))
    return h0, h0 * c, h0 * loss.grad(xw, yw, beta)


def _masked_mean(scores, values, mask, eps):
    """Softmax(scores / eps)-weighted mean of ``values`` over the masked columns of each row."""
    z = np.where(mask, scores / eps, -np.inf)
    z -= z.max(axis=1, keepdims=True)
    w = np.exp(z)
    w /= w.sum(axis=1, keepdims=True)
    return np.einsum("km,kmd->kd", w, values)


class MLMCGradient:
    """Sampler of ``(Lambda, Gamma)`` for a fixed support, cost, loss and smoothing."""

    def __init__(self, support: SupportSet, tc: TransportCost, loss, config: SmoothingConfig,
                 p: float = P_LEVEL, max_cells: int = 1 << 22):
        if len(support) == 0:
            raise ValueError("empty support")
        self.support = support
        self.tc = tc
        self.loss = get_loss(loss)
        self.config = config
        self.p = p
        self.max_cells = max_cells
        self._pools = {}
        # support indices grouped by label: row i draws from order[lo_i:hi_i]
        self._order = np.argsort(support.y, kind="stable")
        self._sorted_y = support.y[self._order]

    def pool(self, label) -> np.ndarray:
        label = float(label)
        if label not in self._pools:
            idx = self.support.compatible(label)
            if idx.size == 0:
                raise ValueError(f"no support point carries label {label}")
            self._pools[label] = idx
        return self._pools[label]

    def _segments(self, Y):
        lo = np.searchsorted(self._sorted_y, Y, side="left")
        hi = np.searchsorted(self._sorted_y, Y, side="right")
        if np.any(hi == lo):
            bad = Y[np.argmax(hi == lo)]
            raise ValueError(f"no support point carries label {bad}")
        return lo, hi - lo

    def sample(self, X, Y, beta, lam, rng):
        """One estimator per row of ``(X, Y)``.

        Returns ``(Lambda, Gamma, G)`` with shapes ``(B,)``, ``(B, d)``, ``(B,)``.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Y = np.atleast_1d(np.asarray(Y, dtype=float))
        B, d = X.shape
        lo, size = self._segments(Y)
        G = rng.geometric(self.p, size=B) - 1
        Lam = np.empty(B)
        Gam = np.empty((B, d))
        # rows sorted by level are packed into padded chunks of bounded size;
        # columns past a row's own width are masked out
        order = np.argsort(G, kind="stable")
        width = 2 ** (G[order] + 1) + 1
        i = 0
        while i < B:
            span = (np.arange(1, B - i + 1)) * width[i:] * max(d, 1)
            j = i + max(1, int(np.searchsorted(span, self.max_cells, side="right")))
            r = order[i:j]
            Lam[r], Gam[r] = self._chunk(X[r], Y[r], lo[r], size[r], G[r], beta, lam, rng)
            i = j
        return Lam, Gam, G

    def _chunk(self, X, Y, lo, size, G, beta, lam, rng):
        eps = self.config.epsilon
        width = 2 ** (G + 1) + 1
        col = np.arange(width.max())[None, :]
        offset = np.floor(rng.random((len(Y), col.size)) * size[:, None]).astype(int)
        W = self._order[lo[:, None] + np.minimum(offset, size[:, None] - 1)]
        Xw = self.support.X[W]  # (rows, width, d)
        yw = self.support.y[W]
        c = self.tc.to_points(Xw, yw, X[:, None, :], Y[:, None])
        s = self.loss.value(Xw, yw, beta) - lam * c
        vals = np.concatenate([c[:, :, None], self.loss.grad(Xw, yw, beta)], axis=2)
        full = (col >= 1) & (col < width[:, None])
        odd = full & (col % 2 == 1)
        even = full & (col % 2 == 0)
        diff = _masked_mean(s, vals, full, eps) - 0.5 * (
            _masked_mean(s, vals, odd, eps) + _masked_mean(s, vals, even, eps))
        diff /= level_probability(G, self.p)[:, None]
        return self.config.delta - diff[:, 0] - c[:, 0], diff[:, 1:] + vals[:, 0, 1:]

    def sample_one(self, x, y, beta, lam, rng) -> GradientSample:
        Lam, Gam, G = self.sample(np.asarray(x)[None, :], [y], beta, lam, rng)
        g = int(G[0])
        return GradientSample(float(Lam[0]), Gam[0], g, 2 ** (g + 1) + 1)

    def sample_mean(self, x, y, beta, lam, rng, batch: int = 1):
        """Average of ``batch`` independent estimators at a single sample."""
        X = np.repeat(np.asarray(x, dtype=float)[None, :], batch, axis=0)
        Lam, Gam, _ = self.sample(X, np.full(batch, float(y)), beta, lam, rng)
        return float(Lam.mean()), Gam.mean(axis=0)


def unbiased_gradient(support: SupportSet, x, y, beta, lam, config: SmoothingConfig,
                      tc: TransportCost, loss, rng) -> GradientSample:
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    return MLMCGradient(support, tc, loss, config).sample_one(x, y, beta, lam, rng)
