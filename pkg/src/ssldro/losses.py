"""Loss models and their parameter gradients.

Both losses act row-wise: ``X`` has shape ``(m, d)``, ``y`` shape ``(m,)`` and
the result has shape ``(m,)`` (values) or ``(m, d)`` (gradients).  A single
example can be passed as 1-D ``x`` and scalar ``y``.  No intercept is added.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


class Loss:
    name: str

    def value(self, X, y, beta) -> np.ndarray:
        raise NotImplementedError

    def grad(self, X, y, beta) -> np.ndarray:
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}()"


class LogisticLoss(Loss):
    """``log(1 + exp(-y * beta'x))`` evaluated without overflow."""

    name = "logistic"

    def value(self, X, y, beta):
        z = np.asarray(X, dtype=float) @ beta
        return np.logaddexp(0.0, -np.asarray(y, dtype=float) * z)

    def grad(self, X, y, beta):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        w = -y * expit(-y * (X @ beta))
        return w[..., None] * X


class SquaredLoss(Loss):
    name = "squared"

    def value(self, X, y, beta):
        r = np.asarray(y, dtype=float) - np.asarray(X, dtype=float) @ beta
        return r * r

    def grad(self, X, y, beta):
        X = np.asarray(X, dtype=float)
        r = np.asarray(y, dtype=float) - X @ beta
        return (-2.0 * r)[..., None] * X


LOSSES = {"logistic": LogisticLoss(), "squared": SquaredLoss()}


def get_loss(name) -> Loss:
    if isinstance(name, Loss):
        return name
    try:
        return LOSSES[name]
    except KeyError:
        raise ValueError(f"unknown loss {name!r}; choose from {sorted(LOSSES)}") from None


def loss(model, x, y, beta) -> float:
    return float(get_loss(model).value(x, y, beta))


def grad(model, x, y, beta) -> np.ndarray:
    return get_loss(model).grad(x, y, beta)
