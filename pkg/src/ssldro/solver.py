"""Training: the projected SGD recursion, a deterministic solver, CV over delta and a baseline.

All trainers minimise ``mean_v phi_eps(v; beta, lam)`` over ``lam >= 0``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize

from .data import Dataset, SupportSet, build_support
from .losses import get_loss
from .mlmc import MLMCGradient
from .objective import DualObjective, SmoothingConfig
from .transport import TransportCost


EXACT_SUPPORT_CAP = 100_000


class DivergenceError(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


@dataclass
class SgdConfig:
    """Step sizes ``a / (b + k)`` for ``k = 1..iterations``; ``batch_size`` samples per step."""

    a: float = 1.0
    b: float = 10.0
    iterations: int = 50_000
    batch_size: int = 8
    tail_fraction: float = 0.25
    seed: int = 0
    lambda0: float = 1.0
    gradient: str = "mlmc"
    trace_every: int = 0

    def __post_init__(self):
        if self.a <= 0 or self.b < 0:
            raise ValueError("step schedule needs a > 0 and b >= 0")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be positive")
        if not 0 <= self.tail_fraction <= 1:
            raise ValueError("tail_fraction must lie in [0, 1]")
        if self.gradient not in ("mlmc", "exact"):
            raise ValueError(f"unknown gradient mode {self.gradient!r}")

    def step(self, k: int) -> float:
        return self.a / (self.b + k)


@dataclass
class TrainedModel:
    beta: np.ndarray
    lam: float
    delta: float
    epsilon: float
    loss: str
    cost_q: float
    cost_rho: float
    method: str
    objective: float = math.nan
    trace: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    fingerprint: str = ""
    meta: dict = field(default_factory=dict)

    def decision(self, X) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.beta


def log_loss(beta, ds: Dataset) -> float:
    return float(np.mean(np.logaddexp(0.0, -ds.y * (ds.X @ beta))))


def accuracy(beta, ds: Dataset) -> float:
    """Fraction of correct signs; a zero score is classified as +1."""
    pred = np.where(ds.X @ beta >= 0, 1.0, -1.0)
    return float(np.mean(pred == ds.y))


def mse(beta, ds: Dataset) -> float:
    r = ds.y - ds.X @ beta
    return float(np.mean(r * r))


def _fingerprint(support: SupportSet, labeled: Dataset) -> str:
    return labeled.fingerprint() + ":" + Dataset(support.X, support.y).fingerprint()


def sgd_train(support: SupportSet, labeled: Dataset, delta: float, config: SgdConfig | None = None,
              epsilon: float | None = None, tc: TransportCost | None = None, loss="logistic",
              beta0=None) -> TrainedModel:
    """Run the projected stochastic recursion

        beta <- beta - alpha_k * Gamma,   lam <- max(lam - alpha_k * Lambda, 0)

    with ``(Lambda, Gamma)`` from the multilevel estimator (``gradient="mlmc"``)
    or the exact smoothed gradient at the sampled points (``gradient="exact"``).
    The returned iterate is the average over the last ``tail_fraction`` of steps.
    """
    config = config or SgdConfig()
    tc = tc or TransportCost()
    loss = get_loss(loss)
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    if len(support) == 0:
        raise ValueError("empty support")
    obj = DualObjective(support, labeled, tc, loss, delta=delta, epsilon=epsilon)
    smoothing = SmoothingConfig(obj.epsilon, delta)
    est = MLMCGradient(support, tc, loss, smoothing) if config.gradient == "mlmc" else None
    rng = np.random.default_rng(config.seed)

    n, d = labeled.X.shape
    beta = np.zeros(d) if beta0 is None else np.array(beta0, dtype=float)
    lam = float(config.lambda0)
    K = config.iterations
    tail_start = K - int(math.ceil(config.tail_fraction * K))
    beta_sum, lam_sum, tail = np.zeros(d), 0.0, 0
    trace = []
    for k in range(K):
        rows = rng.integers(0, n, size=config.batch_size)
        if est is None:
            _, g_beta, g_lam = obj.smoothed_grad(beta, lam, rows=rows)
        else:
            Lam, Gam, _ = est.sample(labeled.X[rows], labeled.y[rows], beta, lam, rng)
            g_beta, g_lam = Gam.mean(axis=0), float(Lam.mean())
        alpha = config.step(k + 1)
        beta = beta - alpha * g_beta
        lam = max(lam - alpha * g_lam, 0.0)
        if not (np.all(np.isfinite(beta)) and math.isfinite(lam)):
            raise DivergenceError(f"non-finite iterate at step {k + 1}", trace)
        if k >= tail_start:
            beta_sum += beta
            lam_sum += lam
            tail += 1
        if config.trace_every and (k + 1) % config.trace_every == 0:
            trace.append((k + 1, obj.smoothed_value(beta, lam)))
    if tail:
        beta, lam = beta_sum / tail, lam_sum / tail
    return TrainedModel(
        beta=beta, lam=lam, delta=float(delta), epsilon=obj.epsilon, loss=loss.name,
        cost_q=tc.q, cost_rho=tc.rho, method=f"sgd-{config.gradient}",
        objective=obj.smoothed_value(beta, lam), trace=trace, config=asdict(config),
        fingerprint=_fingerprint(support, labeled),
    )


def exact_train(support: SupportSet, labeled: Dataset, delta: float, tc: TransportCost | None = None,
                loss="logistic", epsilon: float | None = None, tolerance: float = 1e-6,
                max_iter: int = 20_000, beta0=None, lam0: float = 1.0) -> TrainedModel:
    """Deterministic minimisation of the smoothed dual with exact full gradients.

    Uses L-BFGS-B with the bound ``lam >= 0`` and stops on the projected
    gradient norm.  Raises ``RuntimeError`` if ``tolerance`` is not reached.
    """
    tc = tc or TransportCost()
    loss = get_loss(loss)
    if len(support) > EXACT_SUPPORT_CAP:
        raise ValueError(f"support has {len(support)} points; exact training is capped at {EXACT_SUPPORT_CAP}")
    obj = DualObjective(support, labeled, tc, loss, delta=delta, epsilon=epsilon)
    d = labeled.d
    z0 = np.append(np.zeros(d) if beta0 is None else np.asarray(beta0, dtype=float), lam0)

    def fun(z):
        value, gb, gl = obj.smoothed_grad(z[:d], z[d])
        return value, np.append(gb, gl)

    def projected_norm(z):
        _, g = fun(z)
        if z[d] <= 0 and g[d] > 0:
            g[d] = 0.0
        return float(np.max(np.abs(g)))

    bounds = [(None, None)] * d + [(0.0, None)]
    z = z0
    trace = []
    for _ in range(5):
        res = minimize(fun, z, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": max_iter, "gtol": tolerance, "ftol": 0.0, "maxcor": 30})
        z = res.x
        pg = projected_norm(z)
        trace.append((int(res.nit), float(res.fun), pg))
        if pg <= tolerance:
            break
    else:
        raise RuntimeError(f"exact_train stopped with projected gradient {pg:.3g} > {tolerance}")
    return TrainedModel(
        beta=z[:d].copy(), lam=float(z[d]), delta=float(delta), epsilon=obj.epsilon, loss=loss.name,
        cost_q=tc.q, cost_rho=tc.rho, method="exact", objective=obj.smoothed_value(z[:d], z[d]),
        trace=trace, config={"tolerance": tolerance, "max_iter": max_iter},
        fingerprint=_fingerprint(support, labeled),
    )


def stratified_folds(y, k: int, seed: int) -> np.ndarray:
    """Fold id per row; each label is spread round-robin after a shuffle."""
    rng = np.random.default_rng(seed)
    fold = np.empty(len(y), dtype=int)
    offset = 0
    for label in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == label))
        fold[idx] = (offset + np.arange(idx.size)) % k
        offset += idx.size
    return fold


_METRICS = {
    "log-loss": log_loss,
    "accuracy": lambda beta, ds: 1.0 - accuracy(beta, ds),  # minimised as error rate
    "mse": mse,
}


def cross_validate_delta(labeled: Dataset, unlabeled: Dataset | None, delta_grid, folds: int = 5,
                         trainer=None, tc: TransportCost | None = None, loss="logistic",
                         metric: str = "log-loss", seed: int = 0):
    """k-fold CV over ``delta_grid`` on the labeled data.

    The unlabeled set joins every fold's support.  ``trainer(support, labeled,
    delta, tc, loss)`` defaults to :func:`exact_train`.  Returns
    ``(delta_best, table)``; the choice is the smallest delta whose mean
    validation score is within one standard error of the best mean.
    """
    if folds < 2:
        raise ValueError("need at least 2 folds")
    grid = sorted(set(float(g) for g in delta_grid))
    if not grid:
        raise ValueError("empty delta grid")
    if any(g < 0 for g in grid):
        raise ValueError("delta grid entries must be nonnegative")
    score = _METRICS[metric]
    tc = tc or TransportCost()
    loss = get_loss(loss)
    if trainer is None:
        def trainer(support, train, delta, tc, loss):
            return exact_train(support, train, delta, tc=tc, loss=loss)

    if loss.name == "logistic":
        fold_of = stratified_folds(labeled.y, folds, seed)
    else:
        fold_of = np.random.default_rng(seed).permutation(len(labeled)) % folds
    scores = np.zeros((len(grid), folds))
    for f in range(folds):
        val = np.flatnonzero(fold_of == f)
        train = np.flatnonzero(fold_of != f)
        if val.size == 0 or train.size == 0:
            raise ValueError(f"fold {f} is too small ({val.size} validation rows)")
        train_ds, val_ds = labeled.subset(train), labeled.subset(val)
        support = build_support(train_ds, unlabeled)
        for i, delta in enumerate(grid):
            model = trainer(support, train_ds, delta, tc, loss)
            scores[i, f] = score(model.beta, val_ds)
    mean = scores.mean(axis=1)
    se = scores.std(axis=1, ddof=1) / math.sqrt(folds)
    i_min = int(np.argmin(mean))
    threshold = mean[i_min] + se[i_min]
    best = next(g for g, m in zip(grid, mean) if m <= threshold)
    table = [
        {"delta": g, "mean": float(m), "se": float(s), "folds": [float(v) for v in row]}
        for g, m, s, row in zip(grid, mean, se, scores)
    ]
    return best, table


def _project_l1_ball(v, radius):
    if radius <= 0:
        return np.zeros_like(v)
    a = np.abs(v)
    if a.sum() <= radius:
        return v.copy()
    u = np.sort(a)[::-1]
    css = np.cumsum(u)
    rho = np.nonzero(u * np.arange(1, u.size + 1) > css - radius)[0][-1]
    theta = (css[rho] - radius) / (rho + 1.0)
    return np.sign(v) * np.maximum(a - theta, 0.0)


def norm_prox(v, t, p):
    """Proximal map of ``t * ||.||_p`` for p in {1, 2, inf}."""
    if p == 1:
        return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)
    if p == 2:
        nv = np.linalg.norm(v)
        return v * max(0.0, 1.0 - t / nv) if nv > 0 else v.copy()
    if p in (np.inf, "inf"):
        return v - _project_l1_ball(v, t)
    raise ValueError(f"unsupported norm p={p}")


def _pnorm(v, p):
    return float(np.linalg.norm(v, ord=np.inf if p == "inf" else p))


def penalized_logistic_objective(beta, ds: Dataset, delta_bar, p) -> float:
    return log_loss(beta, ds) + delta_bar * _pnorm(beta, p)


def regularized_logistic_baseline(labeled: Dataset, delta_bar: float, p_norm=1,
                                  tol: float = 1e-8, max_iter: int = 200_000) -> TrainedModel:
    """Minimise ``mean log(1 + exp(-y beta'x)) + delta_bar * ||beta||_p`` by FISTA with restarts."""
    X, y = labeled.X, labeled.y
    n, d = X.shape
    lip = np.linalg.norm(X, 2) ** 2 / (4.0 * n)
    step = 1.0 / lip
    loss = get_loss("logistic")

    def grad(b):
        return loss.grad(X, y, b).mean(axis=0)

    def f(b):
        return penalized_logistic_objective(b, labeled, delta_bar, p_norm)

    beta = np.zeros(d)
    z, t = beta.copy(), 1.0
    f_prev = f(beta)
    for it in range(max_iter):
        new = norm_prox(z - step * grad(z), step * delta_bar, p_norm)
        f_new = f(new)
        if f_new > f_prev and t > 1.0:  # adaptive restart; a plain step from beta is monotone
            z, t = beta.copy(), 1.0
            continue
        t_next = 0.5 * (1 + math.sqrt(1 + 4 * t * t))
        z = new + ((t - 1) / t_next) * (new - beta)
        mapping = np.linalg.norm(new - beta) / step
        beta, t, f_prev = new, t_next, f_new
        if mapping <= tol:
            break
    else:
        raise RuntimeError("regularized_logistic_baseline hit the iteration cap")
    return TrainedModel(
        beta=beta, lam=0.0, delta=float(delta_bar), epsilon=0.0, loss="logistic", cost_q=math.nan,
        cost_rho=1.0, method=f"lr-l{p_norm}", objective=f_prev, config={"p": str(p_norm), "tol": tol},
        fingerprint=labeled.fingerprint(),
    )
