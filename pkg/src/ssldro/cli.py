"""Command-line front end.

Subcommands: ``train``, ``eval``, ``select-delta``, ``worst-case`` and
``experiment``.  Reports are JSON objects written to stdout or ``--report``.
Exit codes: 0 success, 2 usage, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2

from . import rwp
from .data import Dataset, DataError, Standardizer, add_intercept, build_support, load_csv, split
from .objective import inner_max_exact
from .solver import (
    EXACT_SUPPORT_CAP, DivergenceError, SgdConfig, TrainedModel, accuracy, cross_validate_delta,
    exact_train, log_loss, mse, sgd_train,
)
from .transport import TransportCost

MODEL_FORMAT = "ssldro-model"
MODEL_VERSION = 1

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


@dataclass
class Preprocess:
    """Feature transform stored with a model and applied to every dataset it sees."""

    mean: np.ndarray | None = None
    scale: np.ndarray | None = None
    intercept: bool = False

    @classmethod
    def fit(cls, standardize: bool, intercept: bool, *datasets) -> "Preprocess":
        if not standardize:
            return cls(intercept=intercept)
        st = Standardizer.fit(*datasets)
        return cls(st.mean, st.scale, intercept)

    def apply(self, ds: Dataset | None) -> Dataset | None:
        if ds is None:
            return None
        if self.mean is not None:
            ds = Standardizer(self.mean, self.scale).transform(ds)
        return add_intercept(ds) if self.intercept else ds

    def describe(self) -> dict:
        return {"standardize": self.mean is not None, "intercept": self.intercept}


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _fmt_array(a) -> str:
    return ",".join(_fmt(v) for v in np.asarray(a).reshape(-1))


def _parse_array(text: str) -> np.ndarray:
    return np.array([float(t) for t in text.split(",")]) if text else np.empty(0)


def save_model(path, model: TrainedModel, pre: Preprocess) -> None:
    fields = {
        "loss": model.loss,
        "method": model.method,
        "delta": _fmt(model.delta),
        "epsilon": _fmt(model.epsilon),
        "lambda": _fmt(model.lam),
        "cost_q": _fmt(model.cost_q),
        "cost_rho": _fmt(model.cost_rho),
        "objective": _fmt(model.objective),
        "fingerprint": model.fingerprint,
        "d": str(model.beta.size),
        "beta": _fmt_array(model.beta),
        "intercept": str(int(pre.intercept)),
    }
    if pre.mean is not None:
        fields["standardize_mean"] = _fmt_array(pre.mean)
        fields["standardize_scale"] = _fmt_array(pre.scale)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{MODEL_FORMAT} {MODEL_VERSION}\n")
        for k, v in fields.items():
            fh.write(f"{k}={v}\n")


def load_model(path) -> tuple[TrainedModel, Preprocess]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].split() != [MODEL_FORMAT, str(MODEL_VERSION)]:
        raise DataError(f"{path}: not a version {MODEL_VERSION} model file")
    kv = dict(line.split("=", 1) for line in lines[1:] if line.strip())
    try:
        beta = _parse_array(kv["beta"])
        if beta.size != int(kv["d"]):
            raise DataError(f"{path}: beta has {beta.size} entries, expected {kv['d']}")
        model = TrainedModel(
            beta=beta, lam=float(kv["lambda"]), delta=float(kv["delta"]), epsilon=float(kv["epsilon"]),
            loss=kv["loss"], cost_q=float(kv["cost_q"]), cost_rho=float(kv["cost_rho"]),
            method=kv["method"], objective=float(kv["objective"]), fingerprint=kv["fingerprint"],
        )
        pre = Preprocess(intercept=kv.get("intercept", "0") == "1")
        if "standardize_mean" in kv:
            pre.mean = _parse_array(kv["standardize_mean"])
            pre.scale = _parse_array(kv["standardize_scale"])
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: malformed model file ({exc})") from exc
    return model, pre


def metrics(beta, ds: Dataset, loss: str) -> dict:
    if len(ds) == 0:
        return {}
    if ds.X.shape[1] != np.asarray(beta).size:
        raise DataError(f"model has {np.asarray(beta).size} coefficients, data has {ds.X.shape[1]} features")
    if loss == "squared":
        return {"mse": mse(beta, ds)}
    return {"log_loss": log_loss(beta, ds), "accuracy": accuracy(beta, ds)}


def _emit(report: dict, path=None) -> None:
    text = json.dumps(report, indent=2, sort_keys=True, default=_json_default)
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _task(loss: str) -> str:
    return "regression" if loss == "squared" else "classification"


def _load_inputs(args):
    task = _task(args.loss)
    labeled = load_csv(args.labeled, has_label=True, delimiter=args.delimiter, header=args.header, task=task)
    unlabeled = None
    if args.unlabeled:
        unlabeled = load_csv(args.unlabeled, has_label=args.unlabeled_has_label, delimiter=args.delimiter,
                             header=args.header, task=task).without_labels()
    return labeled, unlabeled


def _cost(args) -> TransportCost:
    return TransportCost(q=args.cost_q, rho=args.cost_rho)


def _sgd_config(args) -> SgdConfig:
    return SgdConfig(a=args.a, b=args.b, iterations=args.iters, batch_size=args.batch, seed=args.seed,
                     gradient=args.gradient)


def _train(args, support, labeled, delta, tc):
    if args.exact:
        if len(support) > EXACT_SUPPORT_CAP:
            raise UsageError(f"--exact allows at most {EXACT_SUPPORT_CAP} support points, got {len(support)}")
        return exact_train(support, labeled, delta, tc=tc, loss=args.loss, epsilon=args.epsilon,
                           tolerance=args.tolerance)
    return sgd_train(support, labeled, delta, _sgd_config(args), epsilon=args.epsilon, tc=tc, loss=args.loss)


def cmd_train(args) -> dict:
    if args.delta < 0:
        raise UsageError("--delta must be nonnegative")
    labeled, unlabeled = _load_inputs(args)
    pre = Preprocess.fit(args.standardize, args.intercept, labeled, unlabeled)
    labeled, unlabeled = pre.apply(labeled), pre.apply(unlabeled)
    support = build_support(labeled, unlabeled)
    tc = _cost(args)
    model = _train(args, support, labeled, args.delta, tc)
    save_model(args.out, model, pre)
    report = {
        "model": args.out, "method": model.method, "delta": model.delta, "epsilon": model.epsilon,
        "lambda": model.lam, "objective": model.objective, "support_size": len(support),
        "preprocess": pre.describe(), "train": metrics(model.beta, labeled, model.loss),
    }
    if args.test:
        test = load_csv(args.test, has_label=True, delimiter=args.delimiter, header=args.header,
                        task=_task(args.loss))
        report["test"] = metrics(model.beta, pre.apply(test), model.loss)
    return report


def cmd_eval(args) -> dict:
    model, pre = load_model(args.model)
    test = load_csv(args.test, has_label=True, delimiter=args.delimiter, header=args.header,
                    task=_task(model.loss))
    test = pre.apply(test)
    return {"model": args.model, "fingerprint": model.fingerprint, "n": len(test),
            "test": metrics(model.beta, test, model.loss)}


def _parse_grid(text: str) -> list:
    try:
        grid = [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise UsageError(f"invalid --grid {text!r}") from exc
    if not grid or any(not math.isfinite(g) or g < 0 for g in grid):
        raise UsageError(f"invalid --grid {text!r}: need nonnegative numbers")
    return grid


def cmd_select_delta(args) -> dict:
    if args.method == "cv":
        if not args.grid:
            raise UsageError("--method cv needs --grid")
        grid = _parse_grid(args.grid)
        labeled, unlabeled = _load_inputs(args)
        pre = Preprocess.fit(args.standardize, args.intercept, labeled, unlabeled)
        labeled, unlabeled = pre.apply(labeled), pre.apply(unlabeled)
        tc = _cost(args)

        def trainer(support, train, delta, tc, loss):
            return _train(args, support, train, delta, tc)

        metric = args.metric or ("mse" if args.loss == "squared" else "log-loss")
        best, table = cross_validate_delta(labeled, unlabeled, grid, args.folds, trainer=trainer, tc=tc,
                                           loss=args.loss, metric=metric, seed=args.seed)
        return {"method": "cv", "delta_star": best, "metric": metric, "folds": args.folds, "table": table}

    if args.loss != "squared":
        raise UsageError("--method rwp supports only --loss squared")
    if args.alpha is None or not 0 < args.alpha < 1:
        raise UsageError("--method rwp needs --alpha in (0, 1)")
    labeled, unlabeled = _load_inputs(args)
    X, Y = labeled.X, labeled.y
    n, d = X.shape
    if args.beta:
        beta = _parse_array(args.beta)
        if beta.size != d:
            raise UsageError(f"--beta has {beta.size} entries, data has {d} features")
        plug_in = False
    else:
        beta = np.linalg.lstsq(X, Y, rcond=None)[0]
        plug_in = True
    e = Y - X @ beta
    N = n + (len(unlabeled) if unlabeled is not None else 0)
    report = {"method": "rwp", "alpha": args.alpha, "n": n, "N": N, "d": d, "beta": beta,
              "beta_plug_in": plug_in, "rate": rwp.scaling_rate(n, d)}
    if d == 1:
        k = rwp.kappa1(rwp.plugin_moments(X[:, 0], Y, beta[0]))
        quantile = k * chi2.ppf(1 - args.alpha, df=1)
        report.update(kappa1=k, quantile=quantile, delta_star=quantile / n)
        return report
    rng = np.random.default_rng(args.seed)
    pool = rng.integers(0, n, size=args.pool)
    allX = X if unlabeled is None else np.vstack([X, unlabeled.X])
    law = rwp.PoolLimitLaw(X[pool], e[pool], beta, N / n, density=rwp.gaussian_density(allX))
    samples = law.sample(rng, args.samples)
    report.update(samples=args.samples, pool=args.pool, density="gaussian-fit",
                  quantile=float(np.quantile(samples, 1 - args.alpha)),
                  delta_star=rwp.select_delta(args.alpha, n, d, samples))
    return report


def cmd_worst_case(args) -> dict:
    labeled, unlabeled = _load_inputs(args)
    if args.model:
        model, pre = load_model(args.model)
        beta, loss = model.beta, model.loss
        labeled, unlabeled = pre.apply(labeled), pre.apply(unlabeled)
    elif args.beta:
        beta, loss = _parse_array(args.beta), args.loss
    else:
        raise UsageError("worst-case needs --model or --beta")
    if beta.size != labeled.d:
        raise DataError(f"model has {beta.size} coefficients, data has {labeled.d} features")
    support = build_support(labeled, unlabeled)
    tc = _cost(args)
    if len(labeled) * len(support) > args.cap:
        raise UsageError(f"instance has {len(labeled) * len(support)} plan variables, --cap is {args.cap}")
    wc = inner_max_exact(support, labeled, beta, args.delta, tc, loss, cap=args.cap)
    cost = tc.matrix(labeled.X, labeled.y, support.X, support.y).T  # (M, n)
    wc.check(cost, args.delta)
    rows = [(int(u), int(v), float(wc.plan[u, v]), float(cost[u, v])) for u, v in zip(*np.nonzero(wc.plan > 0))]
    lines = ["u,v,mass,cost"] + [f"{u},{v},{_fmt(m)},{_fmt(c)}" for u, v, m, c in rows]
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    return {"objective": wc.value, "budget_used": wc.budget_used, "delta": args.delta,
            "mass_total": float(wc.plan.sum()), "entries": len(rows),
            "plan": args.out or [dict(zip(("u", "v", "mass", "cost"), r)) for r in rows]}


# ---------------------------------------------------------------------------
# multi-seed experiments


@dataclass
class ExperimentConfig:
    sizes: tuple = (40, 200, 329)
    grid: tuple = (0.01, 0.03, 0.1, 0.3, 1.0)
    folds: int = 5
    cost_q: float = 2.0
    cost_rho: float = 1.0
    epsilon: float | None = None
    tolerance: float = 1e-5
    metric: str = "log-loss"
    standardize: bool = True
    intercept: bool = True


def run_seed(dataset: Dataset, seed: int, config: ExperimentConfig) -> dict:
    """Split, select delta by CV on the labeled part, refit and score on the test part."""
    labeled, unlabeled, test = split(dataset, config.sizes, seed)
    pre = Preprocess.fit(config.standardize, config.intercept, labeled, unlabeled)
    labeled, unlabeled, test = pre.apply(labeled), pre.apply(unlabeled), pre.apply(test)
    tc = TransportCost(config.cost_q, config.cost_rho)

    def trainer(support, train, delta, tc, loss):
        return exact_train(support, train, delta, tc=tc, loss=loss, epsilon=config.epsilon,
                           tolerance=config.tolerance)

    best, _ = cross_validate_delta(labeled, unlabeled, config.grid, config.folds, trainer=trainer, tc=tc,
                                   metric=config.metric, seed=seed)
    model = trainer(build_support(labeled, unlabeled), labeled, best, tc, "logistic")
    return {"seed": seed, "delta": best, "train_log_loss": log_loss(model.beta, labeled),
            "test_log_loss": log_loss(model.beta, test), "test_accuracy": accuracy(model.beta, test)}


def _worker(job):
    return run_seed(*job)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("SSL_DRO_THREADS", "1")))
    except ValueError:
        return 1


def run_experiment(dataset: Dataset, seeds, config: ExperimentConfig, workers: int | None = None) -> dict:
    workers = workers or worker_count()
    jobs = [(dataset, int(s), config) for s in seeds]
    if workers == 1:
        rows = [_worker(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_worker, jobs))  # map preserves seed order
    summary = {}
    for key in ("train_log_loss", "test_log_loss", "test_accuracy", "delta"):
        vals = np.array([r[key] for r in rows])
        summary[key] = {"mean": float(vals.mean()), "sd": float(vals.std(ddof=1)) if vals.size > 1 else 0.0}
    return {"summary": summary, "runs": rows}


def cmd_experiment(args) -> dict:
    data = load_csv(args.data, has_label=True, delimiter=args.delimiter, header=args.header)
    try:
        sizes = tuple(int(s) for s in args.sizes.split(","))
    except ValueError as exc:
        raise UsageError(f"invalid --sizes {args.sizes!r}") from exc
    config = ExperimentConfig(
        sizes=sizes, grid=tuple(_parse_grid(args.grid)), folds=args.folds, cost_q=args.cost_q,
        cost_rho=args.cost_rho, epsilon=args.epsilon, tolerance=args.tolerance,
        metric=args.metric or "log-loss", standardize=args.standardize, intercept=args.intercept,
    )
    out = run_experiment(data, range(args.seed, args.seed + args.seeds), config)
    out["config"] = {k: getattr(config, k) for k in config.__dataclass_fields__}
    out["workers"] = worker_count()
    return out


# ---------------------------------------------------------------------------
# argument parsing


def _common(p, data=True):
    p.add_argument("--delimiter", default=",")
    p.add_argument("--header", action="store_true", help="skip the first row of every CSV")
    p.add_argument("--report", help="write the JSON report here instead of stdout")
    if data:
        p.add_argument("--labeled", required=True)
        p.add_argument("--unlabeled")
        p.add_argument("--unlabeled-has-label", action="store_true",
                       help="the unlabeled file carries a label column to be ignored")


def _model_flags(p, standardize_default=False):
    p.add_argument("--loss", choices=("logistic", "squared"), default="logistic")
    p.add_argument("--cost-q", type=float, default=2.0)
    p.add_argument("--cost-rho", type=float, default=1.0)
    p.add_argument("--epsilon", type=float, default=None, help="smoothing; default 1/log|support|")
    p.add_argument("--standardize", action=argparse.BooleanOptionalAction, default=standardize_default)
    p.add_argument("--intercept", action=argparse.BooleanOptionalAction, default=False)


def _solver_flags(p):
    p.add_argument("--exact", action="store_true", help="deterministic full-gradient training")
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.add_argument("--iters", type=int, default=50_000)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--a", type=float, default=1.0)
    p.add_argument("--b", type=float, default=10.0)
    p.add_argument("--gradient", choices=("mlmc", "exact"), default="mlmc")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssldro", description="Semi-supervised distributionally robust learning")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a model")
    _common(p)
    _model_flags(p)
    _solver_flags(p)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--test")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a saved model")
    _common(p, data=False)
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("select-delta", help="choose the uncertainty radius")
    _common(p)
    _model_flags(p)
    _solver_flags(p)
    p.add_argument("--method", choices=("cv", "rwp"), required=True)
    p.add_argument("--grid")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--metric", choices=("log-loss", "accuracy", "mse"))
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", help="comma-separated parameter to profile; default least squares")
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--pool", type=int, default=10_000)
    p.set_defaults(func=cmd_select_delta)

    p = sub.add_parser("worst-case", help="dump the worst-case transport plan")
    _common(p)
    _model_flags(p)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--model")
    p.add_argument("--beta")
    p.add_argument("--cap", type=int, default=10_000)
    p.add_argument("--out")
    p.set_defaults(func=cmd_worst_case)

    p = sub.add_parser("experiment", help="multi-seed split / CV / test runs")
    _common(p, data=False)
    p.add_argument("--data", required=True)
    p.add_argument("--sizes", default="40,200,329")
    p.add_argument("--seeds", type=int, default=200)
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--grid", default="0.01,0.03,0.1,0.3,1")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--cost-q", type=float, default=2.0)
    p.add_argument("--cost-rho", type=float, default=1.0)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--metric", choices=("log-loss", "accuracy"))
    p.add_argument("--standardize", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--intercept", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on bad flags
    t0 = time.perf_counter()
    try:
        report = args.func(args)
    except UsageError as exc:
        print(f"ssldro: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"ssldro: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, RuntimeError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"ssldro: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"ssldro: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    report = {"command": args.command, "argv": list(sys.argv[1:] if argv is None else argv),
              "seconds": time.perf_counter() - t0, **report}
    _emit(report, getattr(args, "report", None))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
