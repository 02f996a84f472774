"""Command-line interface.

Exit status is 0 on success, 1 on bad input (flags, files, CSV content) and
2 on numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from .autodiff import finite_diff_check, grad_divergence_points, grad_points, loss_and_grad_cost
from .datasets import load_bundled_iris_like, ring_points
from .divergence import INFINITY, ZERO, DivergenceSpec, divergence
from .errors import InputError, NumericalError
from .experiments import (
    N_GRID,
    default_t_grid,
    derived_rng,
    ellipse_experiment,
    estimate_rate,
    fmt,
    positivity_experiment,
    sample_complexity_run,
    write_complexity_csv,
    write_occupancy_csv,
    write_positivity_csv,
)
from .measures import SQEUCLIDEAN, GroundCost, cost_matrix, make_empirical, parse_cost, read_point_csv, write_point_csv
from .models import CostNetwork, EllipseModel, MlpGenerator, model_to_json, sample_latent
from .training import TrainConfig, TrainingAborted, batch_divergence, fit

__all__ = ["main", "build_parser"]

_MODES = {"auto": "auto", "on": "log", "off": "plain"}

# Per-subcommand defaults; a JSON config overrides these, explicit flags override both.
_DEFAULTS = {
    "common": {"seed": 0, "epsilon": "1", "iters": None, "batch": 200, "cost": "sqeuclidean",
               "out": None, "log_domain": "auto", "labeled": "auto"},
    "eval": {},
    "gradcheck": {"tol": 1e-5, "h": 1e-5},
    "fit-ellipses": {"epsilon": "0.1", "iters": 20, "batch": 150, "K": 3, "steps": 2000, "lr": 1e-3,
                     "trace": None, "model": None, "data": None, "labeled": "yes"},
    "fit-generator": {"epsilon": "1", "iters": 10, "steps": 5000, "lr": 1e-3, "hidden": 64,
                      "n_critic": None, "clip": 0.01, "feature_dim": 16, "samples": 1000, "data_size": 1000,
                      "trace": None, "model": None, "data": None},
    "sample-complexity": {"d": 2, "p": 1.5, "dist": "uniform", "replicates": 100, "N": None},
    "positivity": {"n": 10, "p": 1.0, "realizations": 100, "t_max": 0.2, "t_points": 41},
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise InputError(f"{self.prog}: {message}")


def _global_flags(parser):
    S = argparse.SUPPRESS
    parser.add_argument("--config", default=S, help="JSON file with flag values (flags override it)")
    parser.add_argument("--seed", type=int, default=S)
    parser.add_argument("--epsilon", default=S, help="positive float, or 0 / inf for the limits (eval only)")
    parser.add_argument("--iters", type=int, default=S, help="Sinkhorn sweeps L; omit for converged where allowed")
    parser.add_argument("--batch", type=int, default=S, help="minibatch size m")
    parser.add_argument("--cost", default=S, help="sqeuclidean, euclidean, power:p or learned")
    parser.add_argument("--out", default=S, help="output CSV path (stdout if omitted)")
    parser.add_argument("--log-domain", choices=sorted(_MODES), default=S)
    parser.add_argument("--labeled", choices=["auto", "yes", "no"], default=S,
                        help="whether the last CSV column is an integer label")


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = _Parser(prog="sinkdiv", description="Sinkhorn divergences, gradients and experiments.")
    _global_flags(parser)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("eval", help="divergence between two CSV point clouds")
    _global_flags(p)
    p.add_argument("a")
    p.add_argument("b")

    p = sub.add_parser("gradcheck", help="compare analytic gradients with finite differences")
    _global_flags(p)
    p.add_argument("--tol", type=float, default=S)
    p.add_argument("--h", type=float, default=S)

    p = sub.add_parser("fit-ellipses", help="fit K ellipses to a labelled CSV and print class occupancy")
    _global_flags(p)
    p.add_argument("data", nargs="?", default=S, help="labelled CSV (default: bundled Iris-like table)")
    p.add_argument("--K", type=int, default=S)
    p.add_argument("--steps", type=int, default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--trace", default=S, help="training trace CSV")
    p.add_argument("--model", default=S, help="fitted model JSON")

    p = sub.add_parser("fit-generator", help="train an MLP generator by minibatch descent")
    _global_flags(p)
    p.add_argument("--data", default=S, help="CSV of target points (default: eight-Gaussian ring)")
    p.add_argument("--data-size", type=int, default=S)
    p.add_argument("--steps", type=int, default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--hidden", type=int, default=S)
    p.add_argument("--n-critic", type=int, default=S, help="cost-network steps per generator step")
    p.add_argument("--clip", type=float, default=S)
    p.add_argument("--feature-dim", type=int, default=S)
    p.add_argument("--samples", type=int, default=S, help="generated points written to --out")
    p.add_argument("--trace", default=S)
    p.add_argument("--model", default=S)

    p = sub.add_parser("sample-complexity", help="mean and spread of the divergence between N-samples")
    _global_flags(p)
    p.add_argument("--d", type=int, default=S)
    p.add_argument("--p", type=float, default=S)
    p.add_argument("--dist", choices=["uniform", "gaussian"], default=S)
    p.add_argument("--replicates", type=int, default=S)
    p.add_argument("--N", default=S, help="comma-separated sample sizes")

    p = sub.add_parser("positivity", help="divergence along random perturbations of a measure")
    _global_flags(p)
    p.add_argument("--n", type=int, default=S)
    p.add_argument("--p", type=float, default=S)
    p.add_argument("--realizations", type=int, default=S)
    p.add_argument("--t-max", type=float, default=S)
    p.add_argument("--t-points", type=int, default=S)
    return parser


def _settings(args) -> dict:
    given = vars(args)
    settings = {**_DEFAULTS["common"], **_DEFAULTS[args.command]}
    if "config" in given:
        try:
            with open(given["config"], encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config {given['config']}: {exc}") from None
        if not isinstance(doc, dict):
            raise InputError("config file must hold a JSON object")
        for key, value in doc.items():
            key = key.lstrip("-").replace("-", "_")
            if key not in settings:
                raise InputError(f"unknown config key {key!r} for {args.command}")
            settings[key] = value
    settings.update({k: v for k, v in given.items() if k not in ("command", "config")})
    return settings


def _epsilon(text, allow_limits=False):
    token = str(text).strip().lower()
    if allow_limits and token in ("0", "0.0", "zero"):
        return ZERO
    if allow_limits and token in ("inf", "infinity"):
        return INFINITY
    try:
        eps = float(token)
    except ValueError:
        raise InputError(f"invalid epsilon {text!r}") from None
    if not (np.isfinite(eps) and eps > 0):
        raise InputError(f"epsilon must be a positive finite number, got {text!r}")
    return eps


def _labeled(settings):
    return {"auto": None, "yes": True, "no": False}[settings["labeled"]]


def _fixed_cost(settings) -> GroundCost:
    if settings["cost"] == "learned":
        raise InputError("the learned cost is only available for fit-generator")
    return parse_cost(settings["cost"])


def _emit_rows(path, header, rows):
    if path:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
    else:
        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _cmd_eval(s):
    X, _ = read_point_csv(s["a"], _labeled(s))
    Y, _ = read_point_csv(s["b"], _labeled(s))
    spec = DivergenceSpec(cost=_fixed_cost(s), epsilon=_epsilon(s["epsilon"], allow_limits=True),
                          L=s["iters"], mode=_MODES[s["log_domain"]])
    value = divergence(make_empirical(X), make_empirical(Y), spec)
    if s["out"]:
        _emit_rows(s["out"], ["value"], [[fmt(value)]])
    print(fmt(value))
    return 0


# Coordinates below this fraction of the gradient's largest entry are compared
# absolutely; double-precision differences cannot resolve them relatively.
_GRADCHECK_SCALE_FLOOR = 1e-4


def gradcheck_cases(epsilon, L, seed, mode="auto", costs=None, h=1e-5):
    """``(case, max relative error)`` for every gradient the training code relies on."""
    costs = costs or [SQEUCLIDEAN, GroundCost.power(1.5)]
    check = lambda f, grad, x0: finite_diff_check(f, grad, x0, h, _GRADCHECK_SCALE_FLOOR)
    rng = np.random.default_rng(seed)
    rows = []
    m, n, d = 6, 5, 2
    X, Y = rng.random((m, d)), rng.random((n, d))
    mu, nu = np.full(m, 1.0 / m), np.full(n, 1.0 / n)
    C = cost_matrix(X, Y, SQEUCLIDEAN).entries
    bundle = loss_and_grad_cost(C, mu, nu, epsilon, L, mode)
    rows.append(("cost-entries", check(
        lambda c: loss_and_grad_cost(c, mu, nu, epsilon, L, mode).value, bundle.d_cost, C)))
    for cost in costs:
        g = grad_points(X, Y, cost, mu, nu, epsilon, L, mode)
        f = lambda x: grad_points(x, Y, cost, mu, nu, epsilon, L, mode).value
        rows.append((f"points-x/{cost}", check(f, g.d_x, X)))
        f = lambda y: grad_points(X, y, cost, mu, nu, epsilon, L, mode).value
        rows.append((f"points-y/{cost}", check(f, g.d_y, Y)))
        g = grad_divergence_points(X, Y, cost, epsilon, L, mode=mode)
        f = lambda x: grad_divergence_points(x, Y, cost, epsilon, L, mode=mode).value
        rows.append((f"divergence-x/{cost}", check(f, g.d_x, X)))
    config = TrainConfig(epsilon=epsilon, L=L, m=6, mode=mode)
    Yb = rng.random((6, 3))
    ellipse = EllipseModel(np.tile(np.eye(3) * 0.5, (2, 1, 1)) + 0.1 * rng.standard_normal((2, 3, 3)),
                           rng.random((2, 3)))
    Z, ks = sample_latent(ellipse.latent, 6, rng)
    _, grad, _ = batch_divergence(ellipse, SQEUCLIDEAN, Z, ks, Yb, config)
    f = lambda t: batch_divergence(ellipse.with_params(t), SQEUCLIDEAN, Z, ks, Yb, config, need_theta=False)[0]
    rows.append(("ellipse-params", check(f, grad, ellipse.params)))
    mlp = MlpGenerator.xavier([2, 4, 2], rng, activations=["sigmoid", "none"])
    Z, _ = sample_latent(mlp.latent, 6, rng)
    Yb = rng.random((6, 2))
    _, grad, _ = batch_divergence(mlp, SQEUCLIDEAN, Z, None, Yb, config)
    f = lambda t: batch_divergence(mlp.with_params(t), SQEUCLIDEAN, Z, None, Yb, config, need_theta=False)[0]
    rows.append(("mlp-params", check(f, grad, mlp.params)))
    return rows


def _cmd_gradcheck(s):
    L = s["iters"] if s["iters"] is not None else 10
    costs = None if s["cost"] == "sqeuclidean" else [_fixed_cost(s)]
    rows = gradcheck_cases(_epsilon(s["epsilon"]), L, s["seed"], _MODES[s["log_domain"]], costs, s["h"])
    _emit_rows(s["out"], ["case", "max_rel_err"], [[case, fmt(err)] for case, err in rows])
    worst = max(err for _, err in rows)
    if not worst <= s["tol"]:
        print(f"gradient check failed: max relative error {fmt(worst)} > {s['tol']}", file=sys.stderr)
        return 2
    return 0


def _train_config(s, **extra):
    return TrainConfig(epsilon=_epsilon(s["epsilon"]), L=s["iters"], m=s["batch"], learning_rate=s["lr"],
                       steps=s["steps"], seed=s["seed"], mode=_MODES[s["log_domain"]], **extra)


def _cmd_fit_ellipses(s):
    if s["cost"] != "sqeuclidean":
        raise InputError("ellipse fitting uses the squared Euclidean cost")
    if s["data"]:
        points, labels = read_point_csv(s["data"], _labeled(s))
    else:
        points, labels = load_bundled_iris_like()
    if labels is None:
        raise InputError("fit-ellipses needs a labelled CSV (integer class in the last column)")
    if s["iters"] is None:
        raise InputError("fit-ellipses needs a fixed --iters")
    result = ellipse_experiment(points, labels, s["K"], _train_config(s), trace_path=s["trace"])
    if s["model"]:
        with open(s["model"], "w", encoding="utf-8") as fh:
            fh.write(model_to_json(result.model))
    if s["out"]:
        write_occupancy_csv(s["out"], result.table)
    else:
        _emit_rows(None, ["ellipse", "class", "count"], [list(r) for r in result.table])
    for k in result.singular:
        print(f"ellipse {k} is singular and counted as empty", file=sys.stderr)
    return 0


def _cmd_fit_generator(s):
    if s["iters"] is None:
        raise InputError("fit-generator needs a fixed --iters")
    if s["data"]:
        target, _ = read_point_csv(s["data"], _labeled(s))
    else:
        target = ring_points(s["data_size"], derived_rng(s["seed"], 5))
    data = make_empirical(target)
    init_rng = derived_rng(s["seed"], 6)
    gen = MlpGenerator.xavier([2, s["hidden"], data.dim], init_rng, activations=["relu", "none"], seed=s["seed"])
    cost_network, cost = None, None
    if s["cost"] == "learned":
        cost_network = CostNetwork.init(data.dim, init_rng, feature_dim=s["feature_dim"], clip=s["clip"],
                                        seed=s["seed"])
    else:
        cost = _fixed_cost(s)
    config = _train_config(s, n_c=s["n_critic"], clip=s["clip"], optimizer="rmsprop" if cost_network else "adam")
    gen, cost_network, _ = fit(gen, data, config, cost=cost, cost_network=cost_network, trace_path=s["trace"])
    if s["model"]:
        with open(s["model"], "w", encoding="utf-8") as fh:
            fh.write(model_to_json(gen))
    Z, _ = sample_latent(gen.latent, s["samples"], derived_rng(s["seed"], 7))
    samples = gen.forward(Z)[0]
    if s["out"]:
        write_point_csv(s["out"], samples)
    else:
        _emit_rows(None, [f"x{i}" for i in range(samples.shape[1])], [[fmt(v) for v in row] for row in samples])
    return 0


def _cmd_sample_complexity(s):
    p = s["p"]
    if s["cost"] != "sqeuclidean":
        cost = _fixed_cost(s)
        p = cost.p
    if s["N"] is None:
        N_list = list(N_GRID)
    elif isinstance(s["N"], (list, tuple)):
        N_list = [int(v) for v in s["N"]]
    else:
        try:
            N_list = [int(v) for v in str(s["N"]).split(",") if v.strip()]
        except ValueError:
            raise InputError(f"invalid --N list {s['N']!r}") from None
    records = sample_complexity_run(s["d"], _epsilon(s["epsilon"]), p, N_list, s["replicates"], s["seed"],
                                    s["dist"], L=s["iters"], mode=_MODES[s["log_domain"]])
    if s["out"]:
        write_complexity_csv(s["out"], records)
        try:
            rate = estimate_rate(records)
            print(f"kappa={fmt(rate.kappa)} N_range={rate.N_range[0]}-{rate.N_range[1]}")
        except InputError as exc:
            print(f"no rate fit: {exc}", file=sys.stderr)
    else:
        _emit_rows(None, ["N", "R", "S", "replicates", "d", "epsilon", "p"],
                   [[r.N, fmt(r.R), fmt(r.S), r.replicates, r.d, fmt(r.epsilon), fmt(r.p)] for r in records])
    return 0


def _cmd_positivity(s):
    t_grid = default_t_grid(s["t_max"], s["t_points"])
    scans = positivity_experiment(s["n"], s["p"], _epsilon(s["epsilon"]), s["realizations"], s["seed"], t_grid,
                                  L=s["iters"], mode=_MODES[s["log_domain"]])
    if s["out"]:
        write_positivity_csv(s["out"], scans)
    else:
        _emit_rows(None, ["t", "value", "realization"],
                   [[fmt(t), fmt(v), i] for i, sc in enumerate(scans) for t, v in zip(sc.t_grid, sc.values)])
    return 0


_COMMANDS = {
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "fit-ellipses": _cmd_fit_ellipses,
    "fit-generator": _cmd_fit_generator,
    "sample-complexity": _cmd_sample_complexity,
    "positivity": _cmd_positivity,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        settings = _settings(args)
        return _COMMANDS[args.command](settings)
    except TrainingAborted as exc:
        print(f"error: training aborted after {len(exc.trace)} steps: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (InputError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
