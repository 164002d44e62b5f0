"""Batch command-line front end.

Subcommands: order-check, premium-curve, battery, simulate, estimate,
bootstrap, model-compare. Flags take precedence over an optional key=value
config file, which takes precedence over built-in defaults; the effective
configuration is echoed to stderr. Exit codes: 0 success, 1 runtime failure,
2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from .estimation import (
    EstimationSpec,
    OptimizerSettings,
    Scheme,
    block_bootstrap,
    fit,
    postprocess_consistent,
    write_fit_csv,
    write_pooled_summary_csv,
)
from .lotteries import Lottery, UtilityFamily
from .models import ChoiceModelSpec, ModelKind, ModelParams, parse_model_spec
from .ordering import ce_difference_grid, classify_pair
from .premium import DEFAULT_GRID, GridSpec, build_premium_curve
from .exceptions import DatasetError

_CONFIG_KEYS = {"family", "grid", "seed", "population", "generations", "reps", "scheme"}


def _load_config(path: str | None) -> dict[str, str]:
    if path is None:
        return {}
    config: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DatasetError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        key = key.strip().lower()
        if key not in _CONFIG_KEYS:
            raise DatasetError(f"{path}:{lineno}: unknown config key {key!r}")
        config[key] = value.strip()
    return config


def _effective(args: argparse.Namespace, config: dict[str, str], key: str, default, cast):
    flag_val = getattr(args, key.replace("-", "_"), None)
    if flag_val is not None:
        return flag_val
    if key in config:
        return cast(config[key])
    return default


def _parse_grid(text: str) -> GridSpec:
    try:
        start, stop, step = (float(v) for v in text.split(":"))
        return GridSpec(start, stop, step)
    except ValueError:
        raise ValueError(f"bad grid {text!r}; expected start:stop:step")


def _parse_pair(text: str) -> tuple[Lottery, Lottery]:
    if "|" not in text:
        raise ValueError("pair must be given as '<lottery X>|<lottery Y>'")
    x_text, y_text = text.split("|", 1)
    return Lottery.from_text(x_text), Lottery.from_text(y_text)


def _echo_config(pairs: dict) -> None:
    effective = " ".join(f"{k}={v}" for k, v in pairs.items())
    print(f"[config] {effective}", file=sys.stderr)


def _verdict_line(pair_id: str, verdict) -> str:
    crossings = ";".join(f"{c:.6f}" for c in verdict.crossings)
    peak_t = "" if verdict.peak_theta is None else f"{verdict.peak_theta:.4f}"
    peak_p = "" if verdict.peak_premium is None else f"{verdict.peak_premium:.6g}"
    return (f"{pair_id},{str(verdict.pi_ordered).lower()},{str(verdict.omega_ordered).lower()},"
            f"{crossings},{peak_t},{peak_p}")


def _cmd_order_check(args, config) -> int:
    family = UtilityFamily.from_string(_effective(args, config, "family", "crra", str))
    grid = _effective(args, config, "grid", DEFAULT_GRID, _parse_grid)
    x, y = _parse_pair(args.pair)
    _echo_config({"command": "order-check", "family": family.value,
                  "grid": f"{grid.start}:{grid.stop}:{grid.step}"})
    verdict = classify_pair(family, x, y, grid)
    print(_verdict_line(args.id, verdict))
    return 0


def _cmd_premium_curve(args, config) -> int:
    family = UtilityFamily.from_string(_effective(args, config, "family", "crra", str))
    grid = _effective(args, config, "grid", DEFAULT_GRID, _parse_grid)
    x, y = _parse_pair(args.pair)
    _echo_config({"command": "premium-curve", "family": family.value,
                  "grid": f"{grid.start}:{grid.stop}:{grid.step}", "out": args.out})
    curve = build_premium_curve(family, x, y, grid, pair_id=args.id)
    header = ["theta", "premium"]
    columns = [curve.grid, curve.values]
    if args.with_ce_diff:
        header.append("ce_diff")
        columns.append(ce_difference_grid(family, x, y, grid)[1])
    if args.with_coneu_diff:
        from .models import value_index, Menu

        header.append("coneu_diff")
        diffs = np.array([
            (lambda v: v[1] - v[0])(value_index(ModelKind.CON_EU, family, float(t), Menu((x, y))))
            for t in curve.grid
        ])
        columns.append(diffs)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in zip(*columns):
            writer.writerow([f"{v:.10g}" for v in row])
    print(f"wrote {args.out} ({len(curve.grid)} rows)")
    return 0


def _cmd_battery(args, config) -> int:
    family = UtilityFamily.from_string(_effective(args, config, "family", "crra", str))
    if family is not UtilityFamily.CRRA:
        raise ValueError("battery thresholds are defined under CRRA")
    _echo_config({"command": "battery", "family": family.value})
    battery = data_mod.andersen_battery()
    out = args.out
    if out:
        data_mod.write_battery_csv(battery, out)
        print(f"wrote {out} ({len(battery)} pairs)")
    else:
        writer = csv.writer(sys.stdout)
        writer.writerow(["block", "question", "p", "x_hi", "x_lo", "y_hi", "y_lo", "threshold_gamma"])
        for p in battery.pairs:
            xs, ys = p.x.canonical(), p.y.canonical()
            writer.writerow([p.block, p.question, f"{p.question / 10:g}",
                             f"{xs.max_outcome:g}", f"{xs.min_outcome:g}",
                             f"{ys.max_outcome:g}", f"{ys.min_outcome:g}",
                             "" if p.threshold is None else f"{p.threshold:.8f}"])
    thresholds = battery.finite_thresholds()
    print(f"pairs=40 finite_thresholds={len(thresholds)} "
          f"min={min(thresholds):.4f} max={max(thresholds):.4f}", file=sys.stderr)
    return 0


_QUESTION_SETS = {"full": data_mod.QuestionSet.FULL_40, "a": data_mod.QuestionSet.SUBSET_A,
                  "b": data_mod.QuestionSet.SUBSET_B}


def _cmd_simulate(args, config) -> int:
    spec = parse_model_spec(args.model)
    seed = _effective(args, config, "seed", 0, int)
    n = args.n_subjects
    qs = _QUESTION_SETS[args.question_set]
    _echo_config({"command": "simulate", "model": args.model, "n-subjects": n,
                  "seed": seed, "question-set": args.question_set,
                  "gamma-uniform": args.gamma_uniform})
    if args.gamma_uniform is not None:
        lo, hi = args.gamma_uniform
        if spec.params is None:
            raise ValueError("simulate needs lambda/kappa in the model spec")
        rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
        gammas = rng.uniform(lo, hi, n)
        specs = [ChoiceModelSpec(spec.kind, spec.family,
                                 ModelParams(float(g), spec.params.lam, spec.params.kappa))
                 for g in gammas]
    else:
        if spec.params is None:
            raise ValueError("simulate needs theta/lambda/kappa in the model spec")
        specs = [spec] * n
    dataset = data_mod.simulate_dataset(specs, question_sets=qs, seed=seed)
    data_mod.save_choices(dataset, args.out)
    print(f"wrote {args.out} ({dataset.n_subjects} subjects, {dataset.n_choices} choices)")
    return 0


def _estimation_spec(args, config) -> EstimationSpec:
    model = parse_model_spec(args.model)
    scheme = Scheme.from_string(_effective(args, config, "scheme", args.scheme or "pooled", str))
    seed = _effective(args, config, "seed", 0, int)
    population = _effective(args, config, "population", 50, int)
    generations = _effective(args, config, "generations", 100, int)
    settings = OptimizerSettings(population=population, generations=generations,
                                 seed=seed, n_jobs=args.jobs or 1)
    return EstimationSpec(model.kind, model.family, scheme, settings)


def _cmd_estimate(args, config) -> int:
    spec = _estimation_spec(args, config)
    _echo_config({"command": "estimate", "model": args.model, "scheme": spec.scheme.value,
                  "seed": spec.optimizer.seed, "population": spec.optimizer.population,
                  "generations": spec.optimizer.generations})
    dataset = data_mod.load_choices(args.data)
    result = fit(spec, dataset)
    if args.postprocess:
        result = postprocess_consistent(result, dataset)
    write_fit_csv(result, args.out)
    print(f"wrote {args.out} log_likelihood={result.log_likelihood:.6f}")
    return 0


def _cmd_bootstrap(args, config) -> int:
    spec = _estimation_spec(args, config)
    if spec.scheme is Scheme.HETEROSKEDASTIC:
        raise ValueError("bootstrap supports pooled and homoskedastic schemes")
    reps = _effective(args, config, "reps", None, int)
    if reps is None:
        raise ValueError("--reps is required")
    _echo_config({"command": "bootstrap", "model": args.model, "scheme": spec.scheme.value,
                  "reps": reps, "seed": spec.optimizer.seed})
    dataset = data_mod.load_choices(args.data)
    result = fit(spec, dataset)
    boot = block_bootstrap(spec, dataset, reps, seed=spec.optimizer.seed)
    if spec.scheme is Scheme.POOLED:
        write_pooled_summary_csv([(spec.model.value, result, boot)], args.out)
    else:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["model", "lambda", "se_lambda", "kappa", "se_kappa", "n_failed"])
            writer.writerow([spec.model.value, f"{result.shared_lam:.6g}", f"{boot.se_lam:.6g}",
                             f"{result.shared_kappa:.6g}", f"{boot.se_kappa:.6g}", boot.n_failed])
    print(f"wrote {args.out} (reps={reps}, failed={boot.n_failed})")
    return 0


_COMPARE_MODELS = (ModelKind.EU_RUM, ModelKind.CE_RUM, ModelKind.PI_RUM,
                   ModelKind.RPM, ModelKind.CON_EU)


def _cmd_model_compare(args, config) -> int:
    seed = _effective(args, config, "seed", 0, int)
    population = _effective(args, config, "population", 50, int)
    generations = _effective(args, config, "generations", 100, int)
    family = UtilityFamily.from_string(_effective(args, config, "family", "crra", str))
    _echo_config({"command": "model-compare", "family": family.value, "seed": seed,
                  "schemes": args.schemes})
    dataset = data_mod.load_choices(args.data)
    scheme_list = [Scheme.HETEROSKEDASTIC, Scheme.HOMOSKEDASTIC] if args.schemes == "both" \
        else [Scheme.from_string(args.schemes)]
    names = [k.value for k in _COMPARE_MODELS]
    print("scheme," + ",".join(names))
    for scheme in scheme_list:
        lls = {}
        for kind in _COMPARE_MODELS:
            settings = OptimizerSettings(population=population, generations=generations,
                                         seed=seed, n_jobs=args.jobs or 1)
            result = fit(EstimationSpec(kind, family, scheme, settings), dataset)
            lls[kind] = {s.subject_id: s.loglik for s in result.subjects}
        counts = {kind: 0 for kind in _COMPARE_MODELS}
        for subject in dataset.subjects:
            sid = subject.subject_id
            best = max(lls[kind][sid] for kind in _COMPARE_MODELS)
            for kind in _COMPARE_MODELS:
                if lls[kind][sid] >= best - 1e-9:  # ties count for every model
                    counts[kind] += 1
        print(scheme.value + "," + ",".join(str(counts[k]) for k in _COMPARE_MODELS))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="riskpremia",
                                     description="Risk-preference elicitation toolkit")
    parser.add_argument("--config", help="key=value config file (flags win)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("order-check", help="classify a lottery pair")
    p.add_argument("--pair", required=True, help="'x1:p1,...|y1:p1,...'")
    p.add_argument("--family", choices=["crra", "cara"])
    p.add_argument("--grid", type=_parse_grid, help="start:stop:step")
    p.add_argument("--id", default="pair")
    p.set_defaults(handler=_cmd_order_check)

    p = sub.add_parser("premium-curve", help="write a theta,premium CSV")
    p.add_argument("--pair", required=True)
    p.add_argument("--family", choices=["crra", "cara"])
    p.add_argument("--grid", type=_parse_grid)
    p.add_argument("--id", default="pair")
    p.add_argument("--out", required=True)
    p.add_argument("--with-ce-diff", action="store_true",
                   help="add a certainty-equivalent difference column")
    p.add_argument("--with-coneu-diff", action="store_true",
                   help="add a rescaled expected-utility difference column")
    p.set_defaults(handler=_cmd_premium_curve)

    p = sub.add_parser("battery", help="print the built-in 40-pair battery")
    p.add_argument("--family", choices=["crra", "cara"])
    p.add_argument("--out")
    p.set_defaults(handler=_cmd_battery)

    p = sub.add_parser("simulate", help="simulate a choice CSV")
    p.add_argument("--model", required=True, help="model=..;family=..;theta=..;lambda=..;kappa=..")
    p.add_argument("--n-subjects", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--question-set", choices=sorted(_QUESTION_SETS), default="full")
    p.add_argument("--gamma-uniform", nargs=2, type=float, metavar=("LO", "HI"),
                   help="draw per-subject risk parameters uniformly")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_simulate)

    for name, handler in (("estimate", _cmd_estimate), ("bootstrap", _cmd_bootstrap)):
        p = sub.add_parser(name, help=f"{name} a model on a choice CSV")
        p.add_argument("--model", required=True)
        p.add_argument("--scheme", choices=["pooled", "homo", "hetero"])
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--population", type=int)
        p.add_argument("--generations", type=int)
        p.add_argument("--jobs", type=int)
        if name == "estimate":
            p.add_argument("--postprocess", action="store_true",
                           help="apply the consistent-subject midpoint/+-5 rules")
        else:
            p.add_argument("--reps", type=int)
        p.set_defaults(handler=handler)

    p = sub.add_parser("model-compare", help="per-subject best-likelihood counts")
    p.add_argument("--data", required=True)
    p.add_argument("--schemes", choices=["hetero", "homo", "both"], default="both")
    p.add_argument("--family", choices=["crra", "cara"])
    p.add_argument("--seed", type=int)
    p.add_argument("--population", type=int)
    p.add_argument("--generations", type=int)
    p.add_argument("--jobs", type=int)
    p.set_defaults(handler=_cmd_model_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_config(args.config)
        return args.handler(args, config)
    except (ValueError, DatasetError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - unexpected failures
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    raise SystemExit(main())
