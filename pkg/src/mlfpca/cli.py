"""Command-line interface: fit, simulate, evaluate, select-rank, plot-data, study.

Exit codes: 0 success, 1 invalid input or configuration, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .basis import build_basis
from .config import ConfigError, env_overrides, parse_bool, read_config_file, resolve
from .dataset import design_times, load_csv, write_csv
from .gaussian import EMConfig, fit_multilevel_gaussian, fit_singlelevel_gaussian
from .mcem import GibbsConfig, fit_multilevel_stn
from .model import NumericalError, assemble_designs, extract_curves
from .ranks import select_ranks, write_scree_csv
from .serialize import (
    SavedModel,
    load_model,
    read_curves_csv,
    save_model,
    saved_from_fit,
    write_curves_csv,
    write_gaussian_trace,
    write_stn_trace,
)
from .simulate import SimDesign, generate, mse_variable_curves, run_study

log = logging.getLogger("mlfpca")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2


def _floats(text: str) -> tuple[float, ...]:
    text = str(text).strip()
    return tuple(float(x) for x in text.split(",") if x.strip()) if text else ()


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in str(text).split(",") if x.strip())


def _rank(text: str) -> int | str:
    text = str(text).strip().lower()
    if text == "auto":
        return "auto"
    value = int(text)
    if value < 0:
        raise ValueError("ranks must be nonnegative")
    return value


# name -> (default, converter, help)
BASIS_OPTS: dict[str, tuple[Any, Callable, str]] = {
    "basis": ("bspline-cubic", str, "basis kind: bspline-cubic or natural-cubic"),
    "knots": ((), _floats, "comma-separated interior knots (bspline-cubic)"),
    "grid_length": (None, int, "fine-grid length (default max(101, 10 p))"),
}
EM_OPTS = {
    "max_iterations": (500, int, "maximum EM iterations"),
    "tolerance": (1e-8, float, "relative log-likelihood tolerance"),
    "orthogonalize_each_iteration": (False, parse_bool, "orthogonalise after every M-step"),
    "ridge": (1e-4, float, "relative ridge penalty for initial replicate fits"),
}
MCEM_OPTS = {
    "sweeps": (100, int, "Gibbs sweeps per MCEM iteration"),
    "burn_in": (20, int, "burn-in sweeps per MCEM iteration"),
    "seed": (0, int, "random seed"),
    "mcem_iterations": (1000, int, "maximum MCEM iterations"),
    "convergence_window": (50, int, "MCEM convergence window"),
    "convergence_rel_change": (1e-3, float, "MCEM convergence threshold"),
    "gaussian_limit": (False, parse_bool, "fix lambda=0, nu=1e6 in the skew-t-normal fit"),
}
RANK_OPTS = {
    "var_threshold": (0.99, float, "variance share kept at the variable level"),
    "rep_threshold": (0.60, float, "variance share kept at the replicate level"),
}
COMMON_OPTS = {"threads": (None, int, "BLAS thread limit (default: library default)")}

COMMAND_OPTS = {
    "fit": {
        "model": ("gaussian", str, "gaussian, stn or single"),
        "rank_variable": (2, _rank, "variable-level rank K or 'auto'"),
        "rank_replicate": (1, _rank, "replicate-level rank L or 'auto'"),
        **BASIS_OPTS, **EM_OPTS, **MCEM_OPTS, **RANK_OPTS, **COMMON_OPTS,
    },
    "simulate": {
        "preset": ("standard", str, "simulation preset"),
        "variables": (100, int, "number of variables M"),
        "replicates": (5, int, "number of replicates n"),
        "seed": (0, int, "random seed"),
        "sigma2": (None, float, "override the noise variance"),
    },
    "evaluate": {},
    "select-rank": {**BASIS_OPTS, **EM_OPTS, **RANK_OPTS, **COMMON_OPTS},
    "plot-data": {
        "pc": (1, int, "principal component number (1-based)"),
        "level": ("variable", str, "variable or replicate"),
        "variable": (None, str, "variable id (replicate level or single-level models)"),
        "scale": (1.0, float, "scaling constant C"),
    },
    "study": {
        "variables_list": ((100,), _ints, "comma-separated variable counts"),
        "replicates_list": ((5, 10), _ints, "comma-separated replicate counts"),
        "repetitions": (50, int, "datasets per cell"),
        "seed": (0, int, "master seed"),
        **EM_OPTS, **COMMON_OPTS,
    },
}


def _add_options(p: argparse.ArgumentParser, opts) -> None:
    for name, (default, conv, help_) in opts.items():
        flag = "--" + name.replace("_", "-")
        if conv is parse_bool:
            p.add_argument(flag, dest=name, action="store_const", const=True, default=None, help=help_)
        else:
            p.add_argument(flag, dest=name, type=conv, default=None,
                           help=f"{help_} (default: {default!r})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mlfpca",
        description="Multi-level reduced-rank functional PCA for replicated time-course panels.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a model to a long-format CSV")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--config", help="key = value configuration file")
    _add_options(p, COMMAND_OPTS["fit"])

    p = sub.add_parser("simulate", help="generate a simulated dataset")
    p.add_argument("-o", "--output", required=True, help="dataset CSV path")
    p.add_argument("--truth", help="write true curves to this CSV")
    p.add_argument("--truth-model", help="write the generating model to this JSON")
    p.add_argument("--config")
    _add_options(p, COMMAND_OPTS["simulate"])

    p = sub.add_parser("evaluate", help="MSE of fitted variable curves against the truth")
    p.add_argument("fitted", help="model JSON or curves CSV")
    p.add_argument("truth", help="model JSON or curves CSV")
    p.add_argument("-o", "--output", help="per-variable MSE CSV")
    p.add_argument("--config")

    p = sub.add_parser("select-rank", help="choose K and L_i by variance explained")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True, help="scree CSV path")
    p.add_argument("--config")
    _add_options(p, COMMAND_OPTS["select-rank"])

    p = sub.add_parser("plot-data", help="mean +/- C * PC curves as CSV")
    p.add_argument("model")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--config")
    _add_options(p, COMMAND_OPTS["plot-data"])

    p = sub.add_parser("study", help="run the simulation study harness")
    p.add_argument("-o", "--output", required=True, help="results CSV path")
    p.add_argument("--config")
    _add_options(p, COMMAND_OPTS["study"])
    return parser


def effective_settings(args: argparse.Namespace, environ=None) -> dict[str, Any]:
    opts = COMMAND_OPTS[args.command]
    defaults = {k: v[0] for k, v in opts.items()}
    converters = {k: v[1] for k, v in opts.items()}
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    env_values = env_overrides(opts, environ)
    flags = {k: getattr(args, k, None) for k in opts}
    return resolve(defaults, converters, file_values, env_values, flags)


def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def write_manifest(path: Path, command: str, settings: dict, inputs: dict, outputs: dict) -> None:
    doc = {
        "program": "mlfpca",
        "version": __version__,
        "command": command,
        "settings": {k: _jsonable(v) for k, v in settings.items()},
        "inputs": inputs,
        "outputs": outputs,
    }
    path.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def _threads(settings):
    n = settings.get("threads")
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def _basis_for(ds, s):
    knots = s["knots"] or None
    if s["basis"] == "natural-cubic":
        knots = None
    return build_basis(s["basis"], design_times(ds), interior_knots=knots, fine_grid_length=s["grid_length"])


def _em_config(s) -> EMConfig:
    return EMConfig(
        max_iterations=s["max_iterations"],
        loglik_rel_tolerance=s["tolerance"],
        orthogonalize_each_iteration=s["orthogonalize_each_iteration"],
        ridge_penalty_init=s["ridge"],
    )


# --- commands -------------------------------------------------------------------


def cmd_fit(args, s) -> int:
    ds = load_csv(args.input)
    basis = _basis_for(ds, s)
    designs = assemble_designs(ds, basis)
    em = _em_config(s)
    K, L = s["rank_variable"], s["rank_replicate"]
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {}
    if K == "auto" or L == "auto":
        sel = select_ranks(designs, None, s["var_threshold"], s["rep_threshold"], em)
        K = sel.K if K == "auto" else K
        L = sel.L if L == "auto" else L
        write_scree_csv(sel, out / "scree.csv")
        outputs["scree"] = "scree.csv"
    model = s["model"]
    if model == "gaussian":
        fit = fit_multilevel_gaussian(designs, None, K, L, em)
        write_gaussian_trace(fit.trace, out / "trace.csv")
    elif model == "single":
        fit = fit_singlelevel_gaussian(designs, None, L, em)
        write_gaussian_trace(fit.trace, out / "trace.csv")
    elif model == "stn":
        cfg = GibbsConfig(
            sweeps_S=s["sweeps"],
            burn_in=s["burn_in"],
            seed=s["seed"],
            mcem_iterations=s["mcem_iterations"],
            convergence_window=s["convergence_window"],
            convergence_rel_change=s["convergence_rel_change"],
            gaussian_limit=s["gaussian_limit"],
            ridge_penalty_init=s["ridge"],
        )
        fit = fit_multilevel_stn(designs, None, K, L, cfg)
        write_stn_trace(fit.trace, out / "trace.csv")
    else:
        raise ConfigError(f"unknown model {model!r}; choose gaussian, stn or single")
    saved = saved_from_fit(fit, basis, model)
    save_model(saved, out / "model.json")
    curves = extract_curves(fit.params, fit.moments.alpha, fit.moments.beta, basis, designs)
    write_curves_csv(curves, out / "curves.csv")
    outputs.update(model="model.json", curves="curves.csv", trace="trace.csv")
    s = dict(s, rank_variable=fit.params.K, rank_replicate=sorted(set(fit.params.L)))
    write_manifest(out / "manifest.json", "fit", s, {"input": str(args.input)}, outputs)
    print(f"fitted {model} model: M={designs.M}, K={fit.params.K}, "
          f"iterations={fit.iterations}, converged={fit.converged}")
    return EXIT_OK


PRESETS = ("standard", "paper-3.1")  # alias kept for existing scripts


def cmd_simulate(args, s) -> int:
    if s["preset"] not in PRESETS:
        raise ConfigError(f"unknown preset {s['preset']!r}")
    design = SimDesign(M=s["variables"], n=s["replicates"], seed=s["seed"])
    if s["sigma2"] is not None:
        design = replace(design, sigma2=s["sigma2"])
    ds, truth = generate(design)
    out = Path(args.output)
    write_csv(ds, out)
    outputs = {"dataset": str(out)}
    if args.truth:
        write_curves_csv(truth.curves, args.truth)
        outputs["truth_curves"] = args.truth
    if args.truth_model:
        beta = [truth.beta[i] for i in range(design.M)]
        saved = SavedModel(
            basis=truth.basis,
            params=truth.params,
            variable_ids=tuple(ds.variable_ids),
            replicate_ids=tuple(tuple(r.replicate_id for r in v.replicates) for v in ds),
            alpha=truth.alpha,
            beta=beta,
            fit={"fitter": "truth"},
        )
        save_model(saved, args.truth_model)
        outputs["truth_model"] = args.truth_model
    write_manifest(Path(str(out) + ".manifest.json"), "simulate", s, {}, outputs)
    return EXIT_OK


def _curves_from(path: str):
    if str(path).endswith(".json"):
        return load_model(path).curves()
    return read_curves_csv(path)


def cmd_evaluate(args, s) -> int:
    fitted, truth = _curves_from(args.fitted), _curves_from(args.truth)
    res = mse_variable_curves(fitted, truth)
    if args.output:
        with open(args.output, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("variable", "mse"))
            for vid, m in zip(fitted.variable_ids, res.per_variable):
                w.writerow((vid, repr(float(m))))
    print(f"mean_mse={res.mean!r} sd_mse={res.sd!r} variables={len(res.per_variable)}")
    return EXIT_OK


def cmd_select_rank(args, s) -> int:
    ds = load_csv(args.input)
    basis = _basis_for(ds, s)
    sel = select_ranks(ds, basis, s["var_threshold"], s["rep_threshold"], _em_config(s))
    write_scree_csv(sel, args.output)
    counts = {l: sel.L.count(l) for l in sorted(set(sel.L))}
    print(f"K={sel.K}")
    print("L: " + ", ".join(f"{l} ({c} variables)" for l, c in counts.items()))
    write_manifest(Path(str(args.output) + ".manifest.json"), "select-rank", s,
                   {"input": str(args.input)}, {"scree": str(args.output), "K": sel.K, "L": sel.L})
    return EXIT_OK


def cmd_plot_data(args, s) -> int:
    model = load_model(args.model)
    P, basis = model.params, model.basis
    k = s["pc"] - 1
    vid = s["variable"]
    idx = None
    if vid is not None:
        if vid not in model.variable_ids:
            raise ConfigError(f"unknown variable {vid!r}")
        idx = model.variable_ids.index(vid)
    if s["level"] == "variable":
        theta = P.Theta_alpha
    elif s["level"] == "replicate":
        if idx is None:
            raise ConfigError("--variable is required for replicate-level components")
        theta = P.Theta_beta[idx]
    else:
        raise ConfigError("--level must be 'variable' or 'replicate'")
    if not 0 <= k < theta.shape[1]:
        raise ConfigError(f"--pc must lie in 1..{theta.shape[1]}")
    if P.free_mean:
        if idx is None:
            raise ConfigError("--variable is required for models without a grand mean")
        mean_coef = P.theta_mu[idx]
    else:
        mean_coef = P.theta_mu
    mean = basis.B @ mean_coef
    pc = basis.B @ theta[:, k]
    C = s["scale"]
    with open(args.output, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("time", "mean", "plus", "minus"))
        for t, m, z in zip(basis.grid, mean, pc):
            w.writerow((repr(float(t)), repr(float(m)), repr(float(m + C * z)), repr(float(m - C * z))))
    return EXIT_OK


def cmd_study(args, s) -> int:
    cells = [(M, n) for M in s["variables_list"] for n in s["replicates_list"]]
    rows = run_study(cells, s["repetitions"], output=args.output, seed=s["seed"], config=_em_config(s))
    for r in rows:
        print(f"M={r.M} n={r.n} {r.fitter}: mean_mse={r.mean_mse:.6g} sd_mse={r.sd_mse:.6g} "
              f"repetitions={r.repetitions}")
    write_manifest(Path(str(args.output) + ".manifest.json"), "study", s, {}, {"results": args.output})
    return EXIT_OK


COMMANDS = {
    "fit": cmd_fit,
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
    "select-rank": cmd_select_rank,
    "plot-data": cmd_plot_data,
    "study": cmd_study,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        settings = effective_settings(args)
        with _threads(settings):
            return COMMANDS[args.command](args, settings)
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"mlfpca: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, OSError, KeyError) as exc:
        print(f"mlfpca: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
