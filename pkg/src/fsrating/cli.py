"""Command-line front end: simulate, fit, price, dependence, evaluate, report.

Exit codes: 0 success, 1 validation error, 2 numerical failure, 3 I/O error.
Every successful command writes ``manifest.json`` next to its artifacts; the
manifest is the only artifact carrying timestamps.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pandas as pd
import scipy

from . import __version__
from .portfolio import CovariateSchema, load_portfolio, write_portfolio

log = logging.getLogger("fsrating")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3


@dataclass
class CommandResult:
    exit_code: int
    artifacts: list[str] = field(default_factory=list)
    manifest: dict | None = None
    message: str = ""


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n", encoding="utf-8")


def _write_csv(path: Path, frame: pd.DataFrame) -> None:
    frame.to_csv(path, index=False, lineterminator="\n")


def _load(args):
    schema = CovariateSchema.from_json(args.schema)
    return load_portfolio(args.policies, args.claims, schema)


def _load_model(path):
    from .estimation import FittedModel

    return FittedModel.from_json(Path(path).read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# subcommands; each returns (artifact paths, inputs, config dict)


def cmd_simulate(args, out: Path):
    from .simulate import SimConfig, simulate_portfolio

    cfg_path = Path(args.config)
    doc = json.loads(cfg_path.read_text(encoding="utf-8"))
    if args.seed is not None:
        doc["seed"] = args.seed
    config = SimConfig.from_dict(doc)
    portfolio, paths = simulate_portfolio(config)
    files = {
        "policies": out / "policies.csv",
        "claims": out / "claims.csv",
        "schema": out / "schema.json",
        "truth": out / "truth.json",
        "paths": out / "latent_paths.csv",
    }
    write_portfolio(portfolio, files["policies"], files["claims"])
    _write_json(files["schema"], portfolio.schema.to_dict())
    _write_json(files["truth"], config.truth.to_dict())
    ids = [seq[0].policy_id for seq in portfolio.policies]
    frame = pd.DataFrame({"policy_id": np.repeat(ids, paths.shape[1]),
                          "period": np.tile(np.arange(1, paths.shape[1] + 1), len(ids)),
                          "profile": paths.ravel()})
    _write_csv(files["paths"], frame[frame["profile"] >= 0])
    return list(files.values()), [cfg_path], config.to_dict()


def cmd_fit(args, out: Path):
    from .distributions import ModelParameters
    from .estimation import FitConfig, fit

    portfolio = _load(args)
    doc = {}
    if args.config:
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    overrides = {"K": args.k, "representation": args.representation, "ridge_lambda": args.ridge,
                 "n_starts": args.starts, "seed": args.seed, "em_max_iter": args.max_iter}
    doc.update({k: v for k, v in overrides.items() if v is not None})
    if args.ridge_all:
        doc["ridge_all"] = True
    if args.no_se:
        doc["compute_standard_errors"] = False
    if args.warm_start:
        warm = json.loads(Path(args.warm_start).read_text(encoding="utf-8"))
        doc["warm_start"] = ModelParameters.from_dict(warm.get("params", warm))
    config = FitConfig.from_dict(doc)
    fitted = fit(portfolio, config)
    model_path = out / "model.json"
    diag_path = out / "diagnostics.csv"
    model_path.write_text(fitted.to_json() + "\n", encoding="utf-8")
    d = fitted.diagnostics
    _write_csv(diag_path, pd.DataFrame({"iteration": np.arange(len(d.loglik_trace)),
                                        "loglik": d.loglik_trace,
                                        "penalized_objective": d.penalized_trace}))
    inputs = [Path(args.policies), Path(args.claims), Path(args.schema)]
    if args.config:
        inputs.append(Path(args.config))
    if args.warm_start:
        inputs.append(Path(args.warm_start))
    cfg = config.to_dict()
    return [model_path, diag_path], inputs, cfg


def cmd_price(args, out: Path):
    from .pricing import price_portfolio

    portfolio = _load(args)
    fitted = _load_model(args.model)
    table = price_portfolio(portfolio, fitted)
    path = out / "premiums.csv"
    _write_csv(path, table)
    return [path], [Path(args.policies), Path(args.claims), Path(args.schema), Path(args.model)], {}


def cmd_dependence(args, out: Path):
    from .dependence import dependence_summary

    portfolio = _load(args)
    fitted = _load_model(args.model)
    variants = ["prior", "posterior"] if args.variant == "both" else [args.variant]
    doc = {}
    paths = []
    for v in variants:
        rep = dependence_summary(portfolio, fitted, v, args.method, n_mc=args.mc_draws, seed=args.seed)
        doc[v] = rep.to_dict()
        csv_path = out / f"dependence_{v}.csv"
        _write_csv(csv_path, rep.table)
        paths.append(csv_path)
    json_path = out / "dependence.json"
    _write_json(json_path, doc)
    cfg = {"variant": args.variant, "method": args.method, "mc_draws": args.mc_draws, "seed": args.seed}
    return [json_path] + paths, [Path(args.policies), Path(args.claims), Path(args.schema), Path(args.model)], cfg


def cmd_evaluate(args, out: Path):
    from .evaluation import loss_ratio, ordered_lorenz, ratio_gini_matrix
    from .pricing import price_portfolio

    portfolio = _load(args)
    names = args.names or [Path(m).stem for m in args.models]
    if len(names) != len(args.models):
        raise ValueError("--names must match --models")
    if len(set(names)) != len(names):
        raise ValueError("model names must be unique")
    arrays = portfolio.arrays
    models = {}
    premia = {"prior": {}, "posterior": {}}
    for name, path in zip(names, args.models):
        fitted = _load_model(path)
        table = price_portfolio(portfolio, fitted)
        d = fitted.diagnostics
        models[name] = {
            "loglik": d.loglik, "n_params": d.n_params, "aic": d.aic, "bic": d.bic,
            "K": fitted.params.K, "representation": fitted.params.representation.value,
            "loss_ratio_prior": loss_ratio(arrays.loss, arrays.exposure, table["prior_premium"].to_numpy()),
            "loss_ratio_posterior": loss_ratio(arrays.loss, arrays.exposure, table["posterior_premium"].to_numpy()),
        }
        premia["prior"][name] = table["prior_premium"].to_numpy()
        premia["posterior"][name] = table["posterior_premium"].to_numpy()
    doc = {"models": models}
    paths = []
    if len(names) >= 2:
        for variant in ("prior", "posterior"):
            cm = ratio_gini_matrix(premia[variant], arrays.loss, arrays.exposure)
            doc[f"ratio_gini_{variant}"] = cm.to_dict()
            rows = []
            for b in names:
                for a in names:
                    if a == b:
                        continue
                    curve = ordered_lorenz(premia[variant][b], premia[variant][a], arrays.loss, arrays.exposure)
                    rows.append(pd.DataFrame({"benchmark": b, "alternative": a, "x": curve.x, "y": curve.y}))
            path = out / f"lorenz_{variant}.csv"
            _write_csv(path, pd.concat(rows, ignore_index=True))
            paths.append(path)
    json_path = out / "comparison.json"
    _write_json(json_path, doc)
    inputs = [Path(args.policies), Path(args.claims), Path(args.schema)] + [Path(m) for m in args.models]
    return [json_path] + paths, inputs, {"names": names}


def cmd_report(args, out: Path):
    from .evaluation import experience_report

    portfolio = _load(args)
    fitted = _load_model(args.model)
    tables = experience_report(portfolio, fitted, amount_width=args.amount_width)
    paths = []
    for name, frame in tables.items():
        path = out / f"{name}.csv"
        _write_csv(path, frame)
        paths.append(path)
    inputs = [Path(args.policies), Path(args.claims), Path(args.schema), Path(args.model)]
    return paths, inputs, {"amount_width": args.amount_width}


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "price": cmd_price,
    "dependence": cmd_dependence,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fsrating", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=1,
                        help="worker cap (computations are vectorised and run in one process)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_args(p):
        p.add_argument("--policies", required=True, help="policy-period CSV")
        p.add_argument("--claims", required=True, help="claims CSV")
        p.add_argument("--schema", required=True, help="covariate schema JSON")

    p = sub.add_parser("simulate", help="draw a synthetic portfolio")
    p.add_argument("--config", required=True, help="simulation config JSON (truth or preset)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit", help="estimate a model by EM")
    data_args(p)
    p.add_argument("--config", help="FitConfig JSON; flags override it")
    p.add_argument("--k", type=int)
    p.add_argument("--representation", choices=["full", "sparse"])
    p.add_argument("--warm-start", help="model JSON used as one of the starts")
    p.add_argument("--ridge", type=float)
    p.add_argument("--ridge-all", action="store_true", help="penalise every coordinate, not only slopes")
    p.add_argument("--starts", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--no-se", action="store_true", help="skip standard errors")
    p.add_argument("--out", required=True)

    p = sub.add_parser("price", help="prior and posterior premia per policy period")
    data_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("dependence", help="implied frequency-severity dependence")
    data_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--variant", choices=["prior", "posterior", "both"], default="both")
    p.add_argument("--method", choices=["quadrature", "monte_carlo"], default="quadrature")
    p.add_argument("--mc-draws", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="information criteria, loss ratios and ratio Gini matrices")
    data_args(p)
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--names", nargs="+")
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="experience tables by prior exposure and claims")
    data_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--amount-width", type=float, default=2500.0)
    p.add_argument("--out", required=True)
    return parser


def _classify(exc: BaseException) -> int:
    from .hmm import DegenerateLikelihoodError

    if isinstance(exc, OSError):
        return EXIT_IO
    if isinstance(exc, (FloatingPointError, DegenerateLikelihoodError, np.linalg.LinAlgError, ArithmeticError)):
        return EXIT_NUMERICAL
    if isinstance(exc, (ValueError, KeyError, TypeError, json.JSONDecodeError, NotImplementedError)):
        return EXIT_VALIDATION
    return EXIT_NUMERICAL


def run(argv=None) -> CommandResult:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = datetime.now(timezone.utc)
    t0 = time.perf_counter()
    try:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        artifacts, inputs, config = COMMANDS[args.command](args, out)
    except Exception as exc:  # noqa: BLE001 - mapped to an exit code
        code = _classify(exc)
        msg = f"fsrating {args.command}: {type(exc).__name__}: {exc}"
        print(msg, file=sys.stderr)
        if args.verbose:
            log.exception("failure")
        return CommandResult(code, message=msg)
    config_blob = json.dumps(config, sort_keys=True, default=str).encode()
    manifest = {
        "command": args.command,
        "argv": list(argv) if argv is not None else sys.argv[1:],
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in artifacts},
        "config_sha256": hashlib.sha256(config_blob).hexdigest(),
        "seed": getattr(args, "seed", None),
        "threads": args.threads,
        "versions": {"fsrating": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__, "pandas": pd.__version__},
        "timestamp": started.isoformat(),
        "wall_time": time.perf_counter() - t0,
    }
    _write_json(out / "manifest.json", manifest)
    return CommandResult(EXIT_OK, [str(p) for p in artifacts], manifest)


def main(argv=None) -> int:
    return run(argv).exit_code


if __name__ == "__main__":
    sys.exit(main())
