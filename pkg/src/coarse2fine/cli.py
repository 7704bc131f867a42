"""Command line front end.

Exit codes: 0 on success, 2 for usage or input errors, 3 when a fit fails
numerically.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .analysis import (
    FITTERS,
    SubsampleError,
    SubsampleSpec,
    cross_validate,
    subsample_se,
)
from .em import DivergenceError, FitConfig, NewtonError, em_fit
from .estimators import RankDeficientError, mom_fit, naive_fit
from .io import (
    IngestError,
    IngestSpec,
    ingest,
    read_rho,
    read_truth,
    write_binning,
    write_dataset,
    write_rho,
    write_rows,
)
from .report import render_svg
from .simulation import SCENARIOS, SimulationConfig, sample

log = logging.getLogger("coarse2fine")

EXIT_USAGE = 2
EXIT_NUMERIC = 3
NUMERIC_ERRORS = (RankDeficientError, NewtonError, DivergenceError, SubsampleError, np.linalg.LinAlgError)
FIT_METHODS = ("naive", "mom", "em")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    method: str = "em"
    fit: FitConfig = field(default_factory=FitConfig)
    sim: Optional[SimulationConfig] = None
    se: Optional[SubsampleSpec] = None
    output_dir: Path = Path("out")
    ingest: Optional[IngestSpec] = None
    scenario: Optional[str] = None
    n_splits: int = 20
    split_seed: int = 0
    methods: list = field(default_factory=lambda: ["null", "direct", "latent", "oracle"])
    seed: Optional[int] = None


def _parse_wh(text) -> float:
    if isinstance(text, (int, float)):
        return float(text)
    if str(text).strip().lower() in ("inf", "infinity", "+inf"):
        return math.inf
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid wh {text!r}") from None


def load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return data


def build_run_config(args) -> RunConfig:
    raw = load_config(getattr(args, "config", None))
    try:
        fit_d = dict(raw.get("fit", {}))
        if "wh" in fit_d:
            fit_d["wh"] = _parse_wh(fit_d["wh"])
        if getattr(args, "wh", None) is not None:
            fit_d["wh"] = args.wh
        fit = FitConfig(**fit_d)

        se_d = dict(raw.get("se") or {})
        if getattr(args, "replicates", None) is not None:
            se_d["n_replicates"] = args.replicates
        if getattr(args, "seed", None) is not None:
            se_d["seed"] = args.seed
        se = SubsampleSpec(**se_d)

        sim = None
        if raw.get("sim"):
            sim_d = dict(raw["sim"])
            if getattr(args, "seed", None) is not None:
                sim_d["seed"] = args.seed
            sim = SimulationConfig.from_dict(sim_d)

        ingest_spec = None
        ing = dict(raw.get("ingest") or {})
        for key, attr in (
            ("groups_file", "groups"),
            ("items_file", "items"),
            ("signal_kind", "signal_kind"),
            ("binning_file", "binning"),
            ("cap_m", "cap_m"),
        ):
            if getattr(args, attr, None) is not None:
                ing[key] = getattr(args, attr)
        if getattr(args, "features", None):
            ing["feature_columns"] = [c.strip() for c in args.features.split(",") if c.strip()]
        data_dir = getattr(args, "data", None)
        if data_dir:
            d = Path(data_dir)
            ing.setdefault("groups_file", d / "groups.csv")
            ing.setdefault("items_file", d / "items.csv")
            if (d / "binning.csv").exists() and not ing.get("feature_columns"):
                ing.setdefault("binning_file", d / "binning.csv")
        if "groups_file" in ing or "items_file" in ing:
            ingest_spec = IngestSpec(**ing)

        cv = dict(raw.get("eval") or {})
        methods = cv.get("methods", ["null", "direct", "latent", "oracle"])
        if getattr(args, "methods", None):
            methods = [m.strip() for m in args.methods.split(",") if m.strip()]
        n_splits = args.splits if getattr(args, "splits", None) is not None else cv.get("n_splits", 20)
        split_seed = args.seed if getattr(args, "seed", None) is not None else cv.get("seed", 0)

        method = getattr(args, "method", None) or raw.get("method", "em")
        if method not in FIT_METHODS + ("all",):
            raise UsageError(f"unknown method {method!r}")
        out = getattr(args, "out", None) or raw.get("output_dir", "out")
        scenario = getattr(args, "scenario", None) or raw.get("scenario")
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad configuration: {exc}") from None
    return RunConfig(
        method=method,
        fit=fit,
        sim=sim,
        se=se,
        output_dir=Path(out),
        ingest=ingest_spec,
        scenario=scenario,
        n_splits=int(n_splits),
        split_seed=int(split_seed),
        methods=methods,
        seed=getattr(args, "seed", None) if getattr(args, "seed", None) is not None else raw.get("seed"),
    )


def _load_data(cfg: RunConfig):
    if cfg.ingest is None:
        raise UsageError("no input data: pass --data DIR or --groups/--items")
    cap = cfg.ingest.cap_m
    log.info("reading %s and %s", cfg.ingest.groups_file, cfg.ingest.items_file)
    dataset, manifest = ingest(cfg.ingest)
    if cap is not None:
        log.info("down-weighted groups to at most %s effective items", cap)
    return dataset, manifest


def _methods(cfg):
    return list(FIT_METHODS) if cfg.method == "all" else [cfg.method]


def _out_dir(cfg) -> Path:
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    return cfg.output_dir


def cmd_simulate(cfg: RunConfig) -> int:
    if cfg.sim is not None:
        sim = cfg.sim
    elif cfg.scenario in SCENARIOS:
        sim = SCENARIOS[cfg.scenario](cfg.seed or 0)
    else:
        raise UsageError(
            f"unknown scenario {cfg.scenario!r}; choose from {sorted(SCENARIOS)} or give a sim config"
        )
    truth = sample(sim)
    out = _out_dir(cfg)
    write_dataset(out, truth.dataset)
    write_rows(out / "truth.csv", ["bin", "true_rho"], [(k + 1, float(r)) for k, r in enumerate(truth.true_rho)])
    write_rows(
        out / "truth_groups.csv",
        ["group_id", "true_mu"],
        [(gid, float(m)) for gid, m in zip(truth.dataset.group_ids, truth.true_mu)],
    )
    with open(out / "simulation.json", "w") as fh:
        json.dump(sim.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("wrote %d groups, %d items (seed %d) to %s", truth.dataset.n_groups, truth.dataset.n_items, sim.seed, out)
    return 0


def _fit_one(method, dataset, cfg):
    if method == "naive":
        return naive_fit(dataset), None
    if method == "mom":
        return mom_fit(dataset), None
    result = em_fit(dataset, cfg.fit)
    return result.estimate, result


def cmd_fit(cfg: RunConfig, with_se: bool = False) -> int:
    dataset, manifest = _load_data(cfg)
    out = _out_dir(cfg)
    estimates = []
    for method in _methods(cfg):
        est, result = _fit_one(method, dataset, cfg)
        if with_se:
            fitter = {"naive": naive_fit, "mom": mom_fit}.get(method) or FITTERS["em"](cfg.fit)
            est = est.with_se(subsample_se(dataset, fitter, cfg.se))
        estimates.append(est)
        if result is not None:
            write_rows(
                out / "mu.csv",
                ["group_id", "he", "mu_hat"],
                [(g.group_id, g.he, float(m)) for g, m in zip(dataset.groups, result.state.mu)],
            )
            write_rows(
                out / "trace.csv",
                ["iteration", "objective"],
                [(i, float(v)) for i, v in enumerate(result.state.objective_trace)],
            )
            log.info(
                "em: %d iterations, converged=%s", result.iterations, result.converged
            )
        bad = int((~est.in_unit_interval).sum())
        if bad:
            log.warning("%s: %d bins outside [0, 1]", method, bad)
    write_rho(out / "rho.csv", estimates, dataset.binning.labels)
    write_binning(out / "binning.csv", manifest)
    return 0


def cmd_se(cfg: RunConfig) -> int:
    log.info(
        "standard errors are raw standard deviations across %d half-samples of the groups",
        cfg.se.n_replicates,
    )
    return cmd_fit(cfg, with_se=True)


def cmd_eval(cfg: RunConfig) -> int:
    dataset, _ = _load_data(cfg)
    if dataset.labels is None:
        raise UsageError("eval needs a 'label' column in the items file")
    report = cross_validate(dataset, cfg.methods, cfg.n_splits, cfg.split_seed, cfg.fit)
    out = _out_dir(cfg)
    write_rows(
        out / "eval.csv",
        ["method", "mean_classification_error", "rmse", "failed_splits", "n_splits", "split_seed"],
        [
            (r.method, r.mean_classification_error, r.rmse, r.failed_splits, report.n_splits, report.split_seed)
            for r in report.rows
        ],
    )
    for r in report.rows:
        print(f"{r.method:8s} error={r.mean_classification_error:.4f} rmse={r.rmse:.4f}")
    return 0


def cmd_report(args) -> int:
    series = read_rho(Path(args.rho))
    if not series:
        raise IngestError(f"{args.rho}: no estimate rows")
    truth = read_truth(Path(args.truth)) if args.truth else None
    svg = render_svg(series, truth, title=args.title)
    out = Path(args.out)
    if out.suffix != ".svg":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "report.svg"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(svg)
    return 0


def _add_data_args(p):
    p.add_argument("--data", help="directory holding groups.csv, items.csv and optional binning.csv")
    p.add_argument("--groups", help="groups file (group_id,signal)")
    p.add_argument("--items", help="items file (group_id,<features>|bin[,weight][,label])")
    p.add_argument("--binning", help="binning manifest (bin,label[,features])")
    p.add_argument("--features", help="comma-separated item columns to cross into bins")
    p.add_argument("--signal-kind", choices=("logit", "fraction"), dest="signal_kind")
    p.add_argument("--cap-m", type=float, dest="cap_m", help="cap on each group's effective item count")
    p.add_argument("--wh", type=_parse_wh, help="weight on the coarse signal (accepts inf)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coarse2fine", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration; flags override it")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)

    p = sub.add_parser("simulate", parents=[common], help="sample a dataset from the generative model")
    p.add_argument("--scenario", help=f"canned scenario: {', '.join(sorted(SCENARIOS))}")

    p = sub.add_parser("fit", parents=[common], help="fit per-bin posteriors")
    _add_data_args(p)
    p.add_argument("--method", choices=FIT_METHODS + ("all",))

    p = sub.add_parser("se", parents=[common], help="fit with half-sampling standard errors")
    _add_data_args(p)
    p.add_argument("--method", choices=FIT_METHODS + ("all",))
    p.add_argument("--replicates", type=int)

    p = sub.add_parser("eval", parents=[common], help="cross-validate methods on labelled data")
    _add_data_args(p)
    p.add_argument("--splits", type=int)
    p.add_argument("--methods", help="comma-separated: null,direct,latent,oracle,mom")

    p = sub.add_parser("report", help="render rho.csv as an SVG chart")
    p.add_argument("--rho", required=True)
    p.add_argument("--truth")
    p.add_argument("--title", default="Posterior by bin")
    p.add_argument("--out", required=True, help="output .svg file or directory")
    return parser


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "se": cmd_se, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "report":
            return cmd_report(args)
        cfg = build_run_config(args)
        return COMMANDS[args.command](cfg)
    except (UsageError, IngestError) as exc:
        print(f"coarse2fine: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NUMERIC_ERRORS as exc:
        print(f"coarse2fine: fit failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
