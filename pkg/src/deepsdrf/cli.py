"""Command-line entry point: ``deepsdrf <command> [options]``.

Commands
    simulate   write a simulated cohort as panel CSV
    fit        train the GPS and both outcome ensembles on a panel
    estimate   CADR curves for a dose grid (JSON + long CSV)
    recommend  RS / RL dose recommendations (CSV)
    evaluate   metrics of fitted models against the simulation truth
    benchmark  replicated scenarios, recommendation and continuous experiments

The config file (YAML or JSON) mirrors :class:`ExperimentConfig`; an optional
``continuous`` section mirrors :class:`ContinuousConfig`. Exit status is 1 when
any benchmark scenario fails and 2 on usage or input errors.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

import numpy as np
import yaml

from . import continuous, dgp, harness, recommend, serialize, survival
from .gps import GpsEnsemble

logger = logging.getLogger("deepsdrf")

MODEL_FILES = {"gps": "gps.zip", "deepsdrf": "deepsdrf.zip", "snn": "snn.zip"}


def load_config(path: str | None):
    """``(ExperimentConfig, ContinuousConfig)`` from a YAML/JSON file, or defaults."""
    raw = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise ValueError(f"{path}: top level must be a mapping")
    cont = raw.pop("continuous", None) or {}
    if "eval_band" in cont:
        cont["eval_band"] = tuple(cont["eval_band"])
    return harness.ExperimentConfig.from_dict(raw), continuous.ContinuousConfig(**cont)


def _apply_seed(cfg: harness.ExperimentConfig, seed):
    if seed is None:
        return cfg
    return replace(cfg, seed=seed, dgp=cfg.dgp.with_seed(seed))


def _load_models(model_dir: str) -> harness.FittedModels:
    paths = {k: os.path.join(model_dir, f) for k, f in MODEL_FILES.items()}
    missing = [p for p in paths.values() if not os.path.exists(p)]
    if missing:
        raise FileNotFoundError(f"missing model bundles: {missing}")
    return harness.FittedModels(
        GpsEnsemble.load(paths["gps"]),
        survival.OutcomeEnsemble.load(paths["deepsdrf"]),
        survival.OutcomeEnsemble.load(paths["snn"]),
    )


def _doses_arg(text, panel, cfg):
    if text:
        return np.array([float(v) for v in text.split(",")])
    return harness.band_doses(cfg, panel.treatment[:, 0])["center"]


def cmd_simulate(args, cfg, _cont) -> int:
    panel = dgp.simulate_panel(cfg.dgp)
    path = os.path.join(args.out_dir, args.name)
    serialize.write_panel_csv(path, panel)
    harness.write_json(os.path.join(args.out_dir, "simulate_config.json"), cfg.dgp.to_dict())
    print(path)
    return 0


def cmd_fit(args, cfg, _cont) -> int:
    panel = serialize.read_panel_csv(args.panel)
    cfg = replace(cfg, dgp=replace(cfg.dgp, dim_d=panel.dim_d, max_followup=panel.max_followup))
    models = harness.fit_models(cfg, panel, 1000 * cfg.seed)
    models.gps.save(os.path.join(args.out_dir, MODEL_FILES["gps"]))
    models.deepsdrf.save(os.path.join(args.out_dir, MODEL_FILES["deepsdrf"]))
    models.snn.save(os.path.join(args.out_dir, MODEL_FILES["snn"]))
    harness.write_json(os.path.join(args.out_dir, "fit_config.json"), cfg.to_dict())
    print(args.out_dir)
    return 0


def cmd_estimate(args, cfg, _cont) -> int:
    panel = serialize.read_panel_csv(args.panel)
    if args.max_patients:
        panel = panel.subset(np.arange(min(args.max_patients, panel.n_patients)))
    models = _load_models(args.models)
    doses = _doses_arg(args.doses, panel, cfg)
    for kind in args.model:
        records = []
        for a in doses:
            est = survival.estimate_cadr(models.outcome(kind), models.gps, a, panel.covariates)
            records.append(est.to_record(a))
        serialize.write_cadr_json(os.path.join(args.out_dir, f"cadr_{kind}.json"), records)
        serialize.write_cadr_long_csv(os.path.join(args.out_dir, f"cadr_{kind}_long.csv"), records)
    return 0


def cmd_recommend(args, cfg, _cont) -> int:
    panel = serialize.read_panel_csv(args.panel)
    models = _load_models(args.models)
    rec = harness.recommend_policies(cfg, models, panel, cfg.seed, kinds=tuple(args.model))
    for kind in args.model:
        path = os.path.join(args.out_dir, f"recommendations_{kind}.csv")
        recommend.write_recommendations(path, harness.recommendation_rows(rec, kind))
        print(path)
    harness.write_json(os.path.join(args.out_dir, "recommend_flags.json"),
                       {"flags": rec["flags"], "grid": rec["grid"]})
    return 0


def cmd_evaluate(args, cfg, _cont) -> int:
    panel = serialize.read_panel_csv(args.panel)
    models = _load_models(args.models)
    oracle = cfg.oracle()
    out = {"metrics": harness.evaluate_models(cfg, models, panel, oracle)}
    if not args.no_recommend:
        rec = harness.recommend_policies(cfg, models, panel, cfg.seed)
        out["recommendation"] = harness.policy_outcomes(rec["doses"], panel, oracle)
    harness.write_json(os.path.join(args.out_dir, "evaluation.json"), out)
    for kind in harness.MODELS:
        c = out["metrics"][kind]["center"]
        print(f"{kind}: coverage={c['coverage']:.3f} rmse={c['rmse']:.5f} bias={c['bias']:.4f}")
    return 0


def cmd_benchmark(args, cfg, cont) -> int:
    if args.full_grid:
        cfg = replace(cfg, grid=dict(harness.PAPER_GRID))
    reports = []
    for sc in cfg.scenarios():
        rep = harness.run_scenario(cfg, sc, threads=args.threads,
                                   with_recommendations=not args.no_recommend)
        status = "FAILED" if rep.failed else "ok"
        print(f"scenario {rep.config_hash} {status} ({rep.n_failed}/{rep.n_replications} replications failed)")
        reports.append(rep)
    harness.write_reports(reports, args.out_dir, cfg)
    if args.continuous:
        res = harness.run_continuous_benchmark(replace(cont, seed=cfg.seed))
        harness.write_json(os.path.join(args.out_dir, "continuous_report.json"), res)
    return 1 if any(r.failed for r in reports) else 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON experiment config")
    common.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    common.add_argument("--out-dir", default=".", help="directory for outputs")
    common.add_argument("--threads", type=int, default=1, help="parallel replications")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="deepsdrf", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="write a simulated cohort")
    s.add_argument("--name", default="panel.csv")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fit", parents=[common], help="fit GPS and outcome ensembles")
    s.add_argument("--panel", required=True)
    s.set_defaults(func=cmd_fit)

    model_choice = dict(nargs="+", choices=harness.MODELS, default=list(harness.MODELS))

    s = sub.add_parser("estimate", parents=[common], help="CADR curves for a dose grid")
    s.add_argument("--panel", required=True)
    s.add_argument("--models", required=True, help="directory written by 'fit'")
    s.add_argument("--doses", help="comma-separated doses (default: evaluation band)")
    s.add_argument("--model", **model_choice)
    s.add_argument("--max-patients", type=int, default=0)
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("recommend", parents=[common], help="RS / RL recommendations")
    s.add_argument("--panel", required=True)
    s.add_argument("--models", required=True)
    s.add_argument("--model", **model_choice)
    s.set_defaults(func=cmd_recommend)

    s = sub.add_parser("evaluate", parents=[common], help="metrics against the truth oracle")
    s.add_argument("--panel", required=True, help="simulated test cohort")
    s.add_argument("--models", required=True)
    s.add_argument("--no-recommend", action="store_true")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("benchmark", parents=[common], help="replicated scenario benchmark")
    s.add_argument("--full-grid", action="store_true", help="vary each grid factor around the default")
    s.add_argument("--continuous", action="store_true", help="also run the continuous-outcome experiment")
    s.add_argument("--no-recommend", action="store_true")
    s.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, cont = load_config(args.config)
        cfg = _apply_seed(cfg, args.seed)
        os.makedirs(args.out_dir, exist_ok=True)
        return args.func(args, cfg, cont)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"deepsdrf {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
