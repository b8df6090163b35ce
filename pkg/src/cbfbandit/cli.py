"""Command-line driver.

    cbfbandit simulate   CONFIG [--out DIR] [--horizon T] [--seed S] [--x0 ...]
    cbfbandit sweep      CONFIG [--out DIR] [--trials K]
    cbfbandit bounds     CONFIG [--omega W] [--theta TH] [--c-gamma C]
    cbfbandit fit-hypers CONFIG --out FILE

The exit status is 0 unless a run errored (solver or integration failure) or
the command itself failed; unsafe runs are results, not errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config
from .confidence import info_gain_table
from .gp import save_hyperparameters
from .sim import build_plant, build_scenario, emit_outputs, fit_kernels, run_failure_sweep, \
    run_simulation, sweep_table_csv, validate_initial_state, default_x0, beta_report
from .theory import GammaGrowth, GammaTable, TheoremInputs, constants_report

log = logging.getLogger("cbfbandit")


def _load(path, overrides):
    cfg = load_config(path)
    return cfg.with_(**{k: v for k, v in overrides.items() if v is not None})


def cmd_simulate(args) -> int:
    cfg = _load(args.config, dict(output_dir=args.out, horizon=args.horizon, seed=args.seed,
                                  x0=args.x0))
    scn = build_scenario(cfg)
    x0 = np.asarray(cfg.x0, dtype=float) if cfg.x0 is not None else default_x0(scn.plant)
    validate_initial_state(scn.plant, x0, cfg)
    log.info("scenario ready: %s", beta_report(scn))
    trace, summary = run_simulation(scn, x0=x0)
    csv_path, summary_path = emit_outputs(trace, summary, cfg.output_dir,
                                          stem=f"{cfg.plant}_seed{cfg.seed}",
                                          every=cfg.log_every)
    print(summary.to_json())
    log.info("wrote %s and %s", csv_path, summary_path)
    return 0 if summary.error is None else 1


def cmd_sweep(args) -> int:
    cfg = _load(args.config, dict(output_dir=args.out, sweep_trials=args.trials))
    scn = build_scenario(cfg)
    rows, runs = run_failure_sweep(scn)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = sweep_table_csv(rows, out / f"{cfg.plant}_sweep.csv")
    with open(out / f"{cfg.plant}_sweep_runs.jsonl", "w") as fh:
        for (dt_s, pol), res in runs.items():
            for s in res:
                fh.write(json.dumps({"dt_sample": dt_s, "policy": pol,
                                     **json.loads(s.to_json(deterministic=True))}) + "\n")
    sys.stdout.write(table)
    return 0 if all(r.errors == 0 for r in rows) else 1


def theorem_inputs(scn, growth=None) -> TheoremInputs:
    cfg = scn.cfg
    X, U = scn.grid
    tables = np.array([info_gain_table(k, s, X, U, n_max=cfg.beta_table)
                       for k, s in zip(scn.kernels, scn.gp_noise)])
    conf = scn.confidence_params()
    return TheoremInputs(epsilon=cfg.epsilon, L_alpha=cfg.alpha_slope,
                         L_h=float(np.max(scn.h_lipschitz)),
                         L_xdot=scn.plant.xdot_bound(),
                         confidence=conf, gamma=growth or GammaTable(tables),
                         gp_noise=float(np.max(scn.gp_noise))), tables


def cmd_bounds(args) -> int:
    cfg = _load(args.config, {})
    scn = build_scenario(cfg)
    inp, tables = theorem_inputs(scn)
    report = constants_report(inp)
    report["gamma_table_max"] = tables[:, -1].tolist()
    theta = args.theta if args.theta is not None else float(scn.plant.n)
    if args.c_gamma is not None:
        c_gamma = args.c_gamma
    else:
        # smallest C_gamma whose growth model covers the greedy table for N >= 2
        N = np.arange(2, tables.shape[1])
        growth_shape = N ** args.omega * np.log1p(N) ** theta
        c_gamma = float(np.max(tables[:, 2:].max(0) / growth_shape))
    growth = GammaGrowth(c_gamma, args.omega, theta)
    closed = constants_report(TheoremInputs(inp.epsilon, inp.L_alpha, inp.L_h, inp.L_xdot,
                                            inp.confidence, growth, inp.gp_noise), cap=args.cap)
    report["closed_form"] = {k: closed[k] for k in closed
                             if k.startswith("closed_form") or k == "gamma_growth"}
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_fit_hypers(args) -> int:
    cfg = _load(args.config, dict(fit_points=args.points))
    plant = build_plant(cfg)
    noise = np.broadcast_to(np.asarray(cfg.noise, dtype=float), (plant.n,)).copy()
    kernels, gp_noise = fit_kernels(plant, cfg, noise)
    save_hyperparameters(args.out, kernels, gp_noise)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cbfbandit", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="one closed-loop run")
    s.add_argument("config")
    s.add_argument("--out")
    s.add_argument("--horizon", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--x0", type=float, nargs="+")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("sweep", help="failure rate over sampling times and policies")
    s.add_argument("config")
    s.add_argument("--out")
    s.add_argument("--trials", type=int)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("bounds", help="exploration budget and sampling-time threshold")
    s.add_argument("config")
    s.add_argument("--omega", type=float, default=0.0)
    s.add_argument("--theta", type=float, help="log exponent (default: state dimension)")
    s.add_argument("--c-gamma", type=float)
    s.add_argument("--cap", type=int, default=10 ** 9)
    s.set_defaults(func=cmd_bounds)

    s = sub.add_parser("fit-hypers", help="fit kernel hyperparameters and save them")
    s.add_argument("config")
    s.add_argument("--out", required=True)
    s.add_argument("--points", type=int)
    s.set_defaults(func=cmd_fit_hypers)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
