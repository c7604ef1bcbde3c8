"""Command-line front end.

Subcommands:
    attack            run trials for one cell, write trials.csv and summary.csv
    sweep             run an (m, a_n) grid, write sweep.csv, region.csv, plotdata.csv
    decorrelate-demo  print a de-correlation plan for one binary pair
    version           print the package version

Exit codes: 0 ok, 2 configuration error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, harness, model, ppm
from .harness import ConfigError, ExperimentConfig

__all__ = ["CliConfig", "load_config", "main", "write_csv", "EXIT_OK", "EXIT_CONFIG", "EXIT_IO"]

EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 2, 3
SEED_ENV = "PRIVLAB_SEED"

SUMMARY_NOTE = "labels map finite-sample success rates onto asymptotic regions; cutoff is a convention"


@dataclass(frozen=True)
class CliConfig:
    """Experiment plus output settings, parsed from one JSON document.

    ``output`` keys: ``dir`` (default ``"."``) and ``float_digits``
    (significant digits in CSV floats, default 12).
    """

    experiment: ExperimentConfig
    out_dir: Path = Path(".")
    float_digits: int = 12

    def to_dict(self) -> dict:
        d = self.experiment.to_dict()
        d["output"] = {"dir": str(self.out_dir), "float_digits": self.float_digits}
        return d


def parse_config(data: dict, env_seed: Optional[str] = None) -> CliConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    data = dict(data)
    output = data.pop("output", {}) or {}
    if not isinstance(output, dict):
        raise ConfigError("output must be an object")
    extra = set(output) - {"dir", "float_digits"}
    if extra:
        raise ConfigError(f"unknown key(s) in output: {sorted(extra)}")
    if "seed" not in data and env_seed is not None:
        try:
            data["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from exc
    digits = output.get("float_digits", 12)
    if not isinstance(digits, int) or not 1 <= digits <= 17:
        raise ConfigError("output.float_digits must be an integer in [1, 17]")
    return CliConfig(ExperimentConfig.from_dict(data), Path(output.get("dir", ".")), digits)


def load_config(path: Optional[str], env: Optional[dict] = None) -> CliConfig:
    env = os.environ if env is None else env
    data = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    return parse_config(data, env.get(SEED_ENV))


def _fmt(v, digits: int) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return format(float(v), f".{digits}g")
    return str(v)


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence], digits: int = 12):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v, digits) for v in row])


def _apply_overrides(cfg: CliConfig, args) -> CliConfig:
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.trials is not None:
        changes["trials"] = args.trials
    exp = cfg.experiment
    if changes:
        try:
            exp = dataclasses.replace(exp, **changes)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
    out = Path(args.out) if args.out is not None else cfg.out_dir
    return CliConfig(exp, out, cfg.float_digits)


def cmd_attack(cfg: CliConfig, threads: int) -> int:
    exp = cfg.experiment
    results = harness.run_trials(exp, threads=threads)
    m, a_n = harness._cell_values(exp, exp.m, exp.noise)
    row = harness.aggregate(results, exp.n, m, a_n, exp.defense.value)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(cfg.out_dir / "trials.csv", harness.TRIAL_FIELDS, [r.row() for r in results], cfg.float_digits)
    write_csv(cfg.out_dir / "summary.csv", row.header(), [row.values()], cfg.float_digits)
    print(f"trials={len(results)} m={m} a_n={_fmt(a_n, 6)} success_rate={_fmt(row.success_rate, 6)}")
    return EXIT_OK


def cmd_sweep(cfg: CliConfig, threads: int) -> int:
    exp = cfg.experiment
    if exp.grid_m is None and exp.grid_noise is None:
        raise ConfigError("sweep needs grid_m and/or grid_noise in the config")
    table = harness.sweep(exp, threads=threads)
    region = harness.classify_region(table)
    d = cfg.float_digits
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(cfg.out_dir / "sweep.csv", table.rows[0].header(), [r.values() for r in table.rows], d)
    boundary = set(region.boundary)
    write_csv(
        cfg.out_dir / "region.csv",
        ["m", "a_n", "success_rate", "label", "boundary", "cutoff"],
        [
            [r.m, r.a_n, r.success_rate, lab, i in boundary, 0.5]
            for i, (r, lab) in enumerate(zip(table.rows, region.labels))
        ],
        d,
    )
    write_csv(cfg.out_dir / "plotdata.csv", ["m", "a_n", "success_rate"], [[r.m, r.a_n, r.success_rate] for r in table.rows], d)
    n_priv = sum(lab == harness.NO_PRIVACY for lab in region.labels)
    print(f"cells={len(table)} no_privacy_cells={n_priv} ({SUMMARY_NOTE})")
    return EXIT_OK


def _parse_number(text: str) -> float:
    try:
        return float(Fraction(text))
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"not a number: {text!r}") from exc


def cmd_decorrelate_demo(args) -> int:
    if args.cells is not None:
        q = np.array([_parse_number(c) for c in args.cells]).reshape(2, 2)
    elif args.p1 is not None and args.p2 is not None:
        p1, p2 = _parse_number(args.p1), _parse_number(args.p2)
        if args.rho is not None:
            rho = _parse_number(args.rho)
            try:
                q = model.joint_pmf_from_rho(p1, p2, rho).q
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        elif args.p11 is not None:
            p11 = _parse_number(args.p11)
            q = np.array([[1 - p1 - p2 + p11, p2 - p11], [p1 - p11, p11]])
        else:
            raise ConfigError("give --rho or --p11 together with --p1/--p2")
    else:
        raise ConfigError("give --cells or --p1/--p2")
    try:
        joint = model.JointPMF2(q)
        plan = ppm.plan_decorrelation(joint)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    after = ppm._apply_plan_to_pmf(joint.q, {0: 0, 1: 1}, plan)
    residual = float(after[1, 1] - after[1].sum() * after[:, 1].sum())
    print(f"upsilon={plan.upsilon:.12g}")
    print(f"target_user={plan.target_user + 1}")
    print(f"cell={plan.conditioning_cell[0]},{plan.conditioning_cell[1]}")
    print(f"noise_level={plan.predicted_noise_level:.12g}")
    print("post_plan_pmf=" + " ".join(f"{v:.12g}" for v in after.ravel()))
    print(f"residual_cov={residual:.3e}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="privlab", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def run_flags(p):
        p.add_argument("--config", help="JSON experiment config; unknown keys are rejected")
        p.add_argument("--out", help="output directory (overrides output.dir; default: current directory)")
        p.add_argument("--seed", type=int, help=f"master seed; overrides the config, which overrides ${SEED_ENV} (default 0)")
        p.add_argument("--trials", type=int, help="trials per cell; overrides the config (default 100)")
        p.add_argument("--threads", type=int, default=1, help="worker threads; never changes results (default 1)")

    run_flags(sub.add_parser("attack", help="run trials for a single configuration"))
    run_flags(sub.add_parser("sweep", help="run the grid_m x grid_noise grid"))
    demo = sub.add_parser("decorrelate-demo", help="print the de-correlation plan of one pair")
    demo.add_argument("--cells", nargs=4, metavar=("P00", "P01", "P10", "P11"), help="joint pmf cells; fractions allowed")
    demo.add_argument("--p1")
    demo.add_argument("--p2")
    demo.add_argument("--rho", help="correlation coefficient, must be feasible for (p1, p2)")
    demo.add_argument("--p11", help="P(X1=1, X2=1) instead of --rho")
    sub.add_parser("version", help="print the version")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "version":
            print(__version__)
            return EXIT_OK
        if args.command == "decorrelate-demo":
            return cmd_decorrelate_demo(args)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = _apply_overrides(load_config(args.config), args)
        if args.command == "attack":
            return cmd_attack(cfg, args.threads)
        return cmd_sweep(cfg, args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
