"""Command-line interface: ``run``, ``synth`` and ``validate``.

Exit codes: 0 success (including partial success), 2 configuration error,
3 data error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from . import __version__
from .config import RunConfig, load_config, parse_config
from .data import Schema, read_dataset, save_dataset, validate
from .estimators import make_estimator
from .exceptions import ConfigError, DataError, OPEError
from .report import render
from .selection import SITUATION_A_TO_B, SITUATION_B_TO_A, run_selection
from .synthetic import oracle_study, true_policy_value

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3

log = logging.getLogger("opeselect")

_EXT = {"markdown": "md", "tsv": "tsv", "json": "json"}


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    fmt = args.format or cfg.output_format
    d_a, d_b = cfg.load_datasets()
    pi_a, pi_b = cfg.policies()
    report = run_selection(
        d_a,
        d_b,
        pi_a,
        pi_b,
        estimators=cfg.estimators,
        spec=cfg.subsample,
        settings=cfg.settings,
        refit_per_subsample=cfg.refit_per_subsample,
        workers=cfg.workers,
        config=cfg.echo(),
    )
    text = render(report, fmt)
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        _write(out / "report.json", report.to_json())
        if fmt != "json":
            _write(out / f"report.{_EXT[fmt]}", text)
    for d in report.directions:
        if not d.rrmse:
            why = d.undefined_reason or "every estimator failed"
            print(f"error: {d.situation}: {why}", file=sys.stderr)
            return EXIT_DATA
    return EXIT_OK


def _synth_config(args: argparse.Namespace) -> RunConfig:
    path = Path(args.config)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None
    if args.scenario:
        if "datasets" in raw:
            raise ConfigError("--scenario cannot be combined with 'datasets' in the config")
        if isinstance(raw.get("scenario"), dict):
            raw["scenario"] = dict(raw["scenario"], name=args.scenario)
        else:
            raw["scenario"] = args.scenario
    if "scenario" not in raw:
        raise ConfigError("synth needs a scenario (config key 'scenario' or --scenario)")
    return parse_config(raw, base_dir=path.parent)


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = _synth_config(args)
    scen = cfg.scenario
    n = cfg.synth_n or scen.n
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        print(f"error: cannot create output directory {out}: {e.strerror}", file=sys.stderr)
        return EXIT_DATA
    pi_a, pi_b = cfg.policies()
    d_a, d_b = cfg.load_datasets()
    try:
        schema_a = save_dataset(d_a, out / "dataset_a.csv")
        schema_b = save_dataset(d_b, out / "dataset_b.csv")
    except OSError as e:
        print(f"error: cannot write to {out}: {e.strerror}", file=sys.stderr)
        return EXIT_DATA

    truths = {
        "pi_A": true_policy_value(scen.env, pi_a, cfg.mc_n, seed=[cfg.seed, 2, 0]),
        "pi_B": true_policy_value(scen.env, pi_b, cfg.mc_n, seed=[cfg.seed, 2, 1]),
    }
    sidecar: Dict[str, Any] = {
        "scenario": dict(scen.to_dict(), n=n),
        "seed": cfg.seed,
        "files": {"a": "dataset_a.csv", "b": "dataset_b.csv"},
        "schemas": {"a": schema_a.to_dict(), "b": schema_b.to_dict()},
        "true_policy_values": {
            k: {"value": v.value, "se": v.se, "mc_n": v.mc_n} for k, v in truths.items()
        },
    }
    if args.oracle:
        estimators = {name: make_estimator(name, cfg.settings) for name in cfg.estimators}
        oracle: Dict[str, Any] = {}
        for situation, target, behavior, truth in (
            (SITUATION_A_TO_B, pi_b, pi_a, truths["pi_B"].value),
            (SITUATION_B_TO_A, pi_a, pi_b, truths["pi_A"].value),
        ):
            res = oracle_study(
                scen.env, estimators, target, behavior, n, cfg.oracle_replications,
                seed=cfg.seed, truth=truth, workers=cfg.workers,
            )
            oracle[situation] = {
                name: {"rmse": r.rmse, "bias": r.bias, "sd": r.sd} for name, r in res.items()
            }
        sidecar["oracle"] = {"replications": cfg.oracle_replications, "rmse": oracle}
    text = json.dumps(sidecar, indent=2) + "\n"
    _write(out / "truth.json", text)

    run_cfg = {
        "datasets": {"a": "dataset_a.csv", "b": "dataset_b.csv"},
        "schema": {k: v for k, v in schema_a.to_dict().items() if k != "policy_id"},
        "policies": {"a": cfg.policy_specs[0], "b": cfg.policy_specs[1]},
        "estimators": list(cfg.estimators),
        "seed": cfg.seed,
    }
    _write(out / "run_config.json", json.dumps(run_cfg, indent=2) + "\n")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        raw = json.loads(Path(args.schema).read_text(encoding="utf-8"))
        schema = Schema.from_dict(raw)
    except OSError as e:
        raise ConfigError(f"cannot read schema {args.schema}: {e.strerror}") from None
    except (json.JSONDecodeError, ValueError, TypeError) as e:
        raise ConfigError(f"schema {args.schema}: {e}") from None
    try:
        dataset = read_dataset(args.data, schema)
    except OSError as e:
        print(f"error: cannot read {args.data}: {e.strerror}", file=sys.stderr)
        return EXIT_DATA
    except DataError as e:
        for msg in e.messages:
            print(msg)
        print(f"{len(e.messages)} violations")
        return EXIT_DATA
    violations = validate(dataset)
    for v in violations:
        print(v)
    print(f"{len(violations)} violations")
    return EXIT_OK if not violations else EXIT_DATA


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ope-select",
        description="Off-policy estimator selection from two logged bandit datasets.",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="score DM/IPW/DR by relative RMSE and pick the best")
    r.add_argument("--config", required=True)
    r.add_argument("--format", choices=["markdown", "tsv", "json"], default=None,
                   help="overrides output.format from the config")
    r.add_argument("--out", default=None, help="also write report files into this directory")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("synth", help="generate two synthetic logs plus true policy values")
    s.add_argument("--config", required=True)
    s.add_argument("--scenario", choices=["s1", "s2"], default=None)
    s.add_argument("--oracle", action="store_true", help="add brute-force oracle RMSEs to the sidecar")
    s.add_argument("--out", default=".", help="output directory (default: current directory)")
    s.set_defaults(func=cmd_synth)

    v = sub.add_parser("validate", help="check a CSV log against a schema")
    v.add_argument("--data", required=True)
    v.add_argument("--schema", required=True)
    v.set_defaults(func=cmd_validate)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        for msg in e.messages:
            print(f"data error: {msg}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (OPEError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
