"""JSON run configuration shared by the ``run`` and ``synth`` commands.

Example::

    {
      "datasets": {"a": "logs_a.csv", "b": "logs_b.csv"},
      "schema": {"d": 2, "propensity_column": "p", "outcome_kind": "binary"},
      "policies": {
        "a": {"id": "A", "type": "logistic", "coef": [1.0, 0.0], "epsilon": 0.05},
        "b": {"id": "B", "type": "logistic", "coef": [-1.0, 0.0], "epsilon": 0.05}
      },
      "estimators": ["DM", "IPW", "DR"],
      "outcome_model": {"family": "auto", "lambda": 1e-6},
      "propensity": {"source": "logged", "clip_floor": 0.01},
      "cross_fit": {"folds": 0},
      "subsample": {"method": "bootstrap", "k": 100},
      "refit_per_subsample": true,
      "output": {"format": "markdown"},
      "seed": 0
    }

Use ``"scenario": "s1"`` (or ``{"name": "s1", "n": 300, ...}``) instead of
``datasets`` to run on a synthetic preset. The ``OPE_SEED`` environment
variable overrides ``seed``.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

from .data import LoggedDataset, Policy, Schema, load_dataset, policy_from_spec
from .estimators import OFF_POLICY_ESTIMATORS, EstimatorSettings
from .exceptions import ConfigError
from .models import DEFAULT_CLIP_FLOOR, DEFAULT_LAMBDA
from .report import FORMATS
from .selection import DEFAULT_K, SubsampleSpec
from .synthetic import Scenario, scenario, scenario_from_dict

SEED_ENV_VAR = "OPE_SEED"

_TOP_KEYS = {
    "datasets", "scenario", "schema", "policies", "estimators", "outcome_model", "propensity",
    "cross_fit", "subsample", "refit_per_subsample", "output", "seed", "workers", "synth",
}
_SECTION_KEYS = {
    "outcome_model": {"family", "lambda"},
    "propensity": {"source", "clip_floor"},
    "cross_fit": {"folds"},
    "subsample": {"method", "k", "split_fraction"},
    "output": {"format"},
    "synth": {"n", "mc_n", "oracle_replications"},
    "datasets": {"a", "b"},
    "policies": {"a", "b"},
}


@dataclass
class RunConfig:
    """Validated run configuration."""

    dataset_paths: Optional[Tuple[Path, Path]]
    schemas: Optional[Tuple[Schema, Schema]]
    scenario: Optional[Scenario]
    policy_specs: Tuple[Dict[str, Any], Dict[str, Any]]
    estimators: Tuple[str, ...]
    settings: EstimatorSettings
    subsample: SubsampleSpec
    refit_per_subsample: bool
    output_format: str
    seed: int
    workers: int = 1
    synth_n: Optional[int] = None
    mc_n: int = 1_000_000
    oracle_replications: int = 1000
    raw: Dict[str, Any] = field(default_factory=dict)

    def policies(self) -> Tuple[Policy, Policy]:
        m = self.schemas[0].m if self.schemas else self.scenario.env.m
        try:
            return (
                policy_from_spec(self.policy_specs[0], m=m, id=self.policy_specs[0].get("id", "A")),
                policy_from_spec(self.policy_specs[1], m=m, id=self.policy_specs[1].get("id", "B")),
            )
        except (KeyError, ValueError, TypeError) as e:
            raise ConfigError(f"policies: {e}") from None

    def load_datasets(self) -> Tuple[LoggedDataset, LoggedDataset]:
        """Read both logs from disk, or generate them from the scenario with ``seed``."""
        if self.scenario is not None:
            return self.scenario.datasets(self.seed, self.synth_n)
        return (
            load_dataset(self.dataset_paths[0], self.schemas[0]),
            load_dataset(self.dataset_paths[1], self.schemas[1]),
        )

    def echo(self) -> Dict[str, Any]:
        """Resolved settings written into reports; excludes anything that must not change outputs."""
        out: Dict[str, Any] = {}
        if self.scenario is not None:
            out["scenario"] = self.scenario.to_dict()
            if self.synth_n is not None:
                out["scenario"]["n"] = self.synth_n
        else:
            out["datasets"] = {"a": str(self.dataset_paths[0]), "b": str(self.dataset_paths[1])}
            out["schemas"] = {"a": self.schemas[0].to_dict(), "b": self.schemas[1].to_dict()}
        out["policies"] = {"a": self.policy_specs[0], "b": self.policy_specs[1]}
        out["estimators"] = list(self.estimators)
        out["outcome_model"] = {"family": self.settings.family, "lambda": self.settings.lam}
        out["propensity"] = {
            "source": self.settings.propensity_source,
            "clip_floor": self.settings.clip_floor,
        }
        out["cross_fit"] = {"folds": self.settings.cross_fit_folds}
        out["subsample"] = self.subsample.to_dict()
        out["refit_per_subsample"] = self.refit_per_subsample
        out["seed"] = self.seed
        return out


def _section(raw: Mapping[str, Any], name: str) -> Dict[str, Any]:
    sec = raw.get(name, {})
    if not isinstance(sec, Mapping):
        raise ConfigError(f"config key {name!r} must be an object")
    unknown = set(sec) - _SECTION_KEYS[name]
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(f'{name}.{k}' for k in sorted(unknown))}")
    return dict(sec)


def _int(value: Any, key: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
        raise ConfigError(f"config key {key!r} must be an integer, got {value!r}")
    return int(value)


def _real(value: Any, key: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"config key {key!r} must be a number, got {value!r}")
    return float(value)


def parse_config(
    raw: Mapping[str, Any], base_dir: Union[str, Path] = ".", env: Optional[Mapping[str, str]] = None
) -> RunConfig:
    """Validate a config mapping; relative dataset paths resolve against ``base_dir``."""
    if not isinstance(raw, Mapping):
        raise ConfigError("config must be a JSON object")
    env = os.environ if env is None else env
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(sorted(unknown))}")
    has_data, has_scen = "datasets" in raw, "scenario" in raw
    if has_data == has_scen:
        raise ConfigError("config needs exactly one of 'datasets' or 'scenario'")

    seed = _int(raw.get("seed", 0), "seed")
    if env.get(SEED_ENV_VAR) not in (None, ""):
        try:
            seed = int(env[SEED_ENV_VAR])
        except ValueError:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env[SEED_ENV_VAR]!r}") from None

    synth = _section(raw, "synth")
    scen: Optional[Scenario] = None
    paths = schemas = None
    if has_scen:
        spec = raw["scenario"]
        try:
            if isinstance(spec, str):
                scen = scenario(spec)
            elif isinstance(spec, Mapping):
                base = scenario(spec["name"]) if spec.get("name") in ("s1", "s2") else None
                scen = scenario_from_dict(spec, base)
            else:
                raise ConfigError("config key 'scenario' must be a name or an object")
        except (ValueError, KeyError, TypeError) as e:
            raise ConfigError(f"scenario: {e}") from None
        pol = _section(raw, "policies")
        specs = (dict(pol.get("a", scen.policy_a)), dict(pol.get("b", scen.policy_b)))
    else:
        ds = _section(raw, "datasets")
        if set(ds) != {"a", "b"}:
            raise ConfigError("config key 'datasets' needs both 'a' and 'b'")
        pol = _section(raw, "policies")
        if set(pol) != {"a", "b"}:
            raise ConfigError("config key 'policies' needs both 'a' and 'b' when datasets are given")
        specs = (dict(pol["a"]), dict(pol["b"]))
        base_dir = Path(base_dir)
        paths = tuple(Path(ds[k]) if Path(ds[k]).is_absolute() else base_dir / ds[k] for k in ("a", "b"))
        schema_raw = raw.get("schema")
        if not isinstance(schema_raw, Mapping):
            raise ConfigError("config key 'schema' is required with datasets")
        built = []
        for k, sp in zip(("a", "b"), specs):
            sraw = dict(schema_raw)
            sraw["policy_id"] = sp.get("id", k.upper())
            try:
                built.append(Schema.from_dict(sraw))
            except (ValueError, TypeError) as e:
                raise ConfigError(f"schema: {e}") from None
        schemas = tuple(built)
    specs[0].setdefault("id", "A")
    specs[1].setdefault("id", "B")

    names = raw.get("estimators", [e.value for e in OFF_POLICY_ESTIMATORS])
    valid = [e.value for e in OFF_POLICY_ESTIMATORS]
    if not isinstance(names, list) or not names or any(n not in valid for n in names):
        raise ConfigError(f"config key 'estimators' must be a non-empty list drawn from {valid}")

    om = _section(raw, "outcome_model")
    pr = _section(raw, "propensity")
    cf = _section(raw, "cross_fit")
    try:
        settings = EstimatorSettings(
            family=om.get("family", "auto"),
            lam=_real(om.get("lambda", DEFAULT_LAMBDA), "outcome_model.lambda"),
            propensity_source=pr.get("source", "logged"),
            clip_floor=_real(pr.get("clip_floor", DEFAULT_CLIP_FLOOR), "propensity.clip_floor"),
            cross_fit_folds=_int(cf.get("folds", 0), "cross_fit.folds"),
            seed=seed,
        )
    except ValueError as e:
        raise ConfigError(f"outcome_model/propensity/cross_fit: {e}") from None

    ss = _section(raw, "subsample")
    try:
        sub = SubsampleSpec(
            method=ss.get("method", "bootstrap"),
            k=_int(ss.get("k", DEFAULT_K), "subsample.k"),
            seed=seed,
            split_fraction=None if ss.get("split_fraction") is None else _real(ss["split_fraction"], "subsample.split_fraction"),
        )
    except ValueError as e:
        raise ConfigError(f"subsample: {e}") from None

    out = _section(raw, "output")
    fmt = out.get("format", "markdown")
    if fmt not in FORMATS:
        raise ConfigError(f"config key 'output.format' must be one of {FORMATS}, got {fmt!r}")
    refit = raw.get("refit_per_subsample", True)
    if not isinstance(refit, bool):
        raise ConfigError("config key 'refit_per_subsample' must be true or false")
    workers = _int(raw.get("workers", 1), "workers")
    if workers < 1:
        raise ConfigError("config key 'workers' must be >= 1")

    return RunConfig(
        dataset_paths=paths,
        schemas=schemas,
        scenario=scen,
        policy_specs=specs,
        estimators=tuple(n for n in valid if n in names),
        settings=settings,
        subsample=sub,
        refit_per_subsample=refit,
        output_format=fmt,
        seed=seed,
        workers=workers,
        synth_n=None if synth.get("n") is None else _int(synth["n"], "synth.n"),
        mc_n=_int(synth.get("mc_n", 1_000_000), "synth.mc_n"),
        oracle_replications=_int(synth.get("oracle_replications", 1000), "synth.oracle_replications"),
        raw=dict(raw),
    )


def load_config(path: Union[str, Path], env: Optional[Mapping[str, str]] = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None
    return parse_config(raw, base_dir=path.parent, env=env)
