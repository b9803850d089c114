"""Experiment configuration: TOML files resolved into typed builders.

A config file has [experiment], [noise], [cost], [prior], [train], [bound]
and [select] tables plus optional [plant] / [controller] overrides; every
field has a documented default so a minimal file only names the experiment.
See configs/lti.toml and configs/robots.toml for annotated examples.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli

from . import controllers as ctrl
from . import cost as cost_mod
from . import experiments as exp
from . import pacbayes as pb
from . import sim
from .evaluate import ControlProblem


class ConfigError(ValueError):
    """Invalid or unresolvable experiment configuration."""


_DEFAULTS = {
    "lti": {
        "experiment": {"s": 8, "horizon": 10, "seed": 0, "out_dir": "runs/lti"},
        "plant": {"a": 0.8, "b": 0.1, "xbar": 2.0},
        "noise": {"kind": "gaussian", "mean": 0.3, "std": 0.3},
        "cost": {"q": 5.0, "r": 0.003, "c": 1.0, "gamma": "auto"},
        "prior": {"beta_kind": "gaussian", "k_std": 1.0, "beta_std": 1.5},
        "train": {"method": "grid", "epochs": 500, "lr": 0.05,
                  "patience": 500, "val_frac": 0.25, "particles": 1,
                  "flow_layers": 16, "flow_steps": 300, "flow_lr": 0.02,
                  "n_mc": 2, "base_scale": 2.0, "resolution": 120},
        "bound": {"family": "cor2", "delta": 0.2, "lambda": "star",
                  "n_p": 100000, "resolution": 120, "splits": [2, 4, 6]},
        "select": {"n_q": 10, "b": 50, "n_test": 10000},
    },
    "robots": {
        "experiment": {"s": 8, "horizon": 100, "seed": 0,
                       "out_dir": "runs/robots"},
        "plant": {},
        "noise": {"kind": "initial_gaussian", "std": 0.2},
        "cost": {"q_scale": 0.02, "r_scale": 0.01, "c": 1.0, "gamma": "auto"},
        "controller": {"xi_dim": 2, "zeta_dim": 2},
        "prior": {"std": 10.0},
        "train": {"method": "svgd", "epochs": 400, "lr": 100.0,
                  "patience": 500, "val_frac": 0.25, "particles": 1,
                  "flow_layers": 6, "flow_steps": 250, "flow_lr": 0.02,
                  "n_mc": 2, "base_scale": 2.0, "resolution": 120},
        "bound": {"family": "two_stage", "delta": 0.2, "lambda": "star",
                  "n_p": 1000000, "splits": [2, 4, 6]},
        "select": {"n_q": 10, "b": 50, "n_test": 500},
    },
}


@dataclass
class ExperimentConfig:
    name: str
    sections: dict = field(default_factory=dict)

    def table(self, key: str) -> dict:
        return self.sections.get(key, {})

    def get(self, table: str, key: str, default=None):
        return self.table(table).get(key, default)

    @property
    def s(self) -> int:
        return int(self.get("experiment", "s"))

    @property
    def horizon(self) -> int:
        return int(self.get("experiment", "horizon"))

    @property
    def seed(self) -> int:
        return int(self.get("experiment", "seed"))

    @property
    def out_dir(self) -> Path:
        return Path(self.get("experiment", "out_dir"))

    @property
    def delta(self) -> float:
        delta = float(self.get("bound", "delta"))
        if not 0.0 < delta < 1.0:
            raise ConfigError("bound.delta must lie in (0, 1)")
        return delta

    def resolve_lambda(self, s: int, c: float) -> float:
        raw = self.get("bound", "lambda", "star")
        if raw == "star":
            return pb.lambda_star(s, self.delta, c)
        lam = float(raw)
        if lam <= 0:
            raise ConfigError("bound.lambda must be positive or 'star'")
        return lam

    def archive(self, out_dir: Path) -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(
            json.dumps({"name": self.name, "sections": self.sections},
                       indent=2, sort_keys=True))


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomli.loads(path.read_text())
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    return from_dict(raw)


def from_dict(raw: dict) -> ExperimentConfig:
    name = raw.get("experiment", {}).get("name")
    if name not in _DEFAULTS:
        raise ConfigError(
            f"experiment.name must be one of {sorted(_DEFAULTS)}, got {name!r}")
    sections = _merge(_DEFAULTS[name], raw)
    sections["experiment"].pop("name", None)
    try:
        cfg = ExperimentConfig(name=name, sections=sections)
        build_problem(cfg)  # fail fast on unresolvable specs
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    return cfg


def build_noise(cfg: ExperimentConfig) -> sim.NoiseSpec:
    table = cfg.table("noise")
    return sim.NoiseSpec(kind=table["kind"], mean=float(table.get("mean", 0.0)),
                         std=float(table["std"]))


def build_plant(cfg: ExperimentConfig) -> sim.Plant:
    table = cfg.table("plant")
    if cfg.name == "lti":
        return sim.ScalarLTI(a=float(table["a"]), b=float(table["b"]),
                             xbar=float(table["xbar"]))
    kwargs = {}
    for key in ("mass", "drag_linear", "drag_quadratic", "prestab_gain",
                "dt", "safe_distance", "barrier_offset"):
        if key in table:
            kwargs[key] = float(table[key])
    for key in ("spawns", "targets"):
        if key in table:
            kwargs[key] = tuple(tuple(float(v) for v in pt) for pt in table[key])
    if "obstacles" in table:
        kwargs["obstacles"] = tuple(
            ((float(ob[0][0]), float(ob[0][1])), float(ob[1]))
            for ob in table["obstacles"])
    return sim.PlanarRobots(**kwargs)


def build_problem(cfg: ExperimentConfig) -> ControlProblem:
    plant = build_plant(cfg)
    noise = build_noise(cfg)
    cost_table = cfg.table("cost")
    gamma_raw = cost_table.get("gamma", "auto")
    gamma = None if gamma_raw == "auto" else float(gamma_raw)
    c = float(cost_table.get("c", 1.0))
    if cfg.name == "lti":
        spec: cost_mod.CostSpec = cost_mod.LtiQuadratic(
            q=float(cost_table["q"]), r=float(cost_table["r"]))
        arch: ctrl.Arch = ctrl.Affine()
    else:
        spec = cost_mod.robot_cost_for(plant,
                                       q_scale=float(cost_table["q_scale"]),
                                       r_scale=float(cost_table["r_scale"]))
        controller = cfg.table("controller")
        arch = ctrl.ImcRen(int(controller["xi_dim"]),
                           int(controller["zeta_dim"]),
                           plant.state_dim, plant.input_dim)
    return ControlProblem(plant, spec, arch, cfg.horizon, noise, c=c,
                          gamma=gamma)


def build_prior(cfg: ExperimentConfig, problem: ControlProblem):
    table = cfg.table("prior")
    if cfg.name == "lti":
        return exp.lti_prior(problem, beta_kind=table["beta_kind"],
                             k_std=float(table["k_std"]),
                             beta_std=float(table["beta_std"]))
    return exp.robot_prior(problem, std=float(table["std"]))
