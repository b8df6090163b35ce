"""Experiment configuration.

A scenario file is YAML with the sections below; every key is optional and
falls back to the :class:`SimConfig` default. ``configs/*.yaml`` document each
key inline.

    plant:       name, prior, params (plant-specific overrides)
    controller:  dt_sample, dt_int, epsilon, alpha_slope, policy, exact_margin, filter_tol,
                 radius
    confidence:  delta, rkhs_bound, rkhs_factor, beta_override, grid_size, grid_seed, beta_table
    gp:          noise, fit_points, fit_seed, fit_mode, fit_starts, active_inputs, hypers_file,
                 region_lower, region_upper
    simulation:  horizon, x0, seed
    sweep:       dts, policies, trials, seed, region_lower, region_upper
    output:      dir, log_every
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import yaml

SECTIONS = {
    "plant": {"name": "plant", "prior": "prior", "params": "plant_params"},
    "controller": {"dt_sample": "dt_sample", "dt_int": "dt_int", "epsilon": "epsilon",
                   "alpha_slope": "alpha_slope", "policy": "policy",
                   "exact_margin": "exact_margin", "filter_tol": "filter_tol",
                   "radius": "radius"},
    "confidence": {"delta": "delta", "rkhs_bound": "rkhs_bound", "rkhs_factor": "rkhs_factor",
                   "beta_override": "beta_override", "grid_size": "grid_size",
                   "grid_seed": "grid_seed", "beta_table": "beta_table",
                   "beta_form": "beta_form"},
    "gp": {"noise": "noise", "fit_points": "fit_points", "fit_seed": "fit_seed",
           "fit_mode": "fit_mode", "fit_starts": "fit_starts",
           "active_inputs": "active_inputs", "hypers_file": "hypers_file",
           "region_lower": "model_region_lower", "region_upper": "model_region_upper"},
    "simulation": {"horizon": "horizon", "x0": "x0", "seed": "seed",
                   "stop_on_failure": "stop_on_failure"},
    "sweep": {"dts": "sweep_dts", "policies": "sweep_policies", "trials": "sweep_trials",
              "seed": "sweep_seed", "region_lower": "region_lower",
              "region_upper": "region_upper", "stop_on_failure": "sweep_stop_on_failure"},
    "output": {"dir": "output_dir", "log_every": "log_every"},
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    plant: str = "cruise"
    prior: Optional[str] = None           # None picks the plant default
    plant_params: dict = field(default_factory=dict)
    # controller
    dt_sample: float = 1e-3
    dt_int: Optional[float] = None        # None -> min(dt_sample / 10, 1e-3)
    epsilon: float = 0.5
    alpha_slope: float = 1.0
    policy: str = "ucb"
    exact_margin: bool = True
    filter_tol: float = 1e-9
    radius: str = "lipschitz"             # or "pointwise": gradient norm at the current state
    # confidence
    delta: float = 0.01
    rkhs_bound: Union[str, float, list] = "auto"
    rkhs_factor: float = 2.0
    beta_override: Optional[float] = None
    grid_size: int = 512
    grid_seed: int = 0
    beta_table: int = 512
    beta_form: str = "calibrated"         # or "raw": noise scale times the square root
    # gp
    noise: Union[float, list] = 0.01
    fit_points: int = 10
    fit_seed: int = 0
    fit_mode: str = "ard"
    fit_starts: int = 8
    active_inputs: Optional[list] = None  # inputs acting on the learned outputs; None -> all
    hypers_file: Optional[str] = None
    model_region_lower: Optional[list] = None    # states for fit data and the gamma/B grid;
    model_region_upper: Optional[list] = None    # None means the plant's state domain
    # simulation
    horizon: float = 100.0
    x0: Optional[list] = None
    seed: int = 0
    stop_on_failure: bool = False         # end the run at the first exploration event after h < 0
    # sweep
    sweep_dts: tuple = (1e-1, 1e-2, 1e-3)
    sweep_policies: tuple = ("ucb", "random")
    sweep_trials: int = 50
    sweep_seed: int = 0
    sweep_stop_on_failure: bool = True    # a failed trial's remaining trajectory is not needed
    region_lower: Optional[list] = None
    region_upper: Optional[list] = None
    # output
    output_dir: str = "out"
    log_every: int = 1

    def __post_init__(self):
        if self.plant not in ("cruise", "quadrotor"):
            raise ConfigError(f"unknown plant {self.plant!r}")
        if self.policy not in ("ucb", "random"):
            raise ConfigError("policy must be 'ucb' or 'random'")
        if self.radius not in ("lipschitz", "pointwise"):
            raise ConfigError("radius must be 'lipschitz' or 'pointwise'")
        if self.beta_form not in ("calibrated", "raw"):
            raise ConfigError("beta_form must be 'calibrated' or 'raw'")
        if self.horizon < 0:
            raise ConfigError("horizon must be nonnegative")
        if not self.dt_sample > 0 or not self.integration_step > 0:
            raise ConfigError("time steps must be positive")
        if self.dt_sample < self.integration_step:
            raise ConfigError("dt_sample must not be shorter than dt_int")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        if self.epsilon <= 0 or self.alpha_slope <= 0:
            raise ConfigError("epsilon and alpha_slope must be positive")
        if self.log_every < 1:
            raise ConfigError("log_every must be at least 1")

    @property
    def integration_step(self) -> float:
        return self.dt_int if self.dt_int is not None else min(self.dt_sample / 10.0, 1e-3)

    @property
    def hold_steps(self) -> int:
        return max(1, int(round(self.dt_sample / self.integration_step)))

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.integration_step))

    def with_(self, **kw) -> "SimConfig":
        return dataclasses.replace(self, **kw)


def config_from_dict(doc: dict, base: Optional[dict] = None) -> SimConfig:
    flat = dict(base or {})
    for section, body in (doc or {}).items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        for key, val in (body or {}).items():
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            flat[SECTIONS[section][key]] = val
    for k in ("sweep_dts", "sweep_policies"):
        if k in flat:
            flat[k] = tuple(flat[k])
    return SimConfig(**flat)


def load_config(path) -> SimConfig:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = config_from_dict(doc)
    if cfg.hypers_file and not Path(cfg.hypers_file).is_absolute():
        cfg = cfg.with_(hypers_file=str((path.parent / cfg.hypers_file).resolve()))
    return cfg


def config_to_dict(cfg: SimConfig) -> dict:
    out = {}
    for section, keys in SECTIONS.items():
        out[section] = {}
        for key, attr in keys.items():
            val = getattr(cfg, attr)
            out[section][key] = list(val) if isinstance(val, tuple) else val
    return out
