"""Experiment configuration: YAML in, validated tree out.

The grammar is deliberately small.  A config file is a mapping with a
handful of scalar fields plus three optional sub-mappings (`target`,
`sampler`, `sweep`).  Parsing is strict: any key the schema does not list
is collected and reported as an error, so a typo in a sweep file fails
loudly instead of silently running defaults.  Every field has a default,
which means the empty document is a valid config.

Schedules that interpolate between two endpoints (`strength`,
`guidance_weight`, `langevin_weight`) accept either one number or a
two-element list.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields as dc_fields

import yaml

EXPERIMENT_KINDS = ("ring_modes", "sweep", "fk_validation", "svgd_compare",
                    "torus_coverage", "pfgm_demo", "marginal_table")
TARGET_KINDS = ("ring", "bimodal", "gaussian", "torus_grid", "hub")


class ConfigError(ValueError):
    """Raised for unknown keys or out-of-range values; exit code 2 territory."""


def _pair(value, name):
    if isinstance(value, (int, float)):
        return (float(value), float(value))
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return (float(value[0]), float(value[1]))
    raise ConfigError(f"{name} must be a number or a [start, end] pair")


@dataclass
class TargetSection:
    kind: str = "ring"
    modes: int = 10
    radius: float = 1.0
    variance: float = 0.005
    separation: float = 1.0
    hub_weight: float = 4.0

    def validate(self):
        if self.kind not in TARGET_KINDS:
            raise ConfigError(f"target.kind must be one of {TARGET_KINDS}, "
                              f"got {self.kind!r}")
        if self.modes < 1:
            raise ConfigError("target.modes must be positive")
        if self.variance <= 0:
            raise ConfigError("target.variance must be positive")
        if self.hub_weight <= 0:
            raise ConfigError("target.hub_weight must be positive")


@dataclass
class SamplerSection:
    n: int = 10
    steps: int = 100
    mode: str = "sde"
    integrator: str = "euler"
    kernel: str = "rbf"
    strength: tuple = (1.0, 1.0)
    bandwidth_rule: str = "sigma_sq"
    bandwidth: float = 1.0
    normalization: str = "none"
    features: str = "state"
    guidance_weight: tuple = (1.0, 1.0)
    langevin_weight: tuple = (1.0, 1.0)

    def validate(self):
        self.strength = _pair(self.strength, "sampler.strength")
        self.guidance_weight = _pair(self.guidance_weight, "sampler.guidance_weight")
        self.langevin_weight = _pair(self.langevin_weight, "sampler.langevin_weight")
        if self.n < 1:
            raise ConfigError("sampler.n must be positive")
        if self.steps < 1:
            raise ConfigError("sampler.steps must be positive")
        if self.features not in ("state", "denoised"):
            raise ConfigError("sampler.features must be 'state' or 'denoised'")


DEFAULT_SWEEP_VALUES = [2.0, 4.0, 6.0, 8.0, 12.0, 16.0, 20.0]


@dataclass
class SweepSection:
    parameter: str = "strength"
    values: list = field(default_factory=lambda: list(DEFAULT_SWEEP_VALUES))
    methods: list = field(default_factory=lambda: ["pg_rbf", "pg_radial"])

    def validate(self):
        if not isinstance(self.values, list):
            raise ConfigError("sweep.values must be a list")
        if not isinstance(self.methods, list) or not self.methods:
            raise ConfigError("sweep.methods must be a non-empty list")


@dataclass
class ExperimentConfig:
    kind: str = "ring_modes"
    seed: int = 0
    trials: int = 0
    out: str = "out"
    threads: int = 0
    csv_limit: int = 2000
    target: TargetSection = field(default_factory=TargetSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def validate(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"kind must be one of {EXPERIMENT_KINDS}, "
                              f"got {self.kind!r}")
        if self.trials < 0:
            raise ConfigError("trials must be >= 0 (0 means the kind's default)")
        if self.csv_limit < 0:
            raise ConfigError("csv_limit must be >= 0")
        self.target.validate()
        self.sampler.validate()
        self.sweep.validate()
        if self.kind == "sweep" and not self.sweep.values:
            raise ConfigError("sweep needs a non-empty sweep.values list")
        return self

    def echo(self) -> dict:
        """Plain-dict snapshot of every field, for the report's config echo."""

        def plain(v):
            if isinstance(v, tuple):
                return list(v)
            return v

        out: dict = {}
        for f in dc_fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (TargetSection, SamplerSection, SweepSection)):
                out[f.name] = {g.name: plain(getattr(v, g.name)) for g in dc_fields(v)}
            else:
                out[f.name] = plain(v)
        return out


_SECTIONS = {"target": TargetSection, "sampler": SamplerSection, "sweep": SweepSection}


def _fill(cls, data, prefix, bad_keys):
    names = {f.name for f in dc_fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            bad_keys.append(f"{prefix}{key}")
        else:
            kwargs[key] = value
    return cls(**kwargs)


def parse_config(data) -> ExperimentConfig:
    """Validate a loaded mapping; unknown keys anywhere are fatal."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    bad_keys: list[str] = []
    top = {}
    sections = {}
    top_names = {f.name for f in dc_fields(ExperimentConfig)}
    for key, value in data.items():
        if key in _SECTIONS:
            if not isinstance(value, dict) and value is not None:
                raise ConfigError(f"{key} must be a mapping")
            sections[key] = _fill(_SECTIONS[key], value or {}, f"{key}.", bad_keys)
        elif key in top_names:
            top[key] = value
        else:
            bad_keys.append(key)
    if bad_keys:
        raise ConfigError("unknown config keys: " + ", ".join(sorted(bad_keys)))
    try:
        cfg = ExperimentConfig(**top, **sections)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    """Read and validate a YAML config file."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"could not parse {path}: {exc}") from exc
    return parse_config(data)
