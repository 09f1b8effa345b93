"""Flat YAML experiment configuration and named presets.

One key-value mapping configures everything: the grid keys of GridConfig
plus the experiment keys below. Unknown keys and ill-typed values raise
ConfigError naming the key. Presets, a config file and command-line
overrides merge in that order of precedence.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigError, InvalidParameterError
from .grid_model import GRID_KEYS, GridConfig
from .protocol import ChangeDetector, ProtocolConfig, Variant
from .signaling import Constellation, Mode, cached_constellation
from .simulator import DEFAULT_N_SLOTS, DEFAULT_REPLICATIONS, LossModel

logger = logging.getLogger(__name__)

DEFAULT_SEED = 0

EXPERIMENT_DEFAULTS: dict[str, Any] = {
    "mode": "tdma",
    "gamma": 0.1,
    "anchor": None,
    "p_b": 0.5,
    "variant": "periodic",
    "B": None,
    "L_BS": 0,
    "M": 1,
    "lambda": 1e-3,
    "n_slots": DEFAULT_N_SLOTS,
    "replications": DEFAULT_REPLICATIONS,
    "seed": DEFAULT_SEED,
    "detector_miss": 0.0,
    "detector_false_alarm": 0.0,
    "loss_model": "erasure",
    "source": "oracle",
    "simultaneous_training": False,
    "physical": True,
    "K_values": None,
    "B_values": None,
    "lambda_values": None,
    "r_values": None,
}

PRESETS: dict[str, dict[str, Any]] = {
    # reference grid, 10 ms slots, sigma = 1 mV / 1 mA
    "table1": {},
    # detection study: 1 ms slots, gamma = 0.05
    "fig8": {"T_s": 1e-3, "gamma": 0.05},
    # protocol evaluation: gamma = 0.1, equiprobable bits
    "evaluation": {"gamma": 0.1, "p_b": 0.5},
}

_CHOICES = {
    "mode": tuple(m.value for m in Mode),
    "variant": tuple(v.value for v in Variant),
    "loss_model": tuple(m.value for m in LossModel),
    "source": ("oracle", "learned"),
}
_INTS = {"K", "B", "L_BS", "M", "n_slots", "replications", "seed"}
_BOOLS = {"simultaneous_training", "physical"}
_INT_LISTS = {"K_values", "B_values"}
_FLOAT_LISTS = {"lambda_values", "r_values"}
_OPTIONAL = {"anchor", "B", "K_values", "B_values", "lambda_values", "r_values"}
_PER_UNIT = {"v_n", "r_d_n"}

KNOWN_KEYS = frozenset(GRID_KEYS) | frozenset(EXPERIMENT_DEFAULTS)


def _coerce(key: str, value: Any) -> Any:
    if value is None:
        if key in _OPTIONAL:
            return None
        raise ConfigError(f"{key} must not be empty", key)
    if key in _CHOICES:
        if str(value) not in _CHOICES[key]:
            raise ConfigError(f"{key} must be one of {', '.join(_CHOICES[key])}, got {value!r}", key)
        return str(value)
    if key in _BOOLS:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}", key)
        return value
    if key in _INTS:
        return _number(key, value, int)
    if key in _INT_LISTS or key in _FLOAT_LISTS:
        kind = int if key in _INT_LISTS else float
        if not isinstance(value, list) or not value:
            raise ConfigError(f"{key} must be a non-empty list, got {value!r}", key)
        return [_number(key, x, kind) for x in value]
    if key in _PER_UNIT and isinstance(value, list):
        return [_number(key, x, float) for x in value]
    return _number(key, value, float)


def _number(key: str, value: Any, kind: type) -> Any:
    # PyYAML reads exponent literals without a dot, such as 1e-3, as strings
    if isinstance(value, str):
        try:
            value = float(value)
        except ValueError:
            raise ConfigError(f"{key} must be numeric, got {value!r}", key) from None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{key} must be numeric, got {value!r}", key)
    if kind is int and not float(value).is_integer():
        raise ConfigError(f"{key} must hold integers, got {value!r}", key)
    return kind(value)


def validate_mapping(mapping: Mapping[str, Any]) -> dict[str, Any]:
    """Reject unknown keys and coerce values to their declared types."""
    out = {}
    for key, value in mapping.items():
        if key not in KNOWN_KEYS:
            raise ConfigError(f"Unknown configuration key: {key}", key)
        out[key] = _coerce(key, value)
    return out


@dataclass(frozen=True)
class ExperimentSpec:
    """Validated parameters of one command run."""

    grid: GridConfig
    mode: Mode
    gamma: float
    anchor: float | None
    p_b: float
    variant: Variant
    B: int | None
    L_BS: int
    M: int
    lam: float
    n_slots: int
    replications: int
    seed: int
    detector: ChangeDetector
    loss_model: LossModel
    learned: bool
    simultaneous: bool
    physical: bool
    K_values: tuple[int, ...] | None = None
    B_values: tuple[int, ...] | None = None
    lambda_values: tuple[float, ...] | None = None
    r_values: tuple[float, ...] | None = None

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any]) -> "ExperimentSpec":
        values = {**EXPERIMENT_DEFAULTS, **validate_mapping(mapping)}
        grid_keys = {k: values[k] for k in GRID_KEYS if k in values}
        try:
            grid = GridConfig.from_mapping(grid_keys)
            if not 0 < values["p_b"] < 1:
                raise InvalidParameterError(f"p_b must lie in (0, 1), got {values['p_b']}")
            if not values["gamma"] > 0:
                raise InvalidParameterError(f"gamma must be positive, got {values['gamma']}")
            if values["n_slots"] < 1:
                raise InvalidParameterError(f"n_slots must be >= 1, got {values['n_slots']}")
            if values["replications"] < 1:
                raise InvalidParameterError(f"replications must be >= 1, got {values['replications']}")
            detector = ChangeDetector(values["detector_miss"], values["detector_false_alarm"])
        except InvalidParameterError as e:
            raise ConfigError(str(e)) from e

        def axis(key):
            return tuple(values[key]) if values[key] is not None else None

        spec = cls(
            grid=grid,
            mode=Mode(values["mode"]),
            gamma=values["gamma"],
            anchor=values["anchor"],
            p_b=values["p_b"],
            variant=Variant(values["variant"]),
            B=values["B"],
            L_BS=values["L_BS"],
            M=values["M"],
            lam=values["lambda"],
            n_slots=values["n_slots"],
            replications=values["replications"],
            seed=values["seed"],
            detector=detector,
            loss_model=LossModel(values["loss_model"]),
            learned=values["source"] == "learned",
            simultaneous=values["simultaneous_training"],
            physical=values["physical"],
            K_values=axis("K_values"),
            B_values=axis("B_values"),
            lambda_values=axis("lambda_values"),
            r_values=axis("r_values"),
        )
        spec.protocol()
        return spec

    def to_mapping(self) -> dict[str, Any]:
        def axis(values):
            return list(values) if values is not None else None

        return {
            **self.grid.to_mapping(),
            "mode": str(self.mode),
            "gamma": self.gamma,
            "anchor": self.anchor,
            "p_b": self.p_b,
            "variant": str(self.variant),
            "B": self.B,
            "L_BS": self.L_BS,
            "M": self.M,
            "lambda": self.lam,
            "n_slots": self.n_slots,
            "replications": self.replications,
            "seed": self.seed,
            "detector_miss": self.detector.miss,
            "detector_false_alarm": self.detector.false_alarm,
            "loss_model": str(self.loss_model),
            "source": "learned" if self.learned else "oracle",
            "simultaneous_training": self.simultaneous,
            "physical": self.physical,
            "K_values": axis(self.K_values),
            "B_values": axis(self.B_values),
            "lambda_values": axis(self.lambda_values),
            "r_values": axis(self.r_values),
        }

    def protocol(self, lam: float | None = None, B: int | None = None) -> ProtocolConfig:
        try:
            return ProtocolConfig(
                variant=self.variant,
                lam=self.lam if lam is None else lam,
                B=self.B if B is None else B,
                L_BS=self.L_BS,
                M=self.M,
                detector=self.detector,
                simultaneous=self.simultaneous,
            )
        except InvalidParameterError as e:
            raise ConfigError(str(e)) from e

    def constellation(self, grid: GridConfig | None = None, mode: Mode | None = None) -> Constellation:
        return cached_constellation(
            self.gamma, mode or self.mode, grid or self.grid, self.anchor, self.p_b
        )


def load_config(path: str | Path) -> dict[str, Any]:
    """Read a flat YAML mapping; an empty file is an empty mapping."""
    path = Path(path)
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"Cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"Malformed YAML in {path}: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"Config {path} must hold a key-value mapping")
    return validate_mapping(data)


def save_config(spec: ExperimentSpec, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        yaml.safe_dump(spec.to_mapping(), f, sort_keys=True)
    logger.debug(f"Saved config: {path}")
    return path


def parse_override(text: str) -> tuple[str, Any]:
    """``key=value`` with the value read as YAML (so 1e-3, [2, 5] and true work)."""
    key, sep, raw = text.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f"Override must look like key=value, got {text!r}")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"Cannot parse value of {key}: {e}", key) from e
    return key, value


def load_spec(
    preset: str | None = None,
    path: str | Path | None = None,
    overrides: Mapping[str, Any] | None = None,
    base: Mapping[str, Any] | None = None,
) -> ExperimentSpec:
    """Merge base < preset < config file < overrides into a validated spec."""
    merged: dict[str, Any] = dict(base or {})
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"Unknown preset {preset!r} (available: {', '.join(PRESETS)})", preset)
        merged.update(PRESETS[preset])
    if path is not None:
        merged.update(load_config(path))
    if overrides:
        merged.update(overrides)
    return ExperimentSpec.from_mapping(merged)
