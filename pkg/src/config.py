"""
Configuration loader for the cell-free beamforming simulator.

YAML files (JSON is accepted too) with the sections system, experiment, mmf,
oracle, outputs and logging. Unknown keys are rejected with their full key path.
"""

import copy
import dataclasses
from pathlib import Path
from typing import Any, Dict, Optional

import yaml

from .exceptions import ConfigError
from .models import (
    DEFAULT_NOISE_DBM,
    ExperimentSpec,
    PowerPolicy,
    SystemConfig,
    mw_to_dbm,
    snr_from_dbm,
)

SYSTEM_FIELDS = {f.name for f in dataclasses.fields(SystemConfig)}
POWER_KEYS = {"ap_power_mw", "ap_power_dbm", "ue_power_mw", "ue_power_dbm"}

ALLOWED_KEYS: Dict[str, set] = {
    "system": SYSTEM_FIELDS | POWER_KEYS,
    "experiment": {"preset", "schemes", "power_policy", "snapshots", "sweep", "workers"},
    "mmf": {"backend", "bisect_tol", "feas_tol", "max_steps"},
    "oracle": {"trials", "z_threshold", "snapshots", "users", "aps", "batch_size"},
    "outputs": {"csv", "summary"},
    "logging": {"log_path", "console_level"},
}
SWEEP_KEYS = {"name", "values"}
SWEEPABLE = {"N", "M", "tau_dp"}

DEFAULT_OUTPUTS = {"csv": "results/cdf.csv", "summary": "results/summary.yaml"}
DEFAULT_MMF = {"backend": "clarabel", "bisect_tol": 1e-3, "feas_tol": 1e-6, "max_steps": 200}
DEFAULT_ORACLE = {
    "trials": 100_000,
    "z_threshold": 4.0,
    "snapshots": 1,
    "users": 3,
    "aps": 4,
    "batch_size": 10_000,
}


def merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Recursive dict merge; override wins, nested mappings are merged."""
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key != "sweep":
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


_FIG1 = {
    "system": {"M": 200, "K": 40, "N": 8, "tau_up": 20, "tau_dp": 20},
    "experiment": {
        "schemes": ["CB", "NCB", "ECB", "CBDT"],
        "power_policy": "maximal_ratio",
        "sweep": {"name": "N", "values": [2, 4, 8, 16]},
    },
}
_FIG4 = {
    "system": {"M": 200, "K": 40, "N": 8, "tau_up": 20, "tau_dp": 20},
    "experiment": {"schemes": ["CB", "NCB", "ECB", "CBDT"], "power_policy": "maximal_ratio"},
}
_FIG5 = {
    "system": {"M": 100, "K": 20, "N": 8, "tau_up": 10, "tau_dp": 10, "D": 250.0, "tau_c": 200},
    "experiment": {"schemes": ["CB", "NCB", "ECB"], "power_policy": "mmf"},
}


def _with(base: Dict[str, Any], **sections) -> Dict[str, Any]:
    return merge(base, sections)


PRESETS: Dict[str, Dict[str, Any]] = {
    # BU/DS averaged over snapshots versus N
    "fig1": _FIG1,
    # BU/DS CDF at N = 8
    "fig2": _FIG4,
    # UI/DS averaged over snapshots versus N
    "fig3": _FIG1,
    # gross and net SE CDFs at N = 8
    "fig4": _FIG4,
    "fig5a": _FIG5,
    "fig5b": _with(_FIG5, system={"tau_c": 100}),
    "fig6": _with(
        _FIG4, experiment={"sweep": {"name": "N", "values": [2, 4, 6, 8, 10, 12, 14, 16]}}
    ),
    "fig7": _with(
        _FIG4, experiment={"sweep": {"name": "M", "values": [50, 100, 150, 200, 250, 300]}}
    ),
}
PRESETS["fig5"] = PRESETS["fig5a"]

PRESET_DESCRIPTIONS = {
    "fig1": "mean BU/DS vs N in {2,4,8,16}; M=200 K=40 tau=20, maximal-ratio",
    "fig2": "BU/DS CDF at N=8; fig1 settings",
    "fig3": "mean UI/DS vs N in {2,4,8,16}; fig1 settings",
    "fig4": "gross and net SE CDFs at N=8; fig1 settings",
    "fig5a": "min-SE CDF with MMF; M=100 K=20 N=8 tau=10 D=250 tau_c=200",
    "fig5b": "min-SE CDF with MMF; fig5a settings with tau_c=100",
    "fig6": "mean SE vs N in {2..16}; fig4 settings",
    "fig7": "mean SE vs M in {50..300}; fig4 settings",
}


def _power_to_snr(section: Dict[str, Any], prefix: str, targets, noise_dbm: float):
    """Turn ap_/ue_power_{mw,dbm} into linear SNRs; linear values are kept as given."""
    mw, dbm = section.pop(f"{prefix}_power_mw", None), section.pop(f"{prefix}_power_dbm", None)
    if mw is not None and dbm is not None:
        raise ConfigError(
            f"give either {prefix}_power_mw or {prefix}_power_dbm, not both",
            key=f"system.{prefix}_power_dbm",
        )
    if mw is None and dbm is None:
        return
    if mw is not None:
        if mw <= 0:
            raise ConfigError(f"must be > 0, got {mw}", key=f"system.{prefix}_power_mw")
        dbm = mw_to_dbm(float(mw))
    for target in targets:
        if target in section:
            raise ConfigError(
                f"{target} conflicts with {prefix}_power; give one form", key=f"system.{target}"
            )
        section[target] = snr_from_dbm(float(dbm), noise_dbm)


def build_system(section: Optional[Dict[str, Any]]) -> SystemConfig:
    """
    Build a validated SystemConfig from the `system` section.

    Args:
        section: Mapping of SystemConfig fields plus optional transmit powers

    Returns:
        SystemConfig

    Raises:
        ConfigError: On unknown keys, bad types or invariant violations
    """
    section = dict(section or {})
    noise_dbm = float(section.get("noise_dbm", DEFAULT_NOISE_DBM))
    _power_to_snr(section, "ap", ("rho_d", "rho_dp"), noise_dbm)
    _power_to_snr(section, "ue", ("rho_u",), noise_dbm)
    if "rho_d" in section and "rho_dp" not in section:
        section["rho_dp"] = section["rho_d"]

    kwargs = {}
    for name, value in section.items():
        if name not in SYSTEM_FIELDS:
            raise ConfigError("unknown key", key=f"system.{name}")
        kind = type(getattr(SystemConfig, name))
        try:
            kwargs[name] = kind(value)
        except (TypeError, ValueError) as e:
            raise ConfigError(
                f"expected {kind.__name__}, got {value!r}", key=f"system.{name}"
            ) from e
    return SystemConfig(**kwargs)


def _check_keys(data: Dict[str, Any]):
    for section, values in data.items():
        if section not in ALLOWED_KEYS:
            raise ConfigError("unknown section", key=section)
        if values is None:
            continue
        if not isinstance(values, dict):
            raise ConfigError("section must be a mapping", key=section)
        for key in values:
            if key not in ALLOWED_KEYS[section]:
                raise ConfigError("unknown key", key=f"{section}.{key}")
    sweep = (data.get("experiment") or {}).get("sweep")
    if sweep is not None:
        if not isinstance(sweep, dict):
            raise ConfigError("sweep must map name and values", key="experiment.sweep")
        for key in sweep:
            if key not in SWEEP_KEYS:
                raise ConfigError("unknown key", key=f"experiment.sweep.{key}")


class Config:
    """Configuration manager for simulator runs."""

    def __init__(self, config_path: Optional[str] = None, data: Optional[Dict[str, Any]] = None):
        """
        Load configuration from a YAML file or a mapping.

        A named preset (experiment.preset) is applied first and the file's own
        values override it.

        Args:
            config_path: Path to a YAML (or JSON) configuration file
            data: Already-parsed mapping, used when no path is given

        Raises:
            ConfigError: If the file is missing, unparsable or invalid
        """
        self.config_path = Path(config_path) if config_path else None
        if self.config_path is not None:
            if not self.config_path.exists():
                raise ConfigError(f"Configuration file not found: {config_path}")
            try:
                with open(self.config_path, "r", encoding="utf-8") as f:
                    data = yaml.safe_load(f)
            except yaml.YAMLError as e:
                raise ConfigError(f"cannot parse {config_path}: {e}") from e

        data = data or {}
        if not isinstance(data, dict):
            raise ConfigError("configuration root must be a mapping")
        _check_keys(data)

        preset = (data.get("experiment") or {}).get("preset")
        self.data = merge(preset_data(preset), data) if preset else copy.deepcopy(data)
        self._validate()

    def _validate(self):
        """Build the system config and experiment spec so every error surfaces now."""
        self._spec = build_spec(self.data)

    def get(self, key: str, default: Any = None) -> Any:
        """
        Get configuration value by dotted key, e.g. 'system.M'.

        Args:
            key: Configuration key
            default: Default value if key not found

        Returns:
            Configuration value or default
        """
        value = self.data
        for k in key.split("."):
            if isinstance(value, dict) and k in value:
                value = value[k]
            else:
                return default
        return value

    @property
    def spec(self) -> ExperimentSpec:
        return self._spec

    @property
    def system(self) -> SystemConfig:
        return self._spec.system

    @property
    def log_path(self) -> str:
        """Path to the JSON-lines log file."""
        return self.get("logging.log_path", "logs/cellfree_sim.log")

    @property
    def console_level(self) -> str:
        return self.get("logging.console_level", "INFO")


def preset_data(name: str) -> Dict[str, Any]:
    """Raw mapping of a named preset (with experiment.preset recorded)."""
    if name not in PRESETS:
        raise ConfigError(
            f"unknown preset '{name}' (available: {', '.join(sorted(PRESETS))})",
            key="experiment.preset",
        )
    return merge(PRESETS[name], {"experiment": {"preset": name}})


def build_spec(data: Dict[str, Any]) -> ExperimentSpec:
    """Turn a parsed and merged configuration mapping into an ExperimentSpec."""
    _check_keys(data)
    system = build_system(data.get("system"))
    experiment = dict(data.get("experiment") or {})

    sweep = None
    if experiment.get("sweep") is not None:
        name = experiment["sweep"].get("name")
        values = experiment["sweep"].get("values")
        if name not in SWEEPABLE:
            raise ConfigError(
                f"sweep over '{name}' is not supported (use one of {sorted(SWEEPABLE)})",
                key="experiment.sweep.name",
            )
        if not values:
            raise ConfigError("sweep needs at least one value", key="experiment.sweep.values")
        sweep = (name, tuple(values))

    try:
        policy = PowerPolicy(experiment.get("power_policy", PowerPolicy.MAXIMAL_RATIO.value))
    except ValueError as e:
        raise ConfigError(
            f"unknown power policy '{experiment.get('power_policy')}'",
            key="experiment.power_policy",
        ) from e

    kwargs: Dict[str, Any] = dict(
        system=system,
        power_policy=policy,
        snapshots=int(experiment.get("snapshots", 200)),
        sweep=sweep,
        outputs=merge(DEFAULT_OUTPUTS, data.get("outputs") or {}),
        mmf=merge(DEFAULT_MMF, data.get("mmf") or {}),
        workers=int(experiment.get("workers", 1)),
        preset=experiment.get("preset"),
    )
    if "schemes" in experiment:
        kwargs["schemes"] = tuple(experiment["schemes"])
    if data.get("oracle") is not None:
        kwargs["oracle"] = merge(DEFAULT_ORACLE, data["oracle"])
    return ExperimentSpec(**kwargs)


def load_config(path: Optional[str] = None) -> ExperimentSpec:
    """
    Load and validate an experiment configuration.

    An empty (or absent) file yields the default spec.
    """
    return Config(path).spec


def load_preset(name: str) -> ExperimentSpec:
    return build_spec(preset_data(name))
