"""
Configuration loader for OSC Agent.
Supports YAML config files with sensible defaults.
"""

import copy
import os
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from .agents import LoopConfig, Thresholds
from .backends import DecodingConfig, RetryPolicy
from .errors import ConfigError
from .metrics import SinkhornConfig
from .predictor import FeatureSpec, TrainConfig
from .retrieval import OrbitalPolicy, RetrievalConfig


# Default configuration
DEFAULT_CONFIG = {
    "run": {
        "iterations": 10,
        "seed": 0,
        "max_generation_retries": 3,
        "budget": None,
        "use_retrieval": True,
        "use_feedback": True,
        "fixed_clock": None,
    },
    "retrieval": {
        "k_reference": 5,
        "k_candidate": 3,
        "radius": 2,
        "bits": 2048,
    },
    "policy": {
        "homo_window": [-6.0, -5.0],
        "lumo_window": [-4.5, -3.0],
        "gamma": 3.0,
        "delta": 3.0,
        "risk_adjusted": False,
    },
    "thresholds": {
        "pce_min": 10.0,
        "sa_max": 8.0,
    },
    "decoding": {
        "model": "gpt-4o-mini",
        "temperature": 1.0,
        "max_tokens": 4096,
        "seed": None,
    },
    "backend": {
        "kind": "http",
        "base_url": "https://api.openai.com",
        "timeout": 120.0,
        "max_attempts": 3,
        "retry_wait": 2.0,
        "script": None,
        "record_to": None,
    },
    "paths": {
        "reference": "reference.csv",
        "models_dir": "models",
        "candidate_db": "candidates.jsonl",
        "run_log": "run_log.jsonl",
        "summary": "summary.json",
    },
    "predictor": {
        "hidden": 768,
        "dropout": 0.3,
        "lr": 3e-4,
        "batch_size": 128,
        "weight_decay": 5e-5,
        "alpha": 0.2,
        "epochs": 100,
        "seed": 0,
        "radius": 2,
        "bits": 2048,
        "descriptors": [],
    },
    "sinkhorn": {
        "epsilon": 0.005,
        "max_iterations": 2000,
        "marginal_tolerance": 1e-6,
    },
    "metrics": {
        "fingerprint": "morgan",
        "radius": 2,
        "bits": 2048,
    },
}


def get_config_paths() -> List[Path]:
    """Get list of possible config file locations (in priority order)."""
    paths = []

    # 1. Current directory
    paths.append(Path.cwd() / "osc-agent.yaml")

    # 2. XDG config directory
    xdg_config = os.environ.get("XDG_CONFIG_HOME", "")
    if xdg_config:
        paths.append(Path(xdg_config) / "osc-agent" / "config.yaml")

    # 3. ~/.config/osc-agent/
    paths.append(Path.home() / ".config" / "osc-agent" / "config.yaml")

    # 4. ~/.osc-agent.yaml
    paths.append(Path.home() / ".osc-agent.yaml")

    return paths


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Deep merge two dictionaries."""
    result = base.copy()

    for key, value in override.items():
        if key in result and isinstance(result[key], dict) and isinstance(value, dict):
            result[key] = deep_merge(result[key], value)
        else:
            result[key] = value

    return result


def load_config(config_path: Optional[Path] = None) -> Dict[str, Any]:
    """
    Load configuration from file.

    Args:
        config_path: Explicit config file path. If None, searches default locations.

    Returns:
        Configuration dictionary with defaults filled in, plus the directory of
        the file that was read under ``_base_dir`` (relative paths resolve there).

    Raises:
        ConfigError: The explicit file is missing or unreadable.
    """
    config = copy.deepcopy(DEFAULT_CONFIG)
    config["_base_dir"] = str(Path.cwd())

    if config_path:
        config_path = Path(config_path)
        if not config_path.exists():
            raise ConfigError(f"config file not found: {config_path}")
        try:
            file_config = _read_yaml(config_path)
        except (OSError, yaml.YAMLError, ConfigError) as e:
            raise ConfigError(f"failed to load config from {config_path}: {e}") from e
        config = deep_merge(config, file_config)
        config["_base_dir"] = str(config_path.resolve().parent)
        return config

    for path in get_config_paths():
        if path.exists():
            try:
                file_config = _read_yaml(path)
                config = deep_merge(config, file_config)
                config["_base_dir"] = str(path.resolve().parent)
                break
            except Exception as e:
                print(f"Warning: Failed to load config from {path}: {e}")

    return config


def _read_yaml(path: Path) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a mapping at top level")
    return data


class Config:
    """Configuration wrapper with easy access to settings."""

    def __init__(self, config_path: Optional[Path] = None):
        self._config = load_config(config_path)
        self.base_dir = Path(self._config.pop("_base_dir"))

    def _section(self, name: str) -> Dict[str, Any]:
        section = self._config.get(name)
        if not isinstance(section, dict):
            raise ConfigError(f"config section {name!r} must be a mapping")
        return section

    def path(self, name: str) -> Path:
        """A ``paths`` entry, resolved against the config file's directory."""
        value = self._section("paths").get(name)
        if not value:
            raise ConfigError(f"paths.{name} is not set")
        path = Path(os.path.expanduser(str(value)))
        return path if path.is_absolute() else self.base_dir / path

    @property
    def iterations(self) -> int:
        return int(self._section("run")["iterations"])

    @property
    def seed(self) -> int:
        return int(self._section("run")["seed"])

    @property
    def backend_kind(self) -> str:
        return str(self._section("backend")["kind"])

    @property
    def fingerprint_kind(self) -> str:
        return str(self._section("metrics").get("fingerprint", "morgan"))

    @property
    def metrics_radius(self) -> int:
        return int(self._section("metrics").get("radius", 2))

    @property
    def metrics_bits(self) -> int:
        return int(self._section("metrics").get("bits", 2048))

    @property
    def retrieval(self) -> RetrievalConfig:
        section = self._section("retrieval")
        return RetrievalConfig(
            k_reference=int(section["k_reference"]),
            k_candidate=int(section["k_candidate"]),
            seed=self.seed,
            radius=int(section.get("radius", 2)),
            width=int(section.get("bits", 2048)),
        )

    @property
    def policy(self) -> OrbitalPolicy:
        section = self._section("policy")
        try:
            homo_min, homo_max = (float(v) for v in section["homo_window"])
            lumo_min, lumo_max = (float(v) for v in section["lumo_window"])
        except (TypeError, ValueError) as e:
            raise ConfigError(f"orbital windows must be [min, max] pairs: {e}") from e
        return OrbitalPolicy(homo_min, homo_max, lumo_min, lumo_max, float(section["gamma"]), float(section["delta"]))

    @property
    def risk_adjusted(self) -> bool:
        return bool(self._section("policy").get("risk_adjusted", False))

    @property
    def thresholds(self) -> Thresholds:
        section = self._section("thresholds")
        return Thresholds(float(section["pce_min"]), float(section["sa_max"]))

    @property
    def decoding(self) -> DecodingConfig:
        section = self._section("decoding")
        seed = section.get("seed")
        return DecodingConfig(
            model=str(section["model"]),
            temperature=float(section["temperature"]),
            max_tokens=int(section["max_tokens"]),
            seed=None if seed is None else int(seed),
        )

    @property
    def retry(self) -> RetryPolicy:
        section = self._section("backend")
        return RetryPolicy(
            max_attempts=int(section.get("max_attempts", 3)),
            wait=float(section.get("retry_wait", 2.0)),
            timeout=float(section.get("timeout", 120.0)),
        )

    def backend_options(self) -> Dict[str, Any]:
        """Keyword options for ``create_backend``; file paths resolved."""
        section = dict(self._section("backend"))
        options: Dict[str, Any] = {
            "base_url": section.get("base_url") or "",
            "timeout": float(section.get("timeout", 120.0)),
        }
        script = section.get("script")
        if isinstance(script, str):
            script = self.base_dir / os.path.expanduser(script)
        options["script"] = script
        if section.get("record_to"):
            options["record_to"] = self.base_dir / os.path.expanduser(str(section["record_to"]))
        if section.get("inner"):
            options["inner"] = section["inner"]
        return options

    @property
    def loop(self) -> LoopConfig:
        run = self._section("run")
        budget = run.get("budget")
        return LoopConfig(
            iterations=self.iterations,
            max_generation_retries=int(run["max_generation_retries"]),
            retrieval=self.retrieval,
            policy=self.policy,
            decoding=self.decoding,
            retry=self.retry,
            thresholds=self.thresholds,
            budget=None if budget is None else int(budget),
            seed=self.seed,
            use_retrieval=bool(run.get("use_retrieval", True)),
            use_feedback=bool(run.get("use_feedback", True)),
            risk_adjusted=self.risk_adjusted,
            fixed_clock=run.get("fixed_clock"),
        )

    @property
    def feature_spec(self) -> FeatureSpec:
        section = self._section("predictor")
        return FeatureSpec(int(section["radius"]), int(section["bits"]), tuple(section.get("descriptors") or ()))

    @property
    def train(self) -> TrainConfig:
        section = self._section("predictor")
        return TrainConfig(
            hidden=int(section["hidden"]),
            dropout=float(section["dropout"]),
            lr=float(section["lr"]),
            batch_size=int(section["batch_size"]),
            weight_decay=float(section["weight_decay"]),
            alpha=float(section["alpha"]),
            epochs=int(section["epochs"]),
            seed=int(section["seed"]),
        )

    @property
    def sinkhorn(self) -> SinkhornConfig:
        section = self._section("sinkhorn")
        return SinkhornConfig(
            epsilon=float(section["epsilon"]),
            max_iterations=int(section["max_iterations"]),
            marginal_tolerance=float(section["marginal_tolerance"]),
        )

    def to_dict(self) -> Dict[str, Any]:
        """Return config as dictionary."""
        return copy.deepcopy(self._config)


# Global config instance
_config: Optional[Config] = None


def get_config() -> Config:
    """Get or create the global config instance."""
    global _config
    if _config is None:
        _config = Config()
    return _config


def reload_config(config_path: Optional[Path] = None) -> Config:
    """Reload configuration from file."""
    global _config
    _config = Config(config_path)
    return _config
