"""Declarative run configuration: one JSON file drives the whole pipeline.

Defaults reproduce the documented reference setup, so an empty JSON
object (plus data paths) is the canonical profile. Validation is
fail-fast: a bad config never produces partial artifacts.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

from .backtest import REBALANCE_MODES, STRATEGIES
from .errors import ConfigError
from .indicators import DEFAULT_TECHNICAL_16, _REGISTRY
from .losses import LOSS_KINDS

_CLI_LOSS_ALIASES = {"new": "return_weighted_ce", "ce": "ce", "mse": "mse"}


@dataclass
class RunConfig:
    # data
    ohlcv_path: str = ""
    sector_path: str = ""
    rf_path: str | None = None
    start: str | None = None  # ISO dates; None = full span
    end: str | None = None
    dollar_volume_floor: float = 10_000_000.0
    price_floor: float = 0.1
    # features
    use_basic: bool = True
    technical: list[str] = field(default_factory=lambda: list(DEFAULT_TECHNICAL_16))
    # windowing
    m: int = 20
    std_days: int = 200
    trainval_days: int = 200
    test_days: int = 20
    val_days: int = 20
    # labeling
    label_thresholds: tuple[float, float] = (0.01, 0.03)
    return_cap: float = 0.5
    # model
    loss: str = "return_weighted_ce"
    conv: list[list[int]] = field(default_factory=lambda: [[3, 48], [3, 64], [3, 96]])
    dense: list[int] = field(default_factory=lambda: [64])
    dropout: float | None = None  # None: the per-loss profile default
    leaky_slope: float = 0.01
    batch_size: int = 256
    max_epochs: int = 200
    # ensemble
    n_members: int = 3
    combine_mode: str = "moe"
    moe_window: int = 6
    n_ensembles: int = 1
    # backtest
    strategies: list[str] = field(default_factory=lambda: list(STRATEGIES))
    k: int = 10
    rebalance_mode: str = "drift"
    paired_t_test: bool = True
    # run
    seed: int = 0
    max_periods: int | None = None
    export_samples: bool = False

    def validate(self, check_paths: bool = True) -> None:
        if check_paths:
            for label, path in (("ohlcv_path", self.ohlcv_path), ("sector_path", self.sector_path)):
                if not path:
                    raise ConfigError(f"{label} is required")
                if not os.path.exists(path):
                    raise ConfigError(f"{label} does not exist: {path}")
            if self.rf_path is not None and not os.path.exists(self.rf_path):
                raise ConfigError(f"rf_path does not exist: {self.rf_path}")
        for label in ("start", "end"):
            value = getattr(self, label)
            if value is not None:
                try:
                    dt.date.fromisoformat(value)
                except ValueError:
                    raise ConfigError(f"{label} is not an ISO date: {value!r}")
        if self.dollar_volume_floor <= 0:
            raise ConfigError("dollar_volume_floor must be > 0")
        if self.price_floor <= 0:
            raise ConfigError("price_floor must be > 0")
        for name in self.technical:
            if name not in _REGISTRY:
                raise ConfigError(f"unknown technical feature {name!r}")
        if not self.use_basic and not self.technical:
            raise ConfigError("no features selected")
        if min(self.m, self.std_days, self.trainval_days, self.test_days, self.val_days) < 1:
            raise ConfigError("window lengths must be positive")
        if self.val_days >= self.trainval_days:
            raise ConfigError("val_days must be smaller than trainval_days")
        lo, hi = self.label_thresholds
        if not 0 < lo < hi:
            raise ConfigError(f"label thresholds must satisfy 0 < lo < hi, got {lo}, {hi}")
        if self.return_cap <= 0:
            raise ConfigError("return_cap must be > 0")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.dropout is not None and not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if sum(k - 1 for k, _ in self.conv) >= self.m:
            raise ConfigError("conv stack consumes the whole time axis")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ConfigError("batch_size must be >= 1 and max_epochs >= 0")
        if self.n_members < 1 or self.n_ensembles < 1:
            raise ConfigError("n_members and n_ensembles must be >= 1")
        if self.combine_mode not in ("moe", "simple_average"):
            raise ConfigError(f"unknown combine_mode {self.combine_mode!r}")
        if self.moe_window < 1:
            raise ConfigError("moe_window must be >= 1")
        for s in self.strategies:
            if s not in STRATEGIES:
                raise ConfigError(f"unknown strategy {s!r}")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.rebalance_mode not in REBALANCE_MODES:
            raise ConfigError(f"unknown rebalance_mode {self.rebalance_mode!r}")
        if self.max_periods is not None and self.max_periods < 1:
            raise ConfigError("max_periods must be >= 1 when given")

    def to_json(self) -> str:
        payload = asdict(self)
        payload["label_thresholds"] = list(self.label_thresholds)
        return json.dumps(payload, sort_keys=True, indent=2)

    def sha256(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def load_config(path: str, overrides: dict | None = None) -> RunConfig:
    """Read and validate a config JSON; relative data paths resolve against
    the config file's directory. Unknown keys are errors."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    known = set(RunConfig.__dataclass_fields__)
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"config {path} has unknown keys: {unknown}")
    if overrides:
        raw.update(overrides)
    cfg = RunConfig(**raw)
    if isinstance(cfg.label_thresholds, list):
        cfg.label_thresholds = tuple(cfg.label_thresholds)
    base = os.path.dirname(os.path.abspath(path))
    for attr in ("ohlcv_path", "sector_path", "rf_path"):
        value = getattr(cfg, attr)
        if value and not os.path.isabs(value):
            setattr(cfg, attr, os.path.join(base, value))
    cfg.validate()
    return cfg


def resolve_loss_alias(alias: str) -> str:
    if alias in _CLI_LOSS_ALIASES:
        return _CLI_LOSS_ALIASES[alias]
    if alias in LOSS_KINDS:
        return alias
    raise ConfigError(f"unknown loss {alias!r}; use one of new, ce, mse")
