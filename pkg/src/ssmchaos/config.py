"""Experiment configuration: TOML loading, scale overlays and validation.

A config file holds base tables plus optional ``[desk]`` and ``[paper]``
tables whose contents are deep-merged over the base for the selected scale.
"""

from __future__ import annotations

import copy
import hashlib
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import tomli

from .systems import Forcing, SystemSpec

SCALES = ("desk", "paper")
MODEL_KINDS = ("poly", "poly-map", "knn", "forced", "none")
DIAGNOSTICS = ("fnn", "invariance", "forecast", "mle", "density", "spectrum")
RECIPES = ("lorenz3d", "lorenz9d", "duffing", "rossler", "ks", "bistable-forced")


class ConfigError(ValueError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """All randomness flows through a PCG64 generator seeded here."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_order(value) -> list[int]:
    """``3`` -> [3]; ``"scan 2..6"`` -> [2, 3, 4, 5, 6]."""
    if isinstance(value, bool):
        raise ConfigError(f"ssm.order: invalid value {value!r}")
    if isinstance(value, int):
        orders = [value]
    elif isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        orders = list(value)
    elif isinstance(value, str):
        m = re.fullmatch(r"\s*scan\s+(\d+)\s*\.\.\s*(\d+)\s*", value)
        if not m:
            raise ConfigError(f"ssm.order: expected an integer or 'scan l..r', got {value!r}")
        lo, hi = int(m.group(1)), int(m.group(2))
        if hi < lo:
            raise ConfigError(f"ssm.order: empty scan {value!r}")
        orders = list(range(lo, hi + 1))
    else:
        raise ConfigError(f"ssm.order: invalid value {value!r}")
    if not orders or min(orders) < 1:
        raise ConfigError("ssm.order: orders must be positive")
    return orders


@dataclass
class DataConfig:
    dt: float
    t_end: float
    discard: float = 0.0
    substeps: int = 1
    train_ic: Any = None          # list of initial states, or "random"
    test_ic: Any = None
    n_random_train: int = 1
    n_random_test: int = 1
    random_radius: float = 1.0
    random_box: list | None = None   # per-coordinate [low, high]; replaces the ball when given
    test_t_end: float | None = None
    shift: Any = "none"           # "none" | "rossler-center" | "map-fixed-point" | vector
    poincare: bool = False
    unforced_training: bool = False
    calibration_ic: list | None = None
    calibration_periods: int = 100
    observable: Any = "full-state"


@dataclass
class EmbeddingConfig:
    dim: Any = None               # int, "auto" or None for no embedding
    lag_steps: Any = 1            # int or "auto"
    fnn_lag_steps: int | None = None
    fnn_dims: list[int] = field(default_factory=lambda: [1, 2, 3, 4])
    fnn_max_points: int = 20000
    fnn_data: str = "train"
    fnn_threshold: float = 1.0


@dataclass
class SsmConfig:
    d: Any = 2                    # int or "auto"
    orders: list[int] = field(default_factory=lambda: [3])
    order: int = 3                # order used downstream
    method: str = "optimized"
    max_points: int = 100000
    constant: bool = False


@dataclass
class ModelConfig:
    kind: str = "poly"
    order: int = 3
    k: int = 4
    spectrum_order: int | None = None
    max_points: int | None = None


@dataclass
class DiagnosticsConfig:
    requested: list[str] = field(default_factory=list)
    horizon_threshold: float = 0.1
    forecast_steps: int = 1000
    horizon_starts: int = 1
    mle_trials: int = 50
    mle_steps: int = 3000
    mle_dt: float | None = None
    mle_eps0_rel: float | None = None
    mle_window: list[float] | None = None
    model_mle_eps0_rel: float | None = None
    model_mle_window: list[float] | None = None
    density_grid: int = 512
    blowup_factor: float = 10.0


@dataclass
class ExperimentConfig:
    name: str
    seed: int
    scale: str
    system: SystemSpec
    data: DataConfig
    embedding: EmbeddingConfig
    ssm: SsmConfig
    model: ModelConfig
    diagnostics: DiagnosticsConfig
    output_dir: str = "out"
    raw: dict = field(default_factory=dict, repr=False)

    def config_hash(self) -> str:
        """SHA-256 of the resolved settings (canonical JSON), first 16 hex digits."""
        resolved = {k: v for k, v in self.raw.items() if k not in SCALES}
        resolved["seed"] = self.seed
        resolved["scale"] = self.scale
        text = json.dumps(resolved, sort_keys=True, default=str)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _section(raw: dict, name: str, cls):
    sec = dict(raw.get(name, {}))
    known = set(cls.__dataclass_fields__)
    unknown = set(sec) - known
    if unknown:
        raise ConfigError(f"[{name}]: unknown keys {sorted(unknown)}")
    try:
        return cls(**sec)
    except TypeError as exc:
        raise ConfigError(f"[{name}]: {exc}")


def _system(raw: dict) -> SystemSpec:
    sec = raw.get("system")
    if not isinstance(sec, dict) or "name" not in sec:
        raise ConfigError("[system]: 'name' is required")
    forcing = None
    if "forcing" in sec:
        f = sec["forcing"]
        try:
            forcing = Forcing(float(f["amplitude"]), float(f["frequency"]), float(f.get("phase", 0.0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"[system.forcing]: {exc}")
    try:
        return SystemSpec.default(sec["name"], forcing, **sec.get("parameters", {}))
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"[system]: {exc}")


# ks_scan and oracle are read only by the matching reproduction recipes
_TOP_LEVEL = {"name", "seed", "output_dir", "system", "data", "embedding", "ssm", "model", "diagnostics",
              "ks_scan", "oracle"}


def from_dict(raw: dict, scale: str = "desk", seed: int | None = None) -> ExperimentConfig:
    if scale not in SCALES:
        raise ConfigError(f"scale must be one of {SCALES}, got {scale!r}")
    merged = deep_merge(raw, raw.get(scale, {}))
    merged = {k: v for k, v in merged.items() if k not in SCALES}
    unknown = set(merged) - _TOP_LEVEL
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    if seed is not None:
        merged["seed"] = int(seed)
    system = _system(merged)
    data = _section(merged, "data", DataConfig)
    emb = _section(merged, "embedding", EmbeddingConfig)
    ssm_raw = dict(merged.get("ssm", {}))
    orders = parse_order(ssm_raw.pop("order", 3))
    ssm_raw.setdefault("order", ssm_raw.pop("use_order", orders[-1]))
    ssm = _section({"ssm": {**ssm_raw, "orders": orders}}, "ssm", SsmConfig)
    model = _section(merged, "model", ModelConfig)
    diag_raw = dict(merged.get("diagnostics", {}))
    if "list" in diag_raw:
        diag_raw["requested"] = diag_raw.pop("list")
    diag = _section({"diagnostics": diag_raw}, "diagnostics", DiagnosticsConfig)
    cfg = ExperimentConfig(str(merged.get("name", "experiment")), int(merged.get("seed", 0)), scale,
                           system, data, emb, ssm, model, diag,
                           str(merged.get("output_dir", "out")), merged)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    d = cfg.data
    if not (d.dt > 0 and d.t_end > d.discard >= 0):
        raise ConfigError("[data]: need dt > 0 and t_end > discard >= 0")
    if d.substeps < 1:
        raise ConfigError("[data]: substeps must be >= 1")
    if d.poincare and cfg.system.forcing is None:
        raise ConfigError("[data]: poincare sampling needs a forced system")
    obs = d.observable
    if obs != "full-state" and not (isinstance(obs, int) and 0 <= obs < cfg.system.dim):
        raise ConfigError(f"[data]: observable must be 'full-state' or a state index, got {obs!r}")
    e = cfg.embedding
    if e.dim is not None and e.dim != "auto" and not (isinstance(e.dim, int) and e.dim >= 1):
        raise ConfigError(f"[embedding]: invalid dim {e.dim!r}")
    if e.lag_steps != "auto" and not (isinstance(e.lag_steps, int) and e.lag_steps >= 1):
        raise ConfigError(f"[embedding]: invalid lag_steps {e.lag_steps!r}")
    if e.fnn_data not in ("train", "test"):
        raise ConfigError(f"[embedding]: fnn_data must be 'train' or 'test', got {e.fnn_data!r}")
    if d.random_box is not None and (len(d.random_box) != cfg.system.dim
                                     or any(len(b) != 2 or b[0] > b[1] for b in d.random_box)):
        raise ConfigError(f"[data]: random_box needs {cfg.system.dim} [low, high] pairs")
    s = cfg.ssm
    if s.method not in ("optimized", "fast"):
        raise ConfigError(f"[ssm]: method must be 'optimized' or 'fast', got {s.method!r}")
    if s.d != "auto" and not (isinstance(s.d, int) and s.d >= 1):
        raise ConfigError(f"[ssm]: invalid d {s.d!r}")
    if s.order not in s.orders:
        raise ConfigError(f"[ssm]: use_order {s.order} not among scanned orders {s.orders}")
    m = cfg.model
    if m.kind not in MODEL_KINDS:
        raise ConfigError(f"[model]: kind must be one of {MODEL_KINDS}, got {m.kind!r}")
    if m.kind == "forced" and cfg.system.forcing is None:
        raise ConfigError("[model]: kind 'forced' needs [system.forcing]")
    if m.k < 1 or m.order < 1:
        raise ConfigError("[model]: k and order must be positive")
    bad = set(cfg.diagnostics.requested) - set(DIAGNOSTICS)
    if bad:
        raise ConfigError(f"[diagnostics]: unknown entries {sorted(bad)}")


def load(path: str | Path, scale: str = "desk", seed: int | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = tomli.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}")
    return from_dict(raw, scale, seed)


def recipe_text(name: str) -> str:
    if name not in RECIPES:
        raise ConfigError(f"unknown recipe {name!r}; choose from {', '.join(RECIPES)}")
    return resources.files("ssmchaos.recipes").joinpath(f"{name}.toml").read_text()


def load_recipe(name: str, scale: str = "desk", seed: int | None = None) -> ExperimentConfig:
    return from_dict(tomli.loads(recipe_text(name)), scale, seed)
