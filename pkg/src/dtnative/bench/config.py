"""Global JSON config with ``DTNATIVE_`` environment overrides.

File layout (every section and key optional)::

    {"experiment": {...ExperimentConfig fields...},
     "sim": {...SimConfig fields...},
     "learner": {...DdpgConfig fields...}}

Environment variables override the file: ``DTNATIVE_<FIELD>`` targets the
experiment section, ``DTNATIVE_SIM_<FIELD>`` and ``DTNATIVE_LEARNER_<FIELD>``
the other two. Values are parsed as JSON when possible, else kept as strings.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from ..errors import InvalidConfig
from ..sim.world import SimConfig

ENV_PREFIX = "DTNATIVE_"
MODES = ("dt-native", "traditional")


@dataclass
class ExperimentConfig:
    sensors: int = 5
    mode: str = "dt-native"
    duration: float = 300.0  # sim seconds
    seed: int = 0
    thresholds: dict = field(default_factory=lambda: {"E1": 0.8, "E2": 0.8, "E3": 0.8})
    window: float = 10.0
    capacity: int = 64
    recovery_period: float = 5.0
    poll_interval: float = 5.0  # traditional mode operator trigger
    eval_interval: float = 3.5  # dt-native broker evaluation cycle
    time_scale: float = 0.006  # wall seconds per sim second
    watchdog: float = 10.0
    max_frame: int = 64 * 1024
    host: str = "127.0.0.1"
    port: int = 0
    out_dir: Optional[str] = None

    def validate(self):
        p = {}
        if not isinstance(self.sensors, int) or self.sensors < 1:
            p["sensors"] = f"must be a positive integer, got {self.sensors!r}"
        if self.mode not in MODES:
            p["mode"] = f"must be one of {MODES}, got {self.mode!r}"
        for name in ("duration", "window", "recovery_period", "poll_interval",
                     "eval_interval", "watchdog"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                p[name] = f"must be > 0, got {v!r}"
        if not (isinstance(self.time_scale, (int, float)) and self.time_scale >= 0):
            p["time_scale"] = f"must be >= 0, got {self.time_scale!r}"
        if not isinstance(self.capacity, int) or self.capacity < 1:
            p["capacity"] = f"must be a positive integer, got {self.capacity!r}"
        if set(self.thresholds) != {"E1", "E2", "E3"}:
            p["thresholds"] = "need exactly E1, E2, E3"
        elif any(not isinstance(v, (int, float)) or not 0 < v <= 1
                 for v in self.thresholds.values()):
            p["thresholds"] = "thresholds must lie in (0, 1]"
        if not isinstance(self.port, int) or not 0 <= self.port < 65536:
            p["port"] = f"invalid port {self.port!r}"
        if p:
            raise InvalidConfig(p)
        return self

    def sim_config(self, sim: Optional[dict] = None) -> SimConfig:
        d = dict(sim or {})
        d["sensors"] = self.sensors
        d["seed"] = self.seed
        cfg = SimConfig.from_dict(d)
        cfg.validate()
        return cfg


def _parse_env_value(raw: str):
    try:
        return json.loads(raw)
    except ValueError:
        return raw


def _coerce(cls, name, value):
    kinds = {f.name: f.type for f in fields(cls)}
    if name not in kinds:
        raise InvalidConfig({name: "unknown field"})
    t = kinds[name]
    if t in ("float", float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = {"experiment": {}, "sim": {}, "learner": {}}
    for key, raw in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        rest = key[len(ENV_PREFIX):].lower()
        if rest in ("pure_python", "no_ext"):
            continue
        for section in ("sim", "learner"):
            if rest.startswith(section + "_"):
                out[section][rest[len(section) + 1:]] = _parse_env_value(raw)
                break
        else:
            out["experiment"][rest] = _parse_env_value(raw)
    return out


def load_config(path=None, environ=None) -> dict:
    """Merged ``{"experiment", "sim", "learner"}`` dicts (file, then environment)."""
    merged = {"experiment": {}, "sim": {}, "learner": {}}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise InvalidConfig({"config": f"cannot read {path}: {exc.strerror}"}) from None
        except ValueError as exc:
            raise InvalidConfig({"config": f"{path} is not valid JSON: {exc}"}) from None
        if not isinstance(data, dict) or set(data) - set(merged):
            raise InvalidConfig({"config": f"top-level keys must be among {sorted(merged)}"})
        for k, v in data.items():
            if not isinstance(v, dict):
                raise InvalidConfig({k: "section must be an object"})
            merged[k].update(v)
    for k, v in env_overrides(environ).items():
        merged[k].update(v)
    return merged


def experiment_config(section: dict, **overrides) -> ExperimentConfig:
    d = dict(section)
    d.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in fields(ExperimentConfig)}
    extra = set(d) - known
    if extra:
        raise InvalidConfig({k: "unknown field" for k in sorted(extra)})
    d = {k: _coerce(ExperimentConfig, k, v) for k, v in d.items()}
    try:
        cfg = ExperimentConfig(**d)
    except TypeError as exc:
        raise InvalidConfig({"experiment": str(exc)}) from None
    return cfg.validate()


def as_dict(cfg) -> dict:
    return asdict(cfg)
