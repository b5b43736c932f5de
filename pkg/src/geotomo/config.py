"""Experiment configuration: a small TOML schema with validation.

Example file::

    seed = 0

    [metric]
    lambda = "0.2*exp(-3*(x^2+y^2))"     # or g11 / g12 / g22

    [grid]
    ns = 64
    nphi = 32
    nbeta = 64
    nr = 24
    ntheta = 48

    [tolerances]
    step = 1e-3      # geodesic RK4 step
    dt = 2e-2        # flow-difference step for horizontal derivatives
    cutoff = 1e-6    # relative singular-value cutoff

    [geometry]
    delta = 0.2      # enlargement of the disk

Numbers are parsed as decimals.  Unknown sections or keys are errors.
"""
from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .geometry import MetricField

_SECTIONS = {
    "metric": ("lambda", "g11", "g12", "g22"),
    "grid": ("ns", "nphi", "nbeta", "nr", "ntheta"),
    "tolerances": ("step", "dt", "cutoff"),
    "geometry": ("delta",),
}


class ConfigError(ValueError):
    """Invalid configuration; ``key`` and ``line`` locate the problem when known."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = ""
        if key is not None:
            where += f" [{key}]"
        if line is not None:
            where += f" (line {line})"
        super().__init__(message + where)
        self.key, self.line = key, line


@dataclass(frozen=True)
class MetricSpec:
    lam: str | None = "0"
    g11: str | None = None
    g12: str | None = None
    g22: str | None = None

    def build(self) -> MetricField:
        if self.lam is not None:
            return MetricField.conformal(self.lam)
        return MetricField.general(self.g11, self.g12, self.g22)


@dataclass(frozen=True)
class ExperimentConfig:
    metric: MetricSpec = field(default_factory=MetricSpec)
    ns: int = 64
    nphi: int = 32
    nbeta: int = 64
    nr: int = 24
    ntheta: int = 48
    step: float = 1e-3
    dt: float = 2e-2
    cutoff: float = 1e-6
    delta: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for name in ("ns", "nphi", "nbeta", "nr", "ntheta"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 8:
                raise ConfigError(f"{name} must be an integer >= 8, got {v!r}", name)
        if self.nbeta & (self.nbeta - 1):
            raise ConfigError(f"nbeta must be a power of two, got {self.nbeta}", "nbeta")
        if not 0 < self.delta <= 0.5:
            raise ConfigError(f"delta must lie in (0, 0.5], got {self.delta}", "delta")
        for name in ("step", "dt", "cutoff"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive", name)

    def replace(self, **kw) -> "ExperimentConfig":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(kw)
        return ExperimentConfig(**d)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["metric"] = {k: v for k, v in d["metric"].items() if v is not None}
        return d

    @property
    def hash(self) -> str:
        text = json.dumps(self.as_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _line_of(text: str, key: str) -> int | None:
    for i, raw in enumerate(text.splitlines(), 1):
        if raw.split("=")[0].strip() == key:
            return i
    return None


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a configuration document."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from None

    kw: dict = {}
    seed = 0
    for key, value in raw.items():
        if key == "seed":
            if not isinstance(value, int):
                raise ConfigError("seed must be an integer", "seed", _line_of(text, "seed"))
            seed = value
            continue
        if key not in _SECTIONS or not isinstance(value, dict):
            raise ConfigError(f"unknown section or key '{key}'", key, _line_of(text, f"[{key}]") or _line_of(text, key))
        for sub, v in value.items():
            if sub not in _SECTIONS[key]:
                raise ConfigError(f"unknown key '{sub}' in [{key}]", f"{key}.{sub}", _line_of(text, sub))
            kw.setdefault(key, {})[sub] = v

    metric = kw.pop("metric", {"lambda": "0"})
    if "lambda" in metric and len(metric) > 1:
        raise ConfigError("give either lambda or g11/g12/g22", "metric", _line_of(text, "[metric]"))
    if "lambda" in metric:
        spec = MetricSpec(lam=str(metric["lambda"]))
    else:
        missing = [k for k in ("g11", "g12", "g22") if k not in metric]
        if missing:
            raise ConfigError(f"general metric lacks {', '.join(missing)}", "metric", _line_of(text, "[metric]"))
        spec = MetricSpec(None, *(str(metric[k]) for k in ("g11", "g12", "g22")))

    flat = {"metric": spec, "seed": seed, **{k: v for sec in kw.values() for k, v in sec.items()}}
    for name in ("step", "dt", "cutoff", "delta"):
        if name in flat:
            if isinstance(flat[name], bool) or not isinstance(flat[name], (int, float)):
                raise ConfigError(f"{name} must be a number", name, _line_of(text, name))
            flat[name] = float(flat[name])
    try:
        return ExperimentConfig(**flat)
    except ConfigError as exc:
        raise ConfigError(str(exc).split(" [")[0], exc.key, _line_of(text, exc.key or "")) from None


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
