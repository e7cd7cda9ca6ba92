"""Run configuration: defaults, named profiles, TOML loading and validation."""
from __future__ import annotations

import dataclasses
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Union

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .catalogue import SIGMAS, SOURCES
from .errors import ConfigError

CACHE_ENV = "FRACSOURCE_CACHE"

PROFILES: dict[str, dict[str, Any]] = {
    "full": {},
    "desk": {"N": 128, "M": 1000, "f_M": 40, "e_n": 10},
}


def default_cache_dir() -> Path:
    env = os.environ.get(CACHE_ENV)
    if env:
        return Path(env)
    return Path.home() / ".cache" / "fracsource"


@dataclass(frozen=True)
class RunConfig:
    s: float = 0.75
    N: int = 500
    M: int = 10000
    f_M: int = 100
    T: float = 1.0
    omega: tuple = (-0.75, 0.75)
    eps: Union[float, str] = 1e4
    e_n: int = 50
    n_star: int | None = None
    sigma: str = "exp"
    source: str = "f1"
    theorem: Union[int, str] = 1
    noise: float = 0.0
    seed: int = 0
    outer: str = "extrapolate"
    strict: bool = False
    output_dir: str = "out"
    cache_dir: str | None = None
    figures: bool = True

    def __post_init__(self):
        validate(self)

    @property
    def n_star_effective(self) -> int:
        return self.n_star if self.n_star is not None else max(1, self.N // 5)

    @property
    def theorems(self) -> tuple:
        return (1, 2) if self.theorem == "both" else (int(self.theorem),)

    @property
    def cache_path(self) -> Path:
        return Path(self.cache_dir) if self.cache_dir else default_cache_dir()

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["omega"] = list(self.omega)
        d["n_star"] = self.n_star_effective
        return d


def validate(c: RunConfig) -> None:
    def need(ok, msg):
        if not ok:
            raise ConfigError(msg)

    need(0 < c.s < 1, f"s must lie in (0, 1), got {c.s}")
    need(isinstance(c.N, int) and c.N >= 2, f"N must be an integer >= 2, got {c.N}")
    need(isinstance(c.M, int) and c.M >= 1, f"M must be a positive integer, got {c.M}")
    need(isinstance(c.f_M, int) and c.f_M >= 2, f"f_M must be an integer >= 2, got {c.f_M}")
    need(c.M % c.f_M == 0, f"f_M={c.f_M} must divide M={c.M}")
    need(c.T > 0, f"T must be positive, got {c.T}")
    need(len(c.omega) == 2, f"omega must be a pair (lo, hi), got {c.omega!r}")
    lo, hi = c.omega
    need(-1 < lo < hi < 1, f"omega must satisfy -1 < lo < hi < 1, got ({lo}, {hi})")
    need(c.eps == "auto" or (isinstance(c.eps, (int, float)) and c.eps > 0),
         f"eps must be a positive number or 'auto', got {c.eps!r}")
    n_star = c.n_star_effective
    need(1 <= n_star <= c.N, f"n_star must satisfy 1 <= n_star <= N={c.N}, got {n_star}")
    need(1 <= c.e_n <= n_star, f"e_n must satisfy 1 <= e_n <= n_star={n_star}, got {c.e_n}")
    need(c.sigma in SIGMAS, f"unknown sigma {c.sigma!r}; choose from {sorted(SIGMAS)}")
    need(c.theorem in (1, 2, "both"), f"theorem must be 1, 2 or 'both', got {c.theorem!r}")
    need(c.noise >= 0, f"noise level must be non-negative, got {c.noise}")
    need(c.outer in ("extrapolate", "trapezoid"), f"outer quadrature must be 'extrapolate' or 'trapezoid', got {c.outer!r}")
    _check_source(c.source)


def _check_source(src: str) -> None:
    if src in SOURCES:
        return
    kind, _, rest = src.partition(":")
    if kind in ("coeffs", "nodal") and rest:
        return
    if kind == "modes" and rest:
        parse_modes(rest)
        return
    raise ConfigError(f"source must be one of {sorted(SOURCES)}, 'modes:1=1,3=0.5', 'coeffs:<file>' or "
                      f"'nodal:<file>', got {src!r}")


def parse_modes(spec: str) -> dict[int, float]:
    """'1=1,3=0.5' -> {1: 1.0, 3: 0.5}."""
    out = {}
    try:
        for item in spec.split(","):
            n, v = item.split("=")
            out[int(n)] = float(v)
    except ValueError:
        raise ConfigError(f"cannot parse mode list {spec!r}; expected '1=1.0,3=0.5'") from None
    if not out or min(out) < 1:
        raise ConfigError(f"mode indices must be >= 1 in {spec!r}")
    return out


_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}


def _coerce(raw: dict) -> dict:
    unknown = set(raw) - _FIELDS - {"profile"}
    if unknown:
        raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
    out = dict(raw)
    if "omega" in out:
        out["omega"] = tuple(float(v) for v in out["omega"])
    if "eps" in out and out["eps"] != "auto":
        try:
            out["eps"] = float(out["eps"])
        except (TypeError, ValueError):
            raise ConfigError(f"eps must be a number or 'auto', got {out['eps']!r}") from None
    if "theorem" in out and out["theorem"] != "both":
        try:
            out["theorem"] = int(out["theorem"])
        except (TypeError, ValueError):
            raise ConfigError(f"theorem must be 1, 2 or 'both', got {out['theorem']!r}") from None
    for key in ("s", "T", "noise"):
        if key in out:
            out[key] = float(out[key])
    return out


def make_config(profile: str | None = None, **overrides) -> RunConfig:
    """Defaults, then the named profile, then explicit overrides."""
    values: dict[str, Any] = {}
    if profile:
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        values.update(PROFILES[profile])
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**_coerce(values))


def load_config(path, profile: str | None = None, **overrides) -> RunConfig:
    """Read a TOML file of ``key = value`` pairs (optionally under a ``[run]`` table)."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"configuration file {path} does not exist") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    raw = raw.get("run", raw)
    profile = profile or raw.pop("profile", None)
    raw.pop("profile", None)
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return make_config(profile, **raw)
