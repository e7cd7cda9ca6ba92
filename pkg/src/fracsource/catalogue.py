"""Named test sources f and temporal factors sigma used by the experiments."""
from __future__ import annotations

import mpmath
import numpy as np

from .dynamics import SigmaProfile
from .errors import ConfigError


def _f1(x):
    x2 = x * x
    return 5 * (1 - x2) * (0.25 - x2) * (0.042 - x2) / (2 * (0.025 + x2))


def _f2(x):
    return (1 - x * x) * np.tan(np.pi * x / 2.1)


def _f3(x):
    return np.where(np.abs(x) < 0.2, (5 * x - 1) * np.sin(20 * np.pi * x) / 2, 0.0)


def _f4(x):
    return np.where((x > -0.95) & (x <= -0.8), -1.0, np.where((x > 0.1) & (x < 0.4), 1.0, 0.0))


SOURCES = {"f1": _f1, "f2": _f2, "f3": _f3, "f4": _f4}


def catalogue_f(name: str, x: np.ndarray) -> np.ndarray:
    """Nodal samples of a catalogue source at the points ``x``."""
    try:
        fn = SOURCES[name]
    except KeyError:
        raise ConfigError(f"unknown source {name!r}; choose from {sorted(SOURCES)}") from None
    return np.asarray(fn(np.asarray(x, dtype=float)), dtype=float)


def _const(c):
    return lambda t: np.full(np.shape(t), c, dtype=float)


SIGMAS = {
    "exp": SigmaProfile("exp", np.exp, np.exp, mpmath.exp, mpmath.exp),
    "one": SigmaProfile("one", _const(1.0), _const(0.0), lambda t: mpmath.mpf(1), lambda t: mpmath.mpf(0)),
    "cos10": SigmaProfile("cos10", lambda t: np.cos(10 * t), lambda t: -10 * np.sin(10 * t),
                          lambda t: mpmath.cos(10 * t), lambda t: -10 * mpmath.sin(10 * t)),
    "quad": SigmaProfile("quad", lambda t: (1 - t) ** 2, lambda t: -2 * (1 - t),
                         lambda t: (1 - t) ** 2, lambda t: -2 * (1 - t)),
}


def catalogue_sigma(name: str) -> SigmaProfile:
    try:
        return SIGMAS[name]
    except KeyError:
        raise ConfigError(f"unknown sigma {name!r}; choose from {sorted(SIGMAS)}") from None

