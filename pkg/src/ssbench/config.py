"""Scenario configuration: a flat key = value file plus CLI overrides.

Config grammar (one scenario per file): `key = value` lines, `#` comments,
arrays comma-separated.  Unknown keys raise ParseError so typos surface.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .errors import ParseError
from .params import PROTOCOLS

_LIST_FLOAT = ("epsilons",)
_LIST_INT = ("lambdas", "ns", "ms", "seeds")
_SCALAR_FLOAT = ("alpha", "collusion_fraction", "delta", "Delta")
_SCALAR_INT = ("trials", "retry_limit", "workers", "utility_keys")
_SCALAR_STR = ("out", "check_constant")
_LIST_STR = ("protocols",)


@dataclass
class Scenario:
    """One sweep: the grid, seeds and reporting knobs."""

    protocols: list = field(default_factory=lambda: list(PROTOCOLS))
    lambdas: list = field(default_factory=lambda: [64, 128, 256, 512])
    epsilons: list = field(default_factory=lambda: [0.1])
    ns: list = field(default_factory=lambda: [2 ** 12])
    ms: list = field(default_factory=lambda: [3])
    seeds: list = field(default_factory=lambda: [0])
    alpha: float = 0.05
    collusion_fraction: float = 0.0
    delta: float = 1e-5
    Delta: float = 1.0
    trials: int = 50
    retry_limit: int = 3
    workers: int = 1
    utility_keys: int = 41270
    check_constant: str = "paper"
    out: str = "bench_out"

    def validate(self):
        for name in ("protocols", "lambdas", "epsilons", "ns", "ms"):
            if not getattr(self, name):
                raise ParseError(f"grid {name} must be non-empty")
        if len(self.seeds) < 1:
            raise ParseError("need at least one seed")
        for p in self.protocols:
            if p not in PROTOCOLS:
                raise ParseError(f"unknown protocol {p!r}")
        if any(n < 1 for n in self.ns):
            raise ParseError("sample counts must be positive")
        return self


def _parse_value(key, raw):
    raw = raw.strip()
    try:
        if key in _LIST_FLOAT:
            return [float(x) for x in raw.replace(",", " ").split()]
        if key in _LIST_INT:
            return [int(x) for x in raw.replace(",", " ").split()]
        if key in _LIST_STR:
            return [x.strip() for x in raw.split(",") if x.strip()]
        if key in _SCALAR_FLOAT:
            return float(raw)
        if key in _SCALAR_INT:
            return int(raw)
        if key in _SCALAR_STR:
            return raw
    except ValueError as exc:
        raise ParseError(f"bad value for {key}: {raw!r}") from exc
    raise ParseError(f"unknown config key {key!r}")


def load_scenario(path=None, overrides=None):
    values = {}
    if path is not None:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ParseError(f"{path}:{lineno}: expected key = value")
                key, raw = line.split("=", 1)
                values[key.strip()] = _parse_value(key.strip(), raw)
    for key, raw in (overrides or {}).items():
        if raw is None:
            continue
        values[key] = _parse_value(key, raw) if isinstance(raw, str) else raw
    return Scenario(**values).validate()
