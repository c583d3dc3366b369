"""Domain parameters, randomization ranges and expansion schedules."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

PARAM_NAMES = ("noise_scale", "friction", "mass_mult")


class BudgetExhausted(RuntimeError):
    """Raised when a randomization schedule has no further expansion step."""


@dataclass(frozen=True)
class DomainParams:
    noise_scale: float = 0.0
    friction: float = 0.0
    mass_mult: float = 1.0

    def __post_init__(self) -> None:
        for name in PARAM_NAMES:
            value = getattr(self, name)
            if not isinstance(value, (int, float, np.floating, np.integer)) or not math.isfinite(value):
                raise ValueError(f"DomainParams.{name} must be a finite real, got {value!r}")
        if self.noise_scale < 0:
            raise ValueError(f"DomainParams.noise_scale must be >= 0, got {self.noise_scale}")
        if self.friction < 0:
            raise ValueError(f"DomainParams.friction must be >= 0, got {self.friction}")
        if self.mass_mult <= 0:
            raise ValueError(f"DomainParams.mass_mult must be > 0, got {self.mass_mult}")

    def get(self, name: str) -> float:
        return float(getattr(self, name))

    def with_value(self, name: str, value: float) -> DomainParams:
        if name not in PARAM_NAMES:
            raise KeyError(f"unknown domain parameter {name!r}")
        return replace(self, **{name: float(value)})

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> DomainParams:
        unknown = set(d) - set(PARAM_NAMES)
        if unknown:
            raise ValueError(f"unknown DomainParams fields: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True)
class ParamRange:
    """Closed per-parameter intervals; only ``active_param`` is randomized.

    ``nominal`` holds the values used for every inactive parameter.
    """

    active_param: str
    lo: float
    hi: float
    nominal: DomainParams = field(default_factory=DomainParams)

    def __post_init__(self) -> None:
        if self.active_param not in PARAM_NAMES:
            raise ValueError(f"ParamRange.active_param must be one of {PARAM_NAMES}, got {self.active_param!r}")
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
            raise ValueError("ParamRange bounds must be finite")
        if self.lo > self.hi:
            raise ValueError(f"ParamRange requires lo <= hi, got [{self.lo}, {self.hi}]")
        # both endpoints must be physically valid values of the parameter
        self.nominal.with_value(self.active_param, self.lo)
        self.nominal.with_value(self.active_param, self.hi)

    def interval(self, name: str) -> tuple[float, float]:
        if name == self.active_param:
            return (self.lo, self.hi)
        v = self.nominal.get(name)
        return (v, v)

    def contains(self, params: DomainParams) -> bool:
        return all(lo <= params.get(n) <= hi for n in PARAM_NAMES for lo, hi in [self.interval(n)])

    def issubset(self, other: ParamRange) -> bool:
        return all(
            o_lo <= lo and hi <= o_hi
            for n in PARAM_NAMES
            for (lo, hi), (o_lo, o_hi) in [(self.interval(n), other.interval(n))]
        )

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def to_dict(self) -> dict:
        return {
            "active_param": self.active_param,
            "lo": float(self.lo),
            "hi": float(self.hi),
            "nominal": self.nominal.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> ParamRange:
        return cls(
            active_param=d["active_param"],
            lo=float(d["lo"]),
            hi=float(d["hi"]),
            nominal=DomainParams.from_dict(d.get("nominal", {})),
        )


def sample_params(prange: ParamRange, rng: np.random.Generator) -> DomainParams:
    """Draw the active parameter uniformly; inactive ones stay at nominal."""
    if prange.lo == prange.hi:
        value = prange.lo
    else:
        value = rng.uniform(prange.lo, prange.hi)
    return prange.nominal.with_value(prange.active_param, value)


def range_from_schedule(
    active_param: str, schedule: list, iteration: int, nominal: DomainParams
) -> ParamRange:
    """Range of curriculum stage ``iteration``.

    A schedule entry is either a scalar endpoint (interval spans from the
    first entry to it) or an explicit ``[lo, hi]`` pair.
    """
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    if iteration >= len(schedule):
        raise BudgetExhausted(
            f"randomization budget exhausted: stage {iteration} requested, schedule has {len(schedule)} entries"
        )
    entry = schedule[iteration]
    if isinstance(entry, (list, tuple)):
        lo, hi = float(entry[0]), float(entry[1])
    else:
        first = schedule[0]
        base = float(first[0]) if isinstance(first, (list, tuple)) else float(first)
        lo, hi = min(base, float(entry)), max(base, float(entry))
    return ParamRange(active_param, lo, hi, nominal)


def expand_range(prange: ParamRange, schedule: list, iteration: int) -> ParamRange:
    """Return the range for stage ``iteration + 1`` of ``schedule``.

    The result is the union of ``prange`` and the next schedule interval, so
    expansion is monotone even for irregular ladders.
    """
    if iteration + 1 >= len(schedule):
        raise BudgetExhausted(
            f"randomization budget exhausted: no stage after {iteration} in a schedule of {len(schedule)}"
        )
    nxt = range_from_schedule(prange.active_param, schedule, iteration + 1, prange.nominal)
    return replace(prange, lo=min(prange.lo, nxt.lo), hi=max(prange.hi, nxt.hi))
