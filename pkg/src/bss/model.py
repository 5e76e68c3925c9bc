"""Domain types, parameter validation, choice functions, and arrival rates.

Shared by every other module. All types are immutable after validation and
safe to share across concurrent tasks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "ValidationError",
    "ConvergenceError",
    "ChoiceSpec",
    "FourierRateModel",
    "ArrivalModel",
    "SystemParams",
    "choice_weight",
    "arrival_rate",
    "validate_params",
]

# Grid step (hours) for the non-negativity scan of time-varying rates.
RATE_GRID_STEP = 0.01

CHOICE_KINDS = ("exponential", "minimum", "polynomial", "none")


class ValidationError(ValueError):
    """A configuration or argument violates a documented contract."""


class ConvergenceError(RuntimeError):
    """An iterative solver exhausted its budget without meeting tolerance."""


@dataclass(frozen=True)
class ChoiceSpec:
    """Choice function g mapping a bike count to a pickup weight.

    kind is one of exponential (g(x)=e^{theta x}), minimum (g(x)=min(x,c)),
    polynomial (g(x)=x^alpha, with 0^0=1), or none (g=1). param holds theta,
    c, or alpha; it must be None for kind none.
    """

    kind: str
    param: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in CHOICE_KINDS:
            raise ValidationError(
                f"choice.kind must be one of {CHOICE_KINDS}, got {self.kind!r}"
            )
        if self.kind == "none":
            if self.param is not None:
                raise ValidationError("choice.param must be absent for kind 'none'")
            return
        if self.param is None:
            raise ValidationError(f"choice.param is required for kind {self.kind!r}")
        p = float(self.param)
        if not math.isfinite(p):
            raise ValidationError(f"choice.param must be finite, got {p}")
        if self.kind == "exponential" and p < 0:
            raise ValidationError(f"choice theta must be >= 0, got {p}")
        if self.kind == "polynomial" and p < 0:
            raise ValidationError(f"choice alpha must be >= 0, got {p}")
        if self.kind == "minimum":
            if p < 1 or p != int(p):
                raise ValidationError(f"choice c must be an integer >= 1, got {self.param}")
            object.__setattr__(self, "param", int(p))


@dataclass(frozen=True)
class FourierRateModel:
    """Periodic rate lambda(t) = intercept + sum_j b1_j sin(2pi t j/w) + b2_j cos(2pi t j/w)."""

    intercept: float
    sin_coeffs: tuple[float, ...] = ()
    cos_coeffs: tuple[float, ...] = ()
    period: float = 24.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "sin_coeffs", tuple(float(c) for c in self.sin_coeffs))
        object.__setattr__(self, "cos_coeffs", tuple(float(c) for c in self.cos_coeffs))
        object.__setattr__(self, "intercept", float(self.intercept))
        object.__setattr__(self, "period", float(self.period))
        if len(self.sin_coeffs) != len(self.cos_coeffs):
            raise ValidationError(
                "fourier sin and cos coefficient lists must have equal length, got "
                f"{len(self.sin_coeffs)} and {len(self.cos_coeffs)}"
            )
        if not (self.period > 0):
            raise ValidationError(f"fourier period must be > 0, got {self.period}")

    @property
    def order(self) -> int:
        return len(self.sin_coeffs)


@dataclass(frozen=True)
class ArrivalModel:
    """Arrival-rate model: exactly one of a constant rate or a Fourier model."""

    rate: float | None = None
    fourier: FourierRateModel | None = None

    def __post_init__(self) -> None:
        if (self.rate is None) == (self.fourier is None):
            raise ValidationError("arrival model needs exactly one of 'constant' or 'fourier'")
        if self.rate is not None:
            r = float(self.rate)
            if not math.isfinite(r) or r < 0:
                raise ValidationError(f"arrival.constant rate must be >= 0, got {self.rate}")
            object.__setattr__(self, "rate", r)

    @property
    def is_constant(self) -> bool:
        return self.rate is not None

    def max_rate(self) -> float:
        """Upper bound of the rate over one period (exact for constant models)."""
        if self.rate is not None:
            return self.rate
        f = self.fourier
        n = int(math.ceil(f.period / RATE_GRID_STEP)) + 1
        ts = np.linspace(0.0, f.period, n)
        return float(np.max(arrival_rate(self, ts)))


@dataclass(frozen=True)
class SystemParams:
    """Validated network parameters.

    Stations are split into capacity classes given by capacity_values (sorted
    ascending) and capacity_fractions (positive, summing to 1). A uniform
    network has a single class. fleet is the total number of bikes M; gamma is
    the derived per-station density M/N.
    """

    n_stations: int
    fleet: int
    mu: float
    p: float
    arrival: ArrivalModel
    choice: ChoiceSpec
    capacity_values: tuple[int, ...]
    capacity_fractions: tuple[float, ...]

    @property
    def gamma(self) -> float:
        return self.fleet / self.n_stations

    @property
    def k_max(self) -> int:
        return self.capacity_values[-1]

    @property
    def is_uniform(self) -> bool:
        return len(self.capacity_values) == 1

    @property
    def uniform_capacity(self) -> int:
        if not self.is_uniform:
            raise ValidationError("network has heterogeneous capacities")
        return self.capacity_values[0]

    def class_sizes(self) -> np.ndarray:
        """Station count per capacity class by the largest-remainder rule."""
        n = self.n_stations
        fr = np.asarray(self.capacity_fractions)
        base = np.floor(fr * n).astype(int)
        short = n - int(base.sum())
        if short > 0:
            order = np.argsort(-(fr * n - base), kind="stable")
            base[order[:short]] += 1
        return base

    def station_capacities(self) -> np.ndarray:
        """Per-station capacities, stations grouped by ascending class."""
        return np.repeat(np.asarray(self.capacity_values), self.class_sizes())

    def choice_weights(self) -> np.ndarray:
        """g(n) for n = 0..k_max."""
        return choice_weight(self.choice, np.arange(self.k_max + 1))

    def to_config(self) -> dict:
        cap: object
        if self.is_uniform:
            cap = self.capacity_values[0]
        else:
            cap = {
                "values": list(self.capacity_values),
                "fractions": list(self.capacity_fractions),
            }
        if self.arrival.is_constant:
            arr: dict = {"constant": self.arrival.rate}
        else:
            f = self.arrival.fourier
            arr = {
                "fourier": {
                    "period": f.period,
                    "intercept": f.intercept,
                    "sin": list(f.sin_coeffs),
                    "cos": list(f.cos_coeffs),
                }
            }
        ch: dict = {"kind": self.choice.kind}
        if self.choice.kind == "exponential":
            ch["theta"] = self.choice.param
        elif self.choice.kind == "minimum":
            ch["c"] = self.choice.param
        elif self.choice.kind == "polynomial":
            ch["alpha"] = self.choice.param
        return {
            "n_stations": self.n_stations,
            "fleet": self.fleet,
            "capacity": cap,
            "mu": self.mu,
            "p": self.p,
            "arrival": arr,
            "choice": ch,
        }


def choice_weight(spec: ChoiceSpec, n):
    """Evaluate g(n); accepts a scalar or an integer array, n >= 0."""
    arr = np.asarray(n)
    if np.any(arr < 0):
        raise ValidationError(f"bike count must be >= 0, got {np.min(arr)}")
    if spec.kind == "exponential":
        out = np.exp(float(spec.param) * arr.astype(float))
    elif spec.kind == "minimum":
        out = np.minimum(arr, spec.param).astype(float)
    elif spec.kind == "polynomial":
        # numpy defines 0.0**0.0 = 1.0, which is the convention used here
        out = np.power(arr.astype(float), float(spec.param))
    else:
        out = np.ones(arr.shape, dtype=float)
    if np.ndim(n) == 0:
        return float(out)
    return out


def arrival_rate(model: ArrivalModel, t):
    """Rate lambda(t) in trips per station per hour; t may be scalar or array."""
    if model.rate is not None:
        if np.ndim(t) == 0:
            return model.rate
        return np.full(np.shape(t), model.rate)
    f = model.fourier
    if np.ndim(t) == 0:
        # scalar fast path, called once per ODE stage
        w = 2.0 * math.pi * float(t) / f.period
        val = f.intercept
        for j in range(f.order):
            val += f.sin_coeffs[j] * math.sin(w * (j + 1))
            val += f.cos_coeffs[j] * math.cos(w * (j + 1))
        return val
    tt = np.asarray(t, dtype=float)
    js = np.arange(1, f.order + 1)
    w = (2.0 * math.pi / f.period) * tt[..., None] * js
    return (
        f.intercept
        + np.sin(w) @ np.asarray(f.sin_coeffs)
        + np.cos(w) @ np.asarray(f.cos_coeffs)
    )


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ValidationError(msg)


def _as_int(value, field: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(f"{field} must be a number, got {value!r}")
    if float(value) != int(value):
        raise ValidationError(f"{field} must be an integer, got {value!r}")
    return int(value)


def _parse_choice(raw, path: str) -> ChoiceSpec:
    if isinstance(raw, ChoiceSpec):
        return raw
    _require(isinstance(raw, Mapping), f"{path} must be a mapping")
    kind = raw.get("kind")
    _require(kind in CHOICE_KINDS, f"{path}.kind must be one of {CHOICE_KINDS}, got {kind!r}")
    param_key = {"exponential": "theta", "minimum": "c", "polynomial": "alpha"}.get(kind)
    extra = set(raw) - {"kind", param_key} - {None}
    _require(not extra, f"unknown keys in {path}: {sorted(extra)}")
    if param_key is None:
        return ChoiceSpec(kind=kind)
    _require(param_key in raw, f"{path}.{param_key} is required for kind {kind!r}")
    return ChoiceSpec(kind=kind, param=raw[param_key])


def _parse_arrival(raw, path: str) -> ArrivalModel:
    if isinstance(raw, ArrivalModel):
        return raw
    _require(isinstance(raw, Mapping), f"{path} must be a mapping")
    keys = set(raw)
    _require(
        keys in ({"constant"}, {"fourier"}),
        f"{path} must have exactly one of 'constant' or 'fourier', got {sorted(keys)}",
    )
    if "constant" in raw:
        rate = raw["constant"]
        _require(
            isinstance(rate, (int, float)) and not isinstance(rate, bool),
            f"{path}.constant must be a number",
        )
        return ArrivalModel(rate=float(rate))
    f = raw["fourier"]
    _require(isinstance(f, Mapping), f"{path}.fourier must be a mapping")
    extra = set(f) - {"period", "intercept", "sin", "cos"}
    _require(not extra, f"unknown keys in {path}.fourier: {sorted(extra)}")
    _require("intercept" in f, f"{path}.fourier.intercept is required")
    sin = tuple(f.get("sin", ()))
    cos = tuple(f.get("cos", ()))
    model = FourierRateModel(
        intercept=f["intercept"],
        sin_coeffs=sin,
        cos_coeffs=cos,
        period=f.get("period", 24.0),
    )
    return ArrivalModel(fourier=model)


def _parse_capacity(raw, path: str) -> tuple[tuple[int, ...], tuple[float, ...]]:
    if isinstance(raw, (int, float)) and not isinstance(raw, bool):
        k = _as_int(raw, path)
        _require(k >= 1, f"{path} must be >= 1, got {k}")
        return (k,), (1.0,)
    _require(isinstance(raw, Mapping), f"{path} must be an integer or a mapping")
    extra = set(raw) - {"values", "fractions"}
    _require(not extra, f"unknown keys in {path}: {sorted(extra)}")
    _require(
        "values" in raw and "fractions" in raw,
        f"{path} mapping needs 'values' and 'fractions'",
    )
    values = [
        _as_int(v, f"{path}.values[{i}]") for i, v in enumerate(raw["values"])
    ]
    fractions = [float(v) for v in raw["fractions"]]
    _require(len(values) > 0, f"{path}.values must be non-empty")
    _require(
        len(values) == len(fractions),
        f"{path}.values and {path}.fractions must have equal length",
    )
    _require(all(v >= 1 for v in values), f"{path}.values must all be >= 1")
    _require(len(set(values)) == len(values), f"{path}.values must be distinct")
    _require(all(f > 0 for f in fractions), f"{path}.fractions must all be > 0")
    total = sum(fractions)
    _require(
        abs(total - 1.0) <= 1e-9,
        f"{path}.fractions must sum to 1, got {total!r}",
    )
    fractions = [f / total for f in fractions]
    order = sorted(range(len(values)), key=lambda i: values[i])
    return (
        tuple(values[i] for i in order),
        tuple(fractions[i] for i in order),
    )


def validate_params(raw) -> SystemParams:
    """Validate a raw configuration tree (or re-validate a SystemParams).

    Reconciles fleet and gamma, normalizes the capacity distribution, and
    checks the arrival rate is non-negative over one period on a dense grid.
    Idempotent: passing a SystemParams returns it unchanged.
    """
    if isinstance(raw, SystemParams):
        return raw
    _require(isinstance(raw, Mapping), "config must be a mapping")
    known = {"n_stations", "fleet", "gamma", "capacity", "mu", "p", "arrival", "choice"}
    extra = set(raw) - known
    _require(not extra, f"unknown config keys: {sorted(extra)}")
    for key in ("n_stations", "capacity", "mu", "p", "arrival", "choice"):
        _require(key in raw, f"missing config key: {key}")

    n = _as_int(raw["n_stations"], "n_stations")
    _require(n >= 1, f"n_stations must be >= 1, got {n}")

    _require(
        "fleet" in raw or "gamma" in raw,
        "one of fleet or gamma is required",
    )
    if "fleet" in raw:
        fleet = _as_int(raw["fleet"], "fleet")
        _require(fleet >= 0, f"fleet must be >= 0, got {fleet}")
        if "gamma" in raw:
            g = float(raw["gamma"])
            _require(
                abs(g * n - fleet) <= 1e-6 * max(1.0, fleet),
                f"fleet={fleet} and gamma={g} disagree for n_stations={n}",
            )
    else:
        g = float(raw["gamma"])
        _require(g >= 0, f"gamma must be >= 0, got {g}")
        fleet_f = g * n
        _require(
            abs(fleet_f - round(fleet_f)) <= 1e-6,
            f"gamma={g} times n_stations={n} is not an integer fleet",
        )
        fleet = int(round(fleet_f))

    mu = float(raw["mu"])
    _require(math.isfinite(mu) and mu > 0, f"mu must be > 0, got {raw['mu']!r}")
    p = float(raw["p"])
    _require(0.0 <= p <= 1.0, f"p must be in [0, 1], got {raw['p']!r}")

    values, fractions = _parse_capacity(raw["capacity"], "capacity")
    arrival = _parse_arrival(raw["arrival"], "arrival")
    choice = _parse_choice(raw["choice"], "choice")

    if not arrival.is_constant:
        f = arrival.fourier
        n_grid = int(math.ceil(f.period / RATE_GRID_STEP)) + 1
        ts = np.linspace(0.0, f.period, n_grid)
        vals = arrival_rate(arrival, ts)
        bad = np.nonzero(vals < 0)[0]
        if bad.size:
            i = int(bad[0])
            raise ValidationError(
                f"arrival rate is negative at t={ts[i]:.2f} h (value {vals[i]:.6g})"
            )

    return SystemParams(
        n_stations=n,
        fleet=fleet,
        mu=mu,
        p=p,
        arrival=arrival,
        choice=choice,
        capacity_values=values,
        capacity_fractions=fractions,
    )
