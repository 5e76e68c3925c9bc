"""Deterministic mean-field limit: drift fields, RK4 integration, ratio projection.

The empirical measure of a uniform-capacity network is a plain vector y of
length K+1 on the probability simplex. Heterogeneous networks use a table
over (capacity class, bike count).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .model import (
    ChoiceSpec,
    ConvergenceError,
    SystemParams,
    ValidationError,
    arrival_rate,
    choice_weight,
)

__all__ = [
    "HeterogeneousMeasure",
    "drift",
    "drift_hetero",
    "integrate",
    "integrate_hetero",
    "ratio_projection",
    "ratio_bins",
    "builtin_measure",
]

# Denominators below this are treated as zero: informed users see no bikes
# anywhere and are lost.
TINY_DENOM = 1e-300

MAX_STEP = 0.01
MIN_STEP = 1e-6
DEFAULT_STEP = 0.005


@dataclass(frozen=True, eq=False)
class HeterogeneousMeasure:
    """Joint measure over (bike count n, capacity class k).

    table has shape (len(capacities), k_max+1); row c carries the mass of
    stations with capacity capacities[c] and is zero for n > capacities[c].
    Entries sum to 1; row sums are the capacity-class fractions.
    """

    capacities: tuple[int, ...]
    table: np.ndarray

    def __post_init__(self) -> None:
        caps = tuple(int(k) for k in self.capacities)
        object.__setattr__(self, "capacities", caps)
        tab = np.asarray(self.table, dtype=float)
        if tab.shape != (len(caps), caps[-1] + 1):
            raise ValidationError(
                f"table shape {tab.shape} does not match capacities {caps}"
            )
        if any(caps[i] >= caps[i + 1] for i in range(len(caps) - 1)):
            raise ValidationError("capacities must be strictly increasing")
        for c, k in enumerate(caps):
            if np.any(tab[c, k + 1 :] != 0.0):
                raise ValidationError(
                    f"mass above capacity {k} in class row {c}"
                )
        object.__setattr__(self, "table", tab)

    @property
    def k_max(self) -> int:
        return self.capacities[-1]

    def total(self) -> float:
        return float(self.table.sum())

    def class_fractions(self) -> np.ndarray:
        return self.table.sum(axis=1)

    def collapse(self) -> np.ndarray:
        """Single-class measure as a plain vector."""
        if len(self.capacities) != 1:
            raise ValidationError("collapse requires a single capacity class")
        return self.table[0].copy()

    @staticmethod
    def from_conditionals(
        capacities, fractions, conditionals
    ) -> "HeterogeneousMeasure":
        """Build from per-class conditional measures (row c has length caps[c]+1)."""
        caps = tuple(int(k) for k in capacities)
        table = np.zeros((len(caps), caps[-1] + 1))
        for c, (k, q, cond) in enumerate(zip(caps, fractions, conditionals)):
            cond = np.asarray(cond, dtype=float)
            if cond.shape != (k + 1,):
                raise ValidationError(
                    f"conditional for capacity {k} must have length {k + 1}"
                )
            table[c, : k + 1] = q * cond
        return HeterogeneousMeasure(caps, table)


@lru_cache(maxsize=128)
def _weights_cached(choice: ChoiceSpec, k_max: int) -> np.ndarray:
    w = choice_weight(choice, np.arange(k_max + 1))
    w.setflags(write=False)
    return w


@lru_cache(maxsize=128)
def _counts_cached(k_max: int) -> np.ndarray:
    n = np.arange(k_max + 1, dtype=float)
    n.setflags(write=False)
    return n


@lru_cache(maxsize=128)
def _up_mask_cached(capacities: tuple[int, ...]) -> np.ndarray:
    k_max = capacities[-1]
    mask = np.zeros((len(capacities), k_max + 1))
    for c, k in enumerate(capacities):
        mask[c, :k] = 1.0
    mask.setflags(write=False)
    return mask


def _flows(y, g, n_idx, lam: float, p: float, mu: float, gamma: float):
    """Down-flows F (pickups, F[...,n] leaves state n) and up-rate a."""
    s = float((y * g).sum())
    a = mu * (gamma - float((y * n_idx).sum()))
    if p > 0.0 and s > TINY_DENOM:
        c = (1.0 - p) + (p / s) * g
    else:
        c = np.full_like(g, 1.0 - p)
    f = lam * c * y
    return f, a


def _drift_into(y, g, n_idx, lam, p, mu, gamma, out, w, up):
    """Uniform-capacity drift written into out with scratch buffers w, up.

    Arithmetic mirrors _flows exactly so the buffered and allocating routes
    produce bit-identical values.
    """
    np.multiply(y, g, out=w)
    s = float(w.sum())
    np.multiply(y, n_idx, out=w)
    a = mu * (gamma - float(w.sum()))
    if p > 0.0 and s > TINY_DENOM:
        np.multiply(g, p / s, out=w)
        w += 1.0 - p
    else:
        w[:] = 1.0 - p
    w *= lam
    w *= y
    out[:] = 0.0
    out[:-1] += w[1:]
    out[1:] -= w[1:]
    np.multiply(y[:-1], a, out=up)
    out[1:] += up
    out[:-1] -= up
    return out


def drift(y, params: SystemParams, t: float = 0.0) -> np.ndarray:
    """Mean-field drift b(y) for a uniform-capacity network.

    Components sum to zero up to float cancellation. A zero choice
    denominator drops the informed term.
    """
    k = params.uniform_capacity
    y = np.asarray(y, dtype=float)
    if y.shape != (k + 1,):
        raise ValidationError(f"measure must have length {k + 1}, got {y.shape}")
    g = _weights_cached(params.choice, k)
    n_idx = _counts_cached(k)
    lam = arrival_rate(params.arrival, t)
    f, a = _flows(y, g, n_idx, lam, params.p, params.mu, params.gamma)
    b = np.zeros(k + 1)
    b[:-1] += f[1:]
    b[1:] -= f[1:]
    up = a * y[:-1]
    b[1:] += up
    b[:-1] -= up
    return b


def drift_hetero(ym: HeterogeneousMeasure, params: SystemParams, t: float = 0.0) -> np.ndarray:
    """Drift table over (class, count); every class row sums to zero."""
    caps = tuple(params.capacity_values)
    if ym.capacities != caps:
        raise ValidationError(
            f"measure capacities {ym.capacities} do not match params {caps}"
        )
    k_max = caps[-1]
    g = _weights_cached(params.choice, k_max)
    n_idx = _counts_cached(k_max)
    lam = arrival_rate(params.arrival, t)
    tab = ym.table
    f, a = _flows(tab, g, n_idx, lam, params.p, params.mu, params.gamma)
    f[:, 0] = 0.0
    up = a * tab * _up_mask_cached(caps)
    b = np.zeros_like(tab)
    b[:, :-1] += f[:, 1:]
    b[:, 1:] -= f[:, 1:]
    b[:, 1:] += up[:, :-1]
    b[:, :-1] -= up[:, :-1]
    return b


def _check_grid_and_step(t_grid, h: float) -> np.ndarray:
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or t_grid.size < 1 or np.any(np.diff(t_grid) <= 0):
        raise ValidationError("t_grid must be strictly increasing")
    if not (0 < h <= MAX_STEP):
        raise ValidationError(f"step must be in (0, {MAX_STEP}], got {h}")
    return t_grid


def _rk4_step(fun, t, y, dt):
    k1 = fun(t, y)
    k2 = fun(t + 0.5 * dt, y + (0.5 * dt) * k1)
    k3 = fun(t + 0.5 * dt, y + (0.5 * dt) * k2)
    k4 = fun(t + dt, y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _rk4_advance(fun, t, y, dt):
    """One accepted step: halve on negative overshoot, renormalize drift."""
    out = _rk4_step(fun, t, y, dt)
    if out.min() < -1e-9:
        if dt / 2.0 < MIN_STEP:
            raise ConvergenceError(
                f"step size fell below {MIN_STEP} at t={t:.6g}; system too stiff"
            )
        mid = _rk4_advance(fun, t, y, dt / 2.0)
        return _rk4_advance(fun, t + dt / 2.0, mid, dt / 2.0)
    total = out.sum()
    if abs(total - 1.0) > 1e-12:
        out = out / total
    return out


def _rk4_path(fun, y0: np.ndarray, t_grid: np.ndarray, h: float) -> np.ndarray:
    """Fixed-step RK4 with dense stepping, step halving on negative overshoot,
    and simplex renormalization. fun(t, y) -> dy/dt on flat arrays."""
    t_grid = _check_grid_and_step(t_grid, h)
    out = np.empty((t_grid.size, y0.size))
    y = np.asarray(y0, dtype=float).copy()
    out[0] = y
    for i in range(t_grid.size - 1):
        t0, t1 = t_grid[i], t_grid[i + 1]
        nsub = max(1, int(math.ceil((t1 - t0) / h - 1e-12)))
        dt = (t1 - t0) / nsub
        t = t0
        for _ in range(nsub):
            y = _rk4_advance(fun, t, y, dt)
            t += dt
        out[i + 1] = y
    return out


def _rk4_path_const_drift(y0, params: SystemParams, t_grid, h: float) -> np.ndarray:
    """Buffered twin of _rk4_path for the constant-rate uniform drift.

    Long horizons (T ~ 2000) need hundreds of thousands of steps, where
    per-call allocation dominates. Stage arithmetic reproduces _rk4_step
    term by term, so results are bit-identical to the generic route; rare
    negative overshoots fall back to _rk4_advance for the halving cascade.
    """
    t_grid = _check_grid_and_step(t_grid, h)
    k = params.uniform_capacity
    g = _weights_cached(params.choice, k)
    n_idx = _counts_cached(k)
    lam = arrival_rate(params.arrival, 0.0)
    p, mu, gamma = params.p, params.mu, params.gamma

    def fun(t, y):
        b = np.empty(k + 1)
        return _drift_into(y, g, n_idx, lam, p, mu, gamma, b, np.empty(k + 1), np.empty(k))

    w = np.empty(k + 1)
    upb = np.empty(k)
    k1, k2, k3, k4 = (np.empty(k + 1) for _ in range(4))
    ys = np.empty(k + 1)
    acc = np.empty(k + 1)

    def stage(src, coeff, kout):
        # kout = drift(y + coeff*src); ys is scratch for the stage point
        np.multiply(src, coeff, out=ys)
        np.add(ys, y, out=ys)
        _drift_into(ys, g, n_idx, lam, p, mu, gamma, kout, w, upb)

    out = np.empty((t_grid.size, k + 1))
    y = np.asarray(y0, dtype=float).copy()
    out[0] = y
    for i in range(t_grid.size - 1):
        t0, t1 = t_grid[i], t_grid[i + 1]
        nsub = max(1, int(math.ceil((t1 - t0) / h - 1e-12)))
        dt = (t1 - t0) / nsub
        t = t0
        for _ in range(nsub):
            _drift_into(y, g, n_idx, lam, p, mu, gamma, k1, w, upb)
            stage(k1, 0.5 * dt, k2)
            stage(k2, 0.5 * dt, k3)
            stage(k3, dt, k4)
            np.multiply(k2, 2.0, out=acc)
            acc += k1
            np.multiply(k3, 2.0, out=ys)
            acc += ys
            acc += k4
            acc *= dt / 6.0
            acc += y
            if acc.min() < -1e-9:
                y = _rk4_advance(fun, t, y, dt)
            else:
                total = acc.sum()
                if abs(total - 1.0) > 1e-12:
                    acc /= total
                y, acc = acc, y
            t += dt
        out[i + 1] = y
    return out


def integrate(
    y0, params: SystemParams, t_grid, h: float = DEFAULT_STEP
) -> np.ndarray:
    """Integrate the uniform-capacity mean-field ODE over t_grid.

    Returns an array of shape (len(t_grid), K+1) whose first row is y0.
    """
    k = params.uniform_capacity
    y0 = np.asarray(y0, dtype=float)
    if y0.shape != (k + 1,):
        raise ValidationError(f"y0 must have length {k + 1}, got {y0.shape}")
    if abs(y0.sum() - 1.0) > 1e-10 or y0.min() < -1e-12:
        raise ValidationError("y0 must lie on the probability simplex")
    if params.arrival.is_constant:
        return _rk4_path_const_drift(y0, params, t_grid, h)
    return _rk4_path(lambda t, y: drift(y, params, t), y0, t_grid, h)


def integrate_hetero(
    ym0: HeterogeneousMeasure, params: SystemParams, t_grid, h: float = DEFAULT_STEP
) -> np.ndarray:
    """Integrate the heterogeneous mean-field ODE.

    Returns an array of shape (len(t_grid), C, k_max+1).
    """
    caps = tuple(params.capacity_values)
    if ym0.capacities != caps:
        raise ValidationError("y0 capacities do not match params")
    if abs(ym0.total() - 1.0) > 1e-10 or ym0.table.min() < -1e-12:
        raise ValidationError("y0 must lie on the probability simplex")
    shape = ym0.table.shape

    def fun(t, flat):
        ym = HeterogeneousMeasure.__new__(HeterogeneousMeasure)
        object.__setattr__(ym, "capacities", caps)
        object.__setattr__(ym, "table", flat.reshape(shape))
        return drift_hetero(ym, params, t).ravel()

    path = _rk4_path(fun, ym0.table.ravel(), t_grid, h)
    return path.reshape((len(path),) + shape)


def ratio_bins(k: int, k_max: int) -> np.ndarray:
    """Ratio-histogram bin index floor(n*k_max/k) for n = 0..k."""
    if k > k_max:
        raise ValidationError(f"capacity {k} exceeds k_max {k_max}")
    return (np.arange(k + 1) * k_max) // k


def ratio_projection(ym: HeterogeneousMeasure, k_max: int | None = None) -> np.ndarray:
    """Aggregate a heterogeneous measure into the fill-ratio histogram.

    A station with n bikes and capacity k lands in bin floor(n*k_max/k); full
    stations land in bin k_max. Total mass is preserved.
    """
    if k_max is None:
        k_max = ym.k_max
    if k_max < ym.k_max:
        raise ValidationError(
            f"k_max {k_max} is below the largest capacity {ym.k_max}"
        )
    r = np.zeros(k_max + 1)
    for c, k in enumerate(ym.capacities):
        np.add.at(r, ratio_bins(k, k_max), ym.table[c, : k + 1])
    return r


def builtin_measure(params: SystemParams, name: str):
    """Named initial measures: 'uniform' or 'mass@n'.

    Uniform networks get a plain vector; heterogeneous networks get a
    HeterogeneousMeasure with the same conditional per class.
    """
    caps = params.capacity_values
    conds = []
    for k in caps:
        if name == "uniform":
            cond = np.full(k + 1, 1.0 / (k + 1))
        elif name.startswith("mass@"):
            try:
                n = int(name.split("@", 1)[1])
            except ValueError:
                raise ValidationError(f"bad measure name {name!r}") from None
            if n < 0:
                raise ValidationError(f"mass@n needs n >= 0, got {n}")
            cond = np.zeros(k + 1)
            cond[min(n, k)] = 1.0
        else:
            raise ValidationError(
                f"unknown builtin measure {name!r}; use 'uniform' or 'mass@n'"
            )
        conds.append(cond)
    if params.is_uniform:
        return conds[0]
    return HeterogeneousMeasure.from_conditionals(
        caps, params.capacity_fractions, conds
    )
