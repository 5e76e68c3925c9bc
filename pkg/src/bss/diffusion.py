"""Gaussian fluctuation layer around the mean-field limit.

The centered, sqrt(N)-scaled empirical measure converges to a linear SDE
driven by the drift Jacobian with instantaneous covariance given by the jump
brackets of the CTMC. This module evaluates both matrices and integrates the
resulting covariance ODE  Sigma' = J Sigma + Sigma J^T + A  alongside the
mean-field trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ConvergenceError, SystemParams, ValidationError, arrival_rate
from .meanfield import TINY_DENOM, MIN_STEP, _check_grid_and_step, drift

__all__ = [
    "CovarianceState",
    "jacobian",
    "bracket_matrix",
    "integrate_covariance",
    "ratio_covariance",
]


@dataclass(frozen=True)
class CovarianceState:
    """Fluctuation covariance at one instant."""

    sigma: np.ndarray
    t: float


def _require_uniform(params: SystemParams) -> int:
    if not params.is_uniform:
        raise ValidationError("fluctuation matrices need a uniform capacity")
    return params.uniform_capacity


def _rates(y: np.ndarray, params: SystemParams, t: float):
    """Down-rates lam*c_n*y_n, up-rate coefficient a, and the pieces needed
    for the Jacobian. c_n = (1-p) + p*g(n)/sum_j g(j) y_j."""
    k = _require_uniform(params)
    g = params.choice_weights()
    lam = arrival_rate(params.arrival, t)
    p, mu = params.p, params.mu
    n_idx = np.arange(k + 1, dtype=float)
    a = mu * (params.gamma - float(n_idx @ y))
    if p > 0.0:
        s = float(g @ y)
        if s <= TINY_DENOM:
            raise ValidationError(
                "choice denominator vanished; interior measure required"
            )
        c = (1.0 - p) + p * g / s
    else:
        s = 0.0
        c = np.ones(k + 1)
    return k, g, lam, p, mu, n_idx, a, s, c


def jacobian(y: np.ndarray, params: SystemParams, t: float = 0.0) -> np.ndarray:
    """Drift Jacobian J[n, i] = d b_n / d y_i, assembled in closed form.

    b_n = (lam*c_{n+1}*y_{n+1} - a*y_n) 1{n<K} + (a*y_{n-1} - lam*c_n*y_n) 1{n>0}
    with a = mu*(gamma - sum_j j y_j). Differentiating pulls in two dense
    rank-one pieces: a depends on the mean and c_n on the choice denominator.
    """
    y = np.asarray(y, dtype=float)
    k, g, lam, p, mu, n_idx, a, s, c = _rates(y, params, t)
    j = np.zeros((k + 1, k + 1))
    rows = np.arange(k + 1)

    # transition coefficients hit by the Kronecker terms
    j[rows[:-1], rows[:-1] + 1] += lam * c[1:]
    j[rows[:-1], rows[:-1]] -= a
    j[rows[1:], rows[1:] - 1] += a
    j[rows[1:], rows[1:]] -= lam * c[1:]

    # a(y) varies with the docked mean: da/dy_i = -mu*i
    lower = np.zeros(k + 1)
    lower[:-1] = y[:-1]  # coefficient of a in b_n for n<K is -y_n
    upper = np.zeros(k + 1)
    upper[1:] = y[:-1]  # coefficient of a in b_n for n>0 is +y_{n-1}
    j += np.outer(upper - lower, -mu * n_idx)

    if p > 0.0:
        # c_n varies with the denominator: dc_n/dy_i = -p*g(n)*g(i)/s^2
        coef = np.zeros(k + 1)
        coef[:-1] += g[1:] * y[1:]  # +lam*c_{n+1}*y_{n+1} term, n<K
        coef[1:] -= g[1:] * y[1:]  # -lam*c_n*y_n term, n>0
        j += np.outer(coef, -lam * p * g / (s * s))
    return j


def bracket_matrix(y: np.ndarray, params: SystemParams, t: float = 0.0) -> np.ndarray:
    """Instantaneous covariance rate of the scaled fluctuations.

    Each pickup at a station holding n bikes moves empirical mass n -> n-1,
    each dropoff n -> n+1; the bracket is the sum of rate * (e_to - e_from)
    (e_to - e_from)^T, a tridiagonal matrix with zero row sums.
    """
    y = np.asarray(y, dtype=float)
    k, g, lam, p, mu, n_idx, a, s, c = _rates(y, params, t)
    down = np.zeros(k + 1)
    down[1:] = lam * c[1:] * y[1:]
    up = np.zeros(k + 1)
    up[:-1] = a * y[:-1]

    mat = np.zeros((k + 1, k + 1))
    rows = np.arange(k + 1)
    off = down[1:] + up[:-1]
    mat[rows[:-1], rows[:-1] + 1] = -off
    mat[rows[1:], rows[1:] - 1] = -off
    diag = down + up
    diag[:-1] += down[1:]
    diag[1:] += up[:-1]
    mat[rows, rows] = diag
    return mat


def _rk4_fixed(fun, z0: np.ndarray, t_grid: np.ndarray, h: float, guard=None):
    """Fixed-step RK4 over a packed state with optional per-step guard.

    guard(z) -> bool flags an unacceptable step; the step is then retried at
    half size, failing below the minimum step.
    """
    t_grid = _check_grid_and_step(t_grid, h)
    out = np.empty((len(t_grid), z0.size))
    z = np.asarray(z0, dtype=float).copy()
    out[0] = z
    t = t_grid[0]

    def advance(t, z, dt):
        k1 = fun(t, z)
        k2 = fun(t + 0.5 * dt, z + 0.5 * dt * k1)
        k3 = fun(t + 0.5 * dt, z + 0.5 * dt * k2)
        k4 = fun(t + dt, z + dt * k3)
        cand = z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if guard is not None and guard(cand):
            if dt < MIN_STEP:
                raise ConvergenceError(
                    f"covariance integration step underflow below {MIN_STEP}"
                )
            half = advance(t, z, 0.5 * dt)
            return advance(t + 0.5 * dt, half, 0.5 * dt)
        return cand

    for seg in range(len(t_grid) - 1):
        span = t_grid[seg + 1] - t_grid[seg]
        n_sub = max(1, int(np.ceil(span / h - 1e-12)))
        dt = span / n_sub
        for _ in range(n_sub):
            z = advance(t, z, dt)
            t += dt
        t = t_grid[seg + 1]
        out[seg + 1] = z
    return out


def integrate_covariance(
    y0: np.ndarray,
    sigma0: np.ndarray,
    params: SystemParams,
    t_grid,
    h: float = 0.005,
    zero_bracket: bool = False,
) -> list[CovarianceState]:
    """Co-integrate the mean-field path and its fluctuation covariance.

    Solves y' = b(y), Sigma' = J(y) Sigma + Sigma J(y)^T + A(y) as one packed
    RK4 system so the covariance sees the order-4 accurate mean at every
    stage. zero_bracket drops the A(y) source term; that turns the equation
    into pure transport and is useful as a should-fail control next to
    Monte-Carlo covariance estimates.
    """
    k = _require_uniform(params)
    dim = k + 1
    y0 = np.asarray(y0, dtype=float)
    sigma0 = np.asarray(sigma0, dtype=float)
    if y0.shape != (dim,):
        raise ValidationError(f"y0 must have length {dim}")
    if sigma0.shape != (dim, dim):
        raise ValidationError(f"sigma0 must be {dim}x{dim}")
    if np.abs(sigma0 - sigma0.T).max() > 1e-10:
        raise ValidationError("sigma0 must be symmetric")

    def fun(t, z):
        y = z[:dim]
        sig = z[dim:].reshape(dim, dim)
        dy = drift(y, params, t)
        jac = jacobian(y, params, t)
        dsig = jac @ sig + sig @ jac.T
        if not zero_bracket:
            dsig = dsig + bracket_matrix(y, params, t)
        return np.concatenate([dy, dsig.ravel()])

    def guard(z):
        return bool(z[:dim].min() < -1e-9)

    z0 = np.concatenate([y0, sigma0.ravel()])
    path = _rk4_fixed(fun, z0, t_grid, h, guard=guard)
    t_grid = np.asarray(t_grid, dtype=float)
    states = []
    for row, t in zip(path, t_grid):
        sig = row[dim:].reshape(dim, dim)
        states.append(CovarianceState(sigma=0.5 * (sig + sig.T), t=float(t)))
    return states


def ratio_covariance(sigmas, capacities, k_max: int | None = None) -> np.ndarray:
    """Aggregate per-capacity fluctuation covariances onto ratio bins.

    The ratio fluctuation at bin j sums, over capacity classes k, the
    fluctuation at the unique count n with floor(n*k_max/k) = j (no such n
    contributes zero). Classes fluctuate independently, so covariances add:
    out = sum_k P_k Sigma_k P_k^T with P_k the 0/1 bin-assignment map.
    """
    capacities = [int(k) for k in capacities]
    if len(sigmas) != len(capacities):
        raise ValidationError("need one covariance matrix per capacity class")
    if k_max is None:
        k_max = max(capacities)
    if k_max < max(capacities):
        raise ValidationError(
            f"k_max {k_max} is below the largest capacity {max(capacities)}"
        )
    out = np.zeros((k_max + 1, k_max + 1))
    for sig, k in zip(sigmas, capacities):
        sig = np.asarray(sig, dtype=float)
        if sig.shape != (k + 1, k + 1):
            raise ValidationError(
                f"covariance for capacity {k} must be {k + 1}x{k + 1}"
            )
        bins = (np.arange(k + 1) * k_max) // k
        proj = np.zeros((k_max + 1, k + 1))
        proj[bins, np.arange(k + 1)] = 1.0
        out += proj @ sig @ proj.T
    return out
