"""Steady states of the mean-field limit and entropy diagnostics.

The K-dimensional fixed point collapses to two scalars: the spare-bike
level a = gamma - sum(n y_n) and the choice normalizer s = sum(g(n) y_n).
Given (a, s) the equilibrium is the birth-death measure with ratios
rho_k = mu*a / (lam*(1-p) + lam*p*g(k+1)/s), so solving means closing the
loop on (a, s).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    ConvergenceError,
    SystemParams,
    ValidationError,
    choice_weight,
)
from .meanfield import (
    TINY_DENOM,
    HeterogeneousMeasure,
    drift,
    drift_hetero,
    ratio_projection,
)

__all__ = [
    "EquilibriumResult",
    "birth_death_stationary",
    "solve_equilibrium",
    "solve_equilibrium_hetero",
    "entropy",
    "relative_entropy",
    "lyapunov_derivative",
]

# residual gate on ||drift(y_bar)||_inf
RESIDUAL_TOL = 1e-10
MAX_DAMPED_ITER = 400
DAMPING = 0.5


@dataclass(frozen=True)
class EquilibriumResult:
    """Equilibrium measure with its birth-death ratios and the two scalars."""

    y_bar: np.ndarray
    rho: np.ndarray
    a: float
    s: float
    residual: float
    iterations: int


def _logsumexp(v: np.ndarray, axis=None):
    m = np.max(v, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True))
    return out if axis is None else np.squeeze(out, axis=axis)


def birth_death_stationary(rho) -> np.ndarray:
    """Stationary measure of a birth-death chain with up/down ratios rho.

    y_n is proportional to the product of rho_0..rho_{n-1}; products are
    carried in log space so K in the hundreds cannot overflow.
    """
    rho = np.asarray(rho, dtype=float)
    if rho.ndim != 1 or rho.size < 1:
        raise ValidationError("rho must be a nonempty vector")
    if np.any(rho <= 0.0) or not np.all(np.isfinite(rho)):
        raise ValidationError("rho must be strictly positive and finite")
    logw = np.concatenate(([0.0], np.cumsum(np.log(rho))))
    y = np.exp(logw - _logsumexp(logw))
    return y / y.sum()


def _require_constant(params: SystemParams) -> float:
    if not params.arrival.is_constant:
        raise ValidationError(
            "equilibrium requires a constant arrival rate; "
            "time-varying systems have no fixed point"
        )
    return float(params.arrival.rate)


def _class_structure(params: SystemParams):
    caps = params.capacity_values
    fracs = params.capacity_fractions
    k_max = caps[-1]
    g = choice_weight(params.choice, np.arange(k_max + 1))
    return caps, np.asarray(fracs, dtype=float), g


def _log_rho(a, s, lam, mu, p, g):
    """log rho_k for k = 0..k_max-1, broadcasting over leading axes of a, s."""
    a = np.asarray(a, dtype=float)
    s = np.asarray(s, dtype=float)
    down = lam * (1.0 - p) + (lam * p) * g[1:] / s[..., None]
    return np.log(mu * a)[..., None] - np.log(down)


def _mixture_moments(a, s, lam, mu, p, g, caps, fracs):
    """Mean count m1 and refreshed normalizer sum(g y) for the class mixture.

    a, s may be vectors (solver grids); conditionals are built per class in
    log space and mixed with the class fractions.
    """
    logrho = _log_rho(a, s, lam, mu, p, g)
    a = np.asarray(a, dtype=float)
    base = np.zeros(a.shape + (1,))
    logw_full = np.concatenate((base, np.cumsum(logrho, axis=-1)), axis=-1)
    m1 = np.zeros_like(a, dtype=float)
    s_new = np.zeros_like(a, dtype=float)
    for k, q in zip(caps, fracs):
        logw = logw_full[..., : k + 1]
        y = np.exp(logw - _logsumexp(logw, axis=-1)[..., None])
        y = y / y.sum(axis=-1, keepdims=True)
        m1 = m1 + q * (y * np.arange(k + 1)).sum(axis=-1)
        s_new = s_new + q * (y * g[: k + 1]).sum(axis=-1)
    return m1, s_new


def _conditionals(a, s, lam, mu, p, g, caps):
    """Per-class conditional equilibria for scalar (a, s)."""
    logrho = _log_rho(float(a), float(s), lam, mu, p, g)
    logw_full = np.concatenate(([0.0], np.cumsum(logrho)))
    conds = []
    for k in caps:
        logw = logw_full[: k + 1]
        y = np.exp(logw - _logsumexp(logw))
        conds.append(y / y.sum())
    return conds


def _solve_a_for_s(s, gamma, lam, mu, p, g, caps, fracs, iters=80):
    """Unique a in (0, gamma] with a = gamma - m1(a, s), vectorized over s.

    m1 is strictly increasing in a (larger up/down ratios shift every class
    conditional stochastically upward), so H(a) = a - gamma + m1(a, s) is
    strictly increasing and bisection cannot miss.
    """
    s = np.asarray(s, dtype=float)
    lo = np.full(s.shape, 1e-300)
    hi = np.full(s.shape, gamma)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        m1, _ = _mixture_moments(mid, s, lam, mu, p, g, caps, fracs)
        high = mid - gamma + m1 > 0.0
        hi = np.where(high, mid, hi)
        lo = np.where(high, lo, mid)
    return 0.5 * (lo + hi)


def _assemble(a, s, params, caps, fracs, g):
    """Candidate measure for scalar (a, s) plus its true drift residual."""
    lam = float(params.arrival.rate)
    conds = _conditionals(a, s, lam, params.mu, params.p, g, caps)
    if len(caps) == 1:
        y = fracs[0] * conds[0]
        residual = float(np.max(np.abs(drift(y, params))))
        return conds, residual
    ym = HeterogeneousMeasure.from_conditionals(caps, fracs, conds)
    residual = float(np.max(np.abs(drift_hetero(ym, params))))
    return conds, residual


def _solve_scalar_pair(params: SystemParams):
    """Find (a, s) closing both consistency equations.

    Damped fixed-point iteration first (fast when the informed feedback is
    mild), then a continuation fallback: for every s the inner a is unique
    and monotone, so the problem reduces to a 1-D root scan of
    phi(s) = sum(g y(a(s), s)) - s over a log grid of admissible s.
    Candidates only count once the assembled measure passes the drift
    residual gate. Returns (a, s, conditionals, residual, work counter).
    """
    lam = _require_constant(params)
    caps, fracs, g = _class_structure(params)
    gamma, mu, p = params.gamma, params.mu, params.p
    g_lo, g_hi = float(g.min()), float(g.max())
    evals = 0

    def moments(a, s):
        return _mixture_moments(a, s, lam, mu, p, g, caps, fracs)

    def a_for(s):
        return float(
            _solve_a_for_s(np.array([s]), gamma, lam, mu, p, g, caps, fracs)[0]
        )

    flat = g_hi - g_lo <= 1e-12 * max(g_hi, 1.0)
    if flat or p == 0.0:
        # flat weights or uninformed users: rho does not couple back to s,
        # so one inner solve settles a and s is read off the measure
        s_probe = g_hi
        a = a_for(s_probe)
        _, s_val = moments(np.array([a]), np.array([s_probe]))
        s = s_probe if flat else float(s_val[0])
        conds, residual = _assemble(a, s, params, caps, fracs, g)
        if residual > RESIDUAL_TOL:
            raise ConvergenceError(
                f"equilibrium solver did not converge; best residual {residual:.3e}"
            )
        return a, s, conds, residual, 81

    # damped fixed-point on (a, s)
    a = 0.5 * gamma
    _, s_uniform = moments(np.array([a]), np.array([g_hi]))
    s = float(max(s_uniform[0], 1e-300))
    converged = False
    for _ in range(MAX_DAMPED_ITER):
        m1, s_new = moments(np.array([a]), np.array([s]))
        a_t = min(max(gamma - float(m1[0]), 1e-15 * gamma), gamma)
        s_t = min(max(float(s_new[0]), 1e-300), g_hi)
        da, ds = a_t - a, s_t - s
        a += DAMPING * da
        s += DAMPING * ds
        evals += 1
        if abs(da) <= 1e-14 * max(a, 1e-300) and abs(ds) <= 1e-14 * s:
            converged = True
            break
    if converged:
        conds, residual = _assemble(a, s, params, caps, fracs, g)
        if residual <= RESIDUAL_TOL:
            return a, s, conds, residual, evals

    # continuation scan: phi is continuous in s because the inner root is
    # unique, so equilibria are brackets of a sign change
    lo = max(g_lo * (1.0 - 1e-12), g_hi * 1e-40)
    if lo <= 0.0:
        lo = g_hi * 1e-40
    decades = max(np.log10(g_hi / lo), 1.0)
    n_pts = int(min(max(48 * decades, 400), 4000))
    s_grid = np.geomspace(lo, g_hi, n_pts)
    a_grid = _solve_a_for_s(s_grid, gamma, lam, mu, p, g, caps, fracs)
    _, s_out = moments(a_grid, s_grid)
    phi = s_out - s_grid
    evals += n_pts

    roots = []
    for i in range(n_pts - 1):
        if phi[i] == 0.0:
            roots.append(float(s_grid[i]))
        elif phi[i] * phi[i + 1] < 0.0:
            lo_s, hi_s = float(s_grid[i]), float(s_grid[i + 1])
            for _ in range(100):
                mid = float(np.sqrt(lo_s * hi_s))
                a_mid = a_for(mid)
                _, s_mid = moments(np.array([a_mid]), np.array([mid]))
                if (float(s_mid[0]) - mid) * phi[i] > 0.0:
                    lo_s = mid
                else:
                    hi_s = mid
            roots.append(float(np.sqrt(lo_s * hi_s)))
            evals += 100
    if phi[-1] == 0.0:
        roots.append(float(s_grid[-1]))

    best = (None, None, np.inf)
    for s_root in roots:
        a_root = a_for(s_root)
        conds, residual = _assemble(a_root, s_root, params, caps, fracs, g)
        if residual < best[2]:
            best = ((a_root, s_root), conds, residual)
    if best[0] is None or best[2] > RESIDUAL_TOL:
        raise ConvergenceError(
            f"equilibrium solver did not converge; best residual {best[2]:.3e}"
        )
    (a_root, s_root), conds, residual = best
    return a_root, s_root, conds, residual, evals


def solve_equilibrium(params: SystemParams) -> EquilibriumResult:
    """Equilibrium of the uniform-capacity mean-field ODE.

    Returns the measure, the birth-death ratios rho, the reduced scalars
    (a, s), the drift residual, and a work counter.
    """
    if not params.is_uniform:
        raise ValidationError(
            "solve_equilibrium needs a uniform capacity; "
            "use solve_equilibrium_hetero for capacity mixes"
        )
    lam = _require_constant(params)
    a, s, conds, residual, evals = _solve_scalar_pair(params)
    _, _, g = _class_structure(params)
    y = conds[0]
    rho = np.exp(_log_rho(a, s, lam, params.mu, params.p, g))
    return EquilibriumResult(
        y_bar=y, rho=rho, a=float(a), s=float(s),
        residual=residual, iterations=evals,
    )


def solve_equilibrium_hetero(params: SystemParams):
    """Equilibrium of the heterogeneous system and its fill-ratio histogram.

    Per-class conditionals share the global scalars (a, s); the second
    return value is the equilibrium ratio histogram.
    """
    _require_constant(params)
    caps, fracs, _ = _class_structure(params)
    a, s, conds, residual, evals = _solve_scalar_pair(params)
    ym = HeterogeneousMeasure.from_conditionals(caps, fracs, conds)
    return ym, ratio_projection(ym)


def entropy(y) -> float:
    """Shannon entropy -sum(y log y) in nats, with 0 log 0 = 0."""
    y = np.asarray(y, dtype=float)
    if y.min() < -1e-9 or abs(y.sum() - 1.0) > 1e-6:
        raise ValidationError("entropy needs a probability vector")
    pos = y[y > 0.0]
    return float(-(pos * np.log(pos)).sum())


def _reference_measure(y, params: SystemParams):
    """nu_{rho(y)}: birth-death measure built from the rates frozen at y."""
    lam = _require_constant(params)
    k = params.uniform_capacity
    y = np.asarray(y, dtype=float)
    if y.shape != (k + 1,):
        raise ValidationError(f"measure must have length {k + 1}, got {y.shape}")
    if y.min() <= 0.0:
        raise ValidationError("boundary measure: reference needs interior y")
    g = choice_weight(params.choice, np.arange(k + 1))
    a = params.gamma - float(np.arange(k + 1) @ y)
    if a <= 0.0:
        raise ValidationError(
            "docked mean exceeds gamma; reference birth-death chain undefined"
        )
    s = float(g @ y)
    p = params.p
    if p > 0.0 and s <= TINY_DENOM:
        p = 0.0
    rho = np.exp(_log_rho(a, s if s > TINY_DENOM else 1.0, lam, params.mu, p, g))
    return birth_death_stationary(rho), rho, a, s


def relative_entropy(y, params: SystemParams) -> float:
    """h(y) = sum y_n log(y_n / nu_n) against the frozen-rate reference.

    Zero exactly at the equilibrium, positive elsewhere (Gibbs inequality).
    """
    nu, _, _, _ = _reference_measure(y, params)
    y = np.asarray(y, dtype=float)
    return float((y * (np.log(y) - np.log(nu))).sum())


def lyapunov_derivative(y, params: SystemParams) -> float:
    """Entropy-production rate of the relative entropy along the flow.

    Dirichlet form over the birth-death edges: with f = y/nu and edge flux
    q_k = nu_k * mu * a(y),

        sum_k -q_k (f_{k+1} - f_k)(log f_{k+1} - log f_k) <= 0,

    vanishing iff f is constant, i.e. y is the equilibrium.
    """
    nu, _, a, _ = _reference_measure(y, params)
    y = np.asarray(y, dtype=float)
    f = y / nu
    logf = np.log(f)
    q = nu[:-1] * (params.mu * a)
    return float(-(q * np.diff(f) * np.diff(logf)).sum())
