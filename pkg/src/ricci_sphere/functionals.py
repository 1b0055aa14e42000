"""Energy functionals on Kahler potentials: Aubin-Mabuchi, Ding, Mabuchi,
entropy, the L^1 Finsler norm and the mixed d_1 comparison functional.

All integrals against the deformed volume form use the density
1 + (1/2) Delta_base psi on the dealiased grid; conventions are fixed so
that Ding and Mabuchi both vanish at the round metric with round base.
"""

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .errors import PositivityViolation
from .spectral import Field

DENSITY_FLOOR = 1e-8       # relative density below this is a cone-boundary error
LOG_FLOOR = 1e-300         # numerical underflow guard inside logs

CSV_COLUMNS = ("k", "tau", "AM", "Ding", "Mabuchi", "entropy", "f_mean",
               "d1_proxy_to_KE", "sup_u", "osc_u")


@dataclass
class EnergyRecord:
    """One row of the per-step energy trace."""

    k: int
    tau: float
    AM: float
    Ding: float
    Mabuchi: float
    entropy: float
    f_mean: float
    d1_proxy_to_KE: float
    sup_u: float
    osc_u: float

    def to_csv_row(self):
        vals = [str(self.k)] + [format(float(getattr(self, c)), ".17g")
                                for c in CSV_COLUMNS[1:]]
        return ",".join(vals)


def _f_base(p, f_base):
    if f_base is None:
        return geo.ricci_potential(p.base)
    return f_base


def f_mean(base, f_base=None):
    """(1/V) integral of the Ricci potential of the base against its form."""
    if f_base is None:
        f_base = geo.ricci_potential(base)
    return base.integrate(f_base.fine_values()) / base.V


def am(p):
    """Aubin-Mabuchi energy; AM(psi + c) = AM(psi) + c."""
    return p.am()


def _log_mean_exp(vals, base):
    """log((1/V) integral e^{vals} dA_base), overflow-guarded."""
    M = float(np.max(vals))
    return M + np.log(base.integrate(np.exp(vals - M)) / base.V)


def ding(p, f_base=None):
    """Ding energy: -AM(psi) - log((1/V) integral e^{f - psi} dA_base).

    Invariant under psi -> psi + const; decreases along the Ricci iteration.
    """
    f = _f_base(p, f_base)
    expo = f.fine_values() - p.psi.fine_values()
    return -p.am() - _log_mean_exp(expo, p.base)


def _checked_density(p):
    rho = p.relative_density()
    if float(np.min(rho)) < DENSITY_FLOOR:
        raise PositivityViolation(
            f"volume density minimum {float(np.min(rho)):.3e} below floor "
            f"{DENSITY_FLOOR:.0e}")
    return rho


def mabuchi(p, f_base=None):
    """Mabuchi energy; constant-invariant, zero at the round metric with
    round base, and >= Ding + f_mean with equality exactly at Kahler-Einstein."""
    f = _f_base(p, f_base)
    base = p.base
    rho = _checked_density(p)
    psi_vals = p.psi.fine_values()
    f_vals = f.fine_values()
    log_term = base.integrate((np.log(np.maximum(rho, LOG_FLOOR)) - f_vals) * rho)
    lin_term = base.integrate(psi_vals * rho)
    fm = base.integrate(f_vals)
    return (log_term + lin_term + fm) / base.V - p.am()


def entropy(p, f_base=None):
    """Relative entropy of e^{f - psi} dA_base (mass-normalized to V)
    against the deformed volume form.  Nonnegative; zero iff they coincide."""
    f = _f_base(p, f_base)
    base = p.base
    rho = _checked_density(p)
    psi_vals = p.psi.fine_values()
    f_vals = f.fine_values()
    shift = _log_mean_exp(f_vals - psi_vals, base)   # makes the weight a prob. measure
    integrand = (np.log(np.maximum(rho, LOG_FLOOR)) - f_vals + psi_vals + shift) * rho
    return base.integrate(integrand) / base.V


def d1_norm(xi, p):
    """Weak Finsler norm: (1/V) integral |xi| against the deformed form."""
    rho = p.relative_density()
    xi_vals = xi.fine_values() if isinstance(xi, Field) else np.asarray(xi)
    return p.base.integrate(np.abs(xi_vals) * rho) / p.base.V


def d1_proxy(a, b):
    """Mixed comparison functional: integral of |psi_a - psi_b| against both
    deformed volume forms.  Symmetric, nonnegative, two-sided comparable to d_1."""
    if a.base is not b.base:
        raise ValueError("d1_proxy requires potentials over the same base")
    diff = np.abs(a.psi.fine_values() - b.psi.fine_values())
    return a.base.integrate(diff * a.relative_density()) + \
        a.base.integrate(diff * b.relative_density())


@dataclass
class D1GResult:
    """Outcome of the gauge-orbit distance search."""

    value: float
    start_value: float
    gauge: object          # MobiusMap sending b's orbit representative onto a
    stalled: bool


def d1g_proxy(a, b, stall_tol=1e-12, xatol=1e-10, fatol=1e-14, maxiter=2000):
    """Orbit distance proxy: local minimization of d1_proxy(a, g.b) over the
    six Mobius parameters, initialized from the balanced gauges of a and b.

    Returns a D1GResult; `stalled` flags a search that could not improve on
    its starting value (the result is still the best value found).
    """
    from scipy.optimize import minimize

    from . import gauge

    base = a.base
    m_a = geo.u_from_psi(a)
    m_b = geo.u_from_psi(b)
    h_a, _ = gauge.balance(m_a)
    h_b, _ = gauge.balance(m_b)
    g0 = h_b.compose(h_a.inverse())

    def objective(params):
        g = g0.compose(gauge.MobiusMap.from_params(params))
        try:
            gb = gauge.pullback_potential(g, b)
        except PositivityViolation:
            return np.inf
        return d1_proxy(a, gb)

    raw = d1_proxy(a, b)
    x0 = np.zeros(6)
    start = objective(x0)
    res = minimize(objective, x0, method="Nelder-Mead",
                   options={"xatol": xatol, "fatol": fatol, "maxiter": maxiter})
    best_params, best = (res.x, float(res.fun))
    if best > start:
        best_params, best = (x0, start)
    value = min(best, raw)
    gauge_map = g0.compose(gauge.MobiusMap.from_params(best_params))
    stalled = best > start - stall_tol and start > stall_tol
    return D1GResult(value=value, start_value=start, gauge=gauge_map,
                     stalled=stalled)
