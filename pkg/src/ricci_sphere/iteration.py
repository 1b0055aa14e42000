"""The time-tau Ricci iteration driver on the two-sphere.

Each step solves, for the log conformal factor u_k of the next metric
against a fixed base metric omega (area 4 pi):

    (tau/2) Delta_omega u_k - (1 - tau) e^{u_k} + e^{u_{k-1}}
        - (tau/2) R_omega = 0,

which at tau = 1 reduces to the Poisson step
Delta_omega u_k = R_omega - 2 e^{u_{k-1}} with the area normalization
fixing the additive constant.  The equivalent potential-level recursion

    1 + (1/2) Delta_omega psi_{k+1}
        = e^{f_omega - psi_k / tau - (1 - 1/tau) psi_{k+1}}

is implemented alongside as a consistency check between the two pictures.
"""

import numpy as np
from dataclasses import dataclass, field as dc_field

from . import functionals as fn
from . import gauge
from . import geometry as geo
from . import spectral as sp
from .errors import (MonotonicityViolation, NewtonDivergence,
                     PositivityViolation)
from .spectral import FOUR_PI, Field

DING_SLACK = 1e-9            # monotonicity tolerance along a run


@dataclass
class IterationConfig:
    tau: float = 1.0
    max_steps: int = 100
    stop_tol: float = 1e-9       # sup-norm Cauchy threshold on gauge-fixed u
    newton_tol: float = 1e-11
    newton_max: int = 30
    formulation: str = "conformal"   # conformal | potential | both
    gauge_every: int = 1
    solver: sp.SolverConfig = dc_field(default_factory=sp.SolverConfig)
    check_monotonicity: bool = True

    def __post_init__(self):
        if not (0.0 < self.tau <= 1.0):
            raise ValueError("tau must lie in (0, 1]; larger steps are out of scope")
        if self.stop_tol <= 0 or self.newton_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.formulation not in ("conformal", "potential", "both"):
            raise ValueError(f"unknown formulation {self.formulation!r}")


@dataclass
class IterationState:
    """One sample of the iteration trajectory."""

    k: int
    metric: geo.ConformalMetric          # the iterate omega_k
    psi: geo.KahlerPotential             # potential against the run base
    psi_prime: geo.KahlerPotential       # AM-normalized representative
    energies: fn.EnergyRecord
    gauge: gauge.MobiusMap               # balancing map h_k
    balanced: geo.ConformalMetric        # h_k^* omega_k
    cross_error: float = 0.0             # picture mismatch (formulation=both)


def _area_unit(u_prev, m_base):
    return m_base.integrate(np.exp(u_prev.fine_values()))


def _to_field(vals_fine, grid):
    fine = grid.fine
    return Field(grid, coeffs=sp.truncate_coeffs(fine.analyze(vals_fine),
                                                 fine.L_max, grid.L_max))


def step_tau1(u_prev, m_base, config=sp.DEFAULT_SOLVER):
    """One Ricci-iteration step: solve Delta_omega u = R_omega - 2 e^{u_prev},
    then fix the additive constant by the area normalization."""
    grid = m_base.grid
    area = _area_unit(u_prev, m_base)
    if abs(area - FOUR_PI) > 1e-9 * FOUR_PI:
        raise ValueError(
            f"previous iterate drifted off the area normalization: "
            f"{area:.12e} vs {FOUR_PI:.12e}")
    rhs_vals = geo.scalar_curvature_values(m_base) - 2.0 * np.exp(u_prev.fine_values())
    u = sp.solve_poisson(_to_field(rhs_vals, grid), m_base, config)
    return u - np.log(_area_unit(u, m_base) / FOUR_PI)


def _step_residual_values(u, u_prev, m_base, tau):
    lap = sp._laplacian_grid_values(u.coeffs, m_base)
    return (0.5 * tau * lap
            - (1.0 - tau) * np.exp(u.fine_values())
            + np.exp(u_prev.fine_values())
            - 0.5 * tau * geo.scalar_curvature_values(m_base))


def step_tau(u_prev, cfg, m_base):
    """One time-tau step in the conformal picture; Newton with damping.

    tau = 1 delegates to the linear Poisson step.
    """
    tau = cfg.tau
    if tau == 1.0:
        return step_tau1(u_prev, m_base, cfg.solver)
    grid = m_base.grid
    u = u_prev
    res_vals = _step_residual_values(u, u_prev, m_base, tau)
    res = float(np.max(np.abs(res_vals)))
    for _ in range(cfg.newton_max):
        if res < cfg.newton_tol:
            # the equation fixes the additive constant only to Newton
            # tolerance; re-impose the exact area normalization so the
            # drift cannot compound across steps
            return u - np.log(_area_unit(u, m_base) / FOUR_PI)
        c_vals = (2.0 * (1.0 - tau) / tau) * np.exp(u.fine_values())
        c_field = _to_field(c_vals, grid)
        rhs = _to_field(-(2.0 / tau) * res_vals, grid)
        delta = sp.solve_helmholtz_like(c_field, rhs, m_base, cfg.solver)
        lam = 1.0
        for _ in range(10):
            u_try = u + lam * delta
            try_vals = _step_residual_values(u_try, u_prev, m_base, tau)
            try_res = float(np.max(np.abs(try_vals)))
            if try_res < res:
                break
            lam *= 0.5
        else:
            raise NewtonDivergence(
                f"damping exhausted at residual {res:.3e}")
        u, res_vals, res = u_try, try_vals, try_res
    if res < cfg.newton_tol:
        return u - np.log(_area_unit(u, m_base) / FOUR_PI)
    raise NewtonDivergence(
        f"Newton stalled at residual {res:.3e} after {cfg.newton_max} steps "
        f"(tol {cfg.newton_tol:.1e})")


def _potential_rhs_exponent(f_vals, psi_prev_vals, psi_vals, tau):
    return f_vals - psi_prev_vals / tau - (1.0 - 1.0 / tau) * psi_vals


def step_potential(psi_prev, cfg):
    """One time-tau step in the potential picture.

    At tau = 1 the previous potential is first shifted to the natural
    normalization, after which the step is a single Poisson solve; for
    tau < 1 a damped Newton iteration with positivity retries is used.
    """
    base = psi_prev.base
    grid = base.grid
    tau = cfg.tau
    f = geo.ricci_potential(base, cfg.solver)
    f_vals = f.fine_values()

    if tau == 1.0:
        shift = fn._log_mean_exp(f_vals - psi_prev.psi.fine_values(), base)
        prev = psi_prev.psi + shift
        rhs_vals = 2.0 * (np.exp(f_vals - prev.fine_values()) - 1.0)
        psi = sp.solve_poisson(_to_field(rhs_vals, grid), base, cfg.solver)
        return geo.KahlerPotential(psi, base)

    # the additive constant of psi_prev is pure gauge for the metric but is
    # amplified by 1/(1-tau) per step; pin it to AM = 0 before stepping
    psi_prev = psi_prev.am_normalized()
    psi = psi_prev.psi
    prev_vals = psi_prev.psi.fine_values()

    def residual(pv):
        lap = sp._laplacian_grid_values(pv.coeffs, base)
        expo = _potential_rhs_exponent(f_vals, prev_vals, pv.fine_values(), tau)
        return 1.0 + 0.5 * lap - np.exp(expo)

    res_vals = residual(psi)
    res = float(np.max(np.abs(res_vals)))
    for _ in range(cfg.newton_max):
        if res < cfg.newton_tol:
            break
        expo = _potential_rhs_exponent(f_vals, prev_vals, psi.fine_values(), tau)
        c_vals = 2.0 * (1.0 / tau - 1.0) * np.exp(expo)
        delta = sp.solve_helmholtz_like(_to_field(c_vals, grid),
                                        _to_field(-2.0 * res_vals, grid),
                                        base, cfg.solver)
        lam = 1.0
        for _ in range(10):
            psi_try = psi + lam * delta
            try_pot = geo.KahlerPotential(psi_try, base, check_positivity=False)
            if float(np.min(try_pot.relative_density())) <= 0.0:
                lam *= 0.5       # stay inside the Kahler cone
                continue
            try_vals = residual(psi_try)
            try_res = float(np.max(np.abs(try_vals)))
            if try_res < res:
                break
            lam *= 0.5
        else:
            raise PositivityViolation(
                "potential step left the Kahler cone and damping did not recover")
        psi, res_vals, res = psi_try, try_vals, try_res
    else:
        raise NewtonDivergence(
            f"potential Newton stalled at residual {res:.3e}")

    out = geo.KahlerPotential(psi, base)
    norm = base.integrate(np.exp(_potential_rhs_exponent(
        f_vals, prev_vals, out.psi.fine_values(), tau))) / base.V
    if abs(norm - 1.0) > 1e-9:
        raise NewtonDivergence(
            f"potential step normalization drifted: {norm - 1.0:.3e}")
    return out


@dataclass
class StepInequalityReport:
    ok: bool
    slack: float


def verify_step_inequality(prev, nxt, tol=DING_SLACK):
    """Ding/Mabuchi comparison across one step:
    E_{k+1} - f_mean <= (1/tau) D_k + (1 - 1/tau) D_{k+1}."""
    tau = nxt.energies.tau
    rhs = (1.0 / tau) * prev.energies.Ding \
        + (1.0 - 1.0 / tau) * nxt.energies.Ding
    lhs = nxt.energies.Mabuchi - nxt.energies.f_mean
    slack = rhs - lhs
    return StepInequalityReport(ok=slack >= -tol, slack=slack)


def _make_state(k, cfg, metric, psi, f_base, energy_base, do_gauge):
    if do_gauge:
        h, balanced = gauge.balance(metric)
    else:
        h, balanced = gauge.MobiusMap.identity(), metric
    psi_prime = psi.am_normalized()
    bal_psi_prime = geo.psi_from_u(balanced, energy_base)
    zero = geo.KahlerPotential(Field.zeros(energy_base.grid), energy_base,
                               check_positivity=False)
    bal_u = balanced.u
    rec = fn.EnergyRecord(
        k=k,
        tau=cfg.tau,
        AM=psi.am(),
        Ding=fn.ding(psi, f_base),
        Mabuchi=fn.mabuchi(psi, f_base),
        entropy=fn.entropy(psi, f_base),
        f_mean=fn.f_mean(psi.base, f_base),
        d1_proxy_to_KE=fn.d1_proxy(bal_psi_prime, zero),
        sup_u=float(np.max(bal_u.fine_values())),
        osc_u=float(np.max(bal_u.fine_values()) - np.min(bal_u.fine_values())),
    )
    return IterationState(k=k, metric=metric, psi=psi, psi_prime=psi_prime,
                          energies=rec, gauge=h, balanced=balanced)


def run(initial, cfg):
    """Run the iteration from a metric or potential until the gauge-fixed
    iterates are Cauchy at stop_tol, or max_steps is reached.

    Ding energies must be non-increasing along the run; a violation beyond
    tolerance aborts with MonotonicityViolation (it signals a solver bug).
    Returns the list of IterationState.
    """
    if isinstance(initial, geo.KahlerPotential):
        metric0 = geo.u_from_psi(initial)
    else:
        metric0 = initial
    grid = metric0.grid
    if abs(metric0.V - FOUR_PI) > 1e-9 * FOUR_PI:
        raise ValueError("run() works at the canonical area 4*pi; "
                         "rescale the class first (the CLI does this)")

    round_base = geo.round_metric(FOUR_PI, grid)
    f_round = Field.zeros(grid)
    conformal = cfg.formulation in ("conformal", "both")
    potential = cfg.formulation in ("potential", "both")

    # conformal picture runs against the round base (total log factor);
    # potential picture runs against the initial metric, its natural base
    u = metric0.u
    psi_pot = geo.KahlerPotential(Field.zeros(grid), metric0,
                                  check_positivity=False) if potential else None

    def metric_psi(k, u_cur, psi_cur):
        if conformal:
            metric = geo.ConformalMetric(grid, u_cur, normalize=False)
        else:
            metric = geo.u_from_psi(psi_cur)
        psi = geo.psi_from_u(metric, round_base, cfg.solver)
        return metric, psi

    metric, psi = metric_psi(0, u, psi_pot)
    do_gauge = cfg.gauge_every >= 1
    states = [_make_state(0, cfg, metric, psi, f_round, round_base, do_gauge)]
    cross_errors = []

    for k in range(1, cfg.max_steps + 1):
        if conformal:
            u = step_tau(u, cfg, round_base)
        if potential:
            psi_pot = step_potential(psi_pot, cfg)
        if cfg.formulation == "both":
            cross_errors.append(cross_formulation_error(u, psi_pot, metric0))

        do_gauge = cfg.gauge_every >= 1 and (k % cfg.gauge_every == 0)
        metric, psi = metric_psi(k, u, psi_pot)
        state = _make_state(k, cfg, metric, psi, f_round, round_base, do_gauge)
        if cross_errors:
            state.cross_error = cross_errors[-1]

        if cfg.check_monotonicity:
            dD = state.energies.Ding - states[-1].energies.Ding
            if dD > DING_SLACK:
                raise MonotonicityViolation(
                    f"Ding energy increased by {dD:.3e} at step {k}")
        prev_state = states[-1]
        states.append(state)
        incr = float(np.max(np.abs(state.balanced.u.fine_values()
                                   - prev_state.balanced.u.fine_values())))
        if do_gauge and incr < cfg.stop_tol:
            break
    return states


def cross_formulation_error(u, psi_pot, metric0):
    """Sup-norm mismatch of the two pictures' densities against the run base."""
    rho = psi_pot.relative_density()
    e_u = np.exp(u.fine_values() - metric0.u.fine_values())
    return float(np.max(np.abs(e_u - rho)))
