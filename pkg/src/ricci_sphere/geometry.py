"""Conformal metrics on S^2 in a fixed area class, and the two pictures.

A metric is stored as e^u * omega_round(V): the log conformal factor u
against the round metric of total area V.  The Kahler-potential picture
represents the same metric by psi with density 1 + (1/2) Delta_base psi
against a reference metric.  On the round sphere of area 4 pi the scalar
curvature is the constant 2 and Ric omega = omega, which pins the sign and
factor conventions used throughout.
"""

import numpy as np

from . import spectral as sp
from .errors import MalformedSnapshot, PositivityViolation
from .spectral import FOUR_PI, Field

EIGHT_PI = 8.0 * np.pi


class ConformalMetric:
    """e^u * omega_round(V) in the fixed area class.

    Construction re-imposes the area normalization by an additive shift
    of u, so area(metric) == V holds for every instance.
    """

    __slots__ = ("grid", "V", "u")

    def __init__(self, grid, u, V=FOUR_PI, normalize=True):
        if V <= 0.0:
            raise ValueError("total area V must be positive")
        self.grid = grid
        self.V = float(V)
        if normalize and np.any(u.coeffs):
            area_unit = grid.fine.integrate(np.exp(u.fine_values()))
            u = u - np.log(area_unit / FOUR_PI)
        self.u = u

    @property
    def is_round(self):
        return not np.any(self.u.coeffs)

    def area(self):
        """Total area; equals V by construction (to quadrature accuracy)."""
        return (self.V / FOUR_PI) * self.grid.fine.integrate(
            np.exp(self.u.fine_values()))

    def density(self):
        """Fine-grid density of dA_omega against the unit-sphere measure."""
        return sp.area_element(self)

    def integrate(self, fine_values):
        """Integral of fine-grid nodal values against dA_omega."""
        return sp.integrate_metric(fine_values, self)

    def gauss_bonnet_defect(self):
        """integral of R dA_omega minus 8 pi."""
        R = scalar_curvature_values(self)
        return self.integrate(R) - EIGHT_PI


def round_metric(V, grid):
    """The round metric of total area V; scalar curvature 8 pi / V."""
    return ConformalMetric(grid, Field.zeros(grid), V=V, normalize=False)


def scalar_curvature_values(m):
    """Fine-grid nodal values of the scalar curvature R_omega.

    Conformal relation: R_omega * e^u = R_round - Delta_round u, with
    R_round = 8 pi / V and Delta_round = (4 pi / V) * Delta_unit.
    """
    grid = m.grid
    if m.is_round:
        return np.full(grid.fine.shape, EIGHT_PI / m.V)
    lap_u = grid.fine.synthesize(
        grid.pad_coeffs((FOUR_PI / m.V) * grid.lap_eigs * m.u.coeffs,
                        grid.fine.L_max))
    return np.exp(-m.u.fine_values()) * (EIGHT_PI / m.V - lap_u)


def scalar_curvature(m):
    """Scalar curvature of a conformal metric, as a band-limited Field."""
    grid = m.grid
    vals = scalar_curvature_values(m)
    return Field(grid, coeffs=sp.truncate_coeffs(
        grid.fine.analyze(vals), grid.fine.L_max, grid.L_max))


def ricci_potential(m, config=sp.DEFAULT_SOLVER):
    """Ricci potential f with Delta_omega f = R_omega - 8 pi / V and
    (1/V) * integral e^f dA_omega = 1.

    Vanishes identically iff the metric is Kahler-Einstein; solvability is
    guaranteed by Gauss-Bonnet.
    """
    grid = m.grid
    if m.is_round:
        return Field.zeros(grid)
    rhs_vals = scalar_curvature_values(m) - EIGHT_PI / m.V
    rhs = Field(grid, coeffs=sp.truncate_coeffs(
        grid.fine.analyze(rhs_vals), grid.fine.L_max, grid.L_max))
    f = sp.solve_poisson(rhs, m, config)
    shift = np.log(m.integrate(np.exp(f.fine_values())) / m.V)
    return f - shift


class KahlerPotential:
    """A potential psi against a reference metric; density 1 + Delta psi / 2."""

    __slots__ = ("psi", "base", "_am")

    def __init__(self, psi, base, check_positivity=True):
        self.psi = psi
        self.base = base
        self._am = None
        if check_positivity:
            rho = self.relative_density()
            low = float(np.min(rho))
            if low <= 0.0:
                raise PositivityViolation(
                    f"1 + Delta psi / 2 has minimum {low:.3e}; "
                    "potential leaves the Kahler cone")

    def relative_density(self):
        """Fine-grid values of 1 + (1/2) Delta_base psi (d A_{omega_psi} / dA_base)."""
        return 1.0 + 0.5 * sp._laplacian_grid_values(self.psi.coeffs, self.base)

    def am(self):
        """Aubin-Mabuchi energy (n = 1): mean of psi against the average of
        the base and deformed volume forms.  AM(psi + c) = AM(psi) + c."""
        if self._am is None:
            psi_vals = self.psi.fine_values()
            rho = self.relative_density()
            self._am = 0.5 / self.base.V * (
                self.base.integrate(psi_vals) + self.base.integrate(psi_vals * rho))
        return self._am

    def shifted(self, c):
        return KahlerPotential(self.psi + float(c), self.base,
                               check_positivity=False)

    def am_normalized(self):
        """Representative with AM = 0."""
        return self.shifted(-self.am())


def u_from_psi(p):
    """Metric described by a potential: density (1 + Delta psi / 2) * e^{u_base}."""
    base = p.base
    grid = base.grid
    rho = p.relative_density()
    low = float(np.min(rho))
    if low <= 0.0:
        raise PositivityViolation(
            f"1 + Delta psi / 2 has minimum {low:.3e}")
    u_vals = np.log(rho)
    if not base.is_round:
        u_vals = u_vals + base.u.fine_values()
    u = Field(grid, coeffs=sp.truncate_coeffs(
        grid.fine.analyze(u_vals), grid.fine.L_max, grid.L_max))
    return ConformalMetric(grid, u, V=base.V)


def psi_from_u(m, base, config=sp.DEFAULT_SOLVER):
    """Potential of a metric against a reference, AM-normalized.

    Solves (1/2) Delta_base psi = e^{u - u_base} - 1, then shifts so AM = 0.
    """
    if m.grid is not base.grid:
        raise ValueError("metric and base must share a grid")
    if abs(m.V - base.V) > 1e-12 * base.V:
        raise ValueError("metric and base must share the total area V")
    grid = base.grid
    rel = np.exp(m.u.fine_values() - (0.0 if base.is_round else base.u.fine_values()))
    rhs = Field(grid, coeffs=sp.truncate_coeffs(
        grid.fine.analyze(2.0 * (rel - 1.0)), grid.fine.L_max, grid.L_max))
    psi = sp.solve_poisson(rhs, base, config)
    p = KahlerPotential(psi, base, check_positivity=False)
    return p.am_normalized()


# -- snapshot format --------------------------------------------------------

_MAGIC = "ricci-sphere snapshot v1"


def save_snapshot(path, coeffs, L_max, V, role):
    """Write a coefficient snapshot; decimal with 17 significant digits."""
    lines = [_MAGIC,
             f"l_max = {int(L_max)}",
             f"v = {format(float(V), '.17g')}",
             f"role = {role}"]
    for l in range(L_max + 1):
        for mm in range(-l, l + 1):
            c = coeffs[sp.coeff_index(l, mm)]
            lines.append(f"{l} {mm} {format(float(c), '.17g')}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_snapshot(path):
    """Read a snapshot; returns (coeffs, L_max, V, role)."""
    with open(path) as fh:
        raw = fh.read().splitlines()
    if not raw or raw[0].strip() != _MAGIC:
        raise MalformedSnapshot("missing snapshot magic line", line=1)

    def header(idx, key):
        if idx >= len(raw):
            raise MalformedSnapshot(f"missing header '{key}'", line=idx + 1)
        parts = raw[idx].split("=", 1)
        if len(parts) != 2 or parts[0].strip() != key:
            raise MalformedSnapshot(f"expected header '{key}'", line=idx + 1)
        return parts[1].strip()

    try:
        L_max = int(header(1, "l_max"))
        V = float(header(2, "v"))
    except ValueError as exc:
        raise MalformedSnapshot(str(exc), line=2) from exc
    role = header(3, "role")
    coeffs = np.zeros(sp.n_coeffs(L_max))
    seen = 0
    for i, line in enumerate(raw[4:], start=5):
        if not line.strip():
            continue
        parts = line.split()
        try:
            l, mm, c = int(parts[0]), int(parts[1]), float(parts[2])
        except (IndexError, ValueError) as exc:
            raise MalformedSnapshot(f"bad coefficient triple: {line!r}",
                                    line=i) from exc
        if not (0 <= l <= L_max and -l <= mm <= l):
            raise MalformedSnapshot(f"(l, m) out of range: ({l}, {mm})", line=i)
        coeffs[sp.coeff_index(l, mm)] = c
        seen += 1
    if seen != sp.n_coeffs(L_max):
        raise MalformedSnapshot(
            f"expected {sp.n_coeffs(L_max)} coefficients, found {seen}",
            line=len(raw))
    return coeffs, L_max, V, role


def save_metric(path, m):
    save_snapshot(path, m.u.coeffs, m.grid.L_max, m.V, "u")


def load_metric(path, grid=None):
    coeffs, L_max, V, role = load_snapshot(path)
    if role != "u":
        raise MalformedSnapshot(f"expected role 'u', found {role!r}", line=4)
    if grid is None:
        grid = sp.make_grid(L_max)
    elif grid.L_max != L_max:
        raise ValueError("snapshot band limit does not match the grid")
    return ConformalMetric(grid, Field.from_coeffs(grid, coeffs), V=V,
                           normalize=False)
