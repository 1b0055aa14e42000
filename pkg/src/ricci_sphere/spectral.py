"""Spherical-harmonic spectral substrate on the unit sphere.

Real, fully normalized spherical harmonics on a Gauss-Legendre (colatitude)
x uniform (longitude) grid.  Coefficients live in a flat (l, m) triangle of
length (L_max+1)^2 with index l^2 + l + m; m > 0 are the sqrt(2)*cos(m*phi)
harmonics, m < 0 the sqrt(2)*sin(|m|*phi) ones.

Sign convention: Laplacian = div grad, so Delta Y_lm = -l(l+1) Y_lm on the
unit round sphere.  A metric e^u * omega_round(V) has
Delta_omega = e^{-u} * (4 pi / V) * Delta_unit.
"""

from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import LinearOperator, gmres

from .errors import NonConvergence, SolvabilityViolation

FOUR_PI = 4.0 * np.pi
Y00 = 1.0 / np.sqrt(FOUR_PI)


@dataclass(frozen=True)
class SolverConfig:
    """Centralized tolerances for the elliptic solvers."""

    tol_solvability: float = 1e-10   # relative: scaled by ||rhs||_inf * V
    residual_tol: float = 1e-10      # sup-norm residual of the solved PDE
    max_inner: int = 200             # inner iterations (Richardson / Krylov)
    gmres_rtol: float = 1e-13


DEFAULT_SOLVER = SolverConfig()


def n_coeffs(L):
    return (L + 1) * (L + 1)


def coeff_index(l, m):
    """Flat index of (l, m) in the coefficient triangle."""
    return l * l + l + m


def degree_array(L):
    """Array of harmonic degrees l, aligned with the flat coefficient layout."""
    out = np.empty(n_coeffs(L), dtype=int)
    for l in range(L + 1):
        out[l * l:(l + 1) * (l + 1)] = l
    return out


def _tri_index(L, l, m):
    # column index in the 0 <= m <= l half-triangle tables, (m, l) ordered
    return m * (L + 1) - (m * (m - 1)) // 2 + (l - m)


def assoc_legendre_table(L, x):
    """Orthonormal associated Legendre values at points x = cos(theta).

    Returns shape (len(x), (L+1)(L+2)/2), columns ordered by m then l.
    Normalization: the real harmonics built from these columns integrate
    to 1 in L^2(S^2).  No Condon-Shortley phase.
    """
    x = np.asarray(x, dtype=float)
    s = np.sqrt(np.maximum(0.0, 1.0 - x * x))
    ncol = (L + 1) * (L + 2) // 2
    P = np.empty(x.shape + (ncol,), dtype=float)
    P[..., 0] = Y00
    for m in range(1, L + 1):
        P[..., _tri_index(L, m, m)] = (
            np.sqrt((2.0 * m + 1.0) / (2.0 * m)) * s * P[..., _tri_index(L, m - 1, m - 1)]
        )
    for m in range(L + 1):
        if m + 1 <= L:
            P[..., _tri_index(L, m + 1, m)] = (
                np.sqrt(2.0 * m + 3.0) * x * P[..., _tri_index(L, m, m)]
            )
        for l in range(m + 2, L + 1):
            a = np.sqrt((4.0 * l * l - 1.0) / (l * l - m * m))
            b = np.sqrt(((l - 1.0) ** 2 - m * m) / (4.0 * (l - 1.0) ** 2 - 1.0))
            P[..., _tri_index(L, l, m)] = a * (
                x * P[..., _tri_index(L, l - 1, m)] - b * P[..., _tri_index(L, l - 2, m)]
            )
    return P


class SphereGrid:
    """Gauss-Legendre x uniform-longitude quadrature grid with transform plans.

    n_lat defaults to L_max + 1 (exact for products of harmonics up to total
    degree 2 L_max), n_lon to 2 L_max + 1.  A companion `fine` grid with twice
    the band limit backs dealiased products.
    """

    def __init__(self, L_max, n_lat=None, n_lon=None):
        if L_max < 4:
            raise ValueError("L_max must be >= 4 (degree-2 curvature content)")
        self.L_max = int(L_max)
        self.n_lat = int(n_lat) if n_lat is not None else self.L_max + 1
        self.n_lon = int(n_lon) if n_lon is not None else 2 * self.L_max + 1
        if self.n_lat < self.L_max + 1:
            raise ValueError("n_lat must be >= L_max + 1")
        if self.n_lon < 2 * self.L_max + 1:
            raise ValueError("n_lon must be >= 2*L_max + 1")

        x, w = np.polynomial.legendre.leggauss(self.n_lat)
        order = np.argsort(-x)          # colatitude increasing from north pole
        self.x = x[order]
        self.w = w[order]               # integrates dx on [-1, 1]
        self.theta = np.arccos(self.x)
        self.phi = 2.0 * np.pi * np.arange(self.n_lon) / self.n_lon
        self.lon_weight = 2.0 * np.pi / self.n_lon

        self._P = assoc_legendre_table(self.L_max, self.x)   # (n_lat, tri)
        self._wP = self.w[:, None] * self._P
        self.degrees = degree_array(self.L_max)
        self.lap_eigs = -(self.degrees * (self.degrees + 1.0))
        self._fine = None

    # -- plumbing -----------------------------------------------------------

    @property
    def shape(self):
        return (self.n_lat, self.n_lon)

    @property
    def n_coeffs(self):
        return n_coeffs(self.L_max)

    @property
    def fine(self):
        """Companion grid with band limit 2*L_max, for dealiased products."""
        if self._fine is None:
            self._fine = SphereGrid(2 * self.L_max)
        return self._fine

    def unit_positions(self):
        """Unit-sphere positions of the nodes, shape (n_lat, n_lon, 3)."""
        st = np.sin(self.theta)[:, None]
        ct = np.cos(self.theta)[:, None]
        cp = np.cos(self.phi)[None, :]
        sp = np.sin(self.phi)[None, :]
        return np.stack([st * cp, st * sp, ct * np.ones_like(cp)], axis=-1)

    def integrate(self, values):
        """Integral over the unit sphere of nodal values."""
        return self.lon_weight * float(self.w @ np.sum(values, axis=1))

    # -- transforms ---------------------------------------------------------

    def analyze(self, values):
        """Nodal values -> real SH coefficients up to L_max."""
        L = self.L_max
        F = np.fft.rfft(values, axis=1)
        c = self.lon_weight * F.real     # (n_lat, n_lon//2+1)
        s = -self.lon_weight * F.imag
        coeffs = np.zeros(self.n_coeffs)
        for m in range(L + 1):
            lo = _tri_index(L, m, m)
            hi = _tri_index(L, L, m) + 1
            block = self._wP[:, lo:hi]            # (n_lat, L-m+1)
            ls = np.arange(m, L + 1)
            if m == 0:
                coeffs[coeff_index(ls, 0)] = block.T @ c[:, 0]
            else:
                rt2 = np.sqrt(2.0)
                coeffs[coeff_index(ls, m)] = rt2 * (block.T @ c[:, m])
                coeffs[coeff_index(ls, -m)] = rt2 * (block.T @ s[:, m])
        return coeffs

    def synthesize(self, coeffs):
        """Real SH coefficients -> nodal values."""
        L = self.L_max
        H = np.zeros((self.n_lat, self.n_lon // 2 + 1), dtype=complex)
        for m in range(L + 1):
            lo = _tri_index(L, m, m)
            hi = _tri_index(L, L, m) + 1
            block = self._P[:, lo:hi]
            ls = np.arange(m, L + 1)
            if m == 0:
                H[:, 0] = self.n_lon * (block @ coeffs[coeff_index(ls, 0)])
            else:
                rt2 = np.sqrt(2.0)
                A = rt2 * (block @ coeffs[coeff_index(ls, m)])
                B = rt2 * (block @ coeffs[coeff_index(ls, -m)])
                H[:, m] = 0.5 * self.n_lon * (A - 1j * B)
        return np.fft.irfft(H, n=self.n_lon, axis=1)

    def pad_coeffs(self, coeffs, L_to):
        """Embed coefficients into the triangle of a larger band limit.

        The flat layout is prefix-compatible across band limits.
        """
        out = np.zeros(n_coeffs(L_to))
        out[: self.n_coeffs] = coeffs
        return out


def truncate_coeffs(coeffs, L_from, L_to):
    """Drop coefficients above band limit L_to."""
    if L_to > L_from:
        raise ValueError("truncate_coeffs requires L_to <= L_from")
    return coeffs[: n_coeffs(L_to)].copy()


def evaluate(coeffs, L, theta, phi):
    """Evaluate a coefficient vector at arbitrary (theta, phi) points."""
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    P = assoc_legendre_table(L, np.cos(theta).ravel())
    out = np.zeros(theta.size)
    phr = phi.ravel()
    for m in range(L + 1):
        lo = _tri_index(L, m, m)
        hi = _tri_index(L, L, m) + 1
        block = P[:, lo:hi]
        ls = np.arange(m, L + 1)
        if m == 0:
            out += block @ coeffs[coeff_index(ls, 0)]
        else:
            rt2 = np.sqrt(2.0)
            out += (rt2 * np.cos(m * phr)) * (block @ coeffs[coeff_index(ls, m)])
            out += (rt2 * np.sin(m * phr)) * (block @ coeffs[coeff_index(ls, -m)])
    return out.reshape(theta.shape)


class Field:
    """A real scalar function on the sphere, dual grid/spectral representation.

    Immutable after construction; the missing representation is computed
    lazily from the current one.
    """

    __slots__ = ("grid", "_values", "_coeffs")

    def __init__(self, grid, values=None, coeffs=None):
        if values is None and coeffs is None:
            raise ValueError("Field needs values or coeffs")
        self.grid = grid
        self._values = None if values is None else np.asarray(values, dtype=float)
        self._coeffs = None if coeffs is None else np.asarray(coeffs, dtype=float)
        if self._values is not None and self._values.shape != grid.shape:
            raise ValueError("values shape does not match grid")
        if self._coeffs is not None and self._coeffs.shape != (grid.n_coeffs,):
            raise ValueError("coeffs length does not match grid band limit")

    @classmethod
    def from_values(cls, grid, values):
        return cls(grid, values=values)

    @classmethod
    def from_coeffs(cls, grid, coeffs):
        return cls(grid, coeffs=coeffs)

    @classmethod
    def zeros(cls, grid):
        return cls(grid, coeffs=np.zeros(grid.n_coeffs))

    @classmethod
    def harmonic(cls, grid, l, m, amplitude=1.0):
        c = np.zeros(grid.n_coeffs)
        c[coeff_index(l, m)] = amplitude
        return cls(grid, coeffs=c)

    @property
    def values(self):
        if self._values is None:
            self._values = self.grid.synthesize(self._coeffs)
        return self._values

    @property
    def coeffs(self):
        if self._coeffs is None:
            self._coeffs = self.grid.analyze(self._values)
        return self._coeffs

    def fine_values(self):
        """Samples on the companion dealiasing grid."""
        fine = self.grid.fine
        return fine.synthesize(self.grid.pad_coeffs(self.coeffs, fine.L_max))

    def mean(self):
        """Average over the unit sphere (= (0,0) coefficient times Y00)."""
        return float(self.coeffs[0]) * Y00

    def sup(self):
        return float(np.max(np.abs(self.fine_values())))

    def __add__(self, other):
        if isinstance(other, Field):
            return Field(self.grid, coeffs=self.coeffs + other.coeffs)
        c = self.coeffs.copy()
        c[0] += float(other) / Y00
        return Field(self.grid, coeffs=c)

    def __sub__(self, other):
        if isinstance(other, Field):
            return Field(self.grid, coeffs=self.coeffs - other.coeffs)
        return self.__add__(-float(other))

    def __mul__(self, scalar):
        return Field(self.grid, coeffs=self.coeffs * float(scalar))

    __rmul__ = __mul__

    def __neg__(self):
        return Field(self.grid, coeffs=-self.coeffs)


def make_grid(L_max, n_lat=None, n_lon=None):
    """Build a SphereGrid; rejects L_max < 4."""
    return SphereGrid(L_max, n_lat=n_lat, n_lon=n_lon)


def multiply(f, g):
    """Dealiased pointwise product of two band-limited fields."""
    grid = f.grid
    prod = f.fine_values() * g.fine_values()
    fine = grid.fine
    return Field(grid, coeffs=truncate_coeffs(fine.analyze(prod), fine.L_max, grid.L_max))


# -- metric-aware operators -------------------------------------------------
#
# The `metric` argument is any object with attributes grid (SphereGrid),
# V (total area) and u (Field, log conformal factor against the round
# metric of area V); geometry.ConformalMetric satisfies this contract.


def _metric_is_round(metric):
    return not np.any(metric.u.coeffs)


def laplacian(f, metric):
    """Laplace-Beltrami operator of e^u * omega_round(V) applied to f."""
    grid = metric.grid
    scale = FOUR_PI / metric.V
    lap_coeffs = scale * grid.lap_eigs * f.coeffs
    if _metric_is_round(metric):
        return Field(grid, coeffs=lap_coeffs)
    fine = grid.fine
    lap_vals = fine.synthesize(grid.pad_coeffs(lap_coeffs, fine.L_max))
    emu = np.exp(-metric.u.fine_values())
    return Field(grid, coeffs=truncate_coeffs(fine.analyze(emu * lap_vals),
                                              fine.L_max, grid.L_max))


def _laplacian_grid_values(coeffs, metric):
    """Fine-grid nodal values of Delta_omega applied to a coefficient vector."""
    grid = metric.grid
    fine = grid.fine
    scale = FOUR_PI / metric.V
    lap_vals = fine.synthesize(grid.pad_coeffs(scale * grid.lap_eigs * coeffs,
                                               fine.L_max))
    if _metric_is_round(metric):
        return lap_vals
    return np.exp(-metric.u.fine_values()) * lap_vals


def area_element(metric):
    """Fine-grid density of dA_omega against the unit-sphere measure."""
    base = metric.V / FOUR_PI
    if _metric_is_round(metric):
        return np.full(metric.grid.fine.shape, base)
    return base * np.exp(metric.u.fine_values())


def integrate_metric(values, metric):
    """Integral of fine-grid nodal values against dA_omega."""
    return metric.grid.fine.integrate(values * area_element(metric))


def solve_poisson(rhs, metric, config=DEFAULT_SOLVER):
    """Solve Delta_omega f = rhs with f of zero omega-mean.

    Round metrics invert diagonally in spectral space; conformal ones are
    solved by the exact conformal rescaling plus round-preconditioned
    Richardson refinement down to the sup-norm residual tolerance.
    """
    grid = metric.grid
    fine = grid.fine
    rhs_fine = rhs.fine_values()
    sup_rhs = float(np.max(np.abs(rhs_fine)))
    compat = integrate_metric(rhs_fine, metric)
    tol_compat = config.tol_solvability * max(sup_rhs, 1.0) * metric.V
    if abs(compat) > tol_compat:
        raise SolvabilityViolation(
            f"Poisson compatibility integral {compat:.3e} exceeds {tol_compat:.3e}"
        )

    scale = FOUR_PI / metric.V
    inv_eigs = np.zeros(grid.n_coeffs)
    inv_eigs[1:] = 1.0 / (scale * grid.lap_eigs[1:])

    if _metric_is_round(metric):
        c = rhs.coeffs.copy()
        c[0] = 0.0
        return Field(grid, coeffs=inv_eigs * c)

    eu = np.exp(metric.u.fine_values())
    sol = np.zeros(grid.n_coeffs)
    resid_vals = rhs_fine.copy()
    tol = config.residual_tol * max(sup_rhs, 1.0)
    for _ in range(config.max_inner):
        corr = inv_eigs * truncate_coeffs(fine.analyze(eu * resid_vals / scale),
                                          fine.L_max, grid.L_max) * scale
        # correction solves the round-rescaled problem exactly in-band
        sol = sol + corr
        resid_vals = rhs_fine - _laplacian_grid_values(sol, metric)
        if np.max(np.abs(resid_vals)) < tol:
            break
    else:
        raise NonConvergence(
            f"Poisson residual {np.max(np.abs(resid_vals)):.3e} after "
            f"{config.max_inner} inner iterations (tol {tol:.3e})"
        )
    f = Field(grid, coeffs=sol)
    shift = integrate_metric(f.fine_values(), metric) / metric.V
    return f - shift


def solve_helmholtz_like(c_field, rhs, metric, config=DEFAULT_SOLVER):
    """Solve (Delta_omega - c_field) f = rhs; requires c_field > 0 pointwise.

    Strictly negative definite, hence uniquely solvable with no mean
    constraint.  Galerkin system in coefficient space solved by GMRES with a
    diagonal round-operator preconditioner, then residual-checked on the grid.
    """
    grid = metric.grid
    fine = grid.fine
    c_vals = c_field.fine_values()
    c_min = float(np.min(c_vals))
    if c_min <= 0.0:
        raise ValueError(f"c_field must be strictly positive (min {c_min:.3e})")

    scale = FOUR_PI / metric.V
    dA = area_element(metric)

    def apply_op(coeffs):
        vals = fine.synthesize(grid.pad_coeffs(coeffs, fine.L_max))
        op_vals = _laplacian_grid_values(coeffs, metric) - c_vals * vals
        return truncate_coeffs(fine.analyze(op_vals * dA), fine.L_max, grid.L_max)

    def apply_precond(coeffs):
        c_mean = fine.integrate(c_vals * dA) / metric.V
        return coeffs / ((scale * grid.lap_eigs - c_mean) * metric.V / FOUR_PI)

    n = grid.n_coeffs
    A = LinearOperator((n, n), matvec=apply_op)
    M = LinearOperator((n, n), matvec=apply_precond)
    b = truncate_coeffs(fine.analyze(rhs.fine_values() * dA), fine.L_max, grid.L_max)
    sol, info = gmres(A, b, M=M, rtol=config.gmres_rtol, atol=0.0,
                      maxiter=config.max_inner)
    rhs_fine = rhs.fine_values()
    sup_rhs = float(np.max(np.abs(rhs_fine)))
    resid = np.max(np.abs(
        _laplacian_grid_values(sol, metric)
        - c_vals * fine.synthesize(grid.pad_coeffs(sol, fine.L_max))
        - rhs_fine
    ))
    tol = config.residual_tol * max(sup_rhs, 1.0)
    if info != 0 or resid > tol:
        raise NonConvergence(
            f"Helmholtz residual {resid:.3e} (tol {tol:.3e}, gmres info {info})"
        )
    return Field(grid, coeffs=sol)
