"""The automorphism group PSL(2, C) of the sphere: pullbacks of metrics and
potentials, center-of-mass balancing, and rotational alignment.

Chart convention: a point with colatitude theta and longitude phi has
normalized spinor (z1, z2) = (sin(theta/2) e^{i phi}, cos(theta/2)) and
stereographic coordinate z = z1 / z2 = tan(theta/2) e^{i phi}; a matrix
[[a, b], [c, d]] acts by z -> (a z + b) / (c z + d).  The pullback of the
round metric by h carries the log conformal factor
v_h = -2 log(|a z1 + b z2|^2 + |c z1 + d z2|^2).
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from . import spectral as sp
from .errors import BalanceDivergence
from .spectral import FOUR_PI, Field

# Pauli-like generators matched to the chart above: rotation about the unit
# axis n by angle t is exp(i t (n . SIGMA) / 2), dilation along n with
# strength s is exp(s (n . SIGMA) / 2).
SIGMA = np.array([
    [[0.0, -1.0], [-1.0, 0.0]],            # -sigma_x
    [[0.0, -1.0j], [1.0j, 0.0]],           # sigma_y
    [[1.0, 0.0], [0.0, -1.0]],             # sigma_z
], dtype=complex)


class ResamplingAccuracyWarning(UserWarning):
    """A pulled-back field has non-negligible energy beyond the band limit."""


def _expm_traceless(X):
    """Closed-form exponential of a traceless 2x2 complex matrix."""
    mu2 = X[0, 0] * X[0, 0] + X[0, 1] * X[1, 0]
    mu = np.sqrt(mu2 + 0j)
    if abs(mu) < 1e-8:
        sinhc = 1.0 + mu2 / 6.0
        cosh = 1.0 + mu2 / 2.0
    else:
        sinhc = np.sinh(mu) / mu
        cosh = np.cosh(mu)
    return cosh * np.eye(2, dtype=complex) + sinhc * X


class MobiusMap:
    """An element of PSL(2, C), stored as a determinant-1 matrix."""

    __slots__ = ("mat",)

    def __init__(self, mat):
        mat = np.asarray(mat, dtype=complex).reshape(2, 2)
        det = mat[0, 0] * mat[1, 1] - mat[0, 1] * mat[1, 0]
        if abs(det) < 1e-300:
            raise ValueError("singular matrix is not a Mobius transformation")
        self.mat = mat / np.sqrt(det)

    @classmethod
    def identity(cls):
        return cls(np.eye(2))

    @classmethod
    def rotation(cls, axis, angle):
        """Rigid rotation by `angle` about the unit vector `axis`."""
        n = np.asarray(axis, dtype=float)
        n = n / np.linalg.norm(n)
        X = 0.5j * angle * np.einsum("i,ijk->jk", n, SIGMA)
        return cls(_expm_traceless(X))

    @classmethod
    def dilation(cls, direction, strength):
        """Conformal dilation along the unit vector `direction`.

        Positive strength pushes mass away from `direction` (its fixed
        points are +-direction).
        """
        n = np.asarray(direction, dtype=float)
        nrm = np.linalg.norm(n)
        if nrm == 0.0:
            return cls.identity()
        X = (0.5 * strength / nrm) * np.einsum("i,ijk->jk", n, SIGMA)
        return cls(_expm_traceless(X))

    @classmethod
    def dilation_vector(cls, q):
        """Dilation along q / |q| with strength |q|; smooth chart around 0."""
        q = np.asarray(q, dtype=float)
        X = 0.5 * np.einsum("i,ijk->jk", q, SIGMA)
        return cls(_expm_traceless(X))

    @classmethod
    def from_params(cls, params):
        """Local 6-parameter chart exp: R^6 -> PSL(2, C) around the identity."""
        p = np.asarray(params, dtype=float)
        X = np.array([[p[0] + 1j * p[1], p[2] + 1j * p[3]],
                      [p[4] + 1j * p[5], -(p[0] + 1j * p[1])]])
        return cls(_expm_traceless(X))

    @classmethod
    def from_rotation_matrix(cls, R):
        """Lift a 3x3 rotation matrix to its Mobius representative."""
        from scipy.spatial.transform import Rotation
        rv = Rotation.from_matrix(R).as_rotvec()
        angle = float(np.linalg.norm(rv))
        if angle == 0.0:
            return cls.identity()
        return cls.rotation(rv / angle, angle)

    def compose(self, other):
        """self after other: (self . other)(z) = self(other(z))."""
        return MobiusMap(self.mat @ other.mat)

    def inverse(self):
        a, b, c, d = self.mat.ravel()
        return MobiusMap(np.array([[d, -b], [-c, a]]))

    def det(self):
        a, b, c, d = self.mat.ravel()
        return a * d - b * c

    def is_identity(self, tol=1e-12):
        m = self.mat if self.mat[0, 0].real >= 0 else -self.mat
        return bool(np.max(np.abs(m - np.eye(2))) < tol)

    def as_params8(self):
        """Serialization: re/im of a, b, c, d."""
        flat = self.mat.ravel()
        return [float(v) for pair in ((z.real, z.imag) for z in flat)
                for v in pair]

    @classmethod
    def from_params8(cls, vals):
        v = np.asarray(vals, dtype=float)
        return cls(np.array([[v[0] + 1j * v[1], v[2] + 1j * v[3]],
                             [v[4] + 1j * v[5], v[6] + 1j * v[7]]]))

    # -- action on points ---------------------------------------------------

    def _spinor_images(self, theta, phi):
        z1 = np.sin(0.5 * theta) * np.exp(1j * phi)
        z2 = np.cos(0.5 * theta).astype(complex)
        a, b, c, d = self.mat.ravel()
        return a * z1 + b * z2, c * z1 + d * z2

    def apply(self, theta, phi):
        """Map points (theta, phi) -> (theta', phi')."""
        w1, w2 = self._spinor_images(np.asarray(theta, float),
                                     np.asarray(phi, float))
        theta2 = 2.0 * np.arctan2(np.abs(w1), np.abs(w2))
        phi2 = np.angle(w1 * np.conj(w2))
        return theta2, phi2

    def log_factor(self, theta, phi):
        """v_h with h = self: log conformal factor of the round pullback."""
        w1, w2 = self._spinor_images(np.asarray(theta, float),
                                     np.asarray(phi, float))
        return -2.0 * np.log(np.abs(w1) ** 2 + np.abs(w2) ** 2)


def _positions_to_angles(pos):
    x, y, z = pos[..., 0], pos[..., 1], pos[..., 2]
    return np.arccos(np.clip(z, -1.0, 1.0)), np.arctan2(y, x)


def pullback_metric(h, m, warn_tol=1e-8):
    """Pull back e^u * omega_round(V) by h: new log factor u o h + v_h.

    Emits ResamplingAccuracyWarning when the pulled-back factor has
    significant energy beyond the band limit of the grid.
    """
    grid = m.grid
    th = np.broadcast_to(grid.theta[:, None], grid.shape)
    ph = np.broadcast_to(grid.phi[None, :], grid.shape)
    theta2, phi2 = h.apply(th, ph)
    vals = h.log_factor(th, ph)
    if not m.is_round:
        vals = vals + sp.evaluate(m.u.coeffs, grid.L_max, theta2, phi2)
    coeffs = grid.analyze(vals)
    mismatch = np.max(np.abs(grid.synthesize(coeffs) - vals))
    scale = max(1.0, float(np.max(np.abs(vals))))
    if mismatch > warn_tol * scale:
        warnings.warn(
            f"pullback resampling mismatch {mismatch:.3e} exceeds "
            f"{warn_tol:.0e} of the field scale; consider a larger L_max",
            ResamplingAccuracyWarning, stacklevel=2)
    return geo.ConformalMetric(grid, Field.from_coeffs(grid, coeffs), V=m.V)


def pullback_potential(h, p, warn_tol=1e-8):
    """Group action on AM-normalized potentials: h.psi = h.0 + psi o h."""
    base = p.base
    grid = base.grid
    h_zero = geo.psi_from_u(pullback_metric(h, base, warn_tol), base)
    th = np.broadcast_to(grid.theta[:, None], grid.shape)
    ph = np.broadcast_to(grid.phi[None, :], grid.shape)
    theta2, phi2 = h.apply(th, ph)
    comp_vals = sp.evaluate(p.psi.coeffs, grid.L_max, theta2, phi2)
    comp = Field.from_values(grid, comp_vals)
    out = geo.KahlerPotential(h_zero.psi + comp, base, check_positivity=False)
    return out.am_normalized()


def center_of_mass(m):
    """(1/V) integral of the unit-sphere position against dA_omega."""
    fine = m.grid.fine
    weights = m.density() * fine.lon_weight * fine.w[:, None]
    pos = fine.unit_positions()
    return np.einsum("ij,ijk->k", weights, pos) / m.V


def _center_after_dilation(m, q, weights, pos_angles):
    # center of (h_q)^* m without resampling: pull node positions through
    # h_q^{-1} and integrate against the fixed density of m
    h_inv = MobiusMap.dilation_vector(-np.asarray(q))
    theta2, phi2 = h_inv.apply(*pos_angles)
    st = np.sin(theta2)
    pos = np.stack([st * np.cos(phi2), st * np.sin(phi2), np.cos(theta2)],
                   axis=-1)
    return np.einsum("ij,ijk->k", weights, pos) / m.V


def balance(m, tol=1e-10, max_steps=100, fd_step=1e-6):
    """Gauge-fix a metric to zero center of mass.

    Damped Newton over the 3-parameter family of conformal dilations;
    deterministic given the metric.  Returns (h, h^* m).
    """
    fine = m.grid.fine
    weights = m.density() * fine.lon_weight * fine.w[:, None]
    th = np.broadcast_to(fine.theta[:, None], fine.shape)
    ph = np.broadcast_to(fine.phi[None, :], fine.shape)
    angles = (th, ph)

    q = np.zeros(3)
    c = _center_after_dilation(m, q, weights, angles)
    if np.linalg.norm(c) < tol:
        return MobiusMap.identity(), m
    for _ in range(max_steps):
        J = np.empty((3, 3))
        for j in range(3):
            dq = np.zeros(3)
            dq[j] = fd_step
            J[:, j] = (_center_after_dilation(m, q + dq, weights, angles) - c) / fd_step
        try:
            step = np.linalg.solve(J, -c)
        except np.linalg.LinAlgError as exc:
            raise BalanceDivergence(
                f"singular balancing Jacobian at |center| = "
                f"{np.linalg.norm(c):.3e}") from exc
        lam = 1.0
        for _ in range(30):
            c_new = _center_after_dilation(m, q + lam * step, weights, angles)
            if np.linalg.norm(c_new) < np.linalg.norm(c):
                break
            lam *= 0.5
        q = q + lam * step
        c = c_new
        if np.linalg.norm(c) < tol:
            h = MobiusMap.dilation_vector(q)
            return h, pullback_metric(h, m)
    raise BalanceDivergence(
        f"balancing stalled at |center| = {np.linalg.norm(c):.3e} "
        f"after {max_steps} Newton steps")


@dataclass
class AlignResult:
    """Best rotation found when matching two balanced metrics."""

    map: MobiusMap
    rotation_matrix: np.ndarray
    residual: float


def _rotation_objective(m_ref_vals, m_other, R, grid, quad_w):
    th, ph = _positions_to_angles(grid.unit_positions() @ R.T)
    vals = sp.evaluate(m_other.u.coeffs, grid.L_max, th, ph)
    return float(np.sqrt(np.sum(quad_w * (m_ref_vals - vals) ** 2)))


def align_rotation(a, b, coarse_angles=8, refine=True, n_refine=6):
    """Rotation minimizing the L^2 mismatch between the log factors of two
    balanced metrics: coarse Euler-grid search, then local simplex
    refinement of the several best coarse candidates (the landscape has
    competing basins, so polishing only the single best is fragile).

    Best-found is always returned (no failure mode).
    """
    from scipy.optimize import minimize
    from scipy.spatial.transform import Rotation

    grid = a.grid
    quad_w = grid.lon_weight * grid.w[:, None] * np.ones(grid.shape)
    ref_vals = a.u.values

    def J_mat(R):
        return _rotation_objective(ref_vals, b, R, grid, quad_w)

    candidates = [(J_mat(np.eye(3)), np.eye(3))]
    alphas = 2.0 * np.pi * np.arange(coarse_angles) / coarse_angles
    betas = np.arccos(np.linspace(1.0, -1.0, coarse_angles // 2 + 1))
    for al in alphas:
        for be in betas:
            for ga in alphas:
                R = Rotation.from_euler("zyz", [al, be, ga]).as_matrix()
                candidates.append((J_mat(R), R))
    candidates.sort(key=lambda t: t[0])
    best, best_R = candidates[0]

    if refine:
        def obj(rv):
            return J_mat(Rotation.from_rotvec(rv).as_matrix())

        for v0, R0 in candidates[:n_refine]:
            rv0 = Rotation.from_matrix(R0).as_rotvec()
            res = minimize(obj, rv0, method="Nelder-Mead",
                           options={"xatol": 1e-12, "fatol": 1e-16,
                                    "maxiter": 2000})
            if res.fun < best:
                best = float(res.fun)
                best_R = Rotation.from_rotvec(res.x).as_matrix()

    return AlignResult(map=MobiusMap.from_rotation_matrix(best_R),
                       rotation_matrix=best_R, residual=best)
