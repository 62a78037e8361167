"""Map from normal-form coordinates ``(u1, u2, mu)`` to observed coordinates.

The map is the sum of a linear stretch/rotation, a rigid offset and a
correction network::

    z = L[:2] @ (u1, u2, mu~) + s + NN(u1, u2, mu~)

where ``mu~ = (mu - mu_ref) / mu_scale`` is a fixed affine rescaling of the
parameter (identity by default). The parameter itself passes through
unchanged, which is why the third row of ``L`` is frozen to ``(0, 0, 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MissingBranch, NoConvergence, SingularJacobian
from .neural_net import Mlp, mlp_init
from .normal_form import NormalFormParams, lco_radii, lco_radius
from .orbit_geometry import DEFAULT_ORBIT_POINTS, PlanarOrbit, equispaced_angles

INVERSE_TOL = 1e-10
INVERSE_MAX_ITER = 50
SINGULAR_DET = 1e-12
PHASE_TOL = 1e-10
PHASE_GRID = 64


@dataclass(frozen=True)
class LinearMap:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.shape != (3, 3):
            raise ValueError("linear map must be 3x3")
        if not np.array_equal(m[2], [0.0, 0.0, 1.0]):
            raise ValueError("third row of the linear map must be (0, 0, 1)")
        if not np.all(np.isfinite(m)):
            raise ValueError("linear map has non-finite entries")
        if abs(np.linalg.det(m[:2, :2])) <= 1e-10:
            raise ValueError("upper-left 2x2 block of the linear map is singular")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_rows(cls, rows):
        rows = np.asarray(rows, dtype=float).reshape(2, 3)
        return cls(np.vstack([rows, [0.0, 0.0, 1.0]]))

    @classmethod
    def identity(cls):
        return cls(np.eye(3))

    @property
    def rows(self) -> np.ndarray:
        return self.matrix[:2]

    @property
    def block(self) -> np.ndarray:
        return self.matrix[:2, :2]


@dataclass(frozen=True)
class TranslationOffset:
    s: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        s = np.array(self.s, dtype=float).reshape(2)
        if not np.all(np.isfinite(s)):
            raise ValueError("offset must be finite")
        s.setflags(write=False)
        object.__setattr__(self, "s", s)


# Feature layout for auxiliary regressions.
AUX_FEATURES = ("1", "u1", "u2", "mu", "u1^2", "u1*u2", "u2^2", "u1^3", "u1^2*u2", "u1*u2^2", "u2^3")


def aux_features(u1, u2, mu):
    u1, u2, mu = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (u1, u2, mu)))
    return np.stack([np.ones_like(u1), u1, u2, mu, u1**2, u1 * u2, u2**2,
                     u1**3, u1**2 * u2, u1 * u2**2, u2**3], axis=-1)


@dataclass(frozen=True)
class AuxiliaryMap:
    """Polynomial regression from ``(u1, u2, mu~)`` to one extra observed state."""

    column: int
    coefficients: np.ndarray
    ridge: float = 1e-8

    def __post_init__(self):
        c = np.array(self.coefficients, dtype=float).reshape(len(AUX_FEATURES))
        if not np.all(np.isfinite(c)):
            raise ValueError("auxiliary coefficients must be finite")
        object.__setattr__(self, "coefficients", c)

    def predict(self, u1, u2, mu_scaled):
        return aux_features(u1, u2, mu_scaled) @ self.coefficients


class CoordinateMap:
    def __init__(self, linear: LinearMap, offset: TranslationOffset, nn: Mlp,
                 mu_ref=0.0, mu_scale=1.0, aux=()):
        if nn.n_in != 3 or nn.n_out != 2:
            raise ValueError("correction network must have 3 inputs and 2 outputs")
        if not mu_scale > 0:
            raise ValueError("mu_scale must be positive")
        self.linear = linear
        self.offset = offset
        self.nn = nn
        self.mu_ref = float(mu_ref)
        self.mu_scale = float(mu_scale)
        self.aux = tuple(aux)

    @classmethod
    def initial(cls, hidden=(32, 32), seed=0, mu_ref=0.0, mu_scale=1.0):
        """Identity linear part, zero offset, zero-output correction network."""
        nn = mlp_init([3, *hidden, 2], seed, zero_output=True)
        return cls(LinearMap.identity(), TranslationOffset(), nn, mu_ref, mu_scale)

    def with_(self, **changes) -> "CoordinateMap":
        d = dict(linear=self.linear, offset=self.offset, nn=self.nn, mu_ref=self.mu_ref,
                 mu_scale=self.mu_scale, aux=self.aux)
        d.update(changes)
        return CoordinateMap(**d)

    def scale_mu(self, mu):
        return (np.asarray(mu, dtype=float) - self.mu_ref) / self.mu_scale

    def features(self, u1, u2, mu):
        u1, u2, mu = np.broadcast_arrays(*(np.atleast_1d(np.asarray(v, dtype=float)) for v in (u1, u2, mu)))
        return np.column_stack([u1.ravel(), u2.ravel(), self.scale_mu(mu.ravel())])

    def forward(self, u1, u2, mu):
        """Mapped points with shape ``(n, 2)``."""
        X = self.features(u1, u2, mu)
        return X @ self.linear.rows.T + self.offset.s + self.nn.forward(X)

    def forward_cache(self, X):
        nn_out, acts = self.nn.forward(X, cache=True)
        return X @ self.linear.rows.T + self.offset.s + nn_out, acts

    def vjp(self, X, acts, G):
        """Gradients of ``sum(G * forward(X))``.

        Returns ``(g_rows, g_offset, g_nn, g_features)`` with ``g_rows`` of
        shape ``(2, 3)`` and ``g_features`` of shape ``(n, 3)``.
        """
        g_nn, g_x = self.nn.backward(acts, G)
        return G.T @ X, G.sum(axis=0), g_nn, g_x + G @ self.linear.rows

    def jacobian(self, u1, u2, mu):
        X = self.features(u1, u2, mu)
        return self.linear.block + self.nn.input_jacobian(X)[:, :, :2]

    def aux_forward(self, u1, u2, mu):
        mu_s = self.scale_mu(np.broadcast_to(mu, np.shape(u1)))
        return np.column_stack([a.predict(u1, u2, mu_s) for a in self.aux]) if self.aux else None


def map_forward(cmap: CoordinateMap, u1, u2, mu):
    z = cmap.forward(u1, u2, mu)
    if np.ndim(u1) == 0 and np.ndim(u2) == 0 and np.ndim(mu) == 0:
        return float(z[0, 0]), float(z[0, 1])
    return z[:, 0], z[:, 1]


def map_jacobian(cmap: CoordinateMap, u1, u2, mu):
    J = cmap.jacobian(u1, u2, mu)
    return J[0] if np.ndim(u1) == 0 and np.ndim(u2) == 0 else J


def map_inverse(cmap: CoordinateMap, z1, z2, mu, guess=None):
    """Newton solve of ``forward(u1, u2, mu) = (z1, z2)``; vectorised over points."""
    scalar = np.ndim(z1) == 0 and np.ndim(z2) == 0
    Z = np.column_stack([np.atleast_1d(z1).astype(float), np.atleast_1d(z2).astype(float)])
    mu = np.broadcast_to(np.asarray(mu, dtype=float), (len(Z),)).copy()
    if guess is None:
        rhs = Z - cmap.offset.s - np.outer(cmap.scale_mu(mu), cmap.linear.rows[:, 2])
        U = np.linalg.solve(cmap.linear.block, rhs.T).T
    else:
        U = np.array(np.broadcast_to(np.asarray(guess, dtype=float), Z.shape))
    for it in range(INVERSE_MAX_ITER + 1):
        F = cmap.forward(U[:, 0], U[:, 1], mu) - Z
        err = np.max(np.abs(F), axis=1)
        if np.all(err < INVERSE_TOL):
            return (float(U[0, 0]), float(U[0, 1])) if scalar else (U[:, 0], U[:, 1])
        if it == INVERSE_MAX_ITER:
            break
        J = cmap.jacobian(U[:, 0], U[:, 1], mu)
        det = np.linalg.det(J)
        bad = np.flatnonzero(np.abs(det) < SINGULAR_DET)
        if bad.size:
            raise SingularJacobian(f"|det J| < {SINGULAR_DET:g} at sample {bad[0]} (iteration {it})")
        active = err >= INVERSE_TOL
        U[active] -= np.linalg.solve(J[active], F[active][..., None])[..., 0]
    worst = int(np.argmax(err))
    raise NoConvergence(f"map inverse did not converge in {INVERSE_MAX_ITER} iterations "
                        f"(sample {worst}, residual {err[worst]:.3e})")


def _required_radius(p: NormalFormParams, mu, stability):
    r = lco_radius(p, mu, stability)
    if r is None:
        raise MissingBranch(f"no {stability} normal-form orbit at mu={float(mu):g}")
    return r


def predicted_orbit(cmap: CoordinateMap, p: NormalFormParams, mu, stability,
                    n_points=DEFAULT_ORBIT_POINTS) -> PlanarOrbit:
    r = _required_radius(p, mu, stability)
    phi = equispaced_angles(n_points)
    return PlanarOrbit.from_points(cmap.forward(r * np.cos(phi), r * np.sin(phi), np.full(n_points, mu)))


def _wrap(a):
    return np.angle(np.exp(1j * a))


def match_phase_angle(cmap: CoordinateMap, r, mu, z_init, center=(0.0, 0.0)):
    """Normal-form angle whose image has the polar angle of ``z_init`` about ``center``."""
    c = np.asarray(center, dtype=float)
    target = np.arctan2(z_init[1] - c[1], z_init[0] - c[0])

    def residual(phi):
        phi = np.atleast_1d(phi)
        z = cmap.forward(r * np.cos(phi), r * np.sin(phi), np.full(phi.shape, mu)) - c
        return _wrap(np.arctan2(z[:, 1], z[:, 0]) - target), z

    def slope(phi, z):
        J = cmap.jacobian(r * np.cos(phi), r * np.sin(phi), mu)[0]
        dz = J @ np.array([-r * np.sin(phi), r * np.cos(phi)])
        return (z[0] * dz[1] - z[1] * dz[0]) / (z @ z)

    grid = 2 * np.pi * np.arange(PHASE_GRID) / PHASE_GRID
    f_grid, _ = residual(grid)
    phi = float(grid[np.argmin(np.abs(f_grid))])
    for _ in range(50):
        f, z = residual(phi)
        if abs(f[0]) < PHASE_TOL:
            return float(_wrap(phi))
        d = slope(phi, z[0])
        if d == 0.0 or not np.isfinite(d):
            break
        phi -= f[0] / d
    # Fallback: bracket a sign change of the wrapped residual and bisect.
    nxt = np.roll(f_grid, -1)
    brackets = np.flatnonzero((np.sign(f_grid) != np.sign(nxt)) & (np.abs(f_grid - nxt) < np.pi))
    for k in brackets:
        lo, hi = grid[k], grid[k] + 2 * np.pi / PHASE_GRID
        f_lo = f_grid[k]
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            f_mid = residual(mid)[0][0]
            if abs(f_mid) < PHASE_TOL:
                return float(_wrap(mid))
            if np.sign(f_mid) == np.sign(f_lo):
                lo, f_lo = mid, f_mid
            else:
                hi = mid
    raise NoConvergence("phase matching failed")


def match_initial_phase(cmap: CoordinateMap, p: NormalFormParams, z_init, mu, stability,
                        center=None):
    """Normal-form point on the matched LCO whose image points along ``z_init``.

    Angles are measured about ``center``; by default the centroid of the
    predicted orbit.
    """
    r = _required_radius(p, mu, stability)
    if center is None:
        center = predicted_orbit(cmap, p, mu, stability).center
    phi = match_phase_angle(cmap, r, mu, np.asarray(z_init, dtype=float), center)
    return r * np.cos(phi), r * np.sin(phi)


def fit_auxiliary_maps(dataset, cmap: CoordinateMap, p: NormalFormParams, ridge=1e-8):
    """Ridge regressions from inverse-mapped normal-form features to states 3..m."""
    if dataset.m <= 2:
        return []
    feats, targets = [], []
    for i, rec in enumerate(dataset.records):
        z = np.asarray(rec.states)
        try:
            u1, u2 = map_inverse(cmap, z[:, 0], z[:, 1], rec.mu)
        except (NoConvergence, SingularJacobian) as exc:
            raise type(exc)(f"record {i} ({rec.record_id}): {exc}") from exc
        feats.append(aux_features(u1, u2, cmap.scale_mu(np.full(len(z), rec.mu))))
        targets.append(z[:, 2:])
    F = np.vstack(feats)
    Y = np.vstack(targets)
    G = F.T @ F + ridge * np.eye(F.shape[1])
    C = np.linalg.solve(G, F.T @ Y)
    return [AuxiliaryMap(k + 2, C[:, k], ridge) for k in range(Y.shape[1])]


def invertibility_report(cmap: CoordinateMap, p: NormalFormParams, mu_range, grid=(25, 64, 11)):
    """Sample ``det`` of the map Jacobian over a disk of normal-form states.

    The disk covers radii up to 1.2 times the largest LCO radius found in
    ``mu_range``; ``grid`` gives the number of radii, angles and mu values.
    """
    n_r, n_phi, n_mu = grid
    mus = np.linspace(mu_range[0], mu_range[1], n_mu)
    r_max = max((s.radius for mu in mus for s in lco_radii(p, mu)), default=1.0)
    radii = np.linspace(0.0, 1.2 * r_max, n_r)
    phis = 2 * np.pi * np.arange(n_phi) / n_phi
    R, PHI, MU = np.meshgrid(radii, phis, mus, indexing="ij")
    u1, u2 = (R * np.cos(PHI)).ravel(), (R * np.sin(PHI)).ravel()
    det = np.linalg.det(cmap.jacobian(u1, u2, MU.ravel()))
    k = int(np.argmin(np.abs(det)))
    return {
        "min_abs_det": float(abs(det[k])),
        "location": [float(u1[k]), float(u2[k]), float(MU.ravel()[k])],
        "det_min": float(det.min()),
        "det_max": float(det.max()),
        "sign_change": bool(det.min() < 0 < det.max()),
        "singular": bool(abs(det[k]) < SINGULAR_DET),
        "radius_max": float(1.2 * r_max),
        "n_samples": int(det.size),
    }
