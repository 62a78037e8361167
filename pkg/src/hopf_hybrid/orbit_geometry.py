"""Polar description of closed planar orbits and the orbit shape loss.

An orbit is summarised by the truncated Fourier series of its radius as a
function of polar angle about a reference center,

    R(theta) = a0 + sum_k a_k cos(k theta) + b_k sin(k theta),

with the coefficients fitted by linear least squares. Coefficient vectors are
laid out as ``[a0, a1..a_nh, b1..b_nh]`` throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import HarmonicMismatch, MissingBranch, NonStarShaped, RankDeficient
from .normal_form import lco_radius

DEFAULT_HARMONICS = 10
DEFAULT_ORBIT_POINTS = 100
CONDITION_LIMIT = 1e12
STAR_SPREAD_FRACTION = 0.25


@dataclass(frozen=True)
class PlanarOrbit:
    points: np.ndarray
    center: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError("orbit points must have shape (n, 2)")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(2))

    @classmethod
    def from_points(cls, points, center=None) -> "PlanarOrbit":
        pts = np.asarray(points, dtype=float)
        return cls(pts, pts.mean(axis=0) if center is None else center)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class OrbitDescriptor:
    n_h: int
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float).ravel()
        b = np.asarray(self.b, dtype=float).ravel()
        if a.size != self.n_h + 1 or b.size != self.n_h:
            raise ValueError(f"descriptor with n_h={self.n_h} needs {self.n_h + 1} cosine "
                             f"and {self.n_h} sine coefficients")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.a, self.b])

    @property
    def a0(self) -> float:
        return float(self.a[0])

    @classmethod
    def from_vector(cls, v, n_h=None) -> "OrbitDescriptor":
        v = np.asarray(v, dtype=float).ravel()
        if n_h is None:
            n_h = (v.size - 1) // 2
        if v.size != 2 * n_h + 1:
            raise ValueError("coefficient vector length must be 2*n_h + 1")
        return cls(n_h, v[:n_h + 1], v[n_h + 1:])

    @classmethod
    def zeros(cls, n_h) -> "OrbitDescriptor":
        return cls(n_h, np.zeros(n_h + 1), np.zeros(n_h))


# ---------------------------------------------------------------------------
# Basis
# ---------------------------------------------------------------------------

def fourier_basis(theta, n_h):
    """Design matrix ``[1, cos k theta, sin k theta]`` along a new last axis."""
    theta = np.asarray(theta, dtype=float)
    k = np.arange(1, n_h + 1)
    kt = theta[..., None] * k
    return np.concatenate([np.ones(theta.shape + (1,)), np.cos(kt), np.sin(kt)], axis=-1)


def fourier_basis_derivative(theta, n_h):
    theta = np.asarray(theta, dtype=float)
    k = np.arange(1, n_h + 1)
    kt = theta[..., None] * k
    return np.concatenate([np.zeros(theta.shape + (1,)), -k * np.sin(kt), k * np.cos(kt)], axis=-1)


# ---------------------------------------------------------------------------
# Polar conversion
# ---------------------------------------------------------------------------

def polar_coordinates(points, center):
    d = np.asarray(points, dtype=float) - np.asarray(center, dtype=float)
    return np.arctan2(d[..., 1], d[..., 0]), np.hypot(d[..., 0], d[..., 1])


def _winding(theta):
    return abs(np.sum(np.angle(np.exp(1j * np.diff(theta)))))


def check_star_shaped(theta, R, n_h=DEFAULT_HARMONICS, closed=False):
    """Raise :class:`NonStarShaped` if ``R`` is not a single-valued function of angle.

    Samples are binned by angle (``4 n_h`` bins). Inside each bin the linear
    trend in angle is removed before the spread of ``R`` is compared against
    ``25%`` of the orbit's radius range, so steep but single-valued curves
    pass. The sample sequence must also wind once around the center; a
    ``closed`` sequence counts the step from the last sample back to the first.
    """
    theta = np.asarray(theta, dtype=float)
    R = np.asarray(R, dtype=float)
    seq = np.append(theta, theta[0]) if closed else theta
    steps = np.angle(np.exp(1j * np.diff(seq)))
    net = abs(steps.sum())
    gap = np.max(np.abs(steps)) if steps.size else 0.0
    if net + (0.0 if closed else gap) < 2 * np.pi * (1 - 1e-6):
        raise NonStarShaped(f"samples wind {net / (2 * np.pi):.3f} times around the center")
    r_range = R.max() - R.min()
    tol = STAR_SPREAD_FRACTION * max(r_range, 1e-9 * max(R.max(), 1e-300))
    wrapped = np.mod(theta, 2 * np.pi)
    n_bins = 4 * n_h
    bins = np.minimum((wrapped / (2 * np.pi) * n_bins).astype(int), n_bins - 1)
    for k in np.unique(bins):
        sel = bins == k
        if sel.sum() < 3:
            if sel.sum() == 2 and abs(np.diff(R[sel])[0]) > tol and abs(np.diff(wrapped[sel])[0]) < 1e-12:
                raise NonStarShaped(f"two radii at one angle in bin {k}")
            continue
        th, rr = wrapped[sel], R[sel]
        X = np.column_stack([np.ones_like(th), th - th.mean()])
        coef, *_ = np.linalg.lstsq(X, rr, rcond=None)
        resid = rr - X @ coef
        if resid.max() - resid.min() > tol:
            raise NonStarShaped(f"radius is multivalued in angle bin {k} of {n_bins}")


def to_polar(orbit: PlanarOrbit, n_h=DEFAULT_HARMONICS, closed=False):
    """Angles in ``[0, 2 pi)`` sorted ascending and the matching radii."""
    theta, R = polar_coordinates(orbit.points, orbit.center)
    if np.any(R <= 0.0):
        raise NonStarShaped("a sample coincides with the polar center")
    check_star_shaped(theta, R, n_h, closed=closed)
    wrapped = np.mod(theta, 2 * np.pi)
    order = np.argsort(wrapped, kind="stable")
    return wrapped[order], R[order]


# ---------------------------------------------------------------------------
# Descriptors
# ---------------------------------------------------------------------------

def fourier_fit(theta, R, n_h=DEFAULT_HARMONICS) -> OrbitDescriptor:
    theta = np.asarray(theta, dtype=float).ravel()
    R = np.asarray(R, dtype=float).ravel()
    if theta.size < 2 * n_h + 1:
        raise RankDeficient(f"{theta.size} samples cannot determine {2 * n_h + 1} coefficients")
    A = fourier_basis(theta, n_h)
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[-1] == 0.0 or sv[0] / sv[-1] > CONDITION_LIMIT:
        raise RankDeficient("sample angles too clustered for the requested harmonics")
    coef = np.linalg.pinv(A) @ R
    return OrbitDescriptor.from_vector(coef, n_h)


def fourier_eval(d: OrbitDescriptor, theta):
    return fourier_basis(theta, d.n_h) @ d.vector


def descriptor_distance(d1: OrbitDescriptor, d2: OrbitDescriptor) -> float:
    if d1.n_h != d2.n_h:
        raise HarmonicMismatch(f"descriptors have {d1.n_h} and {d2.n_h} harmonics")
    return float(np.linalg.norm(d1.vector - d2.vector))


def orbit_descriptor(orbit: PlanarOrbit, n_h=DEFAULT_HARMONICS, closed=False) -> OrbitDescriptor:
    theta, R = to_polar(orbit, n_h, closed=closed)
    return fourier_fit(theta, R, n_h)


# ---------------------------------------------------------------------------
# Batched fitting with reverse-mode gradient (used during training)
# ---------------------------------------------------------------------------

@dataclass
class _BatchFit:
    coef: np.ndarray
    A: np.ndarray
    G: np.ndarray
    theta: np.ndarray
    R: np.ndarray
    d: np.ndarray
    n_h: int


def fit_descriptors_batch(points, centers, n_h) -> _BatchFit:
    """Least-squares descriptors for ``points`` of shape ``(B, N, 2)``.

    Solves the normal equations per orbit. The returned object carries what
    :func:`fit_descriptors_vjp` needs.
    """
    d = np.asarray(points, dtype=float) - np.asarray(centers, dtype=float)[:, None, :]
    theta = np.arctan2(d[..., 1], d[..., 0])
    R = np.hypot(d[..., 0], d[..., 1])
    A = fourier_basis(theta, n_h)
    G = np.einsum("bnk,bnl->bkl", A, A)
    coef = np.linalg.solve(G, np.einsum("bnk,bn->bk", A, R)[..., None])[..., 0]
    return _BatchFit(coef, A, G, theta, R, d, n_h)


def fit_descriptors_vjp(fit: _BatchFit, g_coef):
    """Pull a cotangent on the coefficients back to the orbit points."""
    lam = np.linalg.solve(fit.G, np.asarray(g_coef, dtype=float)[..., None])[..., 0]
    A_lam = np.einsum("bnk,bk->bn", fit.A, lam)
    resid = fit.R - np.einsum("bnk,bk->bn", fit.A, fit.coef)
    dA = fourier_basis_derivative(fit.theta, fit.n_h)
    # d coef / d A contracted with lam: resid (x) lam - (A lam) (x) coef
    g_theta = (resid * np.einsum("bnk,bk->bn", dA, lam)
               - A_lam * np.einsum("bnk,bk->bn", dA, fit.coef))
    g_R = A_lam
    R2 = fit.R**2
    d1, d2 = fit.d[..., 0], fit.d[..., 1]
    g1 = g_R * d1 / fit.R - g_theta * d2 / R2
    g2 = g_R * d2 / fit.R + g_theta * d1 / R2
    return np.stack([g1, g2], axis=-1)


# ---------------------------------------------------------------------------
# Shape loss
# ---------------------------------------------------------------------------

def equispaced_angles(n_points):
    return 2 * np.pi * np.arange(n_points) / n_points


def measured_orbit(record, columns=(0, 1)) -> PlanarOrbit:
    return PlanarOrbit.from_points(np.asarray(record.states)[:, list(columns)])


def shape_loss(dataset, coord_map, p, n_points=DEFAULT_ORBIT_POINTS, n_h=DEFAULT_HARMONICS):
    """Sum over records of the descriptor distance between measured and predicted orbits.

    Each predicted orbit maps ``n_points`` equi-spaced normal-form angles on
    the circle of the stability-matched radius through ``coord_map``. Both
    orbits of a record are described about the measured orbit's centroid.
    """
    phi = equispaced_angles(n_points)
    total = 0.0
    for rec in dataset.records:
        r = lco_radius(p, rec.mu, rec.stability)
        if r is None:
            raise MissingBranch(f"no {rec.stability} normal-form orbit at mu={rec.mu:g}")
        meas = measured_orbit(rec)
        d_meas = orbit_descriptor(meas, n_h)
        z = coord_map.forward(r * np.cos(phi), r * np.sin(phi), np.full(n_points, rec.mu))
        fit = fit_descriptors_batch(z[None], meas.center[None], n_h)
        total += float(np.linalg.norm(fit.coef[0] - d_meas.vector))
    return total
