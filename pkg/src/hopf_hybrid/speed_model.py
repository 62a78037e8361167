"""Oscillation speed on the limit cycle and phase-only time integration.

On a limit cycle the normal-form amplitude is fixed, so only the angle needs
integrating: ``theta' = Omega(r, theta, mu)``. Two parameterisations of the
speed are supported:

``constant_correction``
    ``Omega = omega0 + NN(r cos theta, r sin theta, mu~)`` with a scalar network.
``fourier_correction``
    ``Omega = omega0 + NN(r, mu~) . [1, cos k theta, sin k theta]``, the network
    returning ``2 n_h + 1`` Fourier weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import IntegrationError, NonPositiveSpeed
from .neural_net import Mlp, mlp_init
from .orbit_geometry import fourier_basis, fourier_basis_derivative

CONSTANT = "constant_correction"
FOURIER = "fourier_correction"
MODES = (CONSTANT, FOURIER)
SPEED_FLOOR = 1e-6


class SpeedModel:
    def __init__(self, omega0, nn: Mlp, mode=FOURIER, n_h_speed=10, mu_ref=0.0, mu_scale=1.0):
        if mode not in MODES:
            raise ValueError(f"unknown speed mode {mode!r}")
        if mode == CONSTANT and (nn.n_in != 3 or nn.n_out != 1):
            raise ValueError("constant-correction network must map 3 inputs to 1 output")
        if mode == FOURIER and (nn.n_in != 2 or nn.n_out != 2 * n_h_speed + 1):
            raise ValueError(f"Fourier-correction network must map 2 inputs to {2 * n_h_speed + 1} outputs")
        self.omega0 = float(omega0)
        self.nn = nn
        self.mode = mode
        self.n_h_speed = int(n_h_speed)
        self.mu_ref = float(mu_ref)
        self.mu_scale = float(mu_scale)

    @classmethod
    def initial(cls, omega0, mode=FOURIER, hidden=(21, 21), n_h_speed=10, seed=0,
                mu_ref=0.0, mu_scale=1.0):
        sizes = [3, *hidden, 1] if mode == CONSTANT else [2, *hidden, 2 * n_h_speed + 1]
        return cls(omega0, mlp_init(sizes, seed, zero_output=True), mode, n_h_speed, mu_ref, mu_scale)

    def with_(self, **changes) -> "SpeedModel":
        d = dict(omega0=self.omega0, nn=self.nn, mode=self.mode, n_h_speed=self.n_h_speed,
                 mu_ref=self.mu_ref, mu_scale=self.mu_scale)
        d.update(changes)
        return SpeedModel(**d)

    def scale_mu(self, mu):
        return (np.asarray(mu, dtype=float) - self.mu_ref) / self.mu_scale

    def fourier_weights(self, r, mu):
        """Network Fourier weights per ``(r, mu)`` pair (Fourier mode only)."""
        X = np.column_stack([np.atleast_1d(r).astype(float), np.atleast_1d(self.scale_mu(mu))])
        return self.nn.forward(X)

    def raw(self, r, theta, mu):
        theta = np.asarray(theta, dtype=float)
        r, theta, mu = np.broadcast_arrays(np.asarray(r, dtype=float), theta, np.asarray(mu, dtype=float))
        shape = theta.shape
        r, theta, mu = r.ravel(), theta.ravel(), mu.ravel()
        if self.mode == CONSTANT:
            X = np.column_stack([r * np.cos(theta), r * np.sin(theta), self.scale_mu(mu)])
            out = self.omega0 + self.nn.forward(X)[:, 0]
        else:
            c = self.fourier_weights(r, mu)
            out = self.omega0 + np.einsum("nk,nk->n", fourier_basis(theta, self.n_h_speed), c)
        return out.reshape(shape)


def omega_eval(s: SpeedModel, r, theta, mu, strict=True):
    """Angular rate; raises :class:`NonPositiveSpeed` for a non-positive value when ``strict``."""
    w = s.raw(r, theta, mu)
    if strict and np.any(w <= 0):
        raise NonPositiveSpeed(f"oscillation speed {np.min(w):.3e} <= 0 at mu={np.ravel(mu)[0]:g}")
    return float(w) if np.ndim(w) == 0 else w


def _check_grid(t_grid):
    t = np.asarray(t_grid, dtype=float)
    if t.ndim != 1 or t.size < 1:
        raise ValueError("time grid must be a non-empty 1-D array")
    if t.size > 1:
        dt = np.diff(t)
        if np.any(dt <= 0):
            raise ValueError("time grid must be strictly increasing")
        if np.max(np.abs(dt - dt[0])) > 1e-9 * max(abs(dt[0]), abs(t[-1])):
            raise ValueError("time grid must be uniform")
    return t


def integrate_phase(s: SpeedModel, r, mu, theta0, t_grid, substeps=1, strict=True):
    """Classical RK4 on ``theta' = Omega`` with ``substeps`` steps per grid interval."""
    t = _check_grid(t_grid)
    theta = np.empty(t.size)
    theta[0] = theta0
    if t.size == 1:
        return theta
    h = (t[1] - t[0]) / substeps

    if s.mode == FOURIER:
        c = s.fourier_weights(r, mu)[0]

        def rate(y):
            return s.omega0 + fourier_basis(y, s.n_h_speed) @ c
    else:
        mu_s = float(s.scale_mu(mu))

        def rate(y):
            return s.omega0 + s.nn.forward(np.array([r * np.cos(y), r * np.sin(y), mu_s]))[0]

    y = float(theta0)
    for j in range(1, t.size):
        for _ in range(substeps):
            k1 = rate(y)
            k2 = rate(y + 0.5 * h * k1)
            k3 = rate(y + 0.5 * h * k2)
            k4 = rate(y + h * k3)
            if strict and min(k1, k2, k3, k4) <= 0:
                raise NonPositiveSpeed(f"oscillation speed <= 0 at step {j}")
            y = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.isfinite(y):
            raise IntegrationError(f"phase became non-finite at step {j}")
        theta[j] = y
    return theta


@dataclass
class PredictedTimeSeries:
    t: np.ndarray
    theta: np.ndarray
    z: np.ndarray
    mu: float
    radius: float


def predict_points(cmap, r, mu, theta):
    theta = np.asarray(theta, dtype=float)
    return cmap.forward(r * np.cos(theta), r * np.sin(theta), np.full(theta.shape, mu))


def phase_timeseries(cmap, speed: SpeedModel, r, mu, theta0, t_grid, substeps=1, strict=True):
    theta = integrate_phase(speed, r, mu, theta0, t_grid, substeps, strict)
    return PredictedTimeSeries(np.asarray(t_grid, dtype=float), theta,
                               predict_points(cmap, r, mu, theta), float(mu), float(r))


def dominant_angular_frequency(t, signal):
    """Angular frequency of the largest spectral peak (parabolic refinement)."""
    t = np.asarray(t, dtype=float)
    x = np.asarray(signal, dtype=float) - np.mean(signal)
    n = x.size
    n_fft = 8 * int(2 ** np.ceil(np.log2(n)))
    mag = np.abs(np.fft.rfft(x * np.hanning(n), n_fft))
    k = int(np.argmax(mag[1:])) + 1
    if 1 <= k < mag.size - 1:
        a, b, c = mag[k - 1], mag[k], mag[k + 1]
        denom = a - 2 * b + c
        k = k + (0.5 * (a - c) / denom if denom != 0 else 0.0)
    dt = t[1] - t[0]
    return 2 * np.pi * k / (n_fft * dt)


# ---------------------------------------------------------------------------
# Batched loss with backpropagation through the RK4 steps
# ---------------------------------------------------------------------------

@dataclass
class PhaseRecordGroup:
    """Records sharing a sample count and step, integrated together."""

    radius: np.ndarray      # (B,)
    mu: np.ndarray          # (B,)
    theta0: np.ndarray      # (B,)
    h: float
    z: np.ndarray           # (B, n, 2) measured samples
    substeps: int = 1


def _group_rates(speed: SpeedModel, grp: PhaseRecordGroup):
    """Return a closure evaluating Omega and dOmega/dtheta for the group."""
    r = grp.radius
    if speed.mode == FOURIER:
        c = speed.fourier_weights(r, grp.mu)

        def rate(y):
            return (speed.omega0 + np.einsum("bk,bk->b", fourier_basis(y, speed.n_h_speed), c),
                    np.einsum("bk,bk->b", fourier_basis_derivative(y, speed.n_h_speed), c))
        return rate, c
    mu_s = speed.scale_mu(grp.mu)

    def rate(y):
        cos, sin = np.cos(y), np.sin(y)
        X = np.column_stack([r * cos, r * sin, mu_s])
        V = np.column_stack([-r * sin, r * cos, np.zeros_like(y)])
        out, tan, _ = speed.nn.directional(X, V)
        return speed.omega0 + out[:, 0], tan[:, 0]
    return rate, None


def speed_loss_and_grad(speed: SpeedModel, cmap, groups, penalty_weight=1e3, need_grad=True):
    """Speed loss summed over groups and its gradient w.r.t. ``(omega0, nn params)``.

    Rates below ``SPEED_FLOOR`` are clamped to it; the shortfall is added to
    the loss times ``penalty_weight``.
    """
    total = 0.0
    g_omega0 = 0.0
    g_nn = np.zeros(speed.nn.n_params)
    for grp in groups:
        B, n, _ = grp.z.shape
        rate, c = _group_rates(speed, grp)
        h = grp.h / grp.substeps
        n_steps = (n - 1) * grp.substeps
        theta = np.empty((B, n))
        theta[:, 0] = grp.theta0
        Y = np.empty((n_steps, 4, B))
        W = np.empty((n_steps, 4, B))
        D = np.empty((n_steps, 4, B))
        y = grp.theta0.astype(float).copy()
        penalty = 0.0
        for j in range(n_steps):
            ks = []
            for q, (a, ref) in enumerate(((0.0, None), (0.5, 0), (0.5, 1), (1.0, 2))):
                yq = y if ref is None else y + a * h * ks[ref]
                w, dw = rate(yq)
                Y[j, q], W[j, q], D[j, q] = yq, w, dw
                short = w < SPEED_FLOOR
                if short.any():
                    penalty += penalty_weight * float(np.sum(SPEED_FLOOR - w[short]))
                    w = np.where(short, SPEED_FLOOR, w)
                ks.append(w)
            y = y + h / 6.0 * (ks[0] + 2 * ks[1] + 2 * ks[2] + ks[3])
            if not np.all(np.isfinite(y)):
                raise IntegrationError(f"phase became non-finite at step {j}")
            if (j + 1) % grp.substeps == 0:
                theta[:, (j + 1) // grp.substeps] = y
        r = grp.radius[:, None]
        X = np.stack([r * np.cos(theta), r * np.sin(theta),
                      np.broadcast_to(cmap.scale_mu(grp.mu)[:, None], theta.shape)], axis=-1).reshape(-1, 3)
        if need_grad:
            zhat, acts = cmap.forward_cache(X)
        else:
            zhat = cmap.forward(X[:, 0], X[:, 1], grp.mu.repeat(n))
        err = zhat - grp.z.reshape(-1, 2)
        norms = np.hypot(err[:, 0], err[:, 1])
        total += float(np.sum(norms)) + penalty
        if not need_grad:
            continue
        G = np.divide(err, norms[:, None], out=np.zeros_like(err), where=norms[:, None] > 0)
        _, _, _, g_x = cmap.vjp(X, acts, G)
        g_x = g_x.reshape(B, n, 3)
        g_theta = (-g_x[..., 0] * r * np.sin(theta) + g_x[..., 1] * r * np.cos(theta))

        active = W >= SPEED_FLOOR
        pen = np.where(active, 0.0, -penalty_weight)
        omega_bar = np.empty((n_steps, 4, B))
        a = g_theta[:, -1].copy()
        for j in range(n_steps - 1, -1, -1):
            act, pj, dj = active[j], pen[j], D[j]
            # Cotangents of the stage rates, last stage first.
            w4 = a * (h / 6.0) * act[3] + pj[3]
            kb3 = a * (h / 3.0) + h * w4 * dj[3]
            w3 = kb3 * act[2] + pj[2]
            kb2 = a * (h / 3.0) + 0.5 * h * w3 * dj[2]
            w2 = kb2 * act[1] + pj[1]
            kb1 = a * (h / 6.0) + 0.5 * h * w2 * dj[1]
            w1 = kb1 * act[0] + pj[0]
            a = a + w1 * dj[0] + w2 * dj[1] + w3 * dj[2] + w4 * dj[3]
            omega_bar[j] = (w1, w2, w3, w4)
            if j % grp.substeps == 0:
                a = a + g_theta[:, j // grp.substeps]
        g_omega0 += float(omega_bar.sum())
        if speed.mode == FOURIER:
            g_c = np.einsum("sqb,sqbk->bk", omega_bar, fourier_basis(Y, speed.n_h_speed))
            Xs = np.column_stack([grp.radius, speed.scale_mu(grp.mu)])
            _, acts_s = speed.nn.forward(Xs, cache=True)
            g_nn += speed.nn.backward(acts_s, g_c)[0]
        else:
            Ys = Y.reshape(-1)
            rr = np.tile(grp.radius, n_steps * 4)
            mm = np.tile(speed.scale_mu(grp.mu), n_steps * 4)
            Xs = np.column_stack([rr * np.cos(Ys), rr * np.sin(Ys), mm])
            _, acts_s = speed.nn.forward(Xs, cache=True)
            g_nn += speed.nn.backward(acts_s, omega_bar.reshape(-1, 1))[0]
    if not need_grad:
        return total
    return total, g_omega0, g_nn
