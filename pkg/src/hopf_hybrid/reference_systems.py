"""Ground-truth generators: Van der Pol and a 3-DOF aeroelastic aerofoil.

Both systems are integrated with a fixed-step classical Runge-Kutta scheme.
Stable LCOs are obtained by settle-and-record simulation, unstable ones by a
shooting method (the oracle of record) or by emulating PD feedback control
that is made noninvasive by adjusting a harmonic target.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import (
    IntegrationError,
    Invasive,
    NoConvergence,
    NoLco,
    NotSettled,
    NotStabilized,
)

logger = logging.getLogger(__name__)

STABLE = "stable"
UNSTABLE = "unstable"


# ---------------------------------------------------------------------------
# Integration
# ---------------------------------------------------------------------------

def rk4_step(f, x, h):
    k1 = f(x)
    k2 = f(x + 0.5 * h * k1)
    k3 = f(x + 0.5 * h * k2)
    k4 = f(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(f, x0, dt, n_samples, substeps=1):
    """Integrate ``x' = f(x)`` and return ``n_samples`` states spaced by ``dt``.

    Each sampling interval is covered by ``substeps`` RK4 steps. The first
    returned row is ``x0``.
    """
    x = np.array(x0, dtype=float)
    out = np.empty((n_samples, x.size))
    h = dt / substeps
    out[0] = x
    for i in range(1, n_samples):
        for _ in range(substeps):
            x = rk4_step(f, x, h)
        if not np.all(np.isfinite(x)):
            raise IntegrationError(f"non-finite state at sample {i}")
        out[i] = x
    return out


def _advance(f, x, duration, h_max):
    n = max(1, int(np.ceil(duration / h_max - 1e-9)))
    h = duration / n
    for i in range(n):
        x = rk4_step(f, x, h)
    if not np.all(np.isfinite(x)):
        raise IntegrationError("non-finite state while advancing")
    return x


# ---------------------------------------------------------------------------
# Data containers
# ---------------------------------------------------------------------------

@dataclass
class LcoRecord:
    """One measured (or simulated) periodic response at a fixed parameter."""

    mu: float
    stability: str
    t: np.ndarray
    states: np.ndarray  # (n_samples, m)
    provenance: str = "simulated"
    record_id: str = ""
    meta: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        if self.states.shape[0] != self.t.size:
            raise ValueError("states and t have different lengths")
        if self.stability not in (STABLE, UNSTABLE):
            raise ValueError(f"unknown stability label {self.stability!r}")
        if not self.record_id:
            self.record_id = f"{self.stability}_mu{self.mu:.6g}"

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    @property
    def m(self) -> int:
        return self.states.shape[1]

    def downsampled(self, max_samples: int) -> "LcoRecord":
        """Keep every k-th sample so that at most ``max_samples`` remain."""
        n = self.t.size
        if max_samples <= 0 or n <= max_samples:
            return self
        stride = int(np.ceil(n / max_samples))
        return replace(self, t=self.t[::stride], states=self.states[::stride])


@dataclass
class TrainingDataset:
    records: list
    units: dict = field(default_factory=dict)

    def __post_init__(self):
        ms = {r.m for r in self.records}
        if len(ms) > 1:
            raise ValueError(f"inconsistent state counts across records: {sorted(ms)}")

    @property
    def m(self) -> int:
        return self.records[0].m if self.records else 0

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def without(self, index: int) -> "TrainingDataset":
        recs = [r for i, r in enumerate(self.records) if i != index]
        return TrainingDataset(recs, dict(self.units))


# ---------------------------------------------------------------------------
# Van der Pol
# ---------------------------------------------------------------------------

def vdp_rhs(z1, z2, mu):
    return z2, 2.0 * mu * z2 - z1 * z1 * z2 - z1


def vdp_field(mu):
    """Vector field of the Van der Pol oscillator at ``mu`` as ``f(x)``."""

    def f(x):
        return np.array([x[1], 2.0 * mu * x[1] - x[0] * x[0] * x[1] - x[0]])

    return f


# ---------------------------------------------------------------------------
# Aeroelastic aerofoil (pitch, heave, aerodynamic lag state)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AeroParams:
    """Structural and aerodynamic constants; defaults are the published table."""

    U: float = 15.0
    b: float = 0.15
    a: float = -0.5
    rho: float = 1.204
    m_w: float = 5.3
    m_T: float = 16.9
    I_alpha: float = 0.1726
    c_alpha: float = 0.5628
    c_h: float = 15.443
    k_alpha: float = 54.1162
    k_alpha2: float = 751.6
    k_alpha3: float = 5006.7
    k_h: float = 3529.4
    x_alpha: float = 0.234
    c0: float = 1.0
    c1: float = 0.1650
    c2: float = 0.0455
    c3: float = 0.335
    c4: float = 0.3

    @property
    def c_hat(self) -> float:
        return self.c0 - self.c1 - self.c3

    def matrices(self, U=None):
        """Mass, damping and stiffness matrices for state x = (h, alpha, w)."""
        U = self.U if U is None else U
        b, a, rho, ch = self.b, self.a, self.rho, self.c_hat
        c1, c2, c3, c4 = self.c1, self.c2, self.c3, self.c4
        pi = np.pi
        m12 = self.m_w * self.x_alpha * b - a * pi * rho * b**3
        M = np.array([
            [self.m_T + pi * rho * b**2, m12, 0.0],
            [m12, self.I_alpha + pi * (1 / 8 + a**2) * rho * b**4, 0.0],
            [0.0, 0.0, 1.0],
        ])
        # rho is kept on the (1,3) lift-lag coupling terms; see README.
        D = np.array([
            [self.c_h + 2 * pi * rho * b * U * ch,
             (1 + ch * (1 - 2 * a)) * pi * rho * b**2 * U,
             2 * pi * rho * U**2 * b * (c1 * c2 + c3 * c4)],
            [-2 * pi * (a + 0.5) * rho * b**2 * ch * U,
             self.c_alpha + (0.5 - a) * (1 - ch * (1 + 2 * a)) * pi * rho * b**3 * U,
             -2 * pi * rho * b**2 * U**2 * (a + 0.5) * (c1 * c2 + c3 * c4)],
            [-1 / b, a - 0.5, (c2 + c4) * U / b],
        ])
        K = np.array([
            [self.k_h, 2 * pi * rho * b * U**2 * ch, 2 * pi * rho * U**3 * c2 * c4 * (c1 + c3)],
            [0.0, self.k_alpha - 2 * pi * (0.5 + a) * rho * ch * b**2 * U**2,
             -2 * pi * rho * b * U**3 * (a + 0.5) * c2 * c4 * (c1 + c3)],
            [0.0, -U / b, c2 * c4 * U**2 / b**2],
        ])
        return M, D, K

    def linear_operator(self, U=None):
        """First-order system matrix of the linearisation about the origin."""
        M, D, K = self.matrices(U)
        Minv = np.linalg.inv(M)
        z, eye = np.zeros((3, 3)), np.eye(3)
        return np.block([[z, eye], [-Minv @ K, -Minv @ D]])


class AeroSystem:
    """Pre-factored first-order aeroelastic dynamics at a fixed airspeed."""

    def __init__(self, params: AeroParams, U=None):
        self.params = params if U is None else replace(params, U=float(U))
        M, D, K = self.params.matrices()
        if abs(np.linalg.det(M)) < 1e-14:
            raise np.linalg.LinAlgError("singular mass matrix")
        self.A = self.params.linear_operator()
        Minv = np.linalg.inv(M)
        # Acceleration response to a unit generalized force in pitch / heave.
        self._pitch_col = -Minv[:, 1]
        self._heave_col = Minv[:, 0]

    def nonlinear_moment(self, alpha):
        p = self.params
        return p.k_alpha2 * alpha**2 + p.k_alpha3 * alpha**3

    def rhs(self, x, heave_force=0.0):
        # x may carry extra trailing columns (batched states).
        dx = self.A @ x
        dx[3:] += np.multiply.outer(self._pitch_col, self.nonlinear_moment(x[1]))
        if heave_force:
            dx[3:] += self._heave_col * heave_force
        return dx

    def field(self):
        return self.rhs


def aero_rhs(state, p: AeroParams):
    """Time derivative of (h, alpha, w, h', alpha', w') at airspeed ``p.U``."""
    return AeroSystem(p).rhs(np.asarray(state, dtype=float))


def aero_field(mu, params: AeroParams | None = None):
    return AeroSystem(params or AeroParams(), U=mu).rhs


def aero_hopf_speed(params: AeroParams | None = None, lo=10.0, hi=25.0, tol=1e-10):
    """Airspeed where the leading eigenvalue pair crosses the imaginary axis."""
    params = params or AeroParams()

    def growth(U):
        return np.linalg.eigvals(params.linear_operator(U)).real.max()

    if growth(lo) >= 0 or growth(hi) <= 0:
        raise ValueError("Hopf point not bracketed")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if growth(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def aero_flutter_frequency(U, params: AeroParams | None = None):
    """Imaginary part (rad/s) of the least-damped eigenvalue pair."""
    ev = np.linalg.eigvals((params or AeroParams()).linear_operator(U))
    return float(abs(ev[np.argmax(ev.real)].imag))


# ---------------------------------------------------------------------------
# Stable LCO by direct simulation
# ---------------------------------------------------------------------------

def _period_amplitudes(signal, t):
    """Peak-to-peak amplitude over the first and last period-long windows."""
    x = signal - signal.mean()
    up = np.flatnonzero((x[:-1] < 0) & (x[1:] >= 0))
    if up.size >= 2:
        n_period = int(np.ceil(np.mean(np.diff(up))))
    else:
        both = np.flatnonzero(np.sign(x[:-1]) != np.sign(x[1:]))
        if both.size < 3:
            return None
        n_period = int(np.ceil(2 * np.mean(np.diff(both))))
    if n_period >= signal.size:
        return None
    return np.ptp(signal[:n_period + 1]), np.ptp(signal[-n_period - 1:])


def simulate_lco(rhs: Callable, mu, dt, settle_time, record_time, x0,
                 observe: Sequence[int] | None = None, substeps=1,
                 amplitude_tol=5e-3) -> LcoRecord:
    """Settle onto a stable LCO and record it.

    ``rhs(mu)`` must return a vector field ``f(x)``. The transient of length
    ``settle_time`` is discarded, then ``record_time`` is sampled every ``dt``.
    """
    f = rhs(mu)
    n_settle = int(round(settle_time / dt))
    x = np.array(x0, dtype=float)
    if n_settle > 0:
        x = integrate(f, x, dt, n_settle + 1, substeps)[-1]
    n = int(round(record_time / dt))
    traj = integrate(f, x, dt, n, substeps)
    t = dt * np.arange(n)
    observe = list(range(traj.shape[1])) if observe is None else list(observe)
    states = traj[:, observe]
    lead = states[:, 0]
    if np.ptp(lead) < 1e-6:
        raise NoLco(f"response decayed at mu={mu}")
    amps = _period_amplitudes(lead, t)
    check, extensions = traj, 0
    while amps is None and extensions < 10:
        # Record shorter than the check needs; extend a copy of it.
        more = integrate(f, check[-1], dt, n + 1, substeps)[1:]
        check = np.vstack([check, more])
        extensions += 1
        amps = _period_amplitudes(check[:, observe[0]], dt * np.arange(len(check)))
    if amps is None:
        raise NotSettled(f"less than one period recorded at mu={mu}")
    if abs(amps[1] - amps[0]) > amplitude_tol * max(amps):
        raise NotSettled(f"amplitude drifting at mu={mu}: {amps[0]:.6g} -> {amps[1]:.6g}")
    return LcoRecord(mu=float(mu), stability=STABLE, t=t, states=states, provenance="simulated")


# ---------------------------------------------------------------------------
# Shooting
# ---------------------------------------------------------------------------

@dataclass
class PeriodicOrbit:
    x0: np.ndarray
    period: float
    multipliers: np.ndarray
    iterations: int

    @property
    def stable(self) -> bool:
        # Drop the trivial multiplier (closest to 1).
        mags = np.abs(self.multipliers)
        trivial = np.argmin(np.abs(self.multipliers - 1.0))
        others = np.delete(mags, trivial)
        return bool(np.all(others < 1.0))


def _flow(f, x0, T, n_steps):
    x = np.array(x0, dtype=float)
    h = T / n_steps
    for _ in range(n_steps):
        x = rk4_step(f, x, h)
    return x


def shoot_periodic_orbit(f, period_guess, state_guess, n_steps=2000, tol=1e-9,
                         max_iter=50, fd_step=1e-7) -> PeriodicOrbit:
    """Newton shooting on (x(0), T) with a Poincare phase anchor.

    The monodromy matrix comes from forward finite differences of the flow map.
    """
    x = np.array(state_guess, dtype=float)
    T = float(period_guess)
    n = x.size
    x_ref = x.copy()
    f_ref = f(x_ref)
    for it in range(1, max_iter + 1):
        xT = _flow(f, x, T, n_steps)
        res = xT - x
        anchor = f_ref @ (x - x_ref)
        steps = fd_step * np.maximum(np.abs(x), 1e-3)
        perturbed = _flow(f, x[:, None] + np.diag(steps), T, n_steps)
        Mono = (perturbed - xT[:, None]) / steps
        if np.max(np.abs(res)) < tol and abs(anchor) < tol:
            return PeriodicOrbit(x, T, np.linalg.eigvals(Mono), it)
        J = np.zeros((n + 1, n + 1))
        J[:n, :n] = Mono - np.eye(n)
        J[:n, n] = f(xT)
        J[n, :n] = f_ref
        delta = np.linalg.solve(J, -np.concatenate([res, [anchor]]))
        # Guard against wild first steps only; full Newton steps otherwise.
        step = 1.0
        limit = 2.0 * max(np.max(np.abs(x)), 1e-12)
        if np.max(np.abs(delta[:n])) > limit:
            step = limit / np.max(np.abs(delta[:n]))
        x = x + step * delta[:n]
        T = T + step * delta[n]
        if not np.all(np.isfinite(x)) or T <= 0:
            break
    raise NoConvergence(f"shooting did not converge in {max_iter} iterations")


def sample_periodic_orbit(f, orbit: PeriodicOrbit, dt, record_time, n_steps=2000):
    """Sample a periodic orbit at ``k*dt`` by wrapping time into one period."""
    h = orbit.period / n_steps
    grid = np.empty((n_steps + 1, orbit.x0.size))
    x = orbit.x0.copy()
    grid[0] = x
    for i in range(n_steps):
        x = rk4_step(f, x, h)
        grid[i + 1] = x
    n = int(round(record_time / dt))
    t = dt * np.arange(n)
    tau = np.mod(t, orbit.period)
    idx = np.minimum((tau / h).astype(int), n_steps - 1)
    out = np.empty((n, orbit.x0.size))
    for k in range(n):
        rem = tau[k] - idx[k] * h
        out[k] = rk4_step(f, grid[idx[k]], rem) if rem > 0 else grid[idx[k]]
    return t, out


def find_unstable_lco_shooting(rhs: Callable, mu, period_guess, state_guess,
                               dt=None, record_time=None,
                               observe: Sequence[int] | None = None,
                               n_steps=2000, require_unstable=True) -> LcoRecord:
    """Locate a periodic orbit by shooting and return it as an LCO record.

    Without ``dt`` one period is returned on the shooting grid; otherwise the
    orbit is sampled every ``dt`` for ``record_time`` seconds.
    """
    f = rhs(mu)
    orbit = shoot_periodic_orbit(f, period_guess, state_guess, n_steps=n_steps)
    if require_unstable and orbit.stable:
        raise NoConvergence(
            f"shooting at mu={mu} converged to a stable orbit "
            f"(|multipliers|={np.sort(np.abs(orbit.multipliers))})")
    return record_from_orbit(f, orbit, mu, dt, record_time, observe, n_steps)


def record_from_orbit(f, orbit: PeriodicOrbit, mu, dt=None, record_time=None,
                      observe: Sequence[int] | None = None, n_steps=2000) -> LcoRecord:
    if dt is None:
        t, traj = sample_periodic_orbit(f, orbit, orbit.period / n_steps, orbit.period, n_steps)
    else:
        t, traj = sample_periodic_orbit(f, orbit, dt, record_time, n_steps)
    observe = list(range(traj.shape[1])) if observe is None else list(observe)
    label = STABLE if orbit.stable else UNSTABLE
    return LcoRecord(mu=float(mu), stability=label, t=t, states=traj[:, observe],
                     provenance="shooting", meta={"orbit": orbit, "period": orbit.period})


# ---------------------------------------------------------------------------
# PD-stabilised unstable LCO (control-based continuation emulation)
# ---------------------------------------------------------------------------

@dataclass
class HarmonicTarget:
    """Heave target ``mean + sum_k a_k cos(k w t) + b_k sin(k w t)``.

    The fundamental sine coefficient is pinned to zero (phase anchor).
    """

    omega: float
    cos: np.ndarray
    sin: np.ndarray
    mean: float = 0.0

    @classmethod
    def harmonic(cls, omega, amplitude, n_harmonics=7):
        c = np.zeros(n_harmonics)
        c[0] = amplitude
        return cls(float(omega), c, np.zeros(n_harmonics))

    def value(self, t):
        k = np.arange(1, self.cos.size + 1)
        ph = self.omega * t * k
        return self.mean + self.cos @ np.cos(ph) + self.sin @ np.sin(ph)

    def rate(self, t):
        k = np.arange(1, self.cos.size + 1)
        ph = self.omega * t * k
        return self.omega * (-(self.cos * k) @ np.sin(ph) + (self.sin * k) @ np.cos(ph))


def _fourier_coeffs(signal, t, omega, n_harmonics):
    k = np.arange(1, n_harmonics + 1)
    ph = np.outer(t, k) * omega
    basis = np.column_stack([np.ones_like(t), np.cos(ph), np.sin(ph)])
    coef, *_ = np.linalg.lstsq(basis, signal, rcond=None)
    return coef[0], coef[1:1 + n_harmonics], coef[1 + n_harmonics:]


class _ControlledRun:
    """Integrates the PD-controlled aerofoil while keeping a warm state."""

    def __init__(self, system: AeroSystem, gains, dt, x0):
        self.system = system
        self.kp, self.kd = gains
        self.dt = dt
        self.x = np.array(x0, dtype=float)
        self.t = 0.0

    def run(self, target: HarmonicTarget, duration, record=False):
        sys_, kp, kd = self.system, self.kp, self.kd

        def f(x, t):
            u = kp * (target.value(t) - x[0]) + kd * (target.rate(t) - x[3])
            return sys_.rhs(x, u), u

        n = int(round(duration / self.dt))
        h = self.dt
        xs = np.empty((n, self.x.size)) if record else None
        us = np.empty(n) if record else None
        ts = np.empty(n) if record else None
        x, t = self.x, self.t
        for i in range(n):
            k1, u = f(x, t)
            if record:
                xs[i], us[i], ts[i] = x, u, t
            k2, _ = f(x + 0.5 * h * k1, t + 0.5 * h)
            k3, _ = f(x + 0.5 * h * k2, t + 0.5 * h)
            k4, _ = f(x + h * k3, t + h)
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            t += h
            if not np.all(np.isfinite(x)) or np.abs(x[1]) > 10.0:
                raise NotStabilized(f"controlled response diverged at t={t:.3f}")
        self.x, self.t = x, t
        return (ts, xs, us) if record else None


def find_unstable_lco_pd(system_params: AeroParams, mu, gains, target: HarmonicTarget,
                         settle=10.0, record=1.0, dt=1e-3, observe=(0, 1),
                         max_iter=30, rtol=2e-4, invasive_limit=0.01,
                         x0=None) -> LcoRecord:
    """Stabilise an LCO with PD heave control and make the control noninvasive.

    The heave target is a truncated Fourier series. Its mean and higher
    harmonics follow a fixed-point update towards the response, while the
    fundamental amplitude and frequency are found by a finite-difference
    Newton iteration on the fundamental mismatch. Each evaluation settles and
    measures over whole target periods so that warm starts stay in phase.
    Once converged, the control force must carry less than ``invasive_limit``
    of the mean-square elastic heave force, otherwise :class:`Invasive` is
    raised.
    """
    system = AeroSystem(system_params, U=mu)
    n_h = target.cos.size
    tgt = HarmonicTarget(target.omega, target.cos.copy(), target.sin.copy(), target.mean)
    if x0 is None:
        x0 = np.zeros(6)
        x0[0] = tgt.value(0.0)
        x0[3] = tgt.rate(0.0)
    runner = _ControlledRun(system, gains, dt, x0)
    warm = runner.x.copy()

    def periods(tg, duration):
        return max(1, int(round(duration * tg.omega / (2 * np.pi))))

    def evaluate(tg, start):
        runner.t, runner.x = 0.0, start.copy()
        span = 2 * np.pi / tg.omega
        runner.run(tg, periods(tg, settle) * span)
        end_settle = runner.x.copy()
        ts, xs, us = runner.run(tg, periods(tg, record) * span, record=True)
        mean, c, s = _fourier_coeffs(xs[:, 0], ts, tg.omega, n_h)
        return (mean, c, s), end_settle

    params = np.array([tgt.cos[0], tgt.omega])
    converged = False
    for it in range(max_iter):
        tgt.cos[0], tgt.omega = params
        (mean, c, s), warm = evaluate(tgt, warm)
        err = np.array([c[0] - tgt.cos[0], s[0]])
        scale = max(abs(tgt.cos[0]), 1e-12)
        higher = max(np.max(np.abs(c[1:] - tgt.cos[1:]), initial=0.0),
                     np.max(np.abs(s[1:] - tgt.sin[1:]), initial=0.0),
                     abs(mean - tgt.mean))
        logger.debug("pd iter %d: A=%.6g w=%.6g err=%s higher=%.3g",
                     it, params[0], params[1], err, higher)
        if np.max(np.abs(err)) < rtol * scale and higher < 10 * rtol * scale:
            converged = True
            break
        tgt.mean = mean
        tgt.cos[1:] = c[1:]
        tgt.sin[1:] = s[1:]
        J = np.empty((2, 2))
        # steps sit well above the settling noise of the harmonic estimates
        for j, hstep in enumerate((1e-2 * scale, 1e-3 * tgt.omega)):
            trial = params.copy()
            trial[j] += hstep
            tg2 = HarmonicTarget(trial[1], tgt.cos.copy(), tgt.sin.copy(), tgt.mean)
            tg2.cos[0] = trial[0]
            (_, c2, s2), _ = evaluate(tg2, warm)
            J[:, j] = (np.array([c2[0] - trial[0], s2[0]]) - err) / hstep
        try:
            delta = np.linalg.solve(J, -err)
        except np.linalg.LinAlgError as exc:
            raise NotStabilized("singular noninvasiveness Jacobian") from exc
        # Limit the step to keep the controlled orbit in its basin.
        lim = np.array([0.2 * scale, 0.05 * tgt.omega])
        ratio = np.max(np.abs(delta) / lim)
        if ratio > 1:
            delta /= ratio
        params = params + delta
        if params[0] <= 0 or params[1] <= 0:
            raise NotStabilized("target amplitude or frequency became non-positive")
    if not converged:
        raise NotStabilized(f"noninvasive target not found in {max_iter} iterations")
    runner.t, runner.x = 0.0, warm.copy()
    n_rec = int(round(record / dt))
    ts, xs, us = runner.run(tgt, n_rec * dt, record=True)
    elastic = system.params.k_h * xs[:, 0]
    ratio = float(np.mean(us**2) / np.mean(elastic**2))
    if ratio > invasive_limit:
        raise Invasive(f"control power ratio {ratio:.3g} exceeds {invasive_limit}")
    return LcoRecord(mu=float(mu), stability=UNSTABLE, t=ts - ts[0],
                     states=xs[:, list(observe)], provenance="stabilized",
                     meta={"control_ratio": ratio, "target": tgt})


# ---------------------------------------------------------------------------
# Standard training sets
# ---------------------------------------------------------------------------

VDP_MU = (0.1, 0.28, 0.46, 0.64, 0.82, 1.0)
AERO_STABLE_MU = (15.1, 15.9, 16.7, 17.5)
AERO_UNSTABLE_MU = (15.1, 15.9, 16.7, 17.7)
# Held-out airspeeds for validating trained aeroelastic models.
AERO_HELD_OUT = {"stable": 15.5, "unstable": 16.3}


def vdp_record(mu, dt=0.02, record_time=10.0, settle_time=100.0, substeps=4):
    """Stable Van der Pol LCO record; the start point is a small perturbation."""
    return simulate_lco(vdp_field, mu, dt, settle_time, record_time, x0=(0.5, 0.0),
                        substeps=substeps)


def make_vdp_dataset(mu_values=VDP_MU, dt=0.02, record_time=10.0, settle_time=100.0,
                     substeps=4) -> TrainingDataset:
    recs = [vdp_record(mu, dt, record_time, settle_time, substeps) for mu in mu_values]
    return TrainingDataset(recs, {"z1": "nd", "z2": "nd", "mu": "nd"})


def aero_stable_record(mu, params: AeroParams | None = None, dt=1e-3, record_time=1.0,
                       settle_time=60.0, observe=(0, 1), substeps=2, x0=None,
                       pitch_amplitude=0.1):
    """Stable aeroelastic LCO reached from a large flutter-mode perturbation."""
    params = params or AeroParams()
    if x0 is None:
        x0 = pitch_amplitude * _flutter_mode(mu, params)
    return simulate_lco(lambda U: aero_field(U, params), mu, dt, settle_time, record_time,
                        x0=x0, observe=observe, substeps=substeps)


def aero_unstable_record(mu, params: AeroParams | None = None, dt=1e-3, record_time=1.0,
                         observe=(0, 1), guess=None, n_steps=2000):
    """Unstable aeroelastic LCO by shooting.

    The default guess scales the stable orbit at ``mu`` down towards the
    unstable branch; ``guess`` may supply ``(period, state)`` explicitly.
    """
    params = params or AeroParams()
    rhs = lambda U: aero_field(U, params)  # noqa: E731
    if guess is None:
        try:
            period, state = _aero_unstable_guess(mu, params)
            return find_unstable_lco_shooting(rhs, mu, period, state, dt=dt,
                                              record_time=record_time, observe=observe,
                                              n_steps=n_steps)
        except NoConvergence:
            period, state = _aero_unstable_continuation(mu, params, n_steps)
    else:
        period, state = guess
    return find_unstable_lco_shooting(rhs, mu, period, state, dt=dt, record_time=record_time,
                                      observe=observe, n_steps=n_steps)


def _aero_unstable_continuation(mu, params, n_steps=2000, start_offset=0.3, step=0.2):
    """Continue the unstable branch from just below the Hopf point down to ``mu``."""
    mu_h = aero_hopf_speed(params)
    start = mu_h - start_offset
    T, x = _aero_unstable_guess(start, params)
    orbit = shoot_periodic_orbit(aero_field(start, params), T, x, n_steps=n_steps)
    orbit = continue_orbit(params, orbit, start, mu, step, n_steps)
    return orbit.period, orbit.x0


def continue_orbit(params, orbit: PeriodicOrbit, mu_from, mu_to, step=0.2, n_steps=2000):
    """Natural-parameter continuation of a periodic orbit in airspeed."""
    n = max(1, int(np.ceil(abs(mu_from - mu_to) / step)))
    for U in np.linspace(mu_from, mu_to, n + 1)[1:]:
        orbit = shoot_periodic_orbit(aero_field(U, params), orbit.period, orbit.x0, n_steps=n_steps)
    return orbit


def _flutter_mode(mu, params):
    """Real part of the least-damped eigenvector, normalised to unit pitch."""
    ev, vec = np.linalg.eig(params.linear_operator(mu))
    v = vec[:, np.argmax(ev.real)]
    return np.real(v / v[1])


def _aero_unstable_guess(mu, params):
    """Initial shooting guess from the linear flutter mode at the Hopf point.

    The mode is scaled to a pitch amplitude interpolated between zero at the
    Hopf point and a fraction of the stable pitch amplitude, then refined by a
    short bisection in amplitude on the one-period growth of the pitch peak.
    """
    f = aero_field(mu, params)
    T = 2 * np.pi / aero_flutter_frequency(mu, params)
    mode = _flutter_mode(mu, params)

    def growth(amp):
        # Compare later periods so that the fast transients have died out.
        traj = integrate(f, amp * mode, T / 100, 401)
        return np.max(np.abs(traj[300:, 1])) - np.max(np.abs(traj[200:300, 1]))

    # Bisection between decaying (small amplitude) and growing responses.
    lo, hi = 1e-4, 0.3
    g_lo = growth(lo)
    amps = np.geomspace(lo, hi, 80)
    sign_prev = np.sign(g_lo)
    bracket = None
    for amp in amps[1:]:
        g = growth(amp)
        if np.sign(g) != sign_prev and sign_prev < 0:
            bracket = (lo, amp)
            break
        lo, sign_prev = amp, np.sign(g)
    if bracket is None:
        raise NoConvergence(f"no unstable-orbit bracket found at mu={mu}")
    lo, hi = bracket
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if growth(mid) < 0:
            lo = mid
        else:
            hi = mid
    return T, 0.5 * (lo + hi) * mode


def make_aero_dataset(stable_mu=AERO_STABLE_MU, unstable_mu=AERO_UNSTABLE_MU,
                      params: AeroParams | None = None, dt=1e-3, record_time=1.0,
                      observe=(0, 1)) -> TrainingDataset:
    params = params or AeroParams()
    recs = [aero_stable_record(mu, params, dt, record_time, observe=observe) for mu in stable_mu]
    unstable = {}
    prev = None
    for mu in sorted(unstable_mu, reverse=True):
        if prev is None:
            rec = aero_unstable_record(mu, params, dt, record_time, observe=observe)
        else:
            orbit = continue_orbit(params, prev.meta["orbit"], prev.mu, mu)
            rec = record_from_orbit(aero_field(mu, params), orbit, mu, dt, record_time, observe)
        unstable[mu] = prev = rec
    recs += [unstable[mu] for mu in unstable_mu]
    names = ["h", "alpha", "w"]
    units = {names[i]: u for i, u in zip(range(3), ("m", "rad", "nd")) if i in observe}
    units["mu"] = "m/s"
    return TrainingDataset(recs, units)


def make_standard_dataset(which, **kwargs) -> TrainingDataset:
    if which == "vdp":
        return make_vdp_dataset(**kwargs)
    if which == "aero":
        return make_aero_dataset(**kwargs)
    raise ValueError(f"unknown system {which!r}; expected 'vdp' or 'aero'")


def leading_multiplier(orbit: PeriodicOrbit) -> float:
    """Largest Floquet multiplier magnitude once the trivial one is removed."""
    trivial = np.argmin(np.abs(orbit.multipliers - 1.0))
    return float(np.max(np.abs(np.delete(orbit.multipliers, trivial))))


def aero_fold_speed(params: AeroParams | None = None, start_mu=15.2, step=0.05, min_step=2e-3,
                    n_steps=2000, n_fit=4, orbit: PeriodicOrbit | None = None):
    """Saddle-node of cycles located from the unstable branch.

    The unstable orbit is continued to lower airspeed with step halving until
    shooting fails or lands on the stable branch. Near the fold the leading
    multiplier obeys ``(lambda - 1)^2 ~ c (mu - mu_fold)``; a straight-line fit
    through the last ``n_fit`` points is extrapolated to zero.
    ``orbit`` may supply a known unstable orbit at ``start_mu``.
    Returns ``(mu_fold, samples)`` with ``samples`` the ``(mu, lambda)`` pairs.
    """
    params = params or AeroParams()
    if orbit is None:
        period, state = _aero_unstable_continuation(start_mu, params, n_steps)
        orbit = shoot_periodic_orbit(aero_field(start_mu, params), period, state, n_steps=n_steps)
    samples = [(start_mu, leading_multiplier(orbit))]
    mu = start_mu
    while step >= min_step:
        trial_mu = mu - step
        try:
            trial = shoot_periodic_orbit(aero_field(trial_mu, params), orbit.period, orbit.x0,
                                         n_steps=n_steps)
        except NoConvergence:
            trial = None
        if trial is None or trial.stable:
            step *= 0.5
            continue
        orbit, mu = trial, trial_mu
        samples.append((mu, leading_multiplier(orbit)))
    pts = np.array(samples[-n_fit:])
    slope, intercept = np.polyfit(pts[:, 0], (pts[:, 1] - 1.0) ** 2, 1)
    return float(-intercept / slope), samples
