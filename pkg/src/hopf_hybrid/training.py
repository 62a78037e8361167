"""Three-stage identification of a hybrid model from LCO records.

1. Linear part and offset of the coordinate map, with the correction network
   at zero and the normal-form coefficients held at their initial values.
2. Correction network together with ``mu0`` and ``a2``; linear part frozen.
3. Oscillation speed ``omega0`` and its correction network; map and normal
   form frozen.

Stages 1 and 2 minimise the orbit shape loss, stage 3 the time-series loss.
All training happens in the normalised observation frame stored in the model.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .coordinate_map import CoordinateMap, LinearMap, TranslationOffset, match_phase_angle, predicted_orbit
from .errors import HopfHybridError, MissingBranch, OptimizerAbort
from .model import HybridModel, ObservationScaling, dataset_fingerprint
from .neural_net import adam_minimize, lbfgs_minimize
from .normal_form import SUBCRITICAL, SUPERCRITICAL, NormalFormParams, lco_radius, saddle_node_mu
from .orbit_geometry import equispaced_angles, fit_descriptors_batch, fit_descriptors_vjp, measured_orbit, orbit_descriptor
from .reference_systems import STABLE, UNSTABLE
from .speed_model import (CONSTANT, FOURIER, PhaseRecordGroup, SpeedModel, dominant_angular_frequency,
                          integrate_phase, predict_points, speed_loss_and_grad)

logger = logging.getLogger(__name__)

NONSINGULAR_DET = 1e-6


class ConfigError(ValueError):
    def __init__(self, message, field_name=None):
        super().__init__(message)
        self.field_name = field_name


@dataclass(frozen=True)
class StageSchedule:
    adam_iters: int = 0
    adam_lr: float = 0.01
    lbfgs_iters: int = 0
    lbfgs_step: float = 1e-3

    def __post_init__(self):
        if self.adam_iters < 0 or self.lbfgs_iters < 0:
            raise ConfigError("iteration counts must be >= 0")
        if not (self.adam_lr > 0 and self.lbfgs_step > 0):
            raise ConfigError("learning rates must be > 0")

    @property
    def total(self):
        return self.adam_iters + self.lbfgs_iters


@dataclass(frozen=True)
class TrainingConfig:
    stage1: StageSchedule = StageSchedule(100, 0.01, 200, 0.01)
    stage2: StageSchedule = StageSchedule(300, 0.01, 1000, 1e-5)
    stage3: StageSchedule = StageSchedule(2000, 0.01, 1000, 1e-5)
    n_h: int = 10
    n_points: int = 100
    seed: int = 0
    criticality: str | None = None
    mu0_init: float | None = None
    a2_init: float | None = None
    mu_upper: float | None = None
    map_hidden: tuple = (32, 32)
    speed_hidden: tuple = (32, 32)
    speed_mode: str = FOURIER
    n_h_speed: int = 10
    downsample: int = 1000
    nonsingular_weight: float = 1e6
    missing_branch_weight: float = 1.0
    speed_penalty_weight: float = 1e3
    normalize: bool = True

    REQUIRED = ("stage1", "stage2", "stage3")

    def __post_init__(self):
        for name in ("stage1", "stage2", "stage3"):
            v = getattr(self, name)
            if isinstance(v, dict):
                object.__setattr__(self, name, _schedule(v, name))
        object.__setattr__(self, "map_hidden", tuple(int(n) for n in self.map_hidden))
        object.__setattr__(self, "speed_hidden", tuple(int(n) for n in self.speed_hidden))
        if self.speed_mode not in (CONSTANT, FOURIER):
            raise ConfigError(f"unknown speed_mode {self.speed_mode!r}", "speed_mode")
        if self.criticality not in (None, SUBCRITICAL, SUPERCRITICAL):
            raise ConfigError(f"unknown criticality {self.criticality!r}", "criticality")
        if self.n_h < 1 or self.n_points < 2 * self.n_h + 1:
            raise ConfigError("n_points must be at least 2*n_h + 1", "n_points")
        if not 2 <= self.downsample:
            raise ConfigError("downsample must be >= 2", "downsample")

    def to_dict(self):
        d = dataclasses.asdict(self)
        for k in ("map_hidden", "speed_hidden"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d, require_stages=True):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config field '{unknown[0]}'", unknown[0])
        if require_stages:
            for name in cls.REQUIRED:
                if name not in d:
                    raise ConfigError(f"missing config field '{name}'", name)
        return cls(**d)

    @classmethod
    def from_file(cls, path):
        path = str(path)
        with open(path, "rb") as fh:
            raw = fh.read()
        if path.endswith(".toml"):
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib
            d = tomllib.loads(raw.decode())
        else:
            d = json.loads(raw)
        return cls.from_dict(d)


def _schedule(d, name):
    fields = ("adam_iters", "adam_lr", "lbfgs_iters", "lbfgs_step")
    for f in fields:
        if f not in d:
            raise ConfigError(f"missing config field '{name}.{f}'", f"{name}.{f}")
    extra = sorted(set(d) - set(fields))
    if extra:
        raise ConfigError(f"unknown config field '{name}.{extra[0]}'", f"{name}.{extra[0]}")
    return StageSchedule(int(d["adam_iters"]), float(d["adam_lr"]), int(d["lbfgs_iters"]), float(d["lbfgs_step"]))


def vdp_config(**changes) -> TrainingConfig:
    """Schedules used for the Van der Pol example."""
    base = dict(stage1=StageSchedule(100, 0.01, 200, 0.01), stage2=StageSchedule(300, 0.01, 1000, 1e-5),
                stage3=StageSchedule(2000, 0.01, 1000, 1e-5), map_hidden=(32, 32), speed_hidden=(32, 32),
                speed_mode=FOURIER, n_h_speed=10, criticality=SUPERCRITICAL)
    base.update(changes)
    return TrainingConfig(**base)


def aero_config(**changes) -> TrainingConfig:
    """Schedules used for the aeroelastic example."""
    base = dict(stage1=StageSchedule(100, 0.01, 200, 0.01), stage2=StageSchedule(400, 0.01, 0, 1e-3),
                stage3=StageSchedule(300, 0.01, 1000, 1e-3), map_hidden=(21, 21), speed_hidden=(31, 31),
                speed_mode=CONSTANT, criticality=SUBCRITICAL, downsample=500)
    base.update(changes)
    return TrainingConfig(**base)


@dataclass
class TrainingReport:
    stage_traces: dict = field(default_factory=dict)
    stage_messages: dict = field(default_factory=dict)
    final_shape_loss: float | None = None
    final_speed_loss: float | None = None
    mu0: float | None = None
    a2: float | None = None
    omega0: float | None = None
    wall_time: float = 0.0
    config: dict = field(default_factory=dict)
    failed_stage: str | None = None
    error: str | None = None

    def to_dict(self):
        return dataclasses.asdict(self)

    def dumps(self):
        return json.dumps(self.to_dict(), indent=1) + "\n"


# ---------------------------------------------------------------------------
# Initial values
# ---------------------------------------------------------------------------

def infer_criticality(dataset):
    return SUBCRITICAL if any(r.stability == UNSTABLE for r in dataset.records) else SUPERCRITICAL


def initial_normal_form(dataset, cfg: TrainingConfig) -> NormalFormParams:
    """Starting ``(mu0, a2)`` that give every record a branch of its label.

    Without a supplied ``mu0_init`` the Hopf point is placed a quarter of the
    record span beyond the records: below them for supercritical data, above
    them (or midway to ``mu_upper``) for subcritical data. A subcritical
    ``a2`` is chosen so the fold sits a quarter span below the lowest record.
    """
    crit = cfg.criticality or infer_criticality(dataset)
    mus = np.array([r.mu for r in dataset.records])
    lo, hi = mus.min(), mus.max()
    span = max(hi - lo, 1e-3 * max(abs(hi), 1.0))
    if crit == SUPERCRITICAL:
        mu0 = cfg.mu0_init if cfg.mu0_init is not None else lo - 0.25 * span
        a2 = cfg.a2_init if cfg.a2_init is not None else -1.0
        return NormalFormParams.supercritical(mu0, a2)
    if cfg.mu0_init is not None:
        mu0 = cfg.mu0_init
    elif cfg.mu_upper is not None:
        mu0 = 0.5 * (hi + cfg.mu_upper)
    else:
        mu0 = hi + 0.25 * span
    a2 = cfg.a2_init if cfg.a2_init is not None else 2.0 * np.sqrt(max(mu0 - lo + 0.25 * span, 1e-12))
    return NormalFormParams.subcritical(mu0, a2)


def downsample_record(rec, limit):
    if len(rec.t) <= limit:
        return rec
    return rec.downsampled(limit)


# ---------------------------------------------------------------------------
# Shape loss with gradient
# ---------------------------------------------------------------------------

def _radius_and_derivs(p: NormalFormParams, mu, stability):
    """Radius and its derivatives w.r.t. ``(mu0, a2)``; None if the branch is missing."""
    r = lco_radius(p, mu, stability)
    if r is None:
        return None
    s = r * r
    q = 1.0 if p.quintic_enabled else 0.0
    dF = p.a2 - 2.0 * q * s
    ds_dmu0, ds_da2 = 1.0 / dF, -s / dF
    return r, ds_dmu0 / (2 * r), ds_da2 / (2 * r)


def _branch_violation(p: NormalFormParams, mu, stability):
    """Distance in mu to the region where the requested branch exists, with gradient."""
    if p.criticality == SUPERCRITICAL:
        return max(p.mu0 - mu, 0.0), 1.0, 0.0
    fold = saddle_node_mu(p)
    below = fold - mu
    if stability == STABLE or below >= mu - p.mu0:
        return max(below, 0.0), 1.0, -p.a2 / 2.0
    return max(mu - p.mu0, 0.0), -1.0, 0.0


class ShapeProblem:
    """Shape loss over a fixed set of measured orbits, with gradients."""

    def __init__(self, records, n_h, n_points, missing_weight=1.0):
        self.records = list(records)
        self.n_h = n_h
        self.n_points = n_points
        self.missing_weight = missing_weight
        self.phi = equispaced_angles(n_points)
        self.mu = np.array([r.mu for r in self.records])
        orbits = [measured_orbit(r) for r in self.records]
        self.centers = np.array([o.center for o in orbits])
        self.targets = np.array([orbit_descriptor(o, n_h).vector for o in orbits])
        self.target_norms = np.linalg.norm(self.targets, axis=1)

    def evaluate(self, cmap: CoordinateMap, p: NormalFormParams, need_grad=True):
        """Loss and gradients ``(rows, offset, nn, mu0, a2)``."""
        info = [_radius_and_derivs(p, r.mu, r.stability) for r in self.records]
        ok = [i for i, v in enumerate(info) if v is not None]
        loss_terms = np.zeros(len(self.records))
        g_mu0 = g_a2 = 0.0
        for i, v in enumerate(info):
            if v is None:
                viol, d0, d2 = _branch_violation(p, self.records[i].mu, self.records[i].stability)
                loss_terms[i] = self.target_norms[i] + self.missing_weight * viol
                g_mu0 += self.missing_weight * d0
                g_a2 += self.missing_weight * d2
        g_rows = np.zeros((2, 3))
        g_off = np.zeros(2)
        g_nn = np.zeros(cmap.nn.n_params)
        if ok:
            r = np.array([info[i][0] for i in ok])
            n = self.n_points
            U1 = r[:, None] * np.cos(self.phi)
            U2 = r[:, None] * np.sin(self.phi)
            MU = np.repeat(cmap.scale_mu(self.mu[ok]), n)
            X = np.column_stack([U1.ravel(), U2.ravel(), MU])
            Z, acts = cmap.forward_cache(X)
            fit = fit_descriptors_batch(Z.reshape(len(ok), n, 2), self.centers[ok], self.n_h)
            diff = fit.coef - self.targets[ok]
            dist = np.linalg.norm(diff, axis=1)
            loss_terms[ok] = dist
            if need_grad:
                g_coef = np.divide(diff, dist[:, None], out=np.zeros_like(diff), where=dist[:, None] > 0)
                g_pts = fit_descriptors_vjp(fit, g_coef).reshape(-1, 2)
                g_rows, g_off, g_nn, g_x = cmap.vjp(X, acts, g_pts)
                g_x = g_x.reshape(len(ok), n, 3)
                g_r = np.sum(g_x[..., 0] * np.cos(self.phi) + g_x[..., 1] * np.sin(self.phi), axis=1)
                g_mu0 += float(sum(g * info[i][1] for g, i in zip(g_r, ok)))
                g_a2 += float(sum(g * info[i][2] for g, i in zip(g_r, ok)))
        loss = 0.0
        for v in loss_terms:
            loss += float(v)
        if not need_grad:
            return loss
        return loss, (g_rows, g_off, g_nn, g_mu0, g_a2)


def _run_schedule(fun_grad, x0, sched: StageSchedule, stage):
    trace = []
    messages = []
    x = np.array(x0, dtype=float)
    try:
        if sched.adam_iters:
            res = adam_minimize(fun_grad, x, sched.adam_iters, sched.adam_lr)
            x = res.x
            trace += res.trace
        if sched.lbfgs_iters:
            res = lbfgs_minimize(fun_grad, x, sched.lbfgs_iters, step_scale=sched.lbfgs_step)
            x = res.x
            trace += res.trace
            messages.append(res.message)
    except OptimizerAbort as exc:
        raise OptimizerAbort(f"{stage}: {exc}", exc.iteration) from exc
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        # a diverging iterate breaks the loss evaluation itself
        raise OptimizerAbort(f"{stage}: numerical breakdown ({type(exc).__name__}: {exc})",
                             len(trace)) from exc
    return x, trace, messages


def _softplus(x):
    return float(np.logaddexp(0.0, x))


def _softplus_inv(y):
    return float(y + np.log(-np.expm1(-y)))


def _sigmoid(x):
    return float(0.5 * (1.0 + np.tanh(0.5 * x)))


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def stage1_fit_linear(problem: ShapeProblem, cmap: CoordinateMap, p: NormalFormParams, cfg: TrainingConfig):
    """Fit the six free linear entries and the offset; returns ``(cmap, trace, messages)``."""
    # an all-zero network is a stationary point stage 2 cannot leave
    base = cmap.with_(nn=cmap.nn.with_zero_output())
    w = cfg.nonsingular_weight

    def unpack(x):
        return base.with_(linear=_free_linear(x[:6]), offset=TranslationOffset(x[6:8]))

    def fun_grad(x):
        rows = x[:6].reshape(2, 3)
        det = rows[0, 0] * rows[1, 1] - rows[0, 1] * rows[1, 0]
        trial = base.with_(linear=_free_linear(x[:6]), offset=TranslationOffset(x[6:8]))
        loss, (g_rows, g_off, _, _, _) = problem.evaluate(trial, p)
        g_rows = g_rows.copy()
        if abs(det) < NONSINGULAR_DET:
            loss += w * (NONSINGULAR_DET - abs(det))
            sgn = -w * (1.0 if det >= 0 else -1.0)
            g_rows[0, 0] += sgn * rows[1, 1]
            g_rows[1, 1] += sgn * rows[0, 0]
            g_rows[0, 1] -= sgn * rows[1, 0]
            g_rows[1, 0] -= sgn * rows[0, 1]
        return loss, np.concatenate([g_rows.ravel(), g_off])

    x0 = np.concatenate([cmap.linear.rows.ravel(), cmap.offset.s])
    x, trace, msgs = _run_schedule(fun_grad, x0, cfg.stage1, "stage 1")
    if cfg.stage1.total == 0:
        return base, trace, msgs
    return unpack(x), trace, msgs


class _UncheckedLinear(LinearMap):
    """Linear map that skips the nonsingularity check (optimizer iterates only)."""

    def __post_init__(self):
        object.__setattr__(self, "matrix", np.asarray(self.matrix, dtype=float))


def _free_linear(flat):
    m = np.vstack([np.asarray(flat, dtype=float).reshape(2, 3), [0.0, 0.0, 1.0]])
    return _UncheckedLinear(m)


def stage2_fit_nn(problem: ShapeProblem, cmap: CoordinateMap, p: NormalFormParams, cfg: TrainingConfig):
    """Fit the correction network with ``mu0`` (and ``a2`` when subcritical)."""
    n_nn = cmap.nn.n_params
    train_a2 = p.criticality == SUBCRITICAL

    def unpack(x):
        nn = cmap.nn.with_params(x[:n_nn])
        mu0 = float(x[n_nn])
        a2 = _softplus(x[n_nn + 1]) if train_a2 else p.a2
        return cmap.with_(nn=nn), p.replace(mu0=mu0, a2=a2)

    def fun_grad(x):
        trial_map, trial_p = unpack(x)
        loss, (_, _, g_nn, g_mu0, g_a2) = problem.evaluate(trial_map, trial_p)
        g = [g_nn, [g_mu0]]
        if train_a2:
            g.append([g_a2 * _sigmoid(x[n_nn + 1])])
        return loss, np.concatenate(g)

    x0 = np.concatenate([cmap.nn.params, [p.mu0]] + ([[_softplus_inv(p.a2)]] if train_a2 else []))
    x, trace, msgs = _run_schedule(fun_grad, x0, cfg.stage2, "stage 2")
    if cfg.stage2.total == 0:
        return cmap, p, trace, msgs
    new_map, new_p = unpack(x)
    return new_map, new_p, trace, msgs


def build_phase_groups(records, cmap: CoordinateMap, p: NormalFormParams, downsample):
    """Group records by sample count and step; match each record's initial phase."""
    buckets = {}
    for rec in records:
        rec = downsample_record(rec, downsample)
        r = lco_radius(p, rec.mu, rec.stability)
        if r is None:
            raise MissingBranch(f"no {rec.stability} normal-form orbit at mu={rec.mu:g}")
        z = np.asarray(rec.states)[:, :2]
        center = predicted_orbit(cmap, p, rec.mu, rec.stability).center
        theta0 = match_phase_angle(cmap, r, rec.mu, z[0], center)
        key = (len(rec.t), float(rec.dt))
        buckets.setdefault(key, []).append((r, rec.mu, theta0, z))
    groups = []
    for (n, h), items in buckets.items():
        groups.append(PhaseRecordGroup(np.array([i[0] for i in items]), np.array([i[1] for i in items]),
                                       np.array([i[2] for i in items]), h, np.stack([i[3] for i in items])))
    return groups


def speed_loss(dataset, cmap, p, speed: SpeedModel, downsample=1000):
    """Time-series loss summed record by record (evaluation path, no gradient)."""
    total = 0.0
    for rec in dataset.records:
        rec = downsample_record(rec, downsample)
        r = lco_radius(p, rec.mu, rec.stability)
        if r is None:
            raise MissingBranch(f"no {rec.stability} normal-form orbit at mu={rec.mu:g}")
        z = np.asarray(rec.states)[:, :2]
        center = predicted_orbit(cmap, p, rec.mu, rec.stability).center
        theta0 = match_phase_angle(cmap, r, rec.mu, z[0], center)
        theta = integrate_phase(speed, r, rec.mu, theta0, rec.t - rec.t[0])
        err = predict_points(cmap, r, rec.mu, theta) - z
        for e in np.hypot(err[:, 0], err[:, 1]):
            total += float(e)
    return total


def stage3_fit_speed(records, cmap, p, cfg: TrainingConfig, mu_ref=0.0, mu_scale=1.0):
    groups = build_phase_groups(records, cmap, p, cfg.downsample)
    first = downsample_record(records[0], cfg.downsample)
    omega0 = dominant_angular_frequency(first.t, np.asarray(first.states)[:, 0])
    speed = SpeedModel.initial(omega0, cfg.speed_mode, cfg.speed_hidden, cfg.n_h_speed,
                               seed=cfg.seed + 1, mu_ref=mu_ref, mu_scale=mu_scale)
    n_nn = speed.nn.n_params

    def unpack(x):
        return speed.with_(omega0=float(x[0]), nn=speed.nn.with_params(x[1:]))

    def fun_grad(x):
        loss, g_w, g_nn = speed_loss_and_grad(unpack(x), cmap, groups, cfg.speed_penalty_weight)
        return loss, np.concatenate([[g_w], g_nn])

    x0 = np.concatenate([[speed.omega0], speed.nn.params])
    assert x0.size == n_nn + 1
    x, trace, msgs = _run_schedule(fun_grad, x0, cfg.stage3, "stage 3")
    if cfg.stage3.total == 0:
        return speed, trace, msgs
    return unpack(x), trace, msgs


def _mu_normalisation(dataset):
    mus = np.array([r.mu for r in dataset.records])
    ref = 0.5 * (mus.min() + mus.max())
    half = 0.5 * (mus.max() - mus.min())
    return float(ref), float(half if half > 0 else 1.0)


def orbit_orientation(dataset):
    """+1 when the records circulate counterclockwise in the first two
    observed columns, -1 otherwise (majority of records by signed area).

    The shape loss cannot see direction and the phase speed is kept
    positive, so the sign of the linear block must be right from the start.
    """
    votes = 0.0
    for rec in dataset.records:
        z = np.asarray(rec.states)[:, :2]
        z = z - z.mean(axis=0)
        area = np.sum(z[:-1, 0] * z[1:, 1] - z[1:, 0] * z[:-1, 1])
        votes += np.sign(area)
    return -1.0 if votes < 0 else 1.0


def train_full(dataset, cfg: TrainingConfig, column_names=()):
    """Run the three stages; returns ``(HybridModel, TrainingReport)``.

    On failure the exception carries the partial report as ``exc.report``.
    """
    t_start = time.perf_counter()
    report = TrainingReport(config=cfg.to_dict())
    if len(dataset) < 1:
        raise ValueError("dataset has no records")
    scaling = (ObservationScaling.fit(dataset, column_names) if cfg.normalize
               else ObservationScaling.identity(dataset.m, column_names))
    data_n = scaling.apply_dataset(dataset)
    mu_ref, mu_scale = _mu_normalisation(dataset)
    p = initial_normal_form(dataset, cfg)
    cmap = CoordinateMap.initial(cfg.map_hidden, cfg.seed, mu_ref, mu_scale)
    cmap = cmap.with_(linear=LinearMap(np.diag([1.0, orbit_orientation(data_n), 1.0])))
    stage = "stage1"
    try:
        problem = ShapeProblem(data_n.records, cfg.n_h, cfg.n_points, cfg.missing_branch_weight)
        cmap, trace, msgs = stage1_fit_linear(problem, cmap, p, cfg)
        cmap = cmap.with_(linear=LinearMap(cmap.linear.matrix))
        report.stage_traces["stage1"], report.stage_messages["stage1"] = trace, msgs
        stage = "stage2"
        cmap, p, trace, msgs = stage2_fit_nn(problem, cmap, p, cfg)
        report.stage_traces["stage2"], report.stage_messages["stage2"] = trace, msgs
        report.mu0, report.a2 = p.mu0, p.a2
        report.final_shape_loss = problem.evaluate(cmap, p, need_grad=False)
        stage = "stage3"
        speed, trace, msgs = stage3_fit_speed(data_n.records, cmap, p, cfg, mu_ref, mu_scale)
        report.stage_traces["stage3"], report.stage_messages["stage3"] = trace, msgs
        report.omega0 = speed.omega0
        groups = build_phase_groups(data_n.records, cmap, p, cfg.downsample)
        report.final_speed_loss = speed_loss_and_grad(speed, cmap, groups, cfg.speed_penalty_weight,
                                                      need_grad=False)
        if dataset.m > 2:
            from .coordinate_map import fit_auxiliary_maps
            cmap = cmap.with_(aux=fit_auxiliary_maps(data_n, cmap, p))
    except (HopfHybridError, ValueError, np.linalg.LinAlgError) as exc:
        report.failed_stage = stage
        report.error = f"{type(exc).__name__}: {exc}"
        report.wall_time = time.perf_counter() - t_start
        exc.report = report
        raise
    model = HybridModel(p, cmap, speed, scaling, dataset_fingerprint(dataset), cfg.to_dict())
    report.wall_time = time.perf_counter() - t_start
    return model, report


# ---------------------------------------------------------------------------
# Leave-one-out
# ---------------------------------------------------------------------------

@dataclass
class FoldResult:
    record_id: str
    model: HybridModel | None
    mu0: float | None = None
    a2: float | None = None
    saddle_node: float | None = None
    orbit_error: float | None = None
    timeseries_nrmse: float | None = None
    error: str | None = None

    def summary(self):
        d = dataclasses.asdict(self)
        d.pop("model")
        return d


def timeseries_nrmse(model: HybridModel, rec, downsample=1000):
    """Root-mean-square error of the first two states over their peak-to-peak range."""
    rec = downsample_record(rec, downsample)
    z = np.asarray(rec.states)[:, :2]
    _, zhat = model.predict_timeseries(rec.mu, rec.stability, rec.t, z_init=z[0])
    rms = np.sqrt(np.mean((zhat[:, :2] - z) ** 2, axis=0))
    return float(np.max(rms / np.ptp(z, axis=0)))


def leave_one_out(dataset, cfg: TrainingConfig, fold_seed_stride=1):
    """Retrain without each record in turn and score the held-out record."""
    if len(dataset) < 2:
        raise ValueError("leave-one-out needs at least two records")
    results = []
    for i, rec in enumerate(dataset.records):
        fold_cfg = dataclasses.replace(cfg, seed=cfg.seed + fold_seed_stride * (i + 1))
        try:
            model, report = train_full(dataset.without(i), fold_cfg)
        except (HopfHybridError, ValueError, np.linalg.LinAlgError) as exc:
            results.append(FoldResult(rec.record_id, None, error=f"{type(exc).__name__}: {exc}"))
            continue
        nf = model.normal_form
        fold = FoldResult(rec.record_id, model, nf.mu0, nf.a2,
                          saddle_node_mu(nf) if nf.criticality == SUBCRITICAL else None)
        held = type(dataset)([rec], dict(dataset.units))
        try:
            fold.orbit_error = model.orbit_errors(held)[0]["relative"]
            if cfg.stage3.total > 0:
                fold.timeseries_nrmse = timeseries_nrmse(model, rec, cfg.downsample)
        except HopfHybridError as exc:
            fold.error = f"{type(exc).__name__}: {exc}"
        results.append(fold)
    return results
