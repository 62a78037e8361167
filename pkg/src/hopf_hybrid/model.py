"""The assembled hybrid model: normal form, coordinate map and speed model.

Models serialize to versioned JSON. Every double is written as a decimal
string with 17 significant digits, which round-trips exactly, so a model that
is read and written again produces identical bytes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .coordinate_map import (AuxiliaryMap, CoordinateMap, LinearMap, TranslationOffset,
                             invertibility_report, match_phase_angle, predicted_orbit)
from .errors import MissingBranch
from .neural_net import Mlp
from .normal_form import (SUBCRITICAL, NormalFormParams, lco_radii, lco_radius, saddle_node_mu)
from .orbit_geometry import (DEFAULT_HARMONICS, DEFAULT_ORBIT_POINTS, PlanarOrbit,
                             equispaced_angles, fit_descriptors_batch, orbit_descriptor, shape_loss)
from .speed_model import SpeedModel, integrate_phase

FORMAT_VERSION = 1
MODEL_KIND = "hopf_hybrid_model"


def fmt_float(x) -> str:
    return format(float(x), ".17g")


def _enc(a):
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        return fmt_float(a)
    return [_enc(v) for v in a]


def _dec(v):
    if isinstance(v, list):
        return np.array([_dec(x) for x in v], dtype=float)
    return float(v)


@dataclass(frozen=True)
class ObservationScaling:
    """Per-column affine normalisation ``z~ = (z - center) / scale``."""

    center: np.ndarray
    scale: np.ndarray
    columns: tuple = ()

    def __post_init__(self):
        c = np.array(self.center, dtype=float).ravel()
        s = np.array(self.scale, dtype=float).ravel()
        if c.shape != s.shape or np.any(s <= 0) or not np.all(np.isfinite(c)):
            raise ValueError("scaling needs finite centers and positive scales of equal length")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "scale", s)
        object.__setattr__(self, "columns", tuple(self.columns))

    @classmethod
    def identity(cls, m, columns=()):
        return cls(np.zeros(m), np.ones(m), columns)

    @classmethod
    def fit(cls, dataset, columns=()):
        Z = np.vstack([np.asarray(r.states) for r in dataset.records])
        s = Z.std(axis=0)
        s[s == 0] = 1.0
        return cls(Z.mean(axis=0), s, columns)

    def apply(self, z):
        return (np.asarray(z, dtype=float) - self.center[: np.shape(z)[-1]]) / self.scale[: np.shape(z)[-1]]

    def invert(self, z):
        z = np.asarray(z, dtype=float)
        return z * self.scale[: z.shape[-1]] + self.center[: z.shape[-1]]

    def apply_dataset(self, dataset):
        from .reference_systems import LcoRecord, TrainingDataset

        recs = [LcoRecord(r.mu, r.stability, r.t, self.apply(r.states), r.provenance, r.record_id)
                for r in dataset.records]
        return TrainingDataset(recs, dict(dataset.units))


def dataset_fingerprint(dataset) -> str:
    h = hashlib.sha256()
    for r in dataset.records:
        h.update(f"{r.record_id}|{fmt_float(r.mu)}|{r.stability}|".encode())
        h.update(np.ascontiguousarray(r.t, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(r.states, dtype="<f8").tobytes())
    return "sha256:" + h.hexdigest()


def _mlp_to_dict(net: Mlp):
    return {"layer_sizes": list(net.layer_sizes),
            "weights": [_enc(w) for w in net.weights],
            "biases": [_enc(b) for b in net.biases]}


def _mlp_from_dict(d):
    return Mlp(d["layer_sizes"], [_dec(w).reshape(n_out, n_in) for w, n_in, n_out in
                                  zip(d["weights"], d["layer_sizes"][:-1], d["layer_sizes"][1:])],
               [_dec(b).reshape(-1) for b in d["biases"]])


@dataclass
class HybridModel:
    normal_form: NormalFormParams
    cmap: CoordinateMap
    speed: SpeedModel
    scaling: ObservationScaling
    fingerprint: str = ""
    config: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    # -- serialization -----------------------------------------------------

    def to_dict(self):
        nf, cm, sp = self.normal_form, self.cmap, self.speed
        return {
            "kind": MODEL_KIND,
            "format_version": self.format_version,
            "normal_form": {"mu0": fmt_float(nf.mu0), "a2": fmt_float(nf.a2),
                            "quintic_enabled": nf.quintic_enabled, "criticality": nf.criticality},
            "coordinate_map": {
                "linear": _enc(cm.linear.matrix),
                "offset": _enc(cm.offset.s),
                "mu_ref": fmt_float(cm.mu_ref),
                "mu_scale": fmt_float(cm.mu_scale),
                "nn": _mlp_to_dict(cm.nn),
                "aux": [{"column": a.column, "coefficients": _enc(a.coefficients),
                         "ridge": fmt_float(a.ridge)} for a in cm.aux],
            },
            "speed": {"mode": sp.mode, "omega0": fmt_float(sp.omega0), "n_h_speed": sp.n_h_speed,
                      "mu_ref": fmt_float(sp.mu_ref), "mu_scale": fmt_float(sp.mu_scale),
                      "nn": _mlp_to_dict(sp.nn)},
            "observation_scaling": {"center": _enc(self.scaling.center), "scale": _enc(self.scaling.scale),
                                    "columns": list(self.scaling.columns)},
            "dataset_fingerprint": self.fingerprint,
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("kind") != MODEL_KIND:
            raise ValueError("not a hybrid model document")
        version = int(d["format_version"])
        if version > FORMAT_VERSION:
            raise ValueError(f"model format version {version} is newer than supported ({FORMAT_VERSION})")
        nf = d["normal_form"]
        normal_form = NormalFormParams(float(nf["mu0"]), float(nf["a2"]), bool(nf["quintic_enabled"]),
                                       nf["criticality"])
        cm = d["coordinate_map"]
        aux = [AuxiliaryMap(int(a["column"]), _dec(a["coefficients"]), float(a["ridge"])) for a in cm["aux"]]
        cmap = CoordinateMap(LinearMap(_dec(cm["linear"])), TranslationOffset(_dec(cm["offset"])),
                             _mlp_from_dict(cm["nn"]), float(cm["mu_ref"]), float(cm["mu_scale"]), aux)
        sp = d["speed"]
        speed = SpeedModel(float(sp["omega0"]), _mlp_from_dict(sp["nn"]), sp["mode"], int(sp["n_h_speed"]),
                           float(sp["mu_ref"]), float(sp["mu_scale"]))
        sc = d["observation_scaling"]
        scaling = ObservationScaling(_dec(sc["center"]), _dec(sc["scale"]), tuple(sc.get("columns", ())))
        return cls(normal_form, cmap, speed, scaling, d.get("dataset_fingerprint", ""),
                   d.get("config", {}), version)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def loads(cls, text):
        return cls.from_dict(json.loads(text))

    # -- prediction in observed units --------------------------------------

    @property
    def m(self):
        return self.scaling.center.size

    def _to_physical(self, z2, u1=None, u2=None, mu=None):
        cols = [z2]
        if self.cmap.aux and u1 is not None:
            cols.append(self.cmap.aux_forward(u1, u2, mu))
        z = np.column_stack(cols)
        return self.scaling.invert(z)

    def radius(self, mu, stability):
        r = lco_radius(self.normal_form, mu, stability)
        if r is None:
            raise MissingBranch(f"no {stability} orbit at mu={float(mu):g}")
        return r

    def orbit_points(self, mu, stability, n_points=DEFAULT_ORBIT_POINTS):
        """Predicted orbit in observed units, one row per point."""
        r = self.radius(mu, stability)
        phi = equispaced_angles(n_points)
        u1, u2 = r * np.cos(phi), r * np.sin(phi)
        return self._to_physical(self.cmap.forward(u1, u2, np.full(n_points, mu)), u1, u2, mu)

    def normalized_orbit(self, mu, stability, n_points=DEFAULT_ORBIT_POINTS) -> PlanarOrbit:
        return predicted_orbit(self.cmap, self.normal_form, mu, stability, n_points)

    def initial_phase(self, mu, stability, z_init=None):
        """Normal-form angle matching an observed initial point (angle 0 if none)."""
        r = self.radius(mu, stability)
        if z_init is None:
            return 0.0
        zn = self.scaling.apply(np.asarray(z_init, dtype=float)[:2])
        center = self.normalized_orbit(mu, stability).center
        return match_phase_angle(self.cmap, r, mu, zn, center)

    def predict_timeseries(self, mu, stability, t_grid, z_init=None, substeps=1):
        r = self.radius(mu, stability)
        theta0 = self.initial_phase(mu, stability, z_init)
        theta = integrate_phase(self.speed, r, mu, theta0, np.asarray(t_grid, dtype=float) - t_grid[0],
                                substeps=substeps)
        u1, u2 = r * np.cos(theta), r * np.sin(theta)
        z = self._to_physical(self.cmap.forward(u1, u2, np.full(theta.shape, mu)), u1, u2, mu)
        return theta, z

    # -- losses in the normalised frame ------------------------------------

    def normalized(self, dataset):
        return self.scaling.apply_dataset(dataset)

    def shape_loss(self, dataset, n_points=None, n_h=None):
        n_points = n_points or self.config.get("n_points", DEFAULT_ORBIT_POINTS)
        n_h = n_h or self.config.get("n_h", DEFAULT_HARMONICS)
        return shape_loss(self.normalized(dataset), self.cmap, self.normal_form, n_points, n_h)

    def speed_loss(self, dataset, downsample=None):
        from .training import speed_loss

        downsample = downsample or self.config.get("downsample", 1000)
        return speed_loss(self.normalized(dataset), self.cmap, self.normal_form, self.speed, downsample)

    def orbit_errors(self, dataset, n_points=None, n_h=None):
        """Per-record descriptor distance in the normalised frame, absolute and relative to a0."""
        n_points = n_points or self.config.get("n_points", DEFAULT_ORBIT_POINTS)
        n_h = n_h or self.config.get("n_h", DEFAULT_HARMONICS)
        out = []
        for rec in self.normalized(dataset).records:
            meas = PlanarOrbit.from_points(np.asarray(rec.states)[:, :2])
            d_meas = orbit_descriptor(meas, n_h)
            pts = self.normalized_orbit(rec.mu, rec.stability, n_points).points
            fit = fit_descriptors_batch(pts[None], meas.center[None], n_h)
            dist = float(np.linalg.norm(fit.coef[0] - d_meas.vector))
            out.append({"record_id": rec.record_id, "mu": rec.mu, "stability": rec.stability,
                        "distance": dist, "relative": dist / d_meas.a0})
        return out

    def invertibility(self, mu_range, grid=(25, 64, 11)):
        return invertibility_report(self.cmap, self.normal_form, mu_range, grid)

    # -- bifurcation diagram ------------------------------------------------

    def bifurcation_rows(self, mu_grid, n_points=DEFAULT_ORBIT_POINTS, n_h=DEFAULT_HARMONICS):
        """Rows ``(mu, branch, radius, amplitude, a0, z1_ptp, z2_ptp)``.

        ``amplitude`` is the largest distance of a predicted orbit point from
        the orbit centroid and ``a0`` the mean polar radius, both in the
        normalised frame; ``z*_ptp`` are peak-to-peak values in observed units.
        Marker rows with branch ``hopf`` and ``saddle_node`` are appended.
        """
        nf = self.normal_form
        rows = []
        for mu in mu_grid:
            for sol in lco_radii(nf, mu):
                rows.append(self._diagram_row(float(mu), "stable" if sol.stable else "unstable",
                                              sol.radius, n_points, n_h))
        rows.append(self._diagram_row(nf.mu0, "hopf", 0.0, n_points, n_h))
        if nf.criticality == SUBCRITICAL:
            rows.append(self._diagram_row(saddle_node_mu(nf), "saddle_node", np.sqrt(nf.a2 / 2), n_points, n_h))
        return rows

    def _diagram_row(self, mu, branch, r, n_points, n_h):
        phi = equispaced_angles(n_points)
        u1, u2 = r * np.cos(phi), r * np.sin(phi)
        zn = self.cmap.forward(u1, u2, np.full(n_points, mu))
        center = zn.mean(axis=0)
        amp = float(np.max(np.hypot(*(zn - center).T)))
        a0 = 0.0
        if r > 0 and amp > 0:
            a0 = float(fit_descriptors_batch(zn[None], center[None], n_h).coef[0, 0])
        zp = self.scaling.invert(zn)
        ptp = np.ptp(zp, axis=0)
        return (mu, branch, float(r), amp, a0, float(ptp[0]), float(ptp[1]))
