"""Modified Hopf normal form with an optional quintic saturation term.

In polar form the amplitude obeys ``r' = (mu - mu0) r + a2 r^3 - q r^5`` with
``q`` one when the quintic term is enabled and zero otherwise. LCO radii are
the positive roots of the quadratic in ``r^2`` obtained after dividing by r.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

SUPERCRITICAL = "supercritical"
SUBCRITICAL = "subcritical"

# Relative distance to coalescence below which two roots count as one.
DOUBLE_ROOT_RTOL = 1e-8


@dataclass(frozen=True)
class NormalFormParams:
    mu0: float
    a2: float
    quintic_enabled: bool
    criticality: str

    def __post_init__(self):
        if self.criticality not in (SUPERCRITICAL, SUBCRITICAL):
            raise ValueError(f"unknown criticality {self.criticality!r}")
        if self.criticality == SUBCRITICAL and not (self.quintic_enabled and self.a2 > 0):
            raise ValueError("subcritical form needs the quintic term and a2 > 0")
        if self.criticality == SUPERCRITICAL and not self.a2 < 0:
            raise ValueError("supercritical form needs a2 < 0")

    @classmethod
    def supercritical(cls, mu0=0.0, a2=-1.0, quintic=False):
        return cls(mu0, a2, quintic, SUPERCRITICAL)

    @classmethod
    def subcritical(cls, mu0, a2):
        return cls(mu0, a2, True, SUBCRITICAL)

    def replace(self, **changes):
        d = dict(mu0=self.mu0, a2=self.a2, quintic_enabled=self.quintic_enabled,
                 criticality=self.criticality)
        d.update(changes)
        return NormalFormParams(**d)


@dataclass(frozen=True)
class LcoSolution:
    radius: float
    stable: bool
    mu: float


def radial_flow(p: NormalFormParams, r, mu):
    q = 1.0 if p.quintic_enabled else 0.0
    return (mu - p.mu0) * r + p.a2 * r**3 - q * r**5


def radial_flow_derivative(p: NormalFormParams, r, mu):
    """d(r')/dr; negative on stable LCOs."""
    q = 1.0 if p.quintic_enabled else 0.0
    return (mu - p.mu0) + 3.0 * p.a2 * r**2 - 5.0 * q * r**4


def lco_radii(p: NormalFormParams, mu) -> list[LcoSolution]:
    """All strictly positive LCO radii at ``mu``, stable ones first.

    The equilibrium r = 0 is never reported. A double root at the saddle-node
    is returned once and labelled unstable.
    """
    mu = float(mu)
    c = mu - p.mu0
    if not p.quintic_enabled:
        # a2 r^2 + c = 0
        s = -c / p.a2
        if s <= 0:
            return []
        r = math.sqrt(s)
        return [LcoSolution(r, radial_flow_derivative(p, r, mu) < 0, mu)]
    # -s^2 + a2 s + c = 0  ->  s = (a2 +- sqrt(a2^2 + 4c)) / 2
    disc = p.a2 * p.a2 + 4.0 * c
    scale = max(p.a2 * p.a2, abs(4.0 * c), 1e-300)
    if disc < -DOUBLE_ROOT_RTOL * scale:
        return []
    if abs(disc) <= DOUBLE_ROOT_RTOL * scale:
        s = p.a2 / 2.0
        return [LcoSolution(math.sqrt(s), False, mu)] if s > 0 else []
    root = math.sqrt(disc)
    out = []
    for s in ((p.a2 + root) / 2.0, (p.a2 - root) / 2.0):
        if s > 0:
            r = math.sqrt(s)
            out.append(LcoSolution(r, radial_flow_derivative(p, r, mu) < 0, mu))
    out.sort(key=lambda sol: not sol.stable)
    return out


def lco_radius(p: NormalFormParams, mu, stable) -> float | None:
    """Radius of the LCO with the requested stability, or None.

    ``stable`` may be a bool or one of the labels ``"stable"``/``"unstable"``.
    """
    if isinstance(stable, str):
        if stable not in ("stable", "unstable"):
            raise ValueError(f"unknown stability label {stable!r}")
        stable = stable == "stable"
    for sol in lco_radii(p, mu):
        if sol.stable == stable:
            return sol.radius
    return None


def saddle_node_mu(p: NormalFormParams) -> float:
    if p.criticality != SUBCRITICAL or not p.quintic_enabled:
        raise ValueError("saddle-node of cycles only exists for the subcritical quintic form")
    return p.mu0 - p.a2 * p.a2 / 4.0


def radius_branch(p: NormalFormParams, mu_grid):
    return [(float(mu), lco_radii(p, mu)) for mu in mu_grid]
