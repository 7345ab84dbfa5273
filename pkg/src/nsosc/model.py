"""Oscillator parameters and the catalogue of target statistics.

Two white-noise driven single-degree-of-freedom oscillators are supported:

* the elasto-perfectly-plastic oscillator, whose elastic deformation Z is
  confined to [-P_Y, P_Y] and flows plastically while pinned at the yield
  bound, and
* the vibro-impact (obstacle) oscillator, whose displacement X is confined
  to [-P_O, P_O] and rebounds with restitution e at the obstacle.

Both reduce to the same two questions: what is the expected value of a
functional of the state, and how do two such functionals correlate.  The
catalogue below expresses every target as a tuple of observables
(f, g, phi, psi), discount rates, a horizon and a lag, together with the
solve pipeline that evaluates it.  The PDE engine and the Monte Carlo
engine both consume these specs, so a preset is defined exactly once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable

import numpy as np

Observable = Callable[[np.ndarray, np.ndarray], np.ndarray]


class OscillatorKind(Enum):
    ELASTO_PLASTIC = "elasto-plastic"
    OBSTACLE = "obstacle"


class Pipeline(Enum):
    """How a quantity is evaluated.

    PARABOLIC_A        E[ e^{-lam T} f(S_T) + int_0^T e^{-lam t} g dt ]
    PARABOLIC_APRIME   expectation of the product of two such functionals,
                       the second with observables (phi, psi), rate mu and
                       horizon T + lag
    ELLIPTIC_B         E[ int_0^inf e^{-lam t} g dt ]
    ELLIPTIC_BPRIME    E of the product of two discounted integrals (g, lam)
                       and (psi, mu)
    STATIONARY_C       lim_{T->inf} E[ f(S_T) ]
    GROWTH_RATE_CPRIME lim_{T->inf} (1/T) E[ (int_0^T g)(int_0^T psi) ]
    """

    PARABOLIC_A = "parabolic-A"
    PARABOLIC_APRIME = "parabolic-Aprime"
    ELLIPTIC_B = "elliptic-B"
    ELLIPTIC_BPRIME = "elliptic-Bprime"
    STATIONARY_C = "stationary-C"
    GROWTH_RATE_CPRIME = "growth-rate-Cprime"


PRIMED_PIPELINES = frozenset(
    {Pipeline.PARABOLIC_APRIME, Pipeline.ELLIPTIC_BPRIME, Pipeline.GROWTH_RATE_CPRIME}
)


@dataclass(frozen=True)
class OscillatorParams:
    """Physical constants of one oscillator.

    c0 is the viscous damping rate, k the stiffness, and `bound` is the
    constraint half-width: the plastic yield P_Y or the obstacle position
    P_O.  `restitution` only matters for the obstacle kind.
    """

    c0: float
    k: float
    bound: float
    kind: OscillatorKind
    restitution: float = 1.0

    def __post_init__(self):
        if not (self.c0 > 0.0 and self.k > 0.0 and self.bound > 0.0):
            raise ValueError("c0, k and bound must all be positive")
        if self.kind is OscillatorKind.OBSTACLE and not 0.0 <= self.restitution <= 1.0:
            raise ValueError("restitution must lie in [0, 1]")

    @property
    def omega(self) -> float:
        """Damped angular frequency; real only in the underdamped regime 4k > c0^2."""
        disc = 4.0 * self.k - self.c0 ** 2
        if disc <= 0.0:
            raise ValueError("underdamped regime 4k > c0^2 required (omega real)")
        return 0.5 * math.sqrt(disc)


def elastoplastic_params(c0: float = 1.0, k: float = 1.0, bound: float = 0.25) -> OscillatorParams:
    return OscillatorParams(c0=c0, k=k, bound=bound, kind=OscillatorKind.ELASTO_PLASTIC)


def obstacle_params(
    c0: float = 1.0, k: float = 1.0, bound: float = 0.5, restitution: float = 0.5
) -> OscillatorParams:
    return OscillatorParams(
        c0=c0, k=k, bound=bound, kind=OscillatorKind.OBSTACLE, restitution=restitution
    )


# --- observables -----------------------------------------------------------
#
# All observables take physical coordinates (z, y) -- z is the elastic
# deformation (plastic case) or the displacement (obstacle case) -- and are
# numpy-vectorized.  Constrained states sit exactly on +-bound (the grid
# carries the bound nodes exactly and the simulation clamps to the bound),
# so indicator observables may compare with == safely.


def constraint_indicator(bound: float) -> Observable:
    """1 where |z| equals the constraint bound, else 0."""

    def f(z, y):
        return np.where(np.abs(z) == bound, 1.0, 0.0) * np.ones_like(y)

    return f


def kinetic_energy() -> Observable:
    def f(z, y):
        return np.square(y) * np.ones_like(z)

    return f


def plastic_flow(bound: float) -> Observable:
    """Velocity while pinned at the yield bound; integrates to the plastic deformation."""

    def g(z, y):
        return y * np.where(np.abs(z) == bound, 1.0, 0.0)

    return g


def displacement() -> Observable:
    def g(z, y):
        return z * np.ones_like(y)

    return g


def obstacle_proximity(bound: float, eps: float) -> Observable:
    """1 on the low-energy neighborhood of either obstacle: hypot(|x|-bound, y) <= eps."""

    def f(z, y):
        return np.where(np.hypot(np.abs(z) - bound, y) <= eps, 1.0, 0.0)

    return f


@dataclass(frozen=True)
class QuantitySpec:
    """One fully-specified target quantity.

    The observable slots that a pipeline does not consume may be None.
    For self-correlation targets (variance of an accumulated integral)
    the second leg (phi, psi) repeats the first and lag == 0.
    """

    name: str
    pipeline: Pipeline
    terminal_f: Observable | None = None
    running_g: Observable | None = None
    terminal_phi: Observable | None = None
    running_psi: Observable | None = None
    lam: float = 0.0
    mu: float = 0.0
    horizon: float = 4.0
    lag: float = 0.0
    kind: OscillatorKind = OscillatorKind.ELASTO_PLASTIC

    def __post_init__(self):
        if self.lam < 0.0 or self.mu < 0.0:
            raise ValueError("discount rates must be nonnegative")
        if self.horizon < 0.0 or self.lag < 0.0:
            raise ValueError("horizon and lag must be nonnegative")
        if self.lag > 0.0 and self.pipeline not in PRIMED_PIPELINES:
            raise ValueError("a positive lag only makes sense for correlation pipelines")
        if self.pipeline in (Pipeline.ELLIPTIC_B, Pipeline.ELLIPTIC_BPRIME, Pipeline.STATIONARY_C):
            if not self.lam > 0.0:
                raise ValueError(f"{self.pipeline.value} requires lam > 0 (small-rate limit)")
        if self.pipeline is Pipeline.ELLIPTIC_BPRIME and not self.mu > 0.0:
            raise ValueError("elliptic-Bprime requires mu > 0")
        if self.pipeline is Pipeline.GROWTH_RATE_CPRIME and not self.lam > 0.0:
            raise ValueError("growth-rate-Cprime requires a small lam > 0")

    def is_self_correlation(self) -> bool:
        """True when the second leg repeats the first at zero lag (variance target)."""
        return (
            self.pipeline in PRIMED_PIPELINES
            and self.lag == 0.0
            and self.terminal_phi is self.terminal_f
            and self.running_psi is self.running_g
            and self.lam == self.mu
        )


_DEFAULT_EPS = 0.1
_DEFAULT_LAG = 0.2
_SMALL_RATE = 1.0e-3


@dataclass(frozen=True)
class _PresetDef:
    kind: OscillatorKind
    default_pipeline: Pipeline
    allowed: frozenset
    needs_eps: bool = False
    description: str = ""


_A_LIKE = frozenset({Pipeline.PARABOLIC_A, Pipeline.STATIONARY_C, Pipeline.ELLIPTIC_B})
_VAR_LIKE = frozenset({Pipeline.PARABOLIC_APRIME, Pipeline.GROWTH_RATE_CPRIME, Pipeline.ELLIPTIC_BPRIME})
_CORR_LIKE = frozenset({Pipeline.PARABOLIC_APRIME, Pipeline.ELLIPTIC_BPRIME})

PRESETS: dict[str, _PresetDef] = {
    "E1": _PresetDef(OscillatorKind.ELASTO_PLASTIC, Pipeline.PARABOLIC_A, _A_LIKE,
                     description="probability of the plastic state"),
    "E2": _PresetDef(OscillatorKind.ELASTO_PLASTIC, Pipeline.PARABOLIC_A, _A_LIKE,
                     description="mean kinetic energy"),
    "E3-plastic": _PresetDef(OscillatorKind.ELASTO_PLASTIC, Pipeline.PARABOLIC_APRIME, _VAR_LIKE,
                             description="variance of the plastic deformation / its growth rate"),
    "E3-total": _PresetDef(OscillatorKind.ELASTO_PLASTIC, Pipeline.PARABOLIC_APRIME, _VAR_LIKE,
                           description="variance of the total deformation / its growth rate"),
    "E4-plastic": _PresetDef(OscillatorKind.ELASTO_PLASTIC, Pipeline.PARABOLIC_APRIME, _CORR_LIKE,
                             description="plastic-state correlation at lag h"),
    "E4-kinetic": _PresetDef(OscillatorKind.ELASTO_PLASTIC, Pipeline.PARABOLIC_APRIME, _CORR_LIKE,
                             description="kinetic-energy correlation at lag h"),
    "E1p": _PresetDef(OscillatorKind.OBSTACLE, Pipeline.PARABOLIC_A, _A_LIKE, needs_eps=True,
                      description="probability of the low-energy obstacle neighborhood"),
    "E2p": _PresetDef(OscillatorKind.OBSTACLE, Pipeline.PARABOLIC_A, _A_LIKE,
                      description="mean kinetic energy (obstacle)"),
    "E3p": _PresetDef(OscillatorKind.OBSTACLE, Pipeline.PARABOLIC_APRIME, _VAR_LIKE,
                      description="variance of the integrated displacement / its growth rate"),
    "E4p-neighborhood": _PresetDef(OscillatorKind.OBSTACLE, Pipeline.PARABOLIC_APRIME, _CORR_LIKE,
                                   needs_eps=True,
                                   description="obstacle-neighborhood correlation at lag h"),
    "E4p-kinetic": _PresetDef(OscillatorKind.OBSTACLE, Pipeline.PARABOLIC_APRIME, _CORR_LIKE,
                              description="kinetic-energy correlation at lag h (obstacle)"),
}

_ALIASES = {
    "E1'": "E1p",
    "E2'": "E2p",
    "E3'": "E3p",
    "E4'-neighborhood": "E4p-neighborhood",
    "E4'-kinetic": "E4p-kinetic",
}


def preset_names() -> list[str]:
    return sorted(PRESETS)


def expand_preset(
    name: str,
    params: OscillatorParams,
    *,
    pipeline: Pipeline | None = None,
    horizon: float | None = None,
    lag: float | None = None,
    lam: float | None = None,
    mu: float | None = None,
    eps: float | None = None,
) -> QuantitySpec:
    """Expand a named preset into a validated QuantitySpec.

    `pipeline` selects between the transient form of the quantity and its
    stationary / discounted variants; each preset declares which pipelines
    it supports.  Rates default to 0 for transient pipelines and to 1e-3
    for the small-rate stationary limits.
    """
    key = _ALIASES.get(name, name)
    if key not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; known: {', '.join(preset_names())}")
    pre = PRESETS[key]
    if params.kind is not pre.kind:
        raise ValueError(f"preset {key} expects a {pre.kind.value} oscillator")
    pipe = pipeline or pre.default_pipeline
    if pipe not in pre.allowed:
        raise ValueError(f"preset {key} does not support pipeline {pipe.value}")
    if pre.needs_eps:
        if eps is None:
            eps = _DEFAULT_EPS
        if not eps > 0.0:
            raise ValueError(f"preset {key} needs a positive neighborhood radius eps")

    b = params.bound
    if key in ("E1", "E1p", "E4-plastic", "E4p-neighborhood"):
        obs = constraint_indicator(b) if key in ("E1", "E4-plastic") else obstacle_proximity(b, eps)
    elif key in ("E2", "E2p", "E4-kinetic", "E4p-kinetic"):
        obs = kinetic_energy()
    elif key in ("E3-plastic", "E3-total"):
        obs = plastic_flow(b)
    else:  # E3p
        obs = displacement()

    if pipe in (Pipeline.ELLIPTIC_B, Pipeline.ELLIPTIC_BPRIME, Pipeline.STATIONARY_C,
                Pipeline.GROWTH_RATE_CPRIME):
        lam = _SMALL_RATE if lam is None else lam
        if pipe in (Pipeline.ELLIPTIC_BPRIME, Pipeline.GROWTH_RATE_CPRIME):
            mu = lam if mu is None else mu
    lam = 0.0 if lam is None else lam
    mu = 0.0 if mu is None else mu

    common = dict(
        name=key,
        pipeline=pipe,
        lam=lam,
        mu=mu,
        horizon=4.0 if horizon is None else horizon,
        kind=pre.kind,
    )

    if pipe is Pipeline.PARABOLIC_A or pipe is Pipeline.STATIONARY_C:
        return QuantitySpec(terminal_f=obs, **common)
    if pipe is Pipeline.ELLIPTIC_B:
        return QuantitySpec(running_g=obs, **common)

    # correlation pipelines
    if key in ("E4-plastic", "E4-kinetic", "E4p-neighborhood", "E4p-kinetic"):
        use_lag = _DEFAULT_LAG if lag is None else lag
        if pipe is Pipeline.ELLIPTIC_BPRIME:
            return QuantitySpec(running_g=obs, running_psi=obs, lag=0.0, **common)
        return QuantitySpec(terminal_f=obs, terminal_phi=obs, lag=use_lag, **common)

    # variance of an accumulated integral: second leg repeats the first
    f_term = displacement() if key == "E3-total" else None
    if lag not in (None, 0.0):
        raise ValueError(f"preset {key} is a variance target; lag must be 0")
    return QuantitySpec(
        terminal_f=f_term,
        running_g=obs,
        terminal_phi=f_term,
        running_psi=obs,
        lag=0.0,
        **common,
    )


def with_pipeline(spec: QuantitySpec, pipeline: Pipeline) -> QuantitySpec:
    """Rebuild a spec under another pipeline, keeping its observables."""
    return replace(spec, pipeline=pipeline)


def evaluate(obs: Observable | None, z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Evaluate an observable, treating None as identically zero."""
    if obs is None:
        return np.zeros(np.broadcast(z, y).shape)
    return np.asarray(obs(z, y), dtype=float)
