"""Monte Carlo evaluation of the target statistics.

Elasto-plastic paths use the projected Euler scheme: an explicit velocity
step plus clamping of the deformation proposal onto [-P_Y, P_Y]; the
clamped excess is exactly the plastic-deformation increment.  Obstacle
paths use the exact Gaussian transition of the unconstrained damped
oscillator; a proposal that lands beyond the obstacle is shortened to the
linear-interpolation hitting fraction theta, placed on the obstacle, and
its interpolated incoming velocity is reflected and scaled by the
restitution.  Impact steps therefore advance time by theta*dt, so obstacle
paths carry per-path clocks.

Estimators follow the left-endpoint quadrature convention: a running
observable g contributes g(state_n) * (t_{n+1} - t_n), optionally
discounted by exp(-rate * t_n).  Paths are generated in batches, each
batch drawing from its own counter-based substream spawned from
(seed, batch index), and batch partials merge with compensated summation,
so results are bit-reproducible for a fixed seed and batch size.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .model import (
    Observable,
    OscillatorKind,
    OscillatorParams,
    Pipeline,
    QuantitySpec,
)


class InsufficientCyclesError(RuntimeError):
    """Raised when a long-cycle run completes fewer cycles than required."""


@dataclass(frozen=True)
class McConfig:
    """Simulation budget and reproducibility knobs."""

    n_paths: int
    dt: float
    horizon: float
    seed: int = 0
    batch_size: int = 10_000
    burn_in: float = 5.0
    start: tuple[float, float] = (0.0, 0.0)
    stderr_tolerance: float | None = None
    min_cycles: int = 50
    max_step_factor: float = 2.5

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValueError("need at least one path")
        if not self.dt > 0.0:
            raise ValueError("dt must be positive")
        if self.horizon < 0.0:
            raise ValueError("horizon must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")


def _batches(cfg: McConfig):
    full, rem = divmod(cfg.n_paths, cfg.batch_size)
    sizes = [cfg.batch_size] * full + ([rem] if rem else [])
    for idx, size in enumerate(sizes):
        yield idx, size


def _batch_rng(cfg: McConfig, index: int) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=cfg.seed, spawn_key=(index,))
    return np.random.Generator(np.random.Philox(seq))


# --- elasto-plastic stepping ------------------------------------------------


def step_elastoplastic(z, y, dt: float, noise, params: OscillatorParams):
    """One projected Euler step; returns (z', y', plastic increment).

    The deformation proposal z + y*dt is clamped onto [-bound, bound]; the
    clamped excess is the plastic flow of the step.  Vectorized over path
    arrays.
    """
    b = params.bound
    z_prop = z + y * dt
    z_new = np.clip(z_prop, -b, b)
    y_new = y - (params.c0 * y + params.k * z) * dt + math.sqrt(dt) * noise
    return z_new, y_new, z_prop - z_new


# --- obstacle stepping -------------------------------------------------------


@dataclass(frozen=True)
class ExactStepTables:
    """Gaussian one-step map of the unconstrained damped oscillator.

    state' = phi @ state + chol @ N(0, I); cov = chol @ chol.T is the exact
    transition covariance over one step of length dt.
    """

    dt: float
    omega: float
    phi: np.ndarray
    cov: np.ndarray
    chol: np.ndarray
    fallback_used: bool = False


def _transition_matrix(c0: float, k: float, t: float) -> np.ndarray:
    omega = 0.5 * math.sqrt(4.0 * k - c0 ** 2)
    alpha = 0.5 * c0
    env = math.exp(-alpha * t)
    s, c = math.sin(omega * t), math.cos(omega * t)
    return np.array(
        [
            [env * (c + alpha / omega * s), env * s / omega],
            [-(k / omega) * env * s, env * (c - alpha / omega * s)],
        ]
    )


def _transition_covariance(c0: float, k: float, t: float) -> np.ndarray:
    """Closed-form integral of the squared impulse response.

    With I0, Ic, Is the integrals of e^{-c0 s} {1, cos 2ws, sin 2ws} over
    [0, t]:  var_x = (1/w^2) * (I0-Ic)/2,
             cov   = Is/(2w) - c0/(2w^2) * (I0-Ic)/2,
             var_y = (I0+Ic)/2 - c0/(2w) * Is + c0^2/(4w^2) * (I0-Ic)/2.
    """
    omega = 0.5 * math.sqrt(4.0 * k - c0 ** 2)
    c = c0
    den = c * c + 4.0 * omega * omega
    ect = math.exp(-c * t)
    s2, c2 = math.sin(2.0 * omega * t), math.cos(2.0 * omega * t)
    i0 = -math.expm1(-c * t) / c
    ic = (c - ect * (c * c2 - 2.0 * omega * s2)) / den
    is_ = (2.0 * omega - ect * (c * s2 + 2.0 * omega * c2)) / den
    sin_sq = 0.5 * (i0 - ic)
    cos_sq = 0.5 * (i0 + ic)
    var_x = sin_sq / omega ** 2
    cov = is_ / (2.0 * omega) - c / (2.0 * omega ** 2) * sin_sq
    var_y = cos_sq - c / (2.0 * omega) * is_ + c * c / (4.0 * omega ** 2) * sin_sq
    return np.array([[var_x, cov], [cov, var_y]])


def substepped_euler_moments(c0: float, k: float, t: float, n_sub: int):
    """Transition moments of the n_sub-step Euler chain (deterministic recursion).

    Independent of the closed forms above; used as their oracle and as the
    fallback when a covariance fails to factor.
    """
    h = t / n_sub
    a = np.array([[1.0, h], [-k * h, 1.0 - c0 * h]])
    q = np.array([[0.0, 0.0], [0.0, h]])
    phi = np.eye(2)
    cov = np.zeros((2, 2))
    for _ in range(n_sub):
        cov = a @ cov @ a.T + q
        phi = a @ phi
    return phi, cov


def _factor_2x2(cov: np.ndarray) -> np.ndarray:
    if not cov[0, 0] > 0.0:
        raise np.linalg.LinAlgError("nonpositive variance")
    l11 = math.sqrt(cov[0, 0])
    l21 = cov[0, 1] / l11
    rest = cov[1, 1] - l21 * l21
    if rest < 0.0:
        raise np.linalg.LinAlgError("covariance not positive semidefinite")
    return np.array([[l11, 0.0], [l21, math.sqrt(rest)]])


def build_exact_tables(params: OscillatorParams, dt: float) -> ExactStepTables:
    """Tables for the exact obstacle step; requires the underdamped regime."""
    omega = params.omega  # validates 4k > c0^2
    phi = _transition_matrix(params.c0, params.k, dt)
    cov = _transition_covariance(params.c0, params.k, dt)
    fallback = False
    try:
        chol = _factor_2x2(cov)
    except np.linalg.LinAlgError:
        warnings.warn(
            "transition covariance failed to factor; falling back to "
            "sub-stepped Euler moment matching",
            RuntimeWarning,
        )
        phi, cov = substepped_euler_moments(params.c0, params.k, dt, 100_000)
        chol = _factor_2x2(cov)
        fallback = True
    return ExactStepTables(dt=dt, omega=omega, phi=phi, cov=cov, chol=chol, fallback_used=fallback)


def step_obstacle(x, y, tables: ExactStepTables, noise, params: OscillatorParams):
    """One exact-Gaussian step with impact shortening.

    Returns (x', y', impulse, dt_eff).  A proposal beyond the obstacle is
    cut at the linear hitting fraction theta; the state lands on the
    obstacle with velocity -e times the interpolated incoming velocity, and
    only theta*dt of time elapses.  The impulse is the velocity jump at the
    impact (zero elsewhere).
    """
    b = params.bound
    e = params.restitution
    p = tables.phi
    low = tables.chol
    x_prop = p[0, 0] * x + p[0, 1] * y + low[0, 0] * noise[0]
    y_prop = p[1, 0] * x + p[1, 1] * y + low[1, 0] * noise[0] + low[1, 1] * noise[1]
    hit_hi = x_prop > b
    hit_lo = x_prop < -b
    hit = hit_hi | hit_lo
    wall = np.where(hit_hi, b, -b)
    denom = np.where(hit, x_prop - x, 1.0)
    theta = np.where(hit, (wall - x) / denom, 1.0)
    v_in = (1.0 - theta) * y + theta * y_prop
    x_new = np.where(hit, wall, x_prop)
    y_new = np.where(hit, -e * v_in, y_prop)
    impulse = np.where(hit, y_new - v_in, 0.0)
    return x_new, y_new, impulse, theta * tables.dt


# --- path functionals --------------------------------------------------------
#
# Collectors accumulate per-path functionals while a batch marches.  They
# receive the pre-step state (left endpoint), the post-step state, the step
# times and the effective step length, which is theta*dt on impact steps
# and zero once an obstacle path has passed its end time.


class WindowedIntegral:
    """sum of fn(pre-state) * exp(-rate * t0) * |step ∩ window|."""

    def __init__(self, fn: Observable, n: int, rate: float = 0.0, lo: float = 0.0,
                 hi: float = math.inf, track_sup: bool = False):
        self.fn = fn
        self.rate = rate
        self.lo = lo
        self.hi = hi
        self.value = np.zeros(n)
        self.sup = 0.0
        self.track_sup = track_sup

    def observe(self, t0, t1, w, z0, y0, z1, y1, delta1):
        w_eff = np.clip(np.minimum(t1, self.hi) - np.maximum(t0, self.lo), 0.0, None)
        w_eff = np.minimum(w_eff, w)
        vals = self.fn(z0, y0)
        if self.rate:
            w_eff = w_eff * np.exp(-self.rate * np.asarray(t0, dtype=float))
        self.value += vals * w_eff
        if self.track_sup:
            m = np.max(np.abs(vals))
            if m > self.sup:
                self.sup = float(m)


class Snapshot:
    """fn(post-state) at the first step whose end time reaches the target."""

    def __init__(self, fn: Observable, n: int, target: float, tol: float = 0.0):
        self.fn = fn
        self.target = target
        self.tol = tol
        self.value = np.full(n, np.nan)
        self.captured = np.zeros(n, dtype=bool)

    def observe(self, t0, t1, w, z0, y0, z1, y1, delta1):
        m = (np.asarray(t0) < self.target) & (np.asarray(t1) >= self.target - self.tol)
        m = m & ~self.captured
        if np.any(m):
            self.value = np.where(m, self.fn(z1, y1), self.value)
            self.captured |= m


class TraceSnapshot:
    """fn(post-state) captured at each of an increasing list of times."""

    def __init__(self, fn: Observable, n: int, times: np.ndarray, tol: float = 0.0):
        self.fn = fn
        self.times = np.asarray(times, dtype=float)
        self.tol = tol
        self.value = np.full((n, len(self.times)), np.nan)
        self.captured = np.zeros((n, len(self.times)), dtype=bool)

    def observe(self, t0, t1, w, z0, y0, z1, y1, delta1):
        lo = float(np.min(t0))
        hi = float(np.max(t1))
        k0 = int(np.searchsorted(self.times, lo - self.tol, side="left"))
        k1 = int(np.searchsorted(self.times, hi + self.tol, side="right"))
        if k0 >= k1:
            return
        vals = None
        for k in range(k0, k1):
            m = (np.asarray(t0) < self.times[k]) & (
                np.asarray(t1) >= self.times[k] - self.tol
            ) & ~self.captured[:, k]
            if np.any(m):
                if vals is None:
                    vals = self.fn(z1, y1)
                self.value[:, k] = np.where(m, vals, self.value[:, k])
                self.captured[:, k] |= m


class TraceIntegral:
    """Running integral of fn recorded at each of an increasing list of times.

    The record at time tau is the integral over the step portion up to tau,
    captured once per path on the step whose end clock reaches tau.
    """

    def __init__(self, fn: Observable, n: int, times: np.ndarray, rate: float = 0.0,
                 tol: float = 0.0):
        self.fn = fn
        self.times = np.asarray(times, dtype=float)
        self.rate = rate
        self.tol = tol
        self.running = np.zeros(n)
        self.value = np.zeros((n, len(self.times)))
        self.captured = np.zeros((n, len(self.times)), dtype=bool)

    def observe(self, t0, t1, w, z0, y0, z1, y1, delta1):
        vals = self.fn(z0, y0)
        disc = np.exp(-self.rate * np.asarray(t0, dtype=float)) if self.rate else 1.0
        contrib = vals * disc
        lo = float(np.min(t0))
        hi = float(np.max(t1))
        k0 = int(np.searchsorted(self.times, lo - self.tol, side="left"))
        k1 = int(np.searchsorted(self.times, hi + self.tol, side="right"))
        for k in range(k0, k1):
            m = (np.asarray(t0) < self.times[k]) & (
                np.asarray(t1) >= self.times[k] - self.tol
            ) & ~self.captured[:, k]
            if np.any(m):
                part = np.clip(np.minimum(t1, self.times[k]) - np.asarray(t0), 0.0, None)
                part = np.minimum(part, w)
                rec = self.running + contrib * part
                self.value[:, k] = np.where(m, rec, self.value[:, k])
                self.captured[:, k] |= m
        self.running += contrib * w


class MaxAbs:
    """Running maximum of |fn| along each path (constraint monitoring)."""

    def __init__(self, fn: Observable, n: int):
        self.fn = fn
        self.value = np.zeros(n)

    def observe(self, t0, t1, w, z0, y0, z1, y1, delta1):
        self.value = np.maximum(self.value, np.abs(self.fn(z1, y1)))


class CycleTracker:
    """Long-cycle bookkeeping for the elasto-plastic path.

    An event is a velocity sign change while the deformation sits clamped
    on a yield boundary (the discrete corner visit), attributed to the
    later step.  A cycle runs corner -> opposite corner -> starting corner;
    completed cycles record their duration and plastic-deformation
    increment.
    """

    def __init__(self, n: int, bound: float):
        self.bound = bound
        self.stage = np.zeros(n, dtype=np.int8)
        self.home = np.zeros(n, dtype=np.int8)
        self.mark_t = np.zeros(n)
        self.mark_delta = np.zeros(n)
        self.durations: list[np.ndarray] = []
        self.increments: list[np.ndarray] = []

    def observe(self, t0, t1, w, z0, y0, z1, y1, delta1):
        cross = ((y0 > 0.0) & (y1 <= 0.0)) | ((y0 < 0.0) & (y1 >= 0.0))
        ev_plus = cross & (z1 == self.bound)
        ev_minus = cross & (z1 == -self.bound)
        ev = ev_plus | ev_minus
        if not np.any(ev):
            return
        sgn = np.where(ev_plus, 1, -1).astype(np.int8)
        first = ev & (self.stage == 0)
        away = ev & (self.stage == 1) & (sgn == -self.home)
        done = ev & (self.stage == 2) & (sgn == self.home)
        if np.any(done):
            idx = np.nonzero(done)[0]
            t1b = np.broadcast_to(np.asarray(t1, dtype=float), done.shape)
            self.durations.append(t1b[idx] - self.mark_t[idx])
            self.increments.append(delta1[idx] - self.mark_delta[idx])
        restart = first | done
        self.home = np.where(first, sgn, self.home)
        t1b = np.broadcast_to(np.asarray(t1, dtype=float), restart.shape)
        self.mark_t = np.where(restart, t1b, self.mark_t)
        self.mark_delta = np.where(restart, delta1, self.mark_delta)
        self.stage = np.where(restart, 1, np.where(away, 2, self.stage)).astype(np.int8)


# --- batch drivers -----------------------------------------------------------


def run_elastoplastic_batch(
    params: OscillatorParams,
    dt: float,
    n_steps: int,
    size: int,
    rng: np.random.Generator,
    collectors,
    start: tuple[float, float] = (0.0, 0.0),
) -> None:
    """March one batch of projected-Euler paths through the collectors."""
    z = np.full(size, float(start[0]))
    y = np.full(size, float(start[1]))
    delta = np.zeros(size)
    for n in range(n_steps):
        noise = rng.standard_normal(size)
        z1, y1, dpl = step_elastoplastic(z, y, dt, noise, params)
        delta1 = delta + dpl
        t0 = n * dt
        t1 = (n + 1) * dt
        for c in collectors:
            c.observe(t0, t1, dt, z, y, z1, y1, delta1)
        z, y, delta = z1, y1, delta1


def run_obstacle_batch(
    params: OscillatorParams,
    tables: ExactStepTables,
    t_end: float,
    size: int,
    rng: np.random.Generator,
    collectors,
    start: tuple[float, float] = (0.0, 0.0),
    max_step_factor: float = 2.5,
) -> None:
    """March one batch of exact-step obstacle paths until every clock passes t_end."""
    x = np.full(size, float(start[0]))
    y = np.full(size, float(start[1]))
    t = np.zeros(size)
    dt = tables.dt
    max_steps = int(max_step_factor * t_end / dt) + 4096
    guard = 1e-12 * max(1.0, t_end)
    for _ in range(max_steps):
        alive = t < t_end - guard
        if not np.any(alive):
            return
        noise = rng.standard_normal((2, size))
        x1, y1, _, dte = step_obstacle(x, y, tables, noise, params)
        dte = np.where(alive, dte, 0.0)
        x1 = np.where(alive, x1, x)
        y1 = np.where(alive, y1, y)
        t1 = t + dte
        for c in collectors:
            c.observe(t, t1, dte, x, y, x1, y1, None)
        x, y, t = x1, y1, t1
    raise RuntimeError("obstacle batch failed to reach the horizon within the step cap")


# --- estimates ---------------------------------------------------------------


@dataclass
class McEstimate:
    value: float
    stderr: float
    n_paths: int
    extras: dict = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)


class _Moments:
    """Batch-merged first and second moments with compensated totals."""

    def __init__(self):
        self.sums: list[float] = []
        self.sqs: list[float] = []
        self.count = 0

    def add(self, stat: np.ndarray):
        self.sums.append(float(np.sum(stat)))
        self.sqs.append(float(np.sum(stat * stat)))
        self.count += stat.size

    @property
    def mean(self) -> float:
        return math.fsum(self.sums) / self.count

    @property
    def stderr(self) -> float:
        if self.count < 2:
            return 0.0
        m = self.mean
        var = (math.fsum(self.sqs) - self.count * m * m) / (self.count - 1)
        return math.sqrt(max(var, 0.0) / self.count)


def _round_steps(horizon: float, dt: float) -> int:
    return max(int(round(horizon / dt)), 0)


def _drive(params, cfg, collectors_factory, n_steps=None, t_end=None):
    """Run all batches; collectors_factory(size) -> (collectors, reduce_fn)."""
    tables = None
    if params.kind is OscillatorKind.OBSTACLE:
        tables = build_exact_tables(params, cfg.dt)
    outputs = []
    for idx, size in _batches(cfg):
        rng = _batch_rng(cfg, idx)
        collectors, reduce_fn = collectors_factory(size)
        if params.kind is OscillatorKind.ELASTO_PLASTIC:
            run_elastoplastic_batch(params, cfg.dt, n_steps, size, rng, collectors, cfg.start)
        else:
            run_obstacle_batch(
                params, tables, t_end, size, rng, collectors, cfg.start, cfg.max_step_factor
            )
        outputs.append(reduce_fn())
    return outputs


def _gamma_pieces(size, horizon, rate, terminal, running, tol):
    """Collectors realizing e^{-rate*T} f(S_T) + int_0^T e^{-rate t} g dt."""
    snap = Snapshot(terminal, size, horizon, tol) if terminal is not None else None
    integ = (
        WindowedIntegral(running, size, rate=rate, lo=0.0, hi=horizon)
        if running is not None
        else None
    )

    def value():
        out = np.zeros(size)
        if snap is not None:
            out = out + math.exp(-rate * horizon) * snap.value
        if integ is not None:
            out = out + integ.value
        return out

    return [c for c in (snap, integ) if c is not None], value


def estimate_quantity(
    spec: QuantitySpec, params: OscillatorParams, cfg: McConfig
) -> McEstimate:
    """Ensemble estimate of one quantity; value, standard error and extras.

    The horizon is taken from cfg (cfg.horizon, with cfg.burn_in for the
    stationary averages); spec.lag sets the second-leg offset of the
    correlation pipelines.
    """
    if spec.kind is not params.kind:
        raise ValueError("quantity and parameters describe different oscillators")
    ep = params.kind is OscillatorKind.ELASTO_PLASTIC
    dt = cfg.dt
    extras: dict = {}

    if spec.pipeline is Pipeline.PARABOLIC_A:
        n1 = _round_steps(cfg.horizon, dt)
        horizon = n1 * dt if ep else cfg.horizon
        tol = 0.0 if ep else 1e-12 * max(1.0, horizon)
        moments = _Moments()

        def factory(size):
            return _gamma_pieces(
                size, horizon, spec.lam, spec.terminal_f, spec.running_g, tol
            )

        for stat in _drive(params, cfg, factory, n_steps=n1, t_end=horizon):
            moments.add(stat)
        extras["horizon"] = horizon

    elif spec.pipeline is Pipeline.PARABOLIC_APRIME:
        n1 = _round_steps(cfg.horizon, dt)
        n2 = _round_steps(cfg.horizon + spec.lag, dt)
        t1 = n1 * dt if ep else cfg.horizon
        t2 = n2 * dt if ep else cfg.horizon + spec.lag
        tol = 0.0 if ep else 1e-12 * max(1.0, t2)
        moments = _Moments()
        first = _Moments()
        second = _Moments()

        def factory(size):
            c1, v1 = _gamma_pieces(size, t1, spec.lam, spec.terminal_f, spec.running_g, tol)
            c2, v2 = _gamma_pieces(
                size, t2, spec.mu, spec.terminal_phi, spec.running_psi, tol
            )

            def value():
                g1 = v1()
                g2 = v2()
                return np.stack([g1 * g2, g1, g2])

            return c1 + c2, value

        for out in _drive(params, cfg, factory, n_steps=n2, t_end=t2):
            moments.add(out[0])
            first.add(out[1])
            second.add(out[2])
        extras["mean_first"] = first.mean
        extras["mean_second"] = second.mean
        extras["covariance"] = moments.mean - first.mean * second.mean
        _check_variance(extras["covariance"], moments.mean, spec)

    elif spec.pipeline in (Pipeline.ELLIPTIC_B, Pipeline.ELLIPTIC_BPRIME):
        n1 = _round_steps(cfg.horizon, dt)
        t_max = n1 * dt if ep else cfg.horizon
        moments = _Moments()
        first = _Moments()
        second = _Moments()
        sups = [0.0, 0.0]
        both = spec.pipeline is Pipeline.ELLIPTIC_BPRIME

        def factory(size):
            gi = WindowedIntegral(
                spec.running_g, size, rate=spec.lam, lo=0.0, hi=t_max, track_sup=True
            )
            colls = [gi]
            if both:
                psi = spec.running_psi if spec.running_psi is not None else spec.running_g
                pi = WindowedIntegral(psi, size, rate=spec.mu, lo=0.0, hi=t_max, track_sup=True)
                colls.append(pi)

            def value():
                sups[0] = max(sups[0], gi.sup)
                if both:
                    sups[1] = max(sups[1], colls[1].sup)
                    return np.stack([gi.value * colls[1].value, gi.value, colls[1].value])
                return gi.value

            return colls, value

        for out in _drive(params, cfg, factory, n_steps=n1, t_end=t_max):
            if both:
                moments.add(out[0])
                first.add(out[1])
                second.add(out[2])
            else:
                moments.add(out)
        extras["tail_bound"] = math.exp(-spec.lam * t_max) * sups[0] / spec.lam
        if both:
            extras["tail_bound_second"] = math.exp(-spec.mu * t_max) * sups[1] / spec.mu
            extras["mean_first"] = first.mean
            extras["mean_second"] = second.mean
            extras["covariance"] = moments.mean - first.mean * second.mean
            _check_variance(extras["covariance"], moments.mean, spec)

    elif spec.pipeline is Pipeline.STATIONARY_C:
        if not cfg.horizon > cfg.burn_in:
            raise ValueError("stationary averages need horizon > burn_in")
        n1 = _round_steps(cfg.horizon, dt)
        t_max = n1 * dt if ep else cfg.horizon
        window = t_max - cfg.burn_in
        moments = _Moments()

        def factory(size):
            wi = WindowedIntegral(spec.terminal_f, size, rate=0.0, lo=cfg.burn_in, hi=t_max)
            return [wi], lambda: wi.value / window

        for stat in _drive(params, cfg, factory, n_steps=n1, t_end=t_max):
            moments.add(stat)
        extras["burn_in"] = cfg.burn_in

    elif spec.pipeline is Pipeline.GROWTH_RATE_CPRIME:
        n1 = _round_steps(cfg.horizon, dt)
        t_max = n1 * dt if ep else cfg.horizon
        moments = _Moments()
        first = _Moments()

        def factory(size):
            gi = WindowedIntegral(spec.running_g, size, rate=0.0, lo=0.0, hi=t_max)
            psi = spec.running_psi
            same = psi is None or psi is spec.running_g
            pi = gi if same else WindowedIntegral(psi, size, rate=0.0, lo=0.0, hi=t_max)
            colls = [gi] if same else [gi, pi]

            def value():
                return np.stack([gi.value * pi.value / t_max, gi.value])

            return colls, value

        for out in _drive(params, cfg, factory, n_steps=n1, t_end=t_max):
            moments.add(out[0])
            first.add(out[1])
        extras["mean_integral"] = first.mean
        extras["centered_rate"] = moments.mean - first.mean ** 2 / t_max

    else:  # pragma: no cover - enum is exhaustive
        raise ValueError(f"unsupported pipeline {spec.pipeline}")

    est = McEstimate(
        value=moments.mean, stderr=moments.stderr, n_paths=moments.count, extras=extras
    )
    if cfg.stderr_tolerance is not None and est.stderr > cfg.stderr_tolerance:
        est.flags.append("stderr_above_tolerance")
    return est


def _check_variance(cov: float, scale: float, spec: QuantitySpec) -> None:
    if spec.is_self_correlation() and cov < -1e-12 * max(1.0, scale * scale):
        raise AssertionError("variance estimate below the negative-roundoff floor")


@dataclass
class McTrace:
    times: np.ndarray
    values: np.ndarray
    stderrs: np.ndarray
    extras: dict = field(default_factory=dict)


def trace_quantity(
    spec: QuantitySpec, params: OscillatorParams, cfg: McConfig, times
) -> McTrace:
    """Ensemble curves value(T) for the transient pipelines.

    PARABOLIC_A returns E[Gamma_T] per time; PARABOLIC_APRIME returns the
    raw product E[Gamma_T * Gamma'_{T+lag}] per time, with the centered
    variant (the variance for self-correlation targets) in extras.
    """
    if spec.kind is not params.kind:
        raise ValueError("quantity and parameters describe different oscillators")
    times = np.asarray(sorted(float(t) for t in times))
    if times.size == 0 or times[0] < 0.0:
        raise ValueError("record times must be nonnegative and nonempty")
    ep = params.kind is OscillatorKind.ELASTO_PLASTIC
    dt = cfg.dt
    tol = 0.0 if ep else 1e-12 * max(1.0, float(times[-1]) + spec.lag)
    if ep:
        times = dt * np.round(times / dt)

    if spec.pipeline is Pipeline.PARABOLIC_A:
        horizon = float(times[-1])
        n_steps = _round_steps(horizon, dt)
        k = len(times)
        sums = np.zeros(k)
        sqs = np.zeros(k)
        count = 0

        def factory(size):
            snap = (
                TraceSnapshot(spec.terminal_f, size, times, tol)
                if spec.terminal_f is not None
                else None
            )
            integ = (
                TraceIntegral(spec.running_g, size, times, rate=spec.lam, tol=tol)
                if spec.running_g is not None
                else None
            )

            def value():
                out = np.zeros((size, k))
                if snap is not None:
                    snapped = snap.value
                    if np.any(times <= 0.0):
                        z0 = np.full(size, cfg.start[0])
                        y0 = np.full(size, cfg.start[1])
                        f0 = spec.terminal_f(z0, y0)
                        snapped = np.where(times[None, :] <= 0.0, f0[:, None], snapped)
                    out += np.exp(-spec.lam * times)[None, :] * snapped
                if integ is not None:
                    out += integ.value
                return out

            return [c for c in (snap, integ) if c is not None], value

        for out in _drive(params, cfg, factory, n_steps=n_steps, t_end=horizon):
            sums += out.sum(axis=0)
            sqs += (out * out).sum(axis=0)
            count += out.shape[0]
        mean = sums / count
        var = np.maximum(sqs - count * mean * mean, 0.0) / max(count - 1, 1)
        return McTrace(times=times, values=mean, stderrs=np.sqrt(var / count))

    if spec.pipeline is Pipeline.PARABOLIC_APRIME:
        lag = spec.lag
        if ep:
            lag = dt * round(lag / dt)
        horizon = float(times[-1]) + lag
        n_steps = _round_steps(horizon, dt)
        k = len(times)
        sums = np.zeros((3, k))
        count = 0

        def factory(size):
            c1, v1 = _trace_gamma(size, times, spec.lam, spec.terminal_f,
                                  spec.running_g, tol, cfg)
            c2, v2 = _trace_gamma(size, times + lag, spec.mu, spec.terminal_phi,
                                  spec.running_psi, tol, cfg)

            def value():
                g1 = v1()
                g2 = v2()
                return np.stack([g1 * g2, g1, g2])

            return c1 + c2, value

        sq_prod = np.zeros(k)
        for out in _drive(params, cfg, factory, n_steps=n_steps, t_end=horizon):
            sums[0] += out[0].sum(axis=0)
            sums[1] += out[1].sum(axis=0)
            sums[2] += out[2].sum(axis=0)
            sq_prod += (out[0] * out[0]).sum(axis=0)
            count += out.shape[1]
        mean_prod = sums[0] / count
        mean1 = sums[1] / count
        mean2 = sums[2] / count
        var = np.maximum(sq_prod - count * mean_prod * mean_prod, 0.0) / max(count - 1, 1)
        return McTrace(
            times=times,
            values=mean_prod,
            stderrs=np.sqrt(var / count),
            extras={"centered": mean_prod - mean1 * mean2, "mean_first": mean1,
                    "mean_second": mean2},
        )

    raise ValueError("traces are defined for the transient pipelines only")


def _trace_gamma(size, times, rate, terminal, running, tol, cfg):
    snap = TraceSnapshot(terminal, size, times, tol) if terminal is not None else None
    integ = (
        TraceIntegral(running, size, times, rate=rate, tol=tol)
        if running is not None
        else None
    )

    def value():
        out = np.zeros((size, len(times)))
        if snap is not None:
            snapped = snap.value
            if np.any(times <= 0.0):
                z0 = np.full(size, cfg.start[0])
                y0 = np.full(size, cfg.start[1])
                f0 = terminal(z0, y0)
                snapped = np.where(np.asarray(times)[None, :] <= 0.0, f0[:, None], snapped)
            out += np.exp(-rate * np.asarray(times))[None, :] * snapped
        if integ is not None:
            out += integ.value
        return out

    return [c for c in (snap, integ) if c is not None], value


@dataclass
class CycleStats:
    """Long-cycle renewal statistics: rate = gamma^2 / E[duration]."""

    rate: float
    stderr: float
    mu: float
    gamma_sq: float
    mean_duration: float
    n_cycles: int
    durations: np.ndarray
    increments: np.ndarray


def long_cycle_rate(params: OscillatorParams, cfg: McConfig) -> CycleStats:
    """Variance growth rate from the renewal decomposition of the path.

    Cycles are delimited by discrete corner visits (velocity sign change
    while clamped at a yield boundary): from a corner, to the opposite
    corner, back to the starting corner.  The rate estimate is
    E[(Delta increment)^2] / E[duration] with a delta-method standard
    error; fewer completed cycles than cfg.min_cycles raises
    InsufficientCyclesError.
    """
    if params.kind is not OscillatorKind.ELASTO_PLASTIC:
        raise ValueError("long cycles are defined for the elasto-plastic oscillator")
    n_steps = _round_steps(cfg.horizon, cfg.dt)
    durations: list[np.ndarray] = []
    increments: list[np.ndarray] = []

    def factory(size):
        tracker = CycleTracker(size, params.bound)

        def value():
            dur = (
                np.concatenate(tracker.durations) if tracker.durations else np.empty(0)
            )
            inc = (
                np.concatenate(tracker.increments) if tracker.increments else np.empty(0)
            )
            return dur, inc

        return [tracker], value

    for dur, inc in _drive(params, cfg, factory, n_steps=n_steps):
        durations.append(dur)
        increments.append(inc)
    dur = np.concatenate(durations)
    inc = np.concatenate(increments)
    m = dur.size
    if m < cfg.min_cycles:
        raise InsufficientCyclesError(
            f"only {m} completed cycles; at least {cfg.min_cycles} required "
            "(raise the horizon or the path count)"
        )
    mean_dur = float(np.mean(dur))
    sq = inc * inc
    gamma_sq = float(np.mean(sq))
    rate = gamma_sq / mean_dur
    # delta method for the ratio of means E[S]/E[D]
    var_s = float(np.var(sq, ddof=1))
    var_d = float(np.var(dur, ddof=1))
    cov_sd = float(np.cov(sq, dur, ddof=1)[0, 1]) if m > 1 else 0.0
    var_rate = (
        var_s - 2.0 * rate * cov_sd + rate * rate * var_d
    ) / (m * mean_dur * mean_dur)
    return CycleStats(
        rate=rate,
        stderr=math.sqrt(max(var_rate, 0.0)),
        mu=1.0 / mean_dur,
        gamma_sq=gamma_sq,
        mean_duration=mean_dur,
        n_cycles=int(m),
        durations=dur,
        increments=inc,
    )


def constraint_excursion(params: OscillatorParams, cfg: McConfig) -> float:
    """Largest |constrained coordinate| seen over the whole ensemble.

    Equals params.bound (elasto-plastic, once any path clamps) and must
    never exceed it; a direct check that the schemes respect their
    constraints exactly.
    """
    n_steps = _round_steps(cfg.horizon, cfg.dt)

    def factory(size):
        mx = MaxAbs(lambda z, y: z * np.ones_like(y), size)
        return [mx], lambda: float(np.max(mx.value))

    t_end = cfg.horizon
    outs = _drive(params, cfg, factory, n_steps=n_steps, t_end=t_end)
    return max(outs)
