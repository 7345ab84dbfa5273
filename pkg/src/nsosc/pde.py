"""Implicit solvers on the discrete generator.

Three pipelines share one sparse factorization pattern:

* backward-in-time marching for finite-horizon expectations: starting from
  the terminal observable, each implicit Euler step solves
  (D + dt*(M + rate*D)) u_next = D*(u + dt*g), where D is the identity
  restricted to equation rows, so level n holds the expectation at horizon
  n*dt and the algebraic rows (Neumann closure, impact identification) are
  satisfied exactly at every level;
* a coupled second march for correlations, driven by the product of the
  velocity derivatives of the two factor solutions (explicit source,
  implicit operator);
* single solves (rate*D + M) u = D*g for the small-rate stationary limit,
  its variance-growth companion, and the discounted-integral quantities.

The factorization for a given (dt, rate) is computed once and reused for
every step of a march; repeated solves on the same operator share it
through a per-operator cache.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .operators import DiscreteOperator, dy_matrix


def _mask(op: DiscreteOperator) -> np.ndarray:
    return op.is_equation.astype(float)


def _factorization(op: DiscreteOperator, key, build):
    lu = op._lu_cache.get(key)
    if lu is None:
        lu = splu(build().tocsc())
        op._lu_cache[key] = lu
    return lu


def _parabolic_lu(op: DiscreteOperator, dt: float, rate: float):
    def build():
        d_eq = sp.diags(_mask(op))
        return d_eq + dt * (op.matrix + rate * d_eq)

    return _factorization(op, ("parabolic", dt, rate), build)


def _stationary_lu(op: DiscreteOperator, rate: float):
    def build():
        return rate * sp.diags(_mask(op)) + op.matrix

    return _factorization(op, ("stationary", rate), build)


def _dy(op: DiscreteOperator) -> sp.csr_matrix:
    mat = op._lu_cache.get("dy")
    if mat is None:
        mat = dy_matrix(op.grid)
        op._lu_cache["dy"] = mat
    return mat


def _check_finite(vec: np.ndarray, context: str) -> None:
    if not np.all(np.isfinite(vec)):
        bad = int(np.flatnonzero(~np.isfinite(vec))[0])
        raise RuntimeError(f"non-finite solve result ({context}, first bad node {bad})")


@dataclass(frozen=True)
class ParabolicRun:
    """One backward march: operator, step, horizon and data."""

    operator: DiscreteOperator
    dt: float
    n_steps: int
    terminal: np.ndarray
    source: np.ndarray | None = None
    rate: float = 0.0

    def __post_init__(self):
        if not self.dt > 0.0:
            raise ValueError("dt must be positive")
        if self.n_steps < 0:
            raise ValueError("n_steps must be nonnegative")
        if self.terminal.shape != (self.operator.n,):
            raise ValueError("terminal data must be grid shaped")
        if self.source is not None and self.source.shape != (self.operator.n,):
            raise ValueError("source must be grid shaped")

    @property
    def horizon(self) -> float:
        return self.n_steps * self.dt


@dataclass
class FieldSolution:
    """March output: scalar trace at the query node plus optional full levels."""

    grid: object
    dt: float
    query: int
    trace: np.ndarray
    final: np.ndarray
    levels: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(len(self.trace))

    @property
    def value(self) -> float:
        return float(self.trace[-1])


def parabolic_march(
    run: ParabolicRun, query: int | None = None, store_every: int | None = None
) -> FieldSolution:
    """March the implicit scheme from the terminal data.

    Level n of the trace is the quantity at horizon n*dt evaluated at the
    query node (default: the grid center, the rest state).
    """
    op = run.operator
    q = op.grid.center_index if query is None else query
    lu = _parabolic_lu(op, run.dt, run.rate)
    mask = _mask(op)
    rhs_source = (
        run.dt * (mask * run.source) if run.source is not None else None
    )
    u = run.terminal.astype(float).copy()
    trace = np.empty(run.n_steps + 1)
    trace[0] = u[q]
    levels: dict[int, np.ndarray] = {}
    if store_every:
        levels[0] = u.copy()
    for n in range(1, run.n_steps + 1):
        rhs = mask * u
        if rhs_source is not None:
            rhs += rhs_source
        u = lu.solve(rhs)
        _check_finite(u, f"parabolic step {n}")
        trace[n] = u[q]
        if store_every and (n % store_every == 0 or n == run.n_steps):
            levels[n] = u.copy()
    return FieldSolution(grid=op.grid, dt=run.dt, query=q, trace=trace, final=u, levels=levels)


@dataclass
class CorrelationSolution:
    """Coupled march output for product quantities.

    `product_trace` holds u*v + w at the query node per level (the raw
    correlation); `second_trace` holds w alone, which for the
    self-correlation runs is the variance of the accumulated functional.
    """

    dt: float
    query: int
    u_trace: np.ndarray
    v_trace: np.ndarray
    second_trace: np.ndarray
    product_trace: np.ndarray
    u_final: np.ndarray
    v_final: np.ndarray
    w_final: np.ndarray

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(len(self.product_trace))


def solve_w_chain(
    u_run: ParabolicRun,
    v_run: ParabolicRun | None = None,
    *,
    rate_sum: float | None = None,
    lag_steps: int = 0,
    query: int | None = None,
) -> CorrelationSolution:
    """Co-march u, v and the product-source field w.

    v is marched `lag_steps` ahead so that the two factors line up at equal
    physical times; the w step n -> n+1 uses the source
    (D_y u^n)(D_y v^{n+lag}) from the current levels.  Passing v_run=None
    (or u_run itself with zero lag) collapses to the variance chain v = u.
    """
    op = u_run.operator
    if v_run is None and lag_steps:
        raise ValueError("a lagged product needs an explicit v run")
    same = v_run is None or (v_run is u_run and lag_steps == 0)
    v_run = u_run if v_run is None else v_run
    if v_run.operator is not op:
        raise ValueError("u and v must be marched on the same operator")
    if v_run.dt != u_run.dt:
        raise ValueError("u and v must share the time step")
    if v_run.n_steps < u_run.n_steps + lag_steps:
        raise ValueError(
            "level misalignment: v needs at least n_steps + lag_steps levels"
        )
    if rate_sum is None:
        rate_sum = u_run.rate + v_run.rate
    dt = u_run.dt
    q = op.grid.center_index if query is None else query
    mask = _mask(op)
    dy = _dy(op)

    lu_u = _parabolic_lu(op, dt, u_run.rate)
    lu_v = _parabolic_lu(op, dt, v_run.rate)
    lu_w = _parabolic_lu(op, dt, rate_sum)

    u = u_run.terminal.astype(float).copy()
    v = v_run.terminal.astype(float).copy()
    rhs_g = dt * (mask * u_run.source) if u_run.source is not None else None
    rhs_psi = dt * (mask * v_run.source) if v_run.source is not None else None

    for m in range(lag_steps):
        rhs = mask * v
        if rhs_psi is not None:
            rhs += rhs_psi
        v = lu_v.solve(rhs)
        _check_finite(v, f"lag pre-march step {m + 1}")
    if same:
        v = u

    n_levels = u_run.n_steps + 1
    w = np.zeros(op.n)
    u_trace = np.empty(n_levels)
    v_trace = np.empty(n_levels)
    w_trace = np.empty(n_levels)
    for n in range(n_levels):
        u_trace[n] = u[q]
        v_trace[n] = v[q]
        w_trace[n] = w[q]
        if n == u_run.n_steps:
            break
        src = np.asarray(dy @ u) * np.asarray(dy @ v)
        w = lu_w.solve(mask * w + dt * (mask * src))
        rhs = mask * u
        if rhs_g is not None:
            rhs += rhs_g
        u = lu_u.solve(rhs)
        if same:
            v = u
        else:
            rhs = mask * v
            if rhs_psi is not None:
                rhs += rhs_psi
            v = lu_v.solve(rhs)
        if n % 256 == 0:
            _check_finite(w, f"w chain step {n + 1}")
    _check_finite(u, "w chain final u")
    _check_finite(w, "w chain final w")
    return CorrelationSolution(
        dt=dt,
        query=q,
        u_trace=u_trace,
        v_trace=v_trace,
        second_trace=w_trace,
        product_trace=u_trace * v_trace + w_trace,
        u_final=u,
        v_final=v,
        w_final=w,
    )


@dataclass
class StationaryResult:
    """Small-rate stationary solve: the long-run mean is lam * u.

    `spread` is the max-min range of lam*u over the equation rows, a
    diagnostic for how flat the estimate is across start states (it tends
    to 0 with the rate).
    """

    u: np.ndarray
    lam: float
    query: int
    spread: float

    @property
    def value(self) -> float:
        return float(self.lam * self.u[self.query])

    def value_at(self, node: int) -> float:
        return float(self.lam * self.u[node])


def stationary_solve(
    op: DiscreteOperator, lam: float, source: np.ndarray, query: int | None = None
) -> StationaryResult:
    """Solve (lam*D + M) u = D*source; lam*u approximates the ergodic mean of the source."""
    if not lam > 0.0:
        raise ValueError("stationary solve needs lam > 0")
    q = op.grid.center_index if query is None else query
    lu = _stationary_lu(op, lam)
    u = lu.solve(_mask(op) * source)
    _check_finite(u, "stationary solve")
    scaled = lam * u[op.is_equation]
    return StationaryResult(u=u, lam=lam, query=q, spread=float(scaled.max() - scaled.min()))


@dataclass
class GrowthRateResult:
    rate: float
    lam: float
    u: np.ndarray
    w: np.ndarray


def growth_rate_solve(
    op: DiscreteOperator, lam: float, source: np.ndarray, query: int | None = None
) -> GrowthRateResult:
    """Long-run variance growth rate of the accumulated source.

    Solves (lam*D + M) u = D*g, then (2*lam*D + M) w = D*(D_y u)^2; the
    growth rate is the small-rate limit of 2*lam*w at the start state.
    """
    if not lam > 0.0:
        raise ValueError("growth-rate solve needs lam > 0")
    q = op.grid.center_index if query is None else query
    mask = _mask(op)
    u = _stationary_lu(op, lam).solve(mask * source)
    _check_finite(u, "growth-rate first solve")
    grad = np.asarray(_dy(op) @ u)
    w = _stationary_lu(op, 2.0 * lam).solve(mask * grad ** 2)
    _check_finite(w, "growth-rate second solve")
    return GrowthRateResult(rate=float(2.0 * lam * w[q]), lam=lam, u=u, w=w)


@dataclass
class EllipticResult:
    """Discounted-integral solves: single integral u and product field u*v + w."""

    u: np.ndarray
    v: np.ndarray
    w: np.ndarray
    query: int

    @property
    def single(self) -> float:
        return float(self.u[self.query])

    @property
    def product(self) -> float:
        return float(self.u[self.query] * self.v[self.query] + self.w[self.query])

    @property
    def product_field(self) -> np.ndarray:
        return self.u * self.v + self.w


def elliptic_B_solve(
    op: DiscreteOperator,
    lam: float,
    mu: float,
    g: np.ndarray,
    psi: np.ndarray | None = None,
    query: int | None = None,
) -> EllipticResult:
    """Discounted expectations: u for (g, lam), v for (psi, mu), coupled w."""
    if not (lam > 0.0 and mu > 0.0):
        raise ValueError("elliptic solves need positive rates")
    q = op.grid.center_index if query is None else query
    mask = _mask(op)
    dy = _dy(op)
    u = _stationary_lu(op, lam).solve(mask * g)
    _check_finite(u, "elliptic u")
    if psi is None or (mu == lam and psi is g):
        v = u if mu == lam else _stationary_lu(op, mu).solve(mask * g)
    else:
        v = _stationary_lu(op, mu).solve(mask * psi)
    _check_finite(v, "elliptic v")
    src = np.asarray(dy @ u) * np.asarray(dy @ v)
    w = _stationary_lu(op, lam + mu).solve(mask * src)
    _check_finite(w, "elliptic w")
    return EllipticResult(u=u, v=v, w=w, query=q)
