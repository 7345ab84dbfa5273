"""Corner-pinned superposition solve for the stationary elasto-plastic problem.

If the solution values at the two corners (+bound, 0) and (-bound, 0) were
known, the stationary problem would be a standard one with Dirichlet data
there.  Linearity lets us build the solution from three local solves that
share one factorization: a particular solve v with both corners pinned to
zero, and two corner-influence fields pi+ / pi- pinned to (1, 0) and
(0, 1).  The corner values (u+, u-) then follow from a 2x2 continuity
system matching the one-sided limits in velocity on each boundary column,
and u = v + u+ pi+ + u- pi-.

This route only exists because the non-standard data of the plastic
problem concentrates in two points; it serves as an independent check of
the direct solve.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .model import OscillatorKind
from .operators import DiscreteOperator


class GluingError(RuntimeError):
    """Raised when the corner-continuity system is numerically singular."""


@dataclass
class LocalTriple:
    """The three pinned local solves plus their one-sided corner limits.

    `limits` maps field name -> ((at +bound: below, above), (at -bound:
    below, above)) where below/above are the neighbors of the corner in
    velocity, read as the one-sided limits y -> 0- and y -> 0+.
    """

    operator: DiscreteOperator
    lam: float
    v: np.ndarray
    pi_plus: np.ndarray
    pi_minus: np.ndarray
    pin_plus: int
    pin_minus: int

    def one_sided(self, field: np.ndarray) -> np.ndarray:
        """[[f(+b,0-), f(+b,0+)], [f(-b,0-), f(-b,0+)]] for a grid field."""
        g = self.operator.grid
        jc = g.jtilde
        return np.array(
            [
                [field[g.node_index(g.I - 1, jc - 1)], field[g.node_index(g.I - 1, jc + 1)]],
                [field[g.node_index(0, jc - 1)], field[g.node_index(0, jc + 1)]],
            ]
        )


def _pinned_lu(op: DiscreteOperator, lam: float, pins: tuple[int, int]):
    key = ("superposition", lam, pins)
    lu = op._lu_cache.get(key)
    if lu is None:
        d_eq = sp.diags(op.is_equation.astype(float))
        mat = (lam * d_eq + op.matrix).tolil()
        for node in pins:
            mat.rows[node] = [node]
            mat.data[node] = [1.0]
        lu = splu(mat.tocsc())
        op._lu_cache[key] = lu
    return lu


def solve_local_triple(op: DiscreteOperator, lam: float, source: np.ndarray) -> LocalTriple:
    """Solve the three corner-pinned problems sharing one factorization."""
    if op.params is None or op.params.kind is not OscillatorKind.ELASTO_PLASTIC:
        raise ValueError("superposition applies to the elasto-plastic operator")
    if not lam > 0.0:
        raise ValueError("superposition needs lam > 0")
    g = op.grid
    pin_plus = int(g.node_index(g.I - 1, g.jtilde))
    pin_minus = int(g.node_index(0, g.jtilde))
    lu = _pinned_lu(op, lam, (pin_plus, pin_minus))
    mask = op.is_equation.astype(float)

    def solve(rhs_field, plus_val, minus_val):
        rhs = mask * rhs_field
        rhs[pin_plus] = plus_val
        rhs[pin_minus] = minus_val
        out = lu.solve(rhs)
        if not np.all(np.isfinite(out)):
            raise RuntimeError("pinned local solve produced non-finite values")
        return out

    v = solve(source, 0.0, 0.0)
    zero = np.zeros(op.n)
    pi_plus = solve(zero, 1.0, 0.0)
    pi_minus = solve(zero, 0.0, 1.0)
    return LocalTriple(
        operator=op,
        lam=lam,
        v=v,
        pi_plus=pi_plus,
        pi_minus=pi_minus,
        pin_plus=pin_plus,
        pin_minus=pin_minus,
    )


@dataclass
class GluedSolution:
    u: np.ndarray
    u_plus: float
    u_minus: float
    residual_jumps: tuple[float, float]
    condition_number: float

    def value_at(self, node: int, lam: float) -> float:
        return float(lam * self.u[node])


def glue(triple: LocalTriple, cond_limit: float = 1e12) -> GluedSolution:
    """Choose corner values making the combined field continuous at both corners."""
    lv = triple.one_sided(triple.v)
    lp = triple.one_sided(triple.pi_plus)
    lm = triple.one_sided(triple.pi_minus)
    # rows: corner +bound then -bound; columns: influence of u+ then u-
    pi_mat = np.array(
        [
            [lp[0, 1] - lp[0, 0], lm[0, 1] - lm[0, 0]],
            [lp[1, 1] - lp[1, 0], lm[1, 1] - lm[1, 0]],
        ]
    )
    rhs = np.array([lv[0, 0] - lv[0, 1], lv[1, 0] - lv[1, 1]])
    cond = float(np.linalg.cond(pi_mat))
    if not np.isfinite(cond) or cond > cond_limit:
        raise GluingError(
            f"corner continuity system is singular (condition number {cond:.3e})"
        )
    u_pm = np.linalg.solve(pi_mat, rhs)
    u = triple.v + u_pm[0] * triple.pi_plus + u_pm[1] * triple.pi_minus
    lu_ = triple.one_sided(u)
    return GluedSolution(
        u=u,
        u_plus=float(u_pm[0]),
        u_minus=float(u_pm[1]),
        residual_jumps=(float(lu_[0, 1] - lu_[0, 0]), float(lu_[1, 1] - lu_[1, 0])),
        condition_number=cond,
    )


def stationary_by_superposition(
    op: DiscreteOperator, lam: float, source: np.ndarray, query: int | None = None
) -> tuple[float, GluedSolution]:
    """Long-run mean estimate lam * u(query) via the pinned route."""
    q = op.grid.center_index if query is None else query
    glued = glue(solve_local_triple(op, lam, source))
    return float(lam * glued.u[q]), glued
