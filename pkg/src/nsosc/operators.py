"""Finite-difference grid and sparse generator assembly.

The computational domain is the rectangle [-bound, bound] x [-Y, Y] in
(deformation, velocity).  The grid stores the normalized deformation
coordinate zeta in [-1, 1]; assembly applies the physical half-width, so
one grid serves a whole parameter sweep at uniform relative resolution.

Row layout of the generator matrix M (N = I*J unknowns, node n = j*I + i,
deformation index fastest):

* interior rows discretize -L with first-order upwind differences chosen
  by the sign of the velocity (transport in z) and of the drift
  b = -(c0*y + k*z) (transport in y), plus the centered second difference
  for the (1/2) d2/dy2 diffusion;
* the elasto-plastic boundary columns z = +-bound carry the plastic-phase
  generators: the same stencil with the outward transport term removed,
  so nothing is referenced outside the rectangle;
* the obstacle boundary columns carry, on their incoming-velocity halves,
  identification rows tying the pre-impact value to the value at the
  reflected velocity -e*y (linear interpolation between the two bracketing
  grid neighbors); the outgoing halves satisfy the interior equation;
* the top and bottom velocity edges carry one-sided homogeneous Neumann
  rows closing the artificial truncation.

Every row of M annihilates constants, stencil rows have positive diagonal
and nonpositive off-diagonals (an M-matrix), and the Neumann /
identification rows are flagged as constraints so the solvers can impose
them exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .model import OscillatorKind, OscillatorParams


@dataclass(frozen=True)
class Grid:
    """Tensor grid with odd point counts so the center node is exactly (0, 0)."""

    itilde: int
    jtilde: int
    y_half: float = 3.0

    def __post_init__(self):
        if self.itilde < 1 or self.jtilde < 1:
            raise ValueError("half counts must be at least 1")
        if not self.y_half > 0.0:
            raise ValueError("velocity truncation must be positive")

    @property
    def I(self) -> int:  # noqa: E743 - domain naming
        return 2 * self.itilde + 1

    @property
    def J(self) -> int:
        return 2 * self.jtilde + 1

    @property
    def n_nodes(self) -> int:
        return self.I * self.J

    @cached_property
    def zeta(self) -> np.ndarray:
        # (i - itilde)/itilde hits -1, 0, +1 exactly
        return (np.arange(self.I) - self.itilde) / float(self.itilde)

    @cached_property
    def y(self) -> np.ndarray:
        return self.y_half * (np.arange(self.J) - self.jtilde) / float(self.jtilde)

    @property
    def dzeta(self) -> float:
        return 2.0 / (self.I - 1)

    @property
    def dy(self) -> float:
        return 2.0 * self.y_half / (self.J - 1)

    def node_index(self, i, j):
        return np.asarray(j) * self.I + np.asarray(i)

    @property
    def center_index(self) -> int:
        return int(self.jtilde * self.I + self.itilde)

    def z_phys(self, bound: float) -> np.ndarray:
        return bound * self.zeta

    def meshes(self, bound: float) -> tuple[np.ndarray, np.ndarray]:
        """Physical coordinate meshes shaped (J, I); C-flatten matches node order."""
        return np.meshgrid(self.z_phys(bound), self.y, indexing="xy")

    def start_index(self, z0: float, y0: float, bound: float) -> int:
        i = int(np.argmin(np.abs(self.z_phys(bound) - z0)))
        j = int(np.argmin(np.abs(self.y - y0)))
        return int(self.node_index(i, j))

    def reflection_permutation(self) -> np.ndarray:
        """Node permutation of the point reflection (z, y) -> (-z, -y)."""
        ii, jj = np.meshgrid(np.arange(self.I), np.arange(self.J), indexing="xy")
        return self.node_index(self.I - 1 - ii, self.J - 1 - jj).ravel()


def build_grid(itilde: int, jtilde: int, y_half: float = 3.0) -> Grid:
    return Grid(itilde=itilde, jtilde=jtilde, y_half=y_half)


class RowKind(IntEnum):
    INTERIOR = 0
    PLASTIC_PLUS = 1
    PLASTIC_MINUS = 2
    IMPACT_IDENTIFY = 3
    NEUMANN_BOTTOM = 4
    NEUMANN_TOP = 5
    NEUMANN_LEFT = 6
    NEUMANN_RIGHT = 7


class NodeRole(IntEnum):
    """Figure-style node classification: where the equation holds, where the
    truncation Neumann rows sit, and where the non-standard boundary rows sit."""

    EQUATION = 0
    NEUMANN = 1
    NONSTANDARD = 2


def classify_nodes(grid: Grid, kind: OscillatorKind) -> np.ndarray:
    """Role per node; the non-standard set is the incoming-constraint half of
    each boundary column: (i=I-1, y>0) and (i=0, y<0)."""
    roles = np.full(grid.n_nodes, NodeRole.EQUATION, dtype=np.int8)
    ii = np.arange(grid.I)
    roles[grid.node_index(ii, 0)] = NodeRole.NEUMANN
    roles[grid.node_index(ii, grid.J - 1)] = NodeRole.NEUMANN
    jj = np.arange(1, grid.J - 1)
    up = jj[grid.y[jj] > 0.0]
    dn = jj[grid.y[jj] < 0.0]
    roles[grid.node_index(grid.I - 1, up)] = NodeRole.NONSTANDARD
    roles[grid.node_index(0, dn)] = NodeRole.NONSTANDARD
    return roles


@dataclass
class DiscreteOperator:
    """Sparse generator matrix (rows represent -L) plus row metadata.

    `is_equation` marks the dynamic rows; the remaining rows are algebraic
    constraints (Neumann closure or impact identification) imposed exactly
    by the solvers, which mask the time-derivative, the discount and the
    right-hand side on them.
    """

    grid: Grid
    params: OscillatorParams | None
    bound: float
    matrix: sp.csr_matrix
    row_kind: np.ndarray
    is_equation: np.ndarray
    drift: np.ndarray
    _lu_cache: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def equation_mask(self) -> np.ndarray:
        return self.is_equation.astype(float)

    def dump_coo(self, path: str | Path) -> None:
        """Debug dump in coordinate text format: row col value per line."""
        coo = self.matrix.tocoo()
        with open(path, "w", encoding="ascii") as fh:
            for r, c, v in zip(coo.row, coo.col, coo.data):
                fh.write(f"{r} {c} {v:.17g}\n")


class _CooBuilder:
    def __init__(self):
        self.rows: list[np.ndarray] = []
        self.cols: list[np.ndarray] = []
        self.vals: list[np.ndarray] = []

    def add(self, rows, cols, vals):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=float)
        keep = vals != 0.0
        self.rows.append(rows[keep])
        self.cols.append(cols[keep])
        self.vals.append(vals[keep])

    def tocsr(self, n: int) -> sp.csr_matrix:
        rows = np.concatenate(self.rows) if self.rows else np.empty(0, dtype=np.int64)
        cols = np.concatenate(self.cols) if self.cols else np.empty(0, dtype=np.int64)
        vals = np.concatenate(self.vals) if self.vals else np.empty(0)
        mat = sp.coo_matrix((vals, (rows, cols)), shape=(n, n))
        mat.sum_duplicates()
        return mat.tocsr()


def _add_velocity_terms(bld, grid, n, b):
    """Diffusion (1/2) d2/dy2 plus drift-upwinded first difference, rows n at
    velocity drift b; assumes every row in n has both j-neighbors."""
    I = grid.I
    dy = grid.dy
    half = 0.5 / dy ** 2
    bld.add(n, n, np.full(n.shape, 2.0 * half))
    bld.add(n, n + I, np.full(n.shape, -half))
    bld.add(n, n - I, np.full(n.shape, -half))
    bp = np.maximum(b, 0.0)
    bm = np.minimum(b, 0.0)
    bld.add(n, n + I, -bp / dy)
    bld.add(n, n, bp / dy)
    bld.add(n, n, -bm / dy)
    bld.add(n, n - I, bm / dy)


def _add_transport_terms(bld, grid, n, y, dz, east_ok, west_ok):
    """Upwinded z-transport with velocity y; east/west flags gate the terms
    that would reference nodes outside the rectangle."""
    yp = np.where(east_ok, np.maximum(y, 0.0), 0.0)
    ym = np.where(west_ok, np.minimum(y, 0.0), 0.0)
    bld.add(n[east_ok], n[east_ok] + 1, -yp[east_ok] / dz)
    bld.add(n, n, yp / dz)
    bld.add(n, n, -ym / dz)
    bld.add(n[west_ok], n[west_ok] - 1, ym[west_ok] / dz)


def _add_neumann_y(bld, grid, row_kind):
    I, J = grid.I, grid.J
    dy = grid.dy
    ii = np.arange(I)
    bot = grid.node_index(ii, 0)
    top = grid.node_index(ii, J - 1)
    bld.add(bot, bot, np.full(I, 1.0 / dy))
    bld.add(bot, bot + I, np.full(I, -1.0 / dy))
    bld.add(top, top, np.full(I, 1.0 / dy))
    bld.add(top, top - I, np.full(I, -1.0 / dy))
    row_kind[bot] = RowKind.NEUMANN_BOTTOM
    row_kind[top] = RowKind.NEUMANN_TOP


def _drift_table(grid: Grid, params: OscillatorParams) -> np.ndarray:
    zz, yy = grid.meshes(params.bound)
    return (-(params.c0 * yy + params.k * zz)).ravel()


def assemble_elastoplastic(grid: Grid, params: OscillatorParams) -> DiscreteOperator:
    """Generator of the elasto-plastic pair (Z, Y) on the truncated rectangle.

    The boundary columns carry the plastic-phase generators: at z = +bound
    only the inward (y < 0) transport survives, at z = -bound only the
    outward (y > 0) one, which encodes that the deformation is pinned while
    the system flows plastically.
    """
    if params.kind is not OscillatorKind.ELASTO_PLASTIC:
        raise ValueError("elasto-plastic parameters required")
    I, J, N = grid.I, grid.J, grid.n_nodes
    dz = params.bound * grid.dzeta
    bld = _CooBuilder()
    row_kind = np.full(N, RowKind.INTERIOR, dtype=np.int8)

    ii, jj = np.meshgrid(np.arange(I), np.arange(1, J - 1), indexing="xy")
    ii = ii.ravel()
    jj = jj.ravel()
    n = grid.node_index(ii, jj)
    y = grid.y[jj]
    b = -(params.c0 * y + params.k * params.bound * grid.zeta[ii])
    _add_velocity_terms(bld, grid, n, b)
    _add_transport_terms(bld, grid, n, y, dz, east_ok=ii < I - 1, west_ok=ii > 0)

    jc = np.arange(1, J - 1)
    row_kind[grid.node_index(I - 1, jc)] = RowKind.PLASTIC_PLUS
    row_kind[grid.node_index(0, jc)] = RowKind.PLASTIC_MINUS

    _add_neumann_y(bld, grid, row_kind)
    is_eq = (row_kind != RowKind.NEUMANN_BOTTOM) & (row_kind != RowKind.NEUMANN_TOP)
    return DiscreteOperator(
        grid=grid,
        params=params,
        bound=params.bound,
        matrix=bld.tocsr(N),
        row_kind=row_kind,
        is_equation=is_eq,
        drift=_drift_table(grid, params),
    )


def _identification_targets(grid: Grid, e: float, jj: np.ndarray):
    """Bracketing index and weight for the reflected velocity -e*y_j.

    Returns (j_lo, c) with c*y[j_lo] + (1-c)*y[j_lo+1] == -e*y_j.  Exact
    grid hits land on either bracket endpoint with weight 1, so floating
    point jitter in the floor is harmless.
    """
    Y = grid.y_half
    dy = grid.dy
    target = -e * grid.y[jj]
    j_lo = np.floor((Y + target) / dy).astype(np.int64)
    j_lo = np.minimum(j_lo, grid.J - 2)
    c = (grid.y[j_lo + 1] - target) / dy
    if np.any(j_lo < 0) or np.any(j_lo + 1 > grid.J - 1):
        raise AssertionError("identification interpolation index out of range")
    if np.any(c < -1e-12) or np.any(c > 1.0 + 1e-12):
        raise AssertionError("identification weight outside [0, 1]")
    return j_lo, np.clip(c, 0.0, 1.0)


def assemble_obstacle(grid: Grid, params: OscillatorParams) -> DiscreteOperator:
    """Generator of the impacting pair (X, Y) on the truncated rectangle.

    Boundary columns: nodes with incoming velocity (x = +bound, y > 0 and
    x = -bound, y < 0) are identified with the post-impact state at
    velocity -e*y via linear interpolation in the same column; the
    remaining boundary nodes satisfy the interior equation, whose upwind
    transport never reaches outside the rectangle there.
    """
    if params.kind is not OscillatorKind.OBSTACLE:
        raise ValueError("obstacle parameters required")
    I, J, N = grid.I, grid.J, grid.n_nodes
    e = params.restitution
    dz = params.bound * grid.dzeta
    bld = _CooBuilder()
    row_kind = np.full(N, RowKind.INTERIOR, dtype=np.int8)

    ii, jj = np.meshgrid(np.arange(I), np.arange(1, J - 1), indexing="xy")
    ii = ii.ravel()
    jj = jj.ravel()
    y = grid.y[jj]
    identify = ((ii == I - 1) & (y > 0.0)) | ((ii == 0) & (y < 0.0))

    ie, je = ii[~identify], jj[~identify]
    n = grid.node_index(ie, je)
    ye = grid.y[je]
    b = -(params.c0 * ye + params.k * params.bound * grid.zeta[ie])
    _add_velocity_terms(bld, grid, n, b)
    _add_transport_terms(bld, grid, n, ye, dz, east_ok=ie < I - 1, west_ok=ie > 0)

    im, jm = ii[identify], jj[identify]
    nm = grid.node_index(im, jm)
    j_lo, c = _identification_targets(grid, e, jm)
    bld.add(nm, nm, np.ones(nm.shape))
    bld.add(nm, grid.node_index(im, j_lo), -c)
    bld.add(nm, grid.node_index(im, j_lo + 1), -(1.0 - c))
    row_kind[nm] = RowKind.IMPACT_IDENTIFY

    _add_neumann_y(bld, grid, row_kind)
    is_eq = (
        (row_kind != RowKind.NEUMANN_BOTTOM)
        & (row_kind != RowKind.NEUMANN_TOP)
        & (row_kind != RowKind.IMPACT_IDENTIFY)
    )
    return DiscreteOperator(
        grid=grid,
        params=params,
        bound=params.bound,
        matrix=bld.tocsr(N),
        row_kind=row_kind,
        is_equation=is_eq,
        drift=_drift_table(grid, params),
    )


def assemble_free_box(
    grid: Grid, c0: float, k: float = 0.0, bound: float = 1.0
) -> DiscreteOperator:
    """Unconstrained damped oscillator on a Neumann box.

    Validation operator for the smooth case: no plastic or impact rows,
    homogeneous Neumann closure on all four edges.  With k = 0 the velocity
    decouples into an Ornstein-Uhlenbeck process with known moments.
    """
    I, J, N = grid.I, grid.J, grid.n_nodes
    dz = bound * grid.dzeta
    bld = _CooBuilder()
    row_kind = np.full(N, RowKind.INTERIOR, dtype=np.int8)

    ii, jj = np.meshgrid(np.arange(1, I - 1), np.arange(1, J - 1), indexing="xy")
    ii = ii.ravel()
    jj = jj.ravel()
    n = grid.node_index(ii, jj)
    y = grid.y[jj]
    b = -(c0 * y + k * bound * grid.zeta[ii])
    _add_velocity_terms(bld, grid, n, b)
    _add_transport_terms(
        bld, grid, n, y, dz, east_ok=np.ones(n.shape, bool), west_ok=np.ones(n.shape, bool)
    )

    jc = np.arange(1, J - 1)
    left = grid.node_index(0, jc)
    right = grid.node_index(I - 1, jc)
    bld.add(left, left, np.full(jc.shape, 1.0 / dz))
    bld.add(left, left + 1, np.full(jc.shape, -1.0 / dz))
    bld.add(right, right, np.full(jc.shape, 1.0 / dz))
    bld.add(right, right - 1, np.full(jc.shape, -1.0 / dz))
    row_kind[left] = RowKind.NEUMANN_LEFT
    row_kind[right] = RowKind.NEUMANN_RIGHT

    _add_neumann_y(bld, grid, row_kind)
    is_eq = row_kind == RowKind.INTERIOR
    zz, yy = grid.meshes(bound)
    return DiscreteOperator(
        grid=grid,
        params=None,
        bound=bound,
        matrix=bld.tocsr(N),
        row_kind=row_kind,
        is_equation=is_eq,
        drift=(-(c0 * yy + k * zz)).ravel(),
    )


def evaluate_on_grid(obs, grid: Grid, bound: float) -> np.ndarray:
    """Observable evaluated at every node, flattened in node order."""
    if obs is None:
        return np.zeros(grid.n_nodes)
    zz, yy = grid.meshes(bound)
    return np.asarray(obs(zz, yy), dtype=float).ravel()


def dy_matrix(grid: Grid) -> sp.csr_matrix:
    """Velocity derivative: centered inside, one-sided on the velocity edges."""
    I, J, N = grid.I, grid.J, grid.n_nodes
    dy = grid.dy
    bld = _CooBuilder()
    ii, jj = np.meshgrid(np.arange(I), np.arange(1, J - 1), indexing="xy")
    n = grid.node_index(ii.ravel(), jj.ravel())
    half = np.full(n.shape, 0.5 / dy)
    bld.add(n, n + I, half)
    bld.add(n, n - I, -half)
    ii = np.arange(I)
    bot = grid.node_index(ii, 0)
    top = grid.node_index(ii, J - 1)
    one = np.full(I, 1.0 / dy)
    bld.add(bot, bot + I, one)
    bld.add(bot, bot, -one)
    bld.add(top, top, one)
    bld.add(top, top - I, -one)
    return bld.tocsr(N)
