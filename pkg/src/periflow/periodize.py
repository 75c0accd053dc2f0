"""Extended linear system (ELS) for Stokes flow in one periodic unit cell.

The velocity is represented as a double layer on the central walls plus
their two immediate lattice images, together with a small ring of
stokeslet proxy sources that carries the field of all farther images:

    u = D^nr_Gamma tau + sum_m c_m S(., y_m).

Imposing the wall velocity data (with the interior jump relation) and the
periodicity discrepancies between the side collocation walls L and R
yields the block system

    [A B; C Q] [tau; c] = [v; g],

where A is second-kind on the walls, and the C row couples only the
*distant* images (the near wall-side interactions cancel analytically).

Degree-of-freedom convention: wall nodes are stacked [upper; lower]
(2N nodes total) and vectors are component-major, so DOF index
comp*(2N) + node. Side rows stack the velocity discrepancy over the
traction discrepancy, each component-major over the K side nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import kernels as kr
from .errors import GeometryError, NearFieldError, NumericalError
from .geometry import ClosedCurve, WallGeometry
from .kernels import KernelContext
from .linalg import TruncatedPseudoInverse, truncated_pinv


# ---------------------------------------------------------------------------
# Stacked wall arrays and entry oracles
# ---------------------------------------------------------------------------

class WallStack:
    """Upper and lower wall nodes as one source/target set with metrics."""

    def __init__(self, walls: WallGeometry):
        self.walls = walls
        self.nodes = walls.all_nodes()                      # (2, 2N)
        self.normals = np.hstack([walls.upper.normal, walls.lower.normal])
        self.tangents = np.hstack([walls.upper.tangent, walls.lower.tangent])
        self.curvature = np.hstack([walls.upper.curvature, walls.lower.curvature])
        self.weights = np.hstack([walls.upper.weights, walls.lower.weights])
        self.n_nodes = self.nodes.shape[1]

    @property
    def n_dofs(self) -> int:
        return 2 * self.n_nodes

    def dofs_of_nodes(self, nodes: np.ndarray) -> np.ndarray:
        """All DOFs of a node set: component 1 block then component 2."""
        nodes = np.asarray(nodes)
        return np.concatenate([nodes, nodes + self.n_nodes])


class WallSelfOperator:
    """Entry oracle for A0 = -1/2 I + D_{Gamma,Gamma} (Nystrom diagonal limit)."""

    def __init__(self, stack: WallStack, ctx: KernelContext):
        self.stack = stack
        self.ctx = ctx

    def block(self, row_dofs: np.ndarray, col_dofs: np.ndarray) -> np.ndarray:
        s = self.stack
        rnode = row_dofs % s.n_nodes
        rcomp = row_dofs // s.n_nodes
        cnode = col_dofs % s.n_nodes
        ccomp = col_dofs // s.n_nodes
        d0 = s.nodes[0][rnode][:, None] - s.nodes[0][cnode][None, :]
        d1 = s.nodes[1][rnode][:, None] - s.nodes[1][cnode][None, :]
        r2 = d0 * d0 + d1 * d1
        same = rnode[:, None] == cnode[None, :]
        r2[same] = 1.0
        rdn = (d0 * s.normals[0][cnode][None, :]
               + d1 * s.normals[1][cnode][None, :])
        di = np.where((rcomp == 0)[:, None], d0, d1)
        dj = np.where((ccomp == 0)[None, :], d0, d1)
        out = di * dj * rdn / (np.pi * r2 * r2)
        # curvature diagonal limit on coincident nodes
        ti = s.tangents[rcomp, rnode][:, None]
        tj = s.tangents[ccomp, cnode][None, :]
        kap = s.curvature[cnode][None, :]
        np.copyto(out, -kap / (2.0 * np.pi) * ti * tj, where=same)
        out *= s.weights[cnode][None, :]
        out[same & (rcomp[:, None] == ccomp[None, :])] += -0.5
        return out

    def dense(self) -> np.ndarray:
        dofs = np.arange(self.stack.n_dofs)
        return self.block(dofs, dofs)


class WallImageOperator:
    """Entry oracle for a neighbor-image block A_j, sources shifted by j*d."""

    def __init__(self, stack: WallStack, ctx: KernelContext, side: int):
        if side not in (-1, 1):
            raise ValueError("side must be -1 or +1")
        self.stack = stack
        self.ctx = ctx
        self.shift = side * stack.walls.period

    def block(self, row_dofs: np.ndarray, col_dofs: np.ndarray) -> np.ndarray:
        s = self.stack
        rnode = row_dofs % s.n_nodes
        rcomp = row_dofs // s.n_nodes
        cnode = col_dofs % s.n_nodes
        ccomp = col_dofs // s.n_nodes
        d0 = s.nodes[0][rnode][:, None] - (s.nodes[0][cnode] + self.shift)[None, :]
        d1 = s.nodes[1][rnode][:, None] - s.nodes[1][cnode][None, :]
        r2 = d0 * d0 + d1 * d1
        rdn = (d0 * s.normals[0][cnode][None, :]
               + d1 * s.normals[1][cnode][None, :])
        di = np.where((rcomp == 0)[:, None], d0, d1)
        dj = np.where((ccomp == 0)[None, :], d0, d1)
        out = di * dj * rdn / (np.pi * r2 * r2)
        out *= s.weights[cnode][None, :]
        return out

    def dense(self) -> np.ndarray:
        dofs = np.arange(self.stack.n_dofs)
        return self.block(dofs, dofs)


# ---------------------------------------------------------------------------
# Proxy basis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProxyBasis:
    """Equispaced stokeslet sources on a circle enclosing the unit cell."""

    points: np.ndarray   # (2, M)
    center: np.ndarray
    radius: float

    @property
    def count(self) -> int:
        return self.points.shape[1]


def build_proxy_basis(walls: WallGeometry, count: int = 128,
                      radius: float | None = None) -> ProxyBasis:
    d = walls.period
    radius = d if radius is None else radius
    if not radius < 1.5 * d:
        raise GeometryError("proxy radius must stay below 3d/2 or the circle "
                            "encloses image sources")
    center = walls.center
    reach = np.max(np.hypot(*(walls.all_nodes() - center[:, None])))
    if reach >= radius:
        raise GeometryError("proxy circle touches the channel walls")
    a = 2.0 * np.pi * np.arange(count) / count
    points = center[:, None] + radius * np.vstack([np.cos(a), np.sin(a)])
    return ProxyBasis(points=points, center=center, radius=radius)


# ---------------------------------------------------------------------------
# ELS blocks and right-hand sides
# ---------------------------------------------------------------------------

@dataclass
class ELSBlocks:
    a: np.ndarray   # (4N, 4N)
    b: np.ndarray   # (4N, 2M)
    c: np.ndarray   # (4K, 4N)
    q: np.ndarray   # (4K, 2M)
    stack: WallStack
    proxy: ProxyBasis
    ctx: KernelContext


def _side_normals(k: int) -> np.ndarray:
    return np.vstack([np.ones(k), np.zeros(k)])


def assemble_els_bcq(walls: WallGeometry, proxy: ProxyBasis, ctx: KernelContext
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray, WallStack]:
    """The B (proxy -> walls), C and Q (-> discrepancy) blocks; A is separate."""
    stack = WallStack(walls)
    b = kr.stokeslet_block(stack.nodes, proxy.points, ctx.mu)

    d = walls.period
    right, left = walls.side_right, walls.side_left
    nrm = _side_normals(walls.k_side)
    w2 = np.tile(stack.weights, 2)[None, :]
    shifted = lambda dx: stack.nodes + np.array([[dx], [0.0]])
    c_u = (kr.double_layer_block(right, shifted(-d), stack.normals)
           - kr.double_layer_block(left, shifted(+d), stack.normals)) * w2
    c_t = (kr.traction_double_block(right, shifted(-d), nrm, stack.normals, ctx.mu)
           - kr.traction_double_block(left, shifted(+d), nrm, stack.normals, ctx.mu)) * w2
    c = np.vstack([c_u, c_t])

    q_u = (kr.stokeslet_block(right, proxy.points, ctx.mu)
           - kr.stokeslet_block(left, proxy.points, ctx.mu))
    q_t = (kr.traction_single_block(right, proxy.points, nrm)
           - kr.traction_single_block(left, proxy.points, nrm))
    q = np.vstack([q_u, q_t])
    return b, c, q, stack


def assemble_els(walls: WallGeometry, proxy: ProxyBasis,
                 ctx: KernelContext) -> ELSBlocks:
    """Dense assembly of all four ELS blocks (small-N / oracle path)."""
    b, c, q, stack = assemble_els_bcq(walls, proxy, ctx)
    a = WallSelfOperator(stack, ctx).dense()
    a += WallImageOperator(stack, ctx, -1).dense()
    a += WallImageOperator(stack, ctx, +1).dense()
    return ELSBlocks(a=a, b=b, c=c, q=q, stack=stack, proxy=proxy, ctx=ctx)


@dataclass
class BoundaryData:
    """Dirichlet wall data and side-wall discrepancies of the ELS."""

    v_upper: np.ndarray   # (2, N)
    v_lower: np.ndarray   # (2, N)
    g_u: np.ndarray       # (2, K)
    g_t: np.ndarray       # (2, K)

    def stacked_v(self) -> np.ndarray:
        return np.concatenate([self.v_upper[0], self.v_lower[0],
                               self.v_upper[1], self.v_lower[1]])

    def stacked_g(self) -> np.ndarray:
        return np.concatenate([self.g_u[0], self.g_u[1],
                               self.g_t[0], self.g_t[1]])

    def consistency_residual(self, walls: WallGeometry) -> float:
        """Net flux of the wall data (zero for consistent data; reported only)."""
        up = np.sum((self.v_upper * walls.upper.normal).sum(axis=0)
                    * walls.upper.weights)
        dn = np.sum((self.v_lower * walls.lower.normal).sum(axis=0)
                    * walls.lower.weights)
        return float(up + dn)


def rhs_empty_pipe(walls: WallGeometry, v_upper: np.ndarray, v_lower: np.ndarray,
                   p_drive: float) -> BoundaryData:
    """Pipe without particles: zero velocity discrepancy, traction jump p*n."""
    n, k = walls.n_wall, walls.k_side
    v_upper = np.broadcast_to(np.asarray(v_upper, dtype=float), (2, n)).copy()
    v_lower = np.broadcast_to(np.asarray(v_lower, dtype=float), (2, n)).copy()
    g_t = np.zeros((2, k))
    g_t[0] = p_drive
    return BoundaryData(v_upper=v_upper, v_lower=v_lower,
                        g_u=np.zeros((2, k)), g_t=g_t)


def poiseuille_alpha(p_drive: float, ctx: KernelContext, d: float) -> float:
    return p_drive / (2.0 * ctx.mu * d)


def poiseuille_velocity(points: np.ndarray, alpha: float) -> np.ndarray:
    return np.vstack([alpha * points[1] ** 2, np.zeros(points.shape[1])])


def poiseuille_pressure(points: np.ndarray, alpha: float, ctx: KernelContext) -> np.ndarray:
    return 2.0 * alpha * ctx.mu * points[0]


def poiseuille_data(walls: WallGeometry, ctx: KernelContext,
                    p_drive: float) -> BoundaryData:
    """Manufactured data whose unit-cell solution is plane Poiseuille flow.

    The solution pair is u_e = (alpha*x2^2, 0), p_e = 2*alpha*mu*x1 with
    alpha = p_drive/(2*mu*d), whose pressure *rises* by p_drive per
    period. Its traction discrepancy between matched side points is
    -(p_e(R) - p_e(L))*n = -p_drive*n (the viscous part is periodic and
    cancels), hence the sign flip when delegating to rhs_empty_pipe,
    whose drive argument means a downstream pressure decrease.
    """
    alpha = poiseuille_alpha(p_drive, ctx, walls.period)
    return rhs_empty_pipe(walls,
                          poiseuille_velocity(walls.upper.nodes, alpha),
                          poiseuille_velocity(walls.lower.nodes, alpha),
                          -p_drive)


def _vesicle_guard(walls: WallGeometry, vesicles, factor: float) -> None:
    spacing = walls.grid_spacing()
    wall_nodes = walls.all_nodes()
    for ves in vesicles:
        d0 = ves.nodes[0][:, None] - wall_nodes[0][None, :]
        d1 = ves.nodes[1][:, None] - wall_nodes[1][None, :]
        dist = np.sqrt(np.min(d0 * d0 + d1 * d1))
        if dist < factor * spacing:
            raise NearFieldError(
                f"vesicle within {dist:.3g} of a wall; guard is "
                f"{factor:.3g} grid spacings = {factor * spacing:.3g}")


def rhs_from_vesicles(walls: WallGeometry, vesicles: list[ClosedCurve],
                      forces: list[np.ndarray], p_drive: float,
                      ctx: KernelContext, guard_factor: float = 3.0) -> BoundaryData:
    """Wall data induced by vesicle force densities, plus pressure driving.

    ``forces`` are per-unit-arclength densities f on each vesicle, shape
    (2, Mv); their single-layer traces (with the +-1 lattice images) give
    minus the wall data, and only the distant image appears on each side
    wall (the near terms cancel with the L/R contributions analytically).
    """
    if len(vesicles) != len(forces):
        raise ValueError("one force density per vesicle required")
    _vesicle_guard(walls, vesicles, guard_factor)
    d = walls.period
    n, k = walls.n_wall, walls.k_side
    v_up = np.zeros(2 * n)
    v_dn = np.zeros(2 * n)
    g_u = np.zeros(2 * k)
    g_t = np.zeros(2 * k)
    nrm = _side_normals(k)
    for ves, f in zip(vesicles, forces):
        fw = (np.asarray(f, dtype=float)
              * ves.metrics().weights[None, :]).reshape(-1)
        for shift in (-d, 0.0, d):
            src = ves.nodes + np.array([[shift], [0.0]])
            v_up -= kr.stokeslet_block(walls.upper.nodes, src, ctx.mu) @ fw
            v_dn -= kr.stokeslet_block(walls.lower.nodes, src, ctx.mu) @ fw
        src_m = ves.nodes + np.array([[-d], [0.0]])
        src_p = ves.nodes + np.array([[+d], [0.0]])
        g_u -= kr.stokeslet_block(walls.side_right, src_m, ctx.mu) @ fw
        g_u += kr.stokeslet_block(walls.side_left, src_p, ctx.mu) @ fw
        g_t -= kr.traction_single_block(walls.side_right, src_m, nrm) @ fw
        g_t += kr.traction_single_block(walls.side_left, src_p, nrm) @ fw
    g_t = g_t.reshape(2, k)
    g_t[0] += p_drive
    return BoundaryData(v_upper=v_up.reshape(2, n), v_lower=v_dn.reshape(2, n),
                        g_u=g_u.reshape(2, k), g_t=g_t)


# ---------------------------------------------------------------------------
# Dense solve and field evaluation
# ---------------------------------------------------------------------------

class DenseElsSolver:
    """Block solve of the ELS via LU of A and a truncated-pseudoinverse Schur
    complement: c = S^+(g - C A^{-1} v), tau = A^{-1} v - A^{-1} B c,
    with S = Q - C A^{-1} B."""

    def __init__(self, blocks: ELSBlocks, pinv_tol: float = 1e-8):
        self.blocks = blocks
        try:
            self._lu = scipy.linalg.lu_factor(blocks.a)
        except scipy.linalg.LinAlgError as exc:
            raise NumericalError(f"wall operator A is singular: {exc}") from exc
        self.a_inv_b = scipy.linalg.lu_solve(self._lu, blocks.b)
        self.schur = blocks.q - blocks.c @ self.a_inv_b
        self.schur_pinv: TruncatedPseudoInverse = truncated_pinv(self.schur, pinv_tol)

    def solve(self, data: BoundaryData) -> tuple[np.ndarray, np.ndarray]:
        v = data.stacked_v()
        g = data.stacked_g()
        y = scipy.linalg.lu_solve(self._lu, v)
        c = self.schur_pinv.apply(g - self.blocks.c @ y)
        tau = y - self.a_inv_b @ c
        return tau, c

    def residuals(self, data: BoundaryData, tau: np.ndarray,
                  c: np.ndarray) -> tuple[float, float]:
        """Relative residuals of the two block rows."""
        v = data.stacked_v()
        g = data.stacked_g()
        r1 = self.blocks.a @ tau + self.blocks.b @ c - v
        r2 = self.blocks.c @ tau + self.blocks.q @ c - g
        scale = max(np.linalg.norm(v), np.linalg.norm(g), 1e-300)
        return (float(np.linalg.norm(r1) / scale),
                float(np.linalg.norm(r2) / scale))


def solve_els(solver_or_blocks, data: BoundaryData) -> tuple[np.ndarray, np.ndarray]:
    """Solve the ELS for the wall density and proxy coefficients."""
    solver = solver_or_blocks
    if isinstance(solver_or_blocks, ELSBlocks):
        solver = DenseElsSolver(solver_or_blocks)
    return solver.solve(data)


def _check_targets_clear(targets: np.ndarray, curve_nodes: np.ndarray,
                         min_dist: float, label: str) -> None:
    d0 = targets[0][:, None] - curve_nodes[0][None, :]
    d1 = targets[1][:, None] - curve_nodes[1][None, :]
    dist = np.sqrt(np.min(d0 * d0 + d1 * d1))
    if dist < min_dist:
        raise NearFieldError(f"evaluation target within {dist:.3g} of {label} "
                             f"(guard {min_dist:.3g}); plain quadrature would "
                             "be inaccurate there")


def eval_flow(walls: WallGeometry, proxy: ProxyBasis, tau: np.ndarray,
              c: np.ndarray, targets: np.ndarray, ctx: KernelContext,
              vesicles: list[ClosedCurve] | None = None,
              forces: list[np.ndarray] | None = None,
              guard_factor: float = 3.0) -> tuple[np.ndarray, np.ndarray]:
    """Velocity and pressure of the representation at off-curve targets."""
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    if targets.shape[0] != 2:
        targets = targets.T
    stack = WallStack(walls)
    d = walls.period
    spacing = walls.grid_spacing()
    nt = targets.shape[1]
    u = np.zeros(2 * nt)
    p = np.zeros(nt)
    w2 = np.tile(stack.weights, 2)[None, :]
    for shift in (-d, 0.0, d):
        src = stack.nodes + np.array([[shift], [0.0]])
        if guard_factor > 0:
            _check_targets_clear(targets, src, guard_factor * spacing, "walls")
        u += (kr.double_layer_block(targets, src, stack.normals) * w2) @ tau
        p += (kr.double_pressure_block(targets, src, stack.normals, ctx.mu) * w2) @ tau
    u += kr.stokeslet_block(targets, proxy.points, ctx.mu) @ c
    p += kr.single_pressure_block(targets, proxy.points) @ c
    if vesicles:
        for ves, f in zip(vesicles, forces):
            met = ves.metrics()
            fw = (np.asarray(f, dtype=float) * met.weights[None, :]).reshape(-1)
            v_spacing = float(np.max(met.weights))
            for shift in (-d, 0.0, d):
                src = ves.nodes + np.array([[shift], [0.0]])
                if guard_factor > 0:
                    _check_targets_clear(targets, src,
                                         guard_factor * v_spacing, "a vesicle")
                u += kr.stokeslet_block(targets, src, ctx.mu) @ fw
                p += kr.single_pressure_block(targets, src) @ fw
    return u.reshape(2, nt), p
