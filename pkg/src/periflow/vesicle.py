"""Inextensible vesicle membranes coupled to the periodic channel flow.

A membrane exerts bending and tension forces f = -kappa_B x_ssss +
(sigma x_s)_s on the fluid; tension is the Lagrange multiplier of local
inextensibility. Each step solves the semi-implicit system

    [I + dt*kappa_B*S d_ssss,  -S d_s(x_s .)] [u      ]   [-kappa_B S x_ssss + u_resp]
    [x_s . d_s,                 0           ] [sigma' ] = [alc_rhs                    ]

where S sums single-layer interactions over all vesicles (self terms via
the Kress rule, others plain, lattice images included when confined) and
u_resp is the channel response to the explicit membrane forces. The
constraint right-hand side (L0 - L_k)/(dt L_k) cancels accumulated
perimeter drift instead of pinning the instantaneous stretching rate to
zero, which keeps the perimeter error bounded uniformly in the step
count. After the update the enclosed area is restored exactly by a
normal-direction shift (one quadratic equation) and the nodes are
redistributed toward equal arclength spacing.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from . import kernels as kr
from . import periodize as pz
from .errors import GeometryError, NumericalError
from .geometry import (ClosedCurve, WallGeometry, equal_arclength_params,
                       fourier_interpolate, spectral_derivative)
from .kernels import KernelContext
from .linalg import gmres


@dataclass
class VesicleState:
    """Membrane nodes, tension, and the conserved reference quantities."""

    curve: ClosedCurve
    sigma: np.ndarray
    kappa_b: float
    l0: float
    a0: float
    step_index: int = 0

    @classmethod
    def from_curve(cls, curve: ClosedCurve, kappa_b: float = 1.0) -> "VesicleState":
        return cls(curve=curve, sigma=np.zeros(curve.m), kappa_b=kappa_b,
                   l0=curve.metrics().perimeter, a0=curve.area())

    @property
    def m(self) -> int:
        return self.curve.m

    def perimeter_error(self) -> float:
        return abs(self.curve.metrics().perimeter - self.l0) / self.l0

    def area_error(self) -> float:
        return abs(self.curve.area() - self.a0) / abs(self.a0)


def arclength_derivative(curve: ClosedCurve, values: np.ndarray,
                         order: int = 1) -> np.ndarray:
    """Repeated d/ds = |x_a|^{-1} d/da of samples along the curve."""
    speed = curve.metrics().speed
    out = np.asarray(values, dtype=float)
    for _ in range(order):
        out = spectral_derivative(out) / speed
    return out


def bending_force(state: VesicleState) -> np.ndarray:
    return -state.kappa_b * arclength_derivative(state.curve, state.curve.nodes, 4)


def tension_force(state: VesicleState, sigma: np.ndarray | None = None) -> np.ndarray:
    sigma = state.sigma if sigma is None else sigma
    x_s = arclength_derivative(state.curve, state.curve.nodes, 1)
    return arclength_derivative(state.curve, sigma[None, :] * x_s, 1)


def membrane_forces(state: VesicleState) -> np.ndarray:
    """Total force density f = -kappa_B x_ssss + (sigma x_s)_s, shape (2, M)."""
    return bending_force(state) + tension_force(state)


def alc_rhs(state: VesicleState, dt: float) -> float:
    """Constraint right-hand side (L0 - L_k)/(dt L_k) of the corrected
    inextensibility condition."""
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    l_k = state.curve.metrics().perimeter
    return (state.l0 - l_k) / (dt * l_k)


def area_correct(state: VesicleState) -> tuple[ClosedCurve, float]:
    """Shift the curve along (y_a, -x_a) so the enclosed area is exactly a0.

    The enclosed area of x + c*(y_a, -x_a) is a quadratic polynomial in c,
    so the correction solves one quadratic; the real root closest to zero
    is used. Raises if no real root exists (area error too large).
    """
    x, y = state.curve.nodes
    m = state.curve.m
    xp = spectral_derivative(x)
    yp = spectral_derivative(y)
    xpp = spectral_derivative(x, 2)
    w = 2.0 * np.pi / m
    a2 = -w * np.sum(yp * xpp)
    a1 = w * np.sum(yp * yp - x * xpp)
    a0 = w * np.sum(x * yp) - state.a0
    if abs(a2) < 1e-14 * max(abs(a1), 1.0):
        c = -a0 / a1
    else:
        disc = a1 * a1 - 4.0 * a2 * a0
        if disc < 0.0:
            raise NumericalError("area correction has no real root; the area "
                                 "discrepancy is too large for a normal shift")
        root = np.sqrt(disc)
        c1 = (-a1 + root) / (2.0 * a2)
        c2 = (-a1 - root) / (2.0 * a2)
        c = c1 if abs(c1) <= abs(c2) else c2
    corrected = ClosedCurve(state.curve.nodes + c * np.vstack([yp, -xp]))
    return corrected, float(c)


# ---------------------------------------------------------------------------
# Coupled semi-implicit step
# ---------------------------------------------------------------------------

@dataclass
class StepOptions:
    dt: float = 5e-3
    gmres_tol: float = 1e-10
    gmres_max_iter: int = 400
    use_alc: bool = True
    use_area_fix: bool = True
    use_reparam: bool = True
    picard_sigma_init: bool = False
    wall_guard_factor: float = 3.0


@dataclass
class StepReport:
    gmres_iterations: int
    gmres_residual: float
    inextensibility_residual: float
    arclength_error_pre: float
    arclength_error_post: float
    area_roots: list[float]
    area_error_post: float
    reparam_displacement: float
    max_velocity_strain: float     # max |u_s| over vesicles, Theorem-bound input
    phase_seconds: dict = field(default_factory=dict)


class _VesicleOps:
    """Per-step spectral operators and the dense self preconditioner block."""

    def __init__(self, state: VesicleState, ctx: KernelContext, dt: float):
        curve = state.curve
        m = curve.m
        met = curve.metrics()
        self.m = m
        self.speed = met.speed
        self.x_s = met.tangent
        dalpha = spectral_derivative(np.eye(m)).T
        d1 = dalpha / met.speed[:, None]
        self.d1 = d1
        d4 = np.linalg.matrix_power(d1, 4)
        self.kress = kr.kress_single_layer_self(curve, ctx).mat

        z = np.zeros((m, m))
        d4b = np.block([[d4, z], [z, d4]])
        tension_map = np.vstack([d1 @ np.diag(self.x_s[0]),
                                 d1 @ np.diag(self.x_s[1])])
        strain_row = np.hstack([np.diag(self.x_s[0]) @ d1,
                                np.diag(self.x_s[1]) @ d1])
        self.d4b = d4b
        self.tension_map = tension_map
        self.strain_row = strain_row
        block = np.zeros((3 * m, 3 * m))
        block[:2 * m, :2 * m] = (np.eye(2 * m)
                                 + dt * state.kappa_b * self.kress @ d4b)
        block[:2 * m, 2 * m:] = -self.kress @ tension_map
        block[2 * m:, :2 * m] = strain_row
        try:
            self.precond_lu = scipy.linalg.lu_factor(block)
        except scipy.linalg.LinAlgError as exc:
            raise NumericalError("singular vesicle preconditioner block") from exc


def _interaction_matrix(states: list[VesicleState], ctx: KernelContext,
                        ops: list[_VesicleOps],
                        period: float | None) -> np.ndarray:
    """Single-layer velocity operator over all vesicles (density -> velocity).

    Self blocks use the Kress rule; distinct vesicles and lattice images
    use the plain trapezoid rule. Quadrature weights are included.
    """
    sizes = [2 * s.m for s in states]
    offs = np.concatenate([[0], np.cumsum(sizes)])
    total = offs[-1]
    mat = np.zeros((total, total))
    shifts = (0.0,) if period is None else (-period, 0.0, period)
    for i, ti in enumerate(states):
        for j, sj in enumerate(states):
            blk = np.zeros((sizes[i], sizes[j]))
            for shift in shifts:
                if i == j and shift == 0.0:
                    blk += ops[i].kress
                else:
                    src = sj.curve.nodes + np.array([[shift], [0.0]])
                    w2 = np.tile(sj.curve.metrics().weights, 2)[None, :]
                    blk += kr.stokeslet_block(ti.curve.nodes, src, ctx.mu,
                                              guard=False) * w2
            mat[offs[i]:offs[i + 1], offs[j]:offs[j + 1]] = blk
    return mat


class VesicleStepper:
    """Advance a vesicle suspension, optionally confined to a channel.

    In confined mode a PrecomputedSolver (or DenseElsSolver) provides the
    channel response each step; in free space the walls are absent and
    only vesicle-vesicle hydrodynamics act.
    """

    def __init__(self, ctx: KernelContext, options: StepOptions,
                 walls: WallGeometry | None = None, channel_solver=None,
                 proxy: pz.ProxyBasis | None = None, p_drive: float = 0.0):
        if walls is not None and channel_solver is None:
            raise ValueError("confined stepping needs a channel solver")
        self.ctx = ctx
        self.options = options
        self.walls = walls
        self.channel_solver = channel_solver
        self.proxy = proxy
        self.p_drive = p_drive

    # -- channel response -----------------------------------------------------

    def _response_velocity(self, states, forces, phases) -> np.ndarray:
        """u_resp at all vesicle nodes for explicit membrane forces."""
        total = sum(2 * s.m for s in states)
        if self.walls is None:
            return np.zeros(total)
        t0 = time.perf_counter()
        data = pz.rhs_from_vesicles(self.walls, [s.curve for s in states],
                                    forces, self.p_drive, self.ctx,
                                    guard_factor=self.options.wall_guard_factor)
        phases["vesicle_to_wall"] = phases.get("vesicle_to_wall", 0.0) + (
            time.perf_counter() - t0)
        t0 = time.perf_counter()
        tau, c = self.channel_solver.solve(data)
        phases["solve_tau_c"] = phases.get("solve_tau_c", 0.0) + (
            time.perf_counter() - t0)
        t0 = time.perf_counter()
        stack = pz.WallStack(self.walls)
        targets = np.hstack([s.curve.nodes for s in states])
        w2 = np.tile(stack.weights, 2)[None, :]
        u = np.zeros(2 * targets.shape[1])
        d = self.walls.period
        for shift in (-d, 0.0, d):
            src = stack.nodes + np.array([[shift], [0.0]])
            u += (kr.double_layer_block(targets, src, stack.normals,
                                        guard=False) * w2) @ tau
        phases["wall_to_vesicle"] = phases.get("wall_to_vesicle", 0.0) + (
            time.perf_counter() - t0)
        t0 = time.perf_counter()
        u += kr.stokeslet_block(targets, self.proxy.points, self.ctx.mu) @ c
        phases["proxy_to_vesicle"] = phases.get("proxy_to_vesicle", 0.0) + (
            time.perf_counter() - t0)
        # reorder from stacked-targets component-major to per-vesicle blocks
        out = np.empty(total)
        off_t = 0
        off_o = 0
        nt = targets.shape[1]
        for s in states:
            out[off_o:off_o + s.m] = u[off_t:off_t + s.m]
            out[off_o + s.m:off_o + 2 * s.m] = u[nt + off_t:nt + off_t + s.m]
            off_t += s.m
            off_o += 2 * s.m
        return out

    # -- the coupled solve ------------------------------------------------------

    def step(self, states: list[VesicleState],
             dt: float | None = None) -> tuple[list[VesicleState], StepReport]:
        opts = self.options
        dt = opts.dt if dt is None else dt
        phases: dict[str, float] = {}

        t0 = time.perf_counter()
        ops = [_VesicleOps(s, self.ctx, dt) for s in states]
        phases["preconditioner"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        f_bend = [bending_force(s) for s in states]
        forces = [fb + tension_force(s) for fb, s in zip(f_bend, states)]
        phases["bending_tension_forces"] = time.perf_counter() - t0

        u_resp = self._response_velocity(states, forces, phases)

        t0 = time.perf_counter()
        period = None if self.walls is None else self.walls.period
        smat = _interaction_matrix(states, self.ctx, ops, period)
        phases["vesicle_to_vesicle"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        sizes_u = [2 * s.m for s in states]
        offs_u = np.concatenate([[0], np.cumsum(sizes_u)])
        fb_all = np.concatenate([
            np.concatenate([fb[0], fb[1]]) for fb in f_bend])
        rhs1 = smat @ fb_all + u_resp
        total = offs_u[-1] + sum(s.m for s in states)

        rhs = np.zeros(total)
        offs_z = np.concatenate([[0], np.cumsum([3 * s.m for s in states])])
        for i, s in enumerate(states):
            rhs[offs_z[i]:offs_z[i] + 2 * s.m] = rhs1[offs_u[i]:offs_u[i + 1]]
            if opts.use_alc:
                rhs[offs_z[i] + 2 * s.m:offs_z[i + 1]] = alc_rhs(s, dt)

        def apply_op(z):
            h = np.empty(offs_u[-1])
            out = np.empty(total)
            for i, (s, op) in enumerate(zip(states, ops)):
                u = z[offs_z[i]:offs_z[i] + 2 * s.m]
                sg = z[offs_z[i] + 2 * s.m:offs_z[i + 1]]
                h[offs_u[i]:offs_u[i + 1]] = (dt * s.kappa_b * (op.d4b @ u)
                                              - op.tension_map @ sg)
            w = smat @ h
            for i, (s, op) in enumerate(zip(states, ops)):
                u = z[offs_z[i]:offs_z[i] + 2 * s.m]
                out[offs_z[i]:offs_z[i] + 2 * s.m] = u + w[offs_u[i]:offs_u[i + 1]]
                out[offs_z[i] + 2 * s.m:offs_z[i + 1]] = op.strain_row @ u
            return out

        def precond(z):
            out = np.empty_like(z)
            for i, op in enumerate(ops):
                out[offs_z[i]:offs_z[i + 1]] = scipy.linalg.lu_solve(
                    op.precond_lu, z[offs_z[i]:offs_z[i + 1]])
            return out

        phases["inextensibility_operator"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        # right preconditioning: the block preconditioner is near-singular
        # along rigid-motion/tension modes (S[n] = 0 on a circle), so the
        # left-preconditioned residual norm is meaningless; minimizing the
        # true residual of A P^{-1} keeps the convergence test honest
        w, iters, _ = gmres(lambda y: apply_op(precond(y)), rhs,
                            tol=opts.gmres_tol, max_iter=opts.gmres_max_iter)
        z = precond(w)
        resid = np.linalg.norm(apply_op(z) - rhs)
        scale = max(1.0, float(np.linalg.norm(rhs)))
        rel = resid / scale
        if resid > 10.0 * opts.gmres_tol * scale:
            raise NumericalError(f"vesicle step GMRES stalled at residual "
                                 f"{resid:.3e} after {iters} iterations")
        phases["gmres"] = time.perf_counter() - t0

        resid_inext = 0.0
        max_strain = 0.0
        new_states: list[VesicleState] = []
        area_roots: list[float] = []
        arclen_pre = 0.0
        arclen_post = 0.0
        area_post = 0.0
        reparam_disp = 0.0
        t0 = time.perf_counter()
        for i, (s, op) in enumerate(zip(states, ops)):
            u = z[offs_z[i]:offs_z[i] + 2 * s.m]
            sigma_new = z[offs_z[i] + 2 * s.m:offs_z[i + 1]]
            want = alc_rhs(s, dt) if opts.use_alc else 0.0
            resid_inext = max(resid_inext, float(np.max(np.abs(
                op.strain_row @ u - want))))
            u2 = u.reshape(2, s.m)
            u_s = spectral_derivative(u2) / op.speed
            max_strain = max(max_strain, float(np.max(np.hypot(u_s[0], u_s[1]))))
            moved = ClosedCurve(s.curve.nodes + dt * u2)
            state_new = replace(s, curve=moved, sigma=sigma_new,
                                step_index=s.step_index + 1)
            arclen_pre = max(arclen_pre, state_new.perimeter_error())
            new_states.append(state_new)
        phases["update"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        if opts.use_reparam:
            adjusted = []
            for s in new_states:
                astar = equal_arclength_params(s.curve)
                nodes = fourier_interpolate(s.curve.nodes, astar)
                sigma = fourier_interpolate(s.sigma, astar)
                reparam_disp = max(reparam_disp, float(
                    np.max(np.hypot(*(nodes - s.curve.nodes)))))
                adjusted.append(replace(s, curve=ClosedCurve(nodes), sigma=sigma))
            new_states = adjusted
        phases["reparameterization"] = time.perf_counter() - t0

        # area correction runs after the node redistribution so the stored
        # state carries the exact enclosed area (interpolation would
        # otherwise leak a resolution-level area change back in)
        t0 = time.perf_counter()
        if opts.use_area_fix:
            fixed = []
            for s in new_states:
                curve, c = area_correct(s)
                area_roots.append(c)
                fixed.append(replace(s, curve=curve))
            new_states = fixed
        phases["vesicle_area_corrections"] = time.perf_counter() - t0

        arclen_post = max(s.perimeter_error() for s in new_states)
        area_post = max(s.area_error() for s in new_states)
        report = StepReport(gmres_iterations=iters, gmres_residual=rel,
                            inextensibility_residual=resid_inext,
                            arclength_error_pre=arclen_pre,
                            arclength_error_post=arclen_post,
                            area_roots=area_roots, area_error_post=area_post,
                            reparam_displacement=reparam_disp,
                            max_velocity_strain=max_strain,
                            phase_seconds=phases)
        return new_states, report

    def picard_tension_init(self, states: list[VesicleState]) -> list[VesicleState]:
        """Initial tension from one dt=0 solve (first Picard iterate)."""
        saved_dt = self.options.dt
        saved_alc = self.options.use_alc
        saved_fix = self.options.use_area_fix
        saved_rep = self.options.use_reparam
        try:
            self.options.use_alc = False
            self.options.use_area_fix = False
            self.options.use_reparam = False
            out, _ = self.step(states, dt=0.0)
            return [replace(s, curve=old.curve, step_index=old.step_index,
                            sigma=s.sigma)
                    for s, old in zip(out, states)]
        finally:
            self.options.dt = saved_dt
            self.options.use_alc = saved_alc
            self.options.use_area_fix = saved_fix
            self.options.use_reparam = saved_rep


def step(vesicles: list[VesicleState], solver, walls: WallGeometry | None,
         proxy, p_drive: float, dt: float, ctx: KernelContext,
         options: StepOptions | None = None) -> tuple[list[VesicleState], StepReport]:
    """One coupled step of the suspension (convenience wrapper)."""
    options = options or StepOptions()
    stepper = VesicleStepper(ctx, options, walls=walls, channel_solver=solver,
                             proxy=proxy, p_drive=p_drive)
    return stepper.step(vesicles, dt)
