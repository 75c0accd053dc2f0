"""Free-space Stokes kernels and dense layer-potential assembly.

Velocity kernels: the stokeslet S (single layer) and the stresslet D
(double layer); their pressure companions Q and P; and the traction
kernels K (of the single-layer pair) and T (of the double-layer pair),
obtained by applying the Cauchy stress to each representation and
contracting with the target normal.

Matrix layout: a dense operator from S sources to T targets is a
(2T, 2S) array in component-major order, i.e. rows are [component 1 at
every target, then component 2], and likewise for columns. Scalar
outputs (pressure) drop the row doubling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import SingularityError
from .geometry import ClosedCurve, WallCurve


@dataclass(frozen=True)
class KernelContext:
    """Shared physical constants; only the viscosity for now."""

    mu: float = 1.0

    def __post_init__(self):
        if not self.mu > 0.0:
            raise ValueError("viscosity must be positive")


@dataclass(frozen=True)
class LayerOperatorMatrix:
    """Dense layer-potential operator with provenance tags.

    ``mat`` maps a component-major source vector (density values times
    nothing; quadrature weights are already folded in where the
    quadrature tag says so) to component-major target values.
    """

    mat: np.ndarray
    source_kind: str      # "single" | "double"
    output_kind: str      # "velocity" | "pressure" | "traction"
    quadrature_kind: str  # "plain" | "kress" | "nystrom"


def _displacements(targets: np.ndarray, sources: np.ndarray,
                   guard_scale: float | None = None):
    d0 = targets[0][:, None] - sources[0][None, :]
    d1 = targets[1][:, None] - sources[1][None, :]
    r2 = d0 * d0 + d1 * d1
    if guard_scale is not None:
        tol2 = (1e-13 * guard_scale) ** 2
        if np.min(r2) < tol2:
            raise SingularityError("source and target coincide to machine precision")
    return d0, d1, r2


def _scale_of(*point_sets: np.ndarray) -> float:
    return max(1.0, *(float(np.max(np.abs(p))) for p in point_sets if p.size))


def _interleave(k11, k12, k21, k22) -> np.ndarray:
    return np.block([[k11, k12], [k21, k22]])


def stokeslet_block(targets, sources, mu: float, guard: bool = True) -> np.ndarray:
    """(2T, 2S) stokeslet matrix S_ij(x_t, y_s), no quadrature weights."""
    scale = _scale_of(targets, sources) if guard else None
    d0, d1, r2 = _displacements(targets, sources, scale)
    pref = 1.0 / (4.0 * np.pi * mu)
    logr = 0.5 * np.log(r2)
    return _interleave(pref * (-logr + d0 * d0 / r2), pref * (d0 * d1 / r2),
                       pref * (d0 * d1 / r2), pref * (-logr + d1 * d1 / r2))


def single_pressure_block(targets, sources, guard: bool = True) -> np.ndarray:
    """(T, 2S) pressure kernel of the single layer."""
    scale = _scale_of(targets, sources) if guard else None
    d0, d1, r2 = _displacements(targets, sources, scale)
    pref = 1.0 / (2.0 * np.pi)
    return np.hstack([pref * d0 / r2, pref * d1 / r2])


def double_layer_block(targets, sources, source_normals,
                       guard: bool = True) -> np.ndarray:
    """(2T, 2S) stresslet matrix D_ij(x_t, y_s)."""
    scale = _scale_of(targets, sources) if guard else None
    d0, d1, r2 = _displacements(targets, sources, scale)
    rdn = d0 * source_normals[0][None, :] + d1 * source_normals[1][None, :]
    f = rdn / (np.pi * r2 * r2)
    return _interleave(f * d0 * d0, f * d0 * d1, f * d1 * d0, f * d1 * d1)


def double_pressure_block(targets, sources, source_normals, mu: float,
                          guard: bool = True) -> np.ndarray:
    """(T, 2S) pressure kernel of the double layer."""
    scale = _scale_of(targets, sources) if guard else None
    d0, d1, r2 = _displacements(targets, sources, scale)
    ny0 = source_normals[0][None, :]
    ny1 = source_normals[1][None, :]
    rdn = d0 * ny0 + d1 * ny1
    pref = mu / np.pi
    p0 = pref * (-ny0 / r2 + 2.0 * rdn * d0 / (r2 * r2))
    p1 = pref * (-ny1 / r2 + 2.0 * rdn * d1 / (r2 * r2))
    return np.hstack([p0, p1])


def traction_single_block(targets, sources, target_normals,
                          guard: bool = True) -> np.ndarray:
    """(2T, 2S) traction of the single-layer pair, K_ik(x_t, y_s)."""
    scale = _scale_of(targets, sources) if guard else None
    d0, d1, r2 = _displacements(targets, sources, scale)
    rdnx = (d0 * target_normals[0][:, None] + d1 * target_normals[1][:, None])
    f = -rdnx / (np.pi * r2 * r2)
    return _interleave(f * d0 * d0, f * d0 * d1, f * d1 * d0, f * d1 * d1)


def traction_double_block(targets, sources, target_normals, source_normals,
                          mu: float, guard: bool = True) -> np.ndarray:
    """(2T, 2S) traction of the double-layer pair, T_ik(x_t, y_s)."""
    scale = _scale_of(targets, sources) if guard else None
    d0, d1, r2 = _displacements(targets, sources, scale)
    nx0 = target_normals[0][:, None]
    nx1 = target_normals[1][:, None]
    ny0 = source_normals[0][None, :]
    ny1 = source_normals[1][None, :]
    a = (d0 * ny0 + d1 * ny1) / r2   # dipole function of the source normal
    b = (d0 * nx0 + d1 * nx1) / r2   # dipole function of the target normal
    nxny = nx0 * ny0 + nx1 * ny1
    pref = mu / np.pi
    common = (nxny / r2 - 8.0 * a * b) / r2
    dd = (d0, d1)
    nx = (nx0, nx1)
    ny = (ny0, ny1)
    blocks = [[None, None], [None, None]]
    for i in range(2):
        for k in range(2):
            t = common * dd[i] * dd[k] + (nx[i] * ny[k] + b * dd[k] * ny[i]
                                          + a * dd[i] * nx[k]) / r2
            if i == k:
                t = t + a * b
            blocks[i][k] = pref * t
    return _interleave(blocks[0][0], blocks[0][1], blocks[1][0], blocks[1][1])


# ---------------------------------------------------------------------------
# Pointwise evaluation (2x2 tensors / 2-vectors for single point pairs)
# ---------------------------------------------------------------------------

def _as_pt(p) -> np.ndarray:
    return np.asarray(p, dtype=float).reshape(2, 1)


def stokeslet(x, y, ctx: KernelContext) -> np.ndarray:
    return stokeslet_block(_as_pt(x), _as_pt(y), ctx.mu).reshape(2, 2)


def single_pressure(x, y) -> np.ndarray:
    return single_pressure_block(_as_pt(x), _as_pt(y)).reshape(2)


def double_layer(x, y, n_y) -> np.ndarray:
    return double_layer_block(_as_pt(x), _as_pt(y), _as_pt(n_y)).reshape(2, 2)


def double_pressure(x, y, n_y, ctx: KernelContext) -> np.ndarray:
    return double_pressure_block(_as_pt(x), _as_pt(y), _as_pt(n_y), ctx.mu).reshape(2)


def traction_kernels(x, y, n_x, n_y, ctx: KernelContext) -> tuple[np.ndarray, np.ndarray]:
    k = traction_single_block(_as_pt(x), _as_pt(y), _as_pt(n_x)).reshape(2, 2)
    t = traction_double_block(_as_pt(x), _as_pt(y), _as_pt(n_x), _as_pt(n_y),
                              ctx.mu).reshape(2, 2)
    return k, t


# ---------------------------------------------------------------------------
# Self-interaction quadratures
# ---------------------------------------------------------------------------

def _curve_fields(curve):
    if isinstance(curve, ClosedCurve):
        met = curve.metrics()
        return curve.nodes, met.tangent, met.normal, met.curvature, met.weights, met.speed
    if isinstance(curve, WallCurve):
        return (curve.nodes, curve.tangent, curve.normal, curve.curvature,
                curve.weights, curve.speed)
    raise TypeError(f"not a discretized curve: {type(curve)!r}")


def nystrom_double_layer_self(curve) -> LayerOperatorMatrix:
    """Principal-value Nystrom matrix of the double layer on one curve.

    Off-diagonal entries are plain kernel-times-weight; the diagonal uses
    the finite limit of the stresslet kernel, -kappa/(2*pi) * t t^T.
    """
    nodes, tangent, normal, curvature, weights, _ = _curve_fields(curve)
    d0, d1, r2 = _displacements(nodes, nodes)
    np.fill_diagonal(r2, 1.0)
    rdn = d0 * normal[0][None, :] + d1 * normal[1][None, :]
    f = rdn / (np.pi * r2 * r2)
    k11 = f * d0 * d0
    k12 = f * d0 * d1
    k22 = f * d1 * d1
    diag = -curvature / (2.0 * np.pi)
    for kb, (i, j) in zip((k11, k12, k22), ((0, 0), (0, 1), (1, 1))):
        np.fill_diagonal(kb, diag * tangent[i] * tangent[j])
    mat = _interleave(k11, k12, k12, k22) * np.tile(weights, 2)[None, :]
    return LayerOperatorMatrix(mat, "double", "velocity", "nystrom")


def kress_log_weights(m: int) -> np.ndarray:
    """Circulant product-quadrature weights for the periodic log kernel.

    Row i, column j approximates integrals of log(4 sin^2((a_i - b)/2))
    against smooth periodic data sampled at b_j; exact for trigonometric
    polynomials up to degree m/2.
    """
    if m % 2 != 0:
        raise ValueError("Kress rule needs an even number of nodes")
    d = 2.0 * np.pi * np.arange(m) / m
    ks = np.arange(1, m // 2)
    col = -(4.0 * np.pi / m) * (np.cos(np.outer(d, ks)) / ks).sum(axis=1)
    col -= (4.0 * np.pi / m**2) * np.cos(0.5 * m * d)
    return scipy.linalg.circulant(col)


def kress_single_layer_self(curve: ClosedCurve, ctx: KernelContext) -> LayerOperatorMatrix:
    """Spectrally accurate Nystrom matrix of the single layer on a closed curve.

    The log singularity is split off against 4 sin^2((a-b)/2) and handled
    by the Kress product rule; the smooth remainder (including the
    r_i r_j / r^2 part, whose diagonal limit is t t^T) goes through the
    periodic trapezoid rule.
    """
    met = curve.metrics()
    nodes, speed, tangent = curve.nodes, met.speed, met.tangent
    m = curve.m
    mu = ctx.mu
    pref = 1.0 / (4.0 * np.pi * mu)

    d0, d1, r2 = _displacements(nodes, nodes)
    np.fill_diagonal(r2, 1.0)
    alpha = curve.params
    sin2 = 4.0 * np.sin(0.5 * (alpha[:, None] - alpha[None, :])) ** 2
    np.fill_diagonal(sin2, 1.0)

    # smooth remainder, trapezoid rule
    log_ratio = 0.5 * np.log(r2 / sin2)
    np.fill_diagonal(log_ratio, np.log(speed))
    s11 = d0 * d0 / r2
    s12 = d0 * d1 / r2
    s22 = d1 * d1 / r2
    np.fill_diagonal(s11, tangent[0] * tangent[0])
    np.fill_diagonal(s12, tangent[0] * tangent[1])
    np.fill_diagonal(s22, tangent[1] * tangent[1])
    trap = 2.0 * np.pi / m
    smooth11 = pref * (-log_ratio + s11) * trap
    smooth12 = pref * s12 * trap
    smooth22 = pref * (-log_ratio + s22) * trap

    # log part, Kress product rule (diagonal component blocks only)
    logpart = -0.5 * pref * kress_log_weights(m)

    w_speed = speed[None, :]
    mat = _interleave((smooth11 + logpart) * w_speed, smooth12 * w_speed,
                      smooth12 * w_speed, (smooth22 + logpart) * w_speed)
    return LayerOperatorMatrix(mat, "single", "velocity", "kress")


# ---------------------------------------------------------------------------
# Off-curve assembly with periodic image shifts
# ---------------------------------------------------------------------------

_BLOCKS = {
    ("single", "velocity"): lambda t, s, nx, ny, mu: stokeslet_block(t, s, mu),
    ("single", "pressure"): lambda t, s, nx, ny, mu: single_pressure_block(t, s),
    ("single", "traction"): lambda t, s, nx, ny, mu: traction_single_block(t, s, nx),
    ("double", "velocity"): lambda t, s, nx, ny, mu: double_layer_block(t, s, ny),
    ("double", "pressure"): lambda t, s, nx, ny, mu: double_pressure_block(t, s, ny, mu),
    ("double", "traction"): lambda t, s, nx, ny, mu: traction_double_block(t, s, nx, ny, mu),
}


def assemble_offcurve(source_kind: str, output_kind: str, sources, targets,
                      ctx: KernelContext, shifts=(0.0,),
                      target_normals=None) -> LayerOperatorMatrix:
    """Plain trapezoid Nystrom matrix, summed over lattice image shifts.

    ``sources`` is a discretized curve; ``targets`` a (2, T) point set
    disjoint from every shifted copy of the source nodes. ``shifts`` are
    x1 offsets (multiples of the period).
    """
    key = (source_kind, output_kind)
    if key not in _BLOCKS:
        raise ValueError(f"no kernel for source {source_kind!r} -> {output_kind!r}")
    if output_kind == "traction" and target_normals is None:
        raise ValueError("traction assembly needs target normals")
    nodes, _, normals, _, weights, _ = _curve_fields(sources)
    targets = np.asarray(targets, dtype=float)
    rows = 2 * targets.shape[1] if output_kind != "pressure" else targets.shape[1]
    mat = np.zeros((rows, 2 * nodes.shape[1]))
    for shift in shifts:
        sh_nodes = nodes + np.array([[shift], [0.0]])
        mat += _BLOCKS[key](targets, sh_nodes, target_normals, normals, ctx.mu)
    mat *= np.tile(weights, 2)[None, :]
    return LayerOperatorMatrix(mat, source_kind, output_kind, "plain")
