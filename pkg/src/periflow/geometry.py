"""Smooth-curve discretization on uniform 2*pi-periodic parameter grids.

Closed curves (vesicle membranes, proxy rings) and open channel walls are
represented by their samples at the equispaced parameters a_k = 2*pi*k/M.
All derivatives are spectral (FFT of the real samples); the periodic
trapezoid rule then integrates smooth periodic data with spectral accuracy.

Orientation conventions, used consistently by the layer-potential code:

* a closed curve is parameterized counterclockwise; its outward unit
  normal is n = (t2, -t1) where t is the unit tangent,
* signed curvature satisfies x_ss = -kappa * n, so kappa = +1/R on a
  counterclockwise circle of radius R with outward normal,
* channel walls are parameterized left to right (x1 increasing with the
  parameter); each wall's normal points out of the fluid strip and its
  curvature sign is flipped accordingly so that x_ss = -kappa * n holds
  on walls too.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError


def _check_samples(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    m = values.shape[-1]
    if m < 2 or m % 2 != 0:
        raise ValueError(f"need an even number of samples >= 2, got {m}")
    return values


def spectral_derivative(values: np.ndarray, order: int = 1) -> np.ndarray:
    """Differentiate periodic samples along the last axis.

    Returns the order-th derivative of the trigonometric interpolant at
    the same nodes. For odd orders the Nyquist mode is dropped (its
    derivative is odd and unrepresentable on the real grid).
    """
    if order < 1:
        raise ValueError("order must be a positive integer")
    values = _check_samples(values)
    m = values.shape[-1]
    coeffs = np.fft.rfft(values, axis=-1)
    k = np.arange(m // 2 + 1)
    factor = (1j * k) ** order
    if order % 2 == 1:
        factor[-1] = 0.0
    return np.fft.irfft(coeffs * factor, n=m, axis=-1)


def fourier_interpolate(values: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Evaluate the trigonometric interpolant of periodic samples.

    ``values`` has the samples along its last axis; ``targets`` are
    arbitrary parameters in radians. Exact for band-limited data; the
    Nyquist mode is evaluated as cos(M*a/2) (the real, minimal-slope
    representative).
    """
    values = _check_samples(values)
    targets = np.atleast_1d(np.asarray(targets, dtype=float))
    m = values.shape[-1]
    coeffs = np.fft.rfft(values, axis=-1) / m
    k = np.arange(m // 2 + 1)
    # waves: exp(i k a) for each target; Nyquist handled with weight 1 below
    waves = np.exp(1j * np.outer(targets, k))
    scale = np.full(m // 2 + 1, 2.0)
    scale[0] = 1.0
    scale[-1] = 1.0
    out = np.real(np.tensordot(coeffs * scale, waves, axes=([-1], [1])))
    return out


def trapezoid_weights(m: int, period: float = 2.0 * np.pi) -> np.ndarray:
    return np.full(m, period / m)


def gauss_legendre(k: int, a: float, b: float) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on [a, b]."""
    x, w = np.polynomial.legendre.leggauss(k)
    return 0.5 * (b - a) * x + 0.5 * (a + b), 0.5 * (b - a) * w


@dataclass(frozen=True)
class CurveMetrics:
    """Pointwise differential geometry of a discretized curve."""

    speed: np.ndarray       # |x_a| at the nodes
    tangent: np.ndarray     # unit tangent, shape (2, M)
    normal: np.ndarray      # unit normal (outward for closed curves), (2, M)
    curvature: np.ndarray   # signed so that x_ss = -kappa * n
    weights: np.ndarray     # arclength quadrature weights, (2*pi/M)*speed
    perimeter: float


def _metrics_from_derivatives(xp: np.ndarray, xpp: np.ndarray,
                              normal_sign: float) -> CurveMetrics:
    speed = np.hypot(xp[0], xp[1])
    smax = float(np.max(speed))
    if smax == 0.0 or np.min(speed) < 1e-13 * smax:
        raise GeometryError("degenerate curve: |x_a| vanishes at a node")
    tangent = xp / speed
    normal = normal_sign * np.vstack([tangent[1], -tangent[0]])
    curvature = normal_sign * (xp[0] * xpp[1] - xp[1] * xpp[0]) / speed**3
    m = xp.shape[-1]
    weights = (2.0 * np.pi / m) * speed
    return CurveMetrics(speed=speed, tangent=tangent, normal=normal,
                        curvature=curvature, weights=weights,
                        perimeter=float(np.sum(weights)))


class ClosedCurve:
    """Closed smooth curve sampled at M equispaced parameters.

    ``nodes`` is a (2, M) array with M even. The curve is assumed
    counterclockwise; metrics are computed spectrally and cached.
    """

    def __init__(self, nodes: np.ndarray):
        nodes = np.asarray(nodes, dtype=float)
        if nodes.ndim != 2 or nodes.shape[0] != 2:
            raise ValueError("nodes must have shape (2, M)")
        if nodes.shape[1] < 8 or nodes.shape[1] % 2 != 0:
            raise ValueError("M must be even and >= 8")
        self.nodes = nodes
        self._metrics: CurveMetrics | None = None

    @property
    def m(self) -> int:
        return self.nodes.shape[1]

    @property
    def params(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.m) / self.m

    @classmethod
    def circle(cls, radius: float, m: int,
               center: tuple[float, float] = (0.0, 0.0)) -> "ClosedCurve":
        a = 2.0 * np.pi * np.arange(m) / m
        return cls(np.vstack([center[0] + radius * np.cos(a),
                              center[1] + radius * np.sin(a)]))

    @classmethod
    def ellipse(cls, a_axis: float, b_axis: float, m: int,
                center: tuple[float, float] = (0.0, 0.0)) -> "ClosedCurve":
        a = 2.0 * np.pi * np.arange(m) / m
        return cls(np.vstack([center[0] + a_axis * np.cos(a),
                              center[1] + b_axis * np.sin(a)]))

    def metrics(self) -> CurveMetrics:
        if self._metrics is None:
            xp = spectral_derivative(self.nodes, 1)
            xpp = spectral_derivative(self.nodes, 2)
            self._metrics = _metrics_from_derivatives(xp, xpp, normal_sign=1.0)
        return self._metrics

    def area(self) -> float:
        """Enclosed area by Green's theorem (positive for counterclockwise)."""
        yp = spectral_derivative(self.nodes[1], 1)
        return float(np.sum(self.nodes[0] * yp) * (2.0 * np.pi / self.m))

    def translated(self, shift: np.ndarray) -> "ClosedCurve":
        return ClosedCurve(self.nodes + np.asarray(shift, dtype=float).reshape(2, 1))


def curve_metrics(curve: ClosedCurve) -> CurveMetrics:
    return curve.metrics()


def equal_arclength_params(curve: ClosedCurve) -> np.ndarray:
    """Parameters a*_k whose images are near-equispaced in arclength.

    Computes the cumulative arclength s(a) from the Fourier series of
    |x_a| (termwise integration), then inverts the piecewise-linear
    interpolant of s through the nodes so that s(a*_k) = k*s(2*pi)/M.
    """
    m = curve.m
    speed = curve.metrics().speed
    coeffs = np.fft.rfft(speed) / m
    k = np.arange(1, m // 2 + 1)
    a = curve.params
    # s(a) = C0*a + sum_{k!=0} C_k (e^{ika}-1)/(ik); real form below
    osc = np.zeros(m)
    ck = coeffs[1:].copy()
    ck[-1] = 0.0  # Nyquist integrates to a term vanishing at the nodes
    phases = np.exp(1j * np.outer(a, k))
    osc = 2.0 * np.real((ck / (1j * k)) * (phases - 1.0)).sum(axis=1)
    s_nodes = np.real(coeffs[0]) * a + osc
    total = np.real(coeffs[0]) * 2.0 * np.pi
    table = np.concatenate([s_nodes, [total]])
    if np.any(np.diff(table) <= 0.0):
        raise GeometryError("arclength interpolant is non-monotone; "
                            "curve is underresolved")
    targets = total * np.arange(m) / m
    j = np.searchsorted(table, targets, side="right") - 1
    j = np.clip(j, 0, m - 1)
    frac = (targets - table[j]) / (table[j + 1] - table[j])
    return (2.0 * np.pi / m) * (j + frac)


def reparameterize(curve: ClosedCurve) -> ClosedCurve:
    """Redistribute the nodes to be nearly equispaced in arclength."""
    alpha_star = equal_arclength_params(curve)
    return ClosedCurve(fourier_interpolate(curve.nodes, alpha_star))


# ---------------------------------------------------------------------------
# Channel walls
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WallCurve:
    """One period of a channel wall, sampled with the periodic trapezoid rule.

    The wall is a graph x2 = f(x1) with x1 = d*a/(2*pi); x1 grows by d
    over one parameter period while f is periodic. ``normal`` points out
    of the fluid strip and ``curvature`` is signed so x_ss = -kappa*n.
    """

    nodes: np.ndarray       # (2, N)
    speed: np.ndarray
    tangent: np.ndarray
    normal: np.ndarray
    curvature: np.ndarray
    weights: np.ndarray
    period: float

    @property
    def n(self) -> int:
        return self.nodes.shape[1]

    def shifted(self, dx: float) -> "WallCurve":
        nodes = self.nodes.copy()
        nodes[0] += dx
        return WallCurve(nodes, self.speed, self.tangent, self.normal,
                         self.curvature, self.weights, self.period)


def _wall_from_samples(nodes: np.ndarray, period: float, outward: str) -> WallCurve:
    """Build wall metrics from samples; x1 has linear growth ``period``."""
    n = nodes.shape[1]
    a = 2.0 * np.pi * np.arange(n) / n
    drift = period / (2.0 * np.pi)
    periodic_part = nodes - np.vstack([drift * a, np.zeros(n)])
    xp = spectral_derivative(periodic_part, 1)
    xp[0] += drift
    xpp = spectral_derivative(periodic_part, 2)
    sign = {"down": 1.0, "up": -1.0}[outward]
    met = _metrics_from_derivatives(xp, xpp, normal_sign=sign)
    return WallCurve(nodes=nodes, speed=met.speed, tangent=met.tangent,
                     normal=met.normal, curvature=met.curvature,
                     weights=met.weights, period=period)


@dataclass(frozen=True)
class WallGeometry:
    """Discretized periodic channel: walls U, D plus side collocation walls.

    L holds K Gauss-Legendre nodes on the segment x1 = 0 between the two
    wall endpoints; R is L translated by the lattice vector (d, 0). Side
    normals are (1, 0).
    """

    upper: WallCurve
    lower: WallCurve
    side_left: np.ndarray   # (2, K)
    side_right: np.ndarray  # (2, K)
    period: float
    shape_name: str = "custom"
    shape_params: dict = field(default_factory=dict)

    @property
    def n_wall(self) -> int:
        return self.upper.n

    @property
    def k_side(self) -> int:
        return self.side_left.shape[1]

    @property
    def center(self) -> np.ndarray:
        return np.array([0.5 * self.period,
                         0.5 * (np.mean(self.upper.nodes[1]) +
                                np.mean(self.lower.nodes[1]))])

    def all_nodes(self) -> np.ndarray:
        """Wall nodes stacked (U then D), shape (2, 2N)."""
        return np.hstack([self.upper.nodes, self.lower.nodes])

    def grid_spacing(self) -> float:
        return float(np.max(np.hstack([self.upper.weights, self.lower.weights])))

    def fingerprint(self) -> str:
        import hashlib
        h = hashlib.sha256()
        h.update(self.all_nodes().tobytes())
        h.update(np.asarray([self.period], dtype=float).tobytes())
        h.update(self.side_left.tobytes())
        return h.hexdigest()[:16]


# Wall profile generators. Each returns (f_upper, f_lower), callables of x1
# producing the wall heights; all are 2*pi/d-periodic and C-infinity.

def _profile_flat(h: float = 1.0):
    return (lambda x: np.full_like(x, h)), (lambda x: np.full_like(x, -h))


def _profile_sine(h: float = 1.0, a: float = 0.3, k: int = 1, d: float = 2.0 * np.pi):
    w = 2.0 * np.pi * k / d
    return (lambda x: h + a * np.sin(w * x)), (lambda x: -h + a * np.sin(w * x))


def _profile_pinch(h: float = 1.0, a: float = 0.5, s: float = 3.0,
                   d: float = 2.0 * np.pi):
    # converging-diverging: a periodized bump exp(s*(cos(th - pi) - 1))
    w = 2.0 * np.pi / d

    def bump(x):
        return a * np.exp(s * (np.cos(w * x - np.pi) - 1.0))

    return (lambda x: h - bump(x)), (lambda x: -h + bump(x))


def _profile_serpentine(h: float = 0.6, a1: float = 1.0, a2: float = 0.4,
                        d: float = 2.0 * np.pi):
    # both walls follow an S-shaped two-harmonic centerline
    w = 2.0 * np.pi / d

    def center(x):
        return a1 * np.sin(w * x) + a2 * np.sin(2.0 * w * x)

    return (lambda x: center(x) + h), (lambda x: center(x) - h)


WALL_SHAPES = {
    "flat": _profile_flat,
    "sine": _profile_sine,
    "pinch": _profile_pinch,
    "serpentine": _profile_serpentine,
}


def build_wall_geometry(shape: str, n_wall: int, n_side: int,
                        d: float = 2.0 * np.pi, **params) -> WallGeometry:
    """Discretize a named channel shape.

    ``n_wall`` periodic-trapezoid nodes per wall, ``n_side`` Gauss-Legendre
    side nodes, period ``d``. Shape parameters are forwarded to the
    generator (e.g. ``h``, ``a``, ``k`` for the sine channel).
    """
    if n_wall < 16:
        raise GeometryError("need at least 16 nodes per wall")
    if n_side < 4:
        raise GeometryError("need at least 4 side nodes")
    if shape not in WALL_SHAPES:
        raise GeometryError(f"unknown wall shape {shape!r}; "
                            f"available: {sorted(WALL_SHAPES)}")
    gen = WALL_SHAPES[shape]
    if shape == "flat":
        f_up, f_dn = gen(**params)
    else:
        f_up, f_dn = gen(d=d, **params)
    x1 = d * np.arange(n_wall) / n_wall
    upper = _wall_from_samples(np.vstack([x1, f_up(x1)]), d, outward="up")
    lower = _wall_from_samples(np.vstack([x1, f_dn(x1)]), d, outward="down")

    gap = f_up(x1) - f_dn(x1)
    if np.min(gap) <= 0.0:
        raise GeometryError("walls intersect: channel gap closes")

    y_bottom = float(f_dn(np.array([0.0]))[0])
    y_top = float(f_up(np.array([0.0]))[0])
    ys, _ = gauss_legendre(n_side, y_bottom, y_top)
    side_left = np.vstack([np.zeros(n_side), ys])
    side_right = side_left + np.array([[d], [0.0]])
    return WallGeometry(upper=upper, lower=lower, side_left=side_left,
                        side_right=side_right, period=d, shape_name=shape,
                        shape_params=dict(params))
