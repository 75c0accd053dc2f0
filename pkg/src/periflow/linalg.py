"""Dense linear-algebra services: GMRES, interpolatory decomposition,
truncated pseudoinverse.

These are deliberately small and deterministic; the systems they face are
either well-conditioned second-kind operators (GMRES) or modest dense
blocks arising from skeletonization and Schur complements.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg

from .errors import NumericalError


def gmres(apply_op: Callable[[np.ndarray], np.ndarray], b: np.ndarray,
          tol: float = 1e-10, max_iter: int = 200, restart: int | None = None,
          preconditioner: Callable[[np.ndarray], np.ndarray] | None = None,
          x0: np.ndarray | None = None) -> tuple[np.ndarray, int, float]:
    """Solve A x = b given the action of A; returns (x, iterations, relres).

    Left-preconditioned Arnoldi with modified Gram-Schmidt and Givens
    rotations; no restart unless ``restart`` is given. Terminates on the
    preconditioned relative residual or on (happy) breakdown.
    """
    b = np.asarray(b, dtype=float)
    n = b.size
    precond = preconditioner if preconditioner is not None else (lambda v: v)
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    cycle = max_iter if restart is None else min(restart, max_iter)

    pb = precond(b)
    bnorm = np.linalg.norm(pb)
    if bnorm == 0.0:
        return np.zeros(n), 0, 0.0

    total_iters = 0
    relres = np.inf
    prev_beta = np.inf
    while total_iters < max_iter:
        r = precond(b - apply_op(x))
        beta = np.linalg.norm(r)
        relres = beta / bnorm
        if relres <= tol or beta >= 0.999 * prev_beta:
            break
        prev_beta = beta
        steps = min(cycle, max_iter - total_iters)
        v = np.empty((steps + 1, n))
        v[0] = r / beta
        h = np.zeros((steps + 1, steps))
        cs = np.zeros(steps)
        sn = np.zeros(steps)
        g = np.zeros(steps + 1)
        g[0] = beta
        k_done = 0
        for k in range(steps):
            # copy: apply_op/precond may return their argument unchanged
            w = np.array(precond(apply_op(v[k])), dtype=float)
            wnorm = np.linalg.norm(w)
            for i in range(k + 1):
                h[i, k] = np.dot(v[i], w)
                w -= h[i, k] * v[i]
            # second Gram-Schmidt pass: the system may be severely
            # ill-conditioned and a single sweep loses orthogonality
            for i in range(k + 1):
                corr = np.dot(v[i], w)
                h[i, k] += corr
                w -= corr * v[i]
            h[k + 1, k] = np.linalg.norm(w)
            breakdown = h[k + 1, k] <= 1e-14 * wnorm
            if not breakdown:
                v[k + 1] = w / h[k + 1, k]
            for i in range(k):
                tmp = cs[i] * h[i, k] + sn[i] * h[i + 1, k]
                h[i + 1, k] = -sn[i] * h[i, k] + cs[i] * h[i + 1, k]
                h[i, k] = tmp
            rho = np.hypot(h[k, k], h[k + 1, k])
            cs[k], sn[k] = h[k, k] / rho, h[k + 1, k] / rho
            h[k, k] = rho
            h[k + 1, k] = 0.0
            g[k + 1] = -sn[k] * g[k]
            g[k] = cs[k] * g[k]
            k_done = k + 1
            total_iters += 1
            relres = abs(g[k_done]) / bnorm
            if relres <= tol or breakdown:
                break
        y = scipy.linalg.solve_triangular(h[:k_done, :k_done], g[:k_done])
        x = x + v[:k_done].T @ y
        if relres <= tol:
            break
    r = precond(b - apply_op(x))
    return x, total_iters, float(np.linalg.norm(r) / bnorm)


@dataclass(frozen=True)
class InterpolatoryDecomposition:
    """Row skeletonization M ~= P @ M[J[:l], :].

    ``P`` is (m, l) with an identity block at the skeleton rows,
    ``J`` a permutation of range(m), ``l`` the numerical rank at the
    requested relative tolerance.
    """

    p: np.ndarray
    j: np.ndarray
    l: int

    def reconstruct(self, skeleton_rows: np.ndarray) -> np.ndarray:
        return self.p @ skeleton_rows


def interpolatory_decomposition(mat: np.ndarray, eps: float,
                                rank: int | None = None) -> InterpolatoryDecomposition:
    """Row-space interpolatory decomposition via column-pivoted QR of M^T.

    The rank is the smallest l with |R[l, l]| <= eps * |R[0, 0]| unless
    ``rank`` forces it. The interpolation matrix solves the leading
    triangular block against the trailing one.
    """
    mat = np.asarray(mat, dtype=float)
    if not np.all(np.isfinite(mat)):
        raise ValueError("matrix has non-finite entries")
    m = mat.shape[0]
    if m == 0 or mat.shape[1] == 0 or not np.any(mat):
        l = 0 if rank is None else min(rank, m)
        p = np.zeros((m, l))
        p[:l, :l] = np.eye(l)
        return InterpolatoryDecomposition(p=p, j=np.arange(m), l=l)
    q_unused, r, perm = scipy.linalg.qr(mat.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if rank is None:
        keep = diag > eps * diag[0]
        l = int(np.count_nonzero(keep))
        l = max(l, 1)
    else:
        l = min(rank, m, diag.size)
    p = np.zeros((m, l))
    p[perm[:l], :l] = np.eye(l)
    if l < m:
        t = scipy.linalg.solve_triangular(r[:l, :l], r[:l, l:m])
        p[perm[l:m], :] = t.T
    return InterpolatoryDecomposition(p=p, j=np.asarray(perm), l=l)


@dataclass(frozen=True)
class TruncatedPseudoInverse:
    """SVD pseudoinverse with singular values below eps*sigma_max dropped."""

    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray
    rank: int

    def apply(self, b: np.ndarray) -> np.ndarray:
        coef = (self.u[:, :self.rank].T @ b) / self.sigma[:self.rank]
        return self.vt[:self.rank].T @ coef


def truncated_pinv(mat: np.ndarray, eps_sigma: float = 1e-12) -> TruncatedPseudoInverse:
    try:
        u, s, vt = scipy.linalg.svd(mat, full_matrices=False, lapack_driver="gesdd")
    except scipy.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD failed: {exc}") from exc
    if s.size == 0 or s[0] == 0.0:
        rank = 0
    else:
        rank = int(np.count_nonzero(s > eps_sigma * s[0]))
    return TruncatedPseudoInverse(u=u, sigma=s, vt=vt, rank=rank)
