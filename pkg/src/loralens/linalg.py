"""Dense float64 linear algebra shared by the model and the analyses.

Matrices are plain 2-D ``numpy.ndarray`` objects. The SVD is a one-sided
(Hestenes) Jacobi iteration with a round-robin pair ordering so that every
disjoint set of column rotations is applied as one vectorized update.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, EmptySpectrumError, ShapeError, ValidationError

SVD_MAX_SWEEPS = 100
SVD_TOL = 1e-12
EIG_MAX_SWEEPS = 100


def as_matrix(m, name="matrix") -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} contains non-finite entries")
    return a


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray
    sweeps: int = 0

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.vt


def _round_robin(n):
    """Pairings of a circle-method tournament over ``n`` (even) players."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        p = players[:half]
        q = players[half:][::-1]
        rounds.append((np.array(p), np.array(q)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _complete_basis(u, filled):
    """Replace the columns of ``u`` not in ``filled`` by an orthonormal completion."""
    m, k = u.shape
    basis = [u[:, j] for j in range(k) if filled[j]]
    out = u.copy()
    candidates = iter(np.eye(m))
    for j in range(k):
        if filled[j]:
            continue
        while True:
            v = next(candidates).copy()
            for b in basis:
                v -= (b @ v) * b
            for b in basis:  # second pass for orthogonality to working precision
                v -= (b @ v) * b
            nv = np.linalg.norm(v)
            if nv > 1e-8:
                v /= nv
                break
        basis.append(v)
        out[:, j] = v
    return out


def _jacobi_columns(w, max_sweeps, tol):
    """Orthogonalize the columns of ``w`` in place; returns (w, v, sweeps)."""
    m, n = w.shape
    v = np.eye(n)
    if n == 1:
        return w, v, 0
    pad = n % 2
    if pad:
        w = np.hstack([w, np.zeros((m, 1))])
        v = np.pad(v, ((0, 1), (0, 1)))
    rounds = _round_robin(n + pad)
    scale = float(np.sum(w * w))
    floor = np.finfo(np.float64).tiny + (np.finfo(np.float64).eps ** 2) * scale
    worst = np.inf
    for sweep in range(1, max_sweeps + 1):
        worst = 0.0
        for p, q in rounds:
            wp, wq = w[:, p], w[:, q]
            alpha = np.einsum("ij,ij->j", wp, wp)
            beta = np.einsum("ij,ij->j", wq, wq)
            gamma = np.einsum("ij,ij->j", wp, wq)
            norm = np.sqrt(alpha * beta)
            active = norm > floor
            off = np.zeros_like(gamma)
            off[active] = np.abs(gamma[active]) / norm[active]
            rotate = off > tol
            if not np.any(rotate):
                continue
            worst = max(worst, float(off.max()))
            g = np.where(rotate, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t = np.where(zeta == 0.0, 1.0, t)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(rotate, c, 1.0)
            s = np.where(rotate, s, 0.0)
            w[:, p], w[:, q] = c * wp - s * wq, s * wp + c * wq
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if worst <= tol:
            if pad:
                w, v = w[:, :n], v[:n, :n]
            return w, v, sweep
    raise ConvergenceError(
        f"one-sided Jacobi did not converge in {max_sweeps} sweeps "
        f"(largest off-diagonal cosine {worst:.3e})",
        residual=worst,
    )


def svd(m, max_sweeps=SVD_MAX_SWEEPS, tol=SVD_TOL) -> SvdResult:
    """Thin SVD ``m = u @ diag(sigma) @ vt`` with ``k = min(rows, cols)``.

    Wide inputs are handled through their transpose. Tall inputs are first
    reduced to their square ``R`` factor so the rotations act on ``k`` rows.
    """
    a = as_matrix(m)
    if a.size == 0:
        raise ValidationError("svd of an empty matrix")
    rows, cols = a.shape
    if rows < cols:
        r = svd(a.T, max_sweeps, tol)
        return SvdResult(u=r.vt.T, sigma=r.sigma, vt=r.u.T, sweeps=r.sweeps)

    q = None
    work = a.copy()
    if rows > cols:
        q, work = np.linalg.qr(a)
    w, v, sweeps = _jacobi_columns(work, max_sweeps, tol)
    sigma = np.sqrt(np.einsum("ij,ij->j", w, w))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    w = w[:, order]
    v = v[:, order]
    top = sigma[0] if sigma.size else 0.0
    filled = sigma > max(top, np.finfo(np.float64).tiny) * 1e-14
    u = np.zeros_like(w)
    u[:, filled] = w[:, filled] / sigma[filled]
    if not np.all(filled):
        u = _complete_basis(u, filled)
    if q is not None:
        u = q @ u
    return SvdResult(u=u, sigma=sigma, vt=v.T, sweeps=sweeps)


def sym_eig(s, max_sweeps=EIG_MAX_SWEEPS, tol=1e-14):
    """Cyclic two-sided Jacobi eigendecomposition of a symmetric matrix.

    Returns ``(eigenvalues, eigenvectors)`` sorted by descending eigenvalue,
    eigenvectors in columns.
    """
    a = as_matrix(s).copy()
    n, k = a.shape
    if n != k:
        raise ShapeError(f"sym_eig expects a square matrix, got {a.shape}")
    if np.max(np.abs(a - a.T), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(a), initial=0.0)):
        raise ValidationError("sym_eig input is not symmetric")
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    if n == 1:
        return np.diag(a).copy(), v
    pad = n % 2
    if pad:
        a = np.pad(a, ((0, 1), (0, 1)))
        v = np.pad(v, ((0, 1), (0, 1)))
    rounds = _round_robin(n + pad)
    ref = max(np.sqrt(np.sum(a * a)), np.finfo(np.float64).tiny)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= tol * ref:
            break
        for p, q in rounds:
            apq = a[p, q]
            theta = np.where(apq != 0.0, (a[q, q] - a[p, p]) / (2.0 * np.where(apq != 0.0, apq, 1.0)), 0.0)
            t = np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            t = np.where(theta == 0.0, 1.0, t)
            t = np.where(apq == 0.0, 0.0, t)
            c = 1.0 / np.sqrt(t * t + 1.0)
            sn = t * c
            ap, aq = a[:, p], a[:, q]
            a[:, p], a[:, q] = c * ap - sn * aq, sn * ap + c * aq
            ap, aq = a[p, :], a[q, :]
            a[p, :], a[q, :] = c[:, None] * ap - sn[:, None] * aq, sn[:, None] * ap + c[:, None] * aq
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = c * vp - sn * vq, sn * vp + c * vq
    else:
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        raise ConvergenceError(f"symmetric Jacobi did not converge (off-norm {off:.3e})", residual=off)
    if pad:
        a, v = a[:n, :n], v[:n, :n]
    vals = np.diag(a).copy()
    order = np.argsort(-vals, kind="stable")
    return vals[order], v[:, order]


def softmax(v) -> np.ndarray:
    """Softmax over the last axis with max subtraction."""
    x = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValidationError("softmax input contains non-finite entries")
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def log_softmax(v) -> np.ndarray:
    x = np.asarray(v, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def frobenius_norm(m) -> float:
    a = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


def l2_norm(v) -> float:
    a = np.asarray(v, dtype=np.float64).ravel()
    return float(np.sqrt(a @ a))


def cosine(u, v) -> float:
    """Cosine similarity; 0 when either vector is zero."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ShapeError(f"cosine of vectors with shapes {u.shape} and {v.shape}")
    nu, nv = l2_norm(u), l2_norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.clip((u @ v) / (nu * nv), -1.0, 1.0))


def cumulative_energy(sigma) -> np.ndarray:
    """Fraction of total squared singular value mass held by the leading k values."""
    s = np.asarray(sigma, dtype=np.float64).ravel()
    if s.size == 0 or np.any(s < 0) or not np.all(np.isfinite(s)):
        raise ValidationError("sigma must be a non-empty, finite, non-negative vector")
    if np.any(np.diff(s) > 0):
        raise ValidationError("sigma must be non-increasing")
    c = np.cumsum(s * s)
    total = c[-1]
    if total == 0.0:
        raise EmptySpectrumError("all singular values are zero; energy is undefined")
    return c / total
