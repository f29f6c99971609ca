"""Singular value decomposition, pseudoinverse and per-mode (HOSVD) spectra.

Two deterministic back ends are available:

``"lapack"``
    LAPACK divide-and-conquer (``gesdd``) through SciPy, falling back to
    ``gesvd`` when ``gesdd`` does not converge.  Fast at the 1000-4000
    dimensions used by the random-matrix studies.
``"jacobi"``
    One-sided (Hestenes) Jacobi with a QR preconditioner, written here.
    Slower, but singular values carry high relative accuracy, which is
    what counting values below 1e-4/1e-5 cares about.

Both keep absolute errors of small singular values around
``eps * sigma_max``; matrices with fewer rows than columns are decomposed
through their transpose.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .tensor import mode_unfold

__all__ = [
    "SvdResult",
    "SvdConvergenceError",
    "singular_values",
    "svd_full",
    "pseudoinverse",
    "hosvd_mode_spectra",
    "jacobi_svd",
]

METHODS = ("lapack", "jacobi")
JACOBI_MAX_SWEEPS = 60


class SvdConvergenceError(RuntimeError):
    """Raised when an SVD back end fails to converge."""


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``a = u @ diag(s) @ vt``.

    ``u`` is ``m x k`` and ``vt`` is ``k x n`` with ``k = min(m, n)``; both are
    ``None`` when vectors were not requested.
    """

    s: np.ndarray
    u: np.ndarray = None
    vt: np.ndarray = None

    @property
    def v(self):
        return None if self.vt is None else self.vt.T

    def reconstruct(self):
        if self.u is None:
            raise ValueError("singular vectors were not computed")
        return (self.u * self.s) @ self.vt


def _check_input(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"empty matrix {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    return a


def _lapack_svd(a, compute_uv):
    try:
        return scipy.linalg.svd(a, full_matrices=False, compute_uv=compute_uv,
                                check_finite=False, lapack_driver="gesdd")
    except np.linalg.LinAlgError:
        pass
    try:
        return scipy.linalg.svd(a, full_matrices=False, compute_uv=compute_uv,
                                check_finite=False, lapack_driver="gesvd")
    except np.linalg.LinAlgError as exc:
        raise SvdConvergenceError(f"LAPACK SVD failed on {a.shape} input: {exc}") from exc


def _round_robin(n):
    """Pairings of a round-robin tournament over ``n`` (even) players."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        rounds.append((np.array(players[:half]), np.array(players[half:][::-1])))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _complete_columns(u, keep):
    """Replace columns of ``u`` not in ``keep`` by an orthonormal completion."""
    if keep.all():
        return u
    m, k = u.shape
    good = u[:, keep]
    q, _ = np.linalg.qr(np.hstack([good, np.eye(m)]))
    # columns of q after the first good.shape[1] span the complement
    fill = q[:, good.shape[1]:good.shape[1] + (k - good.shape[1])]
    out = u.copy()
    out[:, ~keep] = fill
    return out


def jacobi_svd(a, compute_uv=True, tol=None, max_sweeps=JACOBI_MAX_SWEEPS):
    """One-sided Jacobi SVD of a matrix with ``rows >= cols``.

    The matrix is first reduced to its ``n x n`` triangular factor ``R`` by
    a Householder QR, then column pairs of ``R`` are orthogonalised with
    plane rotations in round-robin order until every pair is orthogonal to
    ``tol`` (default ``n * eps``) relative to its column norms.
    """
    a = np.asarray(a, dtype=np.float64)
    m, n = a.shape
    if m < n:
        raise ValueError("jacobi_svd expects rows >= cols")
    tol = n * np.finfo(np.float64).eps if tol is None else tol
    q, w = np.linalg.qr(a)
    w = np.array(w)
    padded = n + (n % 2)
    if padded != n:
        w = np.hstack([w, np.zeros((n, 1))])
    v = np.eye(padded)
    rounds = _round_robin(padded) if padded > 1 else []

    for _ in range(max_sweeps):
        rotated = False
        for p, r in rounds:
            wp, wr = w[:, p], w[:, r]
            alpha = np.einsum("ij,ij->j", wp, wp)
            beta = np.einsum("ij,ij->j", wr, wr)
            gamma = np.einsum("ij,ij->j", wp, wr)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            active &= gamma != 0.0
            if not active.any():
                continue
            rotated = True
            p, r = p[active], r[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            wp, wr = w[:, p], w[:, r]
            w[:, p] = c * wp - s * wr
            w[:, r] = s * wp + c * wr
            vp, vr = v[:, p], v[:, r]
            v[:, p] = c * vp - s * vr
            v[:, r] = s * vp + c * vr
        if not rotated:
            break
    else:
        raise SvdConvergenceError(f"Jacobi SVD did not converge in {max_sweeps} sweeps")

    w, v = w[:, :n], v[:n, :n]
    sv = np.sqrt(np.einsum("ij,ij->j", w, w))
    order = np.argsort(-sv, kind="stable")
    sv = sv[order]
    if not compute_uv:
        return sv
    w, v = w[:, order], v[:, order]
    keep = sv > 0
    uw = np.zeros_like(w)
    uw[:, keep] = w[:, keep] / sv[keep]
    uw = _complete_columns(uw, keep)
    return q @ uw, sv, v.T


def _decompose(a, compute_uv, method):
    if method not in METHODS:
        raise ValueError(f"unknown SVD method {method!r}; choose from {METHODS}")
    transposed = a.shape[0] < a.shape[1]
    work = a.T if transposed else a
    if method == "lapack":
        out = _lapack_svd(work, compute_uv)
    else:
        out = jacobi_svd(work, compute_uv)
    if not compute_uv:
        return np.asarray(out), None, None
    u, s, vt = out
    if transposed:
        u, vt = vt.T, u.T
    return s, u, vt


def singular_values(a, method="lapack"):
    """Singular values of ``a`` in descending order."""
    a = _check_input(a)
    s, _, _ = _decompose(a, False, method)
    # LAPACK already sorts; clamp tiny negative round-off from the Jacobi path
    return np.maximum(s, 0.0)


def svd_full(a, method="lapack"):
    """Thin SVD with singular vectors as an :class:`SvdResult`."""
    a = _check_input(a)
    s, u, vt = _decompose(a, True, method)
    return SvdResult(s=s, u=u, vt=vt)


def pseudoinverse(a, tol=1e-12, method="lapack"):
    """Moore-Penrose pseudoinverse; values ``<= tol * sigma_max`` count as zero."""
    if tol < 0:
        raise ValueError("tol must be non-negative")
    res = svd_full(a, method=method)
    s = res.s
    smax = s[0] if s.size else 0.0
    keep = s > tol * smax
    inv = np.zeros_like(s)
    inv[keep] = 1.0 / s[keep]
    return (res.vt.T * inv) @ res.u.T


def hosvd_mode_spectra(t, method="lapack"):
    """Singular values of every mode unfolding of ``t``.

    Returns a list whose ``k``-th entry is ``singular_values(mode_unfold(t, k))``.
    Only the spectra are needed for rank diagnostics, so no core tensor is
    formed.
    """
    t = np.asarray(t, dtype=np.float64)
    if t.ndim < 2:
        raise ValueError("HOSVD needs a tensor of order >= 2")
    return [singular_values(mode_unfold(t, k), method=method) for k in range(t.ndim)]
