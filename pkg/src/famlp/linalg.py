"""Singular value decomposition by one-sided Jacobi rotations and the
rank-truncated reconstruction used for low-rank feature enhancement.

The Jacobi kernel orthogonalizes column pairs following a round-robin
tournament schedule, which makes every pair in a round disjoint so a
whole round (and a whole batch of independent matrices) rotates in one
vectorized step.  Column rotations preserve the Frobenius norm, so
convergence is measured against the initial scale.

Rank-k reconstruction backpropagates the upstream gradient through the
frozen column-space projector U_k U_k^T: the subspace is treated as a
constant of the forward pass, which sidesteps the singular derivative
at repeated singular values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, _add_grad, _from_op

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is normally present
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap


MAX_SWEEPS = 60
OFF_DIAGONAL_TOL = 1e-12

# Singular values at or below this fraction of the largest are treated
# as zero when rebuilding left vectors.
_NULL_REL_TOL = 1e-13

_ROUNDS_CACHE = {}


class ConvergenceError(RuntimeError):
    """Jacobi sweep limit hit; carries the worst off-diagonal residual."""

    def __init__(self, residual, sweeps):
        super().__init__(
            f"one-sided Jacobi did not converge after {sweeps} sweeps "
            f"(relative off-diagonal residual {residual:.3e})"
        )
        self.residual = residual


@dataclass
class SVDResult:
    """Full SVD: x == u @ diag(sigma) @ v.T with orthonormal u, v columns."""

    u: Tensor
    sigma: Tensor
    v: Tensor


def _round_robin(n):
    """Disjoint pair schedule covering all column pairs once per sweep."""
    rounds = _ROUNDS_CACHE.get(n)
    if rounds is not None:
        return rounds
    if n < 2:
        _ROUNDS_CACHE[n] = []
        return []
    players = list(range(n)) + ([n] if n % 2 else [])  # n == bye marker
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a < n and b < n:
                ps.append(a)
                qs.append(b)
        rounds.append((np.array(ps), np.array(qs)))
        players = [players[0], players[-1]] + players[1:-1]
    _ROUNDS_CACHE[n] = rounds
    return rounds


def _orthogonalize_null_columns(u, s):
    """Replace columns belonging to (near-)zero singular values with a
    deterministic orthonormal completion from canonical basis vectors."""
    b, m, n = u.shape
    cutoff = np.maximum(s[:, :1] * _NULL_REL_TOL, 0.0)
    bad = s <= cutoff
    for i in np.nonzero(bad.any(axis=1))[0]:
        cols = u[i]
        cols[:, bad[i]] = 0.0  # drop garbage directions before refilling
        for j in np.nonzero(bad[i])[0]:
            for cand in range(m):
                vec = np.zeros(m)
                vec[cand] = 1.0
                vec -= cols @ (cols.T @ vec)
                norm = np.linalg.norm(vec)
                if norm > 0.5:
                    cols[:, j] = vec / norm
                    break
    return u


@njit(cache=True)
def _sweeps_compiled(work, v, track_v, tol, max_sweeps):  # pragma: no cover - timed path
    """Cyclic one-sided Jacobi sweeps per matrix; returns the relative
    off-diagonal residual of the final sweep for each matrix."""
    nb, m, n = work.shape
    resid = np.zeros(nb)
    for b in range(nb):
        a = work[b]
        scale = 0.0
        for i in range(m):
            for j in range(n):
                scale += a[i, j] * a[i, j]
        if scale <= 0.0:
            continue
        off = 0.0
        for _ in range(max_sweeps):
            off2 = 0.0
            for p in range(n - 1):
                for q in range(p + 1, n):
                    alpha = 0.0
                    beta = 0.0
                    gamma = 0.0
                    for i in range(m):
                        ap = a[i, p]
                        aq = a[i, q]
                        alpha += ap * ap
                        beta += aq * aq
                        gamma += ap * aq
                    off2 += 2.0 * gamma * gamma
                    if gamma == 0.0:
                        continue
                    zeta = (beta - alpha) / (2.0 * gamma)
                    t = 1.0 / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                    if zeta < 0.0:
                        t = -t
                    c = 1.0 / np.sqrt(1.0 + t * t)
                    s = c * t
                    for i in range(m):
                        ap = a[i, p]
                        aq = a[i, q]
                        a[i, p] = c * ap - s * aq
                        a[i, q] = s * ap + c * aq
                    if track_v:
                        vb = v[b]
                        for i in range(n):
                            vp = vb[i, p]
                            vq = vb[i, q]
                            vb[i, p] = c * vp - s * vq
                            vb[i, q] = s * vp + c * vq
            off = np.sqrt(off2)
            if off <= tol * scale:
                break
        resid[b] = off / scale
    return resid


def _sweeps_numpy(work, v, track_v, tol, max_sweeps):
    """Vectorized fallback: round-robin disjoint pair rotations applied
    across the whole batch at once."""
    nb, m, n = work.shape
    scale = np.maximum((work * work).sum(axis=(1, 2)), 1e-300)
    skip_tol = (1e-14 * scale)[:, None]
    off = np.zeros(nb)
    rounds = _round_robin(n)
    for _ in range(max_sweeps):
        off2 = np.zeros(nb)
        colnorm2 = (work * work).sum(axis=1)
        for ps, qs in rounds:
            ap = work[:, :, ps]
            aq = work[:, :, qs]
            gamma = (ap * aq).sum(axis=1)
            off2 += 2.0 * (gamma * gamma).sum(axis=1)
            if (np.abs(gamma) <= skip_tol).all():
                continue
            alpha = colnorm2[:, ps]
            beta = colnorm2[:, qs]
            with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
                zeta = (beta - alpha) / np.where(gamma == 0.0, 1.0, 2.0 * gamma)
                t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t = np.where(gamma == 0.0, 0.0, t)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s_ = c * t
            cb = c[:, None, :]
            sb = s_[:, None, :]
            work[:, :, ps] = cb * ap - sb * aq
            work[:, :, qs] = sb * ap + cb * aq
            # rotation changes only the two column norms
            tsq = t * t
            colnorm2[:, ps] = (alpha - 2.0 * t * gamma + tsq * beta) / (1.0 + tsq)
            colnorm2[:, qs] = (beta + 2.0 * t * gamma + tsq * alpha) / (1.0 + tsq)
            if track_v:
                vp = v[:, :, ps]
                vq = v[:, :, qs]
                v[:, :, ps] = cb * vp - sb * vq
                v[:, :, qs] = sb * vp + cb * vq
        off = np.sqrt(off2)
        if (off <= tol * scale).all():
            break
    return off / scale


def jacobi_svd(a, need_v=True, complete=True):
    """Batched one-sided Jacobi SVD of ``a`` with shape [..., m, n].

    Returns (u, s, v) with u: [..., m, r], s: [..., r] descending, and
    v: [..., n, r] where r = min(m, n); v is None when ``need_v`` is
    false (wide inputs still accumulate it internally since the roles
    swap).  With ``complete`` false, left vectors for zero singular
    values stay zero instead of being completed to an orthonormal set.
    Raises ConvergenceError if the relative off-diagonal residual is
    still above tolerance after MAX_SWEEPS sweeps.
    """
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim < 2:
        raise ValueError(f"svd expects at least a 2-d array, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("svd requires finite entries")
    batch_shape = arr.shape[:-2]
    m0, n0 = arr.shape[-2:]
    work = arr.reshape((-1, m0, n0)).copy()
    transposed = m0 < n0
    if transposed:
        work = np.ascontiguousarray(np.swapaxes(work, 1, 2))
    nb, m, n = work.shape
    track_v = need_v or transposed

    v = np.broadcast_to(np.eye(n), (nb, n, n)).copy() if track_v else np.zeros((0, 0, 0))

    if n >= 2:
        sweeps = _sweeps_compiled if _HAVE_NUMBA else _sweeps_numpy
        resid = sweeps(work, v, track_v, OFF_DIAGONAL_TOL, MAX_SWEEPS)
        if (resid > OFF_DIAGONAL_TOL).any():
            raise ConvergenceError(float(resid.max()), MAX_SWEEPS)

    sigma = np.sqrt((work * work).sum(axis=1))
    order = np.argsort(-sigma, axis=1, kind="stable")
    sigma = np.take_along_axis(sigma, order, axis=1)
    work = np.take_along_axis(work, order[:, None, :], axis=2)
    denom = np.where(sigma > 0, sigma, 1.0)
    u = work / denom[:, None, :]
    if complete:
        u = _orthogonalize_null_columns(u, sigma)
    if track_v:
        v = np.take_along_axis(v, order[:, None, :], axis=2)

    if transposed:
        u, v = v, u
    r = min(m0, n0)
    u = u.reshape(batch_shape + u.shape[1:])
    sigma = sigma.reshape(batch_shape + (r,))
    v = v.reshape(batch_shape + v.shape[1:]) if need_v else None
    return u, sigma, v


def svd(x):
    """Full SVD of a 2-d tensor or array as an SVDResult."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"svd expects a 2-d matrix, got shape {arr.shape}")
    u, s, v = jacobi_svd(arr)
    return SVDResult(Tensor(u), Tensor(s), Tensor(v))


def _check_rank(shape, k):
    r = min(shape[-2], shape[-1])
    if not 1 <= k <= r:
        raise ValueError(f"rank {k} out of range [1, {r}] for shape {shape[-2:]}")


def _truncation_kernel(arr, k):
    """Rank-k part via the column-space projector: U_k (U_k^T A).

    Equals sum_{i<k} sigma_i u_i v_i^T since the u_i are orthonormal;
    null columns stay zero and drop out of the product.
    """
    u, _, _ = jacobi_svd(arr, need_v=False, complete=False)
    uk = np.ascontiguousarray(u[..., :, :k])
    return uk @ (np.swapaxes(uk, -1, -2) @ arr), uk


def low_rank_reconstruct(x, k):
    """Frobenius-optimal rank-k reconstruction sum_{i<k} sigma_i u_i v_i^T.

    Backward maps the upstream gradient G to U_k U_k^T G, i.e. the
    column-space projector of the forward pass is held constant.
    """
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.ndim < 2:
        raise ValueError(f"expected at least a 2-d tensor, got shape {x.shape}")
    _check_rank(x.shape, k)
    recon, uk = _truncation_kernel(x.data, k)

    def back(g):
        if x.requires_grad:
            _add_grad(x, uk @ (np.swapaxes(uk, -1, -2) @ g))

    return _from_op(recon, (x,), back)


def m_svd_complex(z, k):
    """Rank-k truncation applied independently to the real and imaginary
    parts of a complex tensor; both parts share one batched Jacobi call."""
    re, im = z.re, z.im
    _check_rank(re.shape, k)
    stacked = np.stack([re.data, im.data])
    recon, uk = _truncation_kernel(stacked, k)

    def back_re(g):
        if re.requires_grad:
            _add_grad(re, uk[0] @ (np.swapaxes(uk[0], -1, -2) @ g))

    def back_im(g):
        if im.requires_grad:
            _add_grad(im, uk[1] @ (np.swapaxes(uk[1], -1, -2) @ g))

    from .fft import ComplexTensor

    re_out = _from_op(recon[0], (re,), back_re)
    im_out = _from_op(recon[1], (im,), back_im)
    return ComplexTensor(re_out, im_out)
