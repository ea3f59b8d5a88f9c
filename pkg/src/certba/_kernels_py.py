"""Pure numpy implementation of the batched per-frame block kernels.

Every routine works on stacks of ``r x 3`` frame blocks stored as a
C-contiguous ``(N, r, 3)`` float64 array. Frame 0 is the anchored frame:
its scale is fixed to one, so it has no radial (scale) degree of freedom.
"""

import numpy as np


def _sym(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def project_tangent(R, A):
    """Orthogonal projection of ambient blocks ``A`` onto the tangent space at ``R``.

    Removes ``R_i sym(R_i^T A_i)`` (the normal part plus the radial part) and
    adds back the radial component ``<A_i, R_i>/3 R_i`` for frames ``i >= 1``.
    """
    RtA = np.einsum("nri,nrj->nij", R, A)
    out = A - np.einsum("nri,nij->nrj", R, _sym(RtA))
    radial = np.trace(RtA, axis1=1, axis2=2) / 3.0
    radial[0] = 0.0
    out += radial[:, None, None] * R
    return out


def weingarten(R, scales, G, xi):
    """Curvature term ``-xi_i M_i`` of the Riemannian Hessian.

    ``M_i`` is the normal-space multiplier of the Euclidean gradient ``G`` at
    the block ``s_i R_i``: ``(sym(R_i^T G_i) - [i>0] tr(R_i^T G_i)/3 I) / s_i``.
    """
    M = _sym(np.einsum("nri,nrj->nij", R, G))
    tr = np.trace(M, axis1=1, axis2=2) / 3.0
    tr[0] = 0.0
    M = M - tr[:, None, None] * np.eye(3)
    M /= scales[:, None, None]
    return -np.einsum("nri,nij->nrj", xi, M)


def _gram_schmidt(B):
    """Thin QR of each ``r x 3`` block with a positive triangular diagonal."""
    Q = np.empty_like(B)
    for j in range(3):
        v = B[:, :, j].copy()
        for k in range(j):
            v -= np.einsum("nr,nr->n", Q[:, :, k], v)[:, None] * Q[:, :, k]
        norm = np.linalg.norm(v, axis=1)
        if np.any(norm <= 1e-14 * (1.0 + np.linalg.norm(B[:, :, j], axis=1))):
            raise FloatingPointError("retraction failure: rank-deficient block")
        Q[:, :, j] = v / norm[:, None]
    return Q


def retract(R, scales, xi, step):
    """Retract ambient tangent blocks ``xi`` at ``(R, scales)``.

    Returns new ``(R, scales)``. The Stiefel part moves by Gram-Schmidt of
    ``R_i + step * V_i / s_i``; scales move multiplicatively so they stay
    positive. ``scales[0]`` is never changed.
    """
    delta = np.einsum("nrj,nrj->n", xi, R) / 3.0
    delta[0] = 0.0
    V = xi - delta[:, None, None] * R
    R_new = _gram_schmidt(R + (step / scales)[:, None, None] * V)
    s_new = scales * np.exp(step * delta / scales)
    s_new[0] = scales[0]
    return R_new, s_new


def dual_blocks(R, scales, P):
    """Least-squares dual block ``Lambda_k`` with ``Lambda_k U_k^T ~ P_k^T``.

    ``P`` holds the ``r x 3`` blocks of ``U Q``. Because ``U_k^T U_k = s_k^2 I``
    the least-squares solution over symmetric (traceless for ``k >= 1``)
    matrices is the projection of ``P_k^T R_k / s_k``.
    """
    L = _sym(np.einsum("nri,nrj->nij", P, R)) / scales[:, None, None]
    tr = np.trace(L, axis1=1, axis2=2) / 3.0
    tr[0] = 0.0
    return L - tr[:, None, None] * np.eye(3)


def frame_moments(frames, points, weights, n_frames):
    """Per-frame weighted sums ``sum w`` , ``sum w u`` and ``sum w u u^T``."""
    deg = np.bincount(frames, weights=weights, minlength=n_frames)
    wp = weights[:, None] * points
    first = np.zeros((n_frames, 3))
    np.add.at(first, frames, wp)
    second = np.zeros((n_frames, 3, 3))
    np.add.at(second, frames, wp[:, :, None] * points[:, None, :])
    return deg, first, second
