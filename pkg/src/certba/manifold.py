"""Search space ``St(r,3) x (R_+ x St(r,3))^(N-1)`` for the low-rank factor.

A point stores per-frame Stiefel blocks ``R_i`` (``r x 3``, orthonormal columns)
and positive scales ``s_i`` with ``s_0 = 1``; the factor is
``U = [s_0 R_0, ..., s_{N-1} R_{N-1}]``.

Tangent vectors are handled as ambient ``r x 3`` blocks of ``U``-space. The
metric is the Frobenius inner product of ``U``-space, so the tangent space at
block ``s R`` is ``{delta R + V : R^T V skew}`` with ``delta = 0`` on frame 0,
and ``|delta R + V|^2 = 3 delta^2 + |V|^2``. With that metric the Riemannian
gradient is the tangent projection of ``2 U Q`` and the Hessian is the
projection of the Euclidean Hessian plus a Weingarten correction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels


def blocks_to_matrix(B):
    N, r, _ = B.shape
    return B.transpose(1, 0, 2).reshape(r, 3 * N)


def matrix_to_blocks(U):
    r = U.shape[0]
    return np.ascontiguousarray(U.reshape(r, -1, 3).transpose(1, 0, 2))


@dataclass(frozen=True, eq=False)
class FactorPoint:
    stiefel: np.ndarray  # (N, r, 3)
    scales: np.ndarray  # (N,)

    @property
    def rank(self):
        return self.stiefel.shape[1]

    @property
    def num_frames(self):
        return self.stiefel.shape[0]

    def blocks(self):
        return self.stiefel * self.scales[:, None, None]

    def matrix(self):
        return blocks_to_matrix(self.blocks())

    def feasibility_error(self):
        R = self.stiefel
        err = np.abs(np.einsum("nki,nkj->nij", R, R) - np.eye(3)).max()
        return float(max(err, abs(self.scales[0] - 1.0)))

    def check(self, tol=1e-10):
        if self.stiefel.ndim != 3 or self.stiefel.shape[2] != 3 or self.rank < 3:
            raise ValueError("stiefel blocks must have shape (N, r, 3) with r >= 3")
        if self.scales.shape != (self.num_frames,):
            raise ValueError("one scale per frame required")
        if np.any(self.scales <= 0) or not np.all(np.isfinite(self.scales)):
            raise ValueError("scales must be positive")
        if self.feasibility_error() > tol:
            raise ValueError("infeasible factor point")
        return self

    @classmethod
    def create(cls, stiefel, scales):
        stiefel = np.ascontiguousarray(stiefel, dtype=np.float64)
        scales = np.array(scales, dtype=np.float64)
        return cls(stiefel, scales).check()

    @classmethod
    def identity(cls, num_frames, rank=3):
        R = np.zeros((num_frames, rank, 3))
        R[:, :3, :] = np.eye(3)
        return cls(R, np.ones(num_frames))

    @classmethod
    def random(cls, num_frames, rank=3, rng=None, scale_range=(0.5, 2.0)):
        rng = np.random.default_rng(rng)
        A = rng.normal(size=(num_frames, rank, 3))
        Qf, Rf = np.linalg.qr(A)
        Qf = Qf * np.sign(np.diagonal(Rf, axis1=1, axis2=2))[:, None, :]
        s = rng.uniform(*scale_range, size=num_frames)
        s[0] = 1.0
        return cls(np.ascontiguousarray(Qf), s)

    @classmethod
    def from_blocks(cls, B, tol=1e-8):
        """Split scaled-orthogonal blocks ``s_i R_i`` (``s_0`` must be one)."""
        B = np.asarray(B, dtype=np.float64)
        s = np.linalg.norm(B, axis=(1, 2)) / np.sqrt(3.0)
        if np.any(s <= 0):
            raise ValueError("degenerate block")
        pt = cls(np.ascontiguousarray(B / s[:, None, None]), s)
        return pt.check(tol)

    @classmethod
    def from_matrix(cls, U, tol=1e-8):
        return cls.from_blocks(matrix_to_blocks(np.asarray(U, dtype=np.float64)), tol)

    def lifted(self, rank):
        """Same point embedded at a larger rank with zero rows appended."""
        R = np.zeros((self.num_frames, rank, 3))
        R[:, : self.rank] = self.stiefel
        return FactorPoint(R, self.scales.copy())


@dataclass(frozen=True, eq=False)
class TangentVector:
    """Tangent vector split into Stiefel components and scale components.

    The represented ``U``-space direction of frame ``i`` is
    ``scales[i] * R_i + stiefel[i]``.
    """

    stiefel: np.ndarray
    scales: np.ndarray

    def ambient(self, point):
        return self.stiefel + self.scales[:, None, None] * point.stiefel

    @classmethod
    def from_ambient(cls, point, xi):
        delta = np.einsum("nrj,nrj->n", xi, point.stiefel) / 3.0
        delta[0] = 0.0
        return cls(xi - delta[:, None, None] * point.stiefel, delta)

    def inner(self, other):
        return float(np.vdot(self.stiefel, other.stiefel) + 3.0 * np.dot(self.scales, other.scales))

    def norm(self):
        return float(np.sqrt(self.inner(self)))


def assemble(point):
    return point.matrix()


def project_tangent(point, ambient):
    """Project an ``r x 3N`` matrix (or ``(N, r, 3)`` blocks) onto the tangent space."""
    A = np.asarray(ambient, dtype=np.float64)
    if A.ndim == 2:
        A = matrix_to_blocks(A)
    xi = kernels.project_tangent(point.stiefel, np.ascontiguousarray(A))
    return TangentVector.from_ambient(point, xi)


def retract(point, tangent, step=1.0):
    if step == 0:
        return point
    xi = tangent.ambient(point) if isinstance(tangent, TangentVector) else tangent
    R, s = kernels.retract(point.stiefel, point.scales, np.ascontiguousarray(xi), float(step))
    return FactorPoint(R, s)


def euclidean_gradient(Q, U):
    return 2.0 * (U @ Q)


class Problem:
    """Cost ``tr(Q U^T U) + lambda sum_{i>=1} (s_i^2 - 1)^2`` and its derivatives.

    All derivatives take and return ``(N, r, 3)`` ambient blocks.
    """

    def __init__(self, Q, lambda_reg=0.0):
        self.Q = np.ascontiguousarray(Q, dtype=np.float64)
        self.lambda_reg = float(lambda_reg)
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be >= 0")
        self.num_frames = self.Q.shape[0] // 3

    def _times_q(self, B):
        return matrix_to_blocks(blocks_to_matrix(B) @ self.Q)

    def cost(self, point):
        U = point.matrix()
        value = float(np.vdot(U @ self.Q, U))
        if self.lambda_reg:
            value += self.lambda_reg * float(np.sum((point.scales[1:] ** 2 - 1.0) ** 2))
        return value

    def cost_change(self, point, other):
        """``cost(other) - cost(point)`` evaluated through the factor difference.

        Subtracting two costs loses every digit once the decrease falls near
        roundoff of the cost itself; ``<D Q, U' + U>`` with ``D = U' - U`` does not.
        """
        U, V = point.matrix(), other.matrix()
        if U.shape != V.shape:
            return self.cost(other) - self.cost(point)
        D = V - U
        with np.errstate(over="ignore", invalid="ignore"):
            value = float(np.vdot(D @ self.Q, V + U))
            if self.lambda_reg:
                a = point.scales[1:] ** 2 - 1.0
                b = other.scales[1:] ** 2 - 1.0
                value += self.lambda_reg * float(np.sum((b - a) * (b + a)))
        return value if np.isfinite(value) else np.inf

    def egrad(self, point):
        B = point.blocks()
        G = 2.0 * self._times_q(B)
        if self.lambda_reg:
            c = (4.0 * self.lambda_reg / 3.0) * (point.scales**2 - 1.0)
            c[0] = 0.0
            G += c[:, None, None] * B
        return G

    def rgrad(self, point, egrad=None):
        G = self.egrad(point) if egrad is None else egrad
        return kernels.project_tangent(point.stiefel, G)

    def ehess(self, point, xi):
        H = 2.0 * self._times_q(xi)
        if self.lambda_reg:
            s2 = point.scales**2
            B = point.blocks()
            dot = np.einsum("nrj,nrj->n", B, xi)
            c = 4.0 * self.lambda_reg / 3.0
            a = c * (2.0 * dot / 3.0)
            b = c * (s2 - 1.0)
            a[0] = b[0] = 0.0
            H += a[:, None, None] * B + b[:, None, None] * xi
        return H

    def hess(self, point, xi, egrad=None):
        G = self.egrad(point) if egrad is None else egrad
        H = self.ehess(point, xi) + kernels.weingarten(point.stiefel, point.scales, G, xi)
        return kernels.project_tangent(point.stiefel, H)


def riemannian_gradient(Q, point, lambda_reg=0.0):
    return TangentVector.from_ambient(point, Problem(Q, lambda_reg).rgrad(point))


def hessian_vector_product(Q, point, tangent, lambda_reg=0.0):
    xi = tangent.ambient(point) if isinstance(tangent, TangentVector) else tangent
    H = Problem(Q, lambda_reg).hess(point, np.ascontiguousarray(xi))
    return TangentVector.from_ambient(point, H)


def inner(a, b):
    return float(np.vdot(a, b))
