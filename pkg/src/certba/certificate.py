"""Dual certificates for the relaxation.

The constraints fix the diagonal 3x3 blocks of ``X = U^T U``: frame 0's block to
the identity (six constraints) and every other block to a multiple of the
identity (five traceless constraints each), ``m = 5N + 1`` in total. At a
critical point ``U`` the multipliers are unique and solve ``Z(y) U^T = 0`` with
``Z(y) = Q - sum_i y_i A_i``; since ``Z(y)`` differs from ``Q`` only on the
diagonal blocks, the solve decouples into one small least-squares problem per
frame. ``Z(y) >= 0`` certifies global optimality.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh

from . import kernels
from .manifold import FactorPoint, blocks_to_matrix, matrix_to_blocks

# frame k >= 1: traceless symmetric basis
_B = np.zeros((5, 3, 3))
_B[0][0, 0], _B[0][1, 1] = 1.0, -1.0
_B[1][1, 1], _B[1][2, 2] = 1.0, -1.0
_B[2][0, 1] = _B[2][1, 0] = 1.0
_B[3][0, 2] = _B[3][2, 0] = 1.0
_B[4][1, 2] = _B[4][2, 1] = 1.0
# frame 0: diagonal units then symmetric off-diagonal units
_B0 = np.zeros((6, 3, 3))
for _j in range(3):
    _B0[_j][_j, _j] = 1.0
_B0[3:] = _B[2:]

DENSE_EIG_MAX = 1500


class EigenSolverError(RuntimeError):
    def __init__(self, message, eigenvalue=None, eigenvector=None):
        super().__init__(message)
        self.eigenvalue = eigenvalue
        self.eigenvector = eigenvector


@dataclass(frozen=True)
class ConstraintFamily:
    num_frames: int

    @property
    def m(self):
        return 5 * self.num_frames + 1

    @property
    def b(self):
        b = np.zeros(self.m)
        b[:3] = 1.0
        return b

    def basis(self, frame):
        return _B0 if frame == 0 else _B

    def offset(self, frame):
        return 0 if frame == 0 else 6 + 5 * (frame - 1)

    def dense(self):
        """All ``A_i`` as dense ``3N x 3N`` matrices (for small ``N`` only)."""
        N = self.num_frames
        A = np.zeros((self.m, 3 * N, 3 * N))
        for k in range(N):
            for ell, B in enumerate(self.basis(k)):
                A[self.offset(k) + ell, 3 * k : 3 * k + 3, 3 * k : 3 * k + 3] = B
        return A

    def residual(self, point):
        """``max_i |<A_i, U^T U> - b_i|``."""
        X_blocks = np.einsum("nki,nkj->nij", point.blocks(), point.blocks())
        vals = np.concatenate(
            [np.einsum("lij,ij->l", self.basis(k), X_blocks[k]) for k in range(self.num_frames)]
        )
        return float(np.abs(vals - self.b).max())


def y_from_blocks(Lam):
    """Multipliers from the per-frame dual blocks ``Lambda_k = sum_l y_{k,l} B^l``."""
    N = len(Lam)
    y = np.empty(5 * N + 1)
    L0 = Lam[0]
    y[:6] = [L0[0, 0], L0[1, 1], L0[2, 2], L0[0, 1], L0[0, 2], L0[1, 2]]
    if N > 1:
        L = Lam[1:]
        rest = np.stack([L[:, 0, 0], -L[:, 2, 2], L[:, 0, 1], L[:, 0, 2], L[:, 1, 2]], axis=1)
        y[6:] = rest.ravel()
    return y


def blocks_from_y(y, num_frames):
    y = np.asarray(y, dtype=np.float64)
    Lam = np.empty((num_frames, 3, 3))
    Lam[0] = np.einsum("l,lij->ij", y[:6], _B0)
    if num_frames > 1:
        Lam[1:] = np.einsum("nl,lij->nij", y[6:].reshape(num_frames - 1, 5), _B)
    return Lam


def regularizer_diagonal(scales, lambda_reg):
    """Entries ``2 lambda (X_{3i,3i} - 1)`` added on the last diagonal entry of blocks ``i >= 1``."""
    d = 2.0 * lambda_reg * (np.asarray(scales) ** 2 - 1.0)
    d[0] = 0.0
    return d


@dataclass(frozen=True)
class DualSolution:
    y: np.ndarray
    blocks: np.ndarray  # (N, 3, 3) Lambda_k
    reg_diag: np.ndarray  # (N,)
    kkt_residual: float


def assemble_dual(Q, point, lambda_reg=0.0):
    """Unique multipliers ``y`` with ``Z(y) U^T ~ 0`` at a (near-)critical point."""
    if np.any(point.scales <= 0) or point.feasibility_error() > 1e-6:
        raise ValueError("infeasible point")
    B = point.blocks()
    U = blocks_to_matrix(B)
    P = matrix_to_blocks(U @ Q)
    reg = regularizer_diagonal(point.scales, lambda_reg)
    if lambda_reg:
        P[:, :, 2] += reg[:, None] * B[:, :, 2]
    Lam = kernels.dual_blocks(point.stiefel, point.scales, P)
    resid = P - np.einsum("nri,nij->nrj", B, Lam)
    return DualSolution(y_from_blocks(Lam), Lam, reg, float(np.linalg.norm(resid)))


def z_matrix(Q, y, lambda_reg=0.0, x_diag=None):
    """Dense ``Z(y)``; ``x_diag`` holds ``X_{3i,3i}`` (the squared scales) when regularized."""
    N = Q.shape[0] // 3
    Z = np.array(Q, dtype=np.float64, copy=True)
    Lam = blocks_from_y(y, N)
    idx = np.arange(N)
    for a in range(3):
        for b in range(3):
            Z[3 * idx + a, 3 * idx + b] -= Lam[:, a, b]
    if lambda_reg:
        d = regularizer_diagonal(np.sqrt(np.asarray(x_diag)), lambda_reg)
        Z[3 * idx + 2, 3 * idx + 2] += d
    return Z


def form_z_apply(Q, y, lambda_reg=0.0, x_diag=None):
    """Matrix-free ``w -> Z(y) w``."""
    N = Q.shape[0] // 3
    Lam = blocks_from_y(y, N)
    if lambda_reg:
        d = regularizer_diagonal(np.sqrt(np.asarray(x_diag)), lambda_reg)
        Lam = Lam.copy()
        Lam[:, 2, 2] -= d

    def matvec(w):
        w = np.asarray(w, dtype=np.float64)
        shape = w.shape
        W = w.reshape(3 * N, -1)
        out = Q @ W - np.einsum("nij,njk->nik", Lam, W.reshape(N, 3, -1)).reshape(3 * N, -1)
        return out.reshape(shape)

    return LinearOperator((3 * N, 3 * N), matvec=matvec, matmat=matvec, rmatvec=matvec, dtype=np.float64)


def _gershgorin_upper(Z):
    return float(np.max(np.diag(Z) + (np.abs(Z).sum(axis=1) - np.abs(np.diag(Z)))))


def min_eigenpair(Z, tol=1e-8, scale=1.0, method="auto", upper_bound=None, maxiter=None):
    """Smallest eigenvalue and unit eigenvector of a symmetric matrix or operator.

    ``method="dense"`` uses a full symmetric eigensolver, ``"lanczos"`` runs
    Lanczos on ``sigma I - Z`` with ``sigma`` a Gershgorin upper bound, falling
    back to shift-and-invert. ``"auto"`` picks dense for small matrices.
    The eigen-residual is checked against ``tol * max(1, scale)``.
    """
    is_dense = isinstance(Z, np.ndarray)
    n = Z.shape[0]
    bound = tol * max(1.0, scale)
    if method == "auto":
        method = "dense" if is_dense and n <= DENSE_EIG_MAX else "lanczos"
    if method == "dense":
        Zd = Z if is_dense else Z @ np.eye(n)
        w, V = sla.eigh(Zd, subset_by_index=[0, 0])
        lam, v = float(w[0]), V[:, 0]
    else:
        op = Z if not is_dense else LinearOperator((n, n), matvec=lambda x: Z @ x, dtype=np.float64)
        if upper_bound is None:
            if is_dense:
                upper_bound = _gershgorin_upper(Z)
            else:
                upper_bound = 1.01 * float(eigsh(op, k=1, which="LA", tol=1e-3, return_eigenvectors=False)[0])
        sigma = max(upper_bound, 0.0) + 1e-12 * max(1.0, scale)
        shifted = LinearOperator((n, n), matvec=lambda x: sigma * x - op @ x, dtype=np.float64)
        try:
            w, V = eigsh(shifted, k=1, which="LA", tol=tol * 1e-2, maxiter=maxiter or 20 * n)
            lam, v = float(sigma - w[0]), V[:, 0]
        except ArpackNoConvergence:
            if not is_dense:
                raise EigenSolverError("Lanczos did not converge") from None
            try:
                w, V = eigsh(Z, k=1, sigma=-sigma, which="LM", tol=tol * 1e-2)
                lam, v = float(w[0]), V[:, 0]
            except ArpackNoConvergence as exc:
                ev = exc.eigenvalues
                raise EigenSolverError(
                    "shift-and-invert Lanczos did not converge",
                    None if len(ev) == 0 else float(ev[0]),
                    None if len(ev) == 0 else exc.eigenvectors[:, 0],
                ) from None
    v = v / np.linalg.norm(v)
    # fix the sign so the result is deterministic
    j = int(np.argmax(np.abs(v)))
    if v[j] < 0:
        v = -v
    res = float(np.linalg.norm(Z @ v - lam * v))
    if res > bound:
        raise EigenSolverError(f"eigen-residual {res:.3e} above {bound:.3e}", lam, v)
    return lam, v


def suboptimality(rho_hat, rho_lower):
    return (rho_hat - rho_lower) / (1.0 + abs(rho_hat) + abs(rho_lower))


def rigorous_lower_bound(rho_dual, lambda_min, trace_x, safe=False, roundoff=0.0):
    """Lower bound ``max(0, lambda_min) tr(X) + rho_dual``.

    With ``safe=True`` a negative ``lambda_min`` is charged as
    ``lambda_min * tr(X)`` instead of being clipped at zero, which keeps the
    bound conservative when the multipliers come from an inexact critical
    point, and ``roundoff`` (an allowance for floating-point error in the
    computed ``y``, ``rho_dual`` and ``lambda_min``) is subtracted.
    """
    if trace_x < 0:
        raise ValueError("trace_x must be >= 0")
    if roundoff < 0:
        raise ValueError("roundoff must be >= 0")
    if safe:
        return lambda_min * trace_x + rho_dual - roundoff
    return max(0.0, lambda_min) * trace_x + rho_dual


def roundoff_allowance(q_norm, trace_x, rho_dual, n):
    """Floating-point slack ``n eps (|Q|_F tr(X) + |rho_dual|)`` for the safe bound."""
    return float(n * np.finfo(float).eps * (q_norm * trace_x + abs(rho_dual)))


def dual_value(y, scales, lambda_reg=0.0):
    """``b^T y``, plus ``F(X) - <grad F(X), X>`` for the scale regularizer."""
    value = float(np.sum(y[:3]))
    if lambda_reg:
        s2 = np.asarray(scales[1:]) ** 2
        value += float(lambda_reg * np.sum((s2 - 1.0) ** 2) - np.sum(2.0 * lambda_reg * (s2 - 1.0) * s2))
    return value


@dataclass(frozen=True)
class Certificate:
    y: np.ndarray
    min_eigenvalue: float
    min_eigenvector: np.ndarray
    kkt_residual: float
    rho_dual: float
    trace_x: float
    q_norm: float
    rank: int
    objective: float
    certified: bool
    eta: float = math.nan
    eta_rigorous: float = math.nan
    rho_hat: float = math.nan
    extra: dict = field(default_factory=dict)
    roundoff: float = 0.0

    @property
    def rho_lower(self):
        return rigorous_lower_bound(self.rho_dual, self.min_eigenvalue, self.trace_x, safe=True, roundoff=self.roundoff)

    def with_rounded(self, rho_hat):
        """Attach the rounded objective and compute both suboptimality gaps."""
        return replace(
            self,
            rho_hat=float(rho_hat),
            eta=suboptimality(rho_hat, self.rho_dual),
            eta_rigorous=suboptimality(rho_hat, self.rho_lower),
        )

    def summary(self, include_y=False):
        out = {
            "certified": bool(self.certified),
            "rank": int(self.rank),
            "min_eig": float(self.min_eigenvalue),
            "kkt_residual": float(self.kkt_residual),
            "rho_dual": float(self.rho_dual),
            "rho_lower": float(self.rho_lower),
            "rho_hat": float(self.rho_hat),
            "objective_relaxed": float(self.objective),
            "eta": float(self.eta),
            "eta_rigorous": float(self.eta_rigorous),
            "roundoff": float(self.roundoff),
            "q_norm": float(self.q_norm),
        }
        if include_y:
            out["y"] = [float(v) for v in self.y]
        return out


def certify(Q, point, lambda_reg=0.0, eig_tol=1e-8, cert_tol=1e-6, eig_method="auto", objective=None):
    """Assemble the dual at ``point``, compute ``lambda_min(Z)`` and decide certification."""
    qn = float(np.linalg.norm(Q))
    dual = assemble_dual(Q, point, lambda_reg)
    s2 = point.scales**2
    if point.num_frames * 3 <= DENSE_EIG_MAX or eig_method == "dense":
        Z = z_matrix(Q, dual.y, lambda_reg, s2)
    else:
        Z = form_z_apply(Q, dual.y, lambda_reg, s2)
    extra = {}
    try:
        lam, v = min_eigenpair(Z, tol=eig_tol, scale=qn, method=eig_method)
    except EigenSolverError as exc:
        # typically a scale driven toward zero: the multipliers blow up and
        # no trustworthy spectrum is available, so the point stays uncertified
        lam = math.nan if exc.eigenvalue is None else float(exc.eigenvalue)
        v = exc.eigenvector
        extra["eigen_failure"] = str(exc)
    if objective is None:
        U = point.matrix()
        objective = float(np.vdot(U @ Q, U))
        if lambda_reg:
            objective += lambda_reg * float(np.sum((s2[1:] - 1.0) ** 2))
    rho_dual = dual_value(dual.y, point.scales, lambda_reg)
    trace_x = float(3.0 * np.sum(s2))
    return Certificate(
        y=dual.y,
        min_eigenvalue=lam,
        min_eigenvector=v,
        kkt_residual=dual.kkt_residual,
        rho_dual=rho_dual,
        trace_x=trace_x,
        q_norm=qn,
        rank=point.rank,
        objective=objective,
        certified=bool(not extra and lam >= -cert_tol * max(1.0, qn)),
        extra=extra,
        roundoff=roundoff_allowance(qn, trace_x, rho_dual, Q.shape[0]),
    )


def licq_rank(point, tol=None):
    """Numerical rank of the stacked ``{A_i U^T}`` (dense, small ``N`` only)."""
    A = ConstraintFamily(point.num_frames).dense()
    U = point.matrix()
    M = np.stack([(Ai @ U.T).ravel() for Ai in A])
    sv = np.linalg.svd(M, compute_uv=False)
    if tol is None:
        tol = sv.max() * max(M.shape) * np.finfo(float).eps
    return int(np.sum(sv > tol)), sv


__all__ = [
    "Certificate",
    "ConstraintFamily",
    "DualSolution",
    "EigenSolverError",
    "FactorPoint",
    "assemble_dual",
    "blocks_from_y",
    "certify",
    "dual_value",
    "form_z_apply",
    "licq_rank",
    "min_eigenpair",
    "rigorous_lower_bound",
    "roundoff_allowance",
    "suboptimality",
    "y_from_blocks",
    "z_matrix",
]
