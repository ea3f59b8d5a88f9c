"""Marginalization of translations and landmarks into the 3N x 3N data matrix.

For a fixed factor ``U = [s_1 R_1, ..., s_N R_N]`` the objective is a linear
least-squares problem in the translations and landmarks whose normal matrix is
the weighted graph Laplacian of the view graph. Anchoring ``t_1 = 0`` removes
the Laplacian's null space. The reduced Laplacian is factorized by eliminating
landmarks first (their block is diagonal) and then Cholesky-factorizing the
dense frame Schur complement.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from . import kernels
from .viewgraph import require_connected

MAX_FRAMES = 5000
PIVOT_TOL = 1e-12


class DisconnectedGraphError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MarginalBlocks:
    """The sparse pieces of the vectorized objective.

    ``Q1`` keeps only its ``N`` diagonal 3x3 blocks; ``Q2`` and ``Q3`` are the
    weighted frame and landmark degrees.
    """

    Q1: np.ndarray  # (N, 3, 3)
    Q2: np.ndarray  # (N,)
    Q3: np.ndarray  # (M,)
    V1: sp.csr_matrix  # 3N x N
    V2: sp.csr_matrix  # 3N x M
    V3: sp.csr_matrix  # N x M

    @property
    def num_frames(self):
        return len(self.Q2)

    @property
    def num_landmarks(self):
        return len(self.Q3)

    def Q1_dense(self):
        return sla.block_diag(*self.Q1) if len(self.Q1) else np.zeros((0, 0))

    def V_tp(self):
        return sp.hstack([-self.V1, self.V2]).tocsr()


def build_blocks(graph):
    N, M = graph.num_frames, graph.num_landmarks
    f, k, x, w = graph.frames, graph.landmarks, graph.points, graph.weights
    deg_f, first, second = kernels.frame_moments(f, x, w, N)
    Q3 = np.bincount(k, weights=w, minlength=M)
    rows = (3 * f[:, None] + np.arange(3)).ravel()
    wx = (w[:, None] * x).ravel()
    V1 = sp.csr_matrix(
        (first.ravel(), ((3 * np.arange(N)[:, None] + np.arange(3)).ravel(), np.repeat(np.arange(N), 3))),
        shape=(3 * N, N),
    )
    V2 = sp.csr_matrix((wx, (rows, np.repeat(k, 3))), shape=(3 * N, M))
    V3 = sp.csr_matrix((w, (f, k)), shape=(N, M))
    return MarginalBlocks(second, deg_f, Q3, V1, V2, V3)


class LaplacianSystem:
    """Weighted Laplacian of the view graph with a factorization of its anchored part.

    The anchored part deletes the row and column of frame 0 (``t_1 = 0``).
    Landmarks are eliminated first through their diagonal degree block, leaving
    the ``(N-1) x (N-1)`` Schur complement ``S`` which is Cholesky-factorized.
    """

    def __init__(self, blocks):
        self.blocks = blocks
        N, M = blocks.num_frames, blocks.num_landmarks
        self.Q_tp = sp.bmat(
            [[sp.diags(blocks.Q2), -blocks.V3], [-blocks.V3.T, sp.diags(blocks.Q3)]], format="csr"
        )
        row_sums = np.abs(np.asarray(self.Q_tp.sum(axis=1))).max()
        if row_sums > 1e-9 * max(1.0, blocks.Q2.max()):
            raise ValueError("Laplacian row sums are not zero")
        if np.any(blocks.Q3 <= 0):
            raise DisconnectedGraphError("graph numerically disconnected: unobserved landmark")
        self.inv_dp = 1.0 / blocks.Q3
        self.C = blocks.V3[1:].tocsr()
        CD = self.C.multiply(self.inv_dp[None, :]).tocsr()
        self.CD = CD
        S = np.diag(blocks.Q2[1:]) - (CD @ self.C.T).toarray()
        self.S = 0.5 * (S + S.T)
        self.cho = None
        if N > 1:
            scale = max(np.abs(np.diag(self.S)).max(), 1e-300)
            try:
                L = sla.cholesky(self.S, lower=True)
            except np.linalg.LinAlgError:
                raise DisconnectedGraphError("graph numerically disconnected") from None
            pivots = np.diag(L) ** 2
            if pivots.min() < PIVOT_TOL * scale:
                raise DisconnectedGraphError(
                    f"graph numerically disconnected (pivot {pivots.min():.3e}, scale {scale:.3e})"
                )
            self.cho = (L, True)
        self.num_frames, self.num_landmarks = N, M

    def min_pivot(self):
        if self.cho is None:
            return np.inf
        return float(np.diag(self.cho[0]).min() ** 2)

    def solve(self, rhs_t, rhs_p):
        """Solve the anchored system for ``[t_2..t_N; p_1..p_M]``; columns are independent RHS."""
        if self.cho is None:
            tau = np.zeros((0,) + rhs_p.shape[1:])
        else:
            tau = sla.cho_solve(self.cho, rhs_t + self.CD @ rhs_p)
        pi = self.inv_dp.reshape((-1,) + (1,) * (rhs_p.ndim - 1)) * (rhs_p + self.C.T @ tau)
        return tau, pi


def build_laplacian(blocks):
    return LaplacianSystem(blocks)


@dataclass(frozen=True, eq=False)
class DataMatrix:
    Q: np.ndarray
    blocks: MarginalBlocks
    laplacian: LaplacianSystem
    graph: object = None

    @property
    def num_frames(self):
        return self.blocks.num_frames

    @property
    def num_landmarks(self):
        return self.blocks.num_landmarks

    @property
    def norm(self):
        return float(np.linalg.norm(self.Q))

    def recover(self, U):
        return recover_translations_points(self, U)


def build_data_matrix(graph, max_frames=None):
    """Marginalize translations and landmarks of a connected view graph into ``Q``."""
    max_frames = int(os.environ.get("CERTBA_MAX_FRAMES", MAX_FRAMES)) if max_frames is None else max_frames
    if graph.num_frames > max_frames:
        raise ValueError(f"{graph.num_frames} frames exceeds the dense data-matrix cap of {max_frames}")
    require_connected(graph)
    blocks = build_blocks(graph)
    lap = LaplacianSystem(blocks)

    Vp = blocks.V2
    VpD = Vp.multiply(lap.inv_dp[None, :]).tocsr()
    Q = blocks.Q1_dense() - (VpD @ Vp.T).toarray()
    if graph.num_frames > 1:
        G = (-blocks.V1[:, 1:] + VpD @ lap.C.T).toarray()
        Q -= G @ sla.cho_solve(lap.cho, G.T)
    Q = 0.5 * (Q + Q.T)
    return DataMatrix(Q, blocks, lap, graph)


def _as_matrix(U):
    return U.matrix() if hasattr(U, "matrix") else np.asarray(U, dtype=np.float64)


def recover_translations_points(data, U):
    """Optimal translations (``t_1 = 0``) and landmarks for the factor ``U``.

    Works for any factor height ``r``; returns arrays of shape ``(N, r)`` and
    ``(M, r)``.
    """
    U = _as_matrix(U)
    b = data.blocks
    Ut = U.T  # 3N x r
    rhs_t = -(b.V1[:, 1:].T @ Ut)
    rhs_p = b.V2.T @ Ut
    tau, pi = data.laplacian.solve(rhs_t, rhs_p)
    t = np.vstack([np.zeros((1, U.shape[0])), tau])
    return t, pi


def marginal_objective_oracle(graph, U):
    """Minimize the scaled bundle adjustment objective over translations and landmarks.

    Independent of the data matrix: the sparse least-squares problem is
    assembled edge by edge and solved through its normal equations with a
    sparse LU. ``U`` is a factor of any height ``r``.
    """
    U = _as_matrix(U)
    r = U.shape[0]
    N, M, E = graph.num_frames, graph.num_landmarks, graph.num_edges
    sw = np.sqrt(graph.weights)
    blocks = U.T.reshape(N, 3, r)  # blocks[i] = U_i^T
    rotated = np.einsum("eji,ej->ei", blocks[graph.frames], graph.points)  # U_i x
    # unknowns: t_2..t_N then p_1..p_M
    rows, cols, vals = [], [], []
    has_t = graph.frames > 0
    rows.append(np.flatnonzero(has_t))
    cols.append(graph.frames[has_t] - 1)
    vals.append(sw[has_t])
    rows.append(np.arange(E))
    cols.append(N - 1 + graph.landmarks)
    vals.append(-sw)
    J = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(E, N - 1 + M)
    )
    rhs = -sw[:, None] * rotated
    y = spsolve((J.T @ J).tocsc(), J.T @ rhs)
    y = y.reshape(N - 1 + M, r)
    res = J @ y - rhs
    return float(np.sum(res * res))


def dump_matrix_market(data, directory):
    """Write ``Q`` and ``Q_tp`` as Matrix Market files for debugging."""
    from scipy.io import mmwrite

    os.makedirs(directory, exist_ok=True)
    mmwrite(os.path.join(directory, "Q.mtx"), data.Q)
    mmwrite(os.path.join(directory, "Q_tp.mtx"), data.laplacian.Q_tp)
