"""From a relaxed factor to camera poses, scales and landmarks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .manifold import FactorPoint, blocks_to_matrix, matrix_to_blocks
from .reduction import recover_translations_points

DEGENERATE_NORM = 1e-12


@dataclass(eq=False)
class Solution:
    rotations: np.ndarray  # (N, 3, 3), camera-to-world
    scales: np.ndarray  # (N,)
    translations: np.ndarray  # (N, 3)
    points: np.ndarray  # (M, 3)
    objective: float
    certificate: object = None
    flip_count: int = 0
    landmark_ids: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    @property
    def num_frames(self):
        return len(self.rotations)

    @property
    def num_landmarks(self):
        return len(self.points)

    @property
    def certified(self):
        return bool(self.certificate is not None and self.certificate.certified)

    def factor(self):
        return FactorPoint(np.ascontiguousarray(self.rotations), np.asarray(self.scales, dtype=float))

    def to_dict(self):
        out = {
            "rotations": self.rotations.tolist(),
            "scales": self.scales.tolist(),
            "translations": self.translations.tolist(),
            "points": self.points.tolist(),
            "objective": float(self.objective),
            "flip_count": int(self.flip_count),
        }
        if self.landmark_ids is not None:
            out["landmark_ids"] = [int(i) for i in self.landmark_ids]
        return out

    @classmethod
    def from_dict(cls, data):
        ids = data.get("landmark_ids")
        return cls(
            np.asarray(data["rotations"], dtype=float).reshape(-1, 3, 3),
            np.asarray(data["scales"], dtype=float),
            np.asarray(data["translations"], dtype=float).reshape(-1, 3),
            np.asarray(data["points"], dtype=float).reshape(-1, 3),
            float(data.get("objective", np.nan)),
            flip_count=int(data.get("flip_count", 0)),
            landmark_ids=None if ids is None else np.asarray(ids, dtype=np.int64),
        )


def _polar(M):
    W, _, Vt = np.linalg.svd(M)
    return np.einsum("nij,njk->nik", W, Vt)


def round_factor(point, rank=3):
    """Best rank-3 approximation of ``U`` projected block-wise onto scaled ``O(3)``.

    A rank-3 point passes through unchanged. Otherwise the top three singular
    triplets give a ``3 x 3N`` matrix whose blocks are split into a scale
    ``|B|_F / sqrt(3)`` and the polar factor of ``B``. Scales are then divided
    by the first frame's scale so the anchor ``s_0 = 1`` holds.
    """
    if rank != 3:
        raise ValueError("only rounding to rank 3 is supported")
    if point.rank == 3:
        return point
    U = point.matrix()
    W, sv, Vt = np.linalg.svd(U, full_matrices=False)
    # deterministic sign: largest entry of each right singular vector positive
    idx = np.argmax(np.abs(Vt[:3]), axis=1)
    sign = np.sign(Vt[np.arange(3), idx])
    sign[sign == 0] = 1.0
    U3 = (sv[:3, None] * Vt[:3]) * sign[:, None]
    B = matrix_to_blocks(U3)
    s = np.linalg.norm(B, axis=(1, 2)) / np.sqrt(3.0)
    if np.any(s < DEGENERATE_NORM):
        raise ValueError("degenerate block")
    R = _polar(B)
    return FactorPoint(np.ascontiguousarray(R), s / s[0])


def gauge_fix(point):
    """Rotate every block by ``R_0^T`` so that frame 0's block becomes the identity."""
    if point.rank != 3:
        raise ValueError("gauge fixing needs a rank-3 factor (round first)")
    G = point.stiefel[0].T
    R = np.einsum("ij,njk->nik", G, point.stiefel)
    R[0] = np.eye(3)
    return FactorPoint(np.ascontiguousarray(R), point.scales.copy())


def enforce_proper_rotations(point):
    """Replace reflected blocks by a nearest proper rotation. Returns ``(point, flip_count)``."""
    R = point.stiefel.copy()
    det = np.linalg.det(R)
    flips = np.flatnonzero(det < 0)
    for i in flips:
        W, _, Vt = np.linalg.svd(R[i])
        W[:, -1] *= -1.0
        R[i] = W @ Vt
    return FactorPoint(np.ascontiguousarray(R), point.scales.copy()), int(len(flips))


def edge_objective(graph, rotations, scales, translations, points):
    """Per-edge ``w |s R u + t - p|^2``."""
    f, k = graph.frames, graph.landmarks
    pred = scales[f, None] * np.einsum("nij,nj->ni", rotations[f], graph.points) + translations[f]
    diff = pred - points[k]
    return graph.weights * np.einsum("ni,ni->n", diff, diff)


def edge_residuals(graph, sol):
    return edge_objective(graph, sol.rotations, sol.scales, sol.translations, sol.points)


def build_solution(data, point, certificate=None, lambda_reg=0.0, landmark_ids=None, flip_count=0):
    """Recover translations and landmarks for a rank-3 factor and evaluate the objective.

    ``point`` should already be rounded, gauge fixed and proper. The objective is
    summed over the edges; the trace form ``tr(Q U^T U)`` is kept in ``info``
    for cross-checking. When a certificate is given it receives the rounded
    objective (plus the scale regularizer when ``lambda_reg > 0``).
    """
    if point.rank != 3:
        raise ValueError("build_solution needs a rank-3 factor")
    R, s = point.stiefel, point.scales
    t, p = recover_translations_points(data, point)
    U = point.matrix()
    trace_obj = float(np.vdot(U @ data.Q, U))
    if data.graph is not None:
        objective = float(edge_objective(data.graph, R, s, t, p).sum())
    else:
        objective = trace_obj
    info = {"objective_trace": trace_obj}
    if certificate is not None:
        rho_hat = objective
        if lambda_reg:
            rho_hat += lambda_reg * float(np.sum((s[1:] ** 2 - 1.0) ** 2))
        certificate = certificate.with_rounded(rho_hat)
    return Solution(
        np.ascontiguousarray(R),
        s.copy(),
        t,
        p,
        objective,
        certificate,
        flip_count,
        landmark_ids,
        info,
    )


def recover_solution(data, point, certificate=None, lambda_reg=0.0, landmark_ids=None):
    """Round, gauge fix, fix reflections and build the :class:`Solution`."""
    rounded = gauge_fix(round_factor(point))
    proper, flips = enforce_proper_rotations(rounded)
    return build_solution(data, proper, certificate, lambda_reg, landmark_ids, flips)


__all__ = [
    "Solution",
    "blocks_to_matrix",
    "build_solution",
    "edge_objective",
    "edge_residuals",
    "enforce_proper_rotations",
    "gauge_fix",
    "recover_solution",
    "round_factor",
]
