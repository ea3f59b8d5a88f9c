"""Similarity alignment and trajectory error metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class AlignmentError(ValueError):
    pass


def align_similarity(source, target, weights=None):
    """Weighted closed-form ``(s, R, t)`` minimizing ``sum w |s R x + t - y|^2``.

    Raises :class:`AlignmentError` for fewer than three points or a collinear
    (rank < 2) source cloud.
    """
    X = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    Y = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if X.shape != Y.shape:
        raise ValueError("source and target must have the same shape")
    w = np.ones(len(X)) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(X) < 3 or np.any(w < 0) or w.sum() <= 0:
        raise AlignmentError("alignment degenerate")
    w = w / w.sum()
    mx, my = w @ X, w @ Y
    Xc, Yc = X - mx, Y - my
    var_x = float(w @ np.einsum("ij,ij->i", Xc, Xc))
    sx = np.linalg.svd(np.sqrt(w)[:, None] * Xc, compute_uv=False)
    if var_x <= 0 or sx[1] <= 1e-10 * sx[0]:
        raise AlignmentError("alignment degenerate")
    C = (w[:, None] * Yc).T @ Xc
    Uc, D, Vt = np.linalg.svd(C)
    S = np.ones(3)
    if np.linalg.det(Uc) * np.linalg.det(Vt) < 0:
        S[2] = -1.0
    R = (Uc * S) @ Vt
    s = float((D * S).sum() / var_x)
    t = my - s * R @ mx
    return s, R, t


def rotation_angle(R):
    """Geodesic angle of rotation matrices (radians)."""
    R = np.asarray(R)
    c = (np.trace(R, axis1=-2, axis2=-1) - 1.0) / 2.0
    # the arccos is ill-conditioned near 0; use the skew part for precision
    skew = np.stack([R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]], -1)
    sn = np.linalg.norm(skew, axis=-1) / 2.0
    return np.arctan2(sn, np.clip(c, -1.0, 1.0))


@dataclass
class Metrics:
    ate_t: float
    ate_r: float  # degrees
    rpe_t: float
    rpe_r: float  # degrees
    alignment: tuple
    ate_t_per_frame: np.ndarray
    ate_r_per_frame: np.ndarray
    rpe_t_per_pair: np.ndarray
    rpe_r_per_pair: np.ndarray

    @property
    def ate_r_max(self):
        return float(self.ate_r_per_frame.max())

    @property
    def ate_t_max(self):
        return float(self.ate_t_per_frame.max())

    def to_dict(self, solution=None, solver_seconds=None):
        s, R, t = self.alignment
        out = {
            "ate_t": float(self.ate_t),
            "ate_r_deg": float(self.ate_r),
            "rpe_t": float(self.rpe_t),
            "rpe_r_deg": float(self.rpe_r),
            "ate_t_max": self.ate_t_max,
            "ate_r_max_deg": self.ate_r_max,
            "alignment": {"scale": float(s), "rotation": np.asarray(R).tolist(), "translation": np.asarray(t).tolist()},
        }
        if solution is not None:
            cert = getattr(solution, "certificate", None)
            out["flip_count"] = int(getattr(solution, "flip_count", 0))
            out["eta"] = None if cert is None else float(cert.eta)
            out["min_eig"] = None if cert is None else float(cert.min_eigenvalue)
        if solver_seconds is not None:
            out["solver_seconds"] = float(solver_seconds)
        return out


def compute_metrics(solution, gt):
    """ATE and consecutive-pair RPE after aligning camera centers to ground truth."""
    Re = np.asarray(solution.rotations)
    te = np.asarray(solution.translations)
    Rg = np.asarray(gt.rotations)
    tg = np.asarray(gt.translations)
    if len(Re) != len(Rg):
        raise ValueError("frame count mismatch between solution and ground truth")
    if len(Re) < 3:
        raise AlignmentError("alignment degenerate")
    s, A, b = align_similarity(te, tg)
    Ra = np.einsum("ij,njk->nik", A, Re)
    ta = s * te @ A.T + b
    ate_t = np.linalg.norm(ta - tg, axis=1)
    ate_r = np.degrees(rotation_angle(np.einsum("nji,njk->nik", Ra, Rg)))
    # relative motion of frame i+1 seen from frame i
    rel_Re = np.einsum("nji,njk->nik", Ra[:-1], Ra[1:])
    rel_Rg = np.einsum("nji,njk->nik", Rg[:-1], Rg[1:])
    rel_te = np.einsum("nji,nj->ni", Ra[:-1], ta[1:] - ta[:-1])
    rel_tg = np.einsum("nji,nj->ni", Rg[:-1], tg[1:] - tg[:-1])
    rpe_t = np.linalg.norm(rel_te - rel_tg, axis=1)
    rpe_r = np.degrees(rotation_angle(np.einsum("nji,njk->nik", rel_Re, rel_Rg)))
    return Metrics(
        float(np.median(ate_t)),
        float(np.median(ate_r)),
        float(np.median(rpe_t)),
        float(np.median(rpe_r)),
        (s, A, b),
        ate_t,
        ate_r,
        rpe_t,
        rpe_r,
    )
