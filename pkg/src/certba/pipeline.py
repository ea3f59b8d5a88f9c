"""Solve orchestration: filtering, the certified solve, re-solving and regularization."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .metrics import AlignmentError, Metrics, align_similarity, compute_metrics
from .manifold import Problem
from .recovery import Solution, build_solution, edge_residuals, enforce_proper_rotations, gauge_fix, round_factor
from .reduction import build_data_matrix
from .staircase import StaircaseOptions, rtr_minimize, staircase


@dataclass(frozen=True)
class PipelineConfig:
    enable_filter: bool = False
    filter_multiplier: float = 3.0
    enable_xm2: bool = False
    xm2_drop_fraction: float = 0.10
    lambda_reg: float = 0.0
    solver: StaircaseOptions = field(default_factory=StaircaseOptions)
    seed: int | None = None
    init: object = "identity"
    polish: bool = True

    def __post_init__(self):
        if not 0 <= self.xm2_drop_fraction < 1:
            raise ValueError("xm2_drop_fraction must lie in [0, 1)")
        if self.filter_multiplier <= 0:
            raise ValueError("filter_multiplier must be positive")
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be >= 0")

    def to_dict(self):
        tr = self.solver.trust_region
        return {
            "enable_filter": self.enable_filter,
            "filter_multiplier": self.filter_multiplier,
            "enable_xm2": self.enable_xm2,
            "xm2_drop_fraction": self.xm2_drop_fraction,
            "lambda_reg": self.lambda_reg,
            "seed": self.seed,
            "init": self.init if isinstance(self.init, str) else "custom",
            "polish": self.polish,
            "max_rank": self.solver.max_rank,
            "eig_tolerance": self.solver.eig_tolerance,
            "cert_tolerance": self.solver.cert_tolerance,
            "gradient_tolerance": tr.gradient_tolerance,
            "initial_radius": tr.initial_radius,
            "max_radius": tr.max_radius,
            "acceptance_threshold": tr.acceptance_threshold,
            "max_outer_iterations": tr.max_outer_iterations,
            "tcg_max_inner": tr.tcg_max_inner,
            "tcg_kappa": tr.tcg_kappa,
            "tcg_theta": tr.tcg_theta,
        }


def polish_rounded(Q, point, lambda_reg=0.0, opts=None):
    """Local rank-3 descent from a rounded, proper factor.

    Only useful when the relaxed optimum had rank above 3 or needed reflection
    fixes: the rounded point is then feasible but not stationary. Rank-3
    iterates cannot change the sign of a block determinant, so the result
    stays proper. Returns ``(point, cost decrease)``; the input is returned
    unchanged when no decrease was found.
    """
    problem = Problem(Q, lambda_reg)
    out = rtr_minimize(problem, point, opts)
    decrease = -problem.cost_change(point, out.point)
    if not decrease > 0:
        return point, 0.0
    return gauge_fix(out.point), decrease


def solve_graph(graph, config=None, landmark_ids=None, trace=None):
    """Build ``Q``, run the staircase and recover a :class:`Solution`."""
    config = config or PipelineConfig()
    t0 = time.perf_counter()
    data = build_data_matrix(graph)
    t1 = time.perf_counter()
    res = staircase(data.Q, config.solver, seed=config.seed, init=config.init, lambda_reg=config.lambda_reg, trace=trace)
    t2 = time.perf_counter()
    proper, flips = enforce_proper_rotations(gauge_fix(round_factor(res.factor)))
    polish_decrease = 0.0
    if config.polish and (res.factor.rank > 3 or flips):
        proper, polish_decrease = polish_rounded(data.Q, proper, config.lambda_reg, config.solver.trust_region)
        if trace is not None:
            trace({"event": "polish", "decrease": polish_decrease})
    sol = build_solution(data, proper, res.certificate, config.lambda_reg, landmark_ids, flips)
    t3 = time.perf_counter()
    sol.info.update(
        {
            "rank_trajectory": list(res.rank_trajectory),
            "iterations": list(res.iterations),
            "escapes": res.escapes,
            "reseeds": res.reseeds,
            "converged": res.converged,
            "relaxed_objective": res.objective,
            "relaxed_factor": res.factor,
            "polish_decrease": polish_decrease,
            "timings": {"build_q": t1 - t0, "solve": t2 - t1, "recover": t3 - t2},
            "q_norm": data.norm,
            "data": data,
        }
    )
    return sol


def solve_regularized(graph, lambda_reg, config=None, **kwargs):
    """Solve with the scale regularizer ``lambda * sum_{i>=1} (s_i^2 - 1)^2``."""
    config = config or PipelineConfig()
    cfg = PipelineConfig(**{**config.__dict__, "lambda_reg": float(lambda_reg)})
    return solve_graph(graph, cfg, **kwargs)


# --------------------------------------------------------------------------- edge pruning


class _DisjointSet:
    def __init__(self, n):
        self.parent = np.arange(n)

    def find(self, a):
        p = self.parent
        root = a
        while p[root] != root:
            root = p[root]
        while p[a] != root:
            p[a], a = root, p[a]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[rb] = ra
        return True


def restore_connectivity(graph, keep, score):
    """Put removed edges back, lowest ``score`` first, until all frames are connected.

    Restored edges that end up as the only edge of their landmark carry no
    coupling and are removed again. Returns the updated mask.
    """
    keep = np.array(keep, dtype=bool)
    N = graph.num_frames
    f, k = graph.frames, graph.landmarks
    dsu = _DisjointSet(N + graph.num_landmarks)
    for e in np.flatnonzero(keep):
        dsu.union(f[e], N + k[e])

    def frames_connected():
        root = dsu.find(0)
        return all(dsu.find(i) == root for i in range(1, N))

    if frames_connected():
        return keep
    removed = np.flatnonzero(~keep)
    restored = []
    for e in removed[np.argsort(score[removed], kind="stable")]:
        if dsu.union(f[e], N + k[e]):
            keep[e] = True
            restored.append(e)
            if frames_connected():
                break
    deg = np.bincount(k[keep], minlength=graph.num_landmarks)
    for e in restored:
        if deg[k[e]] == 1:
            keep[e] = False
            deg[k[e]] = 0
    return keep


def flag_outliers(residuals, multiplier=3.0, floor=None):
    """``residual > multiplier * median``.

    Without ``floor`` nothing is flagged when the median is ~0 (exact data);
    with it the median is clamped from below to ``floor`` instead.
    """
    residuals = np.asarray(residuals, dtype=np.float64)
    med = float(np.median(residuals))
    if floor is not None:
        med = max(med, floor)
    elif med <= 1e-12:
        return np.zeros(len(residuals), dtype=bool), med
    return residuals > multiplier * med, med


def _pair_fit(xi, xj, w, inliers=None):
    """Register ``xj`` onto ``xi`` and return all residual norms."""
    sel = slice(None) if inliers is None else inliers
    s, R, t = align_similarity(xj[sel], xi[sel], w[sel])
    return np.linalg.norm(s * xj @ R.T + t - xi, axis=1)


def _judge(target, source, w, multiplier, min_shared):
    """Flags and median-normalized residuals of ``target`` points after registration.

    A first registration uses every shared point. When it flags anything, the
    registration is redone on the unflagged points and the flags recomputed;
    the median is then floored at 1e-12 because an exact refit can drive it to
    zero while the outliers stay far away.
    """
    res = _pair_fit(target, source, w)
    flags, med = flag_outliers(res, multiplier)
    if flags.any() and np.count_nonzero(~flags) >= min_shared:
        res = _pair_fit(target, source, w, ~flags)
        flags, med = flag_outliers(res, multiplier, floor=1e-12)
    norm_res = res / med if med > 1e-12 else np.zeros_like(res)
    return flags, norm_res


@dataclass
class FilterReport:
    keep: np.ndarray
    flagged: np.ndarray
    restored: int
    landmark_ids: np.ndarray
    pairs: int
    votes: np.ndarray = None
    seen: np.ndarray = None


def two_view_filter(graph, multiplier=3.0, min_shared=4, return_report=False):
    """Remove edges that disagree with pairwise similarity registrations.

    Every frame pair sharing at least ``min_shared`` landmarks is registered in
    closed form on the shared lifted points, then re-registered on the points
    that pass the ``multiplier x median`` test. Each edge collects one vote per
    pair it takes part in and is removed when more than half of its pairs flag
    it. Connectivity is restored afterwards if needed.
    """
    N, E = graph.num_frames, graph.num_edges
    f, k = graph.frames, graph.landmarks
    index = sp.csr_matrix((np.arange(1, E + 1), (f, k)), shape=(N, graph.num_landmarks))
    vis = (index > 0).astype(np.int64)
    shared = (vis @ vis.T).toarray()
    votes = np.zeros(E)
    seen = np.zeros(E)
    score_sum = np.zeros(E)
    n_pairs = 0
    for i in range(N):
        row_i = index.getrow(i)
        for j in range(i + 1, N):
            if shared[i, j] < min_shared:
                continue
            row_j = index.getrow(j)
            common, ai, aj = np.intersect1d(row_i.indices, row_j.indices, return_indices=True)
            ei = row_i.data[ai] - 1
            ej = row_j.data[aj] - 1
            xi, xj = graph.points[ei], graph.points[ej]
            wi, wj = graph.weights[ei], graph.weights[ej]
            w = wi * wj / (wi + wj)
            try:
                # each edge is judged in its own frame: the registration maps the
                # other frame onto it, so a far outlier never sits on the
                # high-leverage source side of its own test
                judged = [(ei, _judge(xi, xj, w, multiplier, min_shared)), (ej, _judge(xj, xi, w, multiplier, min_shared))]
            except AlignmentError:
                continue
            n_pairs += 1
            for e_idx, (flags, norm_res) in judged:
                seen[e_idx] += 1
                votes[e_idx] += flags
                score_sum[e_idx] += norm_res
    flagged = votes > 0.5 * seen
    keep = ~flagged
    score = np.where(seen > 0, score_sum / np.maximum(seen, 1), 0.0)
    before = keep.copy()
    if np.any(~keep):
        keep = restore_connectivity(graph, keep, score)
    filtered, ids = graph.subgraph(keep)
    if return_report:
        restored = int(np.count_nonzero(keep & ~before))
        return filtered, FilterReport(keep, flagged, restored, ids, n_pairs, votes, seen)
    return filtered


def drop_highest_residuals(graph, residuals, fraction):
    """Mask that drops ``floor(fraction * E)`` highest-residual edges, connectivity restored."""
    E = graph.num_edges
    n_drop = int(np.floor(fraction * E))
    keep = np.ones(E, dtype=bool)
    if n_drop == 0:
        return keep
    order = np.argsort(-np.asarray(residuals), kind="stable")
    keep[order[:n_drop]] = False
    return restore_connectivity(graph, keep, np.asarray(residuals))


def normalized_residuals(graph, sol):
    """Edge residuals divided by ``s_i^2``: the misfit in frame ``i``'s own depth units.

    Raw residuals grow with the frame scale, so after a solve whose scales
    shrank they mostly point at the anchored frame rather than at bad edges.
    """
    return edge_residuals(graph, sol) / sol.scales[graph.frames] ** 2


def xm_squared(graph, config=None, landmark_ids=None, trace=None):
    """Solve, drop the highest-residual edges, rebuild ``Q`` and solve again.

    Edges are ranked by :func:`normalized_residuals`.

    The second :class:`Solution` is returned; the first one is kept in
    ``info["first_solution"]`` and the pruned graph in ``info["graph"]``.
    """
    config = config or PipelineConfig(enable_xm2=True)
    first = solve_graph(graph, config, landmark_ids, trace)
    res = normalized_residuals(graph, first)
    keep = drop_highest_residuals(graph, res, config.xm2_drop_fraction)
    pruned, ids = graph.subgraph(keep)
    ids_global = ids if landmark_ids is None else np.asarray(landmark_ids)[ids]
    second = solve_graph(pruned, config, ids_global, trace)
    second.info["first_solution"] = first
    second.info["graph"] = pruned
    second.info["dropped_edges"] = int(np.count_nonzero(~keep))
    return second


def run_pipeline(graph, config=None, landmark_ids=None, trace=None):
    """Optional filter, then a plain or XM² solve. Returns ``(solution, graph_used)``."""
    config = config or PipelineConfig()
    report = None
    if config.enable_filter:
        graph, report = two_view_filter(graph, config.filter_multiplier, return_report=True)
        landmark_ids = report.landmark_ids if landmark_ids is None else np.asarray(landmark_ids)[report.landmark_ids]
    if config.enable_xm2:
        sol = xm_squared(graph, config, landmark_ids, trace)
        graph = sol.info["graph"]
    else:
        sol = solve_graph(graph, config, landmark_ids, trace)
    if report is not None:
        sol.info["filter"] = {
            "removed": int(np.count_nonzero(~report.keep)),
            "restored": report.restored,
            "pairs": report.pairs,
        }
    return sol, graph


def two_frame_registration(graph):
    """Closed-form optimum of a two-frame problem: ``(scale, rotation, translation)`` of frame 1.

    Only landmarks seen by both frames constrain the pose; their optimal
    landmark is the weighted midpoint, which leaves a similarity registration
    with weights ``w_0 w_1 / (w_0 + w_1)``.
    """
    if graph.num_frames != 2:
        raise ValueError("two_frame_registration needs exactly two frames")
    f, k = graph.frames, graph.landmarks
    e0 = {int(kk): e for e, kk in zip(np.flatnonzero(f == 0), k[f == 0])}
    pairs = [(e0[int(kk)], e) for e, kk in zip(np.flatnonzero(f == 1), k[f == 1]) if int(kk) in e0]
    if len(pairs) < 3:
        raise AlignmentError("alignment degenerate")
    a = np.array([p[0] for p in pairs])
    b = np.array([p[1] for p in pairs])
    w0, w1 = graph.weights[a], graph.weights[b]
    return align_similarity(graph.points[b], graph.points[a], w0 * w1 / (w0 + w1))


__all__ = [
    "FilterReport",
    "Metrics",
    "PipelineConfig",
    "Solution",
    "align_similarity",
    "compute_metrics",
    "drop_highest_residuals",
    "flag_outliers",
    "normalized_residuals",
    "polish_rounded",
    "restore_connectivity",
    "run_pipeline",
    "solve_graph",
    "solve_regularized",
    "two_frame_registration",
    "two_view_filter",
    "xm_squared",
]
