import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from certba.manifold import FactorPoint, blocks_to_matrix
from certba.pipeline import solve_graph
from certba.recovery import (
    Solution,
    edge_objective,
    enforce_proper_rotations,
    gauge_fix,
    recover_solution,
    round_factor,
)
from certba.reduction import build_data_matrix
from certba.viewgraph import synth_scene


def test_round_factor_passes_rank3_through():
    pt = FactorPoint.random(4, 3, np.random.default_rng(0))
    assert round_factor(pt) is pt


def test_round_factor_recovers_embedded_rank3():
    rng = np.random.default_rng(1)
    pt = FactorPoint.random(5, 3, rng)
    # embed in rank 5 and apply a random orthogonal mixing of the rows
    H = np.linalg.qr(rng.standard_normal((5, 5)))[0]
    U = H @ pt.lifted(5).matrix()
    out = round_factor(FactorPoint.from_matrix(U))
    assert out.rank == 3
    assert np.allclose(out.scales, pt.scales)
    # same Gram matrix means same point up to a global rotation
    assert np.allclose(out.matrix().T @ out.matrix(), pt.matrix().T @ pt.matrix(), atol=1e-10)


def test_round_factor_is_deterministic_under_sign_flips():
    rng = np.random.default_rng(2)
    pt = FactorPoint.random(4, 5, rng)
    U = pt.matrix()
    a = round_factor(FactorPoint.from_matrix(U))
    b = round_factor(FactorPoint.from_matrix(-U))
    assert np.allclose(a.matrix(), b.matrix())


def test_round_factor_rejects_zero_block():
    R = np.zeros((2, 4, 3))
    R[0, :3] = np.eye(3)
    R[1, :3] = np.eye(3)
    pt = FactorPoint(R, np.array([1.0, 1e-14]))
    with pytest.raises(ValueError, match="degenerate"):
        round_factor(FactorPoint.from_matrix(pt.matrix()))
    with pytest.raises(ValueError, match="rank 3"):
        round_factor(pt, rank=4)


def test_gauge_fix_anchors_frame_zero():
    pt = FactorPoint.random(4, 3, np.random.default_rng(3))
    fixed = gauge_fix(pt)
    assert np.allclose(fixed.stiefel[0], np.eye(3))
    assert np.allclose(fixed.matrix().T @ fixed.matrix(), pt.matrix().T @ pt.matrix())


def test_enforce_proper_rotations_counts_flips():
    R = Rotation.random(4, random_state=0).as_matrix()
    R[2] = R[2] @ np.diag([1.0, 1.0, -1.0])
    pt = FactorPoint(np.ascontiguousarray(R), np.ones(4))
    fixed, count = enforce_proper_rotations(pt)
    assert count == 1
    assert np.all(np.linalg.det(fixed.stiefel) > 0)
    assert np.allclose(fixed.stiefel[[0, 1, 3]], R[[0, 1, 3]])


def test_noiseless_recovery_reproduces_ground_truth():
    g, gt = synth_scene(6, 50, seed=5)
    sol = solve_graph(g)
    assert sol.flip_count == 0
    assert np.allclose(sol.rotations, gt.rotations, atol=1e-8)
    assert np.allclose(sol.scales, gt.scales, atol=1e-8)
    assert np.allclose(sol.translations, gt.translations, atol=1e-7)
    assert np.allclose(sol.points, gt.points, atol=1e-7)


def test_objective_forms_agree():
    g, _ = synth_scene(6, 50, noise_eps=0.3, seed=6)
    sol = solve_graph(g)
    assert sol.objective == pytest.approx(sol.info["objective_trace"], rel=1e-9)
    per_edge = edge_objective(g, sol.rotations, sol.scales, sol.translations, sol.points)
    assert sol.objective == pytest.approx(per_edge.sum())


def test_recover_without_graph_uses_trace_form():
    g, _ = synth_scene(4, 30, noise_eps=0.3, seed=7)
    data = build_data_matrix(g)
    bare = type(data)(data.Q, data.blocks, data.laplacian)
    sol = recover_solution(bare, FactorPoint.identity(4))
    U = FactorPoint.identity(4).matrix()
    assert sol.objective == pytest.approx(float(np.vdot(U @ data.Q, U)))


def test_solution_dict_roundtrip():
    g, _ = synth_scene(4, 30, noise_eps=0.3, seed=8)
    sol = solve_graph(g)
    back = Solution.from_dict(sol.to_dict())
    assert np.allclose(back.rotations, sol.rotations)
    assert back.objective == sol.objective
    d = sol.to_dict()
    del d["objective"]
    assert np.isnan(Solution.from_dict(d).objective)
