import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from certba.metrics import AlignmentError, align_similarity, compute_metrics, rotation_angle
from certba.recovery import Solution
from certba.viewgraph import GroundTruth


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 30), st.floats(0.1, 10.0), st.integers(0, 10_000))
def test_alignment_recovers_similarity(n, scale, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3))
    R = Rotation.random(random_state=rng).as_matrix()
    t = rng.normal(size=3)
    Y = scale * X @ R.T + t
    s, Re, te = align_similarity(X, Y)
    assert s == pytest.approx(scale, rel=1e-8)
    assert np.allclose(Re, R, atol=1e-8)
    assert np.allclose(te, t, atol=1e-7 * max(1.0, scale))


def test_alignment_never_returns_reflection():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(10, 3))
    Y = X * [1, 1, -1]
    _, R, _ = align_similarity(X, Y)
    assert np.linalg.det(R) > 0


@pytest.mark.parametrize(
    "X",
    [np.zeros((2, 3)), np.outer(np.arange(5.0), [1.0, 2.0, 3.0]), np.zeros((4, 3))],
)
def test_alignment_degenerate(X):
    with pytest.raises(AlignmentError, match="degenerate"):
        align_similarity(X, X)


def test_rotation_angle_small_and_large():
    for angle in (1e-9, 0.3, np.pi - 1e-6):
        R = Rotation.from_rotvec([0, 0, angle]).as_matrix()
        assert rotation_angle(R) == pytest.approx(angle, rel=1e-6)


def _trajectory(n, rng):
    R = Rotation.random(n, random_state=rng).as_matrix()
    t = rng.normal(size=(n, 3)) * 3
    return GroundTruth.anchored(R, t, np.ones(n), rng.normal(size=(5, 3)))


def test_metrics_zero_after_similarity():
    rng = np.random.default_rng(1)
    gt = _trajectory(6, rng)
    A = Rotation.random(random_state=rng).as_matrix()
    s, b = 2.5, rng.normal(size=3)
    sol = Solution(
        np.einsum("ij,njk->nik", A, gt.rotations),
        np.ones(6),
        s * gt.translations @ A.T + b,
        gt.points,
        0.0,
    )
    m = compute_metrics(sol, gt)
    assert m.ate_t < 1e-9 and m.ate_r < 1e-6 and m.rpe_t < 1e-9 and m.rpe_r < 1e-6
    assert m.alignment[0] == pytest.approx(1 / s)
    d = m.to_dict(sol, solver_seconds=1.5)
    assert d["solver_seconds"] == 1.5 and d["eta"] is None


def test_metrics_detect_rotation_error():
    rng = np.random.default_rng(2)
    gt = _trajectory(5, rng)
    R = gt.rotations.copy()
    R[3] = R[3] @ Rotation.from_rotvec([0.0, 0.0, np.radians(10)]).as_matrix()
    sol = Solution(R, np.ones(5), gt.translations.copy(), gt.points, 0.0)
    m = compute_metrics(sol, gt)
    assert m.ate_r_max == pytest.approx(10.0, rel=1e-6)
    assert m.ate_t < 1e-9


def test_metrics_frame_mismatch_and_small_n():
    rng = np.random.default_rng(3)
    gt = _trajectory(4, rng)
    sol = Solution(gt.rotations[:3], np.ones(3), gt.translations[:3], gt.points, 0.0)
    with pytest.raises(ValueError, match="mismatch"):
        compute_metrics(sol, gt)
    gt2 = _trajectory(2, rng)
    sol2 = Solution(gt2.rotations, np.ones(2), gt2.translations, gt2.points, 0.0)
    with pytest.raises(AlignmentError):
        compute_metrics(sol2, gt2)
