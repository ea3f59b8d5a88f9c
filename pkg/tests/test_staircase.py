import numpy as np
import pytest

from certba.manifold import FactorPoint, Problem
from certba.reduction import build_data_matrix
from certba.staircase import (
    StaircaseOptions,
    TrustRegionOptions,
    escape_direction,
    initial_point,
    reseed_collapsed,
    rtr_minimize,
    staircase,
    with_options,
)
from certba.viewgraph import synth_scene

from scenes import reflected_start


@pytest.fixture(scope="module")
def noisy_q():
    g, _ = synth_scene(10, 100, visibility_prob=0.5, noise_eps=0.3, seed=7)
    return build_data_matrix(g).Q


def test_options_validation():
    with pytest.raises(ValueError):
        TrustRegionOptions(acceptance_threshold=0.5)
    with pytest.raises(ValueError):
        TrustRegionOptions(gradient_tolerance=0.0)
    with pytest.raises(ValueError):
        TrustRegionOptions(initial_radius=-1.0)
    with pytest.raises(ValueError):
        StaircaseOptions(max_rank=2)
    d0, dmax = TrustRegionOptions().radii(12)
    assert d0 == pytest.approx(0.6) and dmax == pytest.approx(6.0)


def test_with_options_routes_fields():
    opts = with_options(StaircaseOptions(), gradient_tolerance=1e-10, max_rank=6)
    assert opts.trust_region.gradient_tolerance == 1e-10 and opts.max_rank == 6


def test_rtr_converges_and_decreases(noisy_q):
    res = rtr_minimize(noisy_q, FactorPoint.identity(10))
    assert res.converged
    assert res.grad_norm <= 1e-8 * np.linalg.norm(noisy_q)
    costs = np.array(res.cost_history)
    assert np.all(np.diff(costs) <= 1e-12 * costs[0])
    assert res.point.feasibility_error() < 1e-10


def test_rtr_local_superlinear_tail():
    g, _ = synth_scene(10, 100, seed=0)
    Q = build_data_matrix(g).Q
    res = rtr_minimize(Q, FactorPoint.identity(10), TrustRegionOptions(gradient_tolerance=1e-12))
    grads = [x for x in res.grad_history if x > 0]
    tail = grads[-4:]
    # each of the last steps shrinks the gradient by far more than a linear rate would
    assert tail[-1] < 1e-3 * tail[-3]


def test_rtr_iteration_budget(noisy_q):
    res = rtr_minimize(noisy_q, FactorPoint.identity(10), TrustRegionOptions(max_outer_iterations=2))
    assert res.iterations == 2 and not res.converged


def test_rtr_trace_records(noisy_q):
    events = []
    rtr_minimize(noisy_q, FactorPoint.identity(10), trace=events.append)
    assert events and {"iter", "cost", "grad_norm", "radius", "rho", "accepted", "tcg_stop"} <= set(events[0])


def test_staircase_noiseless_is_exact():
    g, gt = synth_scene(8, 80, seed=4)
    res = staircase(build_data_matrix(g).Q)
    assert res.certified and res.rank_trajectory == [3]
    assert abs(res.objective) < 1e-12 * (1 + np.linalg.norm(build_data_matrix(g).Q))


def test_reflected_start_escapes(noisy_q):
    events = []
    res = staircase(noisy_q, init=reflected_start(10, frame=3), trace=events.append)
    assert res.rank_trajectory == [3, 4] and res.certified
    assert res.escapes[0]["decrease"] > 0
    kinds = [e["event"] for e in events]
    assert kinds.index("escape") > kinds.index("certificate")
    plain = staircase(noisy_q)
    assert res.objective == pytest.approx(plain.objective, rel=1e-8)


def test_max_rank_cap_leaves_uncertified(noisy_q):
    res = staircase(noisy_q, StaircaseOptions(max_rank=3), init=reflected_start(10, frame=3))
    assert not res.certified and res.rank_trajectory == [3]
    assert res.certificate.min_eigenvalue < 0


def test_escape_direction_requires_negative_eigenvalue(noisy_q):
    pt = FactorPoint.identity(10)
    with pytest.raises(ValueError):
        escape_direction(noisy_q, pt, np.ones(30), 0.0)


def test_escape_direction_decreases(noisy_q):
    from certba.certificate import certify

    stuck = rtr_minimize(noisy_q, reflected_start(10, frame=3)).point
    cert = certify(noisy_q, stuck)
    assert cert.min_eigenvalue < 0
    new, alpha, dec = escape_direction(noisy_q, stuck, cert.min_eigenvector, cert.min_eigenvalue)
    assert new.rank == 4 and dec > 0 and 0 < alpha <= 1
    assert new.feasibility_error() < 1e-10
    assert Problem(noisy_q).cost(new) < Problem(noisy_q).cost(stuck)


def test_random_inits_agree(noisy_q):
    objs = [staircase(noisy_q, seed=s, init="random").objective for s in range(5)]
    assert max(objs) - min(objs) <= 1e-6 * min(objs)


def test_initial_point_variants():
    assert initial_point(3).rank == 3
    assert initial_point(3, "random", seed=1).scales[0] == 1.0
    pt = FactorPoint.identity(3)
    assert initial_point(3, pt) is pt
    with pytest.raises(ValueError):
        initial_point(3, "bogus")


def test_reseed_turns_a_collapsed_frame_around(noisy_q):
    prob = Problem(noisy_q)
    good = staircase(noisy_q).factor
    R = good.stiefel.copy()
    s = good.scales.copy()
    R[4] = -R[4]
    s[4] = 1e-9
    bad = FactorPoint(R, s)
    new, frames = reseed_collapsed(prob, bad)
    assert frames == [4]
    assert prob.cost(new) < prob.cost(bad)
    assert new.scales[4] > 1e-3
    untouched, none = reseed_collapsed(prob, good)
    assert none == [] and untouched is good


def test_reseed_with_regularizer(noisy_q):
    prob = Problem(noisy_q, 2.0)
    pt = FactorPoint.identity(10)
    s = pt.scales.copy()
    s[2] = 1e-12
    new, frames = reseed_collapsed(prob, FactorPoint(pt.stiefel, s))
    assert frames == [2]
    # the new scale minimizes the cost along frame 2's scale
    base = prob.cost(new)
    for factor in (0.9, 0.99, 1.01, 1.1):
        s2 = new.scales.copy()
        s2[2] *= factor
        assert prob.cost(FactorPoint(new.stiefel, s2)) >= base
