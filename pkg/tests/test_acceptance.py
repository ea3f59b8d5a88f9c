"""Acceptance criteria, one test per criterion.

Each test records a single ``PASS``/``FAIL``/``SKIP`` line (printed directly
and repeated in the pytest terminal summary) before asserting. Run the file
as a script to see only those lines::

    python3 tests/test_acceptance.py
"""

import math
import os
import time

import numpy as np
import pytest

from certba.certificate import ConstraintFamily, certify, licq_rank, z_matrix
from certba.manifold import FactorPoint, Problem, retract
from certba.metrics import compute_metrics, rotation_angle
from certba.pipeline import PipelineConfig, solve_graph, solve_regularized, two_frame_registration
from certba.reduction import build_data_matrix, marginal_objective_oracle
from certba.staircase import StaircaseOptions, TrustRegionOptions
from certba.viewgraph import lift_with_ground_truth, read_bal, synth_scene

from conftest import ACCEPTANCE_LINES
from scenes import collapse_scene, reflected_start


def report(number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


# ---------------------------------------------------------------------------
# 1. marginalization equivalence


def test_criterion_1_marginalization():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for scene in range(20):
        n = int(rng.integers(2, 11))
        m = int(rng.integers(5, 51))
        graph, _ = synth_scene(n, m, visibility_prob=0.5, noise_eps=0.3, seed=scene)
        Q = build_data_matrix(graph).Q
        for _ in range(20):
            pt = FactorPoint.random(n, 3, rng)
            U = pt.matrix()
            a = float(np.vdot(U @ Q, U))
            b = marginal_objective_oracle(graph, U)
            worst = max(worst, abs(a - b) / max(abs(b), 1e-300))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-8 and elapsed < 10.0
    report(1, ok, f"max relative gap {worst:.2e} (<= 1e-8), {elapsed:.2f}s (< 10s)")
    assert ok


# ---------------------------------------------------------------------------
# 2. tightness on noiseless data


def test_criterion_2_noiseless_tightness():
    graph, gt = synth_scene(50, 500, visibility_prob=0.3, noise_eps=0.0, seed=2)
    t0 = time.perf_counter()
    sol = solve_graph(graph)
    elapsed = time.perf_counter() - t0
    cert = sol.certificate
    m = compute_metrics(sol, gt)
    ranks = sol.info["rank_trajectory"]
    ok = (
        ranks[-1] == 3
        and cert.eta <= 1e-6
        and cert.min_eigenvalue >= -1e-6 * cert.q_norm
        and m.ate_t <= 1e-6
        and m.ate_r <= 1e-4
        and elapsed < 60.0
    )
    report(
        2,
        ok,
        f"ranks {ranks}, eta {cert.eta:.1e}, lambda_min/|Q| {cert.min_eigenvalue / cert.q_norm:.1e}, "
        f"ATE-T {m.ate_t:.1e}, ATE-R {m.ate_r:.1e} deg, {elapsed:.2f}s",
    )
    assert ok


# ---------------------------------------------------------------------------
# 3. two-frame closed form


def test_criterion_3_two_frame_oracle():
    # small noise keeps the two-frame problem inside the regime where the
    # relaxation over O(3) is tight; see the decisions ledger
    tr = TrustRegionOptions(gradient_tolerance=1e-10)
    config = PipelineConfig(solver=StaircaseOptions(trust_region=tr))
    worst_rot = worst_scale = 0.0
    for seed in range(50):
        graph, _ = synth_scene(2, 30, visibility_prob=0.8, noise_eps=0.05, seed=seed)
        sol = solve_graph(graph, config)
        s, R, _ = two_frame_registration(graph)
        worst_rot = max(worst_rot, float(rotation_angle(R.T @ sol.rotations[1])))
        worst_scale = max(worst_scale, abs(sol.scales[1] - s) / s)
    ok = worst_rot <= 1e-6 and worst_scale <= 1e-8
    report(3, ok, f"50 scenes, max rotation error {worst_rot:.1e} rad (<= 1e-6), max scale error {worst_scale:.1e} (<= 1e-8)")
    assert ok


# ---------------------------------------------------------------------------
# 4. gradient and Hessian


def _random_tangent(problem, pt, rng):
    xi = problem.rgrad(pt, rng.standard_normal(pt.stiefel.shape))
    return xi / np.linalg.norm(xi)


def test_criterion_4_derivatives():
    graph, _ = synth_scene(6, 60, visibility_prob=0.6, noise_eps=0.3, seed=4)
    Q = build_data_matrix(graph).Q
    rng = np.random.default_rng(4)
    worst_g = worst_h = worst_sym = 0.0
    for trial in range(10):
        rank = (3, 4, 5)[trial % 3]
        lam = 0.0 if trial % 2 == 0 else 0.5
        problem = Problem(Q, lam)
        pt = FactorPoint.random(graph.num_frames, rank, rng)
        xi = _random_tangent(problem, pt, rng)
        eta = _random_tangent(problem, pt, rng)
        G = problem.egrad(pt)
        g = problem.rgrad(pt, G)

        h = 1e-5
        fd = (problem.cost_change(retract(pt, -h * xi), retract(pt, h * xi))) / (2 * h)
        exact = float(np.vdot(g, xi))
        worst_g = max(worst_g, abs(fd - exact) / max(abs(exact), np.linalg.norm(g)))

        h = 1e-5
        gp = problem.rgrad(retract(pt, h * xi))
        gm = problem.rgrad(retract(pt, -h * xi))
        diff = problem.rgrad(pt, (gp - gm) / (2 * h))  # transport by projection
        Hxi = problem.hess(pt, xi, G)
        worst_h = max(worst_h, np.linalg.norm(diff - Hxi) / np.linalg.norm(Hxi))

        Heta = problem.hess(pt, eta, G)
        a, b = float(np.vdot(Hxi, eta)), float(np.vdot(xi, Heta))
        worst_sym = max(worst_sym, abs(a - b) / (np.linalg.norm(Hxi) * np.linalg.norm(eta)))
    ok = worst_g <= 1e-5 and worst_h <= 1e-4 and worst_sym <= 1e-10
    report(4, ok, f"gradient {worst_g:.1e} (<= 1e-5), Hessian {worst_h:.1e} (<= 1e-4), symmetry {worst_sym:.1e} (<= 1e-10)")
    assert ok


# ---------------------------------------------------------------------------
# 5. certificate machinery


def test_criterion_5_certificate_machinery():
    rng = np.random.default_rng(5)
    ranks_ok = True
    for n in range(2, 7):
        for _ in range(5):
            pt = FactorPoint.random(n, 3, rng)
            rank, _ = licq_rank(pt)
            ranks_ok &= rank == ConstraintFamily(n).m
    worst_kkt = 0.0
    certified = True
    for seed in range(5):
        graph, _ = synth_scene(6, 60, visibility_prob=0.6, noise_eps=0.3, seed=50 + seed)
        sol = solve_graph(graph)
        data = sol.info["data"]
        # the certified optimum is the relaxed factor, before rounding
        point = sol.info["relaxed_factor"]
        cert = certify(data.Q, point)
        certified &= cert.certified
        U = point.matrix()
        Z = z_matrix(data.Q, cert.y, 0.0, point.scales**2)
        worst_kkt = max(worst_kkt, np.linalg.norm(Z @ U.T) / np.linalg.norm(data.Q))
    ok = ranks_ok and certified and worst_kkt <= 1e-8
    report(5, ok, f"constraint rank 5N+1 at all points: {ranks_ok}, all certified: {certified}, max |Z U^T|/|Q| {worst_kkt:.1e} (<= 1e-8)")
    assert ok


# ---------------------------------------------------------------------------
# 6. initialization-freeness


def test_criterion_6_random_initializations():
    graph, _ = synth_scene(20, 200, visibility_prob=0.5, noise_eps=0.5, seed=6)
    t0 = time.perf_counter()
    relaxed, rounded, n_cert = [], [], 0
    for seed in range(100):
        sol = solve_graph(graph, PipelineConfig(init="random", seed=seed))
        n_cert += sol.certified
        relaxed.append(sol.info["relaxed_objective"])
        rounded.append(sol.objective)
    elapsed = time.perf_counter() - t0
    relaxed, rounded = np.array(relaxed), np.array(rounded)
    spread = float((relaxed.max() - relaxed.min()) / relaxed.min())
    # this scene's certified optimum has rank 4, so the rounded objective is
    # checked too: it relies on the rank-3 polish to be start independent
    spread_rounded = float((rounded.max() - rounded.min()) / rounded.min())
    ok = n_cert == 100 and spread <= 1e-6 and spread_rounded <= 1e-6 and elapsed < 300
    report(
        6,
        ok,
        f"{n_cert}/100 certified, certified objective spread {spread:.1e} (<= 1e-6), "
        f"rounded spread {spread_rounded:.1e} (<= 1e-6), {elapsed:.1f}s (< 300s)",
    )
    assert ok


# ---------------------------------------------------------------------------
# 7. rank-lift escape


def test_criterion_7_rank_lift():
    graph, _ = synth_scene(10, 100, visibility_prob=0.5, noise_eps=0.3, seed=7)
    events = []
    sol = solve_graph(graph, PipelineConfig(init=reflected_start(10, frame=3)), trace=events.append)
    certs = [e for e in events if e["event"] == "certificate"]
    escapes = [e for e in events if e["event"] == "escape"]
    reference = solve_graph(graph)
    stalled = len(certs) >= 2 and certs[0]["rank"] == 3 and not certs[0]["certified"] and certs[0]["min_eig"] < 0
    ranks = sol.info["rank_trajectory"]
    decreased = bool(escapes) and all(e["decrease"] > 0 for e in escapes)
    a, b = sol.info["relaxed_objective"], reference.info["relaxed_objective"]
    same = abs(a - b) <= 1e-6 * abs(b)
    ok = stalled and ranks == [3, 4] and sol.certified and decreased and same
    detail = (
        f"rank-3 stall uncertified (min eig {certs[0]['min_eig']:.2e}): {stalled}, ranks {ranks}, "
        f"certified {sol.certified}, escape decrease {escapes[0]['decrease'] if escapes else float('nan'):.2e}, "
        f"matches identity start: {same}"
    )
    report(7, ok, detail)
    assert ok


# ---------------------------------------------------------------------------
# 8. noise robustness


def test_criterion_8_noise_robustness():
    medians, worst_eta = [], []
    for eps in (0.0, 0.25, 0.5, 1.0):
        ates, etas = [], []
        for seed in range(5):
            graph, gt = synth_scene(20, 200, visibility_prob=0.5, noise_eps=eps, seed=seed)
            sol = solve_graph(graph)
            ates.append(compute_metrics(sol, gt).ate_t)
            etas.append(sol.certificate.eta)
        medians.append(float(np.median(ates)))
        worst_eta.append(max(etas))
    monotone = all(b >= a for a, b in zip(medians, medians[1:]))
    tight = max(worst_eta) <= 1e-3
    ok = monotone and tight
    pretty = ", ".join(f"{m:.3g}" for m in medians)
    report(8, ok, f"median ATE-T [{pretty}] nondecreasing: {monotone}, max eta {max(worst_eta):.1e} (<= 1e-3)")
    assert ok


# ---------------------------------------------------------------------------
# 9. scale regularization


def test_criterion_9_scale_regularization():
    graph, _ = synth_scene(10, 100, visibility_prob=0.5, noise_eps=0.3, seed=9)
    plain = solve_graph(graph)
    zero = solve_regularized(graph, 0.0)
    identical = (
        np.array_equal(plain.rotations, zero.rotations)
        and np.array_equal(plain.scales, zero.scales)
        and plain.objective == zero.objective
    )

    g = collapse_scene(seed=0)
    s0 = solve_graph(g)
    s1 = solve_regularized(g, 1.0)
    min0, min1 = float(s0.scales[1:].min()), float(s1.scales[1:].min())

    bounds_ok = True
    for lam in (0.0, 0.1, 1.0, 10.0):
        for sol in (solve_regularized(g, lam), solve_regularized(graph, lam)):
            c = sol.certificate
            bounds_ok &= c.rho_lower <= c.rho_hat
    ok = identical and min1 >= 0.5 and min0 < 0.1 and bounds_ok
    report(
        9,
        ok,
        f"lambda=0 identical to plain solve: {identical}, collapse min s {min0:.3f} (< 0.1) vs {min1:.3f} with lambda=1 (>= 0.5), "
        f"rho_lower <= rho_hat: {bounds_ok}",
    )
    assert ok


# ---------------------------------------------------------------------------
# 10. optional dataset check

BAL93 = os.environ.get("CERTBA_BAL93")


def test_criterion_10_bal93():
    if not BAL93 or not os.path.exists(BAL93):
        line = "SKIP criterion 10: set CERTBA_BAL93 to a local copy of the 93-camera BAL problem"
        ACCEPTANCE_LINES.append(line)
        print(line)
        pytest.skip("BAL-93 instance not available")
    pixels = os.environ.get("CERTBA_BAL93_PIXELS", "1") not in ("", "0")
    graph2d, gt = read_bal(BAL93, pixel_coordinates=pixels)
    graph, gt, _ = lift_with_ground_truth(graph2d, gt)
    t0 = time.perf_counter()
    sol = solve_graph(graph)
    elapsed = time.perf_counter() - t0
    m = compute_metrics(sol, gt)
    eta = sol.certificate.eta
    ok = eta <= 1e-3 and m.ate_t <= 1e-2 and m.ate_r <= 0.1 and elapsed < 10.0
    report(
        10,
        ok,
        f"N={graph.num_frames} M={graph.num_landmarks} eta {eta:.1e}, ATE-T {m.ate_t:.1e}, ATE-R {m.ate_r:.1e} deg, {elapsed:.2f}s",
    )
    assert ok


if __name__ == "__main__":
    for name, fn in sorted(globals().items()):
        if name.startswith("test_criterion_"):
            try:
                fn()
            except AssertionError:
                pass
            except pytest.skip.Exception:
                pass
