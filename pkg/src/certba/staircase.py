"""Riemannian trust-region solver and the rank staircase around it."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .certificate import Certificate, certify
from .manifold import FactorPoint, Problem, blocks_to_matrix, retract


@dataclass(frozen=True)
class TrustRegionOptions:
    """Trust-region parameters. ``None`` radii are sized from the problem."""

    initial_radius: float | None = None
    max_radius: float | None = None
    acceptance_threshold: float = 0.1
    max_outer_iterations: int = 1000
    gradient_tolerance: float = 1e-8  # relative to max(1, |Q|_F)
    tcg_max_inner: int | None = None
    tcg_kappa: float = 0.1
    tcg_theta: float = 1.0

    def __post_init__(self):
        if not 0 < self.acceptance_threshold <= 0.25:
            raise ValueError("acceptance_threshold must lie in (0, 1/4]")
        for name in ("gradient_tolerance", "tcg_kappa", "tcg_theta"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("initial_radius", "max_radius", "tcg_max_inner"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_outer_iterations < 1:
            raise ValueError("max_outer_iterations must be positive")

    def radii(self, num_frames):
        d0 = self.initial_radius if self.initial_radius is not None else 0.1 * math.sqrt(3 * num_frames)
        dmax = self.max_radius if self.max_radius is not None else 10.0 * d0
        return d0, max(dmax, d0)


@dataclass
class RTRResult:
    point: FactorPoint
    cost: float
    grad_norm: float
    iterations: int
    converged: bool
    grad_history: list = field(default_factory=list)
    cost_history: list = field(default_factory=list)
    inner_iterations: int = 0


def _inner(a, b):
    return float(np.vdot(a, b))


def _tcg(problem, x, egrad, grad, radius, opts, scale):
    """Steihaug-Toint truncated CG on the trust-region subproblem."""
    max_inner = opts.tcg_max_inner
    if max_inner is None:
        max_inner = min(500, grad.size)
    eta = np.zeros_like(grad)
    Heta = np.zeros_like(grad)
    r = grad
    r_r = _inner(r, r)
    norm_r0 = math.sqrt(r_r)
    delta = -r
    e_Pe, e_Pd, d_Pd = 0.0, 0.0, r_r
    model = 0.0
    stop = "max_inner"
    j = 0
    # relative residual target; gradients are normalized by the data scale
    target = norm_r0 * min((norm_r0 / scale) ** opts.tcg_theta, opts.tcg_kappa)
    for j in range(1, max_inner + 1):
        Hd = problem.hess(x, delta, egrad)
        d_Hd = _inner(delta, Hd)
        alpha = r_r / d_Hd if d_Hd != 0 else math.inf
        e_Pe_new = e_Pe + 2.0 * alpha * e_Pd + alpha * alpha * d_Pd
        if d_Hd <= 0 or e_Pe_new >= radius * radius:
            tau = (-e_Pd + math.sqrt(max(e_Pd * e_Pd + d_Pd * (radius * radius - e_Pe), 0.0))) / d_Pd
            eta = eta + tau * delta
            Heta = Heta + tau * Hd
            stop = "negative_curvature" if d_Hd <= 0 else "boundary"
            break
        e_Pe = e_Pe_new
        new_eta = eta + alpha * delta
        new_Heta = Heta + alpha * Hd
        new_model = _inner(new_eta, grad) + 0.5 * _inner(new_eta, new_Heta)
        if new_model >= model:
            stop = "model_increase"
            break
        eta, Heta, model = new_eta, new_Heta, new_model
        r = r + alpha * Hd
        r_r_old, r_r = r_r, _inner(r, r)
        if math.sqrt(r_r) <= target:
            stop = "converged"
            break
        beta = r_r / r_r_old
        delta = problem.rgrad(x, -r + beta * delta)  # projection keeps drift out
        e_Pd = beta * (e_Pd + alpha * d_Pd)
        d_Pd = r_r + beta * beta * d_Pd
    return eta, Heta, j, stop


def rtr_minimize(problem, start, opts=None, trace=None, rank_tag=None):
    """Minimize ``problem`` from ``start`` with RTR-tCG.

    Returns an :class:`RTRResult`; ``converged`` is false when the iteration
    budget ran out or the trust region collapsed before the gradient
    tolerance was met (the best point is returned either way).
    """
    if not isinstance(problem, Problem):
        problem = Problem(problem)
    opts = opts or TrustRegionOptions()
    start.check()
    scale = max(1.0, float(np.linalg.norm(problem.Q)))
    tol = opts.gradient_tolerance * scale
    radius, max_radius = opts.radii(start.num_frames)
    min_radius = radius * 1e-14

    x = start
    fx = problem.cost(x)
    G = problem.egrad(x)
    g = problem.rgrad(x, G)
    gn = math.sqrt(_inner(g, g))
    grads, costs = [gn], [fx]
    converged = gn <= tol
    k = 0
    inner_total = 0
    while not converged and k < opts.max_outer_iterations:
        k += 1
        eta, Heta, n_inner, stop = _tcg(problem, x, G, g, radius, opts, scale)
        inner_total += n_inner
        try:
            with np.errstate(over="ignore"):
                x_new = retract(x, eta, 1.0)
            if np.all(np.isfinite(x_new.scales)) and np.all(x_new.scales > 0):
                change = problem.cost_change(x, x_new)
            else:
                x_new, change = None, math.inf
        except FloatingPointError:
            x_new, change = None, math.inf
        model_decrease = -_inner(g, eta) - 0.5 * _inner(eta, Heta)
        reg = 1e3 * np.finfo(float).eps * max(1.0, abs(fx))
        rho = (-change + reg) / (model_decrease + reg) if math.isfinite(change) else -math.inf
        model_ok = model_decrease >= 0
        if rho < 0.25 or not model_ok:
            radius *= 0.25
        elif rho > 0.75 and stop in ("negative_curvature", "boundary"):
            radius = min(2.0 * radius, max_radius)
        accepted = bool(model_ok and rho > opts.acceptance_threshold)
        if accepted:
            x = x_new
            fx = problem.cost(x)
            G = problem.egrad(x)
            g = problem.rgrad(x, G)
            gn = math.sqrt(_inner(g, g))
        grads.append(gn)
        costs.append(fx)
        if trace is not None:
            trace(
                {
                    "event": "iter",
                    "rank": x.rank if rank_tag is None else rank_tag,
                    "iter": k,
                    "cost": fx,
                    "grad_norm": gn,
                    "radius": radius,
                    "rho": float(rho) if math.isfinite(rho) else None,
                    "accepted": accepted,
                    "tcg_inner": n_inner,
                    "tcg_stop": stop,
                }
            )
        converged = gn <= tol
        if radius < min_radius:
            break
    return RTRResult(x, fx, gn, k, converged, grads, costs, inner_total)


def _polar_blocks(B):
    """Per-block nearest scaled Stiefel point: ``(R, s)`` with ``s = sum(sv)/3``."""
    W, sv, Vt = np.linalg.svd(B, full_matrices=False)
    R = np.einsum("nij,njk->nik", W, Vt)
    s = sv.sum(axis=1) / 3.0
    s[0] = 1.0
    return np.ascontiguousarray(R), s


def escape_direction(problem, point, v, eigenvalue, alpha=1.0, max_halvings=60):
    """Lift a rank-``r`` critical point along the least eigenvector ``v`` of ``Z``.

    The row ``alpha * v^T`` is appended to ``U``, the blocks are projected back
    onto the scaled Stiefel product, and ``alpha`` is halved until the cost
    decreases. Returns ``(point_{r+1}, alpha, decrease)``.
    """
    if not isinstance(problem, Problem):
        problem = Problem(problem)
    if not eigenvalue < 0:
        raise ValueError("escape requires a negative eigenvalue")
    v = np.asarray(v, dtype=np.float64)
    v = v / np.linalg.norm(v)
    N = point.num_frames
    base = point.lifted(point.rank + 1)
    B0 = base.blocks()
    row = v.reshape(N, 3)
    for _ in range(max_halvings + 1):
        B = B0.copy()
        B[:, -1, :] = alpha * row
        R, s = _polar_blocks(B)
        cand = FactorPoint(R, s)
        change = problem.cost_change(base, cand)
        if change < 0:
            return cand, alpha, -change
        alpha *= 0.5
    raise RuntimeError("escape failed: no decrease after line search")


def _best_scale(a, b, lambda_reg):
    """Minimizer over ``s > 0`` of ``a s^2 - b s + lambda (s^2 - 1)^2`` (``a, b > 0``)."""
    if not lambda_reg:
        return b / (2.0 * a)
    roots = np.roots([4.0 * lambda_reg, 0.0, 2.0 * a - 4.0 * lambda_reg, -b])
    roots = roots[np.abs(roots.imag) < 1e-10].real
    roots = roots[roots > 0]
    f = a * roots**2 - b * roots + lambda_reg * (roots**2 - 1.0) ** 2
    return float(roots[np.argmin(f)])


def reseed_collapsed(problem, point, threshold=1e-6):
    """Re-solve the blocks of frames whose scale collapsed, one frame at a time.

    With the other frames fixed, frame ``i`` contributes
    ``s^2 tr(Q_ii) + 2 s <R, C_i>`` with ``C_i = sum_{j != i} U_j Q_ji``. Once
    ``<R, C_i> > 0`` the scale only shrinks, and near ``s = 0`` the search
    space is too curved for the trust region to turn the block around. The
    exact block minimizer ``R = -polar(C_i)`` with the matching scale replaces
    it. Returns ``(point, frames)``; ``frames`` is empty when nothing changed.
    """
    scales = point.scales
    idx = [i for i in range(1, point.num_frames) if scales[i] < threshold]
    if not idx:
        return point, []
    R = point.stiefel.copy()
    s = scales.copy()
    Q = problem.Q
    changed = []
    for i in idx:
        B = R * s[:, None, None]
        B[i] = 0.0
        C = blocks_to_matrix(B) @ Q[:, 3 * i : 3 * i + 3]
        W, sv, Vt = np.linalg.svd(C, full_matrices=False)
        a = float(np.trace(Q[3 * i : 3 * i + 3, 3 * i : 3 * i + 3]))
        if sv.sum() <= 0 or a <= 0:
            continue
        R[i] = -(W @ Vt)
        s[i] = _best_scale(a, 2.0 * sv.sum(), problem.lambda_reg)
        changed.append(i)
    if not changed:
        return point, []
    cand = FactorPoint(np.ascontiguousarray(R), s)
    if not problem.cost_change(point, cand) < 0:
        return point, []
    return cand, changed


@dataclass(frozen=True)
class StaircaseOptions:
    trust_region: TrustRegionOptions = field(default_factory=TrustRegionOptions)
    max_rank: int = 10
    eig_tolerance: float = 1e-8
    cert_tolerance: float = 1e-6
    max_halvings: int = 60
    eig_method: str = "auto"
    collapse_threshold: float = 1e-6
    max_reseeds: int = 5

    def __post_init__(self):
        if self.max_rank < 3:
            raise ValueError("max_rank must be >= 3")


@dataclass
class StaircaseResult:
    factor: FactorPoint
    objective: float
    certificate: Certificate
    rank_trajectory: list
    iterations: list
    certified: bool
    converged: bool
    escapes: list = field(default_factory=list)
    history: list = field(default_factory=list)
    reseeds: list = field(default_factory=list)

    @property
    def rank(self):
        return self.factor.rank


def initial_point(num_frames, init="identity", seed=None, rank=3):
    if isinstance(init, FactorPoint):
        return init
    if init == "identity":
        return FactorPoint.identity(num_frames, rank)
    if init == "random":
        return FactorPoint.random(num_frames, rank, np.random.default_rng(seed))
    raise ValueError(f"unknown init {init!r}")


def staircase(Q, opts=None, seed=None, init="identity", lambda_reg=0.0, trace=None):
    """Run rank-``r`` RTR, certify, and lift along the dual's least eigenvector until certified."""
    opts = opts or StaircaseOptions()
    problem = Q if isinstance(Q, Problem) else Problem(Q, lambda_reg)
    N = problem.num_frames
    x = initial_point(N, init, seed)
    if x.rank > opts.max_rank:
        raise ValueError("start rank exceeds max_rank")
    ranks, iters, escapes, history, reseeds = [], [], [], [], []
    while True:
        ranks.append(x.rank)
        if trace is not None:
            trace({"event": "rank", "rank": x.rank, "cost": problem.cost(x)})
        res = rtr_minimize(problem, x, opts.trust_region, trace=trace)
        iters.append(res.iterations)
        history.append(res.grad_history)
        x = res.point
        for _ in range(opts.max_reseeds):
            x_new, frames = reseed_collapsed(problem, x, opts.collapse_threshold)
            if not frames:
                break
            if trace is not None:
                trace({"event": "reseed", "rank": x.rank, "frames": frames})
            reseeds.append({"rank": x.rank, "frames": frames})
            res = rtr_minimize(problem, x_new, opts.trust_region, trace=trace)
            iters[-1] += res.iterations
            history[-1] = history[-1] + res.grad_history
            x = res.point
        cert = certify(
            problem.Q,
            x,
            problem.lambda_reg,
            eig_tol=opts.eig_tolerance,
            cert_tol=opts.cert_tolerance,
            eig_method=opts.eig_method,
            objective=res.cost,
        )
        if trace is not None:
            trace(
                {
                    "event": "certificate",
                    "rank": x.rank,
                    "min_eig": cert.min_eigenvalue,
                    "kkt_residual": cert.kkt_residual,
                    "certified": cert.certified,
                }
            )
        stuck = bool(cert.extra) or not cert.min_eigenvalue < 0
        if cert.certified or stuck or x.rank + 1 > opts.max_rank:
            return StaircaseResult(
                x, res.cost, cert, ranks, iters, cert.certified, res.converged, escapes, history, reseeds
            )
        x, alpha, dec = escape_direction(
            problem, x, cert.min_eigenvector, cert.min_eigenvalue, max_halvings=opts.max_halvings
        )
        escapes.append({"rank": x.rank, "alpha": alpha, "decrease": dec})
        if trace is not None:
            trace({"event": "escape", "rank": x.rank, "alpha": alpha, "decrease": dec})


def with_options(opts, **changes):
    """Copy of ``StaircaseOptions`` with trust-region fields overridden by keyword."""
    tr_fields = TrustRegionOptions.__dataclass_fields__
    tr = {k: v for k, v in changes.items() if k in tr_fields}
    rest = {k: v for k, v in changes.items() if k not in tr_fields}
    return replace(opts, trust_region=replace(opts.trust_region, **tr), **rest)
