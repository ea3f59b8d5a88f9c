"""Scene builders shared by the test modules."""

import numpy as np
from scipy.spatial.transform import Rotation

from certba.manifold import FactorPoint
from certba.viewgraph import ViewGraph, synth_scene


def collapse_scene(n_frames=6, n_landmarks=400, spread=0.05, seed=0):
    """Every frame sees every landmark, but the lifted points are independent noise.

    The frames carry no consistent geometry, so the unregularized optimum
    drives the scales of frames ``i >= 1`` toward zero.
    """
    rng = np.random.default_rng(seed)
    f = np.repeat(np.arange(n_frames), n_landmarks)
    k = np.tile(np.arange(n_landmarks), n_frames)
    pts = rng.uniform(-spread, spread, size=(n_frames * n_landmarks, 3))
    pts[:, 2] += 1.0
    return ViewGraph(n_frames, n_landmarks, f, k, pts, np.ones(n_frames * n_landmarks))


def reflected_start(num_frames, frame=1):
    """Identity start with one frame's block reflected."""
    pt = FactorPoint.identity(num_frames)
    R = pt.stiefel.copy()
    R[frame] = np.diag([1.0, 1.0, -1.0])
    return FactorPoint(R, pt.scales)


def corrupt_edges(graph, fraction, seed, kind="depth"):
    """Copy of ``graph`` with a fraction of its edges corrupted; returns ``(graph, bad_mask)``."""
    rng = np.random.default_rng(seed)
    bad = rng.choice(graph.num_edges, int(round(fraction * graph.num_edges)), replace=False)
    P = np.array(graph.points)
    if kind == "depth":
        P[bad] *= 1.5
    elif kind == "lateral":
        P[bad, :2] += rng.normal(scale=2.0, size=(len(bad), 2))
    elif kind == "far":
        P[bad] *= 10.0
    else:
        raise ValueError(kind)
    mask = np.zeros(graph.num_edges, dtype=bool)
    mask[bad] = True
    out = ViewGraph(graph.num_frames, graph.num_landmarks, graph.frames, graph.landmarks, P, graph.weights)
    return out, mask


def small_scene(n_frames=5, n_landmarks=40, eps=0.2, seed=0, visibility=0.6):
    return synth_scene(n_frames, n_landmarks, visibility_prob=visibility, noise_eps=eps, seed=seed)


def bal_text(rotvecs, centers_t, points, obs, focal=1.0):
    """Tiny BAL writer: ``obs`` rows are (cam, pt, u, v)."""
    lines = [f"{len(rotvecs)} {len(points)} {len(obs)}"]
    lines += [f"{c} {p} {float(u)!r} {float(v)!r}" for c, p, u, v in obs]
    for rv, t in zip(rotvecs, centers_t):
        lines += [repr(float(x)) for x in (*rv, *t, focal, 0.0, 0.0)]
    for p in points:
        lines += [repr(float(x)) for x in p]
    return "\n".join(lines) + "\n"


def project(rotvec, t, p):
    x = Rotation.from_rotvec(rotvec).as_matrix() @ p + t
    return x[0] / x[2], x[1] / x[2]
