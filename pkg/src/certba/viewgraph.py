"""View graphs: frames, landmarks and the lifted keypoint observations between them.

A :class:`ViewGraph` stores one edge per (frame, landmark) observation. Each edge
carries a lifted 3D keypoint ``d * [u; 1]`` expressed in the camera frame and a
positive weight. Poses follow the camera-to-world convention: a frame with
rotation ``R``, translation ``t`` and scale ``s`` maps a lifted keypoint ``x`` to
``R (s x) + t`` in the world frame.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial.transform import Rotation


class BALFormatError(ValueError):
    """Raised when a BAL text file does not follow the expected layout."""


@dataclass(frozen=True)
class Edge:
    frame: int
    landmark: int
    point: tuple[float, float, float]
    weight: float = 1.0


def _readonly(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


def _dedupe(frames, landmarks):
    """Indices of the first occurrence of every (frame, landmark) pair, in order."""
    keys = frames.astype(np.int64) * (int(landmarks.max(initial=0)) + 1) + landmarks
    _, first = np.unique(keys, return_index=True)
    keep = np.sort(first)
    n_dup = len(frames) - len(keep)
    if n_dup:
        warnings.warn(f"dropped {n_dup} duplicate (frame, landmark) observations", stacklevel=3)
    return keep


def _compact(num_landmarks, landmarks):
    """Reindex landmarks so that every index in ``[0, M')`` is observed."""
    used = np.unique(landmarks)
    remap = np.full(num_landmarks, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return used, remap[landmarks]


@dataclass(frozen=True, eq=False)
class ViewGraph:
    """Bipartite frame/landmark graph whose edges hold lifted 3D keypoints.

    The constructor validates every invariant except connectivity, which the
    solver checks separately (see :func:`check_connectivity`).
    """

    num_frames: int
    num_landmarks: int
    frames: np.ndarray
    landmarks: np.ndarray
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        frames = _readonly(self.frames, np.int64).reshape(-1)
        landmarks = _readonly(self.landmarks, np.int64).reshape(-1)
        points = _readonly(self.points, np.float64).reshape(-1, 3)
        weights = _readonly(self.weights, np.float64).reshape(-1)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "landmarks", landmarks)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)
        E = len(frames)
        if self.num_frames < 1 or self.num_landmarks < 1:
            raise ValueError("a view graph needs at least one frame and one landmark")
        if E == 0:
            raise ValueError("a view graph needs at least one edge")
        if not (len(landmarks) == len(points) == len(weights) == E):
            raise ValueError("edge arrays have inconsistent lengths")
        if frames.min() < 0 or frames.max() >= self.num_frames:
            raise ValueError("frame index out of range")
        if landmarks.min() < 0 or landmarks.max() >= self.num_landmarks:
            raise ValueError("landmark index out of range")
        if not np.all(np.isfinite(points)):
            raise ValueError("non-finite keypoint")
        if np.any(points[:, 2] <= 0):
            raise ValueError("non-positive depth")
        if not np.all(np.isfinite(weights)) or np.any(weights <= 0):
            raise ValueError("weights must be positive and finite")
        keys = frames * self.num_landmarks + landmarks
        if len(np.unique(keys)) != E:
            raise ValueError("duplicate (frame, landmark) edge")
        if len(np.unique(frames)) != self.num_frames:
            raise ValueError("every frame must be observed by at least one edge")
        if len(np.unique(landmarks)) != self.num_landmarks:
            raise ValueError("every landmark must be observed by at least one edge")

    @classmethod
    def from_arrays(cls, num_frames, frames, landmarks, points, weights=None, num_landmarks=None):
        """Build a graph from raw arrays, dropping duplicates and unobserved landmarks.

        Returns ``(graph, landmark_ids)`` where ``landmark_ids[k]`` is the input
        index of compacted landmark ``k``.
        """
        frames = np.asarray(frames, dtype=np.int64).reshape(-1)
        landmarks = np.asarray(landmarks, dtype=np.int64).reshape(-1)
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        weights = np.ones(len(frames)) if weights is None else np.asarray(weights, dtype=np.float64)
        if len(frames) == 0:
            raise ValueError("a view graph needs at least one edge")
        if num_landmarks is None:
            num_landmarks = int(landmarks.max()) + 1
        if landmarks.min() < 0 or landmarks.max() >= num_landmarks:
            raise ValueError("landmark index out of range")
        keep = _dedupe(frames, landmarks)
        frames, landmarks, points, weights = frames[keep], landmarks[keep], points[keep], weights[keep]
        ids, landmarks = _compact(num_landmarks, landmarks)
        graph = cls(num_frames, len(ids), frames, landmarks, points, weights)
        return graph, ids

    @classmethod
    def from_edges(cls, num_frames, num_landmarks, edges):
        """Build a graph from :class:`Edge` records (duplicates dropped with a warning)."""
        edges = list(edges)
        graph, ids = cls.from_arrays(
            num_frames,
            [e.frame for e in edges],
            [e.landmark for e in edges],
            [e.point for e in edges] if edges else np.zeros((0, 3)),
            [e.weight for e in edges],
            num_landmarks=num_landmarks,
        )
        if len(ids) != num_landmarks:
            warnings.warn(f"removed {num_landmarks - len(ids)} unobserved landmarks", stacklevel=2)
        return graph

    @property
    def num_edges(self):
        return len(self.frames)

    @property
    def edges(self):
        return [
            Edge(int(f), int(k), tuple(float(c) for c in p), float(w))
            for f, k, p, w in zip(self.frames, self.landmarks, self.points, self.weights)
        ]

    def with_weights(self, weights):
        return ViewGraph(self.num_frames, self.num_landmarks, self.frames, self.landmarks, self.points, weights)

    def subgraph(self, keep):
        """Keep the edges selected by a boolean mask; unobserved landmarks are compacted.

        Returns ``(graph, landmark_ids)``. All frames must keep at least one edge.
        """
        keep = np.asarray(keep, dtype=bool)
        ids, landmarks = _compact(self.num_landmarks, self.landmarks[keep])
        graph = ViewGraph(
            self.num_frames, len(ids), self.frames[keep], landmarks, self.points[keep], self.weights[keep]
        )
        return graph, ids

    def to_dict(self):
        return {
            "num_frames": int(self.num_frames),
            "num_landmarks": int(self.num_landmarks),
            "edges": [
                {"frame": e.frame, "landmark": e.landmark, "point": list(e.point), "weight": e.weight}
                for e in self.edges
            ],
        }

    @classmethod
    def from_dict(cls, data):
        try:
            num_frames = int(data["num_frames"])
            num_landmarks = int(data["num_landmarks"])
            edges = [
                Edge(int(e["frame"]), int(e["landmark"]), tuple(e["point"]), float(e.get("weight", 1.0)))
                for e in data["edges"]
            ]
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed view graph JSON: {exc}") from exc
        return cls.from_edges(num_frames, num_landmarks, edges)


@dataclass(frozen=True, eq=False)
class ViewGraph2D:
    """Observations before depth lifting: normalized 2D keypoints per edge."""

    num_frames: int
    num_landmarks: int
    frames: np.ndarray
    landmarks: np.ndarray
    keypoints: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "frames", _readonly(self.frames, np.int64).reshape(-1))
        object.__setattr__(self, "landmarks", _readonly(self.landmarks, np.int64).reshape(-1))
        object.__setattr__(self, "keypoints", _readonly(self.keypoints, np.float64).reshape(-1, 2))
        if self.weights is not None:
            object.__setattr__(self, "weights", _readonly(self.weights, np.float64).reshape(-1))
        if not np.all(np.isfinite(self.keypoints)):
            raise ValueError("non-finite keypoint")

    @property
    def num_edges(self):
        return len(self.frames)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Reference poses, scales and landmark positions, anchored on frame 0."""

    rotations: np.ndarray
    translations: np.ndarray
    scales: np.ndarray
    points: np.ndarray

    def __post_init__(self):
        R = _readonly(self.rotations, np.float64).reshape(-1, 3, 3)
        t = _readonly(self.translations, np.float64).reshape(-1, 3)
        s = _readonly(self.scales, np.float64).reshape(-1)
        p = _readonly(self.points, np.float64).reshape(-1, 3)
        for name, value in (("rotations", R), ("translations", t), ("scales", s), ("points", p)):
            object.__setattr__(self, name, value)
        if not (len(R) == len(t) == len(s)):
            raise ValueError("pose arrays have inconsistent lengths")
        err = np.abs(np.einsum("nki,nkj->nij", R, R) - np.eye(3)).max()
        if err > 1e-12 or np.any(np.linalg.det(R) <= 0):
            raise ValueError("rotations must lie in SO(3)")
        if np.any(s <= 0):
            raise ValueError("scales must be positive")
        if not (np.array_equal(R[0], np.eye(3)) and not t[0].any() and s[0] == 1.0):
            raise ValueError("ground truth must be anchored on frame 0")

    @classmethod
    def anchored(cls, rotations, translations, scales, points):
        """Express an arbitrary world frame relative to frame 0 (``R_0 = I, t_0 = 0, s_0 = 1``)."""
        R = np.asarray(rotations, dtype=np.float64).reshape(-1, 3, 3)
        t = np.asarray(translations, dtype=np.float64).reshape(-1, 3)
        s = np.asarray(scales, dtype=np.float64).reshape(-1)
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        R0, t0, s0 = R[0], t[0], s[0]
        R_new = np.einsum("ji,njk->nik", R0, R)
        R_new = np.array([_nearest_rotation(r) for r in R_new])
        R_new[0] = np.eye(3)
        t_new = (t - t0) @ R0 / s0
        t_new[0] = 0.0
        s_new = s / s0
        s_new[0] = 1.0
        return cls(R_new, t_new, s_new, (p - t0) @ R0 / s0)

    @property
    def num_frames(self):
        return len(self.rotations)

    def to_dict(self):
        return {
            "rotations": self.rotations.tolist(),
            "translations": self.translations.tolist(),
            "scales": self.scales.tolist(),
            "points": self.points.tolist(),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            np.asarray(data["rotations"]),
            np.asarray(data["translations"]),
            np.asarray(data["scales"]),
            np.asarray(data["points"]),
        )


def _nearest_rotation(M):
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


# --------------------------------------------------------------------------- BAL


_FLIP = np.diag([1.0, -1.0, -1.0])


def parse_bal(text, pixel_coordinates=False):
    """Parse a BAL problem into 2D observations and anchored ground truth.

    By default keypoints are taken as already normalized, with cameras looking
    down ``+z``. With ``pixel_coordinates=True`` the raw BAL convention is used
    instead: keypoints are divided by the focal length and the ``-z`` viewing
    direction is converted to ``+z`` (a rotation by pi about the camera x axis).
    Radial distortion is ignored in both modes.
    """
    lines = [ln.split() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines or len(lines[0]) != 3:
        raise BALFormatError("malformed header")
    try:
        N, M, K = (int(v) for v in lines[0])
    except ValueError as exc:
        raise BALFormatError("malformed header") from exc
    if N < 1 or M < 1 or K < 1:
        raise BALFormatError("malformed header")
    obs = lines[1 : 1 + K]
    if len(obs) != K or any(len(ln) != 4 for ln in obs):
        raise BALFormatError("observation count mismatch")
    try:
        cam_idx = np.array([int(ln[0]) for ln in obs], dtype=np.int64)
        pt_idx = np.array([int(ln[1]) for ln in obs], dtype=np.int64)
        uv = np.array([[float(ln[2]), float(ln[3])] for ln in obs])
        params = np.array([float(v) for ln in lines[1 + K :] for v in ln])
    except ValueError as exc:
        raise BALFormatError(f"unparsable value: {exc}") from exc
    if np.any(cam_idx < 0) or np.any(cam_idx >= N) or np.any(pt_idx < 0) or np.any(pt_idx >= M):
        raise BALFormatError("index out of range")
    if len(params) != 9 * N + 3 * M:
        raise BALFormatError("parameter count mismatch")
    if not (np.all(np.isfinite(uv)) and np.all(np.isfinite(params))):
        raise BALFormatError("non-finite value")

    cams = params[: 9 * N].reshape(N, 9)
    pts = params[9 * N :].reshape(M, 3)
    R_wc = Rotation.from_rotvec(cams[:, :3]).as_matrix()
    t_wc = cams[:, 3:6].copy()
    if pixel_coordinates:
        focal = cams[cam_idx, 6]
        if np.any(focal == 0):
            raise BALFormatError("zero focal length")
        uv = np.column_stack([uv[:, 0] / focal, -uv[:, 1] / focal])
        R_wc = _FLIP @ R_wc
        t_wc = t_wc @ _FLIP
    if len(np.unique(cam_idx)) != N:
        raise BALFormatError("camera without observations")

    keep = _dedupe(cam_idx, pt_idx)
    cam_idx, pt_idx, uv = cam_idx[keep], pt_idx[keep], uv[keep]
    ids, pt_idx = _compact(M, pt_idx)

    R_cw = np.transpose(R_wc, (0, 2, 1))
    t_cw = -np.einsum("nij,nj->ni", R_cw, t_wc)
    gt = GroundTruth.anchored(R_cw, t_cw, np.ones(N), pts[ids])
    return ViewGraph2D(N, len(ids), cam_idx, pt_idx, uv), gt


def read_bal(path, pixel_coordinates=False):
    with open(path) as fh:
        return parse_bal(fh.read(), pixel_coordinates=pixel_coordinates)


# --------------------------------------------------------------------------- lifting


def _per_edge(values, graph2d, name):
    if isinstance(values, Mapping):
        out = np.empty(graph2d.num_edges)
        for e, (f, k) in enumerate(zip(graph2d.frames, graph2d.landmarks)):
            try:
                out[e] = values[(int(f), int(k))]
            except KeyError:
                raise ValueError(f"missing {name} for observation ({f}, {k})") from None
        return out
    out = np.asarray(values, dtype=np.float64).reshape(-1)
    if len(out) != graph2d.num_edges:
        raise ValueError(f"missing {name}: expected {graph2d.num_edges} values")
    return out


def lift_to_3d(graph2d, depths, weights=None):
    """Lift every observation to ``d * [u; 1]``.

    ``depths`` and ``weights`` are either mappings keyed by ``(frame, landmark)``
    or arrays aligned with the observations. Weights default to the graph's
    own weights, or one.
    """
    d = _per_edge(depths, graph2d, "depth")
    if not np.all(np.isfinite(d)) or np.any(d <= 0):
        raise ValueError("non-positive depth")
    if weights is not None:
        w = _per_edge(weights, graph2d, "weight")
    elif graph2d.weights is not None:
        w = graph2d.weights
    else:
        w = np.ones(graph2d.num_edges)
    points = d[:, None] * np.column_stack([graph2d.keypoints, np.ones(graph2d.num_edges)])
    return ViewGraph(graph2d.num_frames, graph2d.num_landmarks, graph2d.frames, graph2d.landmarks, points, w)


def camera_frame_points(gt, frames, landmarks):
    """``s_i^-1 R_i^T (p_k - t_i)`` for each (frame, landmark) pair."""
    diff = gt.points[landmarks] - gt.translations[frames]
    return np.einsum("nji,nj->ni", gt.rotations[frames], diff) / gt.scales[frames, None]


def depths_from_ground_truth(graph2d, gt):
    """Depth of every observation from ground truth.

    Returns ``(depths, dropped)``: a mapping ``(frame, landmark) -> depth`` for
    observations in front of the camera, and the number of observations that
    were behind it (and left out).
    """
    z = camera_frame_points(gt, graph2d.frames, graph2d.landmarks)[:, 2]
    front = z > 0
    dropped = int(np.count_nonzero(~front))
    if dropped:
        warnings.warn(f"dropped {dropped} observations behind their camera", stacklevel=2)
    depths = {
        (int(f), int(k)): float(d)
        for f, k, d in zip(graph2d.frames[front], graph2d.landmarks[front], z[front])
    }
    return depths, dropped


def lift_with_ground_truth(graph2d, gt):
    """Lift using ground-truth depths, dropping observations behind the camera.

    Returns ``(graph, gt, dropped)`` with landmarks compacted consistently in
    both the graph and the ground truth.
    """
    depths, dropped = depths_from_ground_truth(graph2d, gt)
    keep = np.array([(int(f), int(k)) in depths for f, k in zip(graph2d.frames, graph2d.landmarks)])
    sub = ViewGraph2D(
        graph2d.num_frames,
        graph2d.num_landmarks,
        graph2d.frames[keep],
        graph2d.landmarks[keep],
        graph2d.keypoints[keep],
        None if graph2d.weights is None else graph2d.weights[keep],
    )
    ids, landmarks = _compact(graph2d.num_landmarks, sub.landmarks)
    sub = ViewGraph2D(sub.num_frames, len(ids), sub.frames, landmarks, sub.keypoints, sub.weights)
    depth_map = {(int(f), int(k)): depths[(int(f), int(ids[k]))] for f, k in zip(sub.frames, sub.landmarks)}
    graph = lift_to_3d(sub, depth_map)
    gt = GroundTruth(gt.rotations, gt.translations, gt.scales, gt.points[ids])
    return graph, gt, dropped


# --------------------------------------------------------------------------- topology


def _adjacency(num_frames, num_landmarks, frames, landmarks):
    n = num_frames + num_landmarks
    data = np.ones(len(frames))
    return coo_matrix((data, (frames, num_frames + landmarks)), shape=(n, n)).tocsr()


def check_connectivity(graph):
    """Number of connected components of the bipartite frame/landmark graph."""
    adj = _adjacency(graph.num_frames, graph.num_landmarks, graph.frames, graph.landmarks)
    count, _ = connected_components(adj, directed=False)
    return int(count)


def require_connected(graph):
    count = check_connectivity(graph)
    if count != 1:
        raise ValueError(f"view graph is disconnected ({count} components)")


# --------------------------------------------------------------------------- synthetic scenes


def random_rotations(rng, n):
    return Rotation.random(n, random_state=rng).as_matrix()


def _look_at(center, target, roll):
    z = target - center
    z /= np.linalg.norm(z)
    helper = np.array([0.0, 1.0, 0.0]) if abs(z[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = np.cross(helper, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    c, s = np.cos(roll), np.sin(roll)
    x, y = c * x + s * y, -s * x + c * y
    return np.column_stack([x, y, z])


def synth_scene(
    n_frames,
    n_landmarks,
    visibility_prob=0.5,
    noise_eps=0.0,
    seed=0,
    scale_range=(0.5, 2.0),
    camera_distance=(4.0, 8.0),
):
    """Random scene with cameras looking at a cloud of landmarks.

    Landmarks are uniform in ``[-1, 1]^3``; cameras sit on a sphere shell
    around the origin and look at it, so every landmark has positive depth.
    Each (frame, landmark) pair is observed with probability
    ``visibility_prob``; extra edges are then added until every node is
    observed and the graph is connected. Every lifted keypoint is multiplied by
    ``(1 + noise_eps)^x`` with ``x ~ U(-1, 1)`` drawn per edge.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    if n_landmarks < 1:
        raise ValueError("n_landmarks must be >= 1: the graph cannot be connected")
    if not 0 < visibility_prob <= 1:
        raise ValueError("visibility_prob must be in (0, 1]")
    if noise_eps < 0:
        raise ValueError("noise_eps must be >= 0")
    rng = np.random.default_rng(seed)

    points = rng.uniform(-1.0, 1.0, size=(n_landmarks, 3))
    dirs = rng.normal(size=(n_frames, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    centers = dirs * rng.uniform(*camera_distance, size=(n_frames, 1))
    rolls = rng.uniform(-np.pi, np.pi, size=n_frames)
    targets = rng.normal(scale=0.2, size=(n_frames, 3))
    R = np.array([_look_at(c, g, a) for c, g, a in zip(centers, targets, rolls)])
    scales = rng.uniform(*scale_range, size=n_frames)
    gt = GroundTruth.anchored(R, centers, scales, points)

    vis = rng.random((n_frames, n_landmarks)) < visibility_prob
    for k in np.flatnonzero(~vis.any(axis=0)):
        vis[rng.integers(n_frames), k] = True
    for i in np.flatnonzero(~vis.any(axis=1)):
        vis[i, rng.integers(n_landmarks)] = True
    while True:
        f, k = np.nonzero(vis)
        adj = _adjacency(n_frames, n_landmarks, f, k)
        count, labels = connected_components(adj, directed=False)
        if count == 1:
            break
        # join the component of frame 0 with another one through a fresh edge
        other = labels != labels[0]
        frames_a = np.flatnonzero(~other[:n_frames])
        lms_b = np.flatnonzero(other[n_frames:])
        vis[rng.choice(frames_a), rng.choice(lms_b)] = True

    frames, landmarks = np.nonzero(vis)
    clean = camera_frame_points(gt, frames, landmarks)
    noise = (1.0 + noise_eps) ** rng.uniform(-1.0, 1.0, size=len(frames))
    graph = ViewGraph(n_frames, n_landmarks, frames, landmarks, clean * noise[:, None], np.ones(len(frames)))
    return graph, gt


# --------------------------------------------------------------------------- JSON files


def write_graph_json(graph, path):
    with open(path, "w") as fh:
        json.dump(graph.to_dict(), fh)


def read_graph_json(path):
    with open(path) as fh:
        return ViewGraph.from_dict(json.load(fh))


def write_ground_truth_json(gt, path):
    with open(path, "w") as fh:
        json.dump(gt.to_dict(), fh)


def read_ground_truth_json(path):
    with open(path) as fh:
        return GroundTruth.from_dict(json.load(fh))
