"""Collision-free corridors of configuration-space balls.

A path from RRT-Connect (plus shortcutting) is resampled at a fixed arc
length step; each sample becomes a ball whose radius is the SCDF there.
The MPC assigns each predicted configuration to the corridor ball that
contains it with the largest margin, and pulls the horizon end toward the
farthest corridor point inside the tightened terminal ball.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import ArmGeometry, Ball, Scene, scdf

log = logging.getLogger(__name__)


class PlanningError(RuntimeError):
    pass


class CorridorError(RuntimeError):
    pass


def _edge_clear(geom, scene, a, b, threshold, resolution) -> bool:
    # scdf is 1-Lipschitz: a margin at ``a`` larger than the edge clears it outright
    length = np.linalg.norm(b - a)
    if scdf(geom, scene, a) >= threshold + length:
        return True
    n = max(2, int(np.ceil(length / resolution)) + 1)
    t = np.linspace(0.0, 1.0, n)[:, None]
    return bool(np.all(scdf(geom, scene, a + t * (b - a)) >= threshold))


class _Tree:
    def __init__(self, root, capacity):
        self.nodes = np.empty((capacity, root.size))
        self.parent = np.empty(capacity, dtype=int)
        self.nodes[0], self.parent[0], self.size = root, -1, 1

    def nearest(self, q) -> int:
        return int(np.argmin(np.sum((self.nodes[: self.size] - q) ** 2, axis=1)))

    def add(self, q, parent) -> int:
        self.nodes[self.size], self.parent[self.size] = q, parent
        self.size += 1
        return self.size - 1

    def branch(self, i):
        out = []
        while i >= 0:
            out.append(self.nodes[i])
            i = self.parent[i]
        return out


def plan_path(geom: ArmGeometry, scene: Scene, q_start, q_goal, clearance: float = 0.1, *,
              step: float = 0.05, resolution: float = 0.005, max_nodes: int = 50_000,
              q_limit: float = np.pi - 0.2, shortcut_rounds: int = 200, seed: int = 0,
              max_samples: int | None = None) -> np.ndarray:
    """RRT-Connect with an SCDF clearance requirement, then shortcutting.

    Every point of the returned polyline has ``scdf >= clearance``: samples
    are checked every ``resolution`` against ``clearance + resolution / 2``
    and the SCDF is 1-Lipschitz. The search stops after ``max_nodes`` tree
    nodes or ``max_samples`` random samples (default ``4 * max_nodes``),
    whichever comes first.

    Returns
    -------
    (k, dof) array of waypoints, first ``q_start`` and last ``q_goal``.
    """
    qs = np.asarray(q_start, dtype=float)
    qg = np.asarray(q_goal, dtype=float)
    thr = clearance + 0.5 * resolution
    for name, q in (("start", qs), ("goal", qg)):
        if scdf(geom, scene, q) < thr:
            raise ValueError(f"{name} configuration violates the clearance")
    rng = np.random.default_rng(seed)

    def clear(a, b):
        return _edge_clear(geom, scene, a, b, thr, resolution)

    if clear(qs, qg):
        return np.stack([qs, qg])

    trees = [_Tree(qs, max_nodes), _Tree(qg, max_nodes)]

    def extend(tree, target):
        i = tree.nearest(target)
        near = tree.nodes[i]
        d = target - near
        dist = np.linalg.norm(d)
        new = target if dist <= step else near + d * (step / dist)
        if not clear(near, new):
            return None
        return tree.add(new, i)

    def connect(tree, target):
        last = None
        while tree.size < max_nodes:
            j = extend(tree, target)
            if j is None:
                return last, False
            last = j
            if np.array_equal(tree.nodes[j], target):
                return j, True
        return last, False

    path = None
    budget = 4 * max_nodes if max_samples is None else max_samples
    for _ in range(budget):
        if trees[0].size + trees[1].size >= max_nodes:
            break
        sample = rng.uniform(-q_limit, q_limit, qs.size)
        i = extend(trees[0], sample)
        if i is not None:
            j, reached = connect(trees[1], trees[0].nodes[i])
            if reached:
                a, b = trees[0].branch(i), trees[1].branch(j)
                # a runs node -> root of tree 0, b node -> root of tree 1
                path = np.array(a[::-1] + b[1:])
                break
        trees.reverse()
    if path is None:
        raise PlanningError(f"planning failed ({trees[0].size + trees[1].size} nodes, {budget} samples)")
    if not np.array_equal(path[0], qs):
        path = path[::-1]
    return shortcut(path, clear, rng, shortcut_rounds)


def shortcut(path: np.ndarray, clear, rng, rounds: int) -> np.ndarray:
    """Random shortcutting followed by a greedy forward pass."""
    path = list(path)
    for _ in range(rounds):
        if len(path) < 3:
            break
        i, j = sorted(rng.choice(len(path), 2, replace=False))
        if j - i > 1 and clear(path[i], path[j]):
            path = path[: i + 1] + path[j:]
    out, i = [path[0]], 0
    while i < len(path) - 1:
        j = len(path) - 1
        while j > i + 1 and not clear(path[i], path[j]):
            j -= 1
        out.append(path[j])
        i = j
    return np.array(out)


@dataclass(frozen=True)
class Corridor:
    """Ordered balls ``(c_i, r_i)`` along a path."""

    centers: np.ndarray
    radii: np.ndarray
    step_size: float

    def __len__(self) -> int:
        return self.radii.size

    def ball(self, i: int) -> Ball:
        return Ball(self.centers[i], float(self.radii[i]))

    def margins(self, q) -> np.ndarray:
        """``r_j - |q - c_j|`` for every ball; shape ``(..., M)``."""
        q = np.asarray(q, dtype=float)[..., None, :]
        return self.radii - np.linalg.norm(q - self.centers, axis=-1)

    def to_dict(self) -> dict:
        return {"centers": self.centers.tolist(), "radii": self.radii.tolist(), "step_size": self.step_size}

    @classmethod
    def from_dict(cls, d: dict) -> "Corridor":
        return cls(np.array(d["centers"], dtype=float), np.array(d["radii"], dtype=float), float(d["step_size"]))


def resample(path: np.ndarray, step_size: float) -> np.ndarray:
    """Equidistant points along a polyline, spacing at most ``step_size``."""
    path = np.asarray(path, dtype=float)
    seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    n = int(np.ceil(s[-1] / step_size - 1e-9)) + 1
    t = np.linspace(0.0, s[-1], max(n, 1))
    return np.stack([np.interp(t, s, path[:, k]) for k in range(path.shape[1])], axis=1)


def build_corridor(geom: ArmGeometry, scene: Scene, path, step_size: float = 0.005) -> Corridor:
    if step_size <= 0:
        raise ValueError("step_size must be positive")
    centers = resample(path, step_size)
    radii = np.asarray(scdf(geom, scene, centers), dtype=float).reshape(-1)
    if np.any(radii <= 0):
        raise CorridorError("corridor center is not collision-free")
    return Corridor(centers, radii, float(step_size))


@dataclass(frozen=True)
class BallAssignment:
    indices: np.ndarray
    margins: np.ndarray


def assign_balls(corridor: Corridor, q_traj) -> BallAssignment:
    """Per configuration, the ball with the largest margin (lowest index on ties)."""
    m = corridor.margins(q_traj)
    idx = np.argmax(m, axis=-1)  # argmax returns the first maximum
    best = np.take_along_axis(m, idx[..., None], axis=-1)[..., 0]
    if np.any(best < 0):
        raise CorridorError("trajectory left corridor")
    return BallAssignment(idx, best)


def select_virtual_goal(corridor: Corridor, last: int, tighten: float) -> int:
    """Largest index whose center lies in ball ``last`` shrunk by ``tighten``.

    Falls back to ``last`` itself when no center qualifies, which stalls
    progress without affecting safety.
    """
    c, r = corridor.centers[last], corridor.radii[last]
    ok = np.flatnonzero(np.linalg.norm(corridor.centers - c, axis=1) <= r - tighten)
    if ok.size == 0:
        log.debug("no corridor center inside tightened ball %d", last)
        return int(last)
    return int(ok[-1])
