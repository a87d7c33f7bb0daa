"""Planar arm kinematics, exact capsule-vs-circle clearance and a sound SCDF.

Links are capsules (segments inflated by a radius) and obstacles are disks.
The configuration-space distance is bounded from below by dividing the
workspace clearance by a global Lipschitz constant of forward kinematics:
a joint displacement ``dq`` moves any point of the body by at most
``sum_j R_j |dq_j| <= sqrt(sum_j R_j^2) |dq|``, where ``R_j`` is the reach
of the chain beyond joint ``j``.  The clearance is a minimum of distances to
such points, so it inherits the same constant and ``clearance / L_fk`` is a
1-Lipschitz lower bound of the distance to the obstacle region.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .arm import ArmParams


@dataclass(frozen=True)
class Scene:
    """Disk obstacles in the plane.

    Parameters
    ----------
    centers : (k, 2) array
    radii : (k,) array, strictly positive
    workspace_bounds : (2, 2) array ``[[xmin, xmax], [ymin, ymax]]``
    """

    centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    radii: np.ndarray = field(default_factory=lambda: np.zeros(0))
    workspace_bounds: np.ndarray = field(default_factory=lambda: np.array([[-2.5, 2.5], [-2.5, 2.5]]))

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=float).reshape(-1, 2)
        r = np.asarray(self.radii, dtype=float).reshape(-1)
        if c.shape[0] != r.shape[0]:
            raise ValueError("one radius per obstacle center")
        if np.any(r <= 0):
            raise ValueError("obstacle radii must be positive")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "radii", r)
        object.__setattr__(self, "workspace_bounds", np.asarray(self.workspace_bounds, dtype=float))

    @property
    def n_obstacles(self) -> int:
        return self.radii.size

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(np.diff(self.workspace_bounds, axis=1)))

    def to_dict(self) -> dict:
        return {"centers": self.centers.tolist(), "radii": self.radii.tolist(),
                "workspace_bounds": self.workspace_bounds.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(np.array(d["centers"], dtype=float), np.array(d["radii"], dtype=float),
                   np.array(d["workspace_bounds"], dtype=float))


@dataclass(frozen=True)
class ArmGeometry:
    link_lengths: np.ndarray
    link_radii: np.ndarray
    base_position: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        L = np.asarray(self.link_lengths, dtype=float).reshape(-1)
        r = np.broadcast_to(np.asarray(self.link_radii, dtype=float), L.shape).copy()
        if np.any(L <= 0) or np.any(r <= 0):
            raise ValueError("link lengths and radii must be positive")
        object.__setattr__(self, "link_lengths", L)
        object.__setattr__(self, "link_radii", r)
        object.__setattr__(self, "base_position", np.asarray(self.base_position, dtype=float))

    @classmethod
    def from_params(cls, p: ArmParams, link_radius: float = 0.05) -> "ArmGeometry":
        return cls(p.link_lengths, np.full(p.dof, link_radius))

    @property
    def dof(self) -> int:
        return self.link_lengths.size

    @property
    def lipschitz(self) -> float:
        """``L_fk = sqrt(sum_j R_j^2)`` with ``R_j`` the reach beyond joint ``j``."""
        reach = np.cumsum(self.link_lengths[::-1])[::-1]
        return float(np.sqrt(np.sum(reach**2)))

    def to_dict(self) -> dict:
        return {"link_lengths": self.link_lengths.tolist(), "link_radii": self.link_radii.tolist(),
                "base_position": self.base_position.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ArmGeometry":
        return cls(d["link_lengths"], d["link_radii"], d.get("base_position", [0.0, 0.0]))


@dataclass(frozen=True)
class Ball:
    center: np.ndarray
    radius: float

    def contains(self, q, tol: float = 0.0):
        return np.linalg.norm(np.asarray(q) - self.center, axis=-1) <= self.radius + tol


def joint_positions(geom: ArmGeometry, q) -> np.ndarray:
    """Base, joints and tip, shape ``(..., dof + 1, 2)``."""
    q = np.asarray(q, dtype=float)
    phi = np.cumsum(q, axis=-1)
    steps = np.stack([np.cos(phi), np.sin(phi)], axis=-1) * geom.link_lengths[:, None]
    pts = np.cumsum(steps, axis=-2) + geom.base_position
    base = np.broadcast_to(geom.base_position, pts.shape[:-2] + (1, 2))
    return np.concatenate([base, pts], axis=-2)


def _segment_point_distance(p0, p1, c):
    """Distance from points ``c`` to segments ``p0-p1`` (broadcasting)."""
    d = p1 - p0
    t = np.einsum("...i,...i->...", c - p0, d) / np.einsum("...i,...i->...", d, d)
    t = np.clip(t, 0.0, 1.0)
    closest = p0 + t[..., None] * d
    return np.linalg.norm(c - closest, axis=-1)


def workspace_clearance(geom: ArmGeometry, scene: Scene, q) -> np.ndarray:
    """Signed clearance [m] between the arm capsules and the obstacle disks.

    Negative means collision. Without obstacles the workspace diagonal is
    returned as a finite stand-in for infinity. Accepts a batch of
    configurations in the leading axes.
    """
    q = np.asarray(q, dtype=float)
    if not np.all(np.isfinite(q)):
        raise ValueError("configuration must be finite")
    if scene.n_obstacles == 0:
        return np.full(q.shape[:-1], scene.diagonal) if q.ndim > 1 else scene.diagonal
    pts = joint_positions(geom, q)
    p0 = pts[..., :-1, None, :]
    p1 = pts[..., 1:, None, :]
    dist = _segment_point_distance(p0, p1, scene.centers)
    gap = dist - geom.link_radii[:, None] - scene.radii
    return gap.min(axis=(-2, -1))


def scdf(geom: ArmGeometry, scene: Scene, q):
    """Sound lower bound of the signed configuration-space distance [rad]."""
    return workspace_clearance(geom, scene, q) / geom.lipschitz


def make_ball(geom: ArmGeometry, scene: Scene, c) -> Ball:
    c = np.asarray(c, dtype=float)
    r = float(scdf(geom, scene, c))
    if r <= 0:
        raise ValueError("center not collision-free")
    return Ball(c, r)
