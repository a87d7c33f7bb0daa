"""Planar n-link manipulator dynamics.

The equations of motion are

    u = M(q) qdd + C(q, qd) qd + g(q)

where ``C`` holds both the Coriolis/centrifugal matrix (Christoffel form) and
the viscous damping diagonal. All kinematic quantities are written for a
serial chain of rigid links rotating about parallel axes, so the mass matrix
and its partial derivatives have closed forms in the absolute link angles.

Uncertain parameters are the link masses and the damping entries. A parameter
vector ``theta`` holds *relative* deviations: the first ``dof`` entries scale
the link masses (and, since the link shape is fixed, the link inertias), the
last ``dof`` entries scale the damping coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np


def _as_vector(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


@dataclass(frozen=True)
class ArmParams:
    """Physical parameters of a planar arm (SI units)."""

    link_masses: np.ndarray
    link_lengths: np.ndarray
    com_offsets: np.ndarray
    link_inertias: np.ndarray
    damping_diag: np.ndarray
    gravity_accel: float = 0.0

    def __post_init__(self):
        for name in ("link_masses", "link_lengths", "com_offsets", "link_inertias", "damping_diag"):
            object.__setattr__(self, name, _as_vector(getattr(self, name), name))
        n = self.link_masses.size
        if n == 0:
            raise ValueError("arm needs at least one link")
        for name in ("link_lengths", "com_offsets", "link_inertias", "damping_diag"):
            if getattr(self, name).size != n:
                raise ValueError(f"{name} must have {n} entries")
        if np.any(self.link_masses <= 0) or np.any(self.link_lengths <= 0) or np.any(self.link_inertias <= 0):
            raise ValueError("masses, lengths and inertias must be strictly positive")
        if np.any(self.com_offsets <= 0) or np.any(self.com_offsets > self.link_lengths):
            raise ValueError("com_offsets must lie in (0, link_length]")
        if np.any(self.damping_diag < 0):
            raise ValueError("damping must be non-negative")
        object.__setattr__(self, "gravity_accel", float(self.gravity_accel))

    @property
    def dof(self) -> int:
        return self.link_masses.size

    @classmethod
    def planar(cls, dof: int = 2, gravity_accel: float = 0.0) -> "ArmParams":
        """Unit-order textbook arm: slender uniform rods of 1 kg."""
        if dof not in (2, 3):
            raise ValueError("default arms exist for 2 or 3 links")
        lengths = np.array([1.0, 1.0]) if dof == 2 else np.array([0.8, 0.7, 0.5])
        masses = np.ones(dof)
        return cls(
            link_masses=masses,
            link_lengths=lengths,
            com_offsets=lengths / 2,
            link_inertias=masses * lengths**2 / 12,
            damping_diag=np.full(dof, 0.1 * 2),
            gravity_accel=gravity_accel,
        )

    def perturbed(self, theta: np.ndarray) -> "ArmParams":
        theta = np.asarray(theta, dtype=float)
        n = self.dof
        mass_scale = 1.0 + theta[:n]
        return ArmParams(
            link_masses=self.link_masses * mass_scale,
            link_lengths=self.link_lengths,
            com_offsets=self.com_offsets,
            link_inertias=self.link_inertias * mass_scale,
            damping_diag=self.damping_diag * (1.0 + theta[n:]),
            gravity_accel=self.gravity_accel,
        )

    def to_dict(self) -> dict:
        return {
            "link_masses": self.link_masses.tolist(),
            "link_lengths": self.link_lengths.tolist(),
            "com_offsets": self.com_offsets.tolist(),
            "link_inertias": self.link_inertias.tolist(),
            "damping_diag": self.damping_diag.tolist(),
            "gravity_accel": self.gravity_accel,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArmParams":
        return cls(**{k: d[k] for k in (
            "link_masses", "link_lengths", "com_offsets", "link_inertias", "damping_diag")},
            gravity_accel=d.get("gravity_accel", 0.0))


@dataclass(frozen=True)
class UncertaintySet:
    """Box of relative parameter deviations, ``|theta_i| <= scale * relative_bounds[i]``.

    Layout of ``relative_bounds``: ``dof`` mass entries then ``dof`` damping
    entries. Gravity is not a free parameter here; with the masses uncertain
    and ``gravity_accel > 0`` the gravity torque becomes uncertain as well.
    """

    relative_bounds: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "relative_bounds", _as_vector(self.relative_bounds, "relative_bounds"))
        if np.any(self.relative_bounds < 0):
            raise ValueError("relative bounds must be non-negative")
        if not self.scale >= 0:
            raise ValueError("scale must be non-negative")
        if np.any(self.bounds >= 1.0):
            raise ValueError("deviations of 100% or more make parameters non-positive")

    @classmethod
    def masses_and_damping(cls, dof: int, fraction: float = 0.05, scale: float = 1.0) -> "UncertaintySet":
        return cls(np.full(2 * dof, fraction), scale)

    @property
    def bounds(self) -> np.ndarray:
        return self.relative_bounds * self.scale

    @property
    def is_empty(self) -> bool:
        return not np.any(self.bounds > 0)

    def with_scale(self, scale: float) -> "UncertaintySet":
        return UncertaintySet(self.relative_bounds, scale)

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        size = self.bounds.shape if n is None else (n,) + self.bounds.shape
        return rng.uniform(-1.0, 1.0, size=size) * self.bounds

    def vertices(self) -> np.ndarray:
        signs = np.array(list(product((-1.0, 1.0), repeat=self.bounds.size)))
        return signs * self.bounds

    def contains(self, theta: np.ndarray, tol: float = 1e-12) -> bool:
        return bool(np.all(np.abs(theta) <= self.bounds + tol))

    def to_dict(self) -> dict:
        return {"relative_bounds": self.relative_bounds.tolist(), "scale": self.scale}

    @classmethod
    def from_dict(cls, d: dict) -> "UncertaintySet":
        return cls(d["relative_bounds"], float(d["scale"]))


@dataclass(frozen=True)
class ArmModel:
    """Nominal parameters plus the (unknown to the controller) true deviation."""

    nominal: ArmParams
    theta: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.nominal.dof
        theta = np.zeros(2 * n) if self.theta is None else _as_vector(self.theta, "theta")
        if theta.size != 2 * n:
            raise ValueError(f"theta must have {2 * n} entries")
        object.__setattr__(self, "theta", theta)
        # validates positivity of the perturbed parameters
        object.__setattr__(self, "_true", self.nominal.perturbed(theta))

    @property
    def dof(self) -> int:
        return self.nominal.dof

    @property
    def true_params(self) -> ArmParams:
        return self._true

    def params(self, use_true: bool) -> ArmParams:
        return self._true if use_true else self.nominal

    def with_theta(self, theta) -> "ArmModel":
        return ArmModel(self.nominal, theta)


@dataclass(frozen=True)
class State:
    q: np.ndarray
    qd: np.ndarray

    def __post_init__(self):
        q = np.array(self.q, dtype=float).reshape(-1)
        qd = np.array(self.qd, dtype=float).reshape(-1)
        if q.shape != qd.shape:
            raise ValueError("q and qd must have the same length")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "qd", qd)

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.q, self.qd])

    @classmethod
    def from_vector(cls, x) -> "State":
        x = np.asarray(x, dtype=float)
        n = x.size // 2
        return cls(x[:n], x[n:])

    @classmethod
    def rest(cls, q) -> "State":
        q = np.asarray(q, dtype=float)
        return cls(q, np.zeros_like(q))


@dataclass(frozen=True)
class DiscreteDynamics:
    """Double integrator ``x+ = A x + B a`` with ``x = (q, qd)``."""

    A: np.ndarray
    B: np.ndarray
    dt: float

    @classmethod
    def double_integrator(cls, dof: int, dt: float = 0.01, zoh: bool = True) -> "DiscreteDynamics":
        """Exact zero-order-hold pair, or forward Euler (``B = [0; dt I]``) if ``zoh`` is False."""
        eye = np.eye(dof)
        zero = np.zeros((dof, dof))
        A = np.block([[eye, dt * eye], [zero, eye]])
        B = np.vstack([(0.5 * dt**2 if zoh else 0.0) * eye, dt * eye])
        return cls(A, B, float(dt))

    @property
    def nx(self) -> int:
        return self.A.shape[0]

    @property
    def nu(self) -> int:
        return self.B.shape[1]


# ---------------------------------------------------------------------------
# closed-form rigid-body terms, vectorized over leading batch dimensions


def _lever_arms(p: ArmParams) -> np.ndarray:
    """L[i, j]: length of segment j contributing to the COM of link i."""
    n = p.dof
    L = np.zeros((n, n))
    for i in range(n):
        L[i, :i] = p.link_lengths[:i]
        L[i, i] = p.com_offsets[i]
    return L


def _com_jacobians(p: ArmParams, q: np.ndarray):
    """Linear COM Jacobians and their partials w.r.t. q.

    Returns ``J`` with shape (..., n_links, 2, n) and ``dJ`` with shape
    (..., n_links, 2, n, n) where the last axis indexes the derivative.
    """
    n = p.dof
    phi = np.cumsum(q, axis=-1)
    s, c = np.sin(phi), np.cos(phi)
    L = _lever_arms(p)
    batch = q.shape[:-1]
    J = np.zeros(batch + (n, 2, n))
    dJ = np.zeros(batch + (n, 2, n, n))
    for i in range(n):
        for k in range(i + 1):
            for j in range(k, i + 1):
                J[..., i, 0, k] += -L[i, j] * s[..., j]
                J[..., i, 1, k] += L[i, j] * c[..., j]
                # d(phi_j)/d(q_m) = 1 for m <= j
                for m in range(j + 1):
                    dJ[..., i, 0, k, m] += -L[i, j] * c[..., j]
                    dJ[..., i, 1, k, m] += -L[i, j] * s[..., j]
    return J, dJ


def mass_matrix(p: ArmParams, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    J, _ = _com_jacobians(p, q)
    M = np.einsum("i,...iak,...ial->...kl", p.link_masses, J, J)
    n = p.dof
    for i in range(n):
        M[..., : i + 1, : i + 1] += p.link_inertias[i]
    return M


def mass_matrix_partials(p: ArmParams, q) -> np.ndarray:
    """dM[..., k, l, m] = d M_kl / d q_m."""
    q = np.asarray(q, dtype=float)
    J, dJ = _com_jacobians(p, q)
    half = np.einsum("i,...iakm,...ial->...klm", p.link_masses, dJ, J)
    return half + np.swapaxes(half, -3, -2)


def coriolis_matrix(p: ArmParams, q, qd) -> np.ndarray:
    """Christoffel-form Coriolis matrix (no damping)."""
    qd = np.asarray(qd, dtype=float)
    dM = mass_matrix_partials(p, q)
    # Gamma_kjm = 1/2 (dM_kj/dq_m + dM_km/dq_j - dM_jm/dq_k)
    gamma = 0.5 * (dM + np.swapaxes(dM, -1, -2) - np.moveaxis(dM, -1, -3))
    return np.einsum("...kjm,...m->...kj", gamma, qd)


def coupling_matrix(p: ArmParams, q, qd) -> np.ndarray:
    """Coriolis plus viscous damping."""
    return coriolis_matrix(p, q, qd) + np.diag(p.damping_diag)


def gravity_vector(p: ArmParams, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if p.gravity_accel == 0.0:
        return np.zeros(q.shape)
    J, _ = _com_jacobians(p, q)
    return p.gravity_accel * np.einsum("i,...ik->...k", p.link_masses, J[..., 1, :])


# ---------------------------------------------------------------------------
# single-state operations


def _check_state(model: ArmModel, s: State):
    if s.q.size != model.dof:
        raise ValueError(f"state has {s.q.size} joints, arm has {model.dof}")
    if not (np.all(np.isfinite(s.q)) and np.all(np.isfinite(s.qd))):
        raise ValueError("state must be finite")


def _check_accel(model: ArmModel, a) -> np.ndarray:
    a = np.asarray(a, dtype=float).reshape(-1)
    if a.size != model.dof:
        raise ValueError(f"acceleration has {a.size} entries, arm has {model.dof}")
    if not np.all(np.isfinite(a)):
        raise ValueError("acceleration must be finite")
    return a


def eval_dynamics(model: ArmModel, use_true: bool, s: State):
    """Return ``(M, C, g)`` at ``s`` for the nominal or the true parameters."""
    _check_state(model, s)
    p = model.params(use_true)
    return mass_matrix(p, s.q), coupling_matrix(p, s.q, s.qd), gravity_vector(p, s.q)


def feedback_linearize(model: ArmModel, s: State, a) -> np.ndarray:
    """Computed-torque law ``M0 a + C0 qd + g0`` using nominal parameters only."""
    _check_state(model, s)
    a = _check_accel(model, a)
    M0, C0, g0 = eval_dynamics(model, False, s)
    return M0 @ a + C0 @ s.qd + g0


def forward_dynamics(model: ArmModel, s: State, u) -> np.ndarray:
    """Joint acceleration of the true arm under torque ``u``."""
    M, C, g = eval_dynamics(model, True, s)
    return np.linalg.solve(M, np.asarray(u, dtype=float) - C @ s.qd - g)


def step_true(model: ArmModel, dyn: DiscreteDynamics, s: State, a) -> State:
    """Advance the feedback-linearized true arm by one sample.

    The realized acceleration is ``a + Delta_theta(q, qd, a)``; it is held
    over the sample and propagated through ``(A, B)``.
    """
    a = _check_accel(model, a)
    qdd = forward_dynamics(model, s, feedback_linearize(model, s, a))
    return State.from_vector(dyn.A @ s.x + dyn.B @ qdd)


def link_contributions(p: ArmParams, q, qd):
    """Per-link pieces of ``M``, Coriolis and ``g``.

    Every term is linear in (mass_i, inertia_i) and both scale together under
    a relative mass deviation, so ``M(theta) = M0 + sum_i theta_i * Mc[i]``.
    Shapes: (..., n, n, n), (..., n, n, n), (..., n, n) with the link axis
    first after the batch axes.
    """
    q = np.asarray(q, dtype=float)
    qd = np.asarray(qd, dtype=float)
    n = p.dof
    J, dJ = _com_jacobians(p, q)
    Mc = p.link_masses[:, None, None] * np.einsum("...iak,...ial->...ikl", J, J)
    for i in range(n):
        Mc[..., i, : i + 1, : i + 1] += p.link_inertias[i]
    half = p.link_masses[:, None, None, None] * np.einsum("...iakm,...ial->...iklm", dJ, J)
    dM = half + np.swapaxes(half, -3, -2)
    gamma = 0.5 * (dM + np.swapaxes(dM, -1, -2) - np.moveaxis(dM, -1, -3))
    Cc = np.einsum("...ikjm,...m->...ikj", gamma, qd)
    gc = p.gravity_accel * p.link_masses[:, None] * J[..., 1, :]
    return Mc, Cc, gc
