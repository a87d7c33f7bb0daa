"""Model-error bounds after feedback linearization.

With the computed-torque law built from nominal parameters the true arm
behaves as ``qdd = a + Delta_theta(q, qd, a)`` where

    Delta_theta = Mt a + Ct qd + gt,
    Mt = -M^-1 M_theta,  Ct = -M^-1 C_theta,  gt = -M^-1 g_theta,

and ``M`` is the *true* mass matrix. The norm of the residual is bounded by
``beta(x, a) = a_c |a| + b_c |qd| + c_c``; the three constants are suprema of
induced 2-norms over the parameter box and the state box and are estimated by
sampling here.

This module also produces the polytopic acceleration set used by the MPC:
a box of accelerations whose image under the computed-torque law stays inside
the torque limits for every state of the state box.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict
from itertools import product

import numpy as np

from .arm import ArmModel, ArmParams, State, UncertaintySet, link_contributions

log = logging.getLogger(__name__)

DEFAULT_ACCEL_LIMIT = 20.0
ACCEL_FLOOR = 1e-3


@dataclass(frozen=True)
class StateBox:
    """Symmetric box ``|q_i| <= q_limit_i``, ``|qd_i| <= qd_limit_i``."""

    q_limit: np.ndarray
    qd_limit: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q_limit", np.array(self.q_limit, dtype=float).reshape(-1))
        object.__setattr__(self, "qd_limit", np.array(self.qd_limit, dtype=float).reshape(-1))
        if self.q_limit.shape != self.qd_limit.shape:
            raise ValueError("q_limit and qd_limit must match in length")
        if np.any(self.q_limit <= 0) or np.any(self.qd_limit <= 0):
            raise ValueError("state limits must be positive")

    @classmethod
    def default(cls, dof: int) -> "StateBox":
        return cls(np.full(dof, np.pi), np.full(dof, 2.0))

    @property
    def dof(self) -> int:
        return self.q_limit.size

    @property
    def limits(self) -> np.ndarray:
        return np.concatenate([self.q_limit, self.qd_limit])

    def halfplanes(self):
        """``(A_x, b_x)`` with unit-norm rows, ordered +e_0, -e_0, +e_1, ..."""
        return box_halfplanes(self.limits)

    def sample(self, rng: np.random.Generator, n: int):
        q = rng.uniform(-1, 1, (n, self.dof)) * self.q_limit
        qd = rng.uniform(-1, 1, (n, self.dof)) * self.qd_limit
        return q, qd

    def contains(self, x, tol: float = 0.0) -> np.ndarray:
        return np.all(np.abs(x) <= self.limits + tol, axis=-1)

    def to_dict(self) -> dict:
        return {"q_limit": self.q_limit.tolist(), "qd_limit": self.qd_limit.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "StateBox":
        return cls(d["q_limit"], d["qd_limit"])


def box_halfplanes(limits):
    limits = np.asarray(limits, dtype=float)
    n = limits.size
    A = np.zeros((2 * n, n))
    A[0::2] = np.eye(n)
    A[1::2] = -np.eye(n)
    return A, np.repeat(limits, 2)


def box_vertices(halfwidth) -> np.ndarray:
    halfwidth = np.asarray(halfwidth, dtype=float)
    return np.array(list(product((-1.0, 1.0), repeat=halfwidth.size))) * halfwidth


@dataclass(frozen=True)
class TorqueSet:
    torque_limits: np.ndarray

    def __post_init__(self):
        lim = np.array(self.torque_limits, dtype=float).reshape(-1)
        if np.any(~(lim > 0)):
            raise ValueError("torque limits infeasible: limits must be strictly positive")
        object.__setattr__(self, "torque_limits", lim)

    def contains(self, u, tol: float = 0.0) -> np.ndarray:
        return np.all(np.abs(u) <= self.torque_limits + tol, axis=-1)

    def to_dict(self) -> dict:
        return {"torque_limits": self.torque_limits.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "TorqueSet":
        return cls(d["torque_limits"])


@dataclass(frozen=True)
class AccelSet:
    """Symmetric acceleration box ``|a_i| <= box_halfwidth_i``."""

    box_halfwidth: np.ndarray
    shrink_iterations: int = 0

    def __post_init__(self):
        object.__setattr__(self, "box_halfwidth", np.array(self.box_halfwidth, dtype=float).reshape(-1))

    @property
    def vertices(self) -> np.ndarray:
        return box_vertices(self.box_halfwidth)

    def halfplanes(self):
        return box_halfplanes(self.box_halfwidth)

    @property
    def radius(self) -> float:
        return float(np.linalg.norm(self.box_halfwidth))

    def to_dict(self) -> dict:
        return {"box_halfwidth": self.box_halfwidth.tolist(), "shrink_iterations": self.shrink_iterations}

    @classmethod
    def from_dict(cls, d: dict) -> "AccelSet":
        return cls(d["box_halfwidth"], int(d.get("shrink_iterations", 0)))


@dataclass(frozen=True)
class ErrorBoundConstants:
    a: float
    b: float
    c: float
    samples_used: int = 0
    margin: float = 1.0
    seed: int | None = None
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        if min(self.a, self.b, self.c) < 0:
            raise ValueError("error-bound constants must be non-negative")

    def beta(self, qd, a):
        """``a_c |a| + b_c |qd| + c_c``; broadcasts over leading axes."""
        return (self.a * np.linalg.norm(a, axis=-1)
                + self.b * np.linalg.norm(qd, axis=-1) + self.c)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ErrorBoundConstants":
        return cls(**d)


# ---------------------------------------------------------------------------


def error_matrices(nominal: ArmParams, theta, q, qd):
    """Batched ``(Mt, Ct, gt)`` for per-sample parameter deviations ``theta``."""
    theta = np.asarray(theta, dtype=float)
    n = nominal.dof
    Mc, Cc, gc = link_contributions(nominal, q, qd)
    tm, td = theta[..., :n], theta[..., n:]
    M0 = Mc.sum(axis=-3)
    M_th = np.einsum("...i,...ikl->...kl", tm, Mc)
    C_th = np.einsum("...i,...ikl->...kl", tm, Cc)
    C_th = C_th + (td * nominal.damping_diag)[..., :, None] * np.eye(n)
    g_th = np.einsum("...i,...ik->...k", tm, gc)
    M_true = M0 + M_th
    rhs = np.concatenate([M_th, C_th, g_th[..., None]], axis=-1)
    sol = -np.linalg.solve(M_true, rhs)
    return sol[..., :n], sol[..., n:2 * n], sol[..., 2 * n]


def eval_delta(model: ArmModel, s: State, a) -> np.ndarray:
    """Residual acceleration ``Delta_theta(q, qd, a)`` of the linearized arm."""
    a = np.asarray(a, dtype=float)
    Mt, Ct, gt = error_matrices(model.nominal, model.theta, s.q, s.qd)
    return Mt @ a + Ct @ s.qd + gt


def _spectral_norm(mats: np.ndarray) -> np.ndarray:
    return np.linalg.svd(mats, compute_uv=False)[..., 0]


def _estimation_samples(unc: UncertaintySet, X: StateBox, n_samples: int, rng):
    """Uniform samples plus every parameter vertex paired with uniform states.

    Half of the velocities sit on the velocity-box vertices: the Coriolis term
    is linear in ``qd``, so its induced norm is convex in ``qd``.
    """
    n = X.dof
    theta = unc.sample(rng, n_samples)
    verts = unc.vertices()
    reps = max(1, n_samples // len(verts))
    theta = np.concatenate([theta, np.repeat(verts, reps, axis=0)])
    total = theta.shape[0]
    q, qd = X.sample(rng, total)
    corner = rng.integers(0, 2, (total, n)) * 2.0 - 1.0
    on_corner = rng.random(total) < 0.5
    qd[on_corner] = (corner * X.qd_limit)[on_corner]
    return theta, q, qd


def estimate_constants(nominal: ArmParams, unc: UncertaintySet, X: StateBox,
                       accel: AccelSet | None = None, n_samples: int = 20_000,
                       margin: float = 1.1, seed: int = 0,
                       chunk: int = 20_000) -> ErrorBoundConstants:
    """Sampled suprema of ``|Mt|``, ``|Ct|``, ``|gt|`` times a safety margin.

    ``accel`` is accepted for interface symmetry; the constants do not depend
    on the acceleration set because ``Mt`` is independent of ``a``.
    """
    if n_samples < 10_000:
        raise ValueError("n_samples must be at least 1e4")
    if margin < 1:
        raise ValueError("margin must be >= 1")
    if unc.is_empty:
        return ErrorBoundConstants(0.0, 0.0, 0.0, 0, margin, seed)
    rng = np.random.default_rng(seed)
    theta, q, qd = _estimation_samples(unc, X, n_samples, rng)
    a_max = b_max = c_max = 0.0
    # pre-generated samples make the max-reduction independent of chunking
    for lo in range(0, theta.shape[0], chunk):
        sl = slice(lo, lo + chunk)
        Mt, Ct, gt = error_matrices(nominal, theta[sl], q[sl], qd[sl])
        a_max = max(a_max, float(_spectral_norm(Mt).max()))
        b_max = max(b_max, float(_spectral_norm(Ct).max()))
        c_max = max(c_max, float(np.linalg.norm(gt, axis=-1).max()))
    log.debug("sampled maxima a=%g b=%g c=%g", a_max, b_max, c_max)
    return ErrorBoundConstants(margin * a_max, margin * b_max, margin * c_max,
                               samples_used=int(theta.shape[0]), margin=margin, seed=seed)


@dataclass(frozen=True)
class BetaReport:
    max_ratio: float
    n_validation: int
    violations: int

    @property
    def passed(self) -> bool:
        return self.violations == 0


def certify_beta(consts: ErrorBoundConstants, nominal: ArmParams, unc: UncertaintySet,
                 X: StateBox, accel: AccelSet, n_validation: int = 100_000,
                 seed: int = 1, chunk: int = 50_000) -> BetaReport:
    """Monte-Carlo check of ``|Delta| <= beta`` on fresh samples."""
    if consts.seed is not None and seed == consts.seed:
        raise ValueError("validation seed must differ from the estimation seed")
    rng = np.random.default_rng(seed)
    n = nominal.dof
    worst, violations = 0.0, 0
    for lo in range(0, n_validation, chunk):
        m = min(chunk, n_validation - lo)
        theta = unc.sample(rng, m)
        q, qd = X.sample(rng, m)
        a = rng.uniform(-1, 1, (m, n)) * accel.box_halfwidth
        Mt, Ct, gt = error_matrices(nominal, theta, q, qd)
        delta = np.einsum("...kl,...l->...k", Mt, a) + np.einsum("...kl,...l->...k", Ct, qd) + gt
        dn = np.linalg.norm(delta, axis=-1)
        beta = consts.beta(qd, a)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(dn == 0, 0.0, dn / beta)
        worst = max(worst, float(ratio.max()))
        violations += int(np.sum(dn > beta))
    return BetaReport(worst, n_validation, violations)


def convexify_accel_set(nominal: ArmParams, U: TorqueSet, X: StateBox,
                        n_samples: int = 100_000, shrink_factor: float = 0.99,
                        initial: float = DEFAULT_ACCEL_LIMIT, seed: int = 0,
                        n_validation: int = 100_000, max_rounds: int = 20) -> AccelSet:
    """Shrink an acceleration box until every vertex maps into the torque box.

    The condition is checked on sampled states; after convergence a fresh
    validation batch is drawn and any violating states join the training set
    before shrinking resumes.
    """
    if not 0 < shrink_factor < 1:
        raise ValueError("shrink_factor must lie in (0, 1)")
    n = nominal.dof
    rng = np.random.default_rng(seed)
    halfwidth = np.full(n, float(initial))
    unit_verts = box_vertices(np.ones(n))
    iterations = 0

    def torque_parts(q, qd):
        Mc, Cc, gc = link_contributions(nominal, q, qd)
        C = Cc.sum(axis=-3) + np.diag(nominal.damping_diag)
        bias = np.einsum("...kl,...l->...k", C, qd) + gc.sum(axis=-2)
        return Mc.sum(axis=-3), bias

    def violated(M, bias, hw):
        u = np.einsum("...kl,vl->...vk", M, unit_verts * hw) + bias[..., None, :]
        return ~np.all(np.abs(u) <= U.torque_limits, axis=-1)

    q, qd = X.sample(rng, n_samples)
    # include velocity corners, where centrifugal terms peak
    corner = (rng.integers(0, 2, (n_samples, n)) * 2.0 - 1.0) * X.qd_limit
    q, qd = np.concatenate([q, q]), np.concatenate([qd, corner])
    M, bias = torque_parts(q, qd)
    for _ in range(max_rounds):
        while np.any(violated(M, bias, halfwidth)):
            halfwidth = halfwidth * shrink_factor
            iterations += 1
            if np.any(halfwidth < ACCEL_FLOOR):
                raise ValueError("torque limits infeasible: acceleration box shrank below floor")
        vq, vqd = X.sample(rng, n_validation)
        vM, vbias = torque_parts(vq, vqd)
        bad = np.any(violated(vM, vbias, halfwidth), axis=-1)
        if not np.any(bad):
            return AccelSet(halfwidth, iterations)
        M = np.concatenate([M, vM[bad]])
        bias = np.concatenate([bias, vbias[bad]])
    raise RuntimeError("acceleration set did not validate")
