"""Offline synthesis of the tube controller.

A semidefinite program in ``E = P^-1`` and ``Y = K E`` finds a contracting
feedback ``a = a_bar + K (x - x_bar)`` for the double integrator while
trading off constraint tightening against a worst-case disturbance level.
From ``(P, K)`` and the error-bound constants the tube parameters follow in
closed form: ``d = |P^1/2 B|``, ``L_beta = a |K P^-1/2| + b |V P^-1/2|``,
``rho_tilde = rho + d L_beta`` and the steady-state tube ``delta_f``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import product

import cvxpy as cp
import numpy as np

from .arm import DiscreteDynamics
from .bounds import AccelSet, ErrorBoundConstants, StateBox

log = logging.getLogger(__name__)

# per-row normalizers used in the synthesis loss: configuration [rad],
# velocity [rad/s], acceleration [rad/s^2]
CONFIG_NORMALIZER = 0.1
VELOCITY_NORMALIZER = 2.0
ACCEL_NORMALIZER = 20.0
# keeps the disturbance set from collapsing when there is no model error
BETA_FLOOR = 1e-3
# relative slack on the certified rate so round-off cannot break the certificate
RATE_SLACK = 1e-9


class SynthesisError(RuntimeError):
    pass


def default_rho_grid() -> np.ndarray:
    return np.linspace(0.8, 0.99, 20)


def sym_sqrt(P: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(P)
    return (V * np.sqrt(w)) @ V.T


def sym_inv_sqrt(P: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(P)
    return (V / np.sqrt(w)) @ V.T


@dataclass(frozen=True)
class SynthesisConfig:
    """Constraint data for the synthesis SDP.

    ``A_x``/``A_u`` rows are unit norm; ``norm_x``/``norm_u`` divide them
    inside the loss only. ``w_halfwidth`` is the half-width of the state
    disturbance box ``W``.
    """

    rho_grid: np.ndarray
    A_x: np.ndarray
    b_x: np.ndarray
    A_u: np.ndarray
    b_u: np.ndarray
    w_halfwidth: np.ndarray
    norm_x: np.ndarray
    norm_u: np.ndarray

    def __post_init__(self):
        grid = np.atleast_1d(np.asarray(self.rho_grid, dtype=float))
        if grid.size == 0:
            raise ValueError("rho grid is empty")
        if np.any(grid <= 0) or np.any(grid >= 1):
            raise ValueError("every rho must lie in (0, 1)")
        object.__setattr__(self, "rho_grid", grid)
        for name in ("A_x", "A_u"):
            rows = np.linalg.norm(getattr(self, name), axis=1)
            if not np.allclose(rows, 1.0):
                raise ValueError(f"{name} rows must have unit norm")

    @property
    def w_vertices(self) -> np.ndarray:
        hw = np.asarray(self.w_halfwidth, dtype=float)
        return np.array(list(product((-1.0, 1.0), repeat=hw.size))) * hw

    @classmethod
    def build(cls, X: StateBox, accel: AccelSet, dyn: DiscreteDynamics,
              consts: ErrorBoundConstants, rho_grid=None) -> "SynthesisConfig":
        A_x, b_x = X.halfplanes()
        A_u, b_u = accel.halfplanes()
        n = X.dof
        norm_x = np.where(np.abs(A_x[:, :n]).sum(axis=1) > 0, CONFIG_NORMALIZER, VELOCITY_NORMALIZER)
        norm_u = np.full(A_u.shape[0], ACCEL_NORMALIZER)
        return cls(
            rho_grid=default_rho_grid() if rho_grid is None else rho_grid,
            A_x=A_x, b_x=b_x, A_u=A_u, b_u=b_u,
            w_halfwidth=disturbance_halfwidth(dyn, consts, X, accel),
            norm_x=norm_x, norm_u=norm_u,
        )


def disturbance_halfwidth(dyn, consts, X, accel, floor=BETA_FLOOR) -> np.ndarray:
    """Box over-approximation of ``B * {w : |w| <= beta_max}``."""
    beta_max = consts.a * accel.radius + consts.b * float(np.linalg.norm(X.qd_limit)) + consts.c
    return np.abs(dyn.B).max(axis=1) * max(beta_max, floor)


@dataclass(frozen=True)
class SdpSolution:
    E: np.ndarray
    Y: np.ndarray
    cx2: np.ndarray
    cu2: np.ndarray
    w2: float
    rho: float
    objective: float


def synthesize(cfg: SynthesisConfig, dyn: DiscreteDynamics, rho: float,
               solver: str = "CLARABEL") -> SdpSolution:
    """Solve the tightening-aware contraction SDP at a fixed ``rho``.

    The ``c^2`` outputs refer to the normalized rows ``A_x / norm_x`` and
    ``A_u / norm_u``.
    """
    if not 0 < rho < 1:
        raise ValueError("rho must lie in (0, 1)")
    A, B = dyn.A, dyn.B
    nx, nu = B.shape
    Ax = cfg.A_x / cfg.norm_x[:, None]
    Au = cfg.A_u / cfg.norm_u[:, None]
    m, n = Ax.shape[0], Au.shape[0]
    verts = cfg.w_vertices
    # the program is homogeneous: scaling W by s scales (E, Y, c^2, w^2) by s,
    # so solve with a unit-size W and map back
    scale = float(np.abs(verts).max()) if verts.size else 0.0
    if scale > 0:
        verts = verts / scale
    else:
        scale = 1.0

    E = cp.Variable((nx, nx), symmetric=True)
    Y = cp.Variable((nu, nx))
    cx2 = cp.Variable(m)
    cu2 = cp.Variable(n)
    w2 = cp.Variable()

    AEBY = A @ E + B @ Y
    cons = [cp.bmat([[rho**2 * E, AEBY.T], [AEBY, E]]) >> 0]
    for i in range(m):
        row = Ax[i:i + 1] @ E
        cons.append(cp.bmat([[cp.reshape(cx2[i], (1, 1), order="C"), row], [row.T, E]]) >> 0)
    for j in range(n):
        row = Au[j:j + 1] @ Y
        cons.append(cp.bmat([[cp.reshape(cu2[j], (1, 1), order="C"), row], [row.T, E]]) >> 0)
    for v in verts:
        vv = v.reshape(-1, 1)
        cons.append(cp.bmat([[cp.reshape(w2, (1, 1), order="C"), vv.T], [vv, E]]) >> 0)

    loss = ((m + n) * w2 + cp.sum(cx2) + cp.sum(cu2)) / (2 * (1 - rho))
    prob = cp.Problem(cp.Minimize(loss), cons)
    try:
        prob.solve(solver=solver)
    except cp.SolverError as exc:
        raise SynthesisError(f"synthesis infeasible at rho={rho:.4f}: {exc}") from exc
    if prob.status != cp.OPTIMAL:
        raise SynthesisError(f"synthesis infeasible at rho={rho:.4f} ({prob.status})")
    Ev = 0.5 * (E.value + E.value.T)
    return SdpSolution(scale * Ev, scale * Y.value, scale * cx2.value, scale * cu2.value,
                       scale * float(w2.value), rho, scale * float(prob.value))


def certified_rate(P, K, dyn: DiscreteDynamics) -> float:
    """Exact contraction factor of ``A + B K`` in the ``P``-norm."""
    Acl = dyn.A + dyn.B @ K
    Ph, Pih = sym_sqrt(P), sym_inv_sqrt(P)
    return float(np.linalg.norm(Ph @ Acl @ Pih, 2))


def recover_gain(sol: SdpSolution, max_cond: float = 1e12):
    """``P = E^-1``, ``K = Y E^-1``."""
    w = np.linalg.eigvalsh(sol.E)
    if w[0] <= 0 or w[-1] / w[0] > max_cond:
        raise SynthesisError(f"E is numerically singular (eigenvalues {w[0]:.3g}..{w[-1]:.3g})")
    P = np.linalg.inv(sol.E)
    P = 0.5 * (P + P.T)
    K = np.linalg.solve(sol.E, sol.Y.T).T
    return P, K


@dataclass(frozen=True)
class TubeController:
    P: np.ndarray
    K: np.ndarray
    rho: float
    d: float
    L_beta: float
    rho_tilde: float
    delta_f: float
    tightening_x: np.ndarray
    tightening_u: np.ndarray
    r_p: float
    w_bar: float
    delta_bar: float
    provenance: dict = field(default_factory=dict)

    @property
    def valid(self) -> bool:
        """Flexible tube requires ``rho_tilde < 1``."""
        return self.rho_tilde < 1

    @property
    def P_sqrt(self) -> np.ndarray:
        return sym_sqrt(self.P)

    def p_norm(self, e) -> np.ndarray:
        e = np.asarray(e, dtype=float)
        return np.sqrt(np.einsum("...i,ij,...j->...", e, self.P, e))

    def contraction_residual(self, dyn: DiscreteDynamics) -> float:
        """Smallest eigenvalue of ``rho^2 P - Acl' P Acl``."""
        Acl = dyn.A + dyn.B @ self.K
        S = self.rho**2 * self.P - Acl.T @ self.P @ Acl
        return float(np.linalg.eigvalsh(0.5 * (S + S.T))[0])

    def to_dict(self) -> dict:
        out = {}
        for k, v in self.__dict__.items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        if not np.isfinite(self.delta_f):
            out["delta_f"] = None
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TubeController":
        d = dict(d)
        for k in ("P", "K", "tightening_x", "tightening_u"):
            d[k] = np.array(d[k], dtype=float)
        if d.get("delta_f") is None:
            d["delta_f"] = float("inf")
        return cls(**d)


def derive_constants(P, K, dyn: DiscreteDynamics, consts: ErrorBoundConstants, *,
                     rho: float, A_x, A_u, w_halfwidth=None, provenance=None) -> TubeController:
    """Fill in every derived tube constant from a certified ``(P, K)`` pair."""
    P = np.asarray(P, dtype=float)
    if np.linalg.eigvalsh(P)[0] <= 0:
        raise ValueError("P must be positive definite")
    nx, nu = dyn.B.shape
    Pih = sym_inv_sqrt(P)
    d = float(np.linalg.norm(sym_sqrt(P) @ dyn.B, 2))
    V = np.hstack([np.zeros((nu, nx - nu)), np.eye(nu)])
    L_beta = consts.a * np.linalg.norm(K @ Pih, 2) + consts.b * np.linalg.norm(V @ Pih, 2)
    rho_tilde = rho + d * L_beta
    if rho_tilde < 1:
        delta_f = d * consts.c / (1 - rho_tilde)
    else:
        log.info("rho=%.4f gives rho_tilde=%.4f >= 1", rho, rho_tilde)
        delta_f = float("inf")
    tx = np.linalg.norm(np.asarray(A_x) @ Pih, axis=1)
    tu = np.linalg.norm(np.asarray(A_u) @ K @ Pih, axis=1)
    nq = nx - nu
    Pq = P[:nq, :nq] - P[:nq, nq:] @ np.linalg.solve(P[nq:, nq:], P[nq:, :nq])
    r_p = 1.0 / np.sqrt(np.linalg.eigvalsh(Pq)[0])
    if w_halfwidth is None:
        w_bar = 0.0
    else:
        hw = np.asarray(w_halfwidth, dtype=float)
        verts = np.array(list(product((-1.0, 1.0), repeat=hw.size))) * hw
        w_bar = float(np.sqrt(np.einsum("vi,ij,vj->v", verts, P, verts).max()))
    return TubeController(
        P=P, K=np.asarray(K, dtype=float), rho=float(rho), d=d, L_beta=float(L_beta),
        rho_tilde=float(rho_tilde), delta_f=float(delta_f), tightening_x=tx, tightening_u=tu,
        r_p=float(r_p), w_bar=w_bar, delta_bar=w_bar / (1 - rho), provenance=provenance or {},
    )


def max_normalized_tightening(ctrl: TubeController, cfg: SynthesisConfig) -> float:
    """Largest rigid-tube tightening ``c_i * delta_bar`` relative to its normalizer."""
    tx = ctrl.tightening_x * ctrl.delta_bar / cfg.norm_x
    tu = ctrl.tightening_u * ctrl.delta_bar / cfg.norm_u
    return float(max(tx.max(), tu.max()))


def candidates(cfg: SynthesisConfig, dyn: DiscreteDynamics, consts: ErrorBoundConstants):
    """Synthesize at every grid point; infeasible points are skipped."""
    out = []
    for rho in cfg.rho_grid:
        try:
            sol = synthesize(cfg, dyn, float(rho))
            P, K = recover_gain(sol)
        except SynthesisError as exc:
            log.warning("%s", exc)
            continue
        # the solver meets the LMI only to its tolerance; use the rate the
        # recovered pair actually achieves whenever it exceeds the grid value
        rate = max(float(rho), certified_rate(P, K, dyn) * (1 + RATE_SLACK))
        if rate >= 1:
            log.warning("rho=%.4f: recovered gain does not contract", rho)
            continue
        out.append(derive_constants(P, K, dyn, consts, rho=rate, A_x=cfg.A_x, A_u=cfg.A_u,
                                    w_halfwidth=cfg.w_halfwidth,
                                    provenance={"rho_grid": float(rho)}))
    return out


def select_candidate(cfg: SynthesisConfig, dyn: DiscreteDynamics, consts: ErrorBoundConstants,
                     mode: str = "flexible", pool=None) -> TubeController:
    """Pick the grid candidate with the smallest max normalized tightening.

    In flexible mode candidates with ``rho_tilde >= 1`` are discarded first;
    rigid mode keeps them. Ties go to the smaller rho. ``pool`` may be a
    precomputed candidate list, so both modes can share one grid solve.
    """
    if mode not in ("flexible", "rigid"):
        raise ValueError("mode must be 'flexible' or 'rigid'")
    pool = candidates(cfg, dyn, consts) if pool is None else pool
    if mode == "flexible":
        pool = [c for c in pool if c.valid]
    if not pool:
        raise SynthesisError("no valid controller; reduce uncertainty")
    scores = [max_normalized_tightening(c, cfg) for c in pool]
    best = min(range(len(pool)), key=lambda i: (scores[i], pool[i].rho))
    return pool[best]


def tube_step(ctrl: TubeController, delta: float, x_bar, a_bar, consts: ErrorBoundConstants) -> float:
    """Next tube scaling ``rho_tilde delta + d beta(x_bar, a_bar)``."""
    if delta < 0:
        raise ValueError("delta must be non-negative")
    x_bar = np.asarray(x_bar, dtype=float)
    nu = np.asarray(a_bar).size
    beta = consts.beta(x_bar[nu:], np.asarray(a_bar, dtype=float))
    return float(ctrl.rho_tilde * delta + ctrl.d * beta)
