"""Discrete-time LQR in the lifted space and Koopman-LQR closed loops.

The constant observable ``1`` is not a state: it is identically one, has an
eigenvalue of exactly 1 and cannot be influenced by the input. The Riccati
equation is therefore solved on the lifted coordinates *after* the constant,
and the returned gain carries a zero column for it. Under the tracking law
``u = u_ff - K (lift(x) - lift(x_ref))`` the constant's error is zero anyway.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_discrete_are

from . import quadsim as qs
from .koopman import LiftedModel
from .quadsim import QuadParams

logger = logging.getLogger(__name__)

DARE_TOL = 1e-12
DARE_MAX_ITER = 200


class DareError(RuntimeError):
    pass


@dataclass
class LqrWeights:
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        _check_sym(self.Q, "Q")
        _check_sym(self.R, "R")
        if np.linalg.eigvalsh(self.Q).min() < -1e-10:
            raise ValueError("Q must be positive semi-definite")
        if np.linalg.eigvalsh(self.R).min() <= 0:
            raise ValueError("R must be positive definite")

    @classmethod
    def default(cls, n: int = 12, l: int = 4, q: float = 1e3, r: float = 1.0) -> "LqrWeights":
        return cls(np.eye(n) * q, np.eye(l) * r)


@dataclass
class LqrGain:
    K: np.ndarray
    P: np.ndarray
    spectral_radius: float
    residual: float
    iterations: int
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "K": self.K.tolist(), "P": self.P.tolist(),
            "spectral_radius": self.spectral_radius,
            "dare_residual": self.residual, "iterations": self.iterations,
            **self.meta,
        }


def _check_sym(M, name, tol=1e-9):
    if M.shape[0] != M.shape[1] or np.linalg.norm(M - M.T) > tol:
        raise ValueError(f"{name} must be square and symmetric")


def pad_Q(Q, p: int) -> np.ndarray:
    """Embed the state weight in the top-left block of a ``p x p`` zero matrix."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    _check_sym(Q, "Q")
    n = Q.shape[0]
    if p < n:
        raise ValueError("lifted dimension must be at least the state dimension")
    Qb = np.zeros((p, p))
    Qb[:n, :n] = Q
    return Qb


def _residual_matrix(A, B, Q, R, P, dtype=float) -> np.ndarray:
    A, B, Q, R, P = (np.asarray(M, dtype=dtype) for M in (A, B, Q, R, P))
    BtPA = B.T @ P @ A
    G = R + B.T @ P @ B
    X = np.linalg.solve(G.astype(float), BtPA.astype(float)).astype(dtype)
    if dtype is not float:
        # one step of iterative refinement carried in the wider type
        X = X + np.linalg.solve(G.astype(float), (BtPA - G @ X).astype(float)).astype(dtype)
    res = A.T @ P @ A - P - BtPA.T @ X + Q
    return res.astype(float)


def dare_residual(A, B, Q, R, P) -> float:
    """Frobenius norm of the Riccati residual at ``P``."""
    return float(np.linalg.norm(_residual_matrix(A, B, Q, R, P)))


def solve_stein(Ac, W) -> np.ndarray:
    """``X = Ac' X Ac + W`` by a dense Kronecker solve (fine for p up to ~40)."""
    n = Ac.shape[0]
    M = np.eye(n * n) - np.kron(Ac.T, Ac.T)
    return np.linalg.solve(M, W.reshape(-1)).reshape(n, n)


def _newton_kleinman(A, B, Q, R, P, tol: float, max_iter: int):
    """Newton-Kleinman iteration in defect-correction form.

    With ``Ac`` the closed loop at ``P`` the Newton correction solves
    ``dP - Ac' dP Ac = Res(P)``. Solving for the small correction rather than
    for ``P`` itself keeps the Stein solve's error relative to the residual,
    which matters when ``||P||`` is large and ``Ac`` is far from normal. The
    residual is formed in extended precision where the platform has it.
    Each step is halved until the residual decreases; the iteration stops at
    ``res <= tol * ||P||`` or when no step makes progress.
    """
    best, best_res = P, dare_residual(A, B, Q, R, P)
    steps = 0
    while steps < max_iter and best_res > tol * np.linalg.norm(best):
        K = np.linalg.solve(R + B.T @ best @ B, B.T @ best @ A)
        dP = solve_stein(A - B @ K, _residual_matrix(A, B, Q, R, best, np.longdouble))
        dP = 0.5 * (dP + dP.T)
        for t in 0.5 ** np.arange(8):
            Pn = best + t * dP
            res = dare_residual(A, B, Q, R, Pn)
            if np.isfinite(res) and res < best_res:
                break
        else:
            break
        best, best_res = Pn, res
        steps += 1
    return best, steps


def _doubling(A, B, Q, R, tol: float, max_iter: int):
    """Structure-preserving doubling; returns ``(P, iterations)`` or ``(None, max_iter)``.

    With ``G = B R^-1 B'`` the iteration

        W   = I + G_k H_k
        A+  = A_k W^-1 A_k
        G+  = G_k + A_k W^-1 G_k A_k'
        H+  = H_k + A_k' H_k W^-1 A_k

    converges quadratically to ``H -> P`` for stabilizable/detectable data.
    """
    I = np.eye(A.shape[0])
    Ak = A.copy()
    Gk = B @ np.linalg.solve(R, B.T)
    Hk = Q.copy()
    for it in range(1, max_iter + 1):
        W = I + Gk @ Hk
        WA = np.linalg.solve(W, Ak)
        WG = np.linalg.solve(W, Gk)
        H_new = Hk + Ak.T @ Hk @ WA
        Gk = Gk + Ak @ WG @ Ak.T
        Ak = Ak @ WA
        H_new = 0.5 * (H_new + H_new.T)
        Gk = 0.5 * (Gk + Gk.T)
        if not np.all(np.isfinite(H_new)):
            return None, it
        delta = np.linalg.norm(H_new - Hk)
        Hk = H_new
        if delta <= tol * max(1.0, np.linalg.norm(Hk)):
            return Hk, it
    return None, max_iter


def solve_dare(A, B, Q, R, tol: float = DARE_TOL, max_iter: int = DARE_MAX_ITER,
               init: str = "schur") -> LqrGain:
    """Stabilizing solution of ``A'PA - P - A'PB (R + B'PB)^-1 B'PA + Q = 0``.

    An initial estimate from ``init`` ("schur": scipy's generalized Schur
    solver; "doubling": the structure-preserving doubling above) is polished
    by Newton-Kleinman steps. On lifted models with badly scaled observables
    either initial estimate alone leaves a relative residual around 1e-4 to
    1e-7; the Newton phase brings it to ~1e-9. If the Schur solver fails the
    doubling estimate is used instead.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    n = A.shape[0]
    if init not in ("schur", "doubling"):
        raise ValueError(f"unknown DARE initializer {init!r}")

    P0, it, used = None, 0, init
    if init == "schur":
        try:
            P0 = solve_discrete_are(A, B, Q, R)
        except (np.linalg.LinAlgError, ValueError) as exc:
            logger.warning("Schur DARE solver failed (%s); falling back to doubling", exc)
    if P0 is None or not np.all(np.isfinite(P0)):
        used = "doubling"
        P0, it = _doubling(A, B, Q, R, tol, max_iter)
    if P0 is None:
        from .evaluation import check_stabilizability
        ok = check_stabilizability(A, B)
        raise DareError(f"doubling did not converge in {max_iter} iterations "
                        f"(stabilizable={ok})")

    P0 = 0.5 * (P0 + P0.T)
    P, newton = _newton_kleinman(A, B, Q, R, P0, tol, max_iter)
    K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    rho = float(np.max(np.abs(np.linalg.eigvals(A - B @ K)))) if n else 0.0
    res = dare_residual(A, B, Q, R, P)
    if res > 1e-8 * max(np.linalg.norm(P), 1e-300):
        logger.warning("DARE residual %.3g exceeds 1e-8 * ||P||", res)
    if rho >= 1.0:
        from .evaluation import check_stabilizability
        raise DareError(f"no stabilizing solution: spectral radius {rho:.6g} "
                        f"(stabilizable={check_stabilizability(A, B)})")
    return LqrGain(K, P, rho, res, it + newton,
                   {"init": used, "init_iterations": it, "newton_steps": newton})


def design(model: LiftedModel, weights: LqrWeights) -> LqrGain:
    """Koopman-LQR gain for ``model`` with the state weight padded into the lifted space.

    For dictionaries with a leading constant the DARE is solved on the
    remaining ``p - 1`` coordinates (whose first ``n`` are ``x``) and ``K``
    gets a zero column for the constant.
    """
    dic = model.dictionary
    off = 1 if dic.has_constant else 0
    A = model.A[off:, off:]
    B = model.B[off:]
    Qb = pad_Q(weights.Q, A.shape[0])
    gain = solve_dare(A, B, Qb, weights.R)
    K = np.zeros((model.l, model.p))
    K[:, off:] = gain.K
    P = np.zeros((model.p, model.p))
    P[off:, off:] = gain.P
    full_rho = float(np.max(np.abs(np.linalg.eigvals(model.A - model.B @ K))))
    meta = {
        "Q": weights.Q.tolist(), "R": weights.R.tolist(),
        "constant_excluded": bool(off),
        "spectral_radius_full": full_rho,
        **gain.meta,
    }
    return LqrGain(K, P, gain.spectral_radius, gain.residual, gain.iterations, meta)


def koopman_lqr_control(model: LiftedModel, gain: LqrGain, x, x_ref, u_ff=None,
                        return_raw: bool = False):
    """``u = u_ff - K (lift(x) - lift(x_ref))`` clamped at zero thrust.

    ``x`` and ``x_ref`` are 12-dim Euler-form states.
    """
    if u_ff is None:
        u_ff = QuadParams().hover_command()
    dz = model.lift(x) - model.lift(x_ref)
    u_raw = np.asarray(u_ff, dtype=float) - gain.K @ dz
    u = np.maximum(u_raw, 0.0)
    return (u, u_raw) if return_raw else u


@dataclass
class ClosedLoopLog:
    times: np.ndarray
    states: np.ndarray        # (N+1, 12)
    reference: np.ndarray     # (N+1, 12)
    inputs: np.ndarray        # (N, 4), applied (clamped)
    raw_inputs: np.ndarray    # (N, 4), before clamping
    diverged_at: int | None = None

    def to_dict(self) -> dict:
        return {
            "times": self.times.tolist(), "states": self.states.tolist(),
            "reference": self.reference.tolist(), "inputs": self.inputs.tolist(),
            "raw_inputs": self.raw_inputs.tolist(), "diverged_at": self.diverged_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClosedLoopLog":
        return cls(np.array(d["times"]), np.array(d["states"]).reshape(-1, 12),
                   np.array(d["reference"]).reshape(-1, 12),
                   np.array(d["inputs"]).reshape(-1, 4),
                   np.array(d["raw_inputs"]).reshape(-1, 4), d.get("diverged_at"))

    def save(self, path, **extra):
        with open(path, "w") as fh:
            json.dump({**extra, **self.to_dict()}, fh)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ClosedLoopLog":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def rollout_closed_loop(model: LiftedModel, gain: LqrGain, trajectory, params: QuadParams,
                        steps: int, x0=None, ref_states=None, u_ff=None) -> ClosedLoopLog:
    """Drive the nonlinear simulator with the Koopman-LQR law along ``trajectory``.

    ``ref_states`` (``(N+1, 12)``) defaults to the flatness reference of the
    trajectory; ``x0`` (13-dim) defaults to the first reference state.
    """
    from .reference import reference_states

    if steps < 0 or steps > len(trajectory) - 1:
        raise ValueError("steps must lie within the trajectory length")
    if ref_states is None:
        ref_states = reference_states(trajectory, params)
    if u_ff is None:
        u_ff = params.hover_command()
    x = qs.from_euler_state(ref_states[0]) if x0 is None else np.asarray(x0, dtype=float)
    dt = trajectory.dt

    states = np.empty((steps + 1, 12))
    us = np.empty((steps, 4))
    raws = np.empty((steps, 4))
    states[0] = qs.to_euler_state(x)
    diverged = None
    for k in range(steps):
        u, raw = koopman_lqr_control(model, gain, states[k], ref_states[k], u_ff, return_raw=True)
        x = qs.rk4_step(x, u, dt, params)
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > 1e6:
            diverged = k + 1
            logger.error("closed loop diverged at step %d", diverged)
            states, us, raws = states[: k + 1], us[:k], raws[:k]
            break
        us[k], raws[k] = u, raw
        states[k + 1] = qs.to_euler_state(x)
    n = len(states)
    return ClosedLoopLog(trajectory.timestamps[:n].copy(), states, ref_states[:n].copy(), us, raws, diverged)
