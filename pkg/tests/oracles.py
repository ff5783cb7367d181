"""Independent reference computations shared by unit and acceptance tests."""

from functools import lru_cache

import numpy as np

from koopquad import quadsim as qs


def _tumble(params, dt, horizon=1.0):
    """Integrate a tumbling, thrusting trajectory; returns the final state."""
    x = qs.make_state(v=(0.5, 0.0, 0.0), q=qs.euler_to_quat(0.2, -0.1, 0.3), omega=(1.0, -2.0, 1.5))
    u = np.array([0.50, 0.40, 0.46, 0.44])
    for _ in range(int(round(horizon / dt))):
        x = qs.rk4_step(x, u, dt, params)
    return x


@lru_cache(maxsize=None)
def measured_rk4_order() -> float:
    """Least-squares slope of log(error) vs log(dt) against a dt = 1e-5 reference over 1 s."""
    params = qs.QuadParams()
    ref = _tumble(params, 1e-5)
    dts = np.array([0.02, 0.01, 0.005, 0.0025])
    errs = np.array([np.linalg.norm(_tumble(params, dt) - ref) for dt in dts])
    return float(np.polyfit(np.log(dts), np.log(errs), 1)[0])


def scalar_dare_value_iteration(a, b, q, r, iters=10_000) -> float:
    """Riccati recursion ``P <- a^2 P - (a b P)^2 / (r + b^2 P) + q`` from ``P = 0``."""
    P = 0.0
    for _ in range(iters):
        P = a * a * P - (a * b * P) ** 2 / (r + b * b * P) + q
    return P


def dare_value_iteration(A, B, Q, R, iters=10_000):
    """Matrix Riccati recursion from ``P = 0``; returns ``(P, K)``."""
    A, B, Q, R = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, B, Q, R))
    P = np.zeros_like(Q)
    for _ in range(iters):
        G = R + B.T @ P @ B
        P = A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(G, B.T @ P @ A) + Q
        P = 0.5 * (P + P.T)
    K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    return P, K


def dmdc_oracle(X, Xp, U):
    """DMDc by normal equations: ``[A B] = X+ W^T (W W^T)^-1`` with ``W = [X; U]``."""
    W = np.vstack([X, U])
    return np.linalg.solve(W @ W.T, W @ Xp.T).T
