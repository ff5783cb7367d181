"""Lifting dictionary and EDMD-with-control identification (LS and TLS)."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import linalg

logger = logging.getLogger(__name__)

N_STATE = 12
N_INPUT = 4


# ---------------------------------------------------------------------------
# Dictionaries
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LiftingDictionary:
    """Ordered list of observables.

    ``dedup``   : [1, x, sin(p), cos(p), vec(R skew(w))]            p = 28
    ``literal`` : [1, x, p, v, sin(p), cos(p), vec(R skew(w))]     p = 34
    ``identity``: [x]                                               p = 12

    ``omega_frame`` selects the angular velocity inside the rotation block:
    ``body`` uses w_B as stored in the state, ``world`` uses R w_B.
    """

    name: str = "dedup"
    omega_frame: str = "body"

    def __post_init__(self):
        if self.name not in ("dedup", "literal", "identity"):
            raise ValueError(f"unknown dictionary {self.name!r}")
        if self.omega_frame not in ("body", "world"):
            raise ValueError(f"unknown omega frame {self.omega_frame!r}")

    @property
    def dim(self) -> int:
        return {"dedup": 28, "literal": 34, "identity": N_STATE}[self.name]

    @property
    def has_constant(self) -> bool:
        return self.name != "identity"

    @property
    def state_slice(self) -> slice:
        """Where the identity copy of ``x`` sits inside ``z``."""
        start = 1 if self.has_constant else 0
        return slice(start, start + N_STATE)

    def describe(self) -> str:
        return {
            "dedup": "[1, x(12), sin(p)(3), cos(p)(3), vec(R*skew(omega))(9)]",
            "literal": "[1, x(12), p(3), v(3), sin(p)(3), cos(p)(3), vec(R*skew(omega))(9)]",
            "identity": "[x(12)]",
        }[self.name]

    def selector(self) -> np.ndarray:
        C = np.zeros((N_STATE, self.dim))
        C[:, self.state_slice] = np.eye(N_STATE)
        return C

    def lift_many(self, X) -> np.ndarray:
        """Lift every column of an ``12 x T`` state matrix."""
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[0] != N_STATE:
            raise ValueError(f"expected a {N_STATE} x T matrix, got {X.shape}")
        if self.name == "identity":
            return X.copy()
        T = X.shape[1]
        pos, vel = X[0:3], X[3:6]
        blocks = [np.ones((1, T)), X]
        if self.name == "literal":
            blocks += [pos, vel]
        blocks += [np.sin(pos), np.cos(pos),
                   _vec_R_skew(X[6:9], X[9:12], world=self.omega_frame == "world")]
        return np.vstack(blocks)

    def lift(self, x) -> np.ndarray:
        return self.lift_many(np.asarray(x, dtype=float).reshape(N_STATE, 1))[:, 0]


def _vec_R_skew(att, omega, world: bool = False) -> np.ndarray:
    """Column-stacked ``R(att) @ skew(omega)`` for each column, shape (9, T)."""
    roll, pitch, yaw = att
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    R = np.array([
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ])  # (3, 3, T)
    if world:
        omega = np.einsum("ikt,kt->it", R, np.asarray(omega))
    wx, wy, wz = omega
    zero = np.zeros_like(wx)
    W = np.array([[zero, -wz, wy], [wz, zero, -wx], [-wy, wx, zero]])
    M = np.einsum("ikt,kjt->ijt", R, W)
    # vec stacks columns: M[:,0], M[:,1], M[:,2]
    return M.transpose(1, 0, 2).reshape(9, -1)


def lift(x, dictionary: LiftingDictionary | str = "dedup") -> np.ndarray:
    if isinstance(dictionary, str):
        dictionary = LiftingDictionary(dictionary)
    return dictionary.lift(x)


def assemble(dataset, dictionary: LiftingDictionary | str = "dedup"):
    """Lifted snapshot matrices ``(Xi_X, Xi_Xplus, Gamma)``; inputs pass through un-lifted."""
    if isinstance(dictionary, str):
        dictionary = LiftingDictionary(dictionary)
    X, Xp, G = dataset.X, dataset.X_plus, dataset.Gamma
    if not (X.shape[1] == Xp.shape[1] == G.shape[1]):
        raise ValueError("X, X_plus and Gamma must have the same number of columns")
    if X.shape[1] == 0:
        raise ValueError("empty dataset")
    return dictionary.lift_many(X), dictionary.lift_many(Xp), G.copy()


def check_rank(Omega, factor: float = linalg.CUTOFF_FACTOR) -> linalg.RankReport:
    """Numerical row rank of the stacked regressor ``[Xi(X); Gamma]``."""
    Omega = np.asarray(Omega, dtype=float)
    rows, cols = Omega.shape
    if cols < rows:
        raise ValueError(f"need at least as many snapshots as rows (T={cols} < {rows})")
    rep = linalg.rank_report(Omega, factor)
    if not rep.full_row_rank:
        logger.warning("regressor is rank deficient: rank %d < %d rows (cond=%.3g)",
                       rep.rank, rows, rep.condition_number)
    return rep


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

@dataclass
class LiftedModel:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    dictionary: LiftingDictionary = field(default_factory=LiftingDictionary)
    method: str = "ls"
    residual: float = float("nan")
    svd_cutoff: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        p = self.A.shape[0]
        if self.A.shape != (p, p) or self.B.shape[0] != p or self.C.shape[1] != p:
            raise ValueError("inconsistent model dimensions")

    @property
    def p(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return self.C.shape[0]

    @property
    def l(self) -> int:
        return self.B.shape[1]

    def lift(self, x) -> np.ndarray:
        return self.dictionary.lift(x)

    def to_dict(self) -> dict:
        return {
            "p": self.p, "n": self.n, "l": self.l,
            "dictionary": self.dictionary.name,
            "dictionary_layout": self.dictionary.describe(),
            "omega_frame": self.dictionary.omega_frame,
            "A": self.A.tolist(), "B": self.B.tolist(), "C": self.C.tolist(),
            "method": self.method, "residual": self.residual,
            "svd_cutoff": self.svd_cutoff, "meta": self.meta,
        }

    def to_json(self, path=None, **extra) -> str:
        d = self.to_dict()
        d.update(extra)
        s = json.dumps(d, indent=1)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(s + "\n")
        return s

    @classmethod
    def from_dict(cls, d: dict) -> "LiftedModel":
        return cls(
            A=np.array(d["A"], dtype=float).reshape(d["p"], d["p"]),
            B=np.array(d["B"], dtype=float).reshape(d["p"], d["l"]),
            C=np.array(d["C"], dtype=float).reshape(d["n"], d["p"]),
            dictionary=LiftingDictionary(d["dictionary"], d.get("omega_frame", "body")),
            method=d["method"], residual=float(d["residual"]),
            svd_cutoff=float(d["svd_cutoff"]), meta=d.get("meta", {}),
        )

    @classmethod
    def from_json(cls, path) -> "LiftedModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _check_shapes(Xi_X, Xi_Xplus, Gamma):
    Xi_X, Xi_Xplus, Gamma = (np.asarray(a, dtype=float) for a in (Xi_X, Xi_Xplus, Gamma))
    if Xi_X.shape != Xi_Xplus.shape or Gamma.shape[1] != Xi_X.shape[1]:
        raise ValueError("shapes of the lifted snapshot matrices do not agree")
    for a in (Xi_X, Xi_Xplus, Gamma):
        if not np.all(np.isfinite(a)):
            raise ValueError("data contains non-finite values")
    return Xi_X, Xi_Xplus, Gamma


def _split(K, p, dictionary, method, residual, cutoff, meta):
    A, B = K[:, :p], K[:, p:]
    if dictionary is None:
        dictionary = LiftingDictionary("identity") if p == N_STATE else LiftingDictionary()
    if dictionary.dim != p:
        raise ValueError(f"dictionary {dictionary.name!r} has dim {dictionary.dim}, data has {p}")
    meta = {"regularization": "none", **meta}
    return LiftedModel(A, B, dictionary.selector(), dictionary, method, residual, cutoff, meta)


def fit_ls(Xi_X, Xi_Xplus, Gamma, dictionary: LiftingDictionary | None = None,
           factor: float = linalg.CUTOFF_FACTOR) -> LiftedModel:
    """Least-squares fit ``[A B] = Xi(X+) [Xi(X); Gamma]^+``."""
    Xi_X, Xi_Xplus, Gamma = _check_shapes(Xi_X, Xi_Xplus, Gamma)
    p = Xi_X.shape[0]
    Omega = np.vstack([Xi_X, Gamma])
    Omega_pinv, cut = linalg.pinv(Omega, factor)
    K = Xi_Xplus @ Omega_pinv
    res = float(np.linalg.norm(Xi_Xplus - K @ Omega))
    return _split(K, p, dictionary, "ls", res, cut, {})


def _tls_solve(Omega, Y, v22_tol, rank: int | None = None):
    """TLS for ``Y ~ K Omega``; returns ``(K or None, info)``.

    With ``D = [Omega; Y]^T = U S V^T`` split after the ``m`` regressor rows,
    ``K^T = -V12 V22^+`` where ``V12, V22`` hold the right singular vectors
    past ``rank`` (``m`` by default, which is classical TLS).
    """
    m = Omega.shape[0]
    k = m if rank is None else int(rank)
    D = np.vstack([Omega, Y]).T
    _, s, Vt = np.linalg.svd(D, full_matrices=False)
    V = Vt.T
    V12, V22 = V[:m, k:], V[m:, k:]
    sv22 = np.linalg.svd(V22, compute_uv=False)
    info = {"sigma": s, "sigma_min_v22": float(sv22[-1]), "rank": k}
    if sv22[-1] <= v22_tol * max(sv22[0], 1.0):
        return None, info
    if k == m:
        return np.linalg.solve(V22.T, -V12.T), info
    return (-V12 @ np.linalg.pinv(V22)).T, info


def _well_posed_rank(Omega, Y) -> tuple[int, float, float]:
    """Number of regressor directions whose energy exceeds the TLS misfit level.

    TLS is unique and stable when ``sigma_min(Omega) > sigma_{m+1}([Omega; Y])``.
    Directions below that level are dominated by misfit; truncating them is
    the standard truncated-TLS regularization. Returns ``(k, sigma_min(Omega),
    sigma_{m+1})``.
    """
    m = Omega.shape[0]
    so = np.linalg.svd(Omega, compute_uv=False)
    sd = np.linalg.svd(np.vstack([Omega, Y]), compute_uv=False)
    level = sd[m] if sd.size > m else 0.0
    return int(np.sum(so > level)), float(so[-1]), float(level)


def _mixed_tls_solve(Omega, Y, exact, v22_tol, truncate: bool = True):
    """Mixed LS-TLS: rows flagged in ``exact`` carry no error.

    The exact regressors are eliminated with a QR factorization of the stacked
    data, TLS is solved on the remaining block (truncated to its well-posed
    rank when ``truncate``) and the exact part follows by back-substitution.
    """
    order = np.concatenate([np.flatnonzero(exact), np.flatnonzero(~exact)])
    n1 = int(exact.sum())
    m = Omega.shape[0]
    D = np.vstack([Omega[order], Y]).T
    R = np.linalg.qr(D, mode="r")
    R11, R12, R1y = R[:n1, :n1], R[:n1, n1:m], R[:n1, m:]
    Om2, Y2 = R[n1:, n1:m].T, R[n1:, m:].T
    k, smin, level = _well_posed_rank(Om2, Y2)
    rank = k if truncate else None
    K2, info = _tls_solve(Om2, Y2, v22_tol, rank)
    info.update({"rank_full": m - n1, "sigma_min_regressor": smin, "misfit_level": level})
    if K2 is None:
        return None, info
    X2 = K2.T                                    # (m - n1, p)
    X1 = np.linalg.solve(R11, R1y - R12 @ X2)    # (n1, p)
    K = np.empty((Y.shape[0], m))
    K[:, order] = np.vstack([X1, X2]).T
    return K, info


def fit_tls(Xi_X, Xi_Xplus, Gamma, dictionary: LiftingDictionary | None = None,
            factor: float = linalg.CUTOFF_FACTOR, variant: str = "classical",
            v22_tol: float = 1e-10) -> LiftedModel:
    """Total-least-squares fit of ``Xi(X+) ~ [A B] [Xi(X); Gamma]``.

    ``variant="classical"`` perturbs every row: with ``D = [Omega; Y]^T = U S V^T``
    and ``V`` split after the ``m = p + l`` regressor rows, ``K = (-V12 V22^{-1})^T``.

    ``variant="mixed"`` keeps constant observables and the commanded inputs
    exact and scales every remaining row to unit RMS, so that the
    equal-variance error model of TLS is meaningful across observables of very
    different magnitude. The TLS block is truncated to its well-posed rank
    (see :func:`_well_posed_rank`); when the problem is well posed this is
    plain mixed TLS.

    When ``V22`` is numerically singular no TLS solution exists; the LS fit is
    returned instead and ``meta['tls_fallback']`` is set.
    """
    Xi_X, Xi_Xplus, Gamma = _check_shapes(Xi_X, Xi_Xplus, Gamma)
    p = Xi_X.shape[0]
    Omega = np.vstack([Xi_X, Gamma])
    m, T = Omega.shape
    if T <= m + p:
        raise ValueError(f"TLS needs more than {m + p} snapshots, got {T}")

    if variant == "classical":
        K, info = _tls_solve(Omega, Xi_Xplus, v22_tol)
        k, smin, level = _well_posed_rank(Omega, Xi_Xplus)
        info.update({"rank_full": m, "sigma_min_regressor": smin, "misfit_level": level})
    elif variant == "mixed":
        exact = np.zeros(m, dtype=bool)
        exact[:p] = np.ptp(Xi_X, axis=1) == 0.0
        exact[p:] = True
        so = np.sqrt(np.mean(Omega**2, axis=1))
        sy = np.sqrt(np.mean(Xi_Xplus**2, axis=1))
        so[so == 0] = 1.0
        sy[sy == 0] = 1.0
        Ks, info = _mixed_tls_solve(Omega / so[:, None], Xi_Xplus / sy[:, None], exact, v22_tol)
        K = None if Ks is None else sy[:, None] * Ks / so[None, :]
    else:
        raise ValueError(f"unknown TLS variant {variant!r}")

    meta = {
        "tls_variant": variant,
        "tls_rank": info["rank"], "tls_rank_full": info["rank_full"],
        "tls_well_posed": info["sigma_min_regressor"] > info["misfit_level"],
        "tls_sigma_min_regressor": info["sigma_min_regressor"],
        "tls_misfit_level": info["misfit_level"],
        "tls_sigma_min_v22": info["sigma_min_v22"],
    }
    if K is None:
        logger.warning("TLS block V22 is singular (sigma_min=%.3g); falling back to LS",
                       info["sigma_min_v22"])
        model = fit_ls(Xi_X, Xi_Xplus, Gamma, dictionary, factor)
        model.meta.update({"tls_fallback": True, **meta})
        return model
    if not meta["tls_well_posed"]:
        logger.info("TLS block truncated to rank %d of %d (misfit level %.3g > sigma_min %.3g)",
                    info["rank"], info["rank_full"], info["misfit_level"],
                    info["sigma_min_regressor"])

    res = float(np.linalg.norm(Xi_Xplus - K @ Omega))
    cut = linalg.svd_cutoff(info["sigma"], (T, m + p), factor)
    return _split(K, p, dictionary, "tls", res, cut, {"tls_fallback": False, **meta})


def fit(dataset, dictionary: LiftingDictionary | str = "dedup", method: str = "tls",
        factor: float = linalg.CUTOFF_FACTOR,
        tls_variant: str = "mixed") -> tuple[LiftedModel, linalg.RankReport | None]:
    """Lift, rank-check and fit in one call."""
    if isinstance(dictionary, str):
        dictionary = LiftingDictionary(dictionary)
    Xi_X, Xi_Xp, G = assemble(dataset, dictionary)
    try:
        rep = check_rank(np.vstack([Xi_X, G]), factor)
    except ValueError as exc:
        logger.warning("rank check skipped: %s", exc)
        rep = None
    if method == "ls":
        model = fit_ls(Xi_X, Xi_Xp, G, dictionary, factor)
    elif method == "tls":
        model = fit_tls(Xi_X, Xi_Xp, G, dictionary, factor, variant=tls_variant)
    else:
        raise ValueError(f"unknown fit method {method!r}")
    return model, rep


def predict(model: LiftedModel, x0, inputs, steps: int) -> np.ndarray:
    """Open-loop lifted rollout; returns ``steps + 1`` states starting with ``x0``."""
    inputs = np.asarray(inputs, dtype=float).reshape(-1, model.l)
    if steps < 0:
        raise ValueError("steps must be non-negative")
    if len(inputs) < steps:
        raise ValueError("not enough inputs for the requested horizon")
    z = model.lift(x0)
    out = np.empty((steps + 1, model.n))
    out[0] = np.asarray(x0, dtype=float)
    for k in range(steps):
        z = model.A @ z + model.B @ inputs[k]
        out[k + 1] = model.C @ z
    return out
