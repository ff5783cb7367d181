"""Truncated-SVD pseudo-inverse and numerical rank with one shared cutoff rule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Singular values below sigma_max * max(shape) * eps * CUTOFF_FACTOR are treated as zero.
CUTOFF_FACTOR = 10.0


def svd_cutoff(s: np.ndarray, shape, factor: float = CUTOFF_FACTOR) -> float:
    if s.size == 0:
        return 0.0
    return float(s[0] * max(shape) * np.finfo(float).eps * factor)


def pinv(M, factor: float = CUTOFF_FACTOR) -> tuple[np.ndarray, float]:
    """Moore-Penrose pseudo-inverse via SVD; returns ``(M_pinv, cutoff)``."""
    M = np.asarray(M, dtype=float)
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    cut = svd_cutoff(s, M.shape, factor)
    keep = s > cut
    s_inv = np.zeros_like(s)
    s_inv[keep] = 1.0 / s[keep]
    return (Vt.T * s_inv) @ U.T, cut


@dataclass
class RankReport:
    rank: int
    rows: int
    cols: int
    singular_values: np.ndarray
    cutoff: float

    @property
    def full_row_rank(self) -> bool:
        return self.rank == self.rows

    @property
    def condition_number(self) -> float:
        s = self.singular_values
        if s.size == 0 or s[-1] == 0.0:
            return float("inf")
        return float(s[0] / s[-1])

    def to_dict(self) -> dict:
        return {
            "rank": self.rank, "rows": self.rows, "cols": self.cols,
            "full_row_rank": self.full_row_rank,
            "condition_number": self.condition_number,
            "cutoff": self.cutoff,
            "singular_values": [float(v) for v in self.singular_values],
        }


def rank_report(M, factor: float = CUTOFF_FACTOR) -> RankReport:
    M = np.asarray(M)
    if not np.iscomplexobj(M):
        M = M.astype(float)
    s = np.linalg.svd(M, compute_uv=False)
    cut = svd_cutoff(s, M.shape, factor)
    return RankReport(int(np.sum(s > cut)), M.shape[0], M.shape[1], s, cut)
