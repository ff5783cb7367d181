"""Snapshot datasets: per-trajectory logs of states and rotor inputs."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .quadsim import STATE_NAMES

CSV_COLUMNS = ("t",) + STATE_NAMES + ("u0", "u1", "u2", "u3", "traj_id")


@dataclass
class TrajectoryLog:
    """One rollout. ``states`` has one more row than ``inputs``."""

    times: np.ndarray         # (N+1,)
    states: np.ndarray        # (N+1, 12) Euler form
    inputs: np.ndarray        # (N, 4)
    quat_states: np.ndarray | None = None  # (N+1, 13), simulator form; not persisted
    diverged_at: int | None = None

    def __post_init__(self):
        if len(self.states) != len(self.inputs) + 1 or len(self.times) != len(self.states):
            raise ValueError("a log needs exactly one more state than inputs")

    @property
    def n_pairs(self) -> int:
        return len(self.inputs)


@dataclass
class SnapshotDataset:
    """Concatenation of trajectory logs.

    Snapshot pairs never straddle two trajectories: ``X`` takes rows ``0..N-1``
    and ``X_plus`` rows ``1..N`` of each log separately.
    """

    logs: list[TrajectoryLog] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def n_pairs(self) -> int:
        return sum(lg.n_pairs for lg in self.logs)

    def pair_counts(self) -> list[int]:
        return [lg.n_pairs for lg in self.logs]

    def boundaries(self) -> np.ndarray:
        """Column offsets where each trajectory starts in ``X``."""
        return np.concatenate([[0], np.cumsum(self.pair_counts())])

    @property
    def X(self) -> np.ndarray:
        return np.hstack([lg.states[:-1].T for lg in self.logs])

    @property
    def X_plus(self) -> np.ndarray:
        return np.hstack([lg.states[1:].T for lg in self.logs])

    @property
    def Gamma(self) -> np.ndarray:
        return np.hstack([lg.inputs.T for lg in self.logs])

    # -- persistence ---------------------------------------------------------

    def to_csv(self, path, header_comment: str | None = None) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for tid, lg in enumerate(self.logs):
                for k in range(len(lg.states)):
                    u = lg.inputs[k] if k < lg.n_pairs else (np.nan,) * 4
                    row = [lg.times[k], *lg.states[k], *u]
                    w.writerow([repr(float(v)) for v in row] + [tid])

    @classmethod
    def from_csv(cls, path) -> "SnapshotDataset":
        rows: dict[int, list] = {}
        with Path(path).open() as fh:
            lines = (ln for ln in fh if not ln.startswith("#"))
            reader = csv.reader(lines)
            header = next(reader)
            if tuple(header) != CSV_COLUMNS:
                raise ValueError(f"unexpected CSV header: {header}")
            for row in reader:
                rows.setdefault(int(row[-1]), []).append([float(v) for v in row[:-1]])
        logs = []
        for tid in sorted(rows):
            a = np.array(rows[tid])
            logs.append(TrajectoryLog(times=a[:, 0], states=a[:, 1:13], inputs=a[:-1, 13:17]))
        return cls(logs)

    def truncated(self, n_pairs: int) -> "SnapshotDataset":
        """First ``n_pairs`` pairs of the first trajectory (for small experiments)."""
        lg = self.logs[0]
        n = min(n_pairs, lg.n_pairs)
        q = None if lg.quat_states is None else lg.quat_states[: n + 1]
        return SnapshotDataset([TrajectoryLog(lg.times[: n + 1], lg.states[: n + 1], lg.inputs[:n], q)],
                               dict(self.meta))
