"""NRMSE metrics, spectra, controllability/observability and comparison reports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .quadsim import STATE_NAMES

GROUPS = {
    "position": slice(0, 3),
    "velocity": slice(3, 6),
    "euler": slice(6, 9),
    "angular_velocity": slice(9, 12),
}
GROUP_LABELS = {
    "position": "p_WB  Position",
    "velocity": "v_WB  Velocity",
    "euler": "E_WB  Euler angles",
    "angular_velocity": "w_B   Angular velocity",
}


class MetricUndefined(ValueError):
    """The reference signal has zero norm, so a normalized error does not exist."""


def nrmse(x_pred, x_true) -> float:
    """``100 * ||x_pred - x_true|| / ||x_true||`` over the flattened sequences, in percent."""
    x_pred = np.asarray(x_pred, dtype=float)
    x_true = np.asarray(x_true, dtype=float)
    if x_pred.shape != x_true.shape or x_true.size == 0:
        raise ValueError("sequences must be non-empty and of equal shape")
    den = np.linalg.norm(x_true)
    if den == 0.0:
        raise MetricUndefined("NRMSE undefined: reference has zero norm")
    return float(100.0 * np.linalg.norm(x_pred - x_true) / den)


def group_nrmse(states, reference) -> dict[str, float]:
    return {g: nrmse(states[:, s], reference[:, s]) for g, s in GROUPS.items()}


# ---------------------------------------------------------------------------
# Spectra and structural checks
# ---------------------------------------------------------------------------

@dataclass
class Spectrum:
    eigenvalues: np.ndarray  # complex, sorted by modulus, descending

    @property
    def moduli(self) -> np.ndarray:
        return np.abs(self.eigenvalues)

    @property
    def spectral_radius(self) -> float:
        return float(self.moduli.max()) if self.eigenvalues.size else 0.0

    @property
    def schur_stable(self) -> bool:
        return self.spectral_radius < 1.0 - 1e-9

    @property
    def verdict(self) -> str:
        return "Schur-stable" if self.schur_stable else "unstable"

    def to_dict(self) -> dict:
        return {
            "real": self.eigenvalues.real.tolist(),
            "imag": self.eigenvalues.imag.tolist(),
            "spectral_radius": self.spectral_radius,
            "n_outside_unit_disk": int(np.sum(self.moduli > 1.0)),
            "verdict": self.verdict,
        }


def spectrum(M) -> Spectrum:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("matrix must be square")
    ev = np.linalg.eigvals(M)
    return Spectrum(ev[np.argsort(-np.abs(ev), kind="stable")])


@dataclass
class StructureReport:
    kind: str
    rank: int
    dim: int
    rank_report: linalg.RankReport

    @property
    def passed(self) -> bool:
        return self.rank == self.dim

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "rank": self.rank, "dim": self.dim,
            "verdict": "pass" if self.passed else "fail",
            "condition_number": self.rank_report.condition_number,
            "cutoff": self.rank_report.cutoff,
            "singular_values": [float(s) for s in self.rank_report.singular_values],
        }


def controllability_matrix(A, B) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    blocks = [B]
    for _ in range(A.shape[0] - 1):
        blocks.append(A @ blocks[-1])
    return np.hstack(blocks)


def check_controllability(A, B, factor: float = linalg.CUTOFF_FACTOR) -> StructureReport:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    if A.shape[0] != A.shape[1]:
        raise ValueError("A must be square")
    rep = linalg.rank_report(controllability_matrix(A, B), factor)
    return StructureReport("controllability", rep.rank, A.shape[0], rep)


def check_observability(A, C, factor: float = linalg.CUTOFF_FACTOR) -> StructureReport:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.asarray(C, dtype=float).reshape(-1, A.shape[0])
    rep = linalg.rank_report(controllability_matrix(A.T, C.T).T, factor)
    return StructureReport("observability", rep.rank, A.shape[0], rep)


def check_stabilizability(A, B, factor: float = linalg.CUTOFF_FACTOR) -> bool:
    """PBH test on the eigenvalues outside the open unit disk."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    n = A.shape[0]
    for lam in np.linalg.eigvals(A):
        if abs(lam) >= 1.0 - 1e-9:
            M = np.hstack([A - lam * np.eye(n), B])
            if linalg.rank_report(M, factor).rank < n:
                return False
    return True


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _mean_std(values) -> dict:
    v = np.asarray(values, dtype=float)
    return {"mean": float(v.mean()), "std": float(v.std()) if v.size > 1 else 0.0,
            "runs": [float(x) for x in v]}


@dataclass
class EvalReport:
    controllers: dict = field(default_factory=dict)   # name -> group -> {mean, std, runs}
    spectra: dict = field(default_factory=dict)
    rank: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def ratio(self, num: str = "koopman", den: str = "pid") -> dict:
        if num not in self.controllers or den not in self.controllers:
            return {}
        return {g: self.controllers[num][g]["mean"] / self.controllers[den][g]["mean"]
                if self.controllers[den][g]["mean"] > 0 else float("inf")
                for g in self.controllers[num]}

    def to_dict(self) -> dict:
        ratios = {f"{n}_over_pid": self.ratio(n, "pid") for n in self.controllers if n != "pid"}
        return {"nrmse_percent": self.controllers, "ratios": ratios,
                "spectra": self.spectra, "rank": self.rank, "meta": self.meta}

    def to_json(self, path=None) -> str:
        s = json.dumps(self.to_dict(), indent=1, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(s + "\n")
        return s

    def table(self) -> str:
        """Aligned text table, one column per controller, rows as in the NRMSE summary."""
        names = list(self.controllers)
        rows = list(GROUPS) + ["mean"]
        cells = {n: [f"{self.controllers[n][g]['mean']:.4f} ± {self.controllers[n][g]['std']:.4f}"
                     for g in rows] for n in names}
        heads = {n: f"{n} %NRMSE" for n in names}
        widths = {n: max(len(heads[n]), *(len(c) for c in cells[n])) for n in names}
        lw = max(len(v) for v in GROUP_LABELS.values())
        lines = [f"{'state':<{lw}}" + "".join(f"  {heads[n]:>{widths[n]}}" for n in names)]
        for i, g in enumerate(rows):
            label = GROUP_LABELS.get(g, "Mean")
            lines.append(f"{label:<{lw}}" + "".join(f"  {cells[n][i]:>{widths[n]}}" for n in names))
        return "\n".join(lines)


def summarize_runs(per_run: list[dict]) -> dict:
    """Aggregate per-run group NRMSE dicts into mean ± std across runs.

    The ``mean`` row averages the four group values within each run first.
    """
    out = {g: _mean_std([r[g] for r in per_run]) for g in GROUPS}
    out["mean"] = _mean_std([np.mean([r[g] for g in GROUPS]) for r in per_run])
    return out


def compare(logs: dict, references) -> EvalReport:
    """Per-group NRMSE of every named controller against the reference, across runs.

    ``logs`` maps a controller name to a list (one entry per run) of
    ``(N+1, 12)`` state arrays; ``references`` is the matching list of
    reference arrays on the same time grid.
    """
    references = [np.asarray(r, dtype=float) for r in references]
    if not logs or not references:
        raise ValueError("need at least one controller and one run")
    per = {}
    for name, runs in logs.items():
        if len(runs) != len(references):
            raise ValueError(f"{name}: {len(runs)} runs for {len(references)} references")
        per[name] = []
        for states, ref in zip(runs, references):
            states = np.asarray(states, dtype=float)
            if states.shape != ref.shape:
                raise ValueError(f"{name}: log and reference time grids differ "
                                 f"({states.shape} vs {ref.shape})")
            per[name].append(group_nrmse(states, ref))
    return EvalReport({n: summarize_runs(v) for n, v in per.items()})


def compare_controllers(koopman_logs, pid_logs, references) -> EvalReport:
    """Koopman-LQR against the PID baseline; see :func:`compare`."""
    return compare({"koopman": koopman_logs, "pid": pid_logs}, references)


def write_plot_csv(path, times, reference, series: dict, header_comment: str | None = None):
    """Per-step CSV: ``step, t``, then for each state ``<state>_reference`` and ``<state>_<name>``."""
    names = ["reference"] + list(series)
    arrays = [np.asarray(reference)] + [np.asarray(series[n]) for n in series]
    n = min(len(a) for a in arrays)
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "t"] + [f"{s}_{nm}" for s in STATE_NAMES for nm in names])
        for k in range(n):
            row = [k, repr(float(times[k]))]
            for j in range(len(STATE_NAMES)):
                row += [repr(float(a[k, j])) for a in arrays]
            w.writerow(row)
