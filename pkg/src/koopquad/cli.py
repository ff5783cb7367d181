"""Command-line pipeline: collect -> fit -> control -> eval.

Every output file carries the configuration hash and the root seed. With an
identical configuration, reruns produce byte-identical files.

Exit codes: 0 on success, 1 when a stage fails, 2 on usage errors (bad flags,
missing or malformed config file).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import koopman as km
from . import lqr
from . import quadsim as qs
from . import reference as rf
from .dataset import SnapshotDataset

logger = logging.getLogger("koopquad")

FIT_METHODS = ("ls", "tls")
DICTIONARIES = ("dedup", "literal", "identity")


class UsageError(Exception):
    """Bad configuration or arguments; maps to exit code 2."""


class StageError(Exception):
    """A pipeline stage failed; maps to exit code 1."""

    def __init__(self, stage: str, msg: str):
        super().__init__(f"stage '{stage}' failed: {msg}")
        self.stage = stage


@dataclass
class PipelineConfig:
    """Every knob of the default experiment. ``out`` is excluded from the hash."""

    params: dict = field(default_factory=lambda: qs.QuadParams().to_dict())
    helix_count: int = 5
    helix_radius: tuple = (1.0, 5.0)
    helix_height: tuple = (1.0, 6.0)
    helix_duration: float = 30.0
    helix_dt: float = 0.01
    helix_angular_rate: float = 0.5
    pid: dict = field(default_factory=lambda: rf.PidGains().to_dict())
    pid_integral: tuple = (0.6, 0.6, 1.0)
    dither: float = 0.0
    dictionary: str = "dedup"
    omega_frame: str = "body"
    fit: str = "tls"
    tls_variant: str = "mixed"
    svd_factor: float = 10.0
    lqr_q: float = 1e3
    lqr_r: float = 1.0
    seed: int = 0
    eval_runs: int = 5
    control_steps: int = 150
    predict_steps: int = 200
    out: str = "out"

    def __post_init__(self):
        self.helix_radius = tuple(float(v) for v in self.helix_radius)
        self.helix_height = tuple(float(v) for v in self.helix_height)
        self.pid_integral = tuple(float(v) for v in self.pid_integral)
        self.validate()

    def validate(self) -> None:
        try:
            self.quad_params()
            self.pd_gains()
            self.weights()
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid config: {exc}") from exc
        if self.fit not in FIT_METHODS:
            raise UsageError(f"fit must be one of {FIT_METHODS}, got {self.fit!r}")
        if self.dictionary not in DICTIONARIES:
            raise UsageError(f"dictionary must be one of {DICTIONARIES}, got {self.dictionary!r}")
        if self.omega_frame not in ("body", "world"):
            raise UsageError(f"omega_frame must be 'body' or 'world', got {self.omega_frame!r}")
        if self.tls_variant not in ("classical", "mixed"):
            raise UsageError(f"unknown tls_variant {self.tls_variant!r}")
        for name in ("helix_count", "eval_runs"):
            if int(getattr(self, name)) < 1:
                raise UsageError(f"{name} must be >= 1")
        for name in ("control_steps", "predict_steps"):
            if int(getattr(self, name)) < 0:
                raise UsageError(f"{name} must be >= 0")
        if self.helix_dt <= 0 or self.helix_duration <= 0:
            raise UsageError("helix_dt and helix_duration must be positive")
        if self.svd_factor <= 0 or self.dither < 0:
            raise UsageError("svd_factor must be positive and dither non-negative")
        for name in ("helix_radius", "helix_height"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise UsageError(f"{name} must satisfy 0 < low <= high")

    # -- derived objects -----------------------------------------------------

    def quad_params(self) -> qs.QuadParams:
        return qs.QuadParams.from_dict(self.params)

    def pd_gains(self) -> rf.PidGains:
        return rf.PidGains.from_dict(self.pid)

    def pid_gains(self) -> rf.PidGains:
        return self.pd_gains().with_integral(self.pid_integral)

    def weights(self) -> lqr.LqrWeights:
        return lqr.LqrWeights.default(km.N_STATE, km.N_INPUT, self.lqr_q, self.lqr_r)

    def child_seeds(self) -> tuple[int, int]:
        """Training and evaluation seeds split from the root seed."""
        a, b = np.random.SeedSequence(self.seed).generate_state(2)
        return int(a), int(b)

    def _specs(self, n: int, seed: int) -> list[rf.HelixSpec]:
        return rf.sample_random_specs(
            n, seed, radius=self.helix_radius, height=self.helix_height,
            duration=self.helix_duration, dt=self.helix_dt,
            angular_rate=self.helix_angular_rate)

    def train_specs(self) -> list[rf.HelixSpec]:
        return self._specs(self.helix_count, self.child_seeds()[0])

    def eval_specs(self) -> list[rf.HelixSpec]:
        return self._specs(self.eval_runs, self.child_seeds()[1])

    @property
    def tag(self) -> str:
        tag = self.fit if self.dictionary == "dedup" else f"{self.fit}_{self.dictionary}"
        return tag if self.omega_frame == "body" else f"{tag}_world"

    # -- persistence ---------------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        base = cls()
        merged = {**base.to_dict(), **d}
        # nested dicts are merged key-wise so partial overrides work
        merged["params"] = {**base.params, **d.get("params", {})}
        merged["pid"] = {**base.pid, **d.get("pid", {})}
        return cls(**merged)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise UsageError("config file must hold a JSON object")
        return cls.from_dict(d)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _stamp(cfg: PipelineConfig) -> dict:
    return {"config_hash": cfg.hash(), "seed": cfg.seed}


def _header(cfg: PipelineConfig) -> str:
    return f"config_hash={cfg.hash()} seed={cfg.seed}"


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _out(cfg: PipelineConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def cmd_collect(cfg: PipelineConfig) -> Path:
    """Simulate the PD-tracked training helices and write ``dataset.csv``."""
    params = cfg.quad_params()
    specs = cfg.train_specs()
    ds = rf.collect_dataset(specs, cfg.pd_gains(), params, dither=cfg.dither)
    for d in ds.meta["diverged"]:
        print(f"trajectory {d['trajectory']}: diverged at step {d['step']} (dropped)")
    if not ds.logs:
        raise StageError("collect", "every trajectory diverged")
    kept = [i for i in range(len(specs)) if i not in {d["trajectory"] for d in ds.meta["diverged"]}]
    for i, n in zip(kept, ds.pair_counts()):
        s = specs[i]
        print(f"trajectory {i}: radius={s.radius:.4f} height={s.total_height:.4f} pairs={n}")
    print(f"total snapshot pairs: {ds.n_pairs}")
    path = _out(cfg) / "dataset.csv"
    ds.to_csv(path, header_comment=_header(cfg))
    return path


def cmd_fit(cfg: PipelineConfig, dataset_path=None) -> Path:
    """Lift, rank-check, fit and export ``model_<tag>.json``."""
    out = _out(cfg)
    dataset_path = Path(dataset_path) if dataset_path else out / "dataset.csv"
    if not dataset_path.is_file():
        raise StageError("fit", f"dataset not found: {dataset_path}")
    ds = SnapshotDataset.from_csv(dataset_path)
    try:
        dic = km.LiftingDictionary(cfg.dictionary, cfg.omega_frame)
        model, rep = km.fit(ds, dic, cfg.fit, cfg.svd_factor, cfg.tls_variant)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise StageError("fit", f"{exc} (T={ds.n_pairs} snapshot pairs)") from exc
    if rep is None:
        print(f"rank check: WARNING fewer snapshots than regressor rows (T={ds.n_pairs})")
    else:
        verdict = "full row rank" if rep.full_row_rank else "WARNING rank deficient"
        print(f"rank check: rank {rep.rank} of {rep.rows} rows, cond {rep.condition_number:.4g}, {verdict}")
    spec_a = ev.spectrum(model.A)
    print(f"fit: method={model.method} dictionary={model.dictionary.name} p={model.p} "
          f"residual={model.residual:.6g}")
    print(f"spectral radius of A: {spec_a.spectral_radius:.6f} "
          f"({int(np.sum(spec_a.moduli > 1.0))} eigenvalues outside the unit disk)")
    path = out / f"model_{cfg.tag}.json"
    extra = {**_stamp(cfg), "rank_report": None if rep is None else rep.to_dict()}
    d = _jsonable({**model.to_dict(), **extra})
    path.write_text(json.dumps(d, indent=1) + "\n")
    return path


def _eval_runs(cfg: PipelineConfig):
    params = cfg.quad_params()
    for spec in cfg.eval_specs():
        traj = rf.gen_helix(spec)
        yield spec, traj, rf.reference_states(traj, params)


def cmd_control(cfg: PipelineConfig, model_path=None) -> Path:
    """Solve the DARE, write ``gain_<tag>.json`` and the closed-loop rollouts."""
    out = _out(cfg)
    model_path = Path(model_path) if model_path else out / f"model_{cfg.tag}.json"
    if not model_path.is_file():
        raise StageError("control", f"model not found: {model_path}")
    model = km.LiftedModel.from_json(model_path)
    weights = cfg.weights()
    try:
        gain = lqr.design(model, weights)
    except lqr.DareError as exc:
        ctrb = ev.check_controllability(model.A, model.B)
        raise StageError("control", f"{exc}; controllability rank {ctrb.rank}/{ctrb.dim}, "
                                    f"cond {ctrb.rank_report.condition_number:.3g}") from exc
    print(f"DARE: residual {gain.residual:.3e} (||P||_F {np.linalg.norm(gain.P):.3e}), "
          f"{gain.iterations} iterations")
    print(f"spectral radius of (A - BK): {gain.spectral_radius:.6f}")
    gain_path = out / f"gain_{cfg.tag}.json"
    gd = {**model.to_dict(), **gain.to_dict(), **_stamp(cfg), "model_file": model_path.name}
    gain_path.write_text(json.dumps(_jsonable(gd), indent=1) + "\n")

    params = cfg.quad_params()
    pid_gains = cfg.pid_gains()
    steps = cfg.control_steps
    runs = []
    for i, (spec, traj, ref) in enumerate(_eval_runs(cfg)):
        if steps > len(traj) - 1:
            raise StageError("control", f"steps={steps} exceed the helix length")
        kl = lqr.rollout_closed_loop(model, gain, traj, params, steps, ref_states=ref)
        if kl.diverged_at is not None:
            print(f"run {i}: Koopman-LQR rollout diverged at step {kl.diverged_at}")
        pid = rf.PidController(pid_gains, params, traj.dt)
        pl = rf.simulate_tracking(traj, pid, params, steps=steps, x0=qs.from_euler_state(ref[0]))
        runs.append({
            "helix": spec.to_dict(),
            "reference": ref[: steps + 1].tolist(),
            "koopman": kl.to_dict(),
            "pid": {"states": pl.states.tolist(), "inputs": pl.inputs.tolist(),
                    "diverged_at": pl.diverged_at},
        })
        if kl.diverged_at is None and steps > 0:
            g = ev.group_nrmse(kl.states, ref[: steps + 1])
            print(f"run {i}: Koopman-LQR NRMSE %: " +
                  " ".join(f"{k}={v:.4f}" for k, v in g.items()))
    path = out / f"rollout_{cfg.tag}.json"
    _write_json(path, {**_stamp(cfg), "tag": cfg.tag, "steps": steps, "dt": cfg.helix_dt,
                       "runs": runs})
    return path


def _model_diagnostics(out: Path, tag: str) -> tuple[dict, dict]:
    """Spectra and structural rank reports for ``model_<tag>`` / ``gain_<tag>`` if present."""
    spectra, rank = {}, {}
    mpath, gpath = out / f"model_{tag}.json", out / f"gain_{tag}.json"
    if not mpath.is_file():
        return spectra, rank
    model = km.LiftedModel.from_json(mpath)
    spectra["A"] = ev.spectrum(model.A).to_dict()
    off = 1 if model.dictionary.has_constant else 0
    if gpath.is_file():
        K = np.array(json.loads(gpath.read_text())["K"], dtype=float)
        Acl = model.A - model.B @ K
        spectra["A_minus_BK"] = ev.spectrum(Acl).to_dict()
        if off:
            # the constant keeps its unit eigenvalue under any feedback
            spectra["A_minus_BK_without_constant"] = ev.spectrum(Acl[off:, off:]).to_dict()
    rank["controllability"] = ev.check_controllability(model.A, model.B).to_dict()
    rank["observability"] = ev.check_observability(model.A, model.C).to_dict()
    if off:
        A, B, C = model.A[off:, off:], model.B[off:], model.C[:, off:]
        rank["controllability_without_constant"] = ev.check_controllability(A, B).to_dict()
        rank["observability_without_constant"] = ev.check_observability(A, C).to_dict()
    with mpath.open() as fh:
        rank["regressor"] = json.load(fh).get("rank_report")
    return spectra, rank


def _prediction(cfg: PipelineConfig, out: Path, tag: str, steps: int) -> dict:
    """Open-loop prediction with logged PD inputs on the first evaluation helix."""
    mpath = out / f"model_{tag}.json"
    if not mpath.is_file():
        raise StageError("eval", f"--predict needs {mpath}")
    model = km.LiftedModel.from_json(mpath)
    params = cfg.quad_params()
    spec = cfg.eval_specs()[0]
    traj = rf.gen_helix(spec)
    if steps > len(traj) - 1:
        raise StageError("eval", f"prediction horizon {steps} exceeds the helix length")
    pd = rf.PidController(cfg.pd_gains(), params, traj.dt)
    log = rf.simulate_tracking(traj, pd, params, steps=steps)
    if log.diverged_at is not None:
        raise StageError("eval", f"PD rollout for prediction diverged at step {log.diverged_at}")
    pred = km.predict(model, log.states[0], log.inputs, steps)
    ev.write_plot_csv(out / f"predict_{tag}.csv", log.times, log.states, {"predicted": pred},
                      header_comment=f"{_header(cfg)} truth=reference column")
    g = ev.group_nrmse(pred, log.states) if steps > 0 else {}
    print(f"{steps}-step prediction NRMSE % ({tag}): " +
          " ".join(f"{k}={v:.4f}" for k, v in g.items()))
    res = {**_stamp(cfg), "tag": tag, "steps": steps, "helix": spec.to_dict(), "nrmse_percent": g}
    _write_json(out / f"predict_{tag}.json", res)
    return res


def cmd_eval(cfg: PipelineConfig, log_paths=None, predict: bool = False,
             steps: int | None = None) -> Path:
    """Compare every rollout file against the shared reference and write the report."""
    out = _out(cfg)
    if log_paths:
        paths = [Path(p) for p in log_paths]
    else:
        paths = sorted(out.glob("rollout_*.json"))
    if not paths:
        raise StageError("eval", f"no rollout logs found in {out}")
    logs, refs, sources, pid_runs = {}, None, {}, None
    for p in paths:
        if not p.is_file():
            raise StageError("eval", f"log not found: {p}")
        d = json.loads(p.read_text())
        r = [np.array(run["reference"]) for run in d["runs"]]
        if refs is None:
            refs = r
            pid_runs = [np.array(run["pid"]["states"]) for run in d["runs"]]
        elif len(r) != len(refs) or any(a.shape != b.shape or not np.array_equal(a, b)
                                         for a, b in zip(r, refs)):
            raise StageError("eval", f"{p.name}: reference grid differs from {paths[0].name}")
        for i, run in enumerate(d["runs"]):
            if run["koopman"]["diverged_at"] is not None:
                raise StageError("eval", f"{p.name} run {i}: Koopman-LQR rollout diverged "
                                         f"at step {run['koopman']['diverged_at']}")
        logs[f"koopman_{d['tag']}"] = [np.array(run["koopman"]["states"]) for run in d["runs"]]
        sources[d["tag"]] = {"file": p.name, "config_hash": d["config_hash"], "seed": d["seed"]}
    logs["pid"] = pid_runs
    try:
        report = ev.compare(logs, refs)
    except (ValueError, ev.MetricUndefined) as exc:
        raise StageError("eval", str(exc)) from exc

    for tag in sources:
        sp, rk = _model_diagnostics(Path(paths[0]).parent, tag)
        if sp:
            report.spectra[tag] = sp
            report.rank[tag] = rk
    report.meta = {**_stamp(cfg), "sources": sources, "runs": len(refs),
                   "steps": int(len(refs[0]) - 1)}
    if predict:
        horizon = cfg.predict_steps if steps is None else steps
        report.meta["prediction"] = {t: _prediction(cfg, out, t, horizon)["nrmse_percent"]
                                     for t in sources}

    _write_json(out / "report.json", _jsonable(report.to_dict()))
    table = report.table()
    (out / "report.txt").write_text(f"# {_header(cfg)}\n{table}\n")
    print(table)
    first = paths[0]
    d = json.loads(first.read_text())
    run0 = d["runs"][0]
    series = {name: runs[0] for name, runs in logs.items()}
    times = np.array(run0["koopman"]["times"])
    ev.write_plot_csv(out / "plot.csv", times, refs[0], series, header_comment=_header(cfg))
    return out / "report.json"


def cmd_pipeline(cfg: PipelineConfig, predict: bool = True) -> Path:
    cmd_collect(cfg)
    cmd_fit(cfg)
    cmd_control(cfg)
    return cmd_eval(cfg, predict=predict)


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config; omitted keys take defaults")
    common.add_argument("--seed", type=int, help="root seed")
    common.add_argument("--fit", choices=FIT_METHODS, help="regression method")
    common.add_argument("--lift", choices=DICTIONARIES, help="lifting dictionary")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--steps", type=int,
                        help="closed-loop steps (control, pipeline) or prediction horizon (eval --predict)")
    common.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")

    parser = argparse.ArgumentParser(prog="koopquad", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)
    sub.add_parser("collect", parents=[common], help="simulate the training helices")
    p = sub.add_parser("fit", parents=[common], help="fit the lifted model")
    p.add_argument("--dataset", metavar="CSV", help="dataset file (default OUT/dataset.csv)")
    p = sub.add_parser("control", parents=[common], help="LQR design and closed-loop rollouts")
    p.add_argument("--model", metavar="JSON", help="model file (default OUT/model_<tag>.json)")
    p = sub.add_parser("eval", parents=[common], help="NRMSE report from rollout logs")
    p.add_argument("--logs", nargs="+", metavar="JSON", help="rollout files (default OUT/rollout_*.json)")
    p.add_argument("--predict", action="store_true", help="also write the open-loop prediction")
    p = sub.add_parser("pipeline", parents=[common], help="collect, fit, control and eval")
    p.add_argument("--no-predict", dest="predict", action="store_false",
                   help="skip the open-loop prediction")
    return parser


def config_from_args(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.fit is not None:
        overrides["fit"] = args.fit
    if args.lift is not None:
        overrides["dictionary"] = args.lift
    if args.out is not None:
        overrides["out"] = args.out
    if args.steps is not None and args.verb in ("control", "pipeline"):
        overrides["control_steps"] = args.steps
    if overrides:
        cfg = PipelineConfig.from_dict({**cfg.to_dict(), **overrides})
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
    except UsageError as exc:
        parser.error(str(exc))
    try:
        if args.verb == "collect":
            cmd_collect(cfg)
        elif args.verb == "fit":
            cmd_fit(cfg, args.dataset)
        elif args.verb == "control":
            cmd_control(cfg, args.model)
        elif args.verb == "eval":
            cmd_eval(cfg, args.logs, args.predict, args.steps)
        else:
            cmd_pipeline(cfg, args.predict)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any other failure still names the stage
        print(f"error: stage '{args.verb}' failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        logger.debug("traceback", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
