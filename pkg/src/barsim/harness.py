"""Batch experiments, metrics, reward evaluation, and black-box falsification.

Experiments are bit-reproducible: the seed fixes initial-state sampling, runs
execute as paired shielded/unshielded twins sharing x0, and results merge in
run-index order no matter how many workers are used.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .certify import BarrierCertificate
from .model import DynSystem, builtin, default_bac, load
from .runtime import ControllerRef, RunRecord, fsc_eval, simulate_run
from .switchgen import SwitchingArtifact, derive_artifact, load_artifact


class HarnessError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentSpec:
    """Everything needed to reproduce an experiment bit-for-bit."""

    model: str = "M1"
    params: dict = field(default_factory=dict)
    artifact: Optional[str] = None  # path; None derives in-process
    ac: dict = field(default_factory=lambda: {"kind": "constant-action", "values": [0.035]})
    bc: dict = field(default_factory=lambda: {"kind": "baseline-droop"})
    runs: int = 100
    horizon: float = 10.0
    shield: bool = True  # True pairs every shielded run with an unshielded twin
    m: Optional[int] = None
    n: int = 4
    strategy: str = "global"
    seed: int = 1234
    eps: float = 0.001
    substeps: int = 8
    workers: int = 0  # 0 = auto

    @staticmethod
    def from_json(path: str | Path) -> "ExperimentSpec":
        payload = json.loads(Path(path).read_text())
        return ExperimentSpec(**payload)

    def to_json(self) -> str:
        from dataclasses import asdict

        return json.dumps(asdict(self), indent=2)


@dataclass
class MetricsSummary:
    runs: int
    cr: Optional[float] = None  # percent of converged shielded runs
    ct_mean: Optional[float] = None
    ct_std: Optional[float] = None
    delta_mean: Optional[float] = None
    delta_std: Optional[float] = None
    violations_shielded: int = 0
    violations_unshielded: int = 0
    mean_steps_to_forward_switch: Optional[float] = None
    mean_forward_reverse_gap_steps: Optional[float] = None
    mean_switch_to_violation_gap_steps: Optional[float] = None

    def to_json(self) -> str:
        payload = {k: v for k, v in self.__dict__.items()}
        return json.dumps(payload, indent=2)

    def summary(self) -> str:
        rows = [f"runs: {self.runs}"]
        if self.cr is not None:
            rows.append(f"CR: {self.cr:.1f}%  CT: {_fmt(self.ct_mean)} s (sd {_fmt(self.ct_std)})"
                        f"  delta: {_fmt(self.delta_mean)} (sd {_fmt(self.delta_std)})")
        rows.append(f"violations: shielded {self.violations_shielded}, unshielded {self.violations_unshielded}")
        if self.mean_steps_to_forward_switch is not None:
            rows.append(f"mean steps to forward switch: {self.mean_steps_to_forward_switch:.1f}")
        if self.mean_forward_reverse_gap_steps is not None:
            rows.append(f"mean forward-to-reverse gap: {self.mean_forward_reverse_gap_steps:.1f} steps")
        if self.mean_switch_to_violation_gap_steps is not None:
            rows.append(
                f"mean switch-to-violation gap (unshielded twin): "
                f"{self.mean_switch_to_violation_gap_steps:.2f} steps"
            )
        return "\n".join(rows)


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4g}"


# -- reward -------------------------------------------------------------------


def reward_eval(art: SwitchingArtifact, x, u, v: float, v_ref: float, eps: float = 0.001,
                w: float = 100.0) -> float:
    """Reward used to train/retrain advanced controllers around the shield."""
    if fsc_eval(art, x, u).fsc:
        return -1000.0
    if abs(v - v_ref) <= eps:
        return 100.0
    return -w * (v - v_ref) ** 2


# -- experiment machinery --------------------------------------------------------


def controller_from_dict(payload: dict) -> ControllerRef:
    if "kind" not in payload:
        raise HarnessError(f"controller spec needs a 'kind': {payload!r}")
    params = {k: v for k, v in payload.items() if k != "kind"}
    return ControllerRef(payload["kind"], params)


def resolve_model(spec: ExperimentSpec) -> DynSystem:
    if spec.model in ("M1", "M2"):
        return builtin(spec.model, spec.params)
    return load(spec.model, spec.params)


def resolve_artifact(spec: ExperimentSpec, sys: DynSystem) -> SwitchingArtifact:
    if spec.artifact is not None:
        art = load_artifact(spec.artifact)
        if art.model_hash != sys.model_hash():
            raise HarnessError(
                "artifact/model hash mismatch: the artifact was derived for a different model"
            )
    else:
        art = derive_artifact(sys, default_bac(sys), n=spec.n,
                              m=spec.m if spec.m is not None else 3, strategy=spec.strategy)
    if spec.m is not None and art.m != spec.m:
        art = replace(art, m=spec.m)
        art.bind_field(sys.derivs)
    return art


_WORKER: dict = {}


def _init_worker(sys, art, ac, bc, horizon, substeps):
    _WORKER.update(sys=sys, art=art, ac=ac, bc=bc, horizon=horizon, substeps=substeps)


def _run_pair(task):
    index, x0, shielded = task
    sys, art = _WORKER["sys"], _WORKER["art"]
    ac, bc = _WORKER["ac"], _WORKER["bc"]
    horizon, substeps = _WORKER["horizon"], _WORKER["substeps"]
    out = {}
    if shielded:
        out["shielded"] = simulate_run(sys, art, ac, bc, x0=x0, horizon=horizon,
                                       shield=True, substeps=substeps)
    out["unshielded"] = simulate_run(sys, art, ac, bc, x0=x0, horizon=horizon,
                                     shield=False, substeps=substeps)
    return index, out


def run_experiment(
    spec: ExperimentSpec,
    out_dir: Optional[str | Path] = None,
) -> tuple[MetricsSummary, list[dict]]:
    """Run N paired simulations and aggregate metrics deterministically."""
    sys = resolve_model(spec)
    art = resolve_artifact(spec, sys)

    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    starts = sys.sample_initial(rng, spec.runs)
    tasks = [(i, x0, spec.shield) for i, x0 in enumerate(starts)]
    ac = controller_from_dict(spec.ac)
    bc = controller_from_dict(spec.bc)

    workers = spec.workers or min(4, _cpu_count())
    if workers > 1 and spec.runs > 1:
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_init_worker,
            initargs=(sys, art, ac, bc, spec.horizon, spec.substeps),
        ) as pool:
            results = list(pool.map(_run_pair, tasks, chunksize=max(1, spec.runs // (4 * workers))))
    else:
        _init_worker(sys, art, ac, bc, spec.horizon, spec.substeps)
        results = [_run_pair(t) for t in tasks]
    results.sort(key=lambda r: r[0])
    records = [r[1] for r in results]

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for i, pair in enumerate(records):
            for label, rec in pair.items():
                (out_dir / f"run_{i:03d}_{label}.csv").write_text(rec.to_csv())

    summary = aggregate_metrics(sys, spec, records)
    if out_dir is not None:
        (out_dir / "summary.json").write_text(summary.to_json() + "\n")
        (out_dir / "spec.json").write_text(spec.to_json() + "\n")
    return summary, records


def _cpu_count() -> int:
    import os

    return os.cpu_count() or 1


def aggregate_metrics(sys: DynSystem, spec: ExperimentSpec, records: list[dict]) -> MetricsSummary:
    eta = sys.eta
    summary = MetricsSummary(runs=len(records))
    v_ref = sys.refs.get("v_ref")
    monitor = sys.monitor

    cts, deltas = [], []
    converged = 0
    fwd_steps, fwd_rev_gaps, gap_steps = [], [], []

    for pair in records:
        shielded = pair.get("shielded")
        twin = pair.get("unshielded")
        if twin is not None and twin.violated:
            summary.violations_unshielded += 1
        if shielded is None:
            continue
        if shielded.violated:
            summary.violations_shielded += 1

        if monitor is not None and v_ref is not None and shielded.rows:
            v = shielded.column(monitor)
            in_band = np.abs(v - v_ref) <= spec.eps
            if in_band.any() and in_band[-1] and not shielded.violated:
                # converged: enters the band and remains there through the end
                falses = np.flatnonzero(~in_band)
                settled = (falses[-1] + 1) if len(falses) else 0
                if in_band[settled:].all():
                    converged += 1
                    entry = int(np.argmax(in_band))
                    cts.append(entry * eta)
                    deltas.append(float(np.abs(v[entry:] - v_ref).mean()))

        fwd = shielded.switch_times("forward_switch")
        rev = shielded.switch_times("reverse_switch")
        if fwd:
            fwd_steps.append(fwd[0] / eta)
            for f in fwd:
                nxt = [r for r in rev if r > f]
                if nxt:
                    fwd_rev_gaps.append((nxt[0] - f) / eta)
        if fwd and twin is not None and twin.violated:
            gap_steps.append((twin.violation_time - fwd[0]) / eta)

    if monitor is not None and v_ref is not None and any("shielded" in p for p in records):
        summary.cr = 100.0 * converged / max(1, sum(1 for p in records if "shielded" in p))
        if cts:
            summary.ct_mean = float(np.mean(cts))
            summary.ct_std = float(np.std(cts))
            summary.delta_mean = float(np.mean(deltas))
            summary.delta_std = float(np.std(deltas))
    if fwd_steps:
        summary.mean_steps_to_forward_switch = float(np.mean(fwd_steps))
    if fwd_rev_gaps:
        summary.mean_forward_reverse_gap_steps = float(np.mean(fwd_rev_gaps))
    if gap_steps:
        summary.mean_switch_to_violation_gap_steps = float(np.mean(gap_steps))
    return summary


# -- black-box falsification -------------------------------------------------------


@dataclass
class FalsifyResult:
    witness: Optional[tuple[float, ...]]  # initial state (base coordinates)
    violation_time: Optional[float]
    simulations: int
    best_margin: float  # most negative min g seen (negative = violation)

    @property
    def found(self) -> bool:
        return self.witness is not None


def _vector_controller(ref: ControllerRef, sys: DynSystem):
    """Batch controller: X (B, k) -> U (B, j); None when not vectorizable."""
    if ref.kind == "constant-action":
        vals = np.asarray(ref.params["values"], float)

        def fn(X):
            return np.broadcast_to(vals, (X.shape[0], len(vals)))

        return fn
    if ref.kind == "affine-policy":
        K = np.asarray(ref.params["gain"], float)
        b = np.asarray(ref.params["offset"], float)

        def fn(X):
            return X @ K.T + b

        return fn
    if ref.kind == "baseline-droop":
        fns = [p.evaluator(sys.states) for p in sys.baseline]

        def fn(X):
            cols = [np.broadcast_to(np.asarray(f(*X.T), float), (X.shape[0],)) for f in fns]
            return np.column_stack(cols)

        return fn
    return None


def _batch_unshielded(sys: DynSystem, ctrl_fn, X0: np.ndarray, horizon: float, substeps: int):
    """Vectorized unshielded runs; returns (violated, t_viol, worst margin)."""
    B = X0.shape[0]
    X = X0.copy()
    field_fn = sys.field_fn()
    g_fns = sys.unsafe_fns()
    lo_u = np.asarray(sys.control.lo)
    hi_u = np.asarray(sys.control.hi)
    periods = int(round(horizon / sys.eta))
    h_sub = sys.eta / substeps
    violated = np.zeros(B, bool)
    t_viol = np.full(B, np.nan)
    worst = np.full(B, np.inf)

    def min_g(Xa):
        out = np.full(Xa.shape[0], np.inf)
        for gf in g_fns:
            out = np.minimum(out, np.broadcast_to(np.asarray(gf(*Xa.T), float), (Xa.shape[0],)))
        return out

    def stack(cols):
        return np.column_stack([np.broadcast_to(np.asarray(c, float), (B,)) for c in cols])

    for k in range(periods):
        if violated.all():
            break
        U = np.clip(ctrl_fn(X), lo_u, hi_u)
        act = ~violated
        for j in range(substeps):
            k1 = stack(field_fn(*X.T, *U.T))
            x2 = X + 0.5 * h_sub * k1
            k2 = stack(field_fn(*x2.T, *U.T))
            x3 = X + 0.5 * h_sub * k2
            k3 = stack(field_fn(*x3.T, *U.T))
            x4 = X + h_sub * k3
            k4 = stack(field_fn(*x4.T, *U.T))
            X_new = X + (h_sub / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            X = np.where(act[:, None], X_new, X)
            g = min_g(X)
            worst = np.where(act, np.minimum(worst, g), worst)
            newly = act & (g < 0.0)
            t_viol = np.where(newly, k * sys.eta + (j + 1) * h_sub, t_viol)
            violated |= newly
            act = ~violated
            if not act.any():
                break
    return violated, t_viol, worst


def falsify_controller(
    sys: DynSystem,
    ac: ControllerRef,
    budget: int,
    seed: int = 0,
    horizon: float = 10.0,
    substeps: int = 8,
) -> FalsifyResult:
    """Search for an initial state whose unshielded run violates safety.

    Random multi-start over the initial-state box (70% of the budget,
    vectorized) followed by a coordinate hill-climb on the most promising
    start.  Returns the first witness with its violation time, or NONE.
    """
    if budget <= 0:
        return FalsifyResult(None, None, 0, float("inf"))
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    ctrl_fn = _vector_controller(ac, sys)
    sims = 0
    best_margin = float("inf")
    best_x0 = None

    n_random = budget if budget < 8 else max(1, int(budget * 0.7))
    base_names = sys.init.names

    def complete_batch(P):
        return np.array([sys.complete_initial(dict(zip(base_names, row))) for row in P])

    if ctrl_fn is not None:
        batch = 2048
        remaining = n_random
        while remaining > 0:
            b = min(batch, remaining)
            P = sys.init.sample(rng, b)
            X0 = complete_batch(P)
            violated, t_viol, worst = _batch_unshielded(sys, ctrl_fn, X0, horizon, substeps)
            sims += b
            remaining -= b
            if violated.any():
                i = int(np.argmax(violated))
                return FalsifyResult(tuple(float(v) for v in P[i]), float(t_viol[i]), sims, float(worst[i]))
            i = int(np.argmin(worst))
            if worst[i] < best_margin:
                best_margin = float(worst[i])
                best_x0 = P[i]
    else:
        ac_ctrl = ac.make(sys)
        for _ in range(n_random):
            P = sys.init.sample(rng, 1)
            x0 = sys.complete_initial(dict(zip(base_names, P[0])))
            rec = simulate_run(sys, None, ac_ctrl, None, x0=x0, horizon=horizon,
                               shield=False, substeps=substeps, record_rows=False)
            sims += 1
            if rec.violated:
                return FalsifyResult(tuple(float(v) for v in P[0]), rec.violation_time, sims, -1.0)

    # coordinate hill-climb from the most promising start
    if best_x0 is None or ctrl_fn is None:
        return FalsifyResult(None, None, sims, best_margin)
    x = np.asarray(best_x0, float)
    lo = np.asarray(sys.init.lo)
    hi = np.asarray(sys.init.hi)
    step = 0.25 * (hi - lo)
    dim = len(x)
    while sims < budget and step.max() > 1e-12:
        improved = False
        for d in range(dim):
            if sims >= budget:
                break
            cands = []
            for sgn in (+1.0, -1.0):
                c = x.copy()
                c[d] = float(np.clip(c[d] + sgn * step[d], lo[d], hi[d]))
                cands.append(c)
            X0 = complete_batch(np.array(cands))
            violated, t_viol, worst = _batch_unshielded(sys, ctrl_fn, X0, horizon, substeps)
            sims += len(cands)
            if violated.any():
                i = int(np.argmax(violated))
                return FalsifyResult(tuple(float(v) for v in cands[i]), float(t_viol[i]), sims, float(worst[i]))
            i = int(np.argmin(worst))
            if worst[i] < best_margin:
                best_margin = float(worst[i])
                x = cands[i]
                improved = True
        if not improved:
            step *= 0.5
    return FalsifyResult(None, None, sims, best_margin)
