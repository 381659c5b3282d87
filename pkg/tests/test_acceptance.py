"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s`.
"""
import math
import shutil
import subprocess
import sys as _pysys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from barsim.certify import BarrierCertificate, check_bac
from barsim.harness import ExperimentSpec, run_experiment
from barsim.model import builtin, default_bac, load_text
from barsim.poly import Polynomial
from barsim.runtime import ControllerRef, fsc_eval, rsc_eval, simulate_run
from barsim.switchgen import artifact_text, derive_artifact

from test_certify import ONE_D_BAND
from test_expr import PENDULUM
from test_switchgen import one_d_artifact

UNSAFE_AC = {"kind": "constant-action", "values": [0.035]}


def _ok(n: int, text: str) -> None:
    print(f"\nACCEPTANCE {n} PASS: {text}")


@pytest.fixture(scope="module")
def m1_experiment():
    spec = ExperimentSpec(model="M1", ac=UNSAFE_AC, runs=100, horizon=10.0, seed=2024)
    t0 = time.perf_counter()
    summary, records = run_experiment(spec)
    elapsed = time.perf_counter() - t0
    return spec, summary, records, elapsed


class TestCriterion1SafetyInvariance:
    def test_shielded_safe_unshielded_violate(self, m1_experiment):
        spec, summary, records, elapsed = m1_experiment
        assert len(records) == 100
        assert summary.violations_shielded == 0, "every shielded run must stay safe"
        assert summary.violations_unshielded == 100, "every unshielded twin must violate"
        for pair in records:
            assert not pair["shielded"].violated
            assert pair["unshielded"].violated
            # the forward switch strictly precedes the twin's violation
            fwd = pair["shielded"].switch_times("forward_switch")
            assert fwd and fwd[0] < pair["unshielded"].violation_time
        assert elapsed < 60.0, f"runtime {elapsed:.1f}s exceeds the 60s budget"
        _ok(1, f"100/100 shielded runs safe, 100/100 twins violate ({elapsed:.1f}s)")


class TestCriterion2Conservativeness:
    def test_switch_to_violation_gap(self, m1_experiment):
        _, summary, records, _ = m1_experiment
        gap = summary.mean_switch_to_violation_gap_steps
        assert gap is not None
        assert 1.0 <= gap <= 10.0, f"mean gap {gap:.2f} periods outside [1, 10]"
        _ok(2, f"mean forward-switch to twin-violation gap = {gap:.2f} control periods")


def _propagate(sys, x, u, substeps=64):
    fn = sys.field_fn()
    h = sys.eta / substeps
    xt = tuple(float(v) for v in x)
    out = [xt]
    for _ in range(substeps):
        k1 = fn(*xt, *u)
        k2 = fn(*[a + 0.5 * h * b for a, b in zip(xt, k1)], *u)
        k3 = fn(*[a + 0.5 * h * b for a, b in zip(xt, k2)], *u)
        k4 = fn(*[a + 0.5 * h * b for a, b in zip(xt, k3)], *u)
        xt = tuple(a + (h / 6.0) * (p + 2 * q + 2 * r + s) for a, p, q, r, s in zip(xt, k1, k2, k3, k4))
        out.append(xt)
    return out


def _lambda_soundness_trials(sys, art, rng, trials):
    hhat = art.hhat_fn()
    h_fn = art.h_fn()
    failures = 0
    done = 0
    while done < trials:
        u = tuple(float(v) for v in rng.uniform(sys.control.lo, sys.control.hi))
        region = art.restricted(u, 1)
        if region is None:
            continue
        x = tuple(float(v) for v in rng.uniform(region.lo, region.hi))
        if not region.contains(x, strict=True):
            continue
        x_end = _propagate(sys, x, u)[-1]
        lhs = h_fn(*x_end)
        rhs = hhat(*x, *u) - art.lambda_for(u)
        if lhs < rhs - 1e-12:
            failures += 1
        done += 1
    return failures


class TestCriterion3LambdaSoundness:
    def test_true_h_above_prediction_minus_lambda(self):
        rng = np.random.default_rng(314)
        total = 0
        failures = 0
        sys1 = builtin("M1")
        art1 = derive_artifact(sys1, default_bac(sys1), n=4, skip_check=True, depth=4)
        failures += _lambda_soundness_trials(sys1, art1, rng, 4000)
        total += 4000
        art1b = derive_artifact(sys1, default_bac(sys1), n=1, skip_check=True, depth=4)
        failures += _lambda_soundness_trials(sys1, art1b, rng, 2000)
        total += 2000
        art2, sys2 = one_d_artifact(n=1, strategy="per-action")
        failures += _lambda_soundness_trials(sys2, art2, rng, 4000)
        total += 4000
        assert total >= 10000
        assert failures == 0, f"{failures} of {total} propagations broke the lambda bound"
        _ok(3, f"h(x(t+eta)) >= hhat - lambda in {total}/{total} propagations")


class TestCriterion4MuSoundness:
    def test_one_period_trajectories_stay_admissible(self):
        rng = np.random.default_rng(2718)
        total = 0
        failures = 0
        for name, (art, sys) in {
            "M1": (None, None),
            "one_d": (None, None),
        }.items():
            if name == "M1":
                sys = builtin("M1")
                art = derive_artifact(sys, default_bac(sys), n=4, skip_check=True, depth=4)
            else:
                art, sys = one_d_artifact(n=1, strategy="per-action")
            for _ in range(5000):
                u = tuple(float(v) for v in rng.uniform(sys.control.lo, sys.control.hi))
                region = art.restricted(u, 1)
                if region is None:
                    continue
                x = tuple(float(v) for v in rng.uniform(region.lo, region.hi))
                if not region.contains(x, strict=True):
                    continue
                path = _propagate(sys, x, u, substeps=32)
                total += 1
                if not all(sys.admissible.contains(p) for p in path):
                    failures += 1
        assert total >= 10000
        assert failures == 0, f"{failures} of {total} trajectories left the admissible region"
        _ok(4, f"all {total} one-period trajectories from A_r(u) stayed inside A")


class TestCriterion5ExactThresholds:
    def test_forward_threshold(self):
        art, _ = one_d_artifact(n=1, strategy="per-action")
        lo, hi = 0.0, 1.5
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if fsc_eval(art, (mid,), (1.0,)).fsc:
                hi = mid
            else:
                lo = mid
        assert abs(hi - 0.9) < 1e-9, f"forward threshold {hi!r} differs from 0.9"
        _ok(5, f"FSC trigger threshold = {hi:.12f} (target 0.9), "
               f"RSC threshold check follows")

    def test_reverse_threshold(self):
        # h = 1 - x with baseline u = -x: RSC boundary at x = 1/1.3
        # (the quadratic band certificate would give sqrt(1/1.6) instead)
        art, _ = one_d_artifact(n=1, h=Polynomial.constant(1.0) - Polynomial.var("x"))
        lo, hi = 0.5, 1.0
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if rsc_eval(art, (mid,), (-mid,)).rsc:
                lo = mid
            else:
                hi = mid
        assert abs(lo - 1.0 / 1.3) < 1e-9, f"reverse threshold {lo!r} differs from 1/1.3"
        _ok(5, f"RSC reverse threshold = {lo:.12f} (target 1/1.3 = {1/1.3:.12f})")


class TestCriterion6RscGapMonotone:
    def test_gap_non_decreasing_in_m(self):
        gaps = {}
        for m in (2, 3, 4):
            spec = ExperimentSpec(model="M1", ac=UNSAFE_AC, runs=30, horizon=2.5,
                                  seed=99, m=m)
            summary, _ = run_experiment(spec)
            assert summary.mean_forward_reverse_gap_steps is not None
            gaps[m] = summary.mean_forward_reverse_gap_steps
        assert gaps[2] <= gaps[3] <= gaps[4], f"gaps not monotone: {gaps}"
        assert gaps[2] < gaps[4], f"gaps did not grow with m: {gaps}"
        _ok(6, "mean forward-to-reverse gaps over m=2,3,4: "
               + ", ".join(f"{gaps[m]:.1f}" for m in (2, 3, 4)) + " steps")


class TestCriterion7CertifyFalsify:
    def test_flip_found_and_correct_certified(self):
        sys = load_text(ONE_D_BAND)
        bac = BarrierCertificate(h=Polynomial.constant(1.0) - Polynomial.var("x") ** 2)
        flipped = check_bac(sys, bac, closed_loop=lambda x: (x,),
                            closed_loop_polys=(Polynomial.var("x"),), budget=100000)
        assert flipped.verdict == "falsified"
        assert flipped.counterexample is not None

        correct = check_bac(sys, bac, closed_loop=lambda x: (-x,),
                            closed_loop_polys=(-Polynomial.var("x"),), budget=100000)
        assert correct.certified
        assert correct.interval_margin[0] >= 0.0
        _ok(7, f"flipped certificate falsified at x = {flipped.counterexample[0]:.4f}; "
               f"correct one certified with interval margin >= {correct.interval_margin[0]:.3g}")


class TestCriterion8RecastExactness:
    def _drift(self, sys, rec):
        si = sys.states.index(sys.aux[0].sin_name)
        ci = sys.states.index(sys.aux[0].cos_name)
        worst = 0.0
        for row in rec.rows:
            s, c = row[1 + si], row[1 + ci]
            worst = max(worst, abs(s * s + c * c - 1.0))
        return worst

    def test_pendulum(self):
        from barsim.expr import parse_system, recast

        sys = recast(parse_system(PENDULUM))
        sys.baseline = (Polynomial.constant(0.2),)
        x0 = sys.complete_initial({"th": 1.2, "w": 0.3})
        rec = simulate_run(sys, None, ControllerRef.baseline(), x0=x0,
                           horizon=10.0, shield=False, substeps=8)
        assert not rec.violated
        drift = self._drift(sys, rec)
        assert drift < 1e-6, f"pendulum circle drift {drift:.3g}"
        _ok(8, f"pendulum sin/cos drift over 10 s: {drift:.3g}")

    def test_m2(self):
        sys = builtin("M2")
        rng = np.random.default_rng(6)
        x0 = sys.sample_initial(rng, 1)[0]
        rec = simulate_run(sys, None, ControllerRef.baseline(), x0=x0,
                           horizon=10.0, shield=False, substeps=8)
        assert not rec.violated
        drift = self._drift(sys, rec)
        assert drift < 1e-6, f"M2 circle drift {drift:.3g}"
        _ok(8, f"M2 sin/cos drift over 10 s: {drift:.3g}")


class TestCriterion9Determinism:
    def test_artifact_and_experiment_bytes(self, tmp_path):
        sys = builtin("M1")
        texts = [artifact_text(derive_artifact(sys, default_bac(sys), n=4, skip_check=True))
                 for _ in range(2)]
        assert texts[0] == texts[1]

        spec = ExperimentSpec(model="M1", ac=UNSAFE_AC, runs=4, horizon=1.0, seed=7)
        d1, d2 = tmp_path / "r1", tmp_path / "r2"
        run_experiment(spec, out_dir=d1)
        run_experiment(spec, out_dir=d2)
        files = sorted(p.name for p in d1.glob("*.csv"))
        assert files
        for name in files:
            assert (d1 / name).read_bytes() == (d2 / name).read_bytes()
        assert (d1 / "summary.json").read_bytes() == (d2 / "summary.json").read_bytes()
        _ok(9, f"artifact bytes identical; {len(files)} experiment CSVs byte-identical across reruns")


CLIENT_DIR = Path(__file__).resolve().parent.parent / "client"


class TestCriterion10CrossBoundary:
    @pytest.mark.skipif(
        shutil.which("node") is None or not (CLIENT_DIR / "dist" / "client.js").exists(),
        reason="secondary client not built (run npm install && npm run build in client/)",
    )
    def test_external_client_end_to_end(self):
        import json
        import socket
        import threading

        from barsim.runtime import serve
        from barsim.switchgen import derive_artifact as _derive

        sys = builtin("M1", {"eta": 0.02})
        art = _derive(sys, default_bac(sys), n=4, skip_check=True)
        got = {}
        port_ready = threading.Event()

        def on_listen(port):
            got["port"] = port
            port_ready.set()

        def server():
            got["rec"] = serve(sys, art, host="127.0.0.1", port=0,
                               x0=sys.complete_initial({"v": 0.48, "q": 0.0}),
                               horizon=2.0, deadline=0.25, on_listen=on_listen)

        t = threading.Thread(target=server, daemon=True)
        t.start()
        assert port_ready.wait(10)
        proc = subprocess.run(
            ["node", str(CLIENT_DIR / "dist" / "client.js"),
             "--host", "127.0.0.1", "--port", str(got["port"]),
             "--policy", "constant:0.035", "--latency-every", "40", "--latency-ms", "900"],
            capture_output=True, text=True, timeout=120,
        )
        t.join(60)
        assert not t.is_alive()
        rec = got["rec"]
        assert proc.returncode == 0, proc.stderr
        assert not rec.violated
        assert rec.switch_times("forward_switch"), "unsafe policy must force a forward switch"
        assert rec.switch_times("timeout"), "latency injection must produce a TIMEOUT fallback"
        _ok(10, f"TS client session: {len(rec.rows)} periods, "
                f"{len(rec.switch_times('forward_switch'))} forward switches, "
                f"{len(rec.switch_times('timeout'))} timeouts, zero violations")
