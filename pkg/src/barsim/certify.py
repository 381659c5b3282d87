"""Numerical validation of barrier certificates and Lyapunov sub-level extraction.

check_bac samples the defining inequalities over the admissible region with a
low-discrepancy sequence and scans bisection-refined interval boxes; a
"certified-on-grid" verdict is explicitly weaker than an SOS proof and says
so in the report.  The clause (iii) margin is also enclosed with interval
arithmetic when the closed loop is polynomial, which makes it sound when the
enclosure stays non-negative.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .model import DynSystem
from .poly import IntervalBox, Polynomial, box_bound, lie_derivative

_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)


class CertifyError(ValueError):
    pass


@dataclass(frozen=True)
class BarrierCertificate:
    """Candidate barrier function h with a linear class-K gain sigma(s) = gamma*s."""

    h: Polynomial
    gamma: float = 1.0
    provenance: str = "user-supplied"

    def __post_init__(self) -> None:
        if not self.gamma > 0:
            raise CertifyError(f"class-K gain must be positive, got {self.gamma}")


@dataclass
class CertReport:
    verdict: str  # "certified-on-grid" | "falsified"
    samples: int
    counterexample: Optional[tuple[float, ...]] = None
    violated_clause: Optional[str] = None
    counterexample_value: Optional[float] = None
    clause_margins: dict = field(default_factory=dict)
    interval_margin: Optional[tuple[float, float]] = None
    notes: str = ""

    @property
    def certified(self) -> bool:
        return self.verdict == "certified-on-grid"

    def summary(self) -> str:
        lines = [f"verdict: {self.verdict} (samples: {self.samples})"]
        if self.counterexample is not None:
            lines.append(
                f"counterexample at {self.counterexample} violates clause {self.violated_clause}"
                f" (value {self.counterexample_value:.6g})"
            )
        for k, v in self.clause_margins.items():
            lines.append(f"min over samples, clause {k}: {v:.6g}")
        if self.interval_margin is not None:
            lo, hi = self.interval_margin
            sound = "sound" if lo >= 0 else "NOT sound at this depth"
            lines.append(f"clause (iii) interval margin over A: [{lo:.6g}, {hi:.6g}] ({sound})")
        if self.notes:
            lines.append(self.notes)
        return "\n".join(lines)


def halton(dim: int, n: int, skip: int = 0) -> np.ndarray:
    """Deterministic Halton sequence in [0,1)^dim, shape (n, dim)."""
    if dim > len(_PRIMES):
        raise CertifyError(f"halton supports up to {len(_PRIMES)} dimensions")
    idx = np.arange(skip + 1, skip + n + 1, dtype=np.int64)
    out = np.empty((n, dim))
    for d in range(dim):
        base = _PRIMES[d]
        i = idx.copy()
        f = 1.0 / base
        col = np.zeros(n)
        while i.any():
            col += f * (i % base)
            i //= base
            f /= base
        out[:, d] = col
    return out


def _sample_box(box: IntervalBox, n: int) -> np.ndarray:
    unit = halton(len(box.names), n)
    lo = np.array(box.lo)
    hi = np.array(box.hi)
    return lo + unit * (hi - lo)


def _controller_actions(controller, pts: np.ndarray, control: IntervalBox) -> np.ndarray:
    """Evaluate the closed-loop controller on a batch; clamp to the control box."""
    n = len(pts)
    try:
        cols = controller(*pts.T)
        comps = cols if isinstance(cols, (tuple, list)) else (cols,)
        u = np.column_stack([np.broadcast_to(np.asarray(c, float), (n,)) for c in comps])
        if u.shape != (n, len(control.names)):
            raise ValueError("controller arity mismatch")
    except Exception:
        u = np.array([np.atleast_1d(np.asarray(controller(*row), float)) for row in pts])
    return np.clip(u, np.array(control.lo), np.array(control.hi))


def check_bac(
    sys: DynSystem,
    bc: BarrierCertificate,
    closed_loop: Callable | None = None,
    budget: int = 20000,
    depth: int = 6,
    closed_loop_polys: Optional[Sequence[Polynomial]] = None,
) -> CertReport:
    """Check the barrier inequalities on samples over A plus refined boxes.

    closed_loop maps a state (positional components) to the control action;
    it defaults to the system's baseline controller.  When the closed loop is
    polynomial (baseline, or closed_loop_polys given), clause (iii) also gets
    an interval-arithmetic margin over A.
    """
    if budget <= 0:
        raise CertifyError("sampling budget must be positive")
    h = bc.h
    gamma = bc.gamma
    if closed_loop is None and sys.baseline is None:
        raise CertifyError("no closed-loop controller: pass closed_loop or use a model with a baseline")
    if closed_loop_polys is None and closed_loop is None and sys.baseline is not None:
        closed_loop_polys = sys.baseline
    if closed_loop is None:
        closed_loop = sys.baseline_fn()

    h1 = lie_derivative(h, sys.derivs)

    pts = _sample_box(sys.admissible, budget)
    h_fn = h.evaluator(sys.states)
    h_vals = np.broadcast_to(np.asarray(h_fn(*pts.T), float), (budget,))
    g_vals = np.full(budget, np.inf)
    for g in sys.unsafe:
        g_vals = np.minimum(g_vals, np.broadcast_to(np.asarray(g.evaluator(sys.states)(*pts.T), float), (budget,)))

    u = _controller_actions(closed_loop, pts, sys.control)
    h1_fn = h1.evaluator(sys.states + sys.inputs)
    hdot = np.broadcast_to(np.asarray(h1_fn(*pts.T, *u.T), float), (budget,))
    clause3 = hdot + gamma * h_vals

    def _witness(mask: np.ndarray, clause: str, values: np.ndarray) -> CertReport:
        i = int(np.argmax(mask))
        return CertReport(
            verdict="falsified",
            samples=budget,
            counterexample=tuple(float(v) for v in pts[i]),
            violated_clause=clause,
            counterexample_value=float(values[i]),
            clause_margins=_margins(h_vals, g_vals, clause3),
        )

    bad1 = (g_vals >= 0.0) & (h_vals < 0.0)
    if bad1.any():
        return _witness(bad1, "(i) h >= 0 outside the unsafe set", h_vals)
    bad2 = (g_vals < 0.0) & (h_vals >= 0.0)
    if bad2.any():
        return _witness(bad2, "(ii) h < 0 on the unsafe set", h_vals)
    bad3 = clause3 < 0.0
    if bad3.any():
        return _witness(bad3, "(iii) dh/dt + gamma*h >= 0", clause3)

    # interval sweep over refined boxes: can falsify with a verified midpoint
    closed_poly = None
    if closed_loop_polys is not None:
        bindings = dict(zip(sys.inputs, closed_loop_polys))
        closed_poly = h1.compose(bindings) + gamma * h
        for box in _leaf_boxes(sys.admissible, depth):
            lo3, hi3 = box_bound(closed_poly, box, 0)
            if hi3 < 0.0:
                mid = box.midpoint()
                u_mid = np.clip([p.eval_map(dict(zip(sys.states, mid))) for p in closed_loop_polys],
                                sys.control.lo, sys.control.hi)
                val = h1.eval_map({**dict(zip(sys.states, mid)), **dict(zip(sys.inputs, u_mid))}) + gamma * h.eval_map(
                    dict(zip(sys.states, mid))
                )
                if val < 0.0:
                    return CertReport(
                        verdict="falsified",
                        samples=budget,
                        counterexample=mid,
                        violated_clause="(iii) dh/dt + gamma*h >= 0",
                        counterexample_value=float(val),
                        clause_margins=_margins(h_vals, g_vals, clause3),
                    )

    interval_margin = None
    if closed_poly is not None:
        interval_margin = box_bound(closed_poly, sys.admissible, depth)

    return CertReport(
        verdict="certified-on-grid",
        samples=budget,
        clause_margins=_margins(h_vals, g_vals, clause3),
        interval_margin=interval_margin,
        notes="certified-on-grid is a sampling statement, weaker than an SOS proof",
    )


def _margins(h_vals, g_vals, clause3) -> dict:
    out = {"(iii)": float(clause3.min())}
    safe = g_vals >= 0.0
    if safe.any():
        out["(i)"] = float(h_vals[safe].min())
    if (~safe).any():
        out["(ii)"] = float((-h_vals[~safe]).min())
    return out


def _leaf_boxes(box: IntervalBox, depth: int):
    if depth <= 0:
        yield box
        return
    a, b = box.split(box.widest_axis())
    yield from _leaf_boxes(a, depth - 1)
    yield from _leaf_boxes(b, depth - 1)


def lyap_sublevel_bac(
    V: Polynomial,
    sys: DynSystem,
    gamma: float = 1.0,
    depth: int = 12,
    samples: int = 4000,
    descent_steps: int = 200,
) -> BarrierCertificate:
    """Extract a barrier candidate h = c - V from a Lyapunov-like function.

    c under-approximates inf{V : x on the unsafe boundary within A}: boundary
    points are located by bisection between safe/unsafe sample pairs and
    polished by local descent, then c is certified from below with interval
    bounds on every refined box that can touch the boundary.
    """
    if not sys.unsafe:
        raise CertifyError("system has an empty unsafe set")
    pts = _sample_box(sys.admissible, samples)
    v_fn = V.evaluator(sys.states)
    v_vals = np.asarray(v_fn(*pts.T), float)
    if v_vals.min() < 0:
        raise CertifyError("V is not non-negative over the admissible region")

    # certified lower bound on V over boundary-straddling boxes
    c_cert = np.inf
    boundary_seen = False
    for box in _leaf_boxes(sys.admissible, depth):
        touches = False
        for g in sys.unsafe:
            lo, hi = box_bound(g, box, 0)
            if lo <= 0.0 <= hi:
                touches = True
                break
        if touches:
            boundary_seen = True
            c_cert = min(c_cert, box_bound(V, box, 0)[0])
    if not boundary_seen:
        raise CertifyError("unsafe boundary is unreachable inside the admissible box")

    # sampled estimate (diagnostic): bisect safe/unsafe pairs onto the boundary
    g_min = np.full(samples, np.inf)
    for g in sys.unsafe:
        g_min = np.minimum(g_min, np.asarray(g.evaluator(sys.states)(*pts.T), float))
    c_hat = np.inf
    safe_pts = pts[g_min >= 0]
    unsafe_pts = pts[g_min < 0]
    rng = np.random.default_rng(0)
    if len(safe_pts) and len(unsafe_pts):
        best_pt = None
        k = min(200, len(safe_pts), len(unsafe_pts))
        for a, b in zip(safe_pts[:k], unsafe_pts[:k]):
            z = _bisect_boundary(sys, a, b)
            val = float(v_fn(*z))
            if val < c_hat:
                c_hat, best_pt = val, z
        if best_pt is not None:
            c_hat = _descend_on_boundary(sys, v_fn, rng, descent_steps, best_pt, c_hat)

    if not c_cert > 0.0:
        raise CertifyError(f"sub-level threshold is not positive (c = {c_cert:.6g})")
    h = Polynomial.constant(float(c_cert)) - V
    note = f"lyapunov sub-level: c = {c_cert:.12g} (certified lower bound; sampled estimate {c_hat:.12g})"
    return BarrierCertificate(h=h, gamma=gamma, provenance=note)


def _bisect_boundary(sys: DynSystem, safe: np.ndarray, unsafe: np.ndarray, iters: int = 60) -> np.ndarray:
    a, b = np.asarray(safe, float), np.asarray(unsafe, float)
    for _ in range(iters):
        mid = 0.5 * (a + b)
        if sys.min_g(mid) >= 0:
            a = mid
        else:
            b = mid
    return 0.5 * (a + b)


def _descend_on_boundary(sys, v_fn, rng, steps: int, start: np.ndarray, start_val: float) -> float:
    """Local descent of V along the unsafe boundary by perturb-and-reproject."""
    lo = np.array(sys.admissible.lo)
    hi = np.array(sys.admissible.hi)
    cur = np.asarray(start, float)
    cur_val = start_val
    scale = 0.1 * (hi - lo)
    for k in range(steps):
        cand = np.clip(cur + rng.normal(scale=scale), lo, hi)
        if (sys.min_g(cand) >= 0) != (sys.min_g(cur) >= 0):
            z = _bisect_boundary(sys, *((cand, cur) if sys.min_g(cand) >= 0 else (cur, cand)))
            z_val = float(v_fn(*z))
            if z_val < cur_val:
                cur, cur_val = z, z_val
                continue
        if k % 20 == 19:
            scale *= 0.5
    return cur_val


# -- certificate files ---------------------------------------------------------


def save_certificate(bac: BarrierCertificate, path: str | Path) -> None:
    payload = {"h": bac.h.to_text(), "gamma": bac.gamma, "provenance": bac.provenance}
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_certificate(path: str | Path) -> BarrierCertificate:
    payload = json.loads(Path(path).read_text())
    return BarrierCertificate(
        h=Polynomial.from_text(payload["h"]),
        gamma=float(payload.get("gamma", 1.0)),
        provenance=str(payload.get("provenance", f"loaded from {path}")),
    )
