"""Builtin example systems and model loading.

M1 is a grid-connected single-inverter voltage model with linear dynamics,
factored as plant dv/dt = u so that both the droop baseline controller and an
untrusted advanced controller actuate the same input.  M2 is an islanded
two-inverter droop model whose line power flows carry sin/cos terms; it is
built through the trig recasting pipeline and is purely polynomial.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import expr
from .expr import AuxPair, parse_system, recast
from .poly import IntervalBox, Polynomial, lie_derivative


class ModelError(ValueError):
    pass


@dataclass
class DynSystem:
    """Polynomial ODE system dx/dt = f(x, u) with its operating envelope.

    unsafe holds polynomials g_k; a state is unsafe iff some g_k(x) < 0
    (boundary states with g_k = 0 are safe).
    """

    # equality covers the dynamical structure and envelope; presentation
    # fields (name, controllers, monitoring) are excluded so a model printed
    # to a file and reloaded compares equal
    name: str = field(compare=False)
    states: tuple[str, ...]
    inputs: tuple[str, ...]
    derivs: dict[str, Polynomial]
    admissible: IntervalBox
    control: IntervalBox
    unsafe: tuple[Polynomial, ...]
    init: IntervalBox
    eta: float
    params: dict[str, float] = field(default_factory=dict)
    aux: tuple[AuxPair, ...] = field(default=(), compare=False)
    baseline: Optional[tuple[Polynomial, ...]] = field(default=None, compare=False)
    monitor: Optional[str] = field(default=None, compare=False)
    refs: dict[str, float] = field(default_factory=dict, compare=False)
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.eta <= 0:
            raise ModelError(f"control period must be positive, got {self.eta}")
        if tuple(self.admissible.names) != self.states:
            raise ModelError("admissible box must cover the states in order")
        if tuple(self.control.names) != self.inputs:
            raise ModelError("control box must cover the inputs in order")
        allowed = set(self.states) | set(self.inputs)
        for s, p in self.derivs.items():
            if s not in self.states:
                raise ModelError(f"derivative given for unknown state {s!r}")
            extra = set(p.variables) - allowed
            if extra:
                raise ModelError(f"derivative of {s!r} references undeclared {sorted(extra)}")
        for s in self.states:
            if s not in self.derivs:
                raise ModelError(f"missing derivative for state {s!r}")
        for g in self.unsafe:
            extra = set(g.variables) - set(self.states)
            if extra:
                raise ModelError(f"unsafe polynomial references non-state {sorted(extra)}")
        if self.baseline is not None and len(self.baseline) != len(self.inputs):
            raise ModelError("baseline needs one polynomial per input")

    # -- evaluation helpers (compiled once, reused in hot loops) ----------

    def field_fn(self) -> Callable:
        """Closure (x..., u...) -> tuple of state derivatives."""
        fn = self._cache.get("field")
        if fn is None:
            order = self.states + self.inputs
            fns = [self.derivs[s].evaluator(order) for s in self.states]
            n = len(order)
            args = ", ".join(f"a{i}" for i in range(n))
            calls = ", ".join(f"_f{i}({args})" for i in range(len(fns)))
            src = f"lambda {args}: ({calls}{',' if len(fns) == 1 else ''})"
            fn = eval(src, {f"_f{i}": f for i, f in enumerate(fns)})
            self._cache["field"] = fn
        return fn

    def unsafe_fns(self) -> list[Callable]:
        fns = self._cache.get("unsafe")
        if fns is None:
            fns = [g.evaluator(self.states) for g in self.unsafe]
            self._cache["unsafe"] = fns
        return fns

    def min_g(self, x: Sequence[float]) -> float:
        return min(fn(*x) for fn in self.unsafe_fns()) if self.unsafe else float("inf")

    def is_unsafe(self, x: Sequence[float]) -> bool:
        return self.min_g(x) < 0.0

    def baseline_fn(self) -> Callable:
        if self.baseline is None:
            raise ModelError(f"model {self.name!r} has no baseline controller")
        fn = self._cache.get("baseline")
        if fn is None:
            fns = [p.evaluator(self.states) for p in self.baseline]
            fn = lambda *x: tuple(f(*x) for f in fns)  # noqa: E731
            self._cache["baseline"] = fn
        return fn

    # -- initial states -----------------------------------------------------

    def complete_initial(self, base: Mapping[str, float] | Sequence[float]) -> tuple[float, ...]:
        """Fill auxiliary sin/cos states consistently from base-state values."""
        base_names = tuple(self.init.names)
        if not isinstance(base, Mapping):
            if len(base) == len(self.states):
                return tuple(float(v) for v in base)
            base = dict(zip(base_names, base))
        vals = {n: float(base[n]) for n in base_names}
        for pair in self.aux:
            a = pair.arg.eval_map(vals)
            vals[pair.sin_name] = float(np.sin(a))
            vals[pair.cos_name] = float(np.cos(a))
        missing = [s for s in self.states if s not in vals]
        if missing:
            raise ModelError(f"initial state missing values for {missing}")
        return tuple(vals[s] for s in self.states)

    def sample_initial(self, rng: np.random.Generator, n: int) -> list[tuple[float, ...]]:
        pts = self.init.sample(rng, n)
        return [self.complete_initial(dict(zip(self.init.names, row))) for row in pts]

    def lie(self, p: Polynomial) -> Polynomial:
        return lie_derivative(p, self.derivs)

    # -- identity -------------------------------------------------------------

    def canonical_text(self) -> str:
        parts = [
            "states " + " ".join(self.states),
            "inputs " + " ".join(self.inputs),
        ]
        for s in self.states:
            parts.append(f"d{s}/dt = {self.derivs[s].to_text()}")
        for label, box in (("admissible", self.admissible), ("control", self.control), ("init", self.init)):
            for n, lo, hi in zip(box.names, box.lo, box.hi):
                parts.append(f"{label} {n} [{lo!r}, {hi!r}]")
        for g in self.unsafe:
            parts.append("unsafe " + g.to_text())
        parts.append(f"eta {self.eta!r}")
        for pair in self.aux:
            parts.append(f"aux {pair.sin_name} {pair.cos_name} {pair.arg.to_text()}")
        return "\n".join(parts)

    def model_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_cache"] = {}
        return state


# -- builtin models ------------------------------------------------------------

# Grid-connected single-inverter voltage regulation.  The plant exposes the
# voltage rate as its input (dv/dt = u); q is the measured reactive-power
# deviation from its set-point, relaxing at rate kr.  The droop baseline
# controller computes u = (vref - v) - lq*q.  The admissible box equals the
# +/-3% voltage safety band, so leaving it is exactly a safety violation.
M1_TEXT = """
# grid-connected single-inverter droop-regulated voltage model
states v q
inputs u
params
  vref = 0.48
  band = 0.0144
  lq = 0.05
  kr = 2.0
  qmax = 0.1
  umax = 0.1
  eta = 0.0032
  initdev = 0.0048
  qinit = 0.05
dynamics
  dv/dt = u
  dq/dt = -kr*q
admissible
  v in [vref - band, vref + band]
  q in [-qmax, qmax]
controls
  u in [-umax, umax]
unsafe when band^2 - (v - vref)^2 < 0
init
  v in [vref - initdev, vref + initdev]
  q in [-qinit, qinit]
"""

# Islanded two-inverter droop microgrid (angles, frequency deviations,
# voltages; line power flows bring in sin/cos of the relative angle, which
# the recasting pass replaces by the auxiliary pair (s, c)).  Voltage
# channels are factored as plants dv_i/dt = u_i with droop baselines.
M2_TEXT = """
# islanded two-inverter droop microgrid, polynomial after recasting
states th1 w1 v1 th2 w2 v2
inputs u1 u2
params
  G = 0.2
  Bline = 1.0
  lp = 0.1
  lq = 0.1
  v0 = 1.0
  band = 0.05
  wmax = 2.0
  thmax = 4.0
  umax = 0.5
  pref = 0.2
  eta = 0.0032
dynamics
  dth1/dt = w1
  dw1/dt = -w1 + lp*(pref - v1*v2*(G*cos(th1 - th2) + Bline*sin(th1 - th2)))
  dv1/dt = u1
  dth2/dt = w2
  dw2/dt = -w2 + lp*(pref - v1*v2*(G*cos(th1 - th2) - Bline*sin(th1 - th2)))
  dv2/dt = u2
admissible
  th1 in [-thmax, thmax]
  w1 in [-wmax, wmax]
  v1 in [v0 - band, v0 + band]
  th2 in [-thmax, thmax]
  w2 in [-wmax, wmax]
  v2 in [v0 - band, v0 + band]
controls
  u1 in [-umax, umax]
  u2 in [-umax, umax]
unsafe when band^2 - (v1 - v0)^2 < 0
unsafe when band^2 - (v2 - v0)^2 < 0
init
  th1 in [-0.3, 0.3]
  w1 in [-0.2, 0.2]
  v1 in [0.98, 1.02]
  th2 in [-0.3, 0.3]
  w2 in [-0.2, 0.2]
  v2 in [0.98, 1.02]
"""

BUILTIN_NAMES = ("M1", "M2")


def builtin(name: str, overrides: Mapping[str, float] | None = None) -> DynSystem:
    """Fully-parameterized builtin system; overrides rebind declared parameters."""
    overrides = overrides or {}
    if name == "M1":
        decl = parse_system(M1_TEXT).with_params(overrides)
        sys = recast(decl)
        p = sys.params
        v, q = Polynomial.var("v"), Polynomial.var("q")
        sys.baseline = ((p["vref"] - v) - p["lq"] * q,)
        sys.name = "M1"
        sys.monitor = "v"
        sys.refs = {"v_ref": p["vref"]}
        return sys
    if name == "M2":
        decl = parse_system(M2_TEXT).with_params(overrides)
        sys = recast(decl)
        p = sys.params
        v1, v2 = Polynomial.var("v1"), Polynomial.var("v2")
        s, c = Polynomial.var("s"), Polynomial.var("c")
        g, b = p["G"], p["Bline"]
        # line reactive power as seen by each inverter; set-points taken at
        # the synchronous equilibrium (th1 = th2, v = v0): Q* = -B*v0^2
        q1 = v1 * v2 * (g * s - b * c)
        q2 = v1 * v2 * (-g * s - b * c)
        qref = -b * p["v0"] * p["v0"]
        u1 = (p["v0"] - v1) + p["lq"] * (Polynomial.constant(qref) - q1)
        u2 = (p["v0"] - v2) + p["lq"] * (Polynomial.constant(qref) - q2)
        sys.baseline = (u1, u2)
        sys.name = "M2"
        sys.monitor = "v1"
        sys.refs = {"v_ref": p["v0"]}
        return sys
    raise ModelError(f"unknown builtin model {name!r}; choose from {BUILTIN_NAMES}")


def load(path: str | Path, overrides: Mapping[str, float] | None = None) -> DynSystem:
    """Parse a model file and recast it; errors carry line/column positions."""
    path = Path(path)
    decl = parse_system(path.read_text())
    if overrides:
        decl = decl.with_params(overrides)
    sys = recast(decl)
    sys.name = path.stem
    if sys.states:
        sys.monitor = sys.states[0]
    if "vref" in sys.params:
        sys.refs = {"v_ref": sys.params["vref"]}
    return sys


def load_text(text: str, name: str = "model", overrides: Mapping[str, float] | None = None) -> DynSystem:
    decl = parse_system(text)
    if overrides:
        decl = decl.with_params(overrides)
    sys = recast(decl)
    sys.name = name
    sys.monitor = sys.states[0]
    if "vref" in sys.params:
        sys.refs = {"v_ref": sys.params["vref"]}
    return sys


def default_bac(sys: DynSystem):
    """Band barrier certificate shipped with the builtin models.

    h equals the (first) unsafe band polynomial, so its zero-super-level set
    is exactly the safe voltage band; gamma = 2 cancels the quadratic term of
    dh/dt + gamma*h under the droop closed loop, which keeps the certification
    margin interval-computable at shallow bisection depth.
    """
    from .certify import BarrierCertificate

    if not sys.unsafe:
        raise ModelError("system has no unsafe polynomials to derive a band certificate from")
    return BarrierCertificate(h=sys.unsafe[0], gamma=2.0, provenance=f"builtin band certificate for {sys.name}")
