"""Derivation of the switching artifact from a system and a barrier certificate.

The artifact bundles the Lie-derivative chain h^0..h^{n+1}, sound bounds for
the Taylor remainder (lambda) and one-period state motion (mu), and the
restricted admissible regions used by the forward and reverse switching
conditions.  Bounds come from interval arithmetic with box bisection, so they
over-approximate the suprema they stand for; an under-estimate would void the
safety argument, an over-estimate only adds conservatism.
"""
from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .certify import BarrierCertificate, check_bac
from .model import DynSystem
from .poly import IntervalBox, Polynomial, box_bound, lie_derivative

ALL = "ALL"

STRATEGIES = ("per-action", "global")


class DeriveError(ValueError):
    pass


def taylor_chain(bc: BarrierCertificate, sys: DynSystem, n: int) -> list[Polynomial]:
    """h^0 = h and h^{i+1} = Lie derivative of h^i along f, up to i = n."""
    if n < 1:
        raise DeriveError("Taylor order must be at least 1")
    chain = [bc.h]
    for _ in range(n + 1):
        chain.append(lie_derivative(chain[-1], sys.derivs))
    return chain


@dataclass
class SwitchingArtifact:
    """Everything the decision module needs, precomputed and serializable."""

    states: tuple[str, ...]
    inputs: tuple[str, ...]
    h: Polynomial
    gamma: float
    lie: tuple[Polynomial, ...]  # h^0 .. h^{n+1}
    n: int
    eta: float
    m: int
    strategy: str
    lambda_global: float
    mu_dec_global: tuple[float, ...]
    mu_inc_global: tuple[float, ...]
    admissible: IntervalBox
    control: IntervalBox
    unsafe: tuple[Polynomial, ...]
    model_hash: str
    depth: int = 6
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise DeriveError(f"strategy must be one of {STRATEGIES}")
        if self.m <= 1:
            raise DeriveError("reverse-switch multiplier m must be an integer > 1")
        if len(self.lie) != self.n + 2:
            raise DeriveError("lie chain must hold h^0..h^{n+1}")
        if self.lambda_global < 0 or any(v < 0 for v in self.mu_dec_global + self.mu_inc_global):
            raise DeriveError("global bounds must be non-negative")

    # -- precombined evaluators -------------------------------------------

    def hhat_poly(self) -> Polynomial:
        """Taylor prediction sum_{i=0..n} h^i * eta^i / i! as one polynomial."""
        p = self._cache.get("hhat")
        if p is None:
            p = Polynomial.zero()
            for i in range(self.n + 1):
                p = p + self.lie[i] * (self.eta**i / math.factorial(i))
            self._cache["hhat"] = p
        return p

    def hhat_fn(self):
        fn = self._cache.get("hhat_fn")
        if fn is None:
            fn = self.hhat_poly().evaluator(self.states + self.inputs)
            self._cache["hhat_fn"] = fn
        return fn

    def h_fn(self):
        fn = self._cache.get("h_fn")
        if fn is None:
            fn = self.h.evaluator(self.states)
            self._cache["h_fn"] = fn
        return fn

    def hdot_fn(self):
        fn = self._cache.get("hdot_fn")
        if fn is None:
            fn = self.lie[1].evaluator(self.states + self.inputs)
            self._cache["hdot_fn"] = fn
        return fn

    # -- bounds -------------------------------------------------------------

    def _field_polys(self) -> dict[str, Polynomial]:
        polys = self._cache.get("field_polys")
        if polys is None:
            raise DeriveError("artifact is not bound to a system field; derive or load it")
        return polys

    def bind_field(self, derivs: dict[str, Polynomial]) -> None:
        self._cache["field_polys"] = dict(derivs)

    def lambda_for(self, u) -> float:
        """Sound remainder bound. u is an action vector, or ALL for the global bound."""
        if isinstance(u, str):
            if u == ALL:
                return self.lambda_global
            raise DeriveError(f"unknown lambda marker {u!r}")
        key = ("lam", tuple(float(v) for v in u))
        val = self._cache.get(key)
        if val is None:
            self._check_action(key[1])
            p = self.lie[self.n + 1]
            hn1 = p.substitute({k: v for k, v in zip(self.inputs, key[1]) if k in p.variables})
            lo, hi = box_bound(hn1, self.admissible, self.depth)
            val = max(abs(lo), abs(hi)) * self.eta ** (self.n + 1) / math.factorial(self.n + 1)
            self._cache[key] = val
        return val

    def mu_for(self, u) -> tuple[tuple[float, ...], tuple[float, ...]]:
        """Per-state one-period decrease/increase bounds (mu_dec, mu_inc)."""
        if isinstance(u, str):
            if u == ALL:
                return self.mu_dec_global, self.mu_inc_global
            raise DeriveError(f"unknown mu marker {u!r}")
        key = ("mu", tuple(float(v) for v in u))
        val = self._cache.get(key)
        if val is None:
            self._check_action(key[1])
            subs = dict(zip(self.inputs, key[1]))
            dec, inc = [], []
            for s in self.states:
                p = self._field_polys()[s]
                f_i = p.substitute({k: v for k, v in subs.items() if k in p.variables})
                lo, hi = box_bound(f_i, self.admissible, self.depth)
                dec.append(abs(min(0.0, self.eta * lo)))
                inc.append(abs(max(0.0, self.eta * hi)))
            val = (tuple(dec), tuple(inc))
            self._cache[key] = val
        return val

    def _check_action(self, u: tuple[float, ...]) -> None:
        if len(u) != len(self.inputs):
            raise DeriveError(f"action arity {len(u)} != {len(self.inputs)}")
        if not self.control.contains(u):
            raise DeriveError(f"action {u} lies outside the control set")

    def restricted(self, u, multiplier: int = 1) -> Optional[IntervalBox]:
        """A_r(u) (multiplier 1) or the m-times restricted region; None when empty."""
        if multiplier == 1:
            cache_key = ("region", tuple(u) if not isinstance(u, str) else u)
        else:
            cache_key = ("region_m", tuple(u) if not isinstance(u, str) else u, multiplier)
        if cache_key in self._cache:
            return self._cache[cache_key]
        dec, inc = self.mu_for(u)
        box = self.admissible.shrink(dec, inc, mult=float(multiplier))
        self._cache[cache_key] = box
        return box

    def region_for_fsc(self, u) -> Optional[IntervalBox]:
        if self.strategy == "global":
            return self.restricted(ALL, 1)
        return self.restricted(tuple(u), 1)

    def lambda_for_fsc(self, u) -> float:
        if self.strategy == "global":
            return self.lambda_global
        return self.lambda_for(tuple(u))

    def rsc_region(self) -> Optional[IntervalBox]:
        # the m-times-restricted region always uses bounds maximized over all actions
        return self.restricted(ALL, self.m)


def lambda_bound(art: SwitchingArtifact, u) -> float:
    return art.lambda_for(u)


def mu_bounds(art: SwitchingArtifact, u):
    return art.mu_for(u)


def restricted_region(art: SwitchingArtifact, u, multiplier: int = 1):
    return art.restricted(u, multiplier)


def derive_artifact(
    sys: DynSystem,
    bc: BarrierCertificate,
    n: int = 4,
    m: int = 3,
    strategy: str = "global",
    depth: int = 6,
    check_budget: int = 20000,
    force: bool = False,
    skip_check: bool = False,
) -> SwitchingArtifact:
    """Derive the switching artifact; refuses falsified certificates unless forced.

    The default strategy is the conservative global one (bounds maximized over
    the whole control set); per-action bounds are evaluated lazily at runtime
    when strategy="per-action".
    """
    if strategy not in STRATEGIES:
        raise DeriveError(f"strategy must be one of {STRATEGIES}")
    if not isinstance(m, int) or m <= 1:
        raise DeriveError("m must be an integer > 1")

    if not skip_check:
        if sys.baseline is None:
            warnings.warn("model has no baseline controller; certificate check skipped")
        else:
            report = check_bac(sys, bc, budget=check_budget, depth=depth)
            if not report.certified:
                msg = (
                    f"certificate failed validation: {report.violated_clause} at {report.counterexample}"
                )
                if not force:
                    raise DeriveError(msg + " (use force to derive anyway)")
                warnings.warn(msg + " -- deriving anyway (forced)")

    chain = taylor_chain(bc, sys, n)
    eta = sys.eta
    full_box = sys.admissible.product(sys.control) if sys.inputs else sys.admissible

    hn1 = chain[n + 1]
    lo, hi = box_bound(hn1, full_box, depth) if not hn1.is_zero else (0.0, 0.0)
    lambda_global = max(abs(lo), abs(hi)) * eta ** (n + 1) / math.factorial(n + 1)

    mu_dec, mu_inc = [], []
    for s in sys.states:
        f_lo, f_hi = box_bound(sys.derivs[s], full_box, depth)
        mu_dec.append(abs(min(0.0, eta * f_lo)))
        mu_inc.append(abs(max(0.0, eta * f_hi)))

    art = SwitchingArtifact(
        states=sys.states,
        inputs=sys.inputs,
        h=bc.h,
        gamma=bc.gamma,
        lie=tuple(chain),
        n=n,
        eta=eta,
        m=m,
        strategy=strategy,
        lambda_global=lambda_global,
        mu_dec_global=tuple(mu_dec),
        mu_inc_global=tuple(mu_inc),
        admissible=sys.admissible,
        control=sys.control,
        unsafe=sys.unsafe,
        model_hash=sys.model_hash(),
        depth=depth,
    )
    art.bind_field(sys.derivs)

    if art.restricted(ALL, 1) is None:
        raise DeriveError(
            "restricted admissible region is empty under the global bounds: "
            f"one control period moves states by up to dec={tuple(mu_dec)}, inc={tuple(mu_inc)}, "
            "which spans the admissible box; the system is too fast for this control period"
        )
    return art


# -- deterministic serialization ------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _emit(value, indent: int = 0) -> str:
    pad = "  " * indent
    if isinstance(value, dict):
        if not value:
            return "{}"
        rows = [f'{pad}  "{k}": {_emit(v, indent + 1)}' for k, v in value.items()]
        return "{\n" + ",\n".join(rows) + f"\n{pad}" + "}"
    if isinstance(value, (list, tuple)):
        if not value:
            return "[]"
        rows = [f"{pad}  {_emit(v, indent + 1)}" for v in value]
        return "[\n" + ",\n".join(rows) + f"\n{pad}" + "]"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return _fmt(value)
    if isinstance(value, str):
        return json.dumps(value)
    raise TypeError(type(value))


def _box_payload(box: IntervalBox) -> dict:
    return {
        "names": list(box.names),
        "lo": [float(v) for v in box.lo],
        "hi": [float(v) for v in box.hi],
    }


def artifact_text(art: SwitchingArtifact) -> str:
    """Byte-deterministic JSON: fixed field order, floats at 17 significant digits."""
    payload = {
        "meta": {
            "n": art.n,
            "eta": float(art.eta),
            "m": art.m,
            "strategy": art.strategy,
            "model_hash": art.model_hash,
            "depth": art.depth,
        },
        "h": art.h.to_text(),
        "lie": [p.to_text() for p in art.lie],
        "lambda_global": float(art.lambda_global),
        "mu_dec_global": [float(v) for v in art.mu_dec_global],
        "mu_inc_global": [float(v) for v in art.mu_inc_global],
        "admissible": _box_payload(art.admissible),
        "unsafe": [g.to_text() for g in art.unsafe],
        "gamma": float(art.gamma),
        "control": _box_payload(art.control),
        "states": list(art.states),
        "inputs": list(art.inputs),
        "field": {s: p.to_text() for s, p in sorted(art._cache.get("field_polys", {}).items())},
    }
    return _emit(payload) + "\n"


def save_artifact(art: SwitchingArtifact, path: str | Path) -> None:
    Path(path).write_text(artifact_text(art))


def load_artifact(path: str | Path) -> SwitchingArtifact:
    payload = json.loads(Path(path).read_text())
    meta = payload["meta"]
    box_a = IntervalBox(
        tuple(payload["admissible"]["names"]),
        tuple(payload["admissible"]["lo"]),
        tuple(payload["admissible"]["hi"]),
    )
    box_c = IntervalBox(
        tuple(payload["control"]["names"]),
        tuple(payload["control"]["lo"]),
        tuple(payload["control"]["hi"]),
    )
    art = SwitchingArtifact(
        states=tuple(payload["states"]),
        inputs=tuple(payload["inputs"]),
        h=Polynomial.from_text(payload["h"]),
        gamma=float(payload["gamma"]),
        lie=tuple(Polynomial.from_text(t) for t in payload["lie"]),
        n=int(meta["n"]),
        eta=float(meta["eta"]),
        m=int(meta["m"]),
        strategy=meta["strategy"],
        lambda_global=float(payload["lambda_global"]),
        mu_dec_global=tuple(payload["mu_dec_global"]),
        mu_inc_global=tuple(payload["mu_inc_global"]),
        admissible=box_a,
        control=box_c,
        unsafe=tuple(Polynomial.from_text(t) for t in payload["unsafe"]),
        model_hash=meta["model_hash"],
        depth=int(meta.get("depth", 6)),
    )
    if payload.get("field"):
        art.bind_field({s: Polynomial.from_text(t) for s, t in payload["field"].items()})
    return art


def artifact_hash(art: SwitchingArtifact) -> str:
    return hashlib.sha256(artifact_text(art).encode()).hexdigest()
