"""Sparse multivariate polynomial algebra with sound interval bounds over boxes.

Polynomials are stored as a sorted variable tuple plus a sparse map from
exponent vectors to nonzero float coefficients, so structural equality is
plain dataclass equality.  Interval bounds use outward-rounded interval
arithmetic with an even-power rule and optional recursive box bisection.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

Mono = tuple[int, ...]
Interval = tuple[float, float]

_INF = float("inf")


class PolynomialError(ValueError):
    pass


def _widen(lo: float, hi: float) -> Interval:
    # one-ulp outward rounding so float round-off never shrinks an enclosure
    return (math.nextafter(lo, -_INF), math.nextafter(hi, _INF))


def iadd(a: Interval, b: Interval) -> Interval:
    return _widen(a[0] + b[0], a[1] + b[1])


def imul(a: Interval, b: Interval) -> Interval:
    p = (a[0] * b[0], a[0] * b[1], a[1] * b[0], a[1] * b[1])
    return _widen(min(p), max(p))


def ipow(a: Interval, e: int) -> Interval:
    if e == 0:
        return (1.0, 1.0)
    if e == 1:
        return a
    lo, hi = a
    if e % 2 == 0:
        m = max(abs(lo), abs(hi))
        if lo <= 0.0 <= hi:
            return _widen(0.0, m**e)
        k = min(abs(lo), abs(hi))
        return _widen(k**e, m**e)
    return _widen(lo**e, hi**e)


@dataclass(frozen=True)
class IntervalBox:
    """Axis-aligned closed box: one [lo, hi] interval per named variable."""

    names: tuple[str, ...]
    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self) -> None:
        if not (len(self.names) == len(self.lo) == len(self.hi)):
            raise PolynomialError("box arity mismatch")
        for n, l, h in zip(self.names, self.lo, self.hi):
            if not (l <= h):
                raise PolynomialError(f"box interval for {n} has lo > hi: [{l}, {h}]")

    @staticmethod
    def of(entries: Mapping[str, tuple[float, float]]) -> "IntervalBox":
        names = tuple(entries)
        return IntervalBox(
            names,
            tuple(float(entries[n][0]) for n in names),
            tuple(float(entries[n][1]) for n in names),
        )

    def interval(self, name: str) -> Interval:
        i = self.names.index(name)
        return (self.lo[i], self.hi[i])

    def as_dict(self) -> dict[str, Interval]:
        return {n: (l, h) for n, l, h in zip(self.names, self.lo, self.hi)}

    def contains(self, point: Sequence[float], strict: bool = False) -> bool:
        if strict:
            return all(l < x < h for x, l, h in zip(point, self.lo, self.hi))
        return all(l <= x <= h for x, l, h in zip(point, self.lo, self.hi))

    def product(self, other: "IntervalBox") -> "IntervalBox":
        return IntervalBox(self.names + other.names, self.lo + other.lo, self.hi + other.hi)

    def restrict(self, names: Iterable[str]) -> "IntervalBox":
        keep = [self.names.index(n) for n in names]
        return IntervalBox(
            tuple(self.names[i] for i in keep),
            tuple(self.lo[i] for i in keep),
            tuple(self.hi[i] for i in keep),
        )

    def widest_axis(self) -> int:
        widths = [h - l for l, h in zip(self.lo, self.hi)]
        return widths.index(max(widths))

    def split(self, axis: int) -> tuple["IntervalBox", "IntervalBox"]:
        mid = 0.5 * (self.lo[axis] + self.hi[axis])
        lo2 = list(self.lo)
        hi1 = list(self.hi)
        hi1[axis] = mid
        lo2[axis] = mid
        return (
            IntervalBox(self.names, self.lo, tuple(hi1)),
            IntervalBox(self.names, tuple(lo2), self.hi),
        )

    def shrink(self, dec: Sequence[float], inc: Sequence[float], mult: float = 1.0):
        """Move each lower bound up by mult*dec and upper down by mult*inc.

        Returns the shrunken box, or None when any interval collapses.  The
        result is interpreted as an OPEN box; use contains(strict=True).
        """
        lo = tuple(l + mult * d for l, d in zip(self.lo, dec))
        hi = tuple(h - mult * i for h, i in zip(self.hi, inc))
        if any(l >= h for l, h in zip(lo, hi)):
            return None
        return IntervalBox(self.names, lo, hi)

    def midpoint(self) -> tuple[float, ...]:
        return tuple(0.5 * (l + h) for l, h in zip(self.lo, self.hi))

    def sample(self, rng, n: int):
        """Uniform samples, shape (n, len(names)). rng is a numpy Generator."""
        import numpy as np

        return rng.uniform(np.array(self.lo), np.array(self.hi), size=(n, len(self.names)))


def _fmt_coef(c: float) -> str:
    return format(c, ".17g")


@dataclass(frozen=True)
class Polynomial:
    """Sparse multivariate polynomial over named real variables.

    Variables are kept sorted so equal polynomials compare equal structurally;
    terms map exponent tuples to nonzero coefficients.
    """

    variables: tuple[str, ...]
    terms: dict[Mono, float] = field(default_factory=dict)
    _fns: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if tuple(sorted(self.variables)) != self.variables:
            raise PolynomialError("variables must be sorted; use Polynomial.make")
        for mono, coef in self.terms.items():
            if len(mono) != len(self.variables):
                raise PolynomialError("exponent vector arity mismatch")
            if any(e < 0 or not isinstance(e, int) for e in mono):
                raise PolynomialError("exponents must be non-negative integers")
            if coef == 0.0:
                raise PolynomialError("zero coefficients must not be stored")

    # -- construction -----------------------------------------------------

    @staticmethod
    def make(terms: Mapping[Mono, float], variables: Sequence[str]) -> "Polynomial":
        order = tuple(sorted(variables))
        remap = [order.index(v) for v in variables]
        out: dict[Mono, float] = {}
        for mono, coef in terms.items():
            m = [0] * len(order)
            for slot, e in enumerate(mono):
                m[remap[slot]] += int(e)
            key = tuple(m)
            out[key] = out.get(key, 0.0) + float(coef)
        return Polynomial._of(order, out)

    @staticmethod
    def _of(variables: tuple[str, ...], terms: dict[Mono, float]) -> "Polynomial":
        """Canonicalize: drop zero coefficients and variables that never appear."""
        terms = {m: c for m, c in terms.items() if c != 0.0}
        used = [i for i in range(len(variables)) if any(m[i] for m in terms)]
        if len(used) != len(variables):
            variables = tuple(variables[i] for i in used)
            terms = {tuple(m[i] for i in used): c for m, c in terms.items()}
        return Polynomial(variables, terms)

    @staticmethod
    def constant(c: float) -> "Polynomial":
        c = float(c)
        return Polynomial((), {(): c} if c != 0.0 else {})

    @staticmethod
    def var(name: str) -> "Polynomial":
        return Polynomial((name,), {(1,): 1.0})

    @staticmethod
    def zero() -> "Polynomial":
        return Polynomial((), {})

    # -- helpers ----------------------------------------------------------

    @property
    def is_zero(self) -> bool:
        return not self.terms

    def degree(self) -> int:
        return max((sum(m) for m in self.terms), default=0)

    def _on(self, variables: tuple[str, ...]) -> dict[Mono, float]:
        """Re-express terms on a superset variable tuple (sorted)."""
        if variables == self.variables:
            return dict(self.terms)
        idx = [variables.index(v) for v in self.variables]
        out: dict[Mono, float] = {}
        for mono, coef in self.terms.items():
            m = [0] * len(variables)
            for slot, e in enumerate(mono):
                m[idx[slot]] = e
            out[tuple(m)] = coef
        return out

    @staticmethod
    def _merge_vars(a: "Polynomial", b: "Polynomial") -> tuple[str, ...]:
        return tuple(sorted(set(a.variables) | set(b.variables)))

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other) -> "Polynomial":
        if not isinstance(other, Polynomial):
            other = Polynomial.constant(other)
        vs = self._merge_vars(self, other)
        out = self._on(vs)
        for mono, coef in other._on(vs).items():
            s = out.get(mono, 0.0) + coef
            if s == 0.0:
                out.pop(mono, None)
            else:
                out[mono] = s
        return Polynomial._of(vs, out)

    __radd__ = __add__

    def __neg__(self) -> "Polynomial":
        return Polynomial(self.variables, {m: -c for m, c in self.terms.items()})

    def __sub__(self, other) -> "Polynomial":
        if not isinstance(other, Polynomial):
            other = Polynomial.constant(other)
        return self + (-other)

    def __rsub__(self, other) -> "Polynomial":
        return Polynomial.constant(other) - self

    def __mul__(self, other) -> "Polynomial":
        if not isinstance(other, Polynomial):
            c = float(other)
            if c == 0.0:
                return Polynomial.zero()
            return Polynomial._of(self.variables, {m: c * k for m, k in self.terms.items()})
        vs = self._merge_vars(self, other)
        a = self._on(vs)
        b = other._on(vs)
        out: dict[Mono, float] = {}
        for m1, c1 in a.items():
            for m2, c2 in b.items():
                key = tuple(e1 + e2 for e1, e2 in zip(m1, m2))
                s = out.get(key, 0.0) + c1 * c2
                out[key] = s
        return Polynomial._of(vs, out)

    __rmul__ = __mul__

    def __pow__(self, e: int) -> "Polynomial":
        if not isinstance(e, int) or e < 0:
            raise PolynomialError("polynomial powers must be non-negative integers")
        out = Polynomial.constant(1.0)
        for _ in range(e):
            out = out * self
        return out

    # -- calculus ---------------------------------------------------------

    def partial(self, var: str) -> "Polynomial":
        """Formal partial derivative; zero when var is unknown to the polynomial."""
        if var not in self.variables:
            return Polynomial.zero()
        i = self.variables.index(var)
        out: dict[Mono, float] = {}
        for mono, coef in self.terms.items():
            e = mono[i]
            if e == 0:
                continue
            m = list(mono)
            m[i] = e - 1
            key = tuple(m)
            out[key] = out.get(key, 0.0) + coef * e
        return Polynomial._of(self.variables, out)

    # -- evaluation -------------------------------------------------------

    def evaluator(self, order: Sequence[str]) -> Callable:
        """Compile a positional-argument closure for the given variable order.

        The generated code sums monomials with repeated multiplication only,
        so it also vectorizes over numpy arrays.
        """
        order = tuple(order)
        fn = self._fns.get(order)
        if fn is None:
            missing = set(self.variables) - set(order)
            if missing:
                raise PolynomialError(f"evaluator order is missing variables {sorted(missing)}")
            arg = {v: f"a{i}" for i, v in enumerate(order)}
            parts = []
            for mono, coef in self.canonical_terms():
                factors = [repr(coef)]
                for v, e in zip(self.variables, mono):
                    factors.extend([arg[v]] * e)
                parts.append("*".join(factors))
            body = " + ".join(parts) if parts else "0.0"
            src = "lambda " + ", ".join(arg[v] for v in order) + ": " + body
            fn = eval(compile(src, "<poly>", "eval"), {"__builtins__": {}})
            self._fns[order] = fn
        return fn

    def eval(self, point: Sequence[float]) -> float:
        """Evaluate at a point given in this polynomial's variable order."""
        if len(point) != len(self.variables):
            raise PolynomialError(
                f"point has {len(point)} coordinates, polynomial has {len(self.variables)} variables"
            )
        return self.evaluator(self.variables)(*point)

    def eval_map(self, values: Mapping[str, float]) -> float:
        return self.eval([values[v] for v in self.variables])

    def substitute(self, bindings: Mapping[str, float]) -> "Polynomial":
        """Fix some variables numerically; exact, result is in the rest."""
        for v in bindings:
            if v not in self.variables:
                raise PolynomialError(f"cannot substitute unknown variable {v!r}")
        keep = tuple(v for v in self.variables if v not in bindings)
        out: dict[Mono, float] = {}
        for mono, coef in self.terms.items():
            c = coef
            m = []
            for v, e in zip(self.variables, mono):
                if v in bindings:
                    c *= float(bindings[v]) ** e
                else:
                    m.append(e)
            if c == 0.0:
                continue
            key = tuple(m)
            s = out.get(key, 0.0) + c
            if s == 0.0:
                out.pop(key, None)
            else:
                out[key] = s
        return Polynomial._of(keep, out)

    def compose(self, bindings: Mapping[str, "Polynomial"]) -> "Polynomial":
        """Substitute variables by polynomials (used to close a loop symbolically)."""
        out = Polynomial.zero()
        for mono, coef in self.terms.items():
            term = Polynomial.constant(coef)
            for v, e in zip(self.variables, mono):
                if e == 0:
                    continue
                base = bindings.get(v, Polynomial.var(v))
                term = term * base**e
            out = out + term
        return out

    # -- canonical text ---------------------------------------------------

    def canonical_terms(self) -> list[tuple[Mono, float]]:
        """Graded lexicographic order: total degree descending, then exponents."""
        return sorted(self.terms.items(), key=lambda mc: (-sum(mc[0]), tuple(-e for e in mc[0])))

    def to_text(self) -> str:
        parts = []
        for mono, coef in self.canonical_terms():
            factors = [_fmt_coef(coef)]
            factors.extend(f"{v}^{e}" for v, e in zip(self.variables, mono) if e > 0)
            parts.append("*".join(factors))
        return " + ".join(parts) if parts else "0"

    _TERM_RE = re.compile(r"^\s*(-?[0-9.eE+-]+?)((?:\*[A-Za-z_]\w*\^\d+)*)\s*$")

    @staticmethod
    def from_text(text: str) -> "Polynomial":
        text = text.strip()
        if text == "0":
            return Polynomial.zero()
        out = Polynomial.zero()
        for raw in text.split(" + "):
            m = Polynomial._TERM_RE.match(raw)
            if not m:
                raise PolynomialError(f"bad canonical polynomial term {raw!r}")
            coef = float(m.group(1))
            term = Polynomial.constant(coef)
            for piece in m.group(2).split("*")[1:]:
                name, exp = piece.split("^")
                term = term * Polynomial.var(name) ** int(exp)
            out = out + term
        return out

    def __str__(self) -> str:
        return self.to_text()

    # compiled closures never cross process boundaries
    def __getstate__(self):
        return (self.variables, self.terms)

    def __setstate__(self, state):
        object.__setattr__(self, "variables", state[0])
        object.__setattr__(self, "terms", state[1])
        object.__setattr__(self, "_fns", {})


# -- module-level operations ------------------------------------------------


def evaluate(p: Polynomial, point: Sequence[float]) -> float:
    return p.eval(point)


def partial(p: Polynomial, var: str) -> Polynomial:
    return p.partial(var)


def substitute(p: Polynomial, bindings: Mapping[str, float]) -> Polynomial:
    return p.substitute(bindings)


def lie_derivative(p: Polynomial, system) -> Polynomial:
    """Directional derivative of p along a polynomial vector field.

    `system` is either a mapping {state: derivative polynomial} or an object
    exposing one as `.derivs`.  Differentiation is with respect to the field's
    state variables only; control inputs pass through as symbols.
    """
    derivs: Mapping[str, Polynomial] = getattr(system, "derivs", system)
    out = Polynomial.zero()
    for state, f_i in derivs.items():
        dp = p.partial(state)
        if not dp.is_zero:
            out = out + dp * f_i
    return out


def interval_eval(p: Polynomial, box: IntervalBox) -> Interval:
    """Plain interval-arithmetic enclosure (no bisection)."""
    ivals = {v: box.interval(v) for v in p.variables}
    total: Interval = (0.0, 0.0)
    for mono, coef in p.terms.items():
        t: Interval = (coef, coef)
        for v, e in zip(p.variables, mono):
            if e:
                t = imul(t, ipow(ivals[v], e))
        total = iadd(total, t)
    return total


def box_bound(p: Polynomial, box: IntervalBox, depth: int = 0) -> Interval:
    """Sound enclosure of p's range over the box.

    depth > 0 recursively bisects the widest axis (restricted to p's
    variables) and unions the child enclosures, which narrows the result
    monotonically.
    """
    if p.is_zero:
        return (0.0, 0.0)
    if not p.variables:
        c = p.terms.get((), 0.0)
        return (c, c)
    sub = box.restrict([v for v in box.names if v in p.variables])
    missing = set(p.variables) - set(sub.names)
    if missing:
        raise PolynomialError(f"box does not cover variables {sorted(missing)}")
    return _box_bound_rec(p, sub, depth)


def _box_bound_rec(p: Polynomial, box: IntervalBox, depth: int) -> Interval:
    if depth <= 0:
        return interval_eval(p, box)
    a, b = box.split(box.widest_axis())
    la, ha = _box_bound_rec(p, a, depth - 1)
    lb, hb = _box_bound_rec(p, b, depth - 1)
    return (min(la, lb), max(ha, hb))
