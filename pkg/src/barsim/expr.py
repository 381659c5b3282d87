"""Dynamics model language: parsing and exact trig recasting.

The grammar covers polynomial expressions plus sin/cos of state expressions.
`recast` replaces every distinct trig argument a by a pair of auxiliary
states (s, c) with ds/dt = c*da/dt and dc/dt = -s*da/dt, which is exact, so
downstream modules only ever see polynomial ODEs.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Iterator, Mapping, Optional, Sequence, TYPE_CHECKING

from .poly import Polynomial

if TYPE_CHECKING:
    from .model import DynSystem

SECTIONS = ("states", "inputs", "params", "dynamics", "admissible", "controls", "unsafe", "init")

DEFAULT_ETA = 0.0032


class ModelSyntaxError(ValueError):
    def __init__(self, message: str, line: int, col: int = 0):
        super().__init__(f"line {line}, col {col}: {message}")
        self.line = line
        self.col = col


class RecastError(ValueError):
    pass


# -- AST ----------------------------------------------------------------------


class ExprAst:
    __slots__ = ()

    def children(self) -> tuple["ExprAst", ...]:
        return ()


@dataclass(frozen=True)
class Const(ExprAst):
    value: float


@dataclass(frozen=True)
class Var(ExprAst):
    name: str


@dataclass(frozen=True)
class Add(ExprAst):
    args: tuple[ExprAst, ...]

    def children(self):
        return self.args


@dataclass(frozen=True)
class Mul(ExprAst):
    args: tuple[ExprAst, ...]

    def children(self):
        return self.args


@dataclass(frozen=True)
class Neg(ExprAst):
    arg: ExprAst

    def children(self):
        return (self.arg,)


@dataclass(frozen=True)
class Pow(ExprAst):
    base: ExprAst
    exp: int

    def children(self):
        return (self.base,)


@dataclass(frozen=True)
class Sin(ExprAst):
    arg: ExprAst

    def children(self):
        return (self.arg,)


@dataclass(frozen=True)
class Cos(ExprAst):
    arg: ExprAst

    def children(self):
        return (self.arg,)


def walk(node: ExprAst) -> Iterator[ExprAst]:
    yield node
    for child in node.children():
        yield from walk(child)


def free_names(node: ExprAst) -> set[str]:
    return {n.name for n in walk(node) if isinstance(n, Var)}


def has_trig(node: ExprAst) -> bool:
    return any(isinstance(n, (Sin, Cos)) for n in walk(node))


# -- tokenizer / expression parser ---------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_]\w*)"
    r"|(?P<op>[-+*^(),\[\]=<]))"
)


@dataclass
class _Tok:
    kind: str
    text: str
    col: int


def _tokenize(text: str, line: int) -> list[_Tok]:
    toks = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m or m.end() == pos:
            raise ModelSyntaxError(f"unexpected character {text[pos:].lstrip()[:1]!r}", line, pos + 1)
        if m.lastgroup:
            toks.append(_Tok(m.lastgroup, m.group(m.lastgroup), m.start(m.lastgroup) + 1))
        pos = m.end()
    return toks


class _ExprParser:
    """Recursive descent over one logical line of tokens."""

    def __init__(self, toks: list[_Tok], line: int):
        self.toks = toks
        self.i = 0
        self.line = line

    def peek(self) -> Optional[_Tok]:
        return self.toks[self.i] if self.i < len(self.toks) else None

    def next(self) -> _Tok:
        t = self.peek()
        if t is None:
            raise ModelSyntaxError("unexpected end of expression", self.line, 0)
        self.i += 1
        return t

    def expect_op(self, op: str) -> _Tok:
        t = self.next()
        if t.kind != "op" or t.text != op:
            raise ModelSyntaxError(f"expected {op!r}, found {t.text!r}", self.line, t.col)
        return t

    def at_end(self) -> bool:
        return self.i >= len(self.toks)

    def parse_expr(self) -> ExprAst:
        terms = [self.parse_term()]
        ops = []
        while (t := self.peek()) and t.kind == "op" and t.text in "+-":
            self.next()
            rhs = self.parse_term()
            terms.append(Neg(rhs) if t.text == "-" else rhs)
        if len(terms) == 1:
            return terms[0]
        return Add(tuple(terms))

    def parse_term(self) -> ExprAst:
        factors = [self.parse_factor()]
        while (t := self.peek()) and t.kind == "op" and t.text == "*":
            self.next()
            factors.append(self.parse_factor())
        if len(factors) == 1:
            return factors[0]
        return Mul(tuple(factors))

    def parse_factor(self) -> ExprAst:
        t = self.peek()
        if t and t.kind == "op" and t.text == "-":
            self.next()
            inner = self.parse_factor()
            if isinstance(inner, Const):
                return Const(-inner.value)
            return Neg(inner)
        atom = self.parse_atom()
        t = self.peek()
        if t and t.kind == "op" and t.text == "^":
            self.next()
            e = self.next()
            if e.kind != "num" or not re.fullmatch(r"\d+", e.text):
                raise ModelSyntaxError(f"exponent must be a non-negative integer, found {e.text!r}", self.line, e.col)
            return Pow(atom, int(e.text))
        return atom

    def parse_atom(self) -> ExprAst:
        t = self.next()
        if t.kind == "num":
            return Const(float(t.text))
        if t.kind == "ident":
            if t.text in ("sin", "cos"):
                self.expect_op("(")
                arg = self.parse_expr()
                self.expect_op(")")
                return Sin(arg) if t.text == "sin" else Cos(arg)
            return Var(t.text)
        if t.kind == "op" and t.text == "(":
            inner = self.parse_expr()
            self.expect_op(")")
            return inner
        raise ModelSyntaxError(f"unexpected token {t.text!r}", self.line, t.col)


def parse_expression(text: str, line: int = 1) -> ExprAst:
    p = _ExprParser(_tokenize(text, line), line)
    ast = p.parse_expr()
    if not p.at_end():
        t = p.peek()
        raise ModelSyntaxError(f"trailing input {t.text!r}", line, t.col)
    return ast


# -- printing -------------------------------------------------------------------


def ast_to_text(node: ExprAst) -> str:
    if isinstance(node, Const):
        return repr(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Add):
        parts = []
        for i, a in enumerate(node.args):
            if i and isinstance(a, Neg):
                parts.append("- " + _wrap(a.arg, Add))
            elif i:
                parts.append("+ " + _wrap(a, Add))
            else:
                parts.append(_wrap(a, Add))
        return " ".join(parts)
    if isinstance(node, Mul):
        return "*".join(_wrap(a, Mul) for a in node.args)
    if isinstance(node, Neg):
        return "-" + _wrap(node.arg, Neg)
    if isinstance(node, Pow):
        return _wrap(node.base, Pow) + f"^{node.exp}"
    if isinstance(node, Sin):
        return f"sin({ast_to_text(node.arg)})"
    if isinstance(node, Cos):
        return f"cos({ast_to_text(node.arg)})"
    raise TypeError(node)


def _wrap(node: ExprAst, parent: type) -> str:
    text = ast_to_text(node)
    needs = False
    if parent is Add:
        needs = False
    elif parent is Mul:
        needs = isinstance(node, (Add, Neg))
    elif parent in (Neg, Pow):
        needs = isinstance(node, (Add, Mul, Neg)) or (isinstance(node, Const) and node.value < 0)
    return f"({text})" if needs else text


# -- system declaration ----------------------------------------------------------


@dataclass(frozen=True)
class SystemDecl:
    """Parsed model file: dynamics may still contain sin/cos."""

    states: tuple[str, ...]
    inputs: tuple[str, ...]
    params: tuple[tuple[str, ExprAst], ...]
    derivs: tuple[tuple[str, ExprAst], ...]
    admissible: tuple[tuple[str, ExprAst, ExprAst], ...]
    controls: tuple[tuple[str, ExprAst, ExprAst], ...]
    unsafe: tuple[ExprAst, ...]
    init: tuple[tuple[str, ExprAst, ExprAst], ...]

    def param_values(self) -> dict[str, float]:
        """Evaluate parameter definitions in order; earlier params are visible."""
        values: dict[str, float] = {}
        for name, ast in self.params:
            values[name] = _const_eval(ast, values, name)
        return values

    def eta(self) -> float:
        return self.param_values().get("eta", DEFAULT_ETA)

    def with_params(self, overrides: Mapping[str, float]) -> "SystemDecl":
        declared = {n for n, _ in self.params}
        for k in overrides:
            if k not in declared:
                raise RecastError(f"override of nonexistent parameter {k!r}")
        new = tuple(
            (n, Const(float(overrides[n])) if n in overrides else ast) for n, ast in self.params
        )
        return replace(self, params=new)


def _const_eval(node: ExprAst, params: Mapping[str, float], context: str) -> float:
    if isinstance(node, Const):
        return node.value
    if isinstance(node, Var):
        if node.name not in params:
            raise RecastError(f"{context}: unknown parameter {node.name!r}")
        return params[node.name]
    if isinstance(node, Add):
        return sum(_const_eval(a, params, context) for a in node.args)
    if isinstance(node, Mul):
        out = 1.0
        for a in node.args:
            out *= _const_eval(a, params, context)
        return out
    if isinstance(node, Neg):
        return -_const_eval(node.arg, params, context)
    if isinstance(node, Pow):
        return _const_eval(node.base, params, context) ** node.exp
    raise RecastError(f"{context}: expected a constant expression")


def parse_system(text: str) -> SystemDecl:
    """Parse model-file contents; deterministic, with line/column diagnostics."""
    sections: dict[str, list[tuple[int, str]]] = {s: [] for s in SECTIONS}
    current: Optional[str] = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        first, _, rest = line.strip().partition(" ")
        if first == "unsafe" and rest.strip().startswith("when"):
            # "unsafe when <expr> < 0" doubles as section opener and content
            current = "unsafe"
            sections["unsafe"].append((lineno, line.strip()))
            continue
        if first in SECTIONS:
            current = first
            if rest.strip():
                sections[current].append((lineno, rest.strip()))
            continue
        if current is None:
            raise ModelSyntaxError(f"content before any section: {line.strip()!r}", lineno, 1)
        sections[current].append((lineno, line.strip()))

    states = _parse_name_list(sections["states"])
    inputs = _parse_name_list(sections["inputs"])
    if not states:
        raise ModelSyntaxError("no states declared", 1)

    params: list[tuple[str, ExprAst]] = []
    for lineno, line in sections["params"]:
        name, _, rhs = line.partition("=")
        name = name.strip()
        if not rhs or not re.fullmatch(r"[A-Za-z_]\w*", name):
            raise ModelSyntaxError(f"expected 'name = value', found {line!r}", lineno, 1)
        params.append((name, parse_expression(rhs, lineno)))
    param_names = [n for n, _ in params]

    seen = set()
    for n in list(states) + list(inputs) + param_names:
        if n in seen:
            raise ModelSyntaxError(f"duplicate declaration of {n!r}", 1)
        seen.add(n)

    known = set(states) | set(inputs) | set(param_names)
    derivs: list[tuple[str, ExprAst]] = []
    deriv_re = re.compile(r"^d([A-Za-z_]\w*)\s*/\s*dt\s*=\s*(.+)$")
    for lineno, line in sections["dynamics"]:
        m = deriv_re.match(line)
        if not m:
            raise ModelSyntaxError(f"expected 'd<state>/dt = <expr>', found {line!r}", lineno, 1)
        name = m.group(1)
        if name not in states:
            raise ModelSyntaxError(f"derivative for undeclared state {name!r}", lineno, 2)
        if any(n == name for n, _ in derivs):
            raise ModelSyntaxError(f"duplicate derivative for {name!r}", lineno, 1)
        ast = parse_expression(m.group(2), lineno)
        _check_idents(ast, known, lineno)
        _check_trig(ast, set(states), lineno)
        derivs.append((name, ast))
    missing = [s for s in states if not any(n == s for n, _ in derivs)]
    if missing:
        raise ModelSyntaxError(f"missing derivative for state(s) {missing}", 1)
    derivs.sort(key=lambda kv: states.index(kv[0]))

    admissible = _parse_bounds(sections["admissible"], param_names)
    controls = _parse_bounds(sections["controls"], param_names)
    init = _parse_bounds(sections["init"], param_names)

    unsafe: list[ExprAst] = []
    unsafe_re = re.compile(r"^unsafe\s+when\s+(.+?)\s*<\s*0$")
    for lineno, line in sections["unsafe"]:
        m = unsafe_re.match(line)
        if not m:
            raise ModelSyntaxError(f"expected 'unsafe when <expr> < 0', found {line!r}", lineno, 1)
        ast = parse_expression(m.group(1), lineno)
        if has_trig(ast):
            raise ModelSyntaxError("trig is not allowed in unsafe-set polynomials", lineno, 1)
        _check_idents(ast, set(states) | set(param_names), lineno)
        unsafe.append(ast)

    bound_names = {n for n, _, _ in controls}
    for u in inputs:
        if u not in bound_names:
            raise ModelSyntaxError(f"missing control bounds for input {u!r}", 1)

    return SystemDecl(
        states=states,
        inputs=inputs,
        params=tuple(params),
        derivs=tuple(derivs),
        admissible=tuple(admissible),
        controls=tuple(controls),
        unsafe=tuple(unsafe),
        init=tuple(init),
    )


def _parse_name_list(entries: list[tuple[int, str]]) -> tuple[str, ...]:
    names: list[str] = []
    for lineno, line in entries:
        for word in line.split():
            if not re.fullmatch(r"[A-Za-z_]\w*", word):
                raise ModelSyntaxError(f"bad identifier {word!r}", lineno, 1)
            names.append(word)
    return tuple(names)


def _parse_bounds(entries, param_names) -> list[tuple[str, ExprAst, ExprAst]]:
    out = []
    bound_re = re.compile(r"^([A-Za-z_]\w*)\s+in\s+\[(.+),(.+)\]$")
    for lineno, line in entries:
        m = bound_re.match(line)
        if not m:
            raise ModelSyntaxError(f"expected '<name> in [lo, hi]', found {line!r}", lineno, 1)
        lo = parse_expression(m.group(2), lineno)
        hi = parse_expression(m.group(3), lineno)
        for ast in (lo, hi):
            bad = free_names(ast) - set(param_names)
            if bad:
                raise ModelSyntaxError(f"bounds may reference parameters only, found {sorted(bad)}", lineno, 1)
        out.append((m.group(1), lo, hi))
    return out


def _check_idents(ast: ExprAst, known: set[str], lineno: int) -> None:
    bad = free_names(ast) - known
    if bad:
        raise ModelSyntaxError(f"undeclared identifier(s) {sorted(bad)}", lineno, 1)


def _check_trig(ast: ExprAst, states: set[str], lineno: int) -> None:
    for node in walk(ast):
        if isinstance(node, (Sin, Cos)):
            if has_trig(node.arg):
                raise ModelSyntaxError("nested sin/cos is not supported", lineno, 1)
            outside = free_names(node.arg) - states
            if outside:
                raise ModelSyntaxError(
                    f"trig arguments may reference state variables only, found {sorted(outside)}", lineno, 1
                )


# -- AST -> polynomial -----------------------------------------------------------


def ast_to_poly(node: ExprAst, params: Mapping[str, float], trig_map: Mapping[ExprAst, str] | None = None) -> Polynomial:
    """Expand an AST into a Polynomial; params fold to constants.

    trig_map sends Sin/Cos nodes to replacement variable names (used by recast);
    without it, any trig node is an error.
    """
    if isinstance(node, Const):
        return Polynomial.constant(node.value)
    if isinstance(node, Var):
        if node.name in params:
            return Polynomial.constant(params[node.name])
        return Polynomial.var(node.name)
    if isinstance(node, Add):
        out = Polynomial.zero()
        for a in node.args:
            out = out + ast_to_poly(a, params, trig_map)
        return out
    if isinstance(node, Mul):
        out = Polynomial.constant(1.0)
        for a in node.args:
            out = out * ast_to_poly(a, params, trig_map)
        return out
    if isinstance(node, Neg):
        return -ast_to_poly(node.arg, params, trig_map)
    if isinstance(node, Pow):
        return ast_to_poly(node.base, params, trig_map) ** node.exp
    if isinstance(node, (Sin, Cos)):
        if trig_map is None or node not in trig_map:
            raise RecastError("trig term survived recasting")
        return Polynomial.var(trig_map[node])
    raise TypeError(node)


# -- recasting --------------------------------------------------------------------


@dataclass(frozen=True)
class AuxPair:
    """Auxiliary sin/cos state pair for one trig argument polynomial."""

    sin_name: str
    cos_name: str
    arg: Polynomial


def recast(decl: SystemDecl) -> "DynSystem":
    """Replace sin/cos terms by auxiliary states with polynomial dynamics."""
    from .model import DynSystem, ModelError
    from .poly import IntervalBox

    params = decl.param_values()
    state_set = set(decl.states)

    # distinct trig arguments, deduplicated as polynomials over the states
    arg_polys: list[Polynomial] = []
    arg_keys: dict[str, int] = {}
    trig_nodes: list[tuple[ExprAst, int]] = []
    for _, ast in decl.derivs:
        for node in walk(ast):
            if isinstance(node, (Sin, Cos)):
                extra = free_names(node.arg) - state_set
                if extra:
                    raise RecastError(f"trig argument references non-state names {sorted(extra)}")
                p = ast_to_poly(node.arg, params)
                key = p.to_text()
                if key not in arg_keys:
                    arg_keys[key] = len(arg_polys)
                    arg_polys.append(p)
                trig_nodes.append((node, arg_keys[key]))

    if len(arg_polys) == 1:
        aux_names = [("s", "c")]
    else:
        aux_names = [(f"s{i + 1}", f"c{i + 1}") for i in range(len(arg_polys))]
    declared = state_set | set(decl.inputs) | set(params)
    for s_n, c_n in aux_names:
        if s_n in declared or c_n in declared:
            raise RecastError(f"auxiliary state name collision: {s_n!r}/{c_n!r} already declared")

    trig_map: dict[ExprAst, str] = {}
    for node, idx in trig_nodes:
        s_n, c_n = aux_names[idx]
        trig_map[node] = s_n if isinstance(node, Sin) else c_n

    derivs: dict[str, Polynomial] = {}
    for name, ast in decl.derivs:
        derivs[name] = ast_to_poly(ast, params, trig_map)

    aux: list[AuxPair] = []
    for idx, arg in enumerate(arg_polys):
        s_n, c_n = aux_names[idx]
        adot = Polynomial.zero()
        for st in arg.variables:
            dp = arg.partial(st)
            if not dp.is_zero:
                adot = adot + dp * derivs[st]
        derivs[s_n] = Polynomial.var(c_n) * adot
        derivs[c_n] = -Polynomial.var(s_n) * adot
        aux.append(AuxPair(s_n, c_n, arg))

    all_states = tuple(decl.states) + tuple(n for pair in aux_names for n in pair)

    bound_map = {n: (lo, hi) for n, lo, hi in decl.admissible}
    extra = set(bound_map) - set(all_states)
    if extra:
        raise ModelError(f"admissible bounds for unknown name(s) {sorted(extra)}")
    adm_entries = {}
    for n in all_states:
        if n in bound_map:
            lo_ast, hi_ast = bound_map[n]
            adm_entries[n] = (_const_eval(lo_ast, params, n), _const_eval(hi_ast, params, n))
        elif any(n in pair for pair in aux_names):
            adm_entries[n] = (-1.0, 1.0)
        else:
            raise ModelError(f"missing admissible bounds for state {n!r}")
        if not adm_entries[n][0] < adm_entries[n][1]:
            raise ModelError(f"admissible bounds for {n!r} need lo < hi, got {adm_entries[n]}")

    ctl_map = {n: (lo, hi) for n, lo, hi in decl.controls}
    ctl_entries = {}
    for n in decl.inputs:
        lo, hi = ctl_map[n]
        ctl_entries[n] = (_const_eval(lo, params, n), _const_eval(hi, params, n))
        if not ctl_entries[n][0] < ctl_entries[n][1]:
            raise ModelError(f"control bounds for {n!r} need lo < hi, got {ctl_entries[n]}")

    init_map = {n: (lo, hi) for n, lo, hi in decl.init}
    bad_init = set(init_map) - set(decl.states)
    if bad_init:
        raise ModelError(f"init bounds for unknown state(s) {sorted(bad_init)}")
    init_entries = {}
    for n in decl.states:
        if n in init_map:
            lo_ast, hi_ast = init_map[n]
            init_entries[n] = (_const_eval(lo_ast, params, n), _const_eval(hi_ast, params, n))
        else:
            init_entries[n] = adm_entries[n]

    unsafe = tuple(ast_to_poly(ast, params) for ast in decl.unsafe)

    for n, p in derivs.items():
        outside = set(p.variables) - set(all_states) - set(decl.inputs)
        if outside:
            raise RecastError(f"derivative of {n!r} references {sorted(outside)} after recast")

    return DynSystem(
        name="model",
        states=all_states,
        inputs=tuple(decl.inputs),
        derivs={n: derivs[n] for n in all_states},
        admissible=IntervalBox.of({n: adm_entries[n] for n in all_states}),
        control=IntervalBox.of(ctl_entries) if decl.inputs else IntervalBox((), (), ()),
        unsafe=unsafe,
        init=IntervalBox.of(init_entries),
        eta=params.get("eta", DEFAULT_ETA),
        params=params,
        aux=tuple(aux),
    )


# -- printing a declaration --------------------------------------------------------


def print_system(decl: SystemDecl) -> str:
    """Render a SystemDecl as model-file text; parse_system round-trips it."""
    out: list[str] = []
    out.append("states " + " ".join(decl.states))
    if decl.inputs:
        out.append("inputs " + " ".join(decl.inputs))
    if decl.params:
        out.append("params")
        for n, ast in decl.params:
            out.append(f"  {n} = {ast_to_text(ast)}")
    out.append("dynamics")
    for n, ast in decl.derivs:
        out.append(f"  d{n}/dt = {ast_to_text(ast)}")
    if decl.admissible:
        out.append("admissible")
        for n, lo, hi in decl.admissible:
            out.append(f"  {n} in [{ast_to_text(lo)}, {ast_to_text(hi)}]")
    if decl.controls:
        out.append("controls")
        for n, lo, hi in decl.controls:
            out.append(f"  {n} in [{ast_to_text(lo)}, {ast_to_text(hi)}]")
    if decl.unsafe:
        out.append("unsafe")
        for ast in decl.unsafe:
            out.append(f"  unsafe when {ast_to_text(ast)} < 0")
    if decl.init:
        out.append("init")
        for n, lo, hi in decl.init:
            out.append(f"  {n} in [{ast_to_text(lo)}, {ast_to_text(hi)}]")
    return "\n".join(out) + "\n"
