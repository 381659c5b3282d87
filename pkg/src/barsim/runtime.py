"""Simplex execution loop: integrator, controllers, switching logic, transport.

One run is strictly sequential.  The decision module consults the forward
switching condition while the advanced controller is in charge and the
reverse condition while the baseline controller is in charge; the chosen
action is held constant for the full control period (zero-order hold) and
safety is checked at every integrator substep.
"""
from __future__ import annotations

import json
import math
import socket
import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .model import DynSystem
from .poly import Polynomial
from .switchgen import ALL, SwitchingArtifact

NC = "NC"
BC = "BC"

CSV_FLOAT = repr


class RuntimeError_(RuntimeError):
    pass


class NumericalBlowup(RuntimeError_):
    pass


class ExternalTimeout(RuntimeError_):
    pass


class ConnectionLost(RuntimeError_):
    pass


# -- controllers ---------------------------------------------------------------


@dataclass(frozen=True)
class ControllerRef:
    """Declarative controller selection; materialized per run via make()."""

    kind: str  # baseline-droop | constant-action | affine-policy | external-socket
    params: dict = field(default_factory=dict)

    @staticmethod
    def baseline() -> "ControllerRef":
        return ControllerRef("baseline-droop")

    @staticmethod
    def constant(values: Sequence[float]) -> "ControllerRef":
        return ControllerRef("constant-action", {"values": tuple(float(v) for v in values)})

    @staticmethod
    def affine(gain: Sequence[Sequence[float]], offset: Sequence[float]) -> "ControllerRef":
        return ControllerRef(
            "affine-policy",
            {"gain": tuple(tuple(float(g) for g in row) for row in gain),
             "offset": tuple(float(b) for b in offset)},
        )

    @staticmethod
    def external(channel, deadline: Optional[float] = None, fallback_to_bc: bool = False) -> "ControllerRef":
        return ControllerRef(
            "external-socket", {"channel": channel, "deadline": deadline, "fallback_to_bc": fallback_to_bc}
        )

    def make(self, sys: DynSystem):
        if self.kind == "baseline-droop":
            return BaselineController(sys)
        if self.kind == "constant-action":
            return ConstantController(self.params["values"])
        if self.kind == "affine-policy":
            return AffineController(self.params["gain"], self.params["offset"])
        if self.kind == "external-socket":
            return ExternalController(
                self.params["channel"],
                deadline=self.params.get("deadline") or 0.9 * sys.eta,
            )
        raise RuntimeError_(f"unknown controller kind {self.kind!r}")


class BaselineController:
    def __init__(self, sys: DynSystem):
        self._fn = sys.baseline_fn()
        self.polys = sys.baseline

    def propose(self, t: float, x: tuple) -> tuple:
        return self._fn(*x)


class ConstantController:
    def __init__(self, values: tuple):
        self.values = tuple(values)
        self.polys = tuple(Polynomial.constant(v) for v in values)

    def propose(self, t: float, x: tuple) -> tuple:
        return self.values


class AffineController:
    """u = offset + gain @ x."""

    def __init__(self, gain, offset):
        self.gain = tuple(tuple(row) for row in gain)
        self.offset = tuple(offset)
        self.polys = None

    def propose(self, t: float, x: tuple) -> tuple:
        return tuple(b + sum(g * xi for g, xi in zip(row, x)) for row, b in zip(self.gain, self.offset))

    def as_polys(self, states: Sequence[str]) -> tuple:
        out = []
        for row, b in zip(self.gain, self.offset):
            p = Polynomial.constant(b)
            for g, s in zip(row, states):
                p = p + g * Polynomial.var(s)
            out.append(p)
        return tuple(out)


class ExternalController:
    """One request/response per control period over a line channel."""

    def __init__(self, channel: "LineChannel", deadline: float):
        self.channel = channel
        self.deadline = deadline

    def propose(self, t: float, x: tuple) -> tuple:
        u = external_query(self.channel, t, x, self.deadline)
        if u is TIMEOUT:
            raise ExternalTimeout(f"external controller missed the {self.deadline * 1e3:.1f} ms deadline")
        return tuple(u)


# -- switching-condition evaluation ---------------------------------------------


class FscResult(NamedTuple):
    fsc: bool
    alpha: bool
    beta: bool
    hhat: float
    lam: float


class RscResult(NamedTuple):
    rsc: bool
    margin_ok: bool  # h(x) >= m*eta*|hdot(x)|
    box_ok: bool  # x strictly inside A_{r,m}


def fsc_eval(art: SwitchingArtifact, x: Sequence[float], u: Sequence[float]) -> FscResult:
    """Forward switching condition: alpha (Taylor prediction) OR beta (box exit)."""
    hhat = art.hhat_fn()(*x, *u)
    lam = art.lambda_for_fsc(u)
    alpha = hhat - lam <= 0.0
    region = art.region_for_fsc(u)
    beta = region is None or not region.contains(x, strict=True)
    return FscResult(alpha or beta, alpha, beta, hhat, lam)


def rsc_eval(art: SwitchingArtifact, x: Sequence[float], u_baseline: Sequence[float]) -> RscResult:
    """Reverse switching condition with hdot taken under the baseline action."""
    h = art.h_fn()(*x)
    hdot = art.hdot_fn()(*x, *u_baseline)
    margin_ok = h >= art.m * art.eta * abs(hdot)
    region = art.rsc_region()
    box_ok = region is not None and region.contains(x, strict=True)
    return RscResult(margin_ok and box_ok, margin_ok, box_ok)


def dm_step(
    art: SwitchingArtifact,
    x: Sequence[float],
    u_proposed: Sequence[float],
    c: str,
    u_baseline: Sequence[float],
) -> tuple[str, Optional[FscResult], Optional[RscResult]]:
    """Decision-module switching logic; a pure function of its inputs.

    Returns BC when the advanced controller is in charge and the FSC fires,
    NC when the baseline is in charge and the RSC fires, and c otherwise.
    """
    if c == NC:
        res = fsc_eval(art, x, u_proposed)
        return (BC if res.fsc else NC), res, None
    if c == BC:
        res = rsc_eval(art, x, u_baseline)
        return (NC if res.rsc else BC), None, res
    raise RuntimeError_(f"controller name must be NC or BC, got {c!r}")


# -- integration ------------------------------------------------------------------


def integrate_period(sys: DynSystem, x: Sequence[float], u: Sequence[float], eta: Optional[float] = None,
                     substeps: int = 8) -> tuple:
    """Classical 4th-order one-step method applied substeps times, u held constant."""
    if substeps < 1:
        raise RuntimeError_("substeps must be at least 1")
    fn = sys.field_fn()
    h = (eta if eta is not None else sys.eta) / substeps
    xt = tuple(float(v) for v in x)
    for _ in range(substeps):
        xt = _rk4_substep(fn, xt, u, h)
    if not all(math.isfinite(v) for v in xt):
        raise NumericalBlowup(f"state became non-finite: {xt}")
    return xt


def _rk4_substep(fn, x: tuple, u: tuple, h: float) -> tuple:
    k1 = fn(*x, *u)
    k2 = fn(*[xi + 0.5 * h * ki for xi, ki in zip(x, k1)], *u)
    k3 = fn(*[xi + 0.5 * h * ki for xi, ki in zip(x, k2)], *u)
    k4 = fn(*[xi + h * ki for xi, ki in zip(x, k3)], *u)
    return tuple(
        xi + (h / 6.0) * (a + 2.0 * b + 2.0 * c + d) for xi, a, b, c, d in zip(x, k1, k2, k3, k4)
    )


# -- run records --------------------------------------------------------------------


@dataclass
class RunRecord:
    states: tuple[str, ...]
    inputs: tuple[str, ...]
    eta: float
    shield: bool
    rows: list = field(default_factory=list)
    events: list = field(default_factory=list)  # (t, kind, detail)
    violated: bool = False
    violation_time: Optional[float] = None
    final_state: Optional[tuple] = None
    aborted: Optional[str] = None

    def add_event(self, t: float, kind: str, detail: str = "") -> None:
        self.events.append((t, kind, detail))

    def switch_times(self, kind: str) -> list[float]:
        return [t for t, k, _ in self.events if k == kind]

    def column(self, name: str) -> np.ndarray:
        i = 1 + self.states.index(name)
        return np.array([row[i] for row in self.rows])

    def controller_flags(self) -> list[str]:
        i = 1 + len(self.states) + len(self.inputs)
        return [row[i] for row in self.rows]

    def to_csv(self) -> str:
        header = (
            ["t"]
            + list(self.states)
            + list(self.inputs)
            + ["controller", "h", "alpha", "beta", "fsc", "rsc", "event"]
        )
        out = [",".join(header)]
        for row in self.rows:
            t = row[0]
            xs = row[1 : 1 + len(self.states)]
            us = row[1 + len(self.states) : 1 + len(self.states) + len(self.inputs)]
            controller, h, alpha, beta, fsc, rsc, event = row[1 + len(self.states) + len(self.inputs) :]
            cells = [CSV_FLOAT(t)]
            cells += [CSV_FLOAT(v) for v in xs]
            cells += [CSV_FLOAT(v) for v in us]
            cells.append(controller)
            cells.append(CSV_FLOAT(h) if h is not None else "")
            for flag in (alpha, beta, fsc, rsc):
                cells.append("" if flag is None else str(int(flag)))
            cells.append(event)
            out.append(",".join(cells))
        return "\n".join(out) + "\n"


# -- the loop ------------------------------------------------------------------------


def simulate_run(
    sys: DynSystem,
    art: Optional[SwitchingArtifact],
    ac: ControllerRef | object,
    bc: ControllerRef | object = None,
    x0: Sequence[float] = None,
    horizon: float = 10.0,
    shield: bool = True,
    substeps: int = 8,
    record_rows: bool = True,
) -> RunRecord:
    """Run the Simplex loop (shield on) or the bare advanced controller (shield off).

    With the shield on, the run must start recoverable (h(x0) > 0) and ends at
    the horizon; a violation is recorded but should be impossible.  With the
    shield off the run ends at the first violation.
    """
    if shield and art is None:
        raise RuntimeError_("shielded runs need a switching artifact")
    ac_ctrl = ac.make(sys) if isinstance(ac, ControllerRef) else ac
    if bc is None and sys.baseline is not None:
        bc = ControllerRef.baseline()
    bc_ctrl = bc.make(sys) if isinstance(bc, ControllerRef) else bc
    if shield and bc_ctrl is None:
        raise RuntimeError_("shielded runs need a baseline controller")

    x = tuple(float(v) for v in x0)
    h_fn = art.h_fn() if art is not None else None
    if shield:
        h0 = h_fn(*x)
        if not h0 > 0.0:
            raise RuntimeError_(
                f"initial state is not recoverable: h(x0) = {h0:.6g} must be positive for a shielded run"
            )

    rec = RunRecord(states=sys.states, inputs=sys.inputs, eta=sys.eta, shield=shield)
    fn = sys.field_fn()
    g_fns = sys.unsafe_fns()
    lo_u = np.array(sys.control.lo)
    hi_u = np.array(sys.control.hi)
    periods = int(round(horizon / sys.eta))
    h_sub = sys.eta / substeps
    c = NC  # the advanced controller starts in charge

    for k in range(periods):
        t = k * sys.eta
        events: list[str] = []
        timed_out = False
        try:
            u_ac = ac_ctrl.propose(t, x)
        except ExternalTimeout:
            timed_out = True
            u_ac = None
        except ConnectionLost:
            rec.aborted = "connection lost"
            rec.add_event(t, "disconnect")
            break

        if u_ac is not None:
            u_ac_cl = tuple(float(min(max(v, lo), hi)) for v, lo, hi in zip(u_ac, lo_u, hi_u))
            if u_ac_cl != tuple(map(float, u_ac)):
                events.append("clamp_ac")
                rec.add_event(t, "clamp_ac", f"{tuple(u_ac)} -> {u_ac_cl}")
            u_ac = u_ac_cl

        u_bc = None
        if bc_ctrl is not None:
            u_bc = tuple(
                float(min(max(v, lo), hi)) for v, lo, hi in zip(bc_ctrl.propose(t, x), lo_u, hi_u)
            )

        fsc_res = rsc_res = None
        if shield:
            if timed_out:
                # a late action is treated like a firing FSC: conservative
                events.append("timeout")
                rec.add_event(t, "timeout")
                if c == NC:
                    c = BC
                    events.append("forward_switch")
                    rec.add_event(t, "forward_switch", "timeout fallback")
            else:
                c_new, fsc_res, rsc_res = dm_step(art, x, u_ac, c, u_bc)
                if c_new != c:
                    kind = "forward_switch" if c_new == BC else "reverse_switch"
                    events.append(kind)
                    rec.add_event(t, kind)
                c = c_new
            u = u_bc if c == BC else u_ac
        else:
            if timed_out:
                events.append("timeout")
                rec.add_event(t, "timeout")
                u = u_bc if u_bc is not None else tuple(0.0 for _ in sys.inputs)
            else:
                u = u_ac
            c = NC

        if record_rows:
            rec.rows.append(
                (t, *x, *u, c,
                 h_fn(*x) if h_fn is not None else None,
                 fsc_res.alpha if fsc_res else None,
                 fsc_res.beta if fsc_res else None,
                 fsc_res.fsc if fsc_res else None,
                 rsc_res.rsc if rsc_res else None,
                 "|".join(events))
            )

        # integrate the period, checking safety at every substep
        violated_at = None
        for j in range(substeps):
            x = _rk4_substep(fn, x, u, h_sub)
            if not all(math.isfinite(v) for v in x):
                raise NumericalBlowup(f"state became non-finite at t={t + (j + 1) * h_sub:.6g}")
            if g_fns and min(gf(*x) for gf in g_fns) < 0.0:
                violated_at = t + (j + 1) * h_sub
                break
        if violated_at is not None:
            rec.violated = True
            rec.violation_time = violated_at
            rec.add_event(violated_at, "violation")
            if record_rows:
                rec.rows.append(
                    (violated_at, *x, *u, c,
                     h_fn(*x) if h_fn is not None else None,
                     None, None, None, None, "violation")
                )
            break

    rec.final_state = x
    return rec


# -- external-controller transport ----------------------------------------------------


class _Timeout:
    def __repr__(self):
        return "TIMEOUT"


TIMEOUT = _Timeout()


class LineChannel:
    """Newline-delimited JSON over a socket, with deadline-aware reads.

    Partial lines survive a timeout (the buffer persists), so framing stays
    intact; responses are paired to requests in FIFO order with a stale-skip
    counter after timeouts.
    """

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.buf = bytearray()
        self.stale = 0

    def send_json(self, obj: dict) -> None:
        try:
            self.sock.sendall(json.dumps(obj).encode() + b"\n")
        except OSError as e:
            raise ConnectionLost(str(e)) from e

    def recv_json(self, deadline: Optional[float] = None):
        """One decoded message, or TIMEOUT when the deadline passes first."""
        end = None if deadline is None else time.monotonic() + deadline
        while True:
            nl = self.buf.find(b"\n")
            if nl >= 0:
                line = bytes(self.buf[:nl])
                del self.buf[: nl + 1]
                if not line.strip():
                    continue
                try:
                    return json.loads(line)
                except json.JSONDecodeError as e:
                    raise ConnectionLost(f"malformed message: {line[:80]!r}") from e
            if end is not None:
                remaining = end - time.monotonic()
                if remaining <= 0:
                    return TIMEOUT
                self.sock.settimeout(remaining)
            else:
                self.sock.settimeout(None)
            try:
                chunk = self.sock.recv(65536)
            except socket.timeout:
                return TIMEOUT
            except OSError as e:
                raise ConnectionLost(str(e)) from e
            if not chunk:
                raise ConnectionLost("peer closed the connection")
            self.buf.extend(chunk)

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


def external_query(channel: LineChannel, t: float, x: Sequence[float], deadline: float):
    """Send the plant state, await the action message; TIMEOUT after deadline."""
    channel.send_json({"type": "state", "t": t, "x": [float(v) for v in x]})
    end = time.monotonic() + deadline
    while True:
        remaining = end - time.monotonic()
        msg = channel.recv_json(max(0.0, remaining))
        if msg is TIMEOUT:
            channel.stale += 1
            return TIMEOUT
        if not isinstance(msg, dict) or msg.get("type") != "action":
            raise ConnectionLost(f"expected an action message, got {msg!r}")
        if channel.stale > 0:
            channel.stale -= 1  # stale answer to a timed-out request
            continue
        u = msg.get("u")
        if not isinstance(u, list) or not all(isinstance(v, (int, float)) and math.isfinite(v) for v in u):
            raise ConnectionLost(f"malformed action payload {u!r}")
        return [float(v) for v in u]


def handshake_server(channel: LineChannel, sys: DynSystem, timeout: float = 30.0) -> None:
    channel.send_json(
        {"type": "hello", "states": list(sys.states), "inputs": list(sys.inputs), "eta": sys.eta}
    )
    msg = channel.recv_json(timeout)
    if msg is TIMEOUT or not isinstance(msg, dict) or msg.get("type") != "ready":
        raise ConnectionLost(f"handshake failed: expected ready, got {msg!r}")


def serve(
    sys: DynSystem,
    art: SwitchingArtifact,
    host: str = "127.0.0.1",
    port: int = 0,
    x0: Optional[Sequence[float]] = None,
    horizon: float = 10.0,
    shield: bool = True,
    substeps: int = 8,
    deadline: Optional[float] = None,
    on_listen: Optional[Callable[[int], None]] = None,
) -> RunRecord:
    """Accept one external advanced controller and run the loop against it."""
    if x0 is None:
        rng = np.random.default_rng(0)
        x0 = sys.sample_initial(rng, 1)[0]
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        srv.bind((host, port))
        srv.listen(1)
        if on_listen is not None:
            on_listen(srv.getsockname()[1])
        conn, _ = srv.accept()
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        channel = LineChannel(conn)
        try:
            handshake_server(channel, sys)
            ac = ControllerRef.external(channel, deadline=deadline)
            return simulate_run(
                sys, art, ac, ControllerRef.baseline(), x0=x0, horizon=horizon,
                shield=shield, substeps=substeps,
            )
        finally:
            channel.close()
    finally:
        srv.close()
