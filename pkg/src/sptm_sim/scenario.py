"""Line-oriented scenario scripts and the step interpreter.

One step per line: ``verb key=value ...``. ``#`` starts a comment. Every step
may carry ``expect=<status>``; the default expectation is ``ok``.
"""
from dataclasses import dataclass, field
from pathlib import Path

from .core_model import Domain, TableId, XnuEndpoint, pte_for_index
from .dispatcher import DispatchRegistration, Gl, target
from .errors import ModelError, ParseError, all_statuses
from .exclave_resources import CtlOp
from .frame_table import parse_type, sprr_index_for_type, NONE
from .secure_kernel import gl0_request
from .tightbeam import TbBuffer, TbMessage
from .txm import TxmCall
from .world import LAUNCHD_TASK, World


@dataclass
class Step:
    lineno: int
    verb: str
    args: dict
    expect: str = "ok"


@dataclass
class Scenario:
    name: str
    steps: list = field(default_factory=list)
    fixtures: str = None


@dataclass
class StepResult:
    step: Step
    outcome: str
    value: object = None

    @property
    def matched(self):
        return self.outcome == self.step.expect


# verb -> (required keys, optional keys, key defining a handle, keys referencing handles)
VERBS = {
    "boot": ((), ("hibernation", "exclaves"), None, ()),
    "register": (("caller", "table", "marker", "perms"), (), None, ()),
    "step": (("event",), ("domain", "table", "endpoint"), None, ()),
    "genter": (("domain", "table", "endpoint"), ("caller", "args"), None, ()),
    "svc": (("table", "endpoint"), ("imm", "component", "level", "args"), None, ()),
    "hvc": (("table", "endpoint"), ("args",), None, ()),
    "retype": (("frame", "to"), ("from", "caller"), None, ()),
    "map_page": (("ttep", "frame"), ("va", "pte", "caller"), None, ()),
    "txm_call": (("selector",), ("inputs",), None, ()),
    "sk_service": (("kind", "frame"), (), None, ()),
    "task": (("id",), ("ents", "launchd"), "id", ()),
    "conclave_attach": (("task", "conclave"), ("caller",), None, ("task", "caller")),
    "conclave": (("name", "request"), (), None, ()),
    "trap": (("task", "op"), ("resource", "identifier", "name", "size"), None, ("task",)),
    "tb_query": (("task", "service"), ("payload", "selector", "reply"), None, ("task",)),
    "tb_endpoint": (("name", "type", "id"), ("options",), "name", ()),
    "tb_connect": (("name", "endpoint"), (), "name", ("endpoint",)),
    "tb_activate": (("conn",), (), None, ("conn",)),
    "tb_message": (("name", "conn", "size"), ("option", "selector", "wrapping"), "name", ("conn",)),
    "tb_encode": (("msg", "data"), (), None, ("msg",)),
    "tb_complete": (("msg",), (), None, ("msg",)),
    "tb_send": (("conn", "msg"), ("reply",), None, ("conn", "msg")),
}

# the kernel and launchd exist before any step runs
PREDEFINED = {"0", str(LAUNCHD_TASK)}


def parse_line(line, lineno):
    text = line.split("#", 1)[0].strip()
    if not text:
        return None
    verb, *pairs = text.split()
    if verb not in VERBS:
        raise ParseError(f"line {lineno}: unknown verb {verb!r}")
    args = {}
    for p in pairs:
        key, sep, value = p.partition("=")
        if not sep or not key:
            raise ParseError(f"line {lineno}: expected key=value, got {p!r}")
        if key in args:
            raise ParseError(f"line {lineno}: duplicate key {key!r}")
        args[key] = value
    expect = args.pop("expect", "ok")
    if expect not in all_statuses():
        raise ParseError(f"line {lineno}: unknown status {expect!r}")
    required, optional, _, _ = VERBS[verb]
    missing = [k for k in required if k not in args]
    extra = [k for k in args if k not in required and k not in optional]
    if missing or extra:
        raise ParseError(f"line {lineno}: {verb} missing {missing} / unexpected {extra}")
    return Step(lineno, verb, args, expect)


def parse_scenario(text, name="scenario"):
    sc = Scenario(name)
    handles = set(PREDEFINED)
    for lineno, line in enumerate(text.splitlines(), 1):
        step = parse_line(line, lineno)
        if step is None:
            continue
        _, _, defines, refs = VERBS[step.verb]
        for k in refs:
            if k in step.args and step.args[k] not in handles:
                raise ParseError(f"line {lineno}: {k}={step.args[k]} is not defined by an earlier step")
        if defines:
            handles.add(step.args[defines])
        sc.steps.append(step)
    return sc


def load_scenario(path):
    path = Path(path)
    return parse_scenario(path.read_text(encoding="utf-8"), path.stem)


# -- argument conversion --

def _int(v):
    try:
        return int(v, 0)
    except ValueError:
        raise ParseError(f"not an integer: {v!r}") from None


def _ints(v):
    return [_int(x) for x in v.split(",") if x] if v else []


def _domain(v):
    try:
        return Domain[v] if not v[0].isdigit() else Domain(_int(v))
    except (KeyError, ValueError):
        raise ParseError(f"unknown domain {v!r}") from None


def _table(v):
    if v[0].isdigit():
        return _int(v)
    try:
        return TableId[v]
    except KeyError:
        raise ParseError(f"unknown table {v!r}") from None


def _endpoint(v):
    if v[0].isdigit():
        return _int(v)
    try:
        return XnuEndpoint[v]
    except KeyError:
        raise ParseError(f"unknown endpoint {v!r}") from None


def _ftype(v):
    try:
        return parse_type(v)
    except ModelError:
        raise ParseError(f"unknown frame type {v!r}") from None


def _bool(v):
    if v not in ("0", "1"):
        raise ParseError(f"expected 0 or 1, got {v!r}")
    return v == "1"


def _bytes(v):
    try:
        return bytes.fromhex(v)
    except ValueError:
        raise ParseError(f"not hex bytes: {v!r}") from None


class Runner:
    def __init__(self, world):
        self.world = world
        self.handles = {}

    def run(self, scenario):
        results = []
        for step in scenario.steps:
            try:
                value = getattr(self, "_" + step.verb)(**step.args)
                outcome = "ok"
            except ParseError:
                raise
            except ModelError as e:
                value, outcome = None, e.status
            res = StepResult(step, outcome, value)
            self.world.trace.emit("harness", step.verb, outcome, line=str(step.lineno), expect=step.expect,
                                  match=res.matched)
            results.append(res)
        return results

    def _call(self, gate_outcome, args):
        d, m = self.world.sptm.dispatcher, self.world.monitor
        return d.deliver(m, gate_outcome, *_ints(args))

    # -- monitor layer --

    def _boot(self, hibernation="0", exclaves="1"):
        self.world.config.hibernation = _bool(hibernation)
        self.world.boot(exclaves=_bool(exclaves))

    def _register(self, caller, table, marker, perms):
        reg = DispatchRegistration(_table(table), marker, _int(perms))
        return self.world.sptm.dispatcher.register_dispatch_table(reg, _domain(caller))

    def _step(self, event, domain="SPTM", table="0", endpoint="0"):
        t = target(_domain(domain), _table(table), _endpoint(endpoint))
        return self.world.sptm.dispatcher.step_state(self.world.monitor, _int(event), t)

    def _genter(self, domain, table, endpoint, caller="XNU", args=""):
        t = target(_domain(domain), _table(table), _endpoint(endpoint))
        out = self.world.sptm.dispatcher.genter(_domain(caller), t, self.world.monitor)
        return self._call(out, args)

    def _svc(self, table, endpoint, imm="0", component="TXM", level="0", args=""):
        t = target(Domain.SPTM, _table(table), _endpoint(endpoint))
        out = self.world.sptm.dispatcher.svc_call(Gl(_int(level)), _int(imm), t, self.world.monitor,
                                                  _domain(component))
        return self._call(out, args)

    def _hvc(self, table, endpoint, args=""):
        t = target(Domain.SPTM, _table(table), _endpoint(endpoint))
        return self._call(self.world.sptm.dispatcher.hvc_call(t, self.world.monitor), args)

    def _retype(self, frame, to, caller="XNU", **kw):
        w, f = self.world, _int(frame)
        new = _ftype(to)
        prev = _ftype(kw["from"]) if "from" in kw else w.sptm.frames.frame_type_of(f)
        caller = _domain(caller)
        if caller == Domain.XNU:
            t = target(Domain.SPTM, TableId.XNU_BOOTSTRAP, XnuEndpoint.RETYPE)
            out = w.sptm.dispatcher.genter(Domain.XNU, t, w.monitor)
            return w.sptm.dispatcher.deliver(w.monitor, out, f, prev, new)
        return w.sptm.frames.retype(caller, f, prev, new)

    def _map_page(self, ttep, frame, va="0", pte="auto", caller="XNU"):
        w, f = self.world, _int(frame)
        if pte == "auto":
            idx = sprr_index_for_type(w.sptm.frames.frame_type_of(f))
            bits = pte_for_index(0 if idx == NONE else idx)
        else:
            bits = pte_for_index(_int(pte))
        caller = _domain(caller)
        args = (_int(ttep), _int(va), f, bits)
        if caller == Domain.XNU:
            t = target(Domain.SPTM, TableId.XNU_BOOTSTRAP, XnuEndpoint.MAP_PAGE)
            out = w.sptm.dispatcher.genter(Domain.XNU, t, w.monitor)
            return w.sptm.dispatcher.deliver(w.monitor, out, *args)
        return w.sptm.mapper.map_page(w.sptm.page_table(args[0]), w.sptm.frames, *args, caller=caller)

    def _txm_call(self, selector, inputs=""):
        sel = _int(selector) if selector[0].isdigit() else selector
        return self.world.txm.txm_kernel_call(TxmCall(sel, _ints(inputs)))

    def _sk_service(self, kind, frame):
        sk = self.world.sk
        req = gl0_request(kind, _int(frame))
        return sk.enter_from_xnu(lambda: sk.sk_svc0(req))

    # -- exclaves layer --

    def _task(self, id, ents="", launchd="0"):
        return self.world.task(_int(id), [e for e in ents.split(",") if e], _bool(launchd))

    def _conclave_attach(self, task, conclave, caller=str(LAUNCHD_TASK)):
        w = self.world
        mgr = w.exclaves.conclave_manager(conclave)
        return w.exclaves.conclave_attach(w.tasks[_int(task)], w.tasks[_int(caller)], mgr)

    def _conclave(self, name, request):
        if request not in ("launch", "suspend", "resume", "stop"):
            raise ParseError(f"unknown conclave request {request!r}")
        ex = self.world.exclaves
        return ex.conclave_transition(ex.conclave_manager(name), request)

    def _trap(self, task, op, resource=None, identifier="0", name="0", size=None):
        try:
            op = CtlOp[op]
        except KeyError:
            raise ParseError(f"unknown trap op {op!r}") from None
        ex, t = self.world.exclaves, self.world.tasks[_int(task)]
        if op == CtlOp.ENDPOINT_CALL:
            n = ex.proxy.buffer_size if size is None else _int(size)
            return ex.exclaves_ctl_trap(t, op, _int(identifier), _int(name), bytes(n), n)
        return ex.exclaves_ctl_trap(t, op, resource_name=resource)

    def _tb_query(self, task, service, payload="00", selector="0", reply="1"):
        w = self.world
        return w.exclaves.tightbeam_query(w.tasks[_int(task)], service, _bytes(payload),
                                          _int(selector), _bool(reply))

    def _tb_endpoint(self, name, type, id, options="0"):
        self.handles[name] = self.world.tb.endpoint_create(_int(type), _int(id), _int(options))

    def _tb_connect(self, name, endpoint):
        self.handles[name] = self.world.tb.connection_create_with_endpoint(self.handles[endpoint])

    def _tb_activate(self, conn):
        self.world.tb.connection_activate(self.handles[conn])

    def _tb_message(self, name, conn, size, option="0", selector="0", wrapping="0"):
        msg = self.handles[name] = TbMessage()
        buf = TbBuffer(type_word=_int(selector), wrapping=_int(wrapping))
        return self.world.tb.message_construct(self.handles[conn], msg, buf, _int(size), _int(option))

    def _tb_encode(self, msg, data):
        return self.world.tb.message_encode(self.handles[msg], _bytes(data))

    def _tb_complete(self, msg):
        return self.world.tb.message_complete(self.handles[msg])

    def _tb_send(self, conn, msg, reply="1"):
        return self.world.tb.connection_send_query(self.handles[conn], self.handles[msg], _bool(reply))


def run_scenario(scenario, config=None):
    """Run on a fresh world; returns (world, results)."""
    world = World(config)
    return world, Runner(world).run(scenario)
