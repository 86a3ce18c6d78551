"""Secure Kernel (GL1): registration, XNU entry, GL0 services and shared-memory retypes."""
from dataclasses import dataclass, field

from . import tables
from .core_model import Domain, TableId
from .dispatcher import Event, target
from .errors import DuplicateRegistration, InvalidEndpoint, ModelError
from .frame_table import FrameType, parse_type
from .sptm import SK_REGISTER, SK_RETYPE

FROM_XNU = "sk_dispatch_function_0"
FROM_SPTM = "sk_dispatch_function_1"

EXCLAVES_ENTER = 0
EXCLAVES_BOOTINFO = 1

GL0_SLOTS = 64                  # selector is 6 bits wide; no bound was recovered
POINTER_MASK = 0x0000_0000_FFFF_FFC0
SELECTOR_SHIFT = 58

RUNNING_STATES = (0x1, 0x10)    # states in which SK holds the CPU


@dataclass(frozen=True)
class SkOutcome:
    kind: str                   # RETURN_TO_CALLER, ENTER_GL0, CONTEXT_RESTORE, UNKNOWN_SERVICE, SERVICE_DONE
    detail: object = None


@dataclass(frozen=True)
class SkDispatchFunction:
    function_id: int
    permitted_caller: Domain


SK_FUNCTIONS = (SkDispatchFunction(0, Domain.XNU), SkDispatchFunction(1, Domain.SPTM))


@dataclass(frozen=True)
class Gl0ServiceRequest:
    raw_pointer: int
    word: int = 0               # value stored at the aligned pointer
    args: tuple = (0, 0)

    @property
    def aligned_pointer(self):
        return self.raw_pointer & POINTER_MASK

    @property
    def selector(self):
        return self.word >> SELECTOR_SHIFT & 0x3F


@dataclass(frozen=True)
class RetypeService:
    kind: str
    current: object             # FrameType, or None when read from the frame
    new: FrameType
    invocation: str


def load_retype_services():
    out = {}
    for r in tables.load("sk_retype_services"):
        cur = None if r["current"] == "-" else parse_type(r["current"])
        out[r["kind"]] = RetypeService(r["kind"], cur, parse_type(r["new"]), r["invocation"])
    return out

RETYPE_SERVICES = load_retype_services()


class SecureKernel:
    def __init__(self, sptm, gl0_slots=GL0_SLOTS):
        self.sptm = sptm
        self.trace = sptm.trace
        self.bootinfo = {"version": 1}
        # the retype family fills the first slots in table order
        self.gl0_table = [None] * gl0_slots
        for i, kind in enumerate(RETYPE_SERVICES):
            self.gl0_table[i] = kind
        self.gl0_work = None
        d = sptm.dispatcher
        d.bind(FROM_XNU, lambda outcome, *a: self._dispatch(0, outcome, *a))
        d.bind(FROM_SPTM, lambda outcome, *a: self._dispatch(1, outcome, *a))

    # -- boot --

    def _hvc(self, table, endpoint, *args):
        d, m = self.sptm.dispatcher, self.sptm.monitor
        out = d.hvc_call(target(Domain.SPTM, table, endpoint), m)
        return d.deliver(m, out, *args)

    def boot(self):
        d, m = self.sptm.dispatcher, self.sptm.monitor
        if (Domain.SK, 0) in d.special:
            raise DuplicateRegistration("SK dispatch functions already registered")
        d.step_state(m, Event.SK_BOOT)
        for fn in SK_FUNCTIONS:
            marker = FROM_XNU if fn.function_id == 0 else FROM_SPTM
            self._hvc(TableId.SK_BOOTSTRAP, SK_REGISTER, fn.function_id, marker, 1 << fn.permitted_caller)
        d.step_state(m, Event.RETURN)
        return {"registrations": [(Domain.SK, 0), (Domain.SK, 1)]}

    # -- calls from XNU --

    def sk_dispatch(self, function_id, endpoint):
        if endpoint == EXCLAVES_BOOTINFO:
            return SkOutcome("RETURN_TO_CALLER", dict(self.bootinfo))
        if endpoint == EXCLAVES_ENTER:
            return SkOutcome("ENTER_GL0", "xnuproxy")
        raise InvalidEndpoint(f"SK endpoint {endpoint} is neither 0 nor 1")

    def _dispatch(self, function_id, outcome, *args):
        res = self.sk_dispatch(function_id, outcome.target.endpoint)
        self.trace.emit("SK", "sk_dispatch", res.kind, function=function_id, endpoint=outcome.target.endpoint)
        if res.kind != "ENTER_GL0":
            return res
        work = self.gl0_work
        self.trace.emit("SK", "eret_gl0", component=res.detail)
        try:
            value = work() if work else None
        finally:
            self.trace.emit("SK", "gl0_return", component=res.detail)
        return SkOutcome("ENTER_GL0", value)

    def enter_from_xnu(self, work=None, endpoint=EXCLAVES_ENTER):
        """XNU's sk_enter: GENTER into SK, run ``work`` at GL0, return to XNU."""
        d, m = self.sptm.dispatcher, self.sptm.monitor
        out = d.genter(Domain.XNU, target(Domain.SK, 0, endpoint), m)
        prev, self.gl0_work = self.gl0_work, work
        try:
            res = d.deliver(m, out)
        finally:
            self.gl0_work = prev
        return res.detail

    # -- GL0 services --

    def retype(self, frame, previous_type, new_type):
        if self.sptm.monitor.current_state in RUNNING_STATES:
            return self._hvc(TableId.SK_BOOTSTRAP, SK_RETYPE, frame, previous_type, new_type)
        # outside an SK context the call is made directly with SK as caller
        return self.sptm.frames.retype(Domain.SK, frame, previous_type, new_type)

    def sk_svc0(self, request):
        if request.aligned_pointer == 0:
            self.trace.emit("SK", "svc0", "CONTEXT_RESTORE", raw=request.raw_pointer)
            return SkOutcome("CONTEXT_RESTORE")
        sel = request.selector
        kind = self.gl0_table[sel] if sel < len(self.gl0_table) else None
        if kind is None:
            self.trace.emit("SK", "svc0", "UNKNOWN_SERVICE", selector=sel)
            return SkOutcome("UNKNOWN_SERVICE", sel)
        try:
            entry = self.sk_retype_service(kind, request.args[0])
        except ModelError as e:
            self.trace.emit("SK", "svc0", e.status, selector=sel, kind=kind)
            raise
        self.trace.emit("SK", "svc0", selector=sel, kind=kind, frame=request.args[0])
        return SkOutcome("SERVICE_DONE", entry.frame_type)

    def sk_retype_to_shared(self, frame, writable):
        frames = self.sptm.frames
        if frames.frame_type_of(frame) != FrameType.SK_DEFAULT:
            return False
        new = FrameType.SK_SHARED_RW if writable else FrameType.SK_SHARED_RO
        self.retype(frame, FrameType.SK_DEFAULT, new)
        return True

    def sk_retype_service(self, kind, frame):
        svc = RETYPE_SERVICES[kind]
        current = svc.current if svc.current is not None else self.sptm.frames.frame_type_of(frame)
        return self.retype(frame, current, svc.new)


def gl0_request(kind_or_selector, frame, pointer=0x1000):
    """Build a request whose referenced word selects the given service slot."""
    if isinstance(kind_or_selector, str):
        sel = list(RETYPE_SERVICES).index(kind_or_selector)
    else:
        sel = kind_or_selector
    return Gl0ServiceRequest(pointer, sel << SELECTOR_SHIFT, (frame, 0))
