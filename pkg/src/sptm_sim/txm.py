"""Trusted Execution Monitor: boot registration, kernel calls and selectors."""
from dataclasses import dataclass, field

from . import tables
from .core_model import Domain, TableId
from .dispatcher import Event, Gl, target
from .errors import (ArgCountMismatch, DuplicateRegistration, SelectorUnknown,
                     StackInvalid)
from .frame_table import FrameType
from .sptm import TXM_REGISTER, TXM_RETYPE, TXM_RX_SWEEP

ARG_SLOTS = 8
MAX_SELECTOR = 0x33
UNSUPPORTED_BAND = range(0x2E, 0x34)
UNSUPPORTED_STATUS = 0x26
NOOP_SELECTOR = 0x1F
SUCCESS = 0

FROM_XNU = "txm_dispatch_function_0"
FROM_SPTM = "txm_dispatch_function_1"


@dataclass(frozen=True)
class TxmSelector:
    selector: int
    name: str
    num_input_args: int
    num_output_args: int


def load_selectors():
    return {int(r["selector"]): TxmSelector(int(r["selector"]), r["name"], int(r["inputs"]), int(r["outputs"]))
            for r in tables.load("txm_selectors")}

SELECTORS = load_selectors()
_BY_NAME = {s.name: s for s in SELECTORS.values()}


def txm_selector_lookup(selector):
    if isinstance(selector, TxmSelector):
        return selector
    if isinstance(selector, str):
        s = _BY_NAME.get(selector.removeprefix("kTXMKernelSelector"))
    else:
        s = SELECTORS.get(selector)
    if s is None:
        raise SelectorUnknown(f"no TXM selector {selector!r}")
    return s


@dataclass
class TxmCall:
    selector: object            # TxmSelector, name or id
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    return_code: int = None
    failure_fatal: bool = False
    failure_silent: bool = False
    skip_logs: bool = False


@dataclass(frozen=True)
class TxmThreadStack:
    stack_id: int
    backing_frame: int


@dataclass
class TxmConfig:
    rx_frames: tuple = (1, 2, 3, 4)
    stack_frame: int = 5


class Txm:
    def __init__(self, sptm, config=None):
        self.sptm = sptm
        self.config = config or TxmConfig()
        self.trace = sptm.trace
        self.stacks = []
        d = sptm.dispatcher
        d.bind(FROM_XNU, self._from_xnu)
        d.bind(FROM_SPTM, self._from_sptm)

    def _svc(self, endpoint, *args):
        d, m = self.sptm.dispatcher, self.sptm.monitor
        out = d.svc_call(Gl.GL0, 0, target(Domain.SPTM, TableId.TXM_BOOTSTRAP, endpoint), m, Domain.TXM)
        return d.deliver(m, out, *args)

    def boot(self):
        d, m = self.sptm.dispatcher, self.sptm.monitor
        if (Domain.TXM, 0) in d.special:
            raise DuplicateRegistration("TXM dispatch functions already registered")
        d.step_state(m, Event.TXM_BOOT)
        self._svc(TXM_REGISTER, 0, FROM_XNU, 1 << Domain.XNU)
        self._svc(TXM_REGISTER, 1, FROM_SPTM, 1 << Domain.SPTM)
        swept = self._svc(TXM_RX_SWEEP, list(self.config.rx_frames), FrameType.TXM_RW)
        f = self.config.stack_frame
        self._svc(TXM_RETYPE, f, self.sptm.frames.frame_type_of(f), FrameType.TXM_THREAD_STACK)
        self.stacks.append(TxmThreadStack(0, f))
        d.step_state(m, Event.RETURN)
        return {"registrations": [(Domain.TXM, 0), (Domain.TXM, 1)], "rx_swept": swept, "stack": f}

    def txm_kernel_call(self, call, stack=None):
        stack = stack or self.stacks[0]
        sel = call.selector
        sel_id = sel.selector if isinstance(sel, TxmSelector) else (
            txm_selector_lookup(sel).selector if isinstance(sel, str) else int(sel))
        block = [stack.backing_frame] + list(call.inputs)
        block += [0] * (ARG_SLOTS - len(block))
        d, m = self.sptm.dispatcher, self.sptm.monitor
        out = d.genter(Domain.XNU, target(Domain.TXM, 0, sel_id), m)
        return d.deliver(m, out, block, call)

    def _from_xnu(self, outcome, block, call):
        if self.sptm.frames.frame_type_of(block[0]) != FrameType.TXM_THREAD_STACK:
            raise StackInvalid(f"frame {block[0]} is not a TXM thread stack")
        return self.txm_dispatch_handler(outcome.target.endpoint, call)

    def _from_sptm(self, outcome, *args):
        self.trace.emit("TXM", "endpoint_stub", target=str(outcome.target))
        return SUCCESS

    def txm_dispatch_handler(self, selector, call):
        if not 1 <= selector <= MAX_SELECTOR:
            # firmware panics (0xa1) here
            raise SelectorUnknown(f"selector {selector:#x} outside 1..{MAX_SELECTOR:#x}")
        if selector in UNSUPPORTED_BAND:
            call.outputs, call.return_code = [], UNSUPPORTED_STATUS
            self.trace.emit("TXM", "txm_call", "unsupported", selector=selector, status=UNSUPPORTED_STATUS)
            return call
        sel = SELECTORS.get(selector)
        if sel is None:
            raise SelectorUnknown(f"selector {selector:#x} has no known name")
        if len(call.inputs) != sel.num_input_args:
            raise ArgCountMismatch(f"{sel.name} takes {sel.num_input_args} inputs, got {len(call.inputs)}")
        call.outputs = [0] * sel.num_output_args
        call.return_code = SUCCESS
        if not call.skip_logs:
            self.trace.emit("TXM", "txm_call", selector=selector, name=sel.name,
                            inputs=len(call.inputs), outputs=sel.num_output_args,
                            noop=selector == NOOP_SELECTOR)
        return call


def txm_boot(sptm, config=None):
    t = Txm(sptm, config)
    return t, t.boot()
