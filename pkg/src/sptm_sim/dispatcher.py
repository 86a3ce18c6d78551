"""SPTM call surface: table registration, gate entry and the internal state machine."""
from dataclasses import dataclass, field
from enum import IntEnum

from . import tables
from .core_model import (CONTROL_CODES, IOMMU_ID_MAX, ControlCode, Domain,
                         DispatchTarget, TableId, bits_to_domains, domain_bits,
                         domain_name, encode_dispatch_target)
from .errors import (ControlCodeReserved, DuplicateRegistration,
                     ForbiddenTransition, InvalidEvent, InvalidState,
                     ModelError, NoHandlerRegistered, PermissionDenied,
                     UnknownIommu, UnroutableDomain)
from .trace import Trace

MAX_EVENT = 14
MAX_STATE = 22


class Event(IntEnum):
    TXM_BOOT = 0
    SK_BOOT = 1
    CALL = 2            # default event for SPTM-domain targets
    TXM_CALL = 3
    SK_CALL = 4
    RETURN = 5
    PANIC = 9
    GUEST_ENTER = 0xC
    GUEST_EXIT = 0xD
    HIB_ENTER = 0xE


class Gl(IntEnum):
    GL0 = 0
    GL1 = 1

BOOT_STATE = 0
RUNTIME_STATE = 5

SVC_MAIN = 0
SVC_ENABLE_INTERRUPTS = 37
SVC_MASK_INTERRUPTS = 38

# exit-path rows that print a fixed panic banner
PANIC_MESSAGES = {
    (0x0, 9): "[PANIC DURING BOOTSTRAP]",
    (0x1, 9): "[SK BOOTSTRAP PANIC]",
    (0x2, 9): "[PANIC DURING BOOTSTRAP]",
    (0x3, 9): "[PANIC DURING BOOTSTRAP]",
    (0x4, 9): "[PANIC DURING BOOTSTRAP]",
}


@dataclass(frozen=True)
class TransitionEntry:
    state: int
    event: int
    action: str
    next_state: int
    domain: object = None       # Domain or None
    flag: int = 0


def load_transitions(rows=None):
    out = {}
    for r in rows if rows is not None else tables.load("state_transitions"):
        dom = tables.num(r["domain"])
        e = TransitionEntry(int(r["state"], 0), int(r["event"], 0), r["action"],
                            int(r["next_state"], 0),
                            None if dom is None else Domain(dom),
                            tables.num(r["flag"]) or 0)
        out[e.state, e.event] = e
    return out

TRANSITIONS = load_transitions()


def sink_states(transitions=TRANSITIONS):
    targets = {e.next_state for e in transitions.values()}
    sources = {e.state for e in transitions.values()}
    return sorted(targets - sources)


@dataclass(frozen=True)
class DispatchRegistration:
    table_id: int
    entry_marker: str
    permissions: int            # bit d set: domain d may call

    @property
    def domains(self):
        return bits_to_domains(self.permissions)


@dataclass(frozen=True)
class IommuRegistration:
    iommu_id: int
    table_id: int
    permissions: int            # effective domain bits
    raw_permissions: int = None # value as passed by firmware
    entry_marker: str = None

    @property
    def unlisted(self):
        return self.iommu_id == IOMMU_ID_MAX


@dataclass
class MonitorState:
    current_state: int = BOOT_STATE
    caller_domain: object = None
    interrupts_masked: bool = False

    def handoff(self):
        """Enter the runtime state once both boot chains have returned."""
        self.current_state = RUNTIME_STATE
        self.caller_domain = None


@dataclass
class Outcome:
    kind: str                   # DISPATCH, TRANSITION, RETURN_TO_CALLER, CONTROL_FE, CONTROL_FF, HANG, ROUTED_TO_SK
    target: DispatchTarget = None
    event: int = None
    action: str = None
    registration: DispatchRegistration = None
    state_before: int = None
    state_after: int = None
    caller_domain: object = None
    message: str = None


def event_for_genter(target):
    if target.domain == Domain.SPTM:
        if target.table == TableId.XNU_BOOTSTRAP:
            ep = target.endpoint & 0xFF
            return {0x1B: Event.GUEST_ENTER, 0x1C: Event.GUEST_EXIT, 0x1E: Event.HIB_ENTER}.get(ep, Event.CALL)
        return Event.CALL
    if target.domain == Domain.TXM:
        return Event.TXM_CALL
    if target.domain == Domain.SK:
        return Event.SK_CALL
    raise UnroutableDomain(f"GENTER cannot target domain {domain_name(target.domain)}")


class Dispatcher:
    """Registration structures plus the transition table.

    ``core`` holds tables registered by SPTM (and XNU) keyed by table id;
    ``special`` holds tables registered by TXM and SK keyed by (domain, table id).
    """

    def __init__(self, transitions=TRANSITIONS, trace=None):
        self.transitions = transitions
        self.trace = trace if trace is not None else Trace()
        self.core = {}
        self.special = {}
        self.iommus = []
        self.handlers = {}

    # -- registration --

    def register_dispatch_table(self, reg, caller_domain):
        caller_domain = Domain(caller_domain)
        if reg.table_id in CONTROL_CODES:
            raise ControlCodeReserved(f"table id {reg.table_id:#x} is a control code")
        if caller_domain in (Domain.SPTM, Domain.XNU, Domain.XNU_HIB):
            store, key = self.core, reg.table_id
        else:
            store, key = self.special, (caller_domain, reg.table_id)
        if key in store:
            self.trace.emit(caller_domain, "register_dispatch_table", "DuplicateRegistration",
                            table=reg.table_id)
            raise DuplicateRegistration(f"table {reg.table_id} already registered for {caller_domain.name}")
        store[key] = reg
        self.trace.emit(caller_domain, "register_dispatch_table", table=reg.table_id,
                        marker=reg.entry_marker, perms=reg.permissions)
        return key

    def register_iommu(self, reg):
        if not 0 <= reg.iommu_id <= IOMMU_ID_MAX:
            raise UnknownIommu(f"IOMMU id {reg.iommu_id}")
        marker = reg.entry_marker or f"iommu_{reg.iommu_id}_table_{reg.table_id}"
        key = self.register_dispatch_table(DispatchRegistration(reg.table_id, marker, reg.permissions), Domain.SPTM)
        self.iommus.append(reg)
        self.trace.emit("SPTM", "register_iommu", iommu=reg.iommu_id, table=reg.table_id,
                        perms=reg.permissions, raw=reg.raw_permissions,
                        unlisted=reg.unlisted)
        return key

    def registrations(self):
        """All (domain-scope, table id, registration) triples in a stable order."""
        out = [(Domain.SPTM, t, r) for t, r in sorted(self.core.items())]
        out += [(d, t, r) for (d, t), r in sorted(self.special.items())]
        return out

    def lookup(self, target):
        if target.domain in (Domain.SPTM, Domain.XNU):
            reg = self.core.get(target.table)
        else:
            reg = self.special.get((target.domain, target.table))
        if reg is None:
            raise NoHandlerRegistered(f"nothing registered for {target}")
        return reg

    def check(self, caller_domain, target):
        reg = self.lookup(target)
        if caller_domain is None or not reg.permissions >> int(caller_domain) & 1:
            raise PermissionDenied(f"{domain_name(caller_domain) if caller_domain is not None else 'none'}"
                                   f" may not call {target}")
        return reg

    # -- state machine --

    def step_state(self, monitor, event, target=None):
        target = target or DispatchTarget(0, 0, 0)
        try:
            return self._step(monitor, event, target)
        except ModelError as e:
            self.trace.emit(domain_name(monitor.caller_domain) if monitor.caller_domain is not None else "SPTM",
                            "step", e.status, event=event, state=monitor.current_state, target=str(target))
            raise

    def _step(self, monitor, event, target):
        if not 0 <= event <= MAX_EVENT:
            raise InvalidEvent(f"event {event:#x} > {MAX_EVENT:#x}")
        state = monitor.current_state
        if not 0 <= state <= MAX_STATE:
            raise InvalidState(f"state {state:#x} > {MAX_STATE:#x}")
        entry = self.transitions.get((state, event))
        if entry is None:
            raise ForbiddenTransition(f"no transition from state {state:#x} on event {event:#x}")
        # empty domain cells leave the caller domain as it was
        caller = entry.domain if entry.domain is not None else monitor.caller_domain
        reg = self.check(caller, target) if entry.flag & 1 else None
        monitor.caller_domain = caller
        monitor.current_state = entry.next_state
        message = PANIC_MESSAGES.get((state, event))
        out = Outcome("DISPATCH" if reg else "TRANSITION", target, event, entry.action, reg,
                      state, entry.next_state, caller, message)
        detail = dict(event=event, state=state, next=entry.next_state, action=entry.action,
                      target=str(target))
        if reg:
            detail["handler"] = reg.entry_marker
        if message:
            detail["panic"] = message
        self.trace.emit(domain_name(caller) if caller is not None else "SPTM", "step", **detail)
        return out

    # -- gates --

    def _control(self, target, monitor, gate):
        code = ControlCode(target.table)
        self.trace.emit(domain_name(monitor.caller_domain) if monitor.caller_domain is not None else "SPTM",
                        gate, code.name, target=str(target), state=monitor.current_state)
        return Outcome(code.name, target, state_before=monitor.current_state,
                       state_after=monitor.current_state, caller_domain=monitor.caller_domain)

    def svc_call(self, caller_level, imm, target, monitor, component=Domain.TXM):
        component = Domain(component)
        if component != Domain.TXM:
            # GL0 components other than TXM have their SVCs taken by SK
            self.trace.emit(component, "svc", "ROUTED_TO_SK", imm=imm, level=Gl(caller_level).name)
            return Outcome("ROUTED_TO_SK", target)
        if imm == SVC_ENABLE_INTERRUPTS or imm == SVC_MASK_INTERRUPTS:
            monitor.interrupts_masked = imm == SVC_MASK_INTERRUPTS
            self.trace.emit(component, "svc", "RETURN_TO_CALLER", imm=imm, masked=monitor.interrupts_masked)
            return Outcome("RETURN_TO_CALLER", target, state_before=monitor.current_state,
                           state_after=monitor.current_state)
        if imm != SVC_MAIN:
            self.trace.emit(component, "svc", "HANG", imm=imm)
            return Outcome("HANG", target)
        if target.is_control:
            return self._control(target, monitor, "svc")
        return self.step_state(monitor, Event.CALL, target)

    def hvc_call(self, target, monitor):
        if target.is_control:
            return self._control(target, monitor, "hvc")
        return self.step_state(monitor, Event.CALL, target)

    def genter(self, caller, target, monitor):
        try:
            event = event_for_genter(target)
        except UnroutableDomain as e:
            self.trace.emit(caller, "genter", e.status, target=str(target))
            raise
        return self.step_state(monitor, event, target)

    # -- delivery --

    def bind(self, entry_marker, fn):
        self.handlers[entry_marker] = fn

    def deliver(self, monitor, outcome, *args):
        """Run the resolved handler, then take the return event."""
        if outcome.kind != "DISPATCH":
            return None
        fn = self.handlers.get(outcome.registration.entry_marker)
        try:
            if fn is None:
                raise NoHandlerRegistered(f"no code bound to {outcome.registration.entry_marker}")
            return fn(outcome, *args)
        finally:
            self.step_state(monitor, Event.RETURN, outcome.target)


def bootstrap_registrations(dispatcher, hibernation=False):
    """Tables SPTM registers for itself, then the IOMMU tables."""
    keys = []
    for r in tables.load("bootstrap_tables"):
        if r["condition"] == "hibernation" and not hibernation:
            continue
        t = TableId(int(r["table"]))
        reg = DispatchRegistration(t, f"sptm_{t.name.lower()}", int(r["permissions"], 0))
        keys.append(dispatcher.register_dispatch_table(reg, Domain.SPTM))
    for r in tables.load("iommu"):
        if r["domains"] == "-":
            continue
        perms = domain_bits(Domain[d] for d in tables.names(r["domains"]))
        reg = IommuRegistration(int(r["iommu_id"]), int(r["table"]), perms, int(r["raw_permissions"], 0))
        keys.append(dispatcher.register_iommu(reg))
    return keys


def target(domain, table, endpoint):
    return encode_dispatch_target(domain, table, endpoint)
