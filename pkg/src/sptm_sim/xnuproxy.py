"""Secure-world request broker: management commands, IPC buffers and endpoint calls."""
from dataclasses import dataclass, field
from enum import IntEnum, IntFlag

from .errors import (AlreadyAllocated, FieldOverflow, NotBooted, ProxyFailure,
                     ReentryDenied, ServiceUnknown)
from .trace import Trace


class Cmd(IntEnum):
    XNUPROXY_CMD_UNDEFINED = 0
    XNUPROXY_CMD_SETUP = 1
    XNUPROXY_CMD_CONTEXT_ALLOCATE = 2
    XNUPROXY_CMD_CONTEXT_FREE = 3
    XNUPROXY_CMD_NAMED_BUFFER_CREATE = 4
    XNUPROXY_CMD_NAMED_BUFFER_DELETE = 5
    XNUPROXY_CMD_RESOURCE_INFO = 6
    XNUPROXY_CMD_AUDIO_BUFFER_CREATE = 7
    XNUPROXY_CMD_AUDIO_BUFFER_COPYOUT = 8
    XNUPROXY_CMD_AUDIO_BUFFER_DELETE = 9
    XNUPROXY_CMD_SENSOR_START = 10
    XNUPROXY_CMD_SENSOR_STOP = 11
    XNUPROXY_CMD_SENSOR_STATUS = 12
    XNUPROXY_CMD_DISPLAY_HEALTHCHECK_RATE = 13
    XNUPROXY_CMD_NAMED_BUFFER_MAP = 14
    XNUPROXY_CMD_NAMED_BUFFER_LAYOUT = 15
    XNUPROXY_CMD_AUDIO_BUFFER_MAP = 16
    XNUPROXY_CMD_AUDIO_BUFFER_LAYOUT = 17
    XNUPROXY_CMD_REPORT_MEMORY_USAGE = 18
    XNUPROXY_CMD_UPCALL_READY = 19


class MsgStatus(IntEnum):
    NONE = 0
    PROCESSING = 1
    UPCALL = 2
    FAILURE = 3


class ThreadFlag(IntFlag):
    RPC = 0x1
    UPCALL = 0x2
    SCHEDULER_REQUEST = 0x4
    XNUPROXY = 0x8
    SCHEDULER_CALL = 0x10
    STOP_UPCALL_PENDING = 0x20

STATE_ANY = ThreadFlag(0x3F)
INTSTATE_EXECUTION = 0x1


# tag layout, low to high: r(6) c(3) u(3) n(1) unused(3) l(16)
MR_SHIFT, MR_BITS = 0, 6
CAP_SHIFT, CAP_BITS = 6, 3
UNWRAP_SHIFT, UNWRAP_BITS = 9, 3
NB_SHIFT, NB_BITS = 12, 1
LABEL_SHIFT, LABEL_BITS = 16, 16

_FIELDS = (("mr_count", MR_SHIFT, MR_BITS), ("cap_count", CAP_SHIFT, CAP_BITS),
           ("unwrapped", UNWRAP_SHIFT, UNWRAP_BITS), ("non_blocking", NB_SHIFT, NB_BITS),
           ("label", LABEL_SHIFT, LABEL_BITS))
_USED = sum(((1 << b) - 1) << s for _, s, b in _FIELDS)


@dataclass(frozen=True)
class MessageTag:
    mr_count: int = 0
    cap_count: int = 0
    unwrapped: int = 0
    non_blocking: int = 0
    label: int = 0

    @property
    def raw(self):
        return pack_tag(self)


def pack_tag(tag=None, **fields):
    tag = tag or MessageTag(**fields)
    word = 0
    for name, shift, bits in _FIELDS:
        v = getattr(tag, name)
        if not 0 <= v < 1 << bits:
            raise FieldOverflow(f"{name}={v} exceeds {bits} bits")
        word |= v << shift
    return word


def unpack_tag(word):
    if word < 0 or word & ~_USED:
        raise FieldOverflow(f"tag word {word:#x} sets bits outside the layout")
    return MessageTag(**{n: word >> s & ((1 << b) - 1) for n, s, b in _FIELDS})


TAG = 0     # mr slot holding the message tag


@dataclass
class IpcBuffer:
    mr: list
    scr: list
    dcr: list
    endpoint_field: int = None
    result: int = 0

    @classmethod
    def allocate(cls, mr, scr, dcr):
        return cls([0] * mr, [0] * scr, [0] * dcr)

    @property
    def size(self):
        return 8 * (len(self.mr) + len(self.scr) + len(self.dcr))

    def to_bytes(self):
        return b"".join(w.to_bytes(8, "little") for w in self.mr + self.scr + self.dcr)

    def load_bytes(self, data):
        words = [int.from_bytes(data[i:i + 8], "little") for i in range(0, len(data), 8)]
        n, s = len(self.mr), len(self.scr)
        self.mr[:] = words[:n]
        self.scr[:] = words[n:n + s]
        self.dcr[:] = words[n + s:]


@dataclass
class ProxyMessage:
    cmd: Cmd
    server_id: int = None
    status: MsgStatus = MsgStatus.NONE
    cmd_payload: dict = field(default_factory=dict)


@dataclass
class ThreadExclaveState:
    thread_id: int
    flags: ThreadFlag = ThreadFlag(0)
    intstate: int = 0
    scid: int = None
    ipc_buffer: IpcBuffer = None


@dataclass
class ProxyConfig:
    mr: int = 32
    scr: int = 8
    dcr: int = 8
    upcall_bounce: bool = False     # resolve each send through one UPCALL status


def echo_service(thread, buf):
    """Default service body: echo the tag with the reply-ok label bit set."""
    buf.mr[TAG] |= 1 << LABEL_SHIFT
    return 0


class XnuProxy:
    """Kernel-side view of xnuproxy plus the synchronous secure-world step."""

    def __init__(self, resources=(), config=None, trace=None, enter=None):
        self.resources = list(resources)    # (domain, name, kind) records served by RESOURCE_INFO
        self.config = config or ProxyConfig()
        self.trace = trace if trace is not None else Trace()
        self.enter = enter or (lambda work: work())
        self.booted = False
        self.scid = 0                       # the proxy's own scheduling context
        self._next_scid = 1
        self.live_scids = set()
        self.services = {}                  # endpoint id -> handler(thread, buf) -> result word

    @property
    def buffer_size(self):
        return 8 * (self.config.mr + self.config.scr + self.config.dcr)

    def boot(self, thread):
        self.booted = True
        return self.proxy_send(ProxyMessage(Cmd.XNUPROXY_CMD_SETUP), thread)

    def register_service(self, endpoint_id, handler=echo_service):
        self.services[endpoint_id] = handler

    # -- management path --

    def proxy_send(self, msg, thread):
        if not self.booted:
            raise NotBooted("xnuproxy not booted")
        if thread.flags & STATE_ANY:
            raise ReentryDenied(f"thread {thread.thread_id} already in exclaves state {int(thread.flags):#x}")
        thread.flags |= ThreadFlag.XNUPROXY
        msg.server_id = self.scid
        msg.status = MsgStatus.PROCESSING
        try:
            bounced = False
            while msg.status == MsgStatus.PROCESSING:
                self._secure_step(msg, bounce=self.config.upcall_bounce and not bounced)
                if msg.status == MsgStatus.UPCALL:
                    bounced = True
                    self.trace.emit(f"thread:{thread.thread_id}", "xnuproxy_upcall", cmd=msg.cmd.name)
                    msg.status = MsgStatus.PROCESSING
        finally:
            thread.flags &= ~ThreadFlag.XNUPROXY
        self.trace.emit(f"thread:{thread.thread_id}", "proxy_send",
                        "ok" if msg.status == MsgStatus.NONE else "ProxyFailure", cmd=msg.cmd.name)
        if msg.status != MsgStatus.NONE:
            raise ProxyFailure(f"{msg.cmd.name} finished with status {msg.status.name}")
        return msg

    def _secure_step(self, msg, bounce=False):
        if bounce:
            msg.status = MsgStatus.UPCALL
            return
        cmd, p = msg.cmd, msg.cmd_payload
        if cmd == Cmd.XNUPROXY_CMD_UNDEFINED:
            msg.status = MsgStatus.FAILURE
            return
        if cmd == Cmd.XNUPROXY_CMD_RESOURCE_INFO:
            i = p.get("index", 0)
            p["resource"] = self.resources[i] if i < len(self.resources) else None
        elif cmd == Cmd.XNUPROXY_CMD_CONTEXT_ALLOCATE:
            p["scid"] = self._next_scid
            self.live_scids.add(self._next_scid)
            self._next_scid += 1
        elif cmd == Cmd.XNUPROXY_CMD_CONTEXT_FREE:
            # freed ids are never handed out again
            self.live_scids.discard(p.get("scid"))
        msg.status = MsgStatus.NONE

    def allocate_ipc_buffer(self, thread):
        if thread.ipc_buffer is not None:
            raise AlreadyAllocated(f"thread {thread.thread_id} already has a buffer")
        msg = self.proxy_send(ProxyMessage(Cmd.XNUPROXY_CMD_CONTEXT_ALLOCATE), thread)
        thread.scid = msg.cmd_payload["scid"]
        thread.ipc_buffer = IpcBuffer.allocate(self.config.mr, self.config.scr, self.config.dcr)
        return thread.ipc_buffer, thread.scid

    def free_ipc_buffer(self, thread):
        self.proxy_send(ProxyMessage(Cmd.XNUPROXY_CMD_CONTEXT_FREE, cmd_payload={"scid": thread.scid}), thread)
        thread.ipc_buffer, thread.scid = None, None

    def resource_info(self, thread, index):
        msg = self.proxy_send(ProxyMessage(Cmd.XNUPROXY_CMD_RESOURCE_INFO, cmd_payload={"index": index}), thread)
        return msg.cmd_payload["resource"]

    # -- RPC path --

    def endpoint_call(self, thread, endpoint_id, tag, payload=None):
        if thread.flags & STATE_ANY:
            raise ReentryDenied(f"thread {thread.thread_id} is already inside exclaves")
        handler = self.services.get(endpoint_id)
        if handler is None:
            self.trace.emit(f"thread:{thread.thread_id}", "endpoint_call", "ServiceUnknown", endpoint=endpoint_id)
            raise ServiceUnknown(f"no service with endpoint id {endpoint_id}")
        if thread.ipc_buffer is None:
            self.allocate_ipc_buffer(thread)
        buf = thread.ipc_buffer
        buf.mr[TAG] = tag.raw if isinstance(tag, MessageTag) else unpack_tag(tag).raw
        if payload is not None:
            buf.mr[1:1 + len(payload)] = payload
        buf.endpoint_field = endpoint_id
        thread.flags |= ThreadFlag.RPC
        self.trace.emit(f"thread:{thread.thread_id}", "endpoint_call", endpoint=endpoint_id,
                        tag=buf.mr[TAG], scid=thread.scid)
        try:
            buf.result = self.enter(lambda: handler(thread, buf))
        finally:
            thread.flags &= ~ThreadFlag.RPC
        return unpack_tag(buf.mr[TAG]), buf.result
