"""Tightbeam IPC: endpoints, transports, connections and the message lifecycle."""
from dataclasses import dataclass, field
from enum import IntEnum

from . import tables
from .errors import (AllocationFailure, BufferOverflow, ConnectionClosed,
                     ConnectionMismatch, EndpointInvalid,
                     OversizeWithoutMultipart, UnsupportedTransport,
                     WrappingNotFalse, WrongDisposition, WrongState)
from .trace import Trace
from .xnuproxy import MessageTag, ThreadExclaveState


class TransportKind(IntEnum):
    NULL = 1
    MACH = 2
    EVE = 4
    EVE_ALT = 5
    XNU = 7
    DARWIN = 8
    UNIX = 9
    DELEGATED = 10
    AFK = 11


class MsgState(IntEnum):
    UNINITIALIZED = 0
    PREPARING = 1
    READY = 2
    SENT = 3
    RECEIVED = 4


class Disposition(IntEnum):
    QUERY = 1
    REPLY = 2


# the only edges a message may take; a reply starts fresh and lands in RECEIVED
MESSAGE_EDGES = frozenset({
    (MsgState.UNINITIALIZED, MsgState.PREPARING),
    (MsgState.PREPARING, MsgState.READY),
    (MsgState.READY, MsgState.SENT),
    (MsgState.UNINITIALIZED, MsgState.RECEIVED),
})

# the kernel only carries these two transport kinds
KERNEL_TRANSPORTS = {TransportKind.XNU: "xnu", TransportKind.AFK: "afk"}

WAIT_FOR_REPLY = 0x2

# bits in the transport buffer's 16-bit flag word
FLAG_REPLY_OK = 0x1
FLAG_CONTINUATION = 0x4
FLAG_NO_REPLY_EXPECTED = 0x8
FLAG_ONE_WAY = 0x10


def load_transport_mapping():
    out = {}
    for r in tables.load("transport_mapping"):
        opt = None if r["option"] == "*" else int(r["option"])
        out[int(r["ep_type"]), opt] = r["transport"]
    return out

FRAMEWORK_TRANSPORTS = load_transport_mapping()


def framework_transport(ep_type, option):
    name = FRAMEWORK_TRANSPORTS.get((ep_type, option)) or FRAMEWORK_TRANSPORTS.get((ep_type, None))
    if name is None:
        raise UnsupportedTransport(f"no framework transport for type {ep_type} option {option}")
    return name


def wire_tag(size, flags):
    """Tag word the XNU transport hands to the endpoint call."""
    return ((size + 7) >> 3) & 0x3F | (flags & 0xFFFF) << 16


@dataclass
class TbEndpoint:
    ep_type: int
    options: int
    interface_id: int
    data: int
    valid: bool = True


@dataclass
class TbTransport:
    kind: TransportKind
    endpoint_data: int
    behavior: str               # name of the per-kind function table
    context: dict = field(default_factory=dict)


@dataclass
class TbConnection:
    conn_id: int
    transport: TbTransport
    observers: list = field(default_factory=list)
    open: bool = True


@dataclass
class TbBuffer:
    type_word: int = 0          # encodes the function to call at the endpoint
    wrapping: int = 0
    offset: int = 0
    size: int = 0
    payload: bytearray = field(default_factory=bytearray)
    flags: int = 0              # 16-bit word that becomes the tag label


@dataclass
class TbMessage:
    state: MsgState = MsgState.UNINITIALIZED
    disposition: Disposition = None
    connection_id: int = None
    client_id: int = 0
    msg_id: int = 0
    num_caps: int = 0
    transport_buffer: TbBuffer = None


def set_state(message, new):
    new = MsgState(new)
    if (message.state, new) not in MESSAGE_EDGES:
        raise WrongState(f"message cannot go {message.state.name} -> {new.name}")
    message.state = new


@dataclass
class TightbeamConfig:
    mode: str = "kernel"        # "kernel" or "framework"
    tx_buffer_max: int = 248    # payload bytes that fit behind the tag register
    max_endpoints: int = None


class Tightbeam:
    def __init__(self, xnuproxy=None, config=None, trace=None):
        self.proxy = xnuproxy
        self.config = config or TightbeamConfig()
        self.trace = trace if trace is not None else (xnuproxy.trace if xnuproxy else Trace())
        self.endpoints = []
        self.connections = {}
        self._next_conn = 1
        self._next_msg = 1
        self.kernel_thread = ThreadExclaveState(0)

    def endpoint_create(self, ep_type, ident, options=0):
        cap = self.config.max_endpoints
        if cap is not None and sum(e.valid for e in self.endpoints) >= cap:
            raise AllocationFailure(f"endpoint capacity {cap} reached")
        ep = TbEndpoint(int(ep_type), options, ident, ident)
        self.endpoints.append(ep)
        self.trace.emit("TB", "tb_endpoint_create", type=ep.ep_type, id=ident, options=options)
        return ep

    def _transport_for(self, ep):
        if self.config.mode == "kernel":
            name = KERNEL_TRANSPORTS.get(ep.ep_type)
            if name is None:
                raise UnsupportedTransport(f"kernel side has no transport for type {ep.ep_type}")
        else:
            name = framework_transport(ep.ep_type, ep.options)
        return TbTransport(TransportKind(ep.ep_type), ep.data, name)

    def connection_create_with_endpoint(self, ep):
        if not ep.valid:
            raise EndpointInvalid("endpoint already consumed or destroyed")
        try:
            transport = self._transport_for(ep)
        except UnsupportedTransport as e:
            self.trace.emit("TB", "tb_connection_create_with_endpoint", e.status, type=ep.ep_type)
            raise
        conn = TbConnection(self._next_conn, transport)
        self._next_conn += 1
        self.connections[conn.conn_id] = conn
        ep.valid = False
        self.trace.emit("TB", "tb_connection_create_with_endpoint", conn=conn.conn_id,
                        transport=transport.behavior, endpoint_data=transport.endpoint_data)
        return conn

    def connection_activate(self, conn):
        for ob in conn.observers:
            ob("activate", conn, None)
        # activation behavior is an empty stub for every modelled kind
        self.trace.emit("TB", "tb_connection_activate", conn=conn.conn_id, observers=len(conn.observers))

    def connection_close(self, conn):
        conn.open = False
        self.trace.emit("TB", "tb_connection_close", conn=conn.conn_id)

    # -- messages --

    def message_construct(self, conn, message, buffer, size, option=0):
        if buffer.wrapping:
            raise WrappingNotFalse("transport buffer wrapping flag is set")
        if size > self.config.tx_buffer_max:
            raise OversizeWithoutMultipart(f"{size} bytes exceed {self.config.tx_buffer_max}; no multipart")
        set_state(message, MsgState.PREPARING)
        buffer.offset, buffer.size, buffer.payload = 0, size, bytearray(size)
        message.disposition = Disposition.REPLY if option == 1 else Disposition.QUERY
        message.connection_id = conn.conn_id
        message.msg_id = self._next_msg
        self._next_msg += 1
        message.transport_buffer = buffer
        self.trace.emit("TB", "tb_message_construct", conn=conn.conn_id, size=size,
                        disposition=message.disposition)
        return 0

    def message_encode(self, message, data):
        if message.state != MsgState.PREPARING:
            raise WrongState(f"encode needs PREPARING, message is {message.state.name}")
        buf = message.transport_buffer
        data = bytes(data)
        if buf.offset + len(data) > buf.size:
            raise BufferOverflow(f"{len(data)} bytes at offset {buf.offset} overrun size {buf.size}")
        buf.payload[buf.offset:buf.offset + len(data)] = data
        buf.offset += len(data)
        return 0

    def message_complete(self, message):
        if message.state != MsgState.PREPARING:
            raise WrongState(f"complete needs PREPARING, message is {message.state.name}")
        # replies complete the same way as queries
        set_state(message, MsgState.READY)
        return 0

    def connection_send_query(self, conn, message, want_reply=True, thread=None):
        if message.state != MsgState.READY:
            raise WrongState(f"send needs READY, message is {message.state.name}")
        if message.disposition != Disposition.QUERY:
            raise WrongDisposition(f"send needs a QUERY, message is {message.disposition.name}")
        if message.connection_id != conn.conn_id:
            raise ConnectionMismatch(f"message belongs to connection {message.connection_id}")
        if not conn.open:
            raise ConnectionClosed(f"connection {conn.conn_id} is closed")
        set_state(message, MsgState.SENT)
        buf = message.transport_buffer
        if not want_reply:
            buf.flags |= FLAG_ONE_WAY
        for ob in conn.observers:
            ob("send", conn, message)
        reply_tag = self._transport_send(conn, message, thread)
        if not want_reply or buf.flags & FLAG_NO_REPLY_EXPECTED:
            return None
        reply = TbMessage(client_id=message.client_id, msg_id=message.msg_id)
        set_state(reply, MsgState.RECEIVED)
        reply.disposition = Disposition.REPLY
        reply.connection_id = conn.conn_id
        reply.transport_buffer = TbBuffer(size=8 * reply_tag.mr_count, flags=reply_tag.label)
        return reply

    def _transport_send(self, conn, message, thread):
        if message.state != MsgState.SENT:
            raise WrongState("transport send on a message that is not SENT")
        t, buf = conn.transport, message.transport_buffer
        tag = wire_tag(buf.size, buf.flags)
        self.trace.emit("TB", "tb_connection_send_query", conn=conn.conn_id,
                        transport=t.behavior, endpoint=t.endpoint_data, tag=tag)
        if t.kind != TransportKind.XNU:
            return MessageTag()
        words = [int.from_bytes(buf.payload[i:i + 8], "little") for i in range(0, buf.size, 8)]
        reply, _ = self.proxy.endpoint_call(thread or self.kernel_thread, t.endpoint_data, tag, payload=words)
        return reply


def send_query(tb, conn, payload, selector=0, want_reply=True, thread=None):
    """Construct, encode, complete and send one query in a single call."""
    msg = TbMessage()
    buf = TbBuffer(type_word=selector)
    tb.message_construct(conn, msg, buf, len(payload), 0)
    tb.message_encode(msg, payload)
    tb.message_complete(msg)
    return msg, tb.connection_send_query(conn, msg, want_reply, thread)
