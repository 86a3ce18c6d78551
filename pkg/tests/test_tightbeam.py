import pytest
from hypothesis import given, strategies as st

import oracle
from sptm_sim.errors import (AllocationFailure, BufferOverflow, ConnectionClosed,
                             ConnectionMismatch, EndpointInvalid, OversizeWithoutMultipart,
                             UnsupportedTransport, WrappingNotFalse, WrongDisposition,
                             WrongState)
from sptm_sim.tightbeam import (FLAG_ONE_WAY, Disposition, MESSAGE_EDGES, MsgState,
                                TbBuffer, TbMessage, Tightbeam, TightbeamConfig,
                                TransportKind, framework_transport, send_query, set_state,
                                wire_tag)
from sptm_sim.trace import Trace
from sptm_sim.xnuproxy import ProxyConfig, ThreadExclaveState, XnuProxy


def _tb(mode="kernel", **kw):
    p = XnuProxy([], ProxyConfig(), Trace())
    p.boot(ThreadExclaveState(0))
    p.register_service(3)
    return Tightbeam(p, TightbeamConfig(mode=mode, **kw))


def _conn(tb, ident=3):
    return tb.connection_create_with_endpoint(tb.endpoint_create(TransportKind.XNU, ident))


def _ready(tb, conn, size=8, option=0):
    m = TbMessage()
    tb.message_construct(conn, m, TbBuffer(), size, option)
    tb.message_complete(m)
    return m


def test_codes_match_data():
    rows = oracle.rows("tightbeam_codes")
    assert {r["name"]: int(r["code"]) for r in rows if r["kind"] == "state"} == {s.name: int(s) for s in MsgState}
    assert {r["name"]: int(r["code"]) for r in rows if r["kind"] == "disposition"} == {
        d.name: int(d) for d in Disposition}


def test_endpoints():
    tb = _tb()
    ep = tb.endpoint_create(TransportKind.XNU, 9, options=5)
    assert ep.valid and ep.options == 5 and ep.data == 9
    assert tb.endpoint_create(TransportKind.NULL, 0).ep_type == 1
    with pytest.raises(AllocationFailure):
        Tightbeam(config=TightbeamConfig(max_endpoints=0)).endpoint_create(TransportKind.XNU, 0)


def test_connection_consumes_endpoint():
    tb = _tb()
    ep = tb.endpoint_create(TransportKind.XNU, 3)
    conn = tb.connection_create_with_endpoint(ep)
    assert conn.transport.kind == TransportKind.XNU and conn.transport.endpoint_data == 3
    assert not ep.valid
    with pytest.raises(EndpointInvalid):
        tb.connection_create_with_endpoint(ep)


def test_kernel_transports():
    tb = _tb()
    with pytest.raises(UnsupportedTransport):
        tb.connection_create_with_endpoint(tb.endpoint_create(TransportKind.MACH, 0))
    assert tb.connection_create_with_endpoint(tb.endpoint_create(TransportKind.AFK, 0)).transport.behavior == "afk"


def test_framework_transports():
    assert framework_transport(2, 1) == "mach_service"
    assert framework_transport(1, 77) == "null"
    with pytest.raises(UnsupportedTransport):
        framework_transport(TransportKind.XNU, 0)
    tb = _tb("framework")
    assert tb.connection_create_with_endpoint(tb.endpoint_create(9, 0)).transport.behavior == "unix_client"


def test_activate_notifies_observers():
    tb = _tb()
    conn = _conn(tb)
    calls = []
    conn.observers.append(lambda ev, c, m: calls.append(ev))
    tb.connection_activate(conn)
    tb.connection_activate(conn)
    assert calls == ["activate", "activate"] and conn.open


def test_construct():
    tb = _tb()
    conn = _conn(tb)
    m = TbMessage()
    tb.message_construct(conn, m, TbBuffer(), 8, 0)
    assert m.state == MsgState.PREPARING and m.disposition == Disposition.QUERY
    r = TbMessage()
    tb.message_construct(conn, r, TbBuffer(), 8, 1)
    assert r.disposition == Disposition.REPLY
    with pytest.raises(WrappingNotFalse):
        tb.message_construct(conn, TbMessage(), TbBuffer(wrapping=1), 8)
    with pytest.raises(OversizeWithoutMultipart):
        tb.message_construct(conn, TbMessage(), TbBuffer(), 249)


def test_encode():
    tb = _tb()
    conn = _conn(tb)
    m = TbMessage()
    tb.message_construct(conn, m, TbBuffer(), 8)
    tb.message_encode(m, b"\x01")
    assert m.transport_buffer.offset == 1
    with pytest.raises(BufferOverflow):
        tb.message_encode(m, bytes(8))
    assert m.transport_buffer.offset == 1


def test_complete():
    tb = _tb()
    conn = _conn(tb)
    m = _ready(tb, conn)
    assert m.state == MsgState.READY
    with pytest.raises(WrongState):
        tb.message_complete(m)
    assert _ready(tb, conn, option=1).state == MsgState.READY


def test_send_guards():
    tb = _tb()
    conn, other = _conn(tb), _conn(tb)
    m = TbMessage()
    tb.message_construct(conn, m, TbBuffer(), 8)
    with pytest.raises(WrongState):
        tb.connection_send_query(conn, m)
    with pytest.raises(WrongDisposition):
        tb.connection_send_query(conn, _ready(tb, conn, option=1))
    with pytest.raises(ConnectionMismatch):
        tb.connection_send_query(other, _ready(tb, conn))
    tb.connection_close(conn)
    with pytest.raises(ConnectionClosed):
        tb.connection_send_query(conn, _ready(tb, conn))


def test_send_delivers_to_endpoint():
    tb = _tb()
    conn = _conn(tb)
    msg, reply = send_query(tb, conn, b"\x05" + bytes(8), selector=5)
    calls = tb.trace.ops("endpoint_call")
    assert len(calls) == 1 and calls[0].detail["endpoint"] == 3
    assert msg.state == MsgState.SENT and reply.state == MsgState.RECEIVED
    assert reply.disposition == Disposition.REPLY and reply.transport_buffer.flags & 1
    assert tb.trace.ops("tb_connection_send_query")[0].detail["tag"] & 0x3F == 2


def test_one_way_send():
    tb = _tb()
    msg, reply = send_query(tb, _conn(tb), b"x", want_reply=False)
    assert reply is None and msg.transport_buffer.flags & FLAG_ONE_WAY
    assert tb.trace.ops("tb_connection_send_query")[0].detail["tag"] >> 16 == FLAG_ONE_WAY


def test_afk_send_skips_endpoint_call():
    tb = _tb()
    conn = tb.connection_create_with_endpoint(tb.endpoint_create(TransportKind.AFK, 3))
    send_query(tb, conn, b"abc")
    assert tb.trace.ops("endpoint_call") == []


@pytest.mark.parametrize("size", range(0, 249, 7))
def test_wire_tag_length(size):
    assert wire_tag(size, 0) & 0x3F == oracle.wire_mr_count(size)


def test_edges():
    assert {(int(a), int(b)) for a, b in MESSAGE_EDGES} == {(0, 1), (1, 2), (2, 3), (0, 4)}


@given(st.lists(st.sampled_from(list(MsgState)), max_size=8))
def test_only_documented_paths(seq):
    m = TbMessage()
    path = [m.state]
    for s in seq:
        try:
            set_state(m, s)
            path.append(s)
        except WrongState:
            pass
    assert path in ([0], [0, 1], [0, 1, 2], [0, 1, 2, 3], [0, 4])


@given(st.lists(st.binary(max_size=64), min_size=1, max_size=6))
def test_one_endpoint_call_per_send(payloads):
    tb = _tb()
    conn = _conn(tb)
    for i, p in enumerate(payloads, 1):
        send_query(tb, conn, p)
        assert len(tb.trace.ops("endpoint_call")) == i
