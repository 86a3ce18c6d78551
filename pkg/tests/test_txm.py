import pytest

import oracle
from sptm_sim.core_model import Domain
from sptm_sim.dispatcher import Event
from sptm_sim.errors import (ArgCountMismatch, CallerDomainDenied, DuplicateRegistration,
                             PermissionDenied, SelectorUnknown, StackInvalid, TransitionDenied)
from sptm_sim.frame_table import REAL_TYPES, FrameType, RULES
from sptm_sim.sptm import NOT_RECOVERED, Sptm, TXM_RETYPE, TXM_UNKNOWN
from sptm_sim.world import World
from sptm_sim.txm import (SELECTORS, UNSUPPORTED_STATUS, Txm, TxmCall, TxmConfig,
                          TxmThreadStack, txm_boot, txm_selector_lookup)


def test_registry_matches_data():
    rows = oracle.rows("txm_selectors")
    assert len(SELECTORS) == len(rows) == 40
    for r in rows:
        s = SELECTORS[int(r["selector"])]
        assert (s.name, s.num_input_args, s.num_output_args) == (r["name"], int(r["inputs"]), int(r["outputs"]))
        assert 0 <= s.num_input_args <= 7 and 0 <= s.num_output_args <= 6


def test_lookup():
    assert (txm_selector_lookup("LoadTrustCache").num_input_args, txm_selector_lookup("LoadTrustCache").num_output_args) == (7, 0)
    s = txm_selector_lookup("kTXMKernelSelectorImage4GetNonce")
    assert (s.num_input_args, s.num_output_args) == (1, 1)
    with pytest.raises(SelectorUnknown):
        txm_selector_lookup("Nope")
    with pytest.raises(SelectorUnknown):
        txm_selector_lookup(999)


def test_boot(monitors):
    d = monitors.sptm.dispatcher
    assert d.special[Domain.TXM, 0].permissions == 0x2
    assert d.special[Domain.TXM, 1].permissions == 0x1
    for f in TxmConfig().rx_frames:
        assert monitors.sptm.frames.frame_type_of(f) == FrameType.TXM_RW
    assert monitors.sptm.frames.frame_type_of(TxmConfig().stack_frame) == FrameType.TXM_THREAD_STACK
    with pytest.raises(DuplicateRegistration):
        monitors.txm.boot()


def test_boot_report():
    sptm = Sptm(16)
    sptm.register_boot_tables()
    _, report = txm_boot(sptm, TxmConfig(rx_frames=(6, 7, 8, 9), stack_frame=10))
    assert report["rx_swept"] == 4 and report["stack"] == 10
    assert [sptm.frames.frame_type_of(f) for f in (6, 7, 8, 9)] == [FrameType.TXM_RW] * 4


def test_kernel_calls(monitors):
    txm = monitors.txm
    c = txm.txm_kernel_call(TxmCall("GetTrustCacheInfo"))
    assert c.outputs == [0, 0, 0, 0] and c.return_code == 0
    with pytest.raises(ArgCountMismatch):
        txm.txm_kernel_call(TxmCall("AssociateCodeSignature", [1, 2, 3, 4]))
    assert txm.txm_kernel_call(TxmCall(0x2F)).return_code == UNSUPPORTED_STATUS
    with pytest.raises(SelectorUnknown):
        txm.txm_kernel_call(TxmCall(0x40))
    assert monitors.monitor.current_state == 5


def test_one_gate_per_call(monitors):
    tr = monitors.trace
    n = len(tr)
    monitors.txm.txm_kernel_call(TxmCall("LoadTrustCache", list(range(7))))
    steps = [r for r in tr.records[n:] if r.operation == "step"]
    assert len(steps) == 2                      # the call and its return
    assert steps[0].detail["handler"] == "txm_dispatch_function_0"


def test_stack_must_be_thread_stack(monitors):
    with pytest.raises(StackInvalid):
        monitors.txm.txm_kernel_call(TxmCall("GetLogInfo"), TxmThreadStack(1, 20))


def test_skip_logs(monitors):
    n = len(monitors.trace.ops("txm_call"))
    monitors.txm.txm_kernel_call(TxmCall("GetLogInfo", skip_logs=True))
    assert len(monitors.trace.ops("txm_call")) == n


@pytest.fixture
def txm_context():
    """Bootstrap tables registered and the monitor inside TXM's boot window."""
    w = World()
    w.sptm.register_boot_tables()
    w.sptm.dispatcher.step_state(w.monitor, Event.TXM_BOOT)
    assert w.monitor.current_state == 0x2
    return w


def test_unknown_bootstrap_endpoint(txm_context):
    assert txm_context.txm._svc(TXM_UNKNOWN) == NOT_RECOVERED


def test_bootstrap_endpoints_refused_at_runtime(monitors):
    with pytest.raises(PermissionDenied):
        monitors.txm._svc(TXM_UNKNOWN)


@pytest.mark.parametrize("t", [t for t in REAL_TYPES if t != FrameType.SPTM_UNTYPED])
def test_txm_retypes_only_own_frames(txm_context, t):
    frames = txm_context.sptm.frames
    frames.retype(Domain.SPTM, 30, FrameType.SPTM_UNTYPED, t)
    new = min(RULES.masks[t].bit_length() - 1, 62) if RULES.masks[t] else FrameType.XNU_DEFAULT
    try:
        txm_context.txm._svc(TXM_RETYPE, 30, t, new)
        ok = True
    except (CallerDomainDenied, TransitionDenied):
        ok = False
    owner = RULES.caller_rules[t].allowed_domain
    assert ok == (owner == Domain.TXM and bool(RULES.masks[t]))


def test_txm_retypes_untyped(txm_context):
    txm_context.txm._svc(TXM_RETYPE, 30, FrameType.SPTM_UNTYPED, FrameType.TXM_DEFAULT)
    assert txm_context.sptm.frames.frame_type_of(30) == FrameType.TXM_DEFAULT
