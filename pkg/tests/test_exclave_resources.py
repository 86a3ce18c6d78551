import pytest
from hypothesis import given, strategies as st

import oracle
from conftest import CONCLAVE, MIC, SIRI
from sptm_sim.errors import (AlreadyAttached, CallerNotEntitled, ConclaveNotRunning,
                             DataError, DuplicateResourceId, IllegalTransition, InvalidArgument, InvalidCapability,
                             ManagerOutsideKernel, NotBooted, NotFound, NotSupported,
                             PortInvalid, PreconditionViolated, TooManyServices)
from sptm_sim.exclave_resources import (CONCLAVE_EDGES, CONCLAVE_SERVICE_MAX, KERNEL_DOMAIN,
                                        ConclaveRecord,
                                        ConclaveRequest, ConclaveState, CtlOp, DomainTable,
                                        ExclaveResource, Exclaves, ExclavesConfig, IpcSpace,
                                        Port, ResourceKind, TaskRecord, default_fixture,
                                        read_fixture)
from sptm_sim.tightbeam import Tightbeam
from sptm_sim.trace import Trace
from sptm_sim.world import World, WorldConfig
from sptm_sim.xnuproxy import ProxyConfig, ThreadExclaveState, XnuProxy

K = KERNEL_DOMAIN
AUDIO = "com.apple.audiomxd.conclave"


def _exclaves(resources, **cfg):
    tr = Trace()
    p = XnuProxy(resources, ProxyConfig(), tr)
    p.boot(ThreadExclaveState(0))
    ex = Exclaves(p, Tightbeam(p, trace=tr), ExclavesConfig(**cfg), tr)
    ex.resource_init()
    return ex


def test_codes():
    assert [int(s) for s in ConclaveState] == [0, 1, 2, 3, 4]
    assert (ConclaveRequest.NONE, ConclaveRequest.LAUNCH, ConclaveRequest.SUSPEND,
            ConclaveRequest.STOP) == (0, 1, 2, 4)
    assert {(a.name, r): b.name for (a, r), b in CONCLAVE_EDGES.items()} == oracle.conclave_edges()


def test_fixture_enumeration():
    ex = _exclaves([(K, "com.apple.service.ConclaveLauncherControl", ResourceKind.SERVICE),
                    (K, AUDIO, ResourceKind.CONCLAVE_MANAGER),
                    (AUDIO, "com.apple.sensors.mic", ResourceKind.SENSOR),
                    (AUDIO, "com.apple.audiomxd.AudioCaptureServer", ResourceKind.SERVICE)])
    mgr = ex.conclave_manager(AUDIO)
    assert mgr.payload.service_bits == {ex.lookup_service(AUDIO, "com.apple.audiomxd.AudioCaptureServer")}
    assert all(r.port is not None for r in ex.table.resources())


def test_empty_fixture():
    assert _exclaves([]).table.root == {}


def test_service_limit():
    mk = lambda n: [(K, "m", ResourceKind.CONCLAVE_MANAGER)] + [
        ("m", f"s{i}", ResourceKind.SERVICE) for i in range(n)]
    assert len(_exclaves(mk(CONCLAVE_SERVICE_MAX)).conclave_manager("m").payload.service_bits) == 192
    with pytest.raises(TooManyServices):
        _exclaves(mk(CONCLAVE_SERVICE_MAX + 1))


def test_manager_must_live_in_kernel_domain():
    with pytest.raises(ManagerOutsideKernel):
        _exclaves([("other", "m", ResourceKind.CONCLAVE_MANAGER)])


def test_lookup_and_duplicates(world):
    ex = world.exclaves
    assert ex.lookup_service(K, "com.apple.service.ExclaveIndicatorController") == 1
    with pytest.raises(NotFound):
        ex.lookup_service(K, "missing")
    dups = [r for r in ex.table.root[K] if r.name == "com.apple.named_buffer.2"]
    assert len(dups) == 2 and dups[0].res_id != dups[1].res_id
    assert ex.table.find(K, "com.apple.named_buffer.2") is dups[0]


def test_resource_ids_unique_per_domain(world):
    for dom, rs in world.exclaves.table.root.items():
        ids = [r.res_id for r in rs]
        assert len(ids) == len(set(ids)), dom
    t = DomainTable()
    t.add(ExclaveResource("x", ResourceKind.SENSOR, 1, "d"))
    t.add(ExclaveResource("x", ResourceKind.SENSOR, 1, "e"))
    with pytest.raises(DuplicateResourceId):
        t.add(ExclaveResource("y", ResourceKind.SENSOR, 1, "d"))


def test_name_limit():
    ExclaveResource("a" * 128, ResourceKind.SENSOR, 0, "d")
    with pytest.raises(DataError):
        ExclaveResource("a" * 129, ResourceKind.SENSOR, 0, "d")


def test_fixture_reader(tmp_path):
    f = tmp_path / "r.tsv"
    f.write_text("# c\nd\tn\tSENSOR\nd\tm\tSERVICE\t0x7\n")
    assert read_fixture(f) == [("d", "n", ResourceKind.SENSOR), ("d", "m", ResourceKind.SERVICE, 7)]
    f.write_text("d\tn\n")
    with pytest.raises(DataError):
        read_fixture(f)
    assert len(default_fixture()) == 15


def test_attach_rules(world):
    ex = world.exclaves
    mgr = ex.conclave_manager(CONCLAVE)
    host, plain = world.task(100, ["conclave-host"]), world.task(101)
    with pytest.raises(CallerNotEntitled):
        ex.conclave_attach(host, plain, mgr)
    ex.conclave_attach(host, world.tasks[1], mgr)
    assert mgr.payload.state == ConclaveState.ATTACHED and host.conclave is mgr
    with pytest.raises(AlreadyAttached):
        ex.conclave_attach(host, world.tasks[1], mgr)
    with pytest.raises(PreconditionViolated):
        ex.conclave_attach(host, world.tasks[1], ex.table.find(K, MIC))


def test_lifecycle(running):
    world, host, mgr = running
    ex = world.exclaves
    assert mgr.payload.state == ConclaveState.RUNNING
    codes = [r.detail["code"] for r in world.trace.ops("conclave_transition")]
    assert codes == [ConclaveRequest.LAUNCH] and mgr.payload.request == ConclaveRequest.NONE
    ex.conclave_transition(mgr, "suspend")
    with pytest.raises(ConclaveNotRunning):
        ex.tightbeam_query(host, SIRI, b"x")
    ex.conclave_transition(mgr, "resume")
    ex.tightbeam_query(host, SIRI, b"x")
    ex.conclave_transition(mgr, "stop")
    assert not mgr.payload.control_connection.open
    with pytest.raises(IllegalTransition):
        ex.conclave_transition(mgr, "launch")


def test_port_names():
    ex = Exclaves(None)
    res = ExclaveResource("s", ResourceKind.SENSOR, 0x100, "d", port=None)
    res.port = Port(res)
    space = IpcSpace()
    with pytest.raises(PreconditionViolated):
        ex.create_port_name(res, space)
    res.use_count = 1
    n1 = ex.create_port_name(res, space)
    assert n1 == 0x1003 and res.port.srights == 1
    res.use_count += 1
    n2 = ex.create_port_name(res, space)
    assert n2 == n1 and res.port.srights == 1 and res.use_count == 1
    full = IpcSpace(capacity=0)
    with pytest.raises(PortInvalid):
        ex.create_port_name(res, full)


def test_trap_needs_boot():
    ex = Exclaves(None)
    with pytest.raises(NotBooted):
        ex.exclaves_ctl_trap(TaskRecord(0, is_kernel=True), CtlOp.SENSOR_CREATE, resource_name=MIC)


def test_kernel_entitled_task_uses_kernel_domain(world):
    t = world.task(200, ["kernel-domain"])
    r = world.exclaves.exclaves_ctl_trap(t, CtlOp.NOTIFICATION_RESOURCE_LOOKUP,
                                         resource_name="com.apple.notification.hello")
    assert r.port_name == 0x1003
    with pytest.raises(NotFound):
        world.exclaves.exclaves_ctl_trap(t, CtlOp.SENSOR_CREATE, resource_name="com.apple.audio.mic")


def test_named_buffer_strict_firmware():
    w = World(WorldConfig(strict_firmware=True))
    w.boot()
    with pytest.raises(NotSupported) as e:
        w.exclaves.exclaves_ctl_trap(w.tasks[0], CtlOp.NAMED_BUFFER_CREATE, resource_name="com.apple.named_buffer.2")
    assert e.value.kr == 0x46


def test_named_buffer_default(world):
    r = world.exclaves.exclaves_ctl_trap(world.tasks[0], CtlOp.NAMED_BUFFER_CREATE,
                                         resource_name="com.apple.named_buffer.2")
    assert r.port_name


def test_endpoint_call_checks(running):
    world, host, _ = running
    ex = world.exclaves
    size = world.proxy.buffer_size
    with pytest.raises(InvalidCapability):
        ex.exclaves_ctl_trap(host, CtlOp.ENDPOINT_CALL, identifier=3, name=0x1003, buffer=bytes(size), size=size)
    with pytest.raises(InvalidArgument):
        ex.exclaves_ctl_trap(host, CtlOp.ENDPOINT_CALL, identifier=3, buffer=bytes(8), size=8)
    with pytest.raises(InvalidArgument):
        ex.exclaves_ctl_trap(host, CtlOp.ENDPOINT_CALL, identifier=0, buffer=bytes(size), size=size)
    buf = bytearray(size)
    buf[0] = 1
    r = ex.exclaves_ctl_trap(host, CtlOp.ENDPOINT_CALL, identifier=3, buffer=bytes(buf), size=size)
    assert r.error == 0 and r.tag.mr_count == 1 and r.tag.label & 1 and len(r.buffer) == size


def test_service_fallback():
    w = World(WorldConfig(service_fallback=True))
    w.boot()
    host = w.task(100, ["conclave-host"])
    mgr = w.exclaves.conclave_manager(CONCLAVE)
    w.exclaves.conclave_attach(host, w.tasks[1], mgr)
    w.exclaves.conclave_transition(mgr, "launch")
    size = w.proxy.buffer_size
    assert w.exclaves.exclaves_ctl_trap(host, CtlOp.ENDPOINT_CALL, identifier=0,
                                        buffer=bytes(size), size=size).error == 0


@given(st.lists(st.sampled_from(["launch", "suspend", "resume", "stop"]), max_size=12))
def test_lifecycle_follows_edges(reqs):
    ex = Exclaves(None)
    mgr = ExclaveResource("m", ResourceKind.CONCLAVE_MANAGER, 0x100, K, payload=ConclaveRecord(ConclaveState.ATTACHED))
    for r in reqs:
        before = mgr.payload.state
        try:
            ex.conclave_transition(mgr, r)
            assert CONCLAVE_EDGES[before, r] == mgr.payload.state
        except IllegalTransition:
            assert (before, r) not in CONCLAVE_EDGES and mgr.payload.state == before
        assert mgr.payload.request == ConclaveRequest.NONE
