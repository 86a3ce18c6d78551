"""Exclave resource registry, conclave lifecycle, ports and the control trap."""
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

from . import tables
from .errors import (AlreadyAttached, CallerNotEntitled, ConclaveNotRunning,
                     DataError, DuplicateResourceId, IllegalTransition,
                     InvalidArgument, InvalidCapability, ManagerOutsideKernel,
                     NotBooted, NotEntitled, NotFound, NotSupported,
                     PortInvalid, PreconditionViolated, TargetNotEntitled,
                     TooManyServices)
from .tightbeam import TransportKind, send_query
from .trace import Trace
from .xnuproxy import ThreadExclaveState, unpack_tag

EXCLAVES_RESOURCE_NAME_MAX = 128
CONCLAVE_SERVICE_MAX = 192
KERNEL_DOMAIN = "com.apple.kernel"

ENT_KERNEL_DOMAIN = "com.apple.private.exclaves.kernel-domain"
ENT_CONCLAVE_SPAWN = "com.apple.private.exclaves.conclave-spawn"
ENT_CONCLAVE_HOST = "com.apple.private.exclaves.conclave-host"

KERN_SUCCESS = 0
MACH_PORT_NULL = 0

SERVICE_ID_BASE = 0             # service ids double as endpoint identifiers, so they stay below 192
OBJECT_ID_BASE = 0x100


class ResourceKind(IntEnum):
    CONCLAVE_MANAGER = 0
    NOTIFICATION = 1
    SERVICE = 2
    NAMED_BUFFER = 3
    ARBITRATED_AUDIO_BUFFER = 4
    SENSOR = 5
    SHARED_MEMORY = 6
    ARBITRATED_AUDIO_MEMORY = 7


class ConclaveState(IntEnum):
    NONE = 0
    ATTACHED = 1
    RUNNING = 2
    STOPPED = 3
    SUSPENDED = 4


class ConclaveRequest(IntEnum):
    NONE = 0
    LAUNCH = 1
    SUSPEND = 2
    STOP = 4


# no request code exists for resume; SUSPEND is reused in both directions
REQUEST_CODES = {"launch": ConclaveRequest.LAUNCH, "suspend": ConclaveRequest.SUSPEND,
                 "resume": ConclaveRequest.SUSPEND, "stop": ConclaveRequest.STOP}
REQUESTS = tuple(REQUEST_CODES)


def load_conclave_edges():
    return {(ConclaveState[r["from"]], r["request"]): ConclaveState[r["to"]]
            for r in tables.load("conclave_edges")}

CONCLAVE_EDGES = load_conclave_edges()


class CtlOp(IntEnum):
    """Control-trap operations handled by the model (own numbering)."""
    ENDPOINT_CALL = 1
    NAMED_BUFFER_CREATE = 2
    AUDIO_BUFFER_CREATE = 3
    SENSOR_CREATE = 4
    NOTIFICATION_RESOURCE_LOOKUP = 5


OP_KINDS = {
    CtlOp.SENSOR_CREATE: ResourceKind.SENSOR,
    CtlOp.AUDIO_BUFFER_CREATE: ResourceKind.ARBITRATED_AUDIO_BUFFER,
    CtlOp.NAMED_BUFFER_CREATE: ResourceKind.NAMED_BUFFER,
    CtlOp.NOTIFICATION_RESOURCE_LOOKUP: ResourceKind.NOTIFICATION,
}


# -- ports --

@dataclass(eq=False)
class Port:
    kobject: object
    srights: int = 0
    nsrequest: bool = False


@dataclass
class PortEntry:
    port: Port
    urefs: int = 1


class IpcSpace:
    """A task's name table. Names are (index << 8) | 3."""
    FIRST_INDEX = 0x10
    GEN_BITS = 3

    def __init__(self, capacity=64):
        self.capacity = capacity
        self.names = {}
        self._next = self.FIRST_INDEX

    def name_of(self, port):
        for name, e in self.names.items():
            if e.port is port:
                return name
        return None

    def copyout_send(self, port):
        name = self.name_of(port)
        if name is not None:
            # the space already holds a send right: merge into it
            self.names[name].urefs += 1
            port.srights -= 1
            return name
        if len(self.names) >= self.capacity:
            port.srights -= 1
            return MACH_PORT_NULL
        name = self._next << 8 | self.GEN_BITS
        self._next += 1
        self.names[name] = PortEntry(port)
        return name


# -- records --

@dataclass
class ConclaveRecord:
    state: ConclaveState = ConclaveState.NONE
    request: ConclaveRequest = ConclaveRequest.NONE
    active_downcall: bool = False
    active_stopcall: bool = False
    active_detach: bool = False
    control_connection: object = None
    task: int = None
    downcall_thread: int = None
    service_bits: set = field(default_factory=set)


@dataclass
class ExclaveResource:
    name: str
    res_type: ResourceKind
    res_id: int
    domain: str
    use_count: int = 0
    port: Port = None
    active: bool = False
    connected: bool = False
    payload: object = None

    def __post_init__(self):
        if len(self.name) > EXCLAVES_RESOURCE_NAME_MAX:
            raise DataError(f"resource name longer than {EXCLAVES_RESOURCE_NAME_MAX}: {self.name[:32]}...")


@dataclass
class TaskRecord:
    task_id: int
    entitlements: set = field(default_factory=set)
    is_launchd: bool = False
    is_kernel: bool = False
    conclave: ExclaveResource = None
    space: IpcSpace = field(default_factory=IpcSpace)
    thread: ThreadExclaveState = None

    def __post_init__(self):
        if self.thread is None:
            self.thread = ThreadExclaveState(self.task_id)


class DomainTable:
    """Root table of domains, each holding resources in registration order."""

    def __init__(self):
        self.root = {}

    def domain(self, name, create=False):
        if name not in self.root:
            if not create:
                raise NotFound(f"no domain {name}")
            self.root[name] = []
        return self.root[name]

    def add(self, res):
        dom = self.domain(res.domain, create=True)
        if any(r.res_id == res.res_id for r in dom):
            raise DuplicateResourceId(f"id {res.res_id:#x} already used in {res.domain}")
        dom.append(res)
        return res

    def find(self, domain, name, kind=None):
        for r in self.root.get(domain, ()):
            if r.name == name and (kind is None or r.res_type == kind):
                return r
        raise NotFound(f"{name} not in {domain}")

    def resources(self):
        for dom in self.root.values():
            yield from dom

    def by_id(self, res_id):
        return [r for r in self.resources() if r.res_id == res_id]


def read_fixture(path):
    """Resource fixture lines: domain<TAB>name<TAB>kind[<TAB>id]."""
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cells = line.split("\t")
        if len(cells) not in (3, 4):
            raise DataError(f"{Path(path).name}:{lineno}: expected 3 or 4 fields")
        rec = (cells[0], cells[1], ResourceKind[cells[2]])
        out.append(rec + ((int(cells[3], 0),) if len(cells) == 4 else ()))
    return out


def default_fixture():
    return read_fixture(tables.data_dir() / "fixtures" / "resources.tsv")


@dataclass
class ExclavesConfig:
    strict_firmware: bool = False   # named-buffer create reports "not supported"
    service_fallback: bool = False  # skip the conclave service-membership check


@dataclass
class TrapResult:
    kr: int = KERN_SUCCESS
    port_name: int = None
    buffer: bytes = None
    tag: object = None
    error: int = None


class Exclaves:
    """Kernel-side exclaves state: resource table, conclaves and the control trap."""

    def __init__(self, xnuproxy, tightbeam=None, config=None, trace=None):
        self.proxy = xnuproxy
        self.tb = tightbeam
        self.config = config or ExclavesConfig()
        self.trace = trace if trace is not None else Trace()
        self.table = DomainTable()
        self.booted = False
        self.service_connections = {}

    # -- boot-time enumeration --

    def resource_init(self, thread=None):
        thread = thread or ThreadExclaveState(0)
        next_service, next_object = SERVICE_ID_BASE, OBJECT_ID_BASE
        index = 0
        while True:
            rec = self.proxy.resource_info(thread, index)
            if rec is None:
                break
            index += 1
            domain, name, kind = rec[:3]
            if kind == ResourceKind.SERVICE:
                if domain != KERNEL_DOMAIN:
                    count = sum(r.res_type == ResourceKind.SERVICE for r in self.table.root.get(domain, ()))
                    if count >= CONCLAVE_SERVICE_MAX:
                        raise TooManyServices(f"{domain} exceeds {CONCLAVE_SERVICE_MAX} services")
                res_id, next_service = (rec[3] if len(rec) > 3 else next_service), next_service + 1
            else:
                res_id, next_object = (rec[3] if len(rec) > 3 else next_object), next_object + 1
            res = self.table.add(ExclaveResource(name, ResourceKind(kind), res_id, domain))
            self._init_kind(res)
        for res in self.table.resources():
            if res.res_type == ResourceKind.CONCLAVE_MANAGER:
                conclave = res.payload
                conclave.service_bits = {r.res_id for r in self.table.root.get(res.name, ())
                                         if r.res_type == ResourceKind.SERVICE}
            res.port = Port(res)
        self.booted = True
        report = {d: len(rs) for d, rs in self.table.root.items()}
        self.trace.emit("XNU", "resource_init", resources=index, domains=len(report))
        return report

    def _init_kind(self, res):
        if res.res_type == ResourceKind.SERVICE:
            self.proxy.register_service(res.res_id)
        elif res.res_type == ResourceKind.NOTIFICATION:
            res.payload = []
        elif res.res_type == ResourceKind.CONCLAVE_MANAGER:
            if res.domain != KERNEL_DOMAIN:
                raise ManagerOutsideKernel(f"conclave manager {res.name} sits in {res.domain}")
            res.payload = ConclaveRecord()
            self.proxy.register_service(res.res_id)
            if self.tb is not None:
                ep = self.tb.endpoint_create(TransportKind.XNU, res.res_id)
                res.payload.control_connection = self.tb.connection_create_with_endpoint(ep)

    def lookup_service(self, domain, name):
        return self.table.find(domain, name, ResourceKind.SERVICE).res_id

    def conclave_manager(self, name):
        return self.table.find(KERNEL_DOMAIN, name, ResourceKind.CONCLAVE_MANAGER)

    # -- conclave lifecycle --

    def conclave_attach(self, task, caller, manager):
        if not isinstance(manager.payload, ConclaveRecord):
            raise PreconditionViolated(f"{manager.name} is not a conclave manager")
        conclave = manager.payload
        try:
            if not (caller.is_launchd or ENT_CONCLAVE_SPAWN in caller.entitlements):
                raise CallerNotEntitled(f"task {caller.task_id} may not attach conclaves")
            if not ({ENT_CONCLAVE_HOST, ENT_CONCLAVE_SPAWN} & task.entitlements):
                raise TargetNotEntitled(f"task {task.task_id} may not host a conclave")
            if conclave.state != ConclaveState.NONE or task.conclave is not None:
                raise AlreadyAttached(f"{manager.name} or task {task.task_id} already attached")
        except (CallerNotEntitled, TargetNotEntitled, AlreadyAttached) as e:
            self.trace.emit(f"task:{caller.task_id}", "conclave_attach", e.status,
                            task=task.task_id, conclave=manager.name)
            raise
        conclave.task, conclave.state = task.task_id, ConclaveState.ATTACHED
        task.conclave = manager
        self.trace.emit(f"task:{caller.task_id}", "conclave_attach", task=task.task_id,
                        conclave=manager.name, state=conclave.state)
        return conclave

    def conclave_transition(self, manager, request):
        conclave = manager.payload
        new = CONCLAVE_EDGES.get((conclave.state, request))
        if new is None:
            self.trace.emit("XNU", "conclave_transition", "IllegalTransition",
                            conclave=manager.name, state=conclave.state, request=request)
            raise IllegalTransition(f"{conclave.state.name} + {request}")
        before = conclave.state
        conclave.request = REQUEST_CODES[request]
        conclave.state = new
        if new == ConclaveState.STOPPED and conclave.control_connection is not None:
            self.tb.connection_close(conclave.control_connection)
        self.trace.emit("XNU", "conclave_transition", conclave=manager.name, request=request,
                        code=conclave.request, state=before, next=new)
        conclave.request = ConclaveRequest.NONE
        return conclave

    def _require_running(self, task):
        if task.conclave is None:
            return
        st = task.conclave.payload.state
        if st != ConclaveState.RUNNING:
            raise ConclaveNotRunning(f"conclave {task.conclave.name} is {st.name}")

    # -- ports --

    def create_port_name(self, resource, space):
        if resource.use_count <= 0:
            raise PreconditionViolated(f"{resource.name} has no use count")
        port = resource.port
        port.srights += 1
        port.nsrequest = True
        if port.srights > 1:
            # the port already carries a use count for its send right
            resource.use_count -= 1
        name = space.copyout_send(port)
        if name == MACH_PORT_NULL:
            raise PortInvalid(f"copyout of {resource.name} failed")
        return name

    # -- control trap --

    def _task_domain(self, task):
        return task.conclave.name if task.conclave is not None else KERNEL_DOMAIN

    def _has_service(self, task, identifier):
        if task.conclave is not None:
            return identifier in task.conclave.payload.service_bits
        return any(r.res_id == identifier for r in self.table.root.get(KERNEL_DOMAIN, ())
                   if r.res_type == ResourceKind.SERVICE)

    def exclaves_ctl_trap(self, task, op, identifier=0, name=MACH_PORT_NULL, buffer=None, size=None,
                          resource_name=None):
        op = CtlOp(op)
        actor = f"task:{task.task_id}"
        try:
            result = self._trap(task, op, identifier, name, buffer, size, resource_name)
        except (NotBooted, NotEntitled, InvalidArgument, InvalidCapability, NotFound,
                NotSupported, PortInvalid, ConclaveNotRunning, PreconditionViolated) as e:
            self.trace.emit(actor, "exclaves_ctl_trap", e.status, op=op, identifier=identifier,
                            resource=resource_name)
            raise
        detail = dict(op=op, identifier=identifier, resource=resource_name)
        if result.port_name is not None:
            detail["port"] = result.port_name
        self.trace.emit(actor, "exclaves_ctl_trap", **detail)
        return result

    def _trap(self, task, op, identifier, name, buffer, size, resource_name):
        if not self.booted:
            raise NotBooted("exclaves not booted")
        if not (task.is_kernel or ENT_KERNEL_DOMAIN in task.entitlements or task.conclave is not None):
            raise NotEntitled(f"task {task.task_id} has neither kernel-domain access nor a conclave")
        if op == CtlOp.ENDPOINT_CALL:
            return self._endpoint_call(task, identifier, name, buffer, size)
        if op == CtlOp.NAMED_BUFFER_CREATE and self.config.strict_firmware:
            raise NotSupported("(os/kern) service not supported")
        res = self.table.find(self._task_domain(task), resource_name, OP_KINDS[op])
        res.use_count += 1
        return TrapResult(port_name=self.create_port_name(res, task.space))

    def _endpoint_call(self, task, identifier, name, buffer, size):
        if name != MACH_PORT_NULL:
            raise InvalidCapability("only MACH_PORT_NULL is accepted")
        bsize = self.proxy.buffer_size
        if buffer is None or not size or size != bsize or len(buffer) != size:
            raise InvalidArgument(f"buffer size must be {bsize}")
        thread = task.thread
        if thread.ipc_buffer is None:
            self.proxy.allocate_ipc_buffer(thread)
        ipcb = thread.ipc_buffer
        ipcb.load_bytes(buffer)
        if identifier >= CONCLAVE_SERVICE_MAX:
            raise InvalidArgument(f"identifier {identifier} >= {CONCLAVE_SERVICE_MAX}")
        if not self.config.service_fallback and not self._has_service(task, identifier):
            raise InvalidArgument(f"service {identifier} not in the task's conclave")
        self._require_running(task)
        tag, err = self.proxy.endpoint_call(thread, identifier, unpack_tag(ipcb.mr[0]))
        return TrapResult(buffer=ipcb.to_bytes(), tag=tag, error=err)

    # -- tightbeam calls into a conclave service --

    def tightbeam_query(self, task, service_name, payload, selector=0, want_reply=True):
        domain = self._task_domain(task)
        res_id = self.lookup_service(domain, service_name)
        try:
            self._require_running(task)
        except ConclaveNotRunning as e:
            self.trace.emit(f"task:{task.task_id}", "tightbeam_query", e.status, service=service_name)
            raise
        conn = self.service_connections.get(res_id)
        if conn is None:
            ep = self.tb.endpoint_create(TransportKind.XNU, res_id)
            conn = self.service_connections[res_id] = self.tb.connection_create_with_endpoint(ep)
        return send_query(self.tb, conn, payload, selector, want_reply, task.thread)
