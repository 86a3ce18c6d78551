"""A complete simulated machine: SPTM, TXM, SK, xnuproxy, Tightbeam and exclaves."""
from dataclasses import dataclass
from pathlib import Path

from .exclave_resources import (ENT_CONCLAVE_HOST, ENT_CONCLAVE_SPAWN,
                                ENT_KERNEL_DOMAIN, Exclaves, ExclavesConfig,
                                TaskRecord, default_fixture, read_fixture)
from .page_mapper import MapperConfig
from .secure_kernel import SecureKernel
from .sptm import Sptm
from .tightbeam import Tightbeam
from .trace import Trace
from .txm import Txm, TxmConfig
from .xnuproxy import ThreadExclaveState, XnuProxy

ENTITLEMENT_ALIASES = {
    "kernel-domain": ENT_KERNEL_DOMAIN,
    "conclave-spawn": ENT_CONCLAVE_SPAWN,
    "conclave-host": ENT_CONCLAVE_HOST,
}

LAUNCHD_TASK = 1


@dataclass
class WorldConfig:
    frame_count: int = 64
    hibernation: bool = False
    fixtures: str = None            # directory holding resources.tsv
    strict_firmware: bool = False
    relax_sprr: bool = False
    service_fallback: bool = False


class World:
    def __init__(self, config=None):
        self.config = cfg = config or WorldConfig()
        self.trace = Trace()
        self.sptm = Sptm(cfg.frame_count, self.trace, MapperConfig(relax_sprr=cfg.relax_sprr))
        self.txm = Txm(self.sptm, TxmConfig())
        self.sk = SecureKernel(self.sptm)
        self.proxy = XnuProxy(self._resources(), trace=self.trace, enter=self.sk.enter_from_xnu)
        self.tb = Tightbeam(self.proxy, trace=self.trace)
        self.exclaves = Exclaves(self.proxy, self.tb,
                                 ExclavesConfig(cfg.strict_firmware, cfg.service_fallback), self.trace)
        self.kernel_thread = ThreadExclaveState(0)
        self.tasks = {0: TaskRecord(0, is_kernel=True, thread=self.kernel_thread),
                      LAUNCHD_TASK: TaskRecord(LAUNCHD_TASK, is_launchd=True)}

    def _resources(self):
        if self.config.fixtures:
            return read_fixture(Path(self.config.fixtures) / "resources.tsv")
        return default_fixture()

    @property
    def monitor(self):
        return self.sptm.monitor

    def boot_monitors(self):
        """Bootstrap tables, then TXM and SK registration, then hand off to XNU."""
        self.sptm.register_boot_tables(self.config.hibernation)
        self.txm.boot()
        self.sk.boot()
        self.monitor.handoff()
        self.trace.emit("SPTM", "handoff", state=self.monitor.current_state)

    def boot(self, exclaves=True):
        self.boot_monitors()
        if exclaves:
            self.proxy.boot(self.kernel_thread)
            self.exclaves.resource_init(self.kernel_thread)

    def task(self, task_id, entitlements=(), launchd=False):
        ents = {ENTITLEMENT_ALIASES.get(e, e) for e in entitlements}
        t = self.tasks[task_id] = TaskRecord(task_id, ents, is_launchd=launchd)
        self.trace.emit(f"task:{task_id}", "task_create", entitlements=sorted(ents), launchd=launchd)
        return t
