"""SPTM endpoint code bound to the bootstrap and IOMMU dispatch tables."""
from .core_model import XnuEndpoint
from .dispatcher import (Dispatcher, DispatchRegistration, MonitorState,
                         bootstrap_registrations)
from .errors import EndpointUnknown
from .frame_table import FrameTable, FrameType
from .page_mapper import PageMapper, PageTableModel
from .trace import Trace

NOT_RECOVERED = "NotRecovered"

TXM_RX_SWEEP, TXM_REGISTER, TXM_RETYPE, TXM_UNKNOWN = 1, 2, 3, 4
SK_REGISTER, SK_RETYPE, SK_GET_FRAME_TYPE, SK_UNKNOWN = 0, 1, 2, 3


class Sptm:
    """Frame table, mapper and dispatcher with SPTM's own endpoints bound."""

    def __init__(self, frame_count=64, trace=None, mapper_config=None):
        self.trace = trace if trace is not None else Trace()
        self.frames = FrameTable(frame_count, trace=self.trace)
        self.mapper = PageMapper(mapper_config, trace=self.trace)
        self.dispatcher = Dispatcher(trace=self.trace)
        self.monitor = MonitorState()
        self.page_tables = {}
        d = self.dispatcher
        d.bind("sptm_xnu_bootstrap", self._xnu_bootstrap)
        d.bind("sptm_txm_bootstrap", self._txm_bootstrap)
        d.bind("sptm_sk_bootstrap", self._sk_bootstrap)
        d.bind("sptm_hib", self._stub)

    def register_boot_tables(self, hibernation=False):
        keys = bootstrap_registrations(self.dispatcher, hibernation)
        for reg in self.dispatcher.core.values():
            if reg.entry_marker not in self.dispatcher.handlers:
                self.dispatcher.bind(reg.entry_marker, self._stub)
        return keys

    def _stub(self, outcome, *args):
        self.trace.emit(outcome.caller_domain, "endpoint_stub", target=str(outcome.target))
        return 0

    def _register(self, outcome, table_id, marker, permissions):
        reg = DispatchRegistration(table_id, marker, permissions)
        return self.dispatcher.register_dispatch_table(reg, outcome.caller_domain)

    def _retype(self, outcome, frame, previous_type, new_type, params=None):
        return self.frames.retype(outcome.caller_domain, frame, previous_type, new_type, params)

    def page_table(self, root_frame):
        if root_frame not in self.page_tables:
            self.page_tables[root_frame] = PageTableModel(root_frame)
        return self.page_tables[root_frame]

    def _xnu_bootstrap(self, outcome, *args):
        ep = outcome.target.endpoint
        if ep == XnuEndpoint.RETYPE:
            return self._retype(outcome, *args)
        if ep == XnuEndpoint.MAP_PAGE:
            ttep, va, frame, pte = args
            return self.mapper.map_page(self.page_table(ttep), self.frames, ttep, va, frame, pte,
                                        caller=outcome.caller_domain)
        if ep <= max(XnuEndpoint):
            self.trace.emit(outcome.caller_domain, "endpoint_stub", endpoint=XnuEndpoint(ep).name)
            return 0
        raise EndpointUnknown(f"XNU_BOOTSTRAP endpoint {ep:#x}")

    def _txm_bootstrap(self, outcome, *args):
        ep = outcome.target.endpoint
        if ep == TXM_RX_SWEEP:
            frames, new_type = args[0], args[1] if len(args) > 1 else FrameType.TXM_RW
            for f in frames:
                self.frames.retype(outcome.caller_domain, f, self.frames.frame_type_of(f), new_type)
            return len(frames)
        if ep == TXM_REGISTER:
            return self._register(outcome, *args)
        if ep == TXM_RETYPE:
            return self._retype(outcome, *args)
        if ep == TXM_UNKNOWN:
            self.trace.emit(outcome.caller_domain, "endpoint_stub", NOT_RECOVERED, target=str(outcome.target))
            return NOT_RECOVERED
        raise EndpointUnknown(f"TXM_BOOTSTRAP endpoint {ep:#x}")

    def _sk_bootstrap(self, outcome, *args):
        ep = outcome.target.endpoint
        if ep == SK_REGISTER:
            return self._register(outcome, *args)
        if ep == SK_RETYPE:
            return self._retype(outcome, *args)
        if ep == SK_GET_FRAME_TYPE:
            return self.frames.frame_type_of(args[0])
        if ep == SK_UNKNOWN:
            self.trace.emit(outcome.caller_domain, "endpoint_stub", NOT_RECOVERED, target=str(outcome.target))
            return NOT_RECOVERED
        raise EndpointUnknown(f"SK_BOOTSTRAP endpoint {ep:#x}")
