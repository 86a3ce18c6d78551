"""Physical frame table and the retype pipeline."""
from dataclasses import dataclass, field
from enum import IntEnum

from . import tables
from .core_model import Domain
from .errors import (CallerDomainDenied, DataError, FrameBusy, InvalidNewType,
                     PreviousTypeMismatch, TransitionDenied, UnmanagedFrame)
from .trace import Trace


class FrameType(IntEnum):
    SPTM_UNTYPED = 0
    SPTM_UNUSED = 1
    SPTM_DEFAULT = 2
    SPTM_RO = 3
    SPTM_CODE = 4
    SPTM_TXM_CODE = 5
    SPTM_XNU_CODE = 6
    SPTM_XNU_CODE_DBG_RW = 7
    SPTM_KERNEL_ROOT_TABLE = 8
    SPTM_PAGE_TABLE = 9
    SPTM_IOMMU_BOOTSTRAP = 10
    XNU_DEFAULT = 11
    XNU_RO = 12
    XNU_RO_DBG_RW = 13
    XNU_USER_EXEC = 14
    XNU_USER_DEBUG = 15
    XNU_USER_JIT = 16
    XNU_USER_ROOT_TABLE = 17
    XNU_SHARED_ROOT_TABLE = 18
    XNU_PAGE_TABLE = 19
    XNU_PAGE_TABLE_SHARED = 20
    XNU_PAGE_TABLE_ROZONE = 21
    XNU_PAGE_TABLE_COMMPAGE = 22
    XNU_IOMMU = 23
    XNU_ROZONE = 24
    XNU_IO = 25
    XNU_PROTECTED_IO = 26
    XNU_COMMPAGE_RW = 27
    XNU_COMMPAGE_RO = 28
    XNU_COMMPAGE_RX = 29
    XNU_TAG_STORAGE = 30
    XNU_STAGE2_ROOT_TABLE = 31
    XNU_STAGE2_PAGE_TABLE = 32
    XNU_KERNEL_RESTRICTED = 33
    XNU_RESERVED_1 = 34
    XNU_RESERVED_2 = 35
    XNU_RESTRICTED_IO = 36
    XNU_RESTRICTED_IO_TELEMETRY = 37
    TXM_DEFAULT = 38
    TXM_RO = 39
    TXM_RW = 40
    TXM_CPU_STACK = 41
    TXM_THREAD_STACK = 42
    TXM_ADDRESS_SPACE_TABLE = 43
    TXM_MALLOC_PAGE = 44
    TXM_FREE_LIST = 45
    TXM_SLAB_TRUST_CACHE = 46
    TXM_SLAB_PROFILE = 47
    TXM_SLAB_CODE_SIGNATURE = 48
    TXM_SLAB_CODE_REGION = 49
    TXM_SLAB_ADDRESS_SPACE = 50
    TXM_BUCKET_1024 = 51
    TXM_BUCKET_2048 = 52
    TXM_BUCKET_4096 = 53
    TXM_BUCKET_8192 = 54
    TXM_BULK_DATA = 55
    TXM_BULK_DATA_READ_ONLY = 56
    TXM_LOG = 57
    TXM_SEP_SECURE_CHANNEL = 58
    SK_DEFAULT = 59
    SK_SHARED_RO = 60
    SK_SHARED_RW = 61
    SK_IO = 62
    UNKNOWN_TYPE = 63       # mask sentinel, never assignable

MAX_FRAME_TYPE = 62
NUM_FRAME_TYPES = 63
NONE = 0xFF                 # "no SPRR index" marker
REAL_TYPES = tuple(FrameType(t) for t in range(NUM_FRAME_TYPES))


def parse_type(name):
    if isinstance(name, int):
        return FrameType(name)
    try:
        return FrameType[name]
    except KeyError:
        try:
            return FrameType(int(name, 0))
        except ValueError:
            raise DataError(f"unknown frame type {name!r}") from None


@dataclass(frozen=True)
class CallerDomainRule:
    frame_type: FrameType
    allowed_domain: Domain
    retype_flag: int


@dataclass(frozen=True)
class TypeHooks:
    type_out: str = None
    type_in: str = None


@dataclass
class FrameTableEntry:
    frame_index: int
    frame_type: FrameType = FrameType.SPTM_UNTYPED
    in_use: bool = False
    sprr_index: int = NONE


class RetypeRules:
    """The four per-type tables the retype path consults."""

    def __init__(self, caller_rules, masks, hooks, sprr):
        self.caller_rules = caller_rules    # FrameType -> CallerDomainRule
        self.masks = masks                  # FrameType -> int bit set over new types
        self.hooks = hooks                  # FrameType -> TypeHooks
        self.sprr = sprr                    # FrameType -> 4-bit index or NONE

    @classmethod
    def load(cls):
        caller = {}
        for r in tables.load("caller_domains"):
            t = parse_type(r["type"])
            caller[t] = CallerDomainRule(t, Domain[r["allowed_domain"]], int(r["retype_flag"]))
        masks = {}
        for r in tables.load("retype_transitions"):
            bits = 0
            for n in tables.names(r["allowed"]):
                bits |= 1 << parse_type(n)
            masks[parse_type(r["from"])] = bits
        hooks = {}
        for r in tables.load("type_hooks"):
            out, inn = r["type_out"], r["type_in"]
            hooks[parse_type(r["type"])] = TypeHooks(None if out == "-" else out, None if inn == "-" else inn)
        sprr = {parse_type(r["type"]): int(r["sprr_index"], 0) for r in tables.load("sprr_by_type")}
        for name, t in (("caller_domains", caller), ("retype_transitions", masks), ("sprr_by_type", sprr)):
            if set(t) != set(REAL_TYPES):
                raise DataError(f"{name}: expected one row per frame type")
        return cls(caller, masks, hooks, sprr)

RULES = RetypeRules.load()


def sprr_index_for_type(t, rules=RULES):
    return rules.sprr[FrameType(t)]


def allowed_retypes(from_type, rules=RULES):
    bits = rules.masks[FrameType(from_type)]
    return frozenset(FrameType(t) for t in range(NUM_FRAME_TYPES) if bits >> t & 1)


class FrameTable:
    """Single-owner store of frame entries. ``observers`` see every hook event."""

    def __init__(self, frame_count, rules=RULES, trace=None):
        if frame_count < 1:
            raise ValueError("frame_count must be positive")
        self.rules = rules
        self.trace = trace if trace is not None else Trace()
        self.observers = []
        untyped_index = rules.sprr[FrameType.SPTM_UNTYPED]
        self.entries = [FrameTableEntry(i, FrameType.SPTM_UNTYPED, False, untyped_index)
                        for i in range(frame_count)]

    def __len__(self):
        return len(self.entries)

    def entry(self, frame_index):
        if not 0 <= frame_index < len(self.entries):
            raise UnmanagedFrame(f"frame {frame_index} outside 0..{len(self.entries) - 1}")
        return self.entries[frame_index]

    def frame_type_of(self, frame_index):
        return self.entry(frame_index).frame_type

    def _hook(self, phase, label, entry, new_type):
        self.trace.emit("SPTM", phase, hook=label, frame=entry.frame_index, new_type=new_type)
        for fn in self.observers:
            fn(phase, label, entry, new_type)

    def retype(self, caller, frame_index, previous_type, new_type, params=None):
        entry = self.entry(frame_index)
        if not 0 <= int(new_type) <= MAX_FRAME_TYPE:
            raise InvalidNewType(f"new type {int(new_type)} > {MAX_FRAME_TYPE}")
        new_type = FrameType(new_type)
        if entry.in_use:
            raise FrameBusy(f"frame {frame_index} already in use")
        entry.in_use = True
        try:
            current = entry.frame_type
            rules = self.rules
            if current != FrameType.SPTM_UNTYPED:
                owner = rules.caller_rules[current].allowed_domain
                if Domain(caller) != owner:
                    raise CallerDomainDenied(f"{current.name} is retyped by {owner.name}, not {Domain(caller).name}")
            # checked even for UNTYPED frames, where it is trivially satisfiable
            if int(previous_type) != current:
                raise PreviousTypeMismatch(f"frame {frame_index} is {current.name}, caller said {int(previous_type)}")
            if not rules.masks[current] >> new_type & 1:
                raise TransitionDenied(f"{current.name} -> {new_type.name}")
            hooks = rules.hooks.get(current)
            if hooks and hooks.type_out:
                self._hook("retype_out", hooks.type_out, entry, new_type)
            self.trace.emit("SPTM", "retype_flag", frame=frame_index,
                            flag=rules.caller_rules[current].retype_flag)
            hooks = rules.hooks.get(new_type)
            if hooks and hooks.type_in:
                self._hook("retype_in", hooks.type_in, entry, new_type)
            entry.frame_type = new_type
            entry.sprr_index = rules.sprr[new_type]
        finally:
            entry.in_use = False
        return entry


def init_frame_table(frame_count, rules=RULES, trace=None):
    return FrameTable(frame_count, rules, trace)


def retype(table, caller, frame_index, previous_type, new_type, params=None):
    return table.retype(caller, frame_index, previous_type, new_type, params)


def frame_type_of(table, frame_index):
    return table.frame_type_of(frame_index)
