"""Shared codes, the dispatch-target codec and the SPRR permission model."""
from dataclasses import dataclass
from enum import IntEnum

from . import tables
from .errors import FieldOverflow


class Domain(IntEnum):
    SPTM = 0
    XNU = 1
    TXM = 2
    SK = 3
    XNU_HIB = 4

MAX_DOMAINS = 5


class TableId(IntEnum):
    XNU_BOOTSTRAP = 0
    TXM_BOOTSTRAP = 1
    SK_BOOTSTRAP = 2
    T8110_DART_XNU = 3
    T8110_DART_SK = 4
    SART = 5
    NVME = 6
    UAT = 7
    SHART = 8
    RESERVED = 9
    HIB = 10
    INVALID = 11


class ControlCode(IntEnum):
    RETURN_TO_CALLER = 0xFD
    CONTROL_FE = 0xFE
    CONTROL_FF = 0xFF

CONTROL_CODES = frozenset(int(c) for c in ControlCode)


class XnuEndpoint(IntEnum):
    LOCKDOWN = 0
    RETYPE = 1
    MAP_PAGE = 2
    MAP_TABLE = 3
    UNMAP_TABLE = 4
    UPDATE_REGION = 5
    UPDATE_DISJOINT = 6
    UNMAP_REGION = 7
    UNMAP_DISJOINT = 8
    CONFIGURE_SHAREDREGION = 9
    NEST_REGION = 10
    UNNEST_REGION = 11
    CONFIGURE_ROOT = 12
    SWITCH_ROOT = 13
    REGISTER_CPU = 14
    FIXUPS_COMPLETE = 15
    SIGN_USER_POINTER = 16
    AUTH_USER_POINTER = 17
    REGISTER_EXC_RETURN = 18
    CPU_ID = 19
    SLIDE_REGION = 20
    UPDATE_DISJOINT_MULTIPAGE = 21
    REG_READ = 22
    REG_WRITE = 23
    GUEST_VA_TO_IPA = 24
    GUEST_STAGE1_TLBOP = 25
    GUEST_STAGE2_TLBOP = 26
    GUEST_DISPATCH = 27
    GUEST_EXIT = 28
    MAP_SK_DOMAIN = 29
    HIB_BEGIN = 30
    HIB_VERIFY_HASH_NON_WIRED = 31
    HIB_FINALIZE_NON_WIRED = 32
    IOFILTER_PROTECTED_WRITE = 33


class IommuId(IntEnum):
    SHART = 0
    SART = 1
    NVME = 2
    UAT = 3
    DART_T8020 = 4
    DART_T8110 = 5
    DART_T6000 = 6
    # 7 is registered by firmware but absent from the headers

IOMMU_ID_MAX = 7


def domain_bits(domains):
    out = 0
    for d in domains:
        out |= 1 << int(d)
    return out


def bits_to_domains(bits):
    return frozenset(Domain(d) for d in range(MAX_DOMAINS) if bits >> d & 1)


def domain_name(value):
    try:
        return Domain(value).name
    except ValueError:
        return hex(value)


def table_name(value):
    if value in CONTROL_CODES:
        return ControlCode(value).name
    try:
        return TableId(value).name
    except ValueError:
        return hex(value)


# --- dispatch target -------------------------------------------------------

ENDPOINT_MASK = 0xFFFFFFFF
TABLE_SHIFT = 32
DOMAIN_SHIFT = 48
RESERVED_MASK = (0xFF << 40) | (0xFF << 56)


@dataclass(frozen=True)
class DispatchTarget:
    domain: int
    table: int
    endpoint: int
    reserved: int = 0       # bits 40..47 and 56..63 as found on decode

    @property
    def raw(self):
        return (self.endpoint | self.table << TABLE_SHIFT
                | self.domain << DOMAIN_SHIFT | self.reserved)

    @property
    def is_control(self):
        return self.table in CONTROL_CODES

    def __str__(self):
        # TXM and SK number their own tables, so only SPTM/XNU targets get names
        if self.domain in (Domain.SPTM, Domain.XNU) or self.is_control:
            table = table_name(self.table)
        else:
            table = hex(self.table)
        return f"{domain_name(self.domain)}/{table}/{self.endpoint:#x}"


def encode_dispatch_target(domain, table, endpoint):
    for name, v, width in (("domain", domain, 8), ("table", table, 8), ("endpoint", endpoint, 32)):
        if not 0 <= int(v) < 1 << width:
            raise FieldOverflow(f"{name}={v:#x} exceeds {width} bits")
    return DispatchTarget(int(domain), int(table), int(endpoint))


def decode_dispatch_target(raw):
    """Total decode; nonzero reserved bits are kept in ``reserved``."""
    raw &= (1 << 64) - 1
    return DispatchTarget(domain=raw >> DOMAIN_SHIFT & 0xFF,
                          table=raw >> TABLE_SHIFT & 0xFF,
                          endpoint=raw & ENDPOINT_MASK,
                          reserved=raw & RESERVED_MASK)


# --- SPRR ------------------------------------------------------------------

class Level(IntEnum):
    EL0 = 0
    EL2 = 2
    GL2 = 12


NO_ACCESS = "---"


@dataclass(frozen=True)
class PteBits:
    ap: int
    uxn: int = 0
    pxn: int = 0

    def __post_init__(self):
        if not 0 <= self.ap <= 3 or self.uxn not in (0, 1) or self.pxn not in (0, 1):
            raise FieldOverflow(f"bad PTE bits ap={self.ap} uxn={self.uxn} pxn={self.pxn}")

    @classmethod
    def from_descriptor(cls, desc):
        # AP[2:1] sit at bits 6..7, PXN at 53, UXN at 54
        return cls(ap=desc >> 6 & 3, uxn=desc >> 54 & 1, pxn=desc >> 53 & 1)


def sprr_index_from_pte(bits):
    # ordering: PXN is the top bit, then UXN, then AP[1], AP[0]
    return bits.pxn << 3 | bits.uxn << 2 | bits.ap


def pte_for_index(index):
    return PteBits(ap=index & 3, uxn=index >> 2 & 1, pxn=index >> 3 & 1)


@dataclass(frozen=True)
class SprrPermissionRow:
    index: int
    el0: str
    el2: str
    gl2: str
    usage: str

    def at(self, level):
        return {Level.EL0: self.el0, Level.EL2: self.el2, Level.GL2: self.gl2}[Level(level)]


def load_sprr_permissions(name="sprr_permissions"):
    rows = {}
    for r in tables.load(name):
        row = SprrPermissionRow(int(r["index"], 0), r["el0"], r["el2"], r["gl2"], r["usage"])
        rows[row.index] = row
    return rows

SPRR_PERMISSIONS = load_sprr_permissions()


def resolve_permissions(index, level, table=None):
    row = (SPRR_PERMISSIONS if table is None else table).get(index)
    if row is None:
        return NO_ACCESS
    return row.at(level)
