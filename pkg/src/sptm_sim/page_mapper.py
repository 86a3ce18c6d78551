"""Page-mapping policy: which frames XNU may map, from which table types."""
from dataclasses import dataclass, field

from . import tables
from .core_model import Domain, PteBits, sprr_index_from_pte
from .errors import (DataError, FrameTypeNotMappable, InvalidTableType,
                     SprrIndexDenied, TableMapDenied)
from .frame_table import NONE, FrameType, parse_type, sprr_index_for_type
from .trace import Trace

ALL_CODES = frozenset(FrameType(t) for t in range(64))


def clear_bits(mask, width=64):
    return frozenset(t for t in range(width) if not mask >> t & 1)


def set_bits(mask, width=64):
    return frozenset(t for t in range(width) if mask >> t & 1)


@dataclass(frozen=True)
class XnuMappableMask:
    raw: int

    @property
    def mappable_set(self):
        return frozenset(FrameType(t) for t in clear_bits(self.raw))

XNU_MAPPABLE = XnuMappableMask(int(tables.load("xnu_mappable")[0]["mask"], 0))


@dataclass(frozen=True)
class TableMapRule:
    table_type: FrameType
    allowed_frame_types: frozenset
    mask: int
    mask_drift: bool        # recovered mask disagrees with the named list


def load_table_rules(rows=None):
    """Named lists are authoritative; masks must agree unless flagged as drift."""
    rules = {}
    for r in rows if rows is not None else tables.load("table_maps"):
        t = parse_type(r["table_type"])
        if r["allowed"] == "ALL":
            allowed = ALL_CODES
        else:
            allowed = frozenset(parse_type(n) for n in tables.names(r["allowed"]))
        mask = int(r["mask"], 0)
        drift = r["mask_drift"] == "yes"
        agrees = set_bits(mask) == {int(a) for a in allowed}
        if not drift and not agrees:
            raise DataError(f"table_maps: {t.name} mask {mask:#x} disagrees with its named list")
        if drift and agrees:
            raise DataError(f"table_maps: {t.name} flagged as drift but mask agrees")
        rules[t] = TableMapRule(t, allowed, mask, drift)
    return rules

TABLE_RULES = load_table_rules()
VALID_TABLE_TYPES = frozenset(TABLE_RULES)


def drift_rows(rules=TABLE_RULES):
    return sorted(t for t, r in rules.items() if r.mask_drift)


def xnu_mappable_set():
    return XNU_MAPPABLE.mappable_set


def table_map_set(table_type, rules=TABLE_RULES):
    rule = rules.get(table_type)
    if rule is None:
        raise InvalidTableType(f"{int(table_type)} is not a table type")
    return rule.allowed_frame_types


@dataclass
class Mapping:
    ttep: int
    va: int
    frame: int
    pte: PteBits


@dataclass
class PageTableModel:
    root_frame: int
    table_frames: list = field(default_factory=list)
    mappings: list = field(default_factory=list)


@dataclass
class MapperConfig:
    relax_sprr: bool = False    # check 4 only warns


class PageMapper:
    def __init__(self, config=None, rules=TABLE_RULES, trace=None):
        self.config = config or MapperConfig()
        self.rules = rules
        self.trace = trace if trace is not None else Trace()

    def map_page(self, table_handle, frame_table, ttep, va, target_frame, pte, caller=Domain.XNU):
        target_type = frame_table.frame_type_of(target_frame)
        table_type = frame_table.frame_type_of(ttep)
        # the mappable mask is only recovered on the XNU path
        if Domain(caller) == Domain.XNU and target_type not in XNU_MAPPABLE.mappable_set:
            raise FrameTypeNotMappable(f"{target_type.name} is not XNU-mappable")
        rule = self.rules.get(table_type)
        if rule is None:
            raise InvalidTableType(f"frame {ttep} is {table_type.name}, not a table")
        if target_type not in rule.allowed_frame_types:
            raise TableMapDenied(f"{target_type.name} may not be mapped from {table_type.name}")
        want = sprr_index_for_type(target_type)
        got = sprr_index_from_pte(pte)
        # types without an SPRR index carry no recovered constraint
        if want != NONE and got != want:
            if not self.config.relax_sprr:
                raise SprrIndexDenied(f"PTE index {got:#x}, {target_type.name} needs {want:#x}")
            self.trace.emit("SPTM", "sprr_warning", frame=target_frame, pte_index=got, expected=want)
        m = Mapping(ttep, va, target_frame, pte)
        if ttep != table_handle.root_frame and ttep not in table_handle.table_frames:
            table_handle.table_frames.append(ttep)
        table_handle.mappings.append(m)
        self.trace.emit("SPTM", "map_page", ttep=ttep, va=va, frame=target_frame, type=target_type,
                        sprr=got)
        return m


def map_page(table_handle, frame_table, ttep, va, target_frame, pte, caller=Domain.XNU, config=None):
    return PageMapper(config).map_page(table_handle, frame_table, ttep, va, target_frame, pte, caller)
