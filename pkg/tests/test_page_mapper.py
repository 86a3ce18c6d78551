import pytest
from hypothesis import given, strategies as st

import oracle
from sptm_sim.core_model import Domain, PteBits, pte_for_index
from sptm_sim.errors import (DataError, FrameTypeNotMappable, InvalidTableType,
                             SprrIndexDenied, TableMapDenied)
from sptm_sim.frame_table import NONE, FrameType, REAL_TYPES, init_frame_table, sprr_index_for_type
from sptm_sim.page_mapper import (ALL_CODES, MapperConfig, PageMapper, PageTableModel,
                                  TABLE_RULES, VALID_TABLE_TYPES, load_table_rules,
                                  table_map_set, xnu_mappable_set)
from sptm_sim.trace import Trace

T = FrameType


def _frames(*types):
    ft = init_frame_table(len(types))
    for i, t in enumerate(types):
        if t != T.SPTM_UNTYPED:
            ft.retype(Domain.SPTM, i, T.SPTM_UNTYPED, t)
    return ft


def _pte(t):
    idx = sprr_index_for_type(t)
    return pte_for_index(0 if idx == NONE else idx)


def _map(table_type, target_type, pte=None, caller=Domain.XNU, config=None):
    ft = _frames(table_type, target_type)
    m = PageMapper(config)
    return m.map_page(PageTableModel(0), ft, 0, 0x4000, 1, pte or _pte(target_type), caller)


def test_mappable_set():
    s = xnu_mappable_set()
    assert len(s) == 20
    assert T.XNU_USER_JIT in s and T.XNU_PAGE_TABLE not in s
    assert {T.SK_SHARED_RO, T.SK_SHARED_RW} <= s
    assert not any("ROOT_TABLE" in t.name or "PAGE_TABLE" in t.name for t in s)


def test_table_map_set_examples():
    assert table_map_set(T.SPTM_PAGE_TABLE) == ALL_CODES and len(ALL_CODES) == 64
    assert table_map_set(T.XNU_STAGE2_ROOT_TABLE) == set()
    assert table_map_set(T.XNU_PAGE_TABLE_ROZONE) == {T.XNU_PAGE_TABLE_ROZONE, T.XNU_ROZONE}
    with pytest.raises(InvalidTableType):
        table_map_set(T.XNU_DEFAULT)


def test_valid_tables_match_data():
    assert {int(t) for t in VALID_TABLE_TYPES} == set(oracle.table_maps())


def test_map_examples():
    assert _map(T.XNU_PAGE_TABLE, T.XNU_DEFAULT).frame == 1
    with pytest.raises(FrameTypeNotMappable):
        _map(T.XNU_PAGE_TABLE, T.SPTM_DEFAULT)
    _map(T.SPTM_KERNEL_ROOT_TABLE, T.XNU_PAGE_TABLE, pte=_pte(T.XNU_PAGE_TABLE), caller=Domain.SPTM)
    with pytest.raises(TableMapDenied):
        _map(T.SPTM_KERNEL_ROOT_TABLE, T.XNU_DEFAULT)
    _map(T.SPTM_PAGE_TABLE, T.SK_SHARED_RW)


def test_map_error_order():
    with pytest.raises(InvalidTableType):
        _map(T.XNU_DEFAULT, T.XNU_DEFAULT)
    with pytest.raises(SprrIndexDenied):
        _map(T.XNU_PAGE_TABLE, T.XNU_DEFAULT, pte=pte_for_index(0))


def test_relaxed_sprr_warns():
    tr = Trace()
    ft = _frames(T.XNU_PAGE_TABLE, T.XNU_DEFAULT)
    PageMapper(MapperConfig(relax_sprr=True), trace=tr).map_page(
        PageTableModel(0), ft, 0, 0, 1, pte_for_index(0))
    assert [r.operation for r in tr.records] == ["sprr_warning", "map_page"]


def test_mappable_check_only_for_xnu():
    with pytest.raises(FrameTypeNotMappable):
        _map(T.SPTM_PAGE_TABLE, T.SPTM_DEFAULT)
    _map(T.SPTM_PAGE_TABLE, T.SPTM_DEFAULT, caller=Domain.SPTM)


@pytest.mark.parametrize("target", [T.SK_DEFAULT, T.SK_IO])
@pytest.mark.parametrize("table", sorted(TABLE_RULES))
def test_sk_private_frames_never_map_from_xnu(table, target):
    with pytest.raises((FrameTypeNotMappable, TableMapDenied)):
        _map(table, target)


def test_mapping_recorded_in_handle():
    ft = _frames(T.XNU_USER_ROOT_TABLE, T.XNU_PAGE_TABLE, T.XNU_DEFAULT)
    pt = PageTableModel(0)
    m = PageMapper()
    m.map_page(pt, ft, 0, 0, 1, _pte(T.XNU_PAGE_TABLE), caller=Domain.SPTM)
    m.map_page(pt, ft, 1, 0x1000, 2, _pte(T.XNU_DEFAULT))
    assert pt.table_frames == [1] and len(pt.mappings) == 2


def test_loader_rejects_unflagged_mismatch():
    row = {"table_type": "XNU_USER_ROOT_TABLE", "mask": "0x48000",
           "allowed": "XNU_PAGE_TABLE,XNU_PAGE_TABLE_COMMPAGE", "mask_drift": "no"}
    with pytest.raises(DataError):
        load_table_rules([row])
    with pytest.raises(DataError):
        load_table_rules([dict(row, mask="0x480000", mask_drift="yes")])
    assert load_table_rules([dict(row, mask="0x480000")])


@given(st.sampled_from(sorted(TABLE_RULES)), st.sampled_from(list(REAL_TYPES)), st.integers(0, 15))
def test_map_never_retypes(table, target, idx):
    ft = _frames(table, target)
    before = [(e.frame_type, e.sprr_index) for e in ft.entries]
    try:
        PageMapper().map_page(PageTableModel(0), ft, 0, 0, 1, pte_for_index(idx))
    except (FrameTypeNotMappable, InvalidTableType, TableMapDenied, SprrIndexDenied):
        pass
    assert [(e.frame_type, e.sprr_index) for e in ft.entries] == before
