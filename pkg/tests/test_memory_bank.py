import gc
import tracemalloc
import weakref

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajfuse.geometry import BevIndex, Box3D
from trajfuse.memory_bank import FrameRecord, MemoryBank


def rec(fid, H=4, W=4, C=2):
    return FrameRecord(fid, np.zeros((C, H, W)), np.zeros((C, 2 * H, 2 * W)), [], [])


def test_frame_record_validation():
    with pytest.raises(ValueError):
        FrameRecord(0, np.zeros((2, 4, 4)), np.zeros((2, 8, 8)), [Box3D(0, 0, 0, 1, 1, 1)], [])
    with pytest.raises(ValueError):
        FrameRecord(0, np.zeros((2, 4, 4)), np.zeros((2, 4, 4)), [], [])
    r = FrameRecord(0, np.zeros((2, 4, 4)), np.zeros((2, 8, 8)), [Box3D(0, 0, 0, 1, 1, 1)],
                    [BevIndex(0, 0, 0.5, 0.5)])
    with pytest.raises(ValueError):
        r.F_global[0, 0, 0] = 1.0  # shared payloads are read-only


def test_push_examples():
    bank = MemoryBank(5)
    bank.push(rec(1))
    assert len(bank) == 1
    for f in range(2, 7):
        bank.push(rec(f))
    assert bank.frame_ids() == [2, 3, 4, 5, 6]
    with pytest.raises(ValueError):
        bank.push(rec(3))
    with pytest.raises(ValueError):
        bank.push(rec(6))


def test_window_examples():
    bank = MemoryBank(5)
    with pytest.raises(ValueError):
        bank.window()
    bank.push(rec(1))
    assert [r.frame_id for r in bank.window()] == [1]
    for f in range(2, 6):
        bank.push(rec(f))
    assert [r.frame_id for r in bank.window()] == [1, 2, 3, 4, 5]
    bank.push(rec(6))
    assert [r.frame_id for r in bank.window()] == [2, 3, 4, 5, 6]


def test_window_shares_payloads():
    bank = MemoryBank(3)
    r = rec(0)
    bank.push(r)
    w = bank.window()
    assert w[0] is r
    assert w[0].F_global is r.F_global


def test_capacity_validation():
    with pytest.raises(ValueError):
        MemoryBank(0)


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 8), st.lists(st.integers(1, 3), max_size=40))
def test_fifo_against_list_oracle(n, steps):
    bank, oracle, fid = MemoryBank(n), [], 0
    for s in steps:
        fid += s
        bank.push(rec(fid, 1, 1, 1))
        oracle.append(fid)
        assert bank.frame_ids() == oracle[-n:]
        assert len(bank) <= n


def test_evicted_records_are_released():
    bank = MemoryBank(2)
    refs = []
    for f in range(6):
        r = rec(f, 16, 16, 4)
        refs.append(weakref.ref(r))
        bank.push(r)
        del r
    gc.collect()
    alive = [w() is not None for w in refs]
    assert alive == [False] * 4 + [True, True]


def test_resident_payload_ceiling():
    n, H, W, C = 3, 32, 32, 8
    one = rec(0, H, W, C).nbytes
    bank = MemoryBank(n)
    tracemalloc.start()
    try:
        for f in range(20):
            bank.push(rec(f, H, W, C))
        current, _ = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    # the bank holds n records; allow one record of slack for allocator overhead
    assert current <= (n + 1) * one
    assert sum(r.nbytes for r in bank.window()) == n * one
