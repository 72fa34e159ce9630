"""Sparse counted-file format tests: round trips, refusals, merging."""

import numpy as np
import pytest

from stream4d.sparse import (
    FULL_MASK, SparseFormatError, SparseFrame, SparseScan, merge_sparse,
    read_sparse, write_sparse,
)


def ev(*indices):
    return np.asarray(indices, dtype=np.uint32)


def make_scan(frames, scan_number=1, rows=2, cols=2):
    return SparseScan(scan_number=scan_number, scan_rows=rows, scan_cols=cols,
                      frame_rows=8, frame_cols=8, background_threshold=120.0,
                      xray_threshold=150.0, frames=frames)


class TestRoundTrip:
    def test_basic(self, tmp_path):
        scan = make_scan([SparseFrame(0, FULL_MASK, ev(3, 9, 40)),
                          SparseFrame(1, FULL_MASK, ev()),
                          SparseFrame(2, 0x7, ev(63)),
                          SparseFrame(3, 0, ev())])
        path = write_sparse(tmp_path / "a.s4dc", scan)
        back = read_sparse(path)
        assert back.frames == scan.frames
        assert back.scan_number == 1
        assert back.background_threshold == 120.0
        assert back.xray_threshold == 150.0
        assert back.n_events == 4

    def test_frames_sorted_on_write(self, tmp_path):
        scan = make_scan([SparseFrame(3, FULL_MASK, ev()),
                          SparseFrame(0, FULL_MASK, ev(1)),
                          SparseFrame(1, FULL_MASK, ev()),
                          SparseFrame(2, FULL_MASK, ev())])
        back = read_sparse(write_sparse(tmp_path / "b.s4dc", scan))
        assert [f.frame_number for f in back.frames] == [0, 1, 2, 3]

    def test_empty_scan(self, tmp_path):
        back = read_sparse(write_sparse(tmp_path / "c.s4dc", make_scan([])))
        assert back.frames == [] and back.n_events == 0

    def test_write_is_deterministic(self, tmp_path):
        scan = make_scan([SparseFrame(i, FULL_MASK, ev(i)) for i in range(4)])
        a = write_sparse(tmp_path / "x.s4dc", scan)
        b = write_sparse(tmp_path / "y.s4dc", scan)
        assert a.read_bytes() == b.read_bytes()


class TestRefusals:
    def test_duplicate_frame(self, tmp_path):
        scan = make_scan([SparseFrame(0, FULL_MASK, ev()),
                          SparseFrame(0, FULL_MASK, ev())])
        with pytest.raises(SparseFormatError, match="duplicate"):
            write_sparse(tmp_path / "d.s4dc", scan)

    def test_non_ascending_events(self, tmp_path):
        scan = make_scan([SparseFrame(0, FULL_MASK, ev(9, 3))])
        with pytest.raises(SparseFormatError, match="ascending"):
            write_sparse(tmp_path / "e.s4dc", scan)

    def test_out_of_range_event(self, tmp_path):
        scan = make_scan([SparseFrame(0, FULL_MASK, ev(64))])
        with pytest.raises(SparseFormatError):
            write_sparse(tmp_path / "f.s4dc", scan)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "g.s4dc"
        path.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(SparseFormatError, match="magic"):
            read_sparse(path)

    def test_trailing_bytes(self, tmp_path):
        path = write_sparse(tmp_path / "h.s4dc", make_scan([]))
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(SparseFormatError, match="trailing"):
            read_sparse(path)


class TestMerge:
    def test_two_group_partition(self, tmp_path):
        even = make_scan([SparseFrame(f, FULL_MASK, ev(f))
                          for f in (0, 2)])
        odd = make_scan([SparseFrame(f, FULL_MASK, ev(f))
                         for f in (1, 3)])
        a = write_sparse(tmp_path / "even.s4dc", even)
        b = write_sparse(tmp_path / "odd.s4dc", odd)
        merged = read_sparse(merge_sparse([a, b], tmp_path / "all.s4dc"))
        assert [f.frame_number for f in merged.frames] == [0, 1, 2, 3]
        assert merged.n_events == 4

    def test_missing_frame_refused(self, tmp_path):
        part = make_scan([SparseFrame(f, FULL_MASK, ev()) for f in (0, 1, 2)])
        p = write_sparse(tmp_path / "part.s4dc", part)
        with pytest.raises(SparseFormatError, match="cover"):
            merge_sparse([p], tmp_path / "out.s4dc")

    def test_metadata_disagreement_refused(self, tmp_path):
        a = write_sparse(tmp_path / "a.s4dc",
                         make_scan([SparseFrame(0, FULL_MASK, ev()),
                                    SparseFrame(1, FULL_MASK, ev())]))
        other = make_scan([SparseFrame(2, FULL_MASK, ev()),
                           SparseFrame(3, FULL_MASK, ev())])
        other.xray_threshold = 151.0
        b = write_sparse(tmp_path / "b.s4dc", other)
        with pytest.raises(SparseFormatError, match="disagree"):
            merge_sparse([a, b], tmp_path / "out.s4dc")

    def test_empty_input_refused(self, tmp_path):
        with pytest.raises(SparseFormatError):
            merge_sparse([], tmp_path / "out.s4dc")
