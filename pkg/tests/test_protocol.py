"""Wire-format unit tests: geometry, data and info messages, sizes."""

import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from stream4d.protocol import (
    DetectorGeometry, EncodingError, InfoMap, ProtocolError, SectorHeader,
    SectorMessage, decode_info_map, decode_sector_header,
    decode_sector_message, encode_info_map, encode_sector_message, format_gb,
    is_data_header, is_info_frame, peek_frame_number, peek_scan_number,
    scan_raw_size,
)

GEO = DetectorGeometry(16, 32)


def make_message(scan=1, frame=0, sector=0, seq=0, flags=0, fill=None):
    payload = np.zeros((GEO.sector_rows, GEO.frame_cols), dtype=np.uint16)
    if fill is not None:
        payload[:] = fill
    return SectorMessage(SectorHeader(scan, frame, sector, seq, flags), payload)


class TestGeometry:
    def test_defaults_match_full_detector(self):
        geo = DetectorGeometry()
        assert (geo.frame_rows, geo.frame_cols) == (576, 576)
        assert geo.n_sectors == 4
        assert geo.sector_rows == 144
        assert geo.sector_bytes == 144 * 576 * 2

    def test_rows_must_divide_by_sectors(self):
        with pytest.raises(ValueError):
            DetectorGeometry(10, 10)

    def test_degenerate_rejected(self):
        with pytest.raises(ValueError):
            DetectorGeometry(0, 10)


class TestSectorMessage:
    def test_payload_len_field(self):
        head, raw = encode_sector_message(make_message(), GEO)
        _, plen = decode_sector_header(head)
        assert plen == GEO.sector_bytes == len(raw)

    def test_full_geometry_payload_len(self):
        geo = DetectorGeometry()
        msg = SectorMessage(SectorHeader(1, 0, 0),
                            np.zeros((144, 576), dtype=np.uint16))
        head, raw = encode_sector_message(msg, geo)
        _, plen = decode_sector_header(head)
        assert plen == 165888

    def test_round_trip(self):
        msg = make_message(scan=7, frame=9, sector=2, seq=5, flags=1, fill=42)
        assert decode_sector_message(encode_sector_message(msg, GEO), GEO) == msg

    def test_sector_index_out_of_range_rejected(self):
        with pytest.raises(EncodingError):
            encode_sector_message(make_message(sector=4), GEO)

    def test_wrong_payload_shape_rejected(self):
        msg = SectorMessage(SectorHeader(1, 0, 0),
                            np.zeros((3, 3), dtype=np.uint16))
        with pytest.raises(EncodingError):
            encode_sector_message(msg, GEO)

    def test_bad_magic_rejected(self):
        head, raw = encode_sector_message(make_message(), GEO)
        bad = b"\x00\x00\x00\x00" + head[4:]
        with pytest.raises(ProtocolError, match="magic"):
            decode_sector_message([bad, raw], GEO)

    def test_bad_version_rejected(self):
        head, raw = encode_sector_message(make_message(), GEO)
        bad = head[:4] + struct.pack("<H", 99) + head[6:]
        with pytest.raises(ProtocolError, match="version"):
            decode_sector_message([bad, raw], GEO)

    def test_truncated_payload_rejected(self):
        head, raw = encode_sector_message(make_message(), GEO)
        with pytest.raises(ProtocolError, match="truncated"):
            decode_sector_message([head, raw[:-1]], GEO)

    def test_wrong_frame_count_rejected(self):
        head, raw = encode_sector_message(make_message(), GEO)
        with pytest.raises(ProtocolError):
            decode_sector_message([head], GEO)

    def test_peek_fields_match_decode(self):
        head, _ = encode_sector_message(
            make_message(scan=123456, frame=654321), GEO)
        assert peek_scan_number(head) == 123456
        assert peek_frame_number(head) == 654321

    @given(scan=st.integers(0, 2**32 - 1), frame=st.integers(0, 2**32 - 1),
           sector=st.integers(0, 3), seq=st.integers(0, 2**32 - 1),
           flags=st.integers(0, 2**16 - 1), seed=st.integers(0, 2**32 - 1))
    def test_round_trip_property(self, scan, frame, sector, seq, flags, seed):
        rng = np.random.default_rng(seed)
        payload = rng.integers(0, 2**16, size=(GEO.sector_rows, GEO.frame_cols),
                               dtype=np.uint16)
        msg = SectorMessage(SectorHeader(scan, frame, sector, seq, flags),
                            payload)
        assert decode_sector_message(encode_sector_message(msg, GEO), GEO) == msg


class TestInfoMap:
    def test_round_trip(self):
        info = InfoMap(5, {"A": 100})
        assert decode_info_map(encode_info_map(info)) == info

    def test_ten_uids_ten_each(self):
        info = InfoMap(1, {f"ng-{i}": 10 for i in range(10)})
        back = decode_info_map(encode_info_map(info))
        assert len(back.entries) == 10
        assert sum(back.entries.values()) == 100

    def test_empty_rejected(self):
        with pytest.raises(EncodingError):
            encode_info_map(InfoMap(1, {}))

    def test_negative_count_rejected(self):
        with pytest.raises(EncodingError):
            encode_info_map(InfoMap(1, {"A": -1}))

    def test_oversize_uid_rejected(self):
        with pytest.raises(EncodingError):
            encode_info_map(InfoMap(1, {"x" * 65: 1}))

    def test_duplicate_uid_on_decode_rejected(self):
        entry = struct.pack("<H", 1) + b"A" + struct.pack("<Q", 1)
        frame = struct.pack("<IHIH", 0x53344449, 1, 1, 2) + entry + entry
        with pytest.raises(ProtocolError, match="duplicate"):
            decode_info_map(frame)

    @given(scan=st.integers(0, 2**32 - 1),
           entries=st.dictionaries(st.text(min_size=1, max_size=16),
                                   st.integers(0, 2**64 - 1),
                                   min_size=1, max_size=8))
    def test_round_trip_property(self, scan, entries):
        entries = {k: v for k, v in entries.items()
                   if len(k.encode("utf-8")) <= 64}
        if not entries:
            return
        info = InfoMap(scan, entries)
        assert decode_info_map(encode_info_map(info)) == info

    def test_frame_discrimination(self):
        info = encode_info_map(InfoMap(1, {"A": 1}))
        head, _ = encode_sector_message(make_message(), GEO)
        assert is_info_frame(info) and not is_data_header(info)
        assert is_data_header(head) and not is_info_frame(head)


class TestScanRawSize:
    def test_single_frame(self):
        assert scan_raw_size(1, 1) == 663552

    def test_reduced_geometry(self):
        assert scan_raw_size(2, 3, GEO) == 2 * 3 * 16 * 32 * 2

    def test_invalid_dims(self):
        with pytest.raises(ValueError):
            scan_raw_size(0, 5)

    def test_format_gb_truncates(self):
        assert format_gb(10_871_635_968) == "10 GB"
        assert format_gb(999_999_999) == "0 GB"
