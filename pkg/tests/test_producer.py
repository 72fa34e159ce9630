"""Synthetic producer tests: determinism, planning, loss, fallback files."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stream4d.producer import (
    EVENT_SIGMA, XRAY_VALUE, ProducerPlan, ScanSpec, ThreadReport,
    expected_counts, fallback_raw_path, fallback_write, generate_frame,
    generate_sector, read_raw_file, run_producer_thread, scan_truth,
)
from stream4d.transport import ChannelClosed

SPEC = ScanSpec(scan_number=1, scan_rows=4, scan_cols=4,
                frame_rows=32, frame_cols=32, event_rate=8.0,
                noise_mean=100.0, noise_stddev=5.0, xray_rate=1.0, seed=7)


class TestScanSpec:
    def test_loss_probability_bounds(self):
        ScanSpec(1, 2, 2, loss_probability=0.01)
        ScanSpec(1, 2, 2, loss_probability=1.0)  # test-only hole
        with pytest.raises(ValueError):
            ScanSpec(1, 2, 2, loss_probability=0.02)
        with pytest.raises(ValueError):
            ScanSpec(1, 2, 2, loss_probability=-0.1)

    def test_dims_validated(self):
        with pytest.raises(ValueError):
            ScanSpec(1, 0, 4)

    def test_file_round_trip(self, tmp_path):
        path = tmp_path / "spec.json"
        SPEC.to_file(path)
        assert ScanSpec.from_file(path) == SPEC

    def test_n_frames(self):
        assert SPEC.n_frames == 16


class TestProducerPlan:
    def test_contiguous_partition(self):
        plan = ProducerPlan.build(0, 100, 4)
        assert [list(r) for r in plan.thread_ranges] == [
            list(range(0, 25)), list(range(25, 50)),
            list(range(50, 75)), list(range(75, 100))]
        plan.validate(100)

    @given(n_frames=st.integers(0, 500), thread_count=st.integers(1, 9))
    def test_partition_property(self, n_frames, thread_count):
        plan = ProducerPlan.build(0, n_frames, thread_count)
        assert len(plan.thread_ranges) == thread_count
        plan.validate(n_frames)
        sizes = [len(r) for r in plan.thread_ranges]
        assert max(sizes) - min(sizes) <= 1

    def test_validate_rejects_gap(self):
        plan = ProducerPlan(0, (range(0, 3), range(4, 8)))
        with pytest.raises(ValueError):
            plan.validate(8)

    def test_bad_thread_count(self):
        with pytest.raises(ValueError):
            ProducerPlan.build(0, 8, 0)


class TestGenerateSector:
    def test_deterministic(self):
        a, ta = generate_sector(SPEC, 3, 2)
        b, tb = generate_sector(SPEC, 3, 2)
        assert a == b
        assert ta.event_pixels == tb.event_pixels
        assert ta.xray_pixels == tb.xray_pixels

    def test_sectors_differ(self):
        a, _ = generate_sector(SPEC, 3, 0)
        b, _ = generate_sector(SPEC, 3, 1)
        assert not np.array_equal(a.payload, b.payload)

    def test_header_fields(self):
        msg, _ = generate_sector(SPEC, 5, 2, sequence=9)
        h = msg.header
        assert (h.scan_number, h.frame_number, h.sector_index,
                h.sequence) == (1, 5, 2, 9)
        assert msg.payload.shape == (8, 32)
        assert msg.payload.dtype == np.uint16

    def test_zero_stddev_zero_rates_constant(self):
        spec = ScanSpec(1, 2, 2, frame_rows=16, frame_cols=16,
                        noise_mean=100.0, noise_stddev=0.0)
        msg, truth = generate_sector(spec, 0, 0)
        assert np.all(msg.payload == 100)
        assert truth.event_pixels == [] and truth.xray_pixels == []

    def test_event_and_xray_pixel_values(self):
        geo = SPEC.geometry
        expect = round(SPEC.noise_mean + EVENT_SIGMA * SPEC.noise_stddev)
        for f in range(SPEC.n_frames):
            for s in range(4):
                msg, truth = generate_sector(SPEC, f, s)
                base = s * geo.sector_pixels
                for p in truth.event_pixels:
                    assert msg.payload.flat[p - base] == expect
                for p in truth.xray_pixels:
                    assert msg.payload.flat[p - base] == XRAY_VALUE

    def test_event_value_between_thresholds(self):
        value = SPEC.noise_mean + EVENT_SIGMA * SPEC.noise_stddev
        background = SPEC.noise_mean + 4.0 * SPEC.noise_stddev
        xray = SPEC.noise_mean + 10.0 * SPEC.noise_stddev
        assert background < value < xray

    def test_frame_number_range_checked(self):
        with pytest.raises(ValueError):
            generate_sector(SPEC, SPEC.n_frames, 0)

    def test_event_count_tracks_rate(self):
        spec = ScanSpec(1, 10, 20, frame_rows=32, frame_cols=32,
                        event_rate=40.0, seed=3)
        total = sum(len(t.event_pixels) for t in scan_truth(spec).values())
        expect = spec.event_rate * spec.n_frames
        assert abs(total - expect) <= 0.05 * expect

    def test_generate_frame_stacks_sectors(self):
        frame = generate_frame(SPEC, 2)
        assert frame.shape == (32, 32)
        geo = SPEC.geometry
        for s in range(4):
            msg, _ = generate_sector(SPEC, 2, s)
            band = frame[s * geo.sector_rows:(s + 1) * geo.sector_rows]
            assert np.array_equal(band, msg.payload)


class TestExpectedCounts:
    def test_even_split(self):
        uids = [f"ng-{i}" for i in range(10)]
        assert expected_counts(range(100), uids) == {u: 10 for u in uids}

    def test_remainder_goes_to_group_zero(self):
        uids = [f"ng-{i}" for i in range(10)]
        counts = expected_counts(range(101), uids)
        assert counts["ng-0"] == 11
        assert all(counts[f"ng-{i}"] == 10 for i in range(1, 10))

    def test_single_group_takes_all(self):
        assert expected_counts(range(37), ["only"]) == {"only": 37}

    def test_no_groups_rejected(self):
        with pytest.raises(ValueError):
            expected_counts(range(4), [])

    @given(start=st.integers(0, 50), length=st.integers(0, 200),
           n=st.sampled_from([1, 2, 3, 4, 7]))
    def test_contiguous_ranges_are_fair(self, start, length, n):
        uids = [f"ng-{i}" for i in range(n)]
        counts = expected_counts(range(start, start + length), uids)
        assert sum(counts.values()) == length
        assert max(counts.values()) - min(counts.values()) <= 1


class TestStreamingThread:
    def test_lossless_sends_everything(self):
        sent = []
        report = run_producer_thread(SPEC, 0, 0, range(16), ["a", "b"],
                                     sent.append)
        assert report == ThreadReport(sent=16, dropped=0, aborted=False)
        assert len(sent) == 17  # info map first, then 16 data messages
        assert len(sent[0]) == 1

    def test_full_loss_drops_everything(self):
        spec = ScanSpec(1, 4, 4, frame_rows=32, frame_cols=32,
                        loss_probability=1.0)
        sent = []
        report = run_producer_thread(spec, 0, 0, range(16), ["a"],
                                     sent.append)
        assert report == ThreadReport(sent=0, dropped=16, aborted=False)
        assert len(sent) == 1  # the info map still goes out

    def test_loss_rate_is_binomial(self):
        spec = ScanSpec(1, 100, 100, frame_rows=8, frame_cols=8,
                        loss_probability=0.01, seed=5)
        sent = []
        report = run_producer_thread(spec, 1, 0, range(10_000), ["a"],
                                     sent.append)
        assert report.sent + report.dropped == 10_000
        # mean 100, stddev ~10; allow 5 sigma
        assert 50 <= report.dropped <= 150

    def test_closed_channel_aborts_with_partial_report(self):
        calls = []

        def flaky(frames):
            calls.append(frames)
            if len(calls) == 5:  # info + 4 data messages got through
                raise ChannelClosed("gone")

        report = run_producer_thread(SPEC, 0, 0, range(16), ["a"], flaky)
        assert report.aborted
        assert report.sent == 3


class TestFallbackFiles:
    def test_round_trip(self, tmp_path):
        path = fallback_write(SPEC, 2, 1, range(4, 8), tmp_path)
        assert path == fallback_raw_path(tmp_path, 1, 2, 1)
        messages = read_raw_file(path, SPEC.geometry)
        assert [m.header.frame_number for m in messages] == [4, 5, 6, 7]
        assert [m.header.sequence for m in messages] == [0, 1, 2, 3]
        live, _ = generate_sector(SPEC, 5, 2, sequence=1)
        assert messages[1] == live

    def test_empty_range_writes_empty_file(self, tmp_path):
        path = fallback_write(SPEC, 0, 3, range(0), tmp_path)
        assert path.exists() and path.stat().st_size == 0
        assert read_raw_file(path, SPEC.geometry) == []

    def test_rewrite_is_byte_identical(self, tmp_path):
        a = fallback_write(SPEC, 1, 0, range(0, 8), tmp_path / "a")
        b = fallback_write(SPEC, 1, 0, range(0, 8), tmp_path / "b")
        assert a.read_bytes() == b.read_bytes()
