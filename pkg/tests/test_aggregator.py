"""Aggregator tests: info combination, routing, end-to-end forwarding."""

import hashlib

import pytest
from hypothesis import given, strategies as st

from stream4d.aggregator import (
    AggregatorService, Metrics, ScanMismatch, combine_info, route,
)
from stream4d.consumer import SCAN_META_TAG, ScanMeta
from stream4d.producer import ProducerProcess, ScanSpec, generate_sector
from stream4d.protocol import (
    InfoMap, decode_info_map, decode_sector_header, encode_sector_message,
    is_data_header, is_info_frame,
)
from stream4d.transport import PullServer

SPEC = ScanSpec(scan_number=3, scan_rows=4, scan_cols=4,
                frame_rows=16, frame_cols=16, noise_stddev=2.0, seed=11)


class TestCombineInfo:
    def test_five_equal_maps(self):
        maps = [InfoMap(1, {"A": 20}) for _ in range(5)]
        assert combine_info(maps) == {"A": 100}

    def test_mixed_uids(self):
        maps = [InfoMap(1, {"A": 3, "B": 1}), InfoMap(1, {"A": 1, "B": 3})]
        assert combine_info(maps) == {"A": 4, "B": 4}

    def test_single_map_identity(self):
        assert combine_info([InfoMap(2, {"A": 7})]) == {"A": 7}

    def test_empty_list(self):
        assert combine_info([]) == {}

    def test_scan_mismatch_rejected(self):
        with pytest.raises(ScanMismatch):
            combine_info([InfoMap(1, {"A": 1}), InfoMap(2, {"A": 1})])


class TestRoute:
    def test_modulo_example(self):
        assert route(7, 4) == 3

    def test_single_group(self):
        assert all(route(f, 1) == 0 for f in range(20))

    def test_invalid_group_count(self):
        with pytest.raises(ValueError):
            route(0, 0)

    @given(frame=st.integers(0, 10**6), n=st.integers(1, 16))
    def test_in_range(self, frame, n):
        assert 0 <= route(frame, n) < n

    @given(start=st.integers(0, 100), length=st.integers(0, 300),
           n=st.sampled_from([1, 2, 3, 4, 7]))
    def test_contiguous_ranges_balance(self, start, length, n):
        counts = [0] * n
        for f in range(start, start + length):
            counts[route(f, n)] += 1
        assert max(counts) - min(counts) <= 1


def test_metrics_render():
    m = Metrics()
    m.count_forward("ng-0")
    m.count_forward("ng-0")
    m.count_forward("ng-1")
    m.count_quarantine()
    assert m.render() == ('received 4\nquarantined 1\n'
                          'forwarded{uid="ng-0"} 2\n'
                          'forwarded{uid="ng-1"} 1\n')


class _FakeGroup:
    """Pull side standing in for a NodeGroup: records what arrives."""

    def __init__(self):
        self.server = PullServer()
        self.metas = []
        self.infos = []
        self.data = []

    def drain(self, n_messages, timeout=10):
        for _ in range(n_messages):
            _, frames = self.server.recv(timeout=timeout)
            head = frames[0]
            if head == SCAN_META_TAG:
                self.metas.append(ScanMeta.decode(frames[1]))
            elif is_info_frame(head):
                self.infos.append(decode_info_map(head))
            elif is_data_header(head):
                self.data.append(frames)

    def close(self):
        self.server.close()


@pytest.fixture
def two_groups():
    groups = [_FakeGroup(), _FakeGroup()]
    resolve = lambda scan: [  # noqa: E731
        (f"ng-{i}", g.server.address) for i, g in enumerate(groups)]
    agg = AggregatorService(resolve)
    yield agg, groups
    agg.close()
    for g in groups:
        g.close()


def run_producers(agg, spec, thread_count=2):
    uids = ["ng-0", "ng-1"]
    procs = [ProducerProcess(spec, s, agg.address, uids,
                             thread_count=thread_count) for s in range(4)]
    import threading
    threads = [threading.Thread(target=p.run) for p in procs]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return procs


class TestEndToEnd:
    def test_routing_and_pass_through(self, two_groups):
        agg, groups = two_groups
        run_producers(agg, SPEC)
        # per group: 4 sector-level metas + 4 info announcements
        # + its share of the 64 data messages (32 each for 16 frames)
        for gi, g in enumerate(groups):
            g.drain(4 + 4 + 32)
            assert len(g.metas) == 4
            assert all(m.n_groups == 2 and m.group_index == gi
                       for m in g.metas)
            assert len(g.infos) == 4
            assert all(i.entries == {f"ng-{gi}": 8} for i in g.infos)
            assert len(g.data) == 32
            frames_seen = set()
            for head, payload in g.data:
                header, _ = decode_sector_header(head)
                assert header.frame_number % 2 == gi
                frames_seen.add(header.frame_number)
                ref, _ = generate_sector(SPEC, header.frame_number,
                                         header.sector_index)
                assert hashlib.sha256(payload).hexdigest() == \
                    hashlib.sha256(ref.payload.tobytes()).hexdigest()
            assert len(frames_seen) == 8
        assert agg.metrics.received == 64
        assert agg.metrics.quarantined == 0
        assert agg.metrics.forwarded == {"ng-0": 32, "ng-1": 32}

    def test_wrong_scan_quarantined(self, two_groups):
        agg, groups = two_groups
        from stream4d.producer import _hello_frames
        from stream4d.transport import PushSocket
        push = PushSocket(agg.address)
        push.send(_hello_frames(SPEC, 0, 0, 1))
        stray = ScanSpec(scan_number=99, scan_rows=4, scan_cols=4,
                         frame_rows=16, frame_cols=16, seed=1)
        msg, _ = generate_sector(stray, 0, 0)
        push.send(encode_sector_message(msg, stray.geometry))
        ok, _ = generate_sector(SPEC, 0, 0)
        push.send(encode_sector_message(ok, SPEC.geometry))
        groups[0].drain(2)  # meta for scan 3 plus the one good message
        push.close()
        assert agg.metrics.quarantined == 1
        assert agg.metrics.forwarded == {"ng-0": 1}
