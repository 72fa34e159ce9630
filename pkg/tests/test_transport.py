"""Framed TCP transport tests: atomicity, ordering, backpressure, files."""

import io
import queue
import threading
import time

import pytest

from stream4d.transport import (
    ChannelClosed, InprocChannel, PullServer, PushSocket, pack_message,
    read_message_from_file, recv_message_buffered, send_message,
)


class TestFraming:
    def test_pack_layout(self):
        assert pack_message([b"ab"]) == b"\x01\x02\x00\x00\x00ab"

    def test_pack_multi_frame(self):
        raw = pack_message([b"a", b"bc"])
        assert raw == b"\x02\x01\x00\x00\x00a\x02\x00\x00\x00bc"

    def test_frame_count_bounds(self):
        with pytest.raises(ValueError):
            pack_message([])
        with pytest.raises(ValueError):
            pack_message([b"x"] * 256)

    def test_empty_frame_allowed(self):
        fh = io.BytesIO(pack_message([b""]))
        assert read_message_from_file(fh) == [b""]

    def test_read_from_file_round_trip(self):
        messages = [[b"one"], [b"two", b"three"], [b"\x00" * 100]]
        fh = io.BytesIO(b"".join(pack_message(m) for m in messages))
        got = []
        while (msg := read_message_from_file(fh)) is not None:
            got.append(msg)
        assert got == messages

    def test_read_from_file_truncated(self):
        raw = pack_message([b"hello world"])
        fh = io.BytesIO(raw[:-3])
        with pytest.raises(ChannelClosed, match="truncated"):
            read_message_from_file(fh)

    def test_recv_buffered_matches_pack(self):
        fh = io.BytesIO(pack_message([b"x", b"yz"]))
        assert recv_message_buffered(fh) == [b"x", b"yz"]
        with pytest.raises(ChannelClosed):
            recv_message_buffered(fh)


class TestPushPull:
    def test_single_message(self):
        server = PullServer()
        push = PushSocket(server.address)
        try:
            push.send([b"head", b"payload"])
            _, frames = server.recv(timeout=5)
            assert frames == [b"head", b"payload"]
        finally:
            push.close()
            server.close()

    def test_per_sender_fifo_order(self):
        server = PullServer()
        push = PushSocket(server.address)
        try:
            for i in range(200):
                push.send([i.to_bytes(4, "little")])
            got = [int.from_bytes(server.recv(timeout=5)[1][0], "little")
                   for _ in range(200)]
            assert got == list(range(200))
        finally:
            push.close()
            server.close()

    def test_many_senders_messages_stay_intact(self):
        server = PullServer()
        n_senders, per_sender = 4, 50
        sent = set()

        def sender(tag):
            push = PushSocket(server.address)
            for i in range(per_sender):
                push.send([bytes([tag]), i.to_bytes(4, "little"),
                           bytes([tag]) * 64])
            push.close()

        threads = [threading.Thread(target=sender, args=(t,))
                   for t in range(n_senders)]
        for t in threads:
            t.start()
        try:
            got = []
            for _ in range(n_senders * per_sender):
                _, frames = server.recv(timeout=10)
                assert len(frames) == 3
                tag = frames[0][0]
                assert frames[2] == bytes([tag]) * 64
                got.append((tag, int.from_bytes(frames[1], "little")))
            for t in range(n_senders):
                sent.update((t, i) for i in range(per_sender))
            assert set(got) == sent
        finally:
            for t in threads:
                t.join()
            server.close()

    def test_handler_mode_bypasses_queue(self):
        received = []
        done = threading.Event()

        def on_message(conn_id, frames):
            received.append(frames[0])
            if len(received) == 10:
                done.set()

        server = PullServer(handler=on_message)
        push = PushSocket(server.address)
        try:
            for i in range(10):
                push.send([bytes([i])])
            assert done.wait(timeout=5)
            assert received == [bytes([i]) for i in range(10)]
            with pytest.raises(queue.Empty):
                server.recv(timeout=0.05)
        finally:
            push.close()
            server.close()

    def test_recv_timeout_and_close(self):
        server = PullServer()
        with pytest.raises(queue.Empty):
            server.recv(timeout=0.05)
        server.close()
        with pytest.raises(ChannelClosed):
            server.recv(timeout=0.05)

    def test_send_after_close_raises(self):
        server = PullServer()
        push = PushSocket(server.address)
        push.close()
        with pytest.raises(ChannelClosed):
            push.send([b"x"])
        server.close()


class TestInprocChannel:
    def test_round_trip(self):
        ch = InprocChannel()
        ch.send("a")
        ch.send("b")
        assert ch.recv(timeout=1) == "a"
        assert ch.recv(timeout=1) == "b"

    def test_sender_blocks_at_high_water_mark(self):
        ch = InprocChannel(hwm=2)
        ch.send(1)
        ch.send(2)
        third_sent = threading.Event()

        def blocked_sender():
            ch.send(3)
            third_sent.set()

        t = threading.Thread(target=blocked_sender, daemon=True)
        t.start()
        time.sleep(0.1)
        assert not third_sent.is_set()
        assert ch.recv(timeout=1) == 1
        assert third_sent.wait(timeout=2)
        assert ch.recv(timeout=1) == 2
        assert ch.recv(timeout=1) == 3
        t.join()

    def test_close_wakes_receiver(self):
        ch = InprocChannel()
        ch.close()
        with pytest.raises(ChannelClosed):
            ch.recv(timeout=1)
        with pytest.raises(ChannelClosed):
            ch.send("x")


def test_send_message_against_buffered_reader():
    server = PullServer()
    push = PushSocket(server.address)
    try:
        import socket as socket_mod
        raw = socket_mod.create_connection(server.address)
        send_message(raw, [b"plain", b"api"])
        _, first = server.recv(timeout=5)
        raw.close()
        push.send([b"second"])
        _, second = server.recv(timeout=5)
        assert sorted([first, second]) == sorted([[b"plain", b"api"],
                                                  [b"second"]])
    finally:
        push.close()
        server.close()
