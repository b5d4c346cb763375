"""Wire protocol tests: layout arithmetic against the documented byte
counts, CRC behavior against the standard check value, randomized
roundtrips, corruption and truncation handling, ledger accounting, and
both transports."""

import socket
import struct
import threading
import zlib

import numpy as np
import pytest

from magsplat.comms import (
    FRAME_OVERHEAD,
    MAGIC,
    MODE_CD,
    MODE_PCD,
    MODE_RD,
    MSG_AGENT_DONE,
    MSG_SUBMAP,
    BadMagic,
    BadVersion,
    ByteLedger,
    ChannelClosed,
    CommsError,
    CrcMismatch,
    InProcessChannel,
    Overflow,
    PacketKeyframe,
    SubmapPacket,
    TcpChannel,
    Truncated,
    decode_submap_packet,
    decode_submap_payload,
    encode_agent_done,
    encode_submap_packet,
    encode_submap_payload,
    frame_message,
    ledger_report,
    packet_parts,
    parse_frame,
    quantize_packet,
)
from magsplat.geometry import Pose
from magsplat.splatrender import GaussianCloud
from packetgen import random_packet


def one_kf_packet(mode=MODE_RD, dim=256, n_gaussians=0, hw=None):
    rng = np.random.default_rng(0)
    kf = PacketKeyframe(7, Pose.identity(), rng.standard_normal(dim).astype(np.float32))
    quats = np.zeros((n_gaussians, 4))
    quats[:, 3] = 1.0
    g = GaussianCloud(
        rng.uniform(-2, 2, (n_gaussians, 3)), quats,
        np.full((n_gaussians, 3), -3.0), np.full(n_gaussians, 0.5),
        rng.uniform(0, 1, (n_gaussians, 3)),
    )
    depth = cloud = None
    if mode == MODE_CD:
        h, w = hw or (4, 6)
        depth = rng.integers(0, 5000, (h, w)).astype(np.uint16)
    elif mode == MODE_PCD:
        cloud = rng.uniform(-2, 2, (30, 3))
    return quantize_packet(SubmapPacket(3, 1, mode, [kf], g, depth, cloud))


class TestLayout:
    def test_minimal_rd_payload_size(self):
        p = one_kf_packet()
        payload = encode_submap_payload(p)
        assert len(payload) == 9 + (4 + 28 + 4 * 256) + 4 == 1069
        assert len(encode_submap_packet(p)) == 1069 + FRAME_OVERHEAD

    def test_gaussians_add_56_bytes_each(self):
        base = len(encode_submap_payload(one_kf_packet()))
        big = len(encode_submap_payload(one_kf_packet(n_gaussians=1000)))
        assert big - base == 56 * 1000

    def test_encode_deterministic(self):
        p = one_kf_packet(n_gaussians=17)
        assert encode_submap_packet(p) == encode_submap_packet(p)

    def test_cd_depth_section_size(self):
        rd = len(encode_submap_payload(one_kf_packet(MODE_RD)))
        cd = len(encode_submap_payload(one_kf_packet(MODE_CD, hw=(48, 64))))
        assert cd - rd == 4 + 2 * 64 * 48

    def test_mode_sections_enforced(self):
        p = one_kf_packet(MODE_RD)
        p.depth_mm = np.zeros((2, 2), dtype=np.uint16)
        with pytest.raises(CommsError):
            encode_submap_payload(p)
        q = one_kf_packet(MODE_CD)
        q.depth_mm = None
        with pytest.raises(CommsError):
            encode_submap_payload(q)

    def test_overflow_on_wide_fields(self):
        p = one_kf_packet()
        p.agent_id = 70_000
        with pytest.raises(Overflow):
            encode_submap_packet(p)
        q = one_kf_packet(dim=3)
        q.keyframes[0].frame_index = 2**32
        with pytest.raises(Overflow):
            encode_submap_payload(q)


class TestFraming:
    def test_crc_standard_check_value(self):
        framed = frame_message(MSG_SUBMAP, 0, b"123456789")
        (crc,) = struct.unpack_from("<I", framed, len(framed) - 4)
        assert crc == 0xCBF43926

    def test_parse_roundtrip(self):
        framed = frame_message(MSG_AGENT_DONE, 9, b"")
        msg_type, agent_id, payload, end = parse_frame(framed)
        assert (msg_type, agent_id, payload, end) == (MSG_AGENT_DONE, 9, b"", len(framed))
        assert framed == encode_agent_done(9)

    def test_bad_magic(self):
        framed = bytearray(frame_message(MSG_SUBMAP, 0, b"xy"))
        framed[0] ^= 0xFF
        with pytest.raises(BadMagic):
            parse_frame(bytes(framed))

    def test_bad_version(self):
        framed = bytearray(frame_message(MSG_SUBMAP, 0, b"xy"))
        framed[4] = 9
        with pytest.raises(BadVersion):
            parse_frame(bytes(framed))

    def test_truncated_header_and_payload(self):
        framed = frame_message(MSG_SUBMAP, 0, b"payload")
        with pytest.raises(Truncated) as e:
            parse_frame(framed[:10])
        assert e.value.offset == 10
        with pytest.raises(Truncated) as e:
            parse_frame(framed[:-3])
        assert e.value.offset == len(framed) - 3

    def test_concatenated_frames(self):
        a = frame_message(MSG_SUBMAP, 1, b"one")
        b = frame_message(MSG_AGENT_DONE, 2, b"")
        buf = a + b
        m1, a1, p1, end = parse_frame(buf)
        m2, a2, p2, end2 = parse_frame(buf, end)
        assert (m1, a1, p1) == (MSG_SUBMAP, 1, b"one")
        assert (m2, a2, p2) == (MSG_AGENT_DONE, 2, b"")
        assert end2 == len(buf)


class TestRoundtrip:
    def test_randomized_field_exact(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            p = random_packet(rng)
            q = decode_submap_packet(encode_submap_packet(p))
            assert q.equals(p)

    def test_quantize_idempotent(self):
        p = random_packet(np.random.default_rng(4))
        assert quantize_packet(p).equals(p)

    def test_corrupted_byte_is_crc_mismatch(self):
        p = one_kf_packet(n_gaussians=5)
        framed = encode_submap_packet(p)
        rng = np.random.default_rng(5)
        for _ in range(20):
            pos = int(rng.integers(16, len(framed) - 4))
            bad = bytearray(framed)
            bad[pos] ^= 1 + int(rng.integers(0, 255))
            with pytest.raises(CrcMismatch):
                decode_submap_packet(bytes(bad))

    def test_cut_mid_gaussian_is_truncated(self):
        p = one_kf_packet(n_gaussians=5)
        payload = encode_submap_payload(p)
        cut = payload[: 9 + 36 + 1024 + 4 + 3 * 56 + 11]
        with pytest.raises(Truncated):
            decode_submap_payload(cut)

    def test_trailing_bytes_rejected(self):
        framed = encode_submap_packet(one_kf_packet())
        with pytest.raises(CommsError):
            decode_submap_packet(framed + b"\x00")

    def test_wrong_msg_type_rejected(self):
        with pytest.raises(CommsError):
            decode_submap_packet(encode_agent_done(0))


class TestLedger:
    def test_parts_sum_to_frame_size(self):
        for mode in (MODE_RD, MODE_CD, MODE_PCD):
            p = one_kf_packet(mode, n_gaussians=9)
            parts = packet_parts(p)
            assert sum(parts.values()) == len(encode_submap_packet(p))

    def test_totals_and_per_agent(self):
        led = ByteLedger()
        led.record(0, 100, None)
        led.record(1, 50, None)
        led.record(0, 7, None)
        assert led.total() == 157
        assert led.total(0) == 107
        assert led.per_agent() == {0: 107, 1: 50}

    def test_bad_parts_rejected(self):
        led = ByteLedger()
        with pytest.raises(CommsError):
            led.record(0, 10, {"features": 4, "overhead": 5})

    def test_report_rounding_and_empty(self):
        assert ledger_report(ByteLedger()) == []
        led = ByteLedger()
        led.record(0, 2_034_000, None)
        (row,) = ledger_report(led)
        assert row["mb"] == 2.0
        assert row["bytes"] == 2_034_000

    def test_monotone_totals(self):
        led = ByteLedger()
        seen = []
        rng = np.random.default_rng(6)
        for _ in range(20):
            led.record(0, int(rng.integers(0, 1000)), None)
            seen.append(led.total())
        assert all(b >= a for a, b in zip(seen, seen[1:]))


class TestInProcessChannel:
    def test_send_recv_equal_packet(self):
        ch = InProcessChannel()
        p = one_kf_packet(n_gaussians=3)
        ch.send(MSG_SUBMAP, p.agent_id, encode_submap_payload(p))
        msg_type, agent_id, payload = ch.recv()
        assert msg_type == MSG_SUBMAP
        assert decode_submap_payload(payload, agent_id).equals(p)

    def test_per_agent_order_preserved(self):
        chans = {0: InProcessChannel(), 1: InProcessChannel()}
        sent = {0: [], 1: []}
        rng = np.random.default_rng(7)
        for k in range(10):
            aid = int(rng.integers(0, 2))
            body = b"m%d" % k
            chans[aid].send(MSG_SUBMAP, aid, body)
            sent[aid].append(body)
        for aid, ch in chans.items():
            got = []
            while (m := ch.recv()) is not None:
                got.append(m[2])
            assert got == sent[aid]

    def test_ledger_matches_framed_sizes(self):
        ch = InProcessChannel()
        total = 0
        for body in (b"a", b"bb" * 100, b""):
            total += len(frame_message(MSG_SUBMAP, 2, body))
            ch.send(MSG_SUBMAP, 2, body)
        assert ch.ledger.total(2) == total

    def test_closed_behavior(self):
        ch = InProcessChannel()
        ch.send(MSG_SUBMAP, 0, b"x")
        ch.close()
        assert ch.recv() is not None
        with pytest.raises(ChannelClosed):
            ch.recv()
        with pytest.raises(ChannelClosed):
            ch.send(MSG_SUBMAP, 0, b"y")

    def test_empty_open_returns_none(self):
        assert InProcessChannel().recv() is None


class TestTcpChannel:
    def _pair(self):
        a, b = socket.socketpair()
        return TcpChannel(a), TcpChannel(b)

    def test_packets_cross_socket(self):
        tx, rx = self._pair()
        rng = np.random.default_rng(8)
        packets = [random_packet(rng) for _ in range(12)]

        def pump():
            for p in packets:
                tx.send(MSG_SUBMAP, p.agent_id, encode_submap_payload(p))
            tx.close()

        t = threading.Thread(target=pump)
        t.start()
        got = []
        while True:
            try:
                msg_type, agent_id, payload = rx.recv()
            except ChannelClosed:
                break
            got.append(decode_submap_payload(payload, agent_id))
        t.join()
        rx.close()
        assert len(got) == len(packets)
        for p, q in zip(packets, got):
            assert q.equals(p)

    def test_ledger_counts_transport_bytes(self):
        tx, rx = self._pair()
        bodies = [b"x" * n for n in (0, 10, 999)]
        expect = sum(len(frame_message(MSG_SUBMAP, 4, b)) for b in bodies)

        def pump():
            for b in bodies:
                tx.send(MSG_SUBMAP, 4, b)
            tx.close()

        t = threading.Thread(target=pump)
        t.start()
        received = 0
        while True:
            try:
                _, _, payload = rx.recv()
            except ChannelClosed:
                break
            received += FRAME_OVERHEAD + len(payload)
        t.join()
        rx.close()
        assert tx.ledger.total(4) == expect
        assert received == expect

    def test_peer_close_raises(self):
        tx, rx = self._pair()
        tx.close()
        with pytest.raises(ChannelClosed):
            rx.recv()
        rx.close()
