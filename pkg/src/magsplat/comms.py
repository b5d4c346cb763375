"""Wire protocol for submap transmission plus exact byte accounting.

Frame layout, all little-endian:

    magic u32 = 0x434F4B4F, version u8 = 1, msg_type u8,
    agent_id u16, payload_len u64, payload, crc32(payload) u32

Submap payload: submap_id u32, mode u8, feature_dim u16, n_keyframes
u16; per keyframe frame_index u32, pose 7xf32 (qx qy qz qw tx ty tz),
feature f32 x dim; n_gaussians u32; per Gaussian 14xf32 = 56 B (mean,
quat, log_scale, opacity, rgb); CD appends width u16, height u16 and
row-major u16 millimeter depth; PCD appends n_points u32 and 3xf32
points.

Floats travel as f32 and depth as u16 mm, so a packet roundtrips
field-exact only when built from values already quantized to those
widths; quantize_packet does that once on construction.
"""

import socket
import struct
import zlib
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose
from .splatrender import GaussianCloud

MAGIC = 0x434F4B4F
VERSION = 1
MSG_SUBMAP = 1
MSG_AGENT_DONE = 2
MODE_RD = 0
MODE_CD = 1
MODE_PCD = 2
MODE_NAMES = {MODE_RD: "rd", MODE_CD: "cd", MODE_PCD: "pcd"}
MODE_IDS = {v: k for k, v in MODE_NAMES.items()}

_HEADER = struct.Struct("<IBBHQ")
FRAME_OVERHEAD = _HEADER.size + 4
_PAYLOAD_HEADER = struct.Struct("<IBHH")
GAUSSIAN_RECORD = 56


class CommsError(Exception):
    pass


class BadMagic(CommsError):
    pass


class BadVersion(CommsError):
    pass


class CrcMismatch(CommsError):
    pass


class Truncated(CommsError):
    def __init__(self, offset, what=""):
        detail = f" while reading {what}" if what else ""
        super().__init__(f"data ends at byte {offset}{detail}")
        self.offset = offset


class Overflow(CommsError):
    pass


class ChannelClosed(CommsError):
    pass


@dataclass
class PacketKeyframe:
    frame_index: int
    pose: Pose
    feature: np.ndarray


@dataclass
class SubmapPacket:
    """Decoded submap transmission; mode-conditional fields are None
    unless the mode carries them."""

    submap_id: int
    agent_id: int
    mode: int
    keyframes: list
    gaussians: GaussianCloud
    depth_mm: np.ndarray | None = None
    cloud: np.ndarray | None = None

    @property
    def feature_dim(self):
        return self.keyframes[0].feature.size if self.keyframes else 0

    def equals(self, other):
        if (self.submap_id, self.agent_id, self.mode) != (
            other.submap_id, other.agent_id, other.mode
        ):
            return False
        if len(self.keyframes) != len(other.keyframes):
            return False
        for a, b in zip(self.keyframes, other.keyframes):
            if a.frame_index != b.frame_index:
                return False
            if not np.array_equal(a.pose.q, b.pose.q):
                return False
            if not np.array_equal(a.pose.t, b.pose.t):
                return False
            if not np.array_equal(a.feature, b.feature):
                return False
        g, h = self.gaussians, other.gaussians
        for name in ("means", "quats", "log_scales", "opacities", "colors"):
            if not np.array_equal(getattr(g, name), getattr(h, name)):
                return False
        for mine, theirs in ((self.depth_mm, other.depth_mm),
                             (self.cloud, other.cloud)):
            if (mine is None) != (theirs is None):
                return False
            if mine is not None and not np.array_equal(mine, theirs):
                return False
        return True


def _f32(a):
    return np.asarray(a, dtype="<f4")


def quantize_packet(p):
    """Copy of p with every float field passed through f32, so the
    encode/decode roundtrip is field-exact."""
    kfs = [
        PacketKeyframe(
            kf.frame_index,
            Pose(_f32(kf.pose.q).astype(np.float64),
                 _f32(kf.pose.t).astype(np.float64)),
            _f32(kf.feature).copy(),
        )
        for kf in p.keyframes
    ]
    g = p.gaussians
    gq = GaussianCloud(
        _f32(g.means).astype(np.float64),
        _f32(g.quats).astype(np.float64),
        _f32(g.log_scales).astype(np.float64),
        _f32(g.opacities).astype(np.float64),
        _f32(g.colors).astype(np.float64),
    )
    depth = None if p.depth_mm is None else np.asarray(p.depth_mm, dtype="<u2").copy()
    cloud = None if p.cloud is None else _f32(p.cloud).astype(np.float64)
    return SubmapPacket(p.submap_id, p.agent_id, p.mode, kfs, gq, depth, cloud)


def _check_range(name, value, limit):
    if not 0 <= value <= limit:
        raise Overflow(f"{name} {value} outside [0, {limit}]")


def encode_submap_payload(p):
    _check_range("submap_id", p.submap_id, 0xFFFFFFFF)
    _check_range("n_keyframes", len(p.keyframes), 0xFFFF)
    _check_range("n_gaussians", len(p.gaussians), 0xFFFFFFFF)
    if p.mode not in MODE_NAMES:
        raise CommsError(f"unknown mode {p.mode}")
    if (p.depth_mm is not None) != (p.mode == MODE_CD):
        raise CommsError("depth section present iff mode is CD")
    if (p.cloud is not None) != (p.mode == MODE_PCD):
        raise CommsError("cloud section present iff mode is PCD")
    dim = p.feature_dim
    _check_range("feature_dim", dim, 0xFFFF)
    buf = bytearray(_PAYLOAD_HEADER.pack(p.submap_id, p.mode, dim, len(p.keyframes)))
    for kf in p.keyframes:
        if kf.feature.size != dim:
            raise CommsError("inconsistent feature dims within packet")
        _check_range("frame_index", kf.frame_index, 0xFFFFFFFF)
        buf += struct.pack("<I", kf.frame_index)
        buf += _f32(np.concatenate([kf.pose.q, kf.pose.t])).tobytes()
        buf += _f32(kf.feature).tobytes()
    g = p.gaussians
    buf += struct.pack("<I", len(g))
    rec = np.empty((len(g), 14), dtype="<f4")
    rec[:, 0:3] = g.means
    rec[:, 3:7] = g.quats
    rec[:, 7:10] = g.log_scales
    rec[:, 10] = g.opacities
    rec[:, 11:14] = g.colors
    buf += rec.tobytes()
    if p.mode == MODE_CD:
        h, w = p.depth_mm.shape
        _check_range("depth width", w, 0xFFFF)
        _check_range("depth height", h, 0xFFFF)
        buf += struct.pack("<HH", w, h)
        buf += np.ascontiguousarray(p.depth_mm, dtype="<u2").tobytes()
    elif p.mode == MODE_PCD:
        _check_range("n_points", len(p.cloud), 0xFFFFFFFF)
        buf += struct.pack("<I", len(p.cloud))
        buf += _f32(p.cloud).tobytes()
    return bytes(buf)


class _Cursor:
    def __init__(self, data, base=0):
        self.data = data
        self.pos = 0
        self.base = base

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise Truncated(self.base + len(self.data), what)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, st, what):
        return st.unpack(self.take(st.size, what))

    def array(self, dtype, count, what):
        raw = self.take(count * np.dtype(dtype).itemsize, what)
        return np.frombuffer(raw, dtype=dtype, count=count)


def decode_submap_payload(payload, agent_id=0, base_offset=0):
    cur = _Cursor(payload, base_offset)
    submap_id, mode, dim, n_kf = cur.unpack(_PAYLOAD_HEADER, "submap header")
    if mode not in MODE_NAMES:
        raise CommsError(f"unknown mode {mode}")
    kfs = []
    for _ in range(n_kf):
        (frame_index,) = cur.unpack(struct.Struct("<I"), "keyframe index")
        vals = cur.array("<f4", 7, "keyframe pose").astype(np.float64)
        feat = cur.array("<f4", dim, "keyframe feature").copy()
        kfs.append(PacketKeyframe(frame_index, Pose(vals[:4], vals[4:]), feat))
    (n_g,) = cur.unpack(struct.Struct("<I"), "gaussian count")
    rec = cur.array("<f4", n_g * 14, "gaussian records").astype(np.float64)
    rec = rec.reshape(n_g, 14)
    gaussians = GaussianCloud(
        rec[:, 0:3].copy(), rec[:, 3:7].copy(), rec[:, 7:10].copy(),
        rec[:, 10].copy(), rec[:, 11:14].copy(),
    )
    depth = cloud = None
    if mode == MODE_CD:
        w, h = cur.unpack(struct.Struct("<HH"), "depth size")
        depth = cur.array("<u2", w * h, "depth pixels").reshape(h, w).copy()
    elif mode == MODE_PCD:
        (n_p,) = cur.unpack(struct.Struct("<I"), "point count")
        cloud = cur.array("<f4", n_p * 3, "points").astype(np.float64).reshape(n_p, 3)
    if cur.pos != len(payload):
        raise CommsError(f"{len(payload) - cur.pos} trailing payload bytes")
    return SubmapPacket(submap_id, agent_id, mode, kfs, gaussians, depth, cloud)


def frame_message(msg_type, agent_id, payload):
    _check_range("agent_id", agent_id, 0xFFFF)
    header = _HEADER.pack(MAGIC, VERSION, msg_type, agent_id, len(payload))
    return header + payload + struct.pack("<I", zlib.crc32(payload))


def parse_frame(buf, offset=0):
    """Parse one frame starting at offset; returns
    (msg_type, agent_id, payload, next_offset)."""
    if offset + _HEADER.size > len(buf):
        raise Truncated(len(buf), "frame header")
    magic, version, msg_type, agent_id, n = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise BadMagic(f"magic 0x{magic:08X} at offset {offset}")
    if version != VERSION:
        raise BadVersion(f"version {version} at offset {offset + 4}")
    start = offset + _HEADER.size
    end = start + n + 4
    if end > len(buf):
        raise Truncated(len(buf), "frame payload")
    payload = bytes(buf[start:start + n])
    (crc,) = struct.unpack_from("<I", buf, start + n)
    actual = zlib.crc32(payload)
    if crc != actual:
        raise CrcMismatch(
            f"crc 0x{crc:08X} != 0x{actual:08X} at offset {start + n}"
        )
    return msg_type, agent_id, payload, end


def encode_submap_packet(p):
    """Full framed encoding of a submap packet."""
    return frame_message(MSG_SUBMAP, p.agent_id, encode_submap_payload(p))


def decode_submap_packet(data):
    """Inverse of encode_submap_packet; CRC checked before any parsing."""
    msg_type, agent_id, payload, end = parse_frame(data)
    if end != len(data):
        raise CommsError(f"{len(data) - end} trailing bytes after frame")
    if msg_type != MSG_SUBMAP:
        raise CommsError(f"expected submap frame, got msg_type {msg_type}")
    return decode_submap_payload(payload, agent_id, base_offset=_HEADER.size)


def encode_agent_done(agent_id):
    return frame_message(MSG_AGENT_DONE, agent_id, b"")


def packet_parts(p):
    """Exact per-section byte breakdown of the framed packet; values sum
    to the framed size. Section counts include their own length fields;
    everything else (framing, submap header, keyframe indices) lands in
    overhead."""
    n_kf = len(p.keyframes)
    parts = {
        "features": n_kf * 4 * p.feature_dim,
        "poses": n_kf * 28,
        "gaussians": len(p.gaussians) * GAUSSIAN_RECORD,
        "depth": 0,
        "cloud": 0,
        "overhead": FRAME_OVERHEAD + _PAYLOAD_HEADER.size + 4 * n_kf + 4,
    }
    if p.mode == MODE_CD:
        parts["depth"] = 4 + 2 * p.depth_mm.size
    elif p.mode == MODE_PCD:
        parts["cloud"] = 4 + 12 * len(p.cloud)
    return parts


@dataclass
class ByteLedger:
    """Per-agent cumulative byte counts with per-packet breakdowns."""

    entries: list = field(default_factory=list)

    def record(self, agent_id, n_bytes, parts=None):
        if n_bytes < 0:
            raise CommsError("negative byte count")
        parts = dict(parts) if parts else {}
        if parts and sum(parts.values()) != n_bytes:
            raise CommsError("part sizes do not sum to the packet size")
        self.entries.append((agent_id, n_bytes, parts))

    def total(self, agent_id=None):
        return sum(
            n for a, n, _ in self.entries if agent_id is None or a == agent_id
        )

    def per_agent(self):
        out = {}
        for a, n, _ in self.entries:
            out[a] = out.get(a, 0) + n
        return out

    def parts_for(self, agent_id):
        out = {}
        for a, _, parts in self.entries:
            if a != agent_id:
                continue
            for k, v in parts.items():
                out[k] = out.get(k, 0) + v
        return out


def ledger_report(ledger):
    """One row per agent: bytes, decimal megabytes (1 decimal), and the
    per-section breakdown."""
    rows = []
    for agent_id in sorted(ledger.per_agent()):
        n = ledger.total(agent_id)
        row = {"agent": agent_id, "bytes": n, "mb": round(n / 1e6, 1)}
        row.update(ledger.parts_for(agent_id))
        rows.append(row)
    return rows


class InProcessChannel:
    """Deque-backed channel; send frames a message and books it into the
    ledger, recv returns None when nothing is pending."""

    def __init__(self, ledger=None):
        self.ledger = ledger if ledger is not None else ByteLedger()
        self._queue = deque()
        self._closed = False

    def send(self, msg_type, agent_id, payload, parts=None):
        if self._closed:
            raise ChannelClosed("send on closed channel")
        framed = frame_message(msg_type, agent_id, payload)
        self.ledger.record(agent_id, len(framed), parts)
        self._queue.append(framed)
        return len(framed)

    def recv(self):
        if self._queue:
            framed = self._queue.popleft()
            msg_type, agent_id, payload, _ = parse_frame(framed)
            return msg_type, agent_id, payload
        if self._closed:
            raise ChannelClosed("channel drained")
        return None

    def close(self):
        self._closed = True


def _read_exact(sock, n, offset):
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(n - got)
        if not chunk:
            if got == 0 and offset == 0:
                raise ChannelClosed("peer closed")
            raise Truncated(offset + got, "socket frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


class TcpChannel:
    """Socket-backed channel with the same framing and ledger contract."""

    def __init__(self, sock, ledger=None):
        self.sock = sock
        self.ledger = ledger if ledger is not None else ByteLedger()

    def send(self, msg_type, agent_id, payload, parts=None):
        framed = frame_message(msg_type, agent_id, payload)
        try:
            self.sock.sendall(framed)
        except OSError as e:
            raise ChannelClosed(str(e)) from e
        self.ledger.record(agent_id, len(framed), parts)
        return len(framed)

    def recv(self):
        try:
            header = _read_exact(self.sock, _HEADER.size, 0)
            magic, version, _, _, n = _HEADER.unpack(header)
            # validate before trusting payload_len with a large read
            if magic != MAGIC:
                raise BadMagic(f"magic 0x{magic:08X} at offset 0")
            if version != VERSION:
                raise BadVersion(f"version {version} at offset 4")
            rest = _read_exact(self.sock, n + 4, _HEADER.size)
        except socket.timeout as e:
            raise ChannelClosed("recv timeout") from e
        msg_type, agent_id, payload, _ = parse_frame(header + rest)
        return msg_type, agent_id, payload

    def close(self):
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()
