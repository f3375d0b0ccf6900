"""Capture nodes stream segmented colored clouds to a fusion hub over TCP.

Framing (little-endian)::

    magic   4 bytes  b"HOLO"
    version u8       1
    type    u8       HELLO=1 CONFIG=2 CLOUD=3 ACK=4 BYE=5
    length  u32      payload byte count
    payload length bytes
    crc32   u32      zlib.crc32 over version..payload (everything after magic)

See ``docs/protocol.md`` for the payload layouts.
"""
from __future__ import annotations

import asyncio
import enum
import hashlib
import json
import logging
import struct
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calibration import RigCalibration
from .display import CompositeLayout, ViewConfig, render_composite, write_frame
from .errors import (BadMagic, BadVersion, ConnectionLost, CrcMismatch, MalformedPayload,
                     ProtocolError, Truncated, UnknownType)
from .foreground import DEFAULT_THRESHOLD, OpeningRefiner, segment_iterative
from .fusion import fuse, sensor_cloud
from .geometry import PointCloud
from .imageio import list_frames, read_depth_mm, read_image, read_mask

log = logging.getLogger(__name__)

MAGIC = b"HOLO"
VERSION = 1
HEADER = struct.Struct("<4sBBI")
CRC = struct.Struct("<I")
MAX_PAYLOAD = 1 << 28
DEFAULT_WINDOW_US = 50_000
DEFAULT_PORT = 7070


class MsgType(enum.IntEnum):
    HELLO = 1
    CONFIG = 2
    CLOUD = 3
    ACK = 4
    BYE = 5


@dataclass(frozen=True)
class WireMessage:
    msg_type: MsgType
    payload: bytes = b""
    version: int = VERSION

    def __post_init__(self):
        object.__setattr__(self, "msg_type", MsgType(self.msg_type))
        object.__setattr__(self, "payload", bytes(self.payload))


def encode(msg):
    if len(msg.payload) > MAX_PAYLOAD:
        raise MalformedPayload("payload too large")
    head = HEADER.pack(MAGIC, msg.version, int(msg.msg_type), len(msg.payload))
    crc = zlib.crc32(head[4:])
    crc = zlib.crc32(msg.payload, crc)
    return head + msg.payload + CRC.pack(crc)


def _check_header(head):
    magic, version, mtype, length = HEADER.unpack(head)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise BadVersion(f"unsupported version {version}")
    if length > MAX_PAYLOAD:
        raise MalformedPayload(f"payload length {length} exceeds limit")
    return version, mtype, length


def _finish(head, body, version, mtype, length):
    payload = body[:length]
    (crc,) = CRC.unpack(body[length:length + 4])
    if zlib.crc32(payload, zlib.crc32(head[4:])) != crc:
        raise CrcMismatch("checksum does not match")
    try:
        t = MsgType(mtype)
    except ValueError:
        raise UnknownType(f"unknown message type {mtype}") from None
    return WireMessage(t, payload, version)


def decode(buf):
    """Decode exactly one message occupying all of ``buf``."""
    buf = bytes(buf)
    if len(buf) < HEADER.size:
        if buf[:len(MAGIC)] != MAGIC[:len(buf)]:
            raise BadMagic("bad magic")
        raise Truncated(f"{len(buf)} bytes is shorter than a header")
    head = buf[:HEADER.size]
    version, mtype, length = _check_header(head)
    need = HEADER.size + length + CRC.size
    if len(buf) < need:
        raise Truncated(f"expected {need} bytes, got {len(buf)}")
    if len(buf) > need:
        raise MalformedPayload(f"{len(buf) - need} trailing bytes")
    return _finish(head, buf[HEADER.size:], version, mtype, length)


async def read_message(reader):
    """Read one message from an asyncio stream; ``None`` on clean EOF before a header."""
    try:
        head = await reader.readexactly(HEADER.size)
    except asyncio.IncompleteReadError as exc:
        if not exc.partial:
            return None
        raise Truncated("stream ended inside a header") from None
    version, mtype, length = _check_header(head)
    try:
        body = await reader.readexactly(length + CRC.size)
    except asyncio.IncompleteReadError:
        raise Truncated("stream ended inside a message") from None
    return _finish(head, body, version, mtype, length)


# ------------------------------------------------------------ payloads

CLOUD_HEADER = struct.Struct("<HQI2x")
RECORD = np.dtype([("xyz", "<f4", (3,)), ("rgb", "u1", (3,)), ("pad", "u1")])
assert CLOUD_HEADER.size == 16 and RECORD.itemsize == 16


@dataclass(frozen=True, eq=False)
class CloudPacket:
    camera_id: int
    timestamp_us: int
    points: np.ndarray  # (N, 3) float32
    colors: np.ndarray  # (N, 3) uint8

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float32).reshape(-1, 3)
        cols = np.ascontiguousarray(self.colors, dtype=np.uint8).reshape(-1, 3)
        if len(pts) != len(cols):
            raise ValueError("points and colors differ in length")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "colors", cols)

    @property
    def point_count(self):
        return len(self.points)

    def __eq__(self, other):
        return (isinstance(other, CloudPacket) and self.camera_id == other.camera_id
                and self.timestamp_us == other.timestamp_us
                and self.points.tobytes() == other.points.tobytes()
                and self.colors.tobytes() == other.colors.tobytes())

    @classmethod
    def from_cloud(cls, camera_id, timestamp_us, cloud):
        cols = cloud.colors if cloud.colors is not None else np.zeros((len(cloud), 3), np.uint8)
        return cls(camera_id, timestamp_us, cloud.points, cols)

    def to_cloud(self):
        return PointCloud(self.points.astype(np.float64), self.colors, f"depth{self.camera_id}")

    def to_bytes(self):
        rec = np.zeros(self.point_count, dtype=RECORD)
        rec["xyz"] = self.points
        rec["rgb"] = self.colors
        return CLOUD_HEADER.pack(self.camera_id, self.timestamp_us, self.point_count) + rec.tobytes()

    @classmethod
    def from_bytes(cls, data):
        if len(data) < CLOUD_HEADER.size:
            raise MalformedPayload("cloud payload shorter than its header")
        cid, ts, n = CLOUD_HEADER.unpack_from(data)
        if len(data) != CLOUD_HEADER.size + n * RECORD.itemsize:
            raise MalformedPayload(f"cloud payload length {len(data)} does not match {n} points")
        rec = np.frombuffer(data, dtype=RECORD, offset=CLOUD_HEADER.size, count=n)
        return cls(cid, ts, rec["xyz"].copy(), rec["rgb"].copy())

    def to_message(self):
        return WireMessage(MsgType.CLOUD, self.to_bytes())


def json_message(msg_type, obj):
    return WireMessage(msg_type, json.dumps(obj, sort_keys=True).encode("utf-8"))


def parse_json(msg):
    try:
        obj = json.loads(msg.payload.decode("utf-8")) if msg.payload else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedPayload(f"bad JSON payload: {exc}") from None
    if not isinstance(obj, dict):
        raise MalformedPayload("JSON payload must be an object")
    return obj


# ------------------------------------------------------------ grouping


@dataclass
class FrameGroup:
    timestamp_us: int
    packets: dict  # camera_id -> CloudPacket
    opened_at: float = 0.0

    @property
    def complete_for(self):
        return frozenset(self.packets)


class FrameGrouper:
    """Groups cloud packets into fusion frames by timestamp.

    A packet joins the earliest open group within ``window_us`` of it that
    lacks its camera. Otherwise it is late, and dropped, when its timestamp
    is no newer than the last emitted group plus the window; if not, it
    opens a new group. Groups are emitted once every expected camera has
    contributed, or ``timeout_s`` of wall-clock time after they opened.
    Emission always runs in timestamp order, so completing a group first
    flushes any older open ones.
    """

    def __init__(self, expected, window_us=DEFAULT_WINDOW_US, timeout_s=None, clock=time.monotonic):
        self.expected = set(expected)
        self.window_us = int(window_us)
        self.timeout_s = window_us / 1e6 if timeout_s is None else timeout_s
        self.clock = clock
        self.open = []
        self.last_emitted = None
        self.dropped = 0
        self.emitted = 0

    def _emit_through(self, k):
        out = self.open[:k + 1]
        del self.open[:k + 1]
        for g in out:
            self.last_emitted = g.timestamp_us if self.last_emitted is None else max(self.last_emitted, g.timestamp_us)
        self.emitted += len(out)
        return out

    def _emit_complete(self):
        out = []
        while True:
            k = next((i for i, g in enumerate(self.open) if self.expected <= set(g.packets)), None)
            if k is None:
                return out
            out += self._emit_through(k)

    def add(self, pkt):
        ts = pkt.timestamp_us
        for g in self.open:
            if abs(ts - g.timestamp_us) <= self.window_us and pkt.camera_id not in g.packets:
                g.packets[pkt.camera_id] = pkt
                return self._emit_complete()
        if self.last_emitted is not None and ts <= self.last_emitted + self.window_us:
            self.dropped += 1
            return []
        g = FrameGroup(ts, {pkt.camera_id: pkt}, self.clock())
        self.open.append(g)
        self.open.sort(key=lambda x: x.timestamp_us)
        return self._emit_complete()

    def poll(self):
        """Emit groups whose timeout has expired (and anything older)."""
        now = self.clock()
        k = max((i for i, g in enumerate(self.open) if now - g.opened_at >= self.timeout_s), default=None)
        return [] if k is None else self._emit_through(k)

    def remove(self, camera_id):
        """Stop waiting for a camera (its node disconnected)."""
        self.expected.discard(camera_id)
        return self._emit_complete()

    def add_camera(self, camera_id):
        self.expected.add(camera_id)

    def flush(self):
        return self._emit_through(len(self.open) - 1) if self.open else []


def group_to_model(group, rig):
    return fuse({cid: p.to_cloud() for cid, p in group.packets.items()}, rig, group.timestamp_us)


# ------------------------------------------------------------ hub


@dataclass
class HubStats:
    groups: int = 0
    group_sizes: list = field(default_factory=list)
    dropped: int = 0
    protocol_errors: int = 0
    nodes_seen: int = 0
    digests: list = field(default_factory=list)
    frame_times: list = field(default_factory=list)

    @property
    def fps(self):
        if len(self.frame_times) < 2:
            return float("nan")
        return (len(self.frame_times) - 1) / (self.frame_times[-1] - self.frame_times[0])


class Hub:
    """Receives clouds from nodes, groups, fuses and renders composites.

    Reception and grouping run on the event loop; fusion and rendering run
    on a single worker thread fed in timestamp order, so a slow render never
    stalls reading from the sockets. ``keep`` controls what is retained per
    composite: ``"digest"`` (SHA-256), ``"image"`` or nothing.
    """

    def __init__(self, rig, view_config=None, layout=None, window_us=DEFAULT_WINDOW_US,
                 timeout_s=None, out_dir=None, fmt="ppm", keep="digest", expected=None):
        self.rig = rig
        self.view_config = view_config or ViewConfig.from_rig(rig)
        self.layout = layout or CompositeLayout(canvas=(3 * self.view_config.size,) * 2)
        self.window_us = window_us
        self.out_dir = Path(out_dir) if out_dir else None
        self.fmt = fmt
        self.keep = keep
        self.stats = HubStats()
        self.images = []
        # wait for every rig camera by default; one that never connects is covered by the timeout
        self.grouper = FrameGrouper(expected if expected is not None else rig.camera_ids, window_us, timeout_s)
        self._queue = None
        self._executor = ThreadPoolExecutor(max_workers=1, thread_name_prefix="hub-render")
        self._active = set()
        self._done = None
        self._expect_nodes = None
        self._frame_index = 0
        self.server = None

    # rendering stage
    def _render(self, group):
        model = group_to_model(group, self.rig)
        img = render_composite(model, self.view_config, self.layout)
        if self.out_dir is not None:
            write_frame(self.out_dir, self._frame_index, img, self.fmt)
        self._frame_index += 1
        return img, len(group.packets)

    async def _render_loop(self):
        loop = asyncio.get_running_loop()
        while True:
            group = await self._queue.get()
            if group is None:
                return
            img, n = await loop.run_in_executor(self._executor, self._render, group)
            self.stats.groups += 1
            self.stats.group_sizes.append(n)
            self.stats.frame_times.append(time.perf_counter())
            if self.keep == "digest":
                self.stats.digests.append(hashlib.sha256(img.tobytes()).hexdigest())
            elif self.keep == "image":
                self.images.append(img)

    def _dispatch(self, groups):
        for g in groups:
            self._queue.put_nowait(g)
        self.stats.dropped = self.grouper.dropped

    async def _poll_loop(self):
        while True:
            await asyncio.sleep(min(0.005, self.grouper.timeout_s / 4 or 0.005))
            self._dispatch(self.grouper.poll())

    async def _handle(self, reader, writer):
        cid = None
        try:
            hello = await read_message(reader)
            if hello is None:
                return
            if hello.msg_type != MsgType.HELLO:
                raise MalformedPayload("expected HELLO")
            info = parse_json(hello)
            cid = int(info.get("camera_id", -1))
            if cid not in self.rig.camera_ids or cid in self._active:
                writer.write(encode(json_message(MsgType.CONFIG, {"accepted": False,
                                                                  "error": f"camera {cid} rejected"})))
                await writer.drain()
                cid = None
                return
            self._active.add(cid)
            self.stats.nodes_seen += 1
            self.grouper.add_camera(cid)
            writer.write(encode(json_message(MsgType.CONFIG, {"accepted": True, "window_us": self.window_us})))
            await writer.drain()
            while True:
                msg = await read_message(reader)
                if msg is None:
                    break
                if msg.msg_type == MsgType.CLOUD:
                    pkt = CloudPacket.from_bytes(msg.payload)
                    if pkt.camera_id != cid:
                        raise MalformedPayload(f"camera {pkt.camera_id} sent on camera {cid}'s connection")
                    self._dispatch(self.grouper.add(pkt))
                elif msg.msg_type == MsgType.BYE:
                    writer.write(encode(WireMessage(MsgType.ACK)))
                    await writer.drain()
                    break
        except ProtocolError as exc:
            self.stats.protocol_errors += 1
            log.warning("node %s: protocol error: %s", cid, exc)
        except (ConnectionError, asyncio.IncompleteReadError) as exc:
            log.warning("node %s: connection lost: %s", cid, exc)
        finally:
            if cid is not None:
                self._active.discard(cid)
                self._dispatch(self.grouper.remove(cid))
                self._check_done()
            writer.close()

    def _check_done(self):
        if (self._expect_nodes is not None and self.stats.nodes_seen >= self._expect_nodes
                and not self._active and self._done is not None and not self._done.done()):
            self._done.set_result(True)

    async def start(self, host="127.0.0.1", port=DEFAULT_PORT):
        self._queue = asyncio.Queue()
        self._done = asyncio.get_running_loop().create_future()
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        self.server = await asyncio.start_server(self._handle, host, port)
        self._tasks = [asyncio.create_task(self._render_loop()), asyncio.create_task(self._poll_loop())]
        return self.server.sockets[0].getsockname()[1]

    async def wait_for_nodes(self, n):
        """Return after ``n`` nodes have connected and all of them have left."""
        self._expect_nodes = n
        self._check_done()
        await self._done

    async def stop(self):
        self.server.close()
        await self.server.wait_closed()
        self._tasks[1].cancel()
        self._dispatch(self.grouper.flush())
        await self._queue.put(None)
        await self._tasks[0]
        self._executor.shutdown(wait=True)
        return self.stats


async def run_hub(rig, host="127.0.0.1", port=DEFAULT_PORT, nodes=None, **kw):
    """Serve until ``nodes`` nodes have come and gone (forever when ``None``)."""
    hub = Hub(rig, **kw)
    await hub.start(host, port)
    try:
        if nodes is None:
            await asyncio.Event().wait()
        else:
            await hub.wait_for_nodes(nodes)
    finally:
        stats = await hub.stop()
    return stats


# ------------------------------------------------------------ nodes


@dataclass
class NodeStats:
    frames: int = 0
    points: int = 0
    reconnects: int = 0
    elapsed_s: float = 0.0


class SensorSource:
    """Frames of one sensor from a generated or recorded sequence directory.

    Layout: ``<root>/rig.calib.json`` and ``<root>/cam<id>/{depth,color,mask}/NNNNNN.png``
    with ``<root>/cam<id>/background.png``.
    """

    def __init__(self, root, camera_id, rig=None, mask_source="segment",
                 threshold=DEFAULT_THRESHOLD, iterations=1, period_us=100_000):
        self.root = Path(root)
        self.camera_id = camera_id
        self.rig = rig if rig is not None else RigCalibration.load(self.root / "rig.calib.json")
        self.depth_cam = self.rig.camera(camera_id, "depth")
        self.color_cam = self.rig.camera(camera_id, "color")
        self.mask_source = mask_source
        self.threshold = threshold
        self.iterations = iterations
        self.period_us = period_us
        cam_dir = self.root / f"cam{camera_id}"
        self.depth_files = list_frames(cam_dir / "depth")
        self.color_files = list_frames(cam_dir / "color")
        if len(self.depth_files) != len(self.color_files):
            from .errors import MissingFrame

            raise MissingFrame(f"camera {camera_id}: {len(self.depth_files)} depth vs "
                               f"{len(self.color_files)} color frames")
        self.mask_files = list_frames(cam_dir / "mask") if mask_source == "gt" else None
        self.background = read_image(cam_dir / "background.png") if mask_source == "segment" else None

    def __len__(self):
        return len(self.depth_files)

    def cloud(self, i):
        depth = read_depth_mm(self.depth_files[i])
        color = read_image(self.color_files[i])
        if self.mask_source == "gt":
            mask = read_mask(self.mask_files[i])
        elif self.mask_source == "segment":
            mask = segment_iterative(color, self.background, OpeningRefiner(), self.iterations, self.threshold)
        else:
            mask = None
        return sensor_cloud(depth, color, mask, self.depth_cam, self.color_cam)

    def packet(self, i):
        return CloudPacket.from_cloud(self.camera_id, i * self.period_us, self.cloud(i))

    def packets(self):
        for i in range(len(self)):
            yield self.packet(i)


def offline_composites(root, camera_ids=None, view_config=None, layout=None, mask_source="segment",
                       threshold=DEFAULT_THRESHOLD, iterations=1, rig=None):
    """Fuse and render a sequence directly from files, without any networking."""
    rig = rig if rig is not None else RigCalibration.load(Path(root) / "rig.calib.json")
    camera_ids = camera_ids or rig.camera_ids
    view_config = view_config or ViewConfig.from_rig(rig)
    layout = layout or CompositeLayout(canvas=(3 * view_config.size,) * 2)
    sources = [SensorSource(root, c, rig, mask_source, threshold, iterations) for c in camera_ids]
    for i in range(min(len(s) for s in sources)):
        clouds = {s.camera_id: CloudPacket.from_cloud(s.camera_id, 0, s.cloud(i)).to_cloud() for s in sources}
        yield render_composite(fuse(clouds, rig, i), view_config, layout)


def save_recording(path, packets):
    """Store packets as a plain concatenation of encoded CLOUD messages."""
    with open(path, "wb") as fh:
        for p in packets:
            fh.write(encode(p.to_message()))


def load_recording(path):
    data = Path(path).read_bytes()
    out = []
    pos = 0
    while pos < len(data):
        if len(data) - pos < HEADER.size:
            raise Truncated("recording ends inside a header")
        _, _, length = _check_header(data[pos:pos + HEADER.size])
        end = pos + HEADER.size + length + CRC.size
        msg = decode(data[pos:end])
        out.append(CloudPacket.from_bytes(msg.payload))
        pos = end
    return out


async def _connect(host, port, camera_id, retries, backoff):
    delay = backoff
    for attempt in range(retries + 1):
        try:
            reader, writer = await asyncio.open_connection(host, port)
            writer.write(encode(json_message(MsgType.HELLO, {"camera_id": camera_id, "version": VERSION})))
            await writer.drain()
            reply = await read_message(reader)
            if reply is None or reply.msg_type != MsgType.CONFIG:
                raise ConnectionLost("hub closed during handshake")
            cfg = parse_json(reply)
            if not cfg.get("accepted", False):
                raise ConnectionLost(f"hub rejected camera {camera_id}: {cfg.get('error', '')}")
            return reader, writer, cfg
        except (OSError, ConnectionError, asyncio.IncompleteReadError):
            if attempt == retries:
                break
            await asyncio.sleep(delay)
            delay *= 2
    raise ConnectionLost(f"could not reach hub at {host}:{port} after {retries + 1} attempts")


async def stream_packets(packets, camera_id, host="127.0.0.1", port=DEFAULT_PORT, fps=None,
                         retries=5, backoff=0.1):
    """Handshake, send every packet (optionally paced), then BYE.

    A dropped connection is re-established with exponential backoff and the
    current packet is resent; giving up raises :class:`ConnectionLost`.
    """
    stats = NodeStats()
    start = time.perf_counter()
    reader, writer, _ = await _connect(host, port, camera_id, retries, backoff)
    period = 1.0 / fps if fps else 0.0
    it = iter(packets)
    try:
        while True:
            try:
                pkt = next(it)
            except StopIteration:
                break
            if period:
                wait = start + stats.frames * period - time.perf_counter()
                if wait > 0:
                    await asyncio.sleep(wait)
            data = encode(pkt.to_message())
            for attempt in range(retries + 1):
                try:
                    writer.write(data)
                    await writer.drain()
                    break
                except (ConnectionError, OSError):
                    if attempt == retries:
                        raise ConnectionLost("connection to hub lost") from None
                    stats.reconnects += 1
                    reader, writer, _ = await _connect(host, port, camera_id, retries, backoff)
            stats.frames += 1
            stats.points += pkt.point_count
            # yield to the loop so co-hosted tasks (and the hub) make progress
            await asyncio.sleep(0)
        writer.write(encode(WireMessage(MsgType.BYE)))
        await writer.drain()
        try:
            await asyncio.wait_for(read_message(reader), timeout=5.0)
        except (asyncio.TimeoutError, ProtocolError, ConnectionError):
            pass
    finally:
        writer.close()
    stats.elapsed_s = time.perf_counter() - start
    return stats


async def run_node(source, camera_id, host="127.0.0.1", port=DEFAULT_PORT, fps=None, **source_kw):
    """Process a sensor's frames from ``source`` and stream them to the hub."""
    src = source if isinstance(source, SensorSource) else SensorSource(source, camera_id, **source_kw)
    return await stream_packets(src.packets(), camera_id, host, port, fps)


async def replay_node(recording, camera_id, host="127.0.0.1", port=DEFAULT_PORT, fps=None):
    """Send pre-computed packets (a list or a recording file) without reprocessing."""
    packets = load_recording(recording) if isinstance(recording, (str, Path)) else list(recording)
    return await stream_packets(packets, camera_id, host, port, fps)
