import asyncio
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from holotele.calibration import RigCalibration
from holotele.display import ViewConfig
from holotele.errors import (BadMagic, BadVersion, ConnectionLost, CrcMismatch, MalformedPayload,
                             ProtocolError, Truncated, UnknownType)
from holotele.geometry import PointCloud
from holotele.netstream import (HEADER, MAGIC, CloudPacket, FrameGrouper, Hub, MsgType, SensorSource,
                                WireMessage, decode, encode, json_message, load_recording,
                                offline_composites, read_message, replay_node, run_node,
                                save_recording, stream_packets)


def pkt(cam, ts, n=0):
    rng = np.random.default_rng(cam * 1000 + ts)
    return CloudPacket(cam, ts, rng.normal(size=(n, 3)).astype(np.float32),
                       rng.integers(0, 256, (n, 3), dtype=np.uint8))


class TestCodec:
    def test_empty_ack(self):
        raw = encode(WireMessage(MsgType.ACK))
        assert len(raw) == HEADER.size + 4
        assert decode(raw) == WireMessage(MsgType.ACK)
        assert encode(decode(raw)) == raw

    def test_layout(self):
        raw = encode(WireMessage(MsgType.CLOUD, b"abc"))
        assert raw[:4] == MAGIC and raw[4] == 1 and raw[5] == 3
        assert int.from_bytes(raw[6:10], "little") == 3
        assert raw[10:13] == b"abc"
        assert int.from_bytes(raw[13:], "little") == zlib.crc32(raw[4:13])

    def test_payload_flip(self):
        raw = bytearray(encode(WireMessage(MsgType.CLOUD, b"hello world")))
        raw[HEADER.size + 3] ^= 0x40
        with pytest.raises(CrcMismatch):
            decode(bytes(raw))

    def test_distinct_errors(self):
        raw = encode(WireMessage(MsgType.HELLO, b"{}"))
        with pytest.raises(BadMagic):
            decode(b"XOLO" + raw[4:])
        with pytest.raises(Truncated):
            decode(raw[:-1])
        with pytest.raises(Truncated):
            decode(raw[:5])
        with pytest.raises(BadVersion):
            decode(raw[:4] + b"\x07" + raw[5:])
        bad_type = bytearray(raw[:-4])
        bad_type[5] = 99
        bad_type += zlib.crc32(bytes(bad_type[4:])).to_bytes(4, "little")
        with pytest.raises(UnknownType):
            decode(bytes(bad_type))
        with pytest.raises(MalformedPayload):
            decode(raw + b"\x00")
        for cls in (BadMagic, Truncated, CrcMismatch, UnknownType):
            assert issubclass(cls, ProtocolError)

    @settings(max_examples=300, deadline=None)
    @given(st.sampled_from(list(MsgType)), st.binary(max_size=300))
    def test_round_trip(self, t, payload):
        m = WireMessage(t, payload)
        raw = encode(m)
        assert decode(raw) == m and encode(decode(raw)) == raw

    @settings(max_examples=300, deadline=None)
    @given(st.binary(min_size=0, max_size=200), st.data())
    def test_single_byte_corruption_detected(self, payload, data):
        raw = bytearray(encode(WireMessage(MsgType.CLOUD, payload)))
        i = data.draw(st.integers(0, len(raw) - 1))
        raw[i] ^= data.draw(st.integers(1, 255))
        with pytest.raises(ProtocolError):
            decode(bytes(raw))

    def test_stream_reader(self):
        async def go():
            r = asyncio.StreamReader()
            r.feed_data(encode(WireMessage(MsgType.HELLO, b"{}")) + encode(WireMessage(MsgType.BYE)))
            r.feed_eof()
            a = await read_message(r)
            b = await read_message(r)
            c = await read_message(r)
            return a, b, c

        a, b, c = asyncio.run(go())
        assert a.msg_type == MsgType.HELLO and b.msg_type == MsgType.BYE and c is None


class TestCloudPacket:
    def test_round_trip(self, rng):
        cloud = PointCloud(rng.normal(size=(100, 3)), rng.integers(0, 256, (100, 3)), "depth2")
        p = CloudPacket.from_cloud(2, 123456789012, cloud)
        raw = p.to_bytes()
        assert len(raw) == 16 + 16 * 100
        q = CloudPacket.from_bytes(raw)
        assert q == p and q.to_bytes() == raw
        assert np.array_equal(q.to_cloud().points, cloud.points.astype(np.float32).astype(np.float64))
        assert raw[:2] == (2).to_bytes(2, "little")
        assert raw[2:10] == (123456789012).to_bytes(8, "little")
        assert raw[10:14] == (100).to_bytes(4, "little")

    def test_empty_heartbeat(self):
        p = CloudPacket.from_cloud(1, 0, PointCloud.empty("depth1"))
        assert p.point_count == 0 and len(p.to_bytes()) == 16

    def test_bad_length(self):
        raw = pkt(1, 0, 3).to_bytes()
        with pytest.raises(MalformedPayload):
            CloudPacket.from_bytes(raw[:-1])
        with pytest.raises(MalformedPayload):
            CloudPacket.from_bytes(raw[:10])

    def test_recording(self, tmp_path):
        ps = [pkt(3, i * 100, i) for i in range(5)]
        save_recording(tmp_path / "r.bin", ps)
        assert load_recording(tmp_path / "r.bin") == ps


class FakeClock:
    def __init__(self):
        self.t = 0.0

    def __call__(self):
        return self.t


class TestGrouper:
    def test_identical_timestamps(self):
        g = FrameGrouper([1, 2, 3, 4], 50_000)
        out = []
        for f in range(5):
            for c in (1, 2, 3, 4):
                out += g.add(pkt(c, f * 100_000))
        assert [len(x.packets) for x in out] == [4] * 5 and g.dropped == 0

    def test_within_window_jitter(self):
        g = FrameGrouper([1, 2], 50_000)
        assert g.add(pkt(1, 1000)) == []
        out = g.add(pkt(2, 40_000))
        assert len(out) == 1 and set(out[0].packets) == {1, 2}

    def test_late_node_gives_groups_of_three(self):
        clock = FakeClock()
        g = FrameGrouper([1, 2, 3, 4], 50_000, clock=clock)
        events = []
        for f in range(6):
            events += [(f * 0.1, c, f * 100_000) for c in (1, 2, 3)]
            events.append((f * 0.1 + 0.1, 4, f * 100_000))  # arrives two windows late
        events.sort(key=lambda e: e[0])
        out = []
        for t, c, ts in events:
            clock.t = t
            out += g.poll()
            out += g.add(pkt(c, ts))
        clock.t = 10.0
        out += g.poll()
        assert [len(x.packets) for x in out] == [3] * 6
        assert all(4 not in x.packets for x in out)
        assert g.dropped == 6

    def test_duplicate_camera_opens_new_group(self):
        g = FrameGrouper([1, 2], 50_000)
        g.add(pkt(1, 0))
        g.add(pkt(1, 10))
        assert len(g.open) == 2

    def test_deterministic(self):
        seq = [(c, ts) for ts in (0, 100_000, 30_000, 200_000, 130_000) for c in (2, 1)]

        def run():
            g = FrameGrouper([1, 2], 50_000)
            out = []
            for c, ts in seq:
                out += g.add(pkt(c, ts))
            out += g.flush()
            return [(x.timestamp_us, sorted(x.packets)) for x in out], g.dropped

        assert run() == run()

    def test_remove_releases_group(self):
        g = FrameGrouper([1, 2], 50_000)
        g.add(pkt(1, 0))
        out = g.remove(2)
        assert len(out) == 1 and list(out[0].packets) == [1]


# ------------------------------------------------------------ hub and nodes

def _seq(seq_root):
    root, _ = seq_root
    return root / "seq"


async def _capture_server(messages):
    async def handle(reader, writer):
        while True:
            m = await read_message(reader)
            if m is None:
                break
            messages.append(m)
            if m.msg_type == MsgType.HELLO:
                writer.write(encode(json_message(MsgType.CONFIG, {"accepted": True, "window_us": 50_000})))
            elif m.msg_type == MsgType.BYE:
                writer.write(encode(WireMessage(MsgType.ACK)))
            await writer.drain()
        writer.close()

    server = await asyncio.start_server(handle, "127.0.0.1", 0)
    return server, server.sockets[0].getsockname()[1]


class TestNode:
    def test_message_sequence(self):
        async def go():
            msgs = []
            server, port = await _capture_server(msgs)
            packets = [pkt(2, i * 100_000, 5) for i in range(10)]
            stats = await stream_packets(packets, 2, "127.0.0.1", port)
            await asyncio.sleep(0.05)
            server.close()
            await server.wait_closed()
            return msgs, stats

        msgs, stats = asyncio.run(go())
        types = [m.msg_type for m in msgs]
        assert types == [MsgType.HELLO] + [MsgType.CLOUD] * 10 + [MsgType.BYE]
        assert stats.frames == 10 and stats.points == 50

    def test_connection_refused(self):
        async def go():
            server = await asyncio.start_server(lambda r, w: None, "127.0.0.1", 0)
            port = server.sockets[0].getsockname()[1]
            server.close()
            await server.wait_closed()
            return await stream_packets([], 1, "127.0.0.1", port, retries=2, backoff=0.01)

        with pytest.raises(ConnectionLost):
            asyncio.run(go())

    def test_background_frames_give_empty_packets(self, seq_root):
        from holotele.fusion import sensor_cloud
        from holotele.imageio import read_depth_mm, read_image

        src = SensorSource(_seq(seq_root), 1, mask_source=None)
        depth = read_depth_mm(src.depth_files[0])
        cloud = sensor_cloud(depth, read_image(src.color_files[0]), np.zeros(depth.shape, bool),
                             src.depth_cam, src.color_cam)
        assert CloudPacket.from_cloud(1, 0, cloud).point_count == 0

    def test_node_matches_offline(self, seq_root):
        seq = _seq(seq_root)

        async def go():
            msgs = []
            server, port = await _capture_server(msgs)
            await run_node(seq, 3, "127.0.0.1", port, mask_source="gt")
            server.close()
            await server.wait_closed()
            return [CloudPacket.from_bytes(m.payload) for m in msgs if m.msg_type == MsgType.CLOUD]

        got = asyncio.run(go())
        src = SensorSource(seq, 3, mask_source="gt")
        want = [CloudPacket.from_cloud(3, i * src.period_us, src.cloud(i)) for i in range(len(src))]
        assert got == want and len(got) == 3


def run_hub_with_replays(seq, packets_by_cam, delays=None, **hub_kw):
    async def go():
        rig = RigCalibration.load(seq / "rig.calib.json")
        hub = Hub(rig, **hub_kw)
        port = await hub.start("127.0.0.1", 0)

        async def node(cid, ps):
            if delays and cid in delays:
                await asyncio.sleep(delays[cid])
            return await replay_node(ps, cid, "127.0.0.1", port)

        await asyncio.gather(*(node(c, p) for c, p in packets_by_cam.items()))
        await hub.wait_for_nodes(len(packets_by_cam))
        return await hub.stop()

    return asyncio.run(go())


class TestHub:
    def test_matches_offline(self, seq_root):
        import hashlib

        seq = _seq(seq_root)
        rig = RigCalibration.load(seq / "rig.calib.json")
        cfg = ViewConfig.from_rig(rig, size=128)
        packets = {c: list(SensorSource(seq, c, rig, "segment").packets()) for c in rig.camera_ids}
        stats = run_hub_with_replays(seq, packets, view_config=cfg, timeout_s=5.0)
        offline = [hashlib.sha256(img.tobytes()).hexdigest()
                   for img in offline_composites(seq, view_config=cfg, mask_source="segment")]
        assert stats.group_sizes == [4, 4, 4] and stats.dropped == 0
        assert stats.digests == offline

    def test_protocol_error_isolated(self, seq_root):
        seq = _seq(seq_root)
        rig = RigCalibration.load(seq / "rig.calib.json")

        async def go():
            hub = Hub(rig, view_config=ViewConfig.from_rig(rig, size=32), timeout_s=5.0)
            port = await hub.start("127.0.0.1", 0)
            r, w = await asyncio.open_connection("127.0.0.1", port)
            w.write(b"GARBAGE-GARBAGE!")
            await w.drain()
            await r.read()
            w.close()
            ps = {c: [pkt(c, i * 100_000, 10) for i in range(2)] for c in rig.camera_ids}
            await asyncio.gather(*(replay_node(p, c, "127.0.0.1", port) for c, p in ps.items()))
            await hub.wait_for_nodes(4)
            return await hub.stop()

        stats = asyncio.run(go())
        assert stats.protocol_errors == 1
        assert stats.group_sizes == [4, 4]

    def test_unknown_camera_rejected(self, seq_root):
        seq = _seq(seq_root)
        rig = RigCalibration.load(seq / "rig.calib.json")

        async def go():
            hub = Hub(rig, view_config=ViewConfig.from_rig(rig, size=32))
            port = await hub.start("127.0.0.1", 0)
            try:
                await stream_packets([], 9, "127.0.0.1", port, retries=0)
            finally:
                await hub.stop()

        with pytest.raises(ConnectionLost):
            asyncio.run(go())
