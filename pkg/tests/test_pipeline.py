import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taskcodec.models import BundleConfig, build_bundle
from taskcodec.pipeline import (HEADER_SIZE, DeviceState, EncodedPacket,
                                PacketFormatError, ProtocolError, ServerState,
                                decode_frame, encode_frame, encode_frame_info,
                                measure_rate, parse_packet, read_container,
                                serialize_packet, write_container)

SMALL = BundleConfig(devices=2, image_hw=(16, 16), feat_channels=2,
                     hyper_channels=2, grid=4, tau1=1, tau2=1)


def _endpoints(cfg=SMALL, seed=0, devices=None):
    bundle = build_bundle(cfg, seed=seed)
    devs = []
    server = ServerState()
    for k in range(cfg.devices if devices is None else devices):
        spec, params = bundle.extractor(k)
        devs.append(DeviceState(device_id=k, extractor_spec=spec,
                                extractor_params=params, hyper=bundle.hyper(k),
                                temporal=bundle.temporal(k)))
        server.add_device(k, bundle.hyper(k), bundle.temporal(k))
    return bundle, devs, server


def _packet(rng):
    return EncodedPacket(
        mode=0, device_id=int(rng.integers(0, 100)),
        timestamp=int(rng.integers(1, 10 ** 6)),
        feature_dims=tuple(int(v) for v in rng.integers(1, 30, 3)),
        hyper_dims=tuple(int(v) for v in rng.integers(1, 30, 3)),
        hyper_bytes=bytes(rng.integers(0, 256, int(rng.integers(0, 40))).astype(np.uint8)),
        feature_bytes=bytes(rng.integers(0, 256, int(rng.integers(4, 60))).astype(np.uint8)))


class TestPacketFormat:
    def test_header_is_32_bytes(self):
        # 4 magic + 1 version + 1 mode + 2 device + 4 timestamp
        # + 6 feature dims + 6 hyper dims + 4 + 4 substream lengths
        assert HEADER_SIZE == 4 + 1 + 1 + 2 + 4 + 6 + 6 + 4 + 4 == 32

    def test_serialize_parse_roundtrip(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            p = _packet(rng)
            q = parse_packet(serialize_packet(p))
            assert q == p

    def test_bad_magic(self):
        raw = bytearray(serialize_packet(_packet(np.random.default_rng(1))))
        raw[:4] = b"XXXX"
        with pytest.raises(PacketFormatError, match="bad magic"):
            parse_packet(bytes(raw))

    def test_truncated_payload_names_lengths(self):
        raw = serialize_packet(_packet(np.random.default_rng(2)))
        with pytest.raises(PacketFormatError, match="expected .* got"):
            parse_packet(raw[:-1])

    def test_unknown_mode(self):
        raw = bytearray(serialize_packet(_packet(np.random.default_rng(3))))
        raw[5] = 9
        with pytest.raises(PacketFormatError, match="unknown mode"):
            parse_packet(bytes(raw))

    def test_temporal_packets_carry_no_hyper_stream(self):
        with pytest.raises(PacketFormatError, match="hyper"):
            EncodedPacket(mode=1, device_id=0, timestamp=1,
                          feature_dims=(1, 1, 1), hyper_dims=(0, 0, 0),
                          hyper_bytes=b"xx", feature_bytes=b"\x00" * 4)

    @given(st.integers(0, 1), st.integers(0, 65535), st.integers(1, 2 ** 32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_roundtrip_property(self, mode, device_id, timestamp):
        p = EncodedPacket(mode=mode, device_id=device_id, timestamp=timestamp,
                          feature_dims=(2, 3, 4),
                          hyper_dims=(0, 0, 0) if mode else (1, 2, 2),
                          hyper_bytes=b"" if mode else b"abcd",
                          feature_bytes=b"\x01\x02\x03\x04")
        assert parse_packet(serialize_packet(p)) == p


class TestMeasureRate:
    def test_empty(self):
        assert measure_rate([]) == 0

    def test_byte_arithmetic(self):
        def fake(nbytes):
            return EncodedPacket(mode=0, device_id=0, timestamp=1,
                                 feature_dims=(1, 1, 1), hyper_dims=(1, 1, 1),
                                 hyper_bytes=b"", feature_bytes=b"x" * (nbytes - HEADER_SIZE))
        assert measure_rate([fake(100), fake(50)]) == 1200

    def test_additive_over_devices(self):
        rng = np.random.default_rng(5)
        packets = [_packet(rng) for _ in range(6)]
        assert measure_rate(packets) == sum(measure_rate([p]) for p in packets)


class TestEncodeDecode:
    def test_bootstrap_then_temporal(self):
        _, devs, server = _endpoints()
        rng = np.random.default_rng(0)
        frame = rng.uniform(size=(1, 16, 16))
        p1, _ = encode_frame(devs[0], frame)
        assert p1.mode == 0                          # no history yet
        p2, _ = encode_frame(devs[0], rng.uniform(size=(1, 16, 16)))
        assert p2.mode == 1
        assert len(p2.hyper_bytes) == 0
        assert decode_frame(server, p1) is not None
        assert decode_frame(server, p2) is not None

    def test_forced_hierarchical_policy(self):
        _, devs, server = _endpoints()
        rng = np.random.default_rng(1)
        for _ in range(3):
            p, sent = encode_frame(devs[0], rng.uniform(size=(1, 16, 16)),
                                   mode_policy="hierarchical")
            assert p.mode == 0
            got = decode_frame(server, p)
            np.testing.assert_array_equal(sent.values, got.values)

    def test_out_of_order_timestamp(self):
        _, devs, _ = _endpoints()
        rng = np.random.default_rng(2)
        encode_frame(devs[0], rng.uniform(size=(1, 16, 16)), timestamp=5)
        with pytest.raises(ProtocolError, match="out-of-order"):
            encode_frame(devs[0], rng.uniform(size=(1, 16, 16)), timestamp=5)

    def test_temporal_before_history_is_protocol_error(self):
        _, devs, server = _endpoints()
        rng = np.random.default_rng(3)
        encode_frame(devs[0], rng.uniform(size=(1, 16, 16)))
        p2, _ = encode_frame(devs[0], rng.uniform(size=(1, 16, 16)))
        assert p2.mode == 1
        with pytest.raises(ProtocolError, match="missing history"):
            decode_frame(server, p2)     # server never saw the bootstrap

    def test_roundtrip_many_random_frames(self):
        _, devs, server = _endpoints(seed=4)
        rng = np.random.default_rng(4)
        for t in range(1000):
            k = t % 2
            frame = rng.uniform(size=(1, 16, 16)) + 0.3 * rng.standard_normal((1, 16, 16))
            packet, sent = encode_frame(devs[k], frame)
            packet = parse_packet(serialize_packet(packet))
            got = decode_frame(server, packet)
            np.testing.assert_array_equal(sent.values, got.values)

    def test_history_mirrors_between_endpoints(self):
        _, devs, server = _endpoints(seed=5)
        rng = np.random.default_rng(5)
        for _ in range(5):
            p, _ = encode_frame(devs[1], rng.uniform(size=(1, 16, 16)))
            decode_frame(server, p)
        dev_hist = [q.values for q in devs[1].history]
        srv_hist = [q.values for q in server.feature_history(1)]
        assert len(dev_hist) == len(srv_hist)
        for a, b in zip(dev_hist, srv_hist):
            np.testing.assert_array_equal(a, b)

    def test_packet_bits_dominate_model_estimate(self):
        _, devs, server = _endpoints(seed=6)
        rng = np.random.default_rng(6)
        for t in range(10):
            packet, _, info = encode_frame_info(devs[0], rng.uniform(size=(1, 16, 16)))
            decode_frame(server, packet)
            assert 8 * packet.byte_length >= info.est_feature_bits + info.est_hyper_bits


class TestContainer:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(7)
        packets = [_packet(rng) for _ in range(5)]
        path = tmp_path / "run.tocs"
        write_container(path, packets)
        raw = path.read_bytes()
        assert raw[:4] == b"TOCS"
        assert int.from_bytes(raw[4:8], "little") == 5
        assert read_container(path) == packets

    def test_truncation_detected(self, tmp_path):
        rng = np.random.default_rng(8)
        path = tmp_path / "run.tocs"
        write_container(path, [_packet(rng)])
        path.write_bytes(path.read_bytes()[:-2])
        with pytest.raises(PacketFormatError, match="truncated"):
            read_container(path)
