"""Device-side encode path and server-side decode path, plus the wire format.

A packet carries one frame's quantized feature for one device. Hierarchical
packets (mode 0) also carry the coded hyper-latent that parameterizes the
feature's coding distribution; temporal packets (mode 1) carry no side
stream because both ends derive the distribution from already-transmitted
features.
"""
from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .autodiff import NetSpec, graph_forward
from .entropy import (HyperModel, TemporalModel, factorized_params, gu_bits,
                      gu_bits_per_element, hyper_path, split_and_clamp,
                      temporal_params)
from .quantize import QuantizedFeature, round_nearest
from .rangecoder import Bitstream, build_coding_tables, rc_decode, rc_encode

__all__ = [
    "PACKET_MAGIC", "CONTAINER_MAGIC", "HEADER_SIZE", "EncodedPacket",
    "serialize_packet", "parse_packet", "PacketFormatError", "ProtocolError",
    "DeviceState", "ServerState", "encode_frame", "decode_frame",
    "measure_rate", "write_container", "read_container", "EncodeInfo",
]

PACKET_MAGIC = b"TOCM"
CONTAINER_MAGIC = b"TOCS"
PACKET_VERSION = 1

# magic, version, mode, device_id, timestamp, feature dims, hyper dims,
# hyper substream length, feature substream length -- all little-endian
_HEADER = struct.Struct("<4sBBHIHHHHHHII")
HEADER_SIZE = _HEADER.size  # 32 bytes

MODE_HIERARCHICAL = 0
MODE_TEMPORAL = 1


class PacketFormatError(ValueError):
    """Malformed bytes: bad magic/version/lengths."""


class ProtocolError(ValueError):
    """Well-formed packet that violates the stream protocol."""


@dataclass
class EncodedPacket:
    mode: int
    device_id: int
    timestamp: int
    feature_dims: tuple[int, int, int]
    hyper_dims: tuple[int, int, int]
    hyper_bytes: bytes
    feature_bytes: bytes
    version: int = PACKET_VERSION

    def __post_init__(self):
        if self.mode == MODE_TEMPORAL and len(self.hyper_bytes):
            raise PacketFormatError("mode 1 packet must not carry a hyper substream")

    @property
    def byte_length(self) -> int:
        return HEADER_SIZE + len(self.hyper_bytes) + len(self.feature_bytes)


def serialize_packet(p: EncodedPacket) -> bytes:
    header = _HEADER.pack(
        PACKET_MAGIC, p.version, p.mode, p.device_id, p.timestamp,
        *p.feature_dims, *p.hyper_dims,
        len(p.hyper_bytes), len(p.feature_bytes))
    return header + p.hyper_bytes + p.feature_bytes


def parse_packet(data: bytes) -> EncodedPacket:
    if len(data) < HEADER_SIZE:
        raise PacketFormatError(
            f"truncated header: expected {HEADER_SIZE} bytes, got {len(data)}")
    (magic, version, mode, device_id, timestamp,
     fc, fh, fw, hc, hh, hw, hyper_len, feature_len) = _HEADER.unpack_from(data)
    if magic != PACKET_MAGIC:
        raise PacketFormatError(f"bad magic {magic!r}")
    if version != PACKET_VERSION:
        raise PacketFormatError(f"unsupported version {version}")
    if mode not in (MODE_HIERARCHICAL, MODE_TEMPORAL):
        raise PacketFormatError(f"unknown mode {mode}")
    expected = HEADER_SIZE + hyper_len + feature_len
    if len(data) != expected:
        raise PacketFormatError(
            f"truncated payload: expected {expected} bytes, got {len(data)}")
    if mode == MODE_TEMPORAL and hyper_len:
        raise PacketFormatError("mode 1 packet must not carry a hyper substream")
    body = memoryview(data)[HEADER_SIZE:]
    return EncodedPacket(
        mode=mode, device_id=device_id, timestamp=timestamp,
        feature_dims=(fc, fh, fw), hyper_dims=(hc, hh, hw),
        hyper_bytes=bytes(body[:hyper_len]),
        feature_bytes=bytes(body[hyper_len:hyper_len + feature_len]),
        version=version)


def measure_rate(packets) -> int:
    """Transmitted size in bits for a set of packets, headers included."""
    return 8 * sum(p.byte_length for p in packets)


def measure_rate_split(packets) -> tuple[int, int]:
    """(total bits, header bits)."""
    packets = list(packets)
    return measure_rate(packets), 8 * HEADER_SIZE * len(packets)


# --------------------------------------------------------------------------
# stateful endpoints

@dataclass
class DeviceState:
    device_id: int
    extractor_spec: NetSpec
    extractor_params: dict
    hyper: HyperModel
    temporal: TemporalModel | None = None
    history: deque = field(default=None)
    last_timestamp: int = 0

    def __post_init__(self):
        if self.history is None:
            maxlen = self.temporal.order if self.temporal else 1
            self.history = deque(maxlen=maxlen)


@dataclass
class _ServerPeer:
    hyper: HyperModel
    temporal: TemporalModel | None
    history: deque
    last_timestamp: int = 0


@dataclass
class ServerState:
    peers: dict[int, _ServerPeer] = field(default_factory=dict)

    def add_device(self, device_id: int, hyper: HyperModel,
                   temporal: TemporalModel | None = None):
        maxlen = temporal.order if temporal else 1
        self.peers[device_id] = _ServerPeer(hyper=hyper, temporal=temporal,
                                            history=deque(maxlen=maxlen))

    def feature_history(self, device_id: int):
        return self.peers[device_id].history


@dataclass
class EncodeInfo:
    """Side products of encoding used for reporting, never transmitted."""
    est_feature_bits: float
    est_hyper_bits: float
    per_element_bits: np.ndarray


def _int_dims(shape) -> tuple[int, int, int]:
    if len(shape) != 3:
        raise ValueError(f"expected (c, h, w) feature, got shape {shape}")
    return tuple(int(s) for s in shape)


def encode_frame(state: DeviceState, frame: np.ndarray, mode_policy: str = "auto",
                 timestamp: int | None = None):
    packet, qfeat, _ = encode_frame_info(state, frame, mode_policy, timestamp)
    return packet, qfeat


def encode_frame_info(state: DeviceState, frame: np.ndarray,
                      mode_policy: str = "auto", timestamp: int | None = None):
    """Extract, quantize, model, and range-code one frame.

    Temporal mode is used only when the policy allows it, a temporal model
    exists, and the history ring is full; otherwise the frame bootstraps
    through the hierarchical model.
    """
    if mode_policy not in ("auto", "hierarchical"):
        raise ValueError(f"unknown mode policy {mode_policy!r}")
    t = state.last_timestamp + 1 if timestamp is None else int(timestamp)
    if t <= state.last_timestamp:
        raise ProtocolError(
            f"out-of-order timestamp {t} (last was {state.last_timestamp})")
    z = graph_forward(state.extractor_spec, state.extractor_params, frame)
    qfeat = round_nearest(z, device_id=state.device_id, timestamp=t)
    dims = _int_dims(qfeat.shape)

    use_temporal = (mode_policy == "auto" and state.temporal is not None
                    and len(state.history) == state.temporal.order)
    if use_temporal:
        prev = list(reversed(state.history))  # most recent first
        params = temporal_params(prev, state.temporal)
        feat_stream = rc_encode(qfeat.values.reshape(-1).tolist(),
                                build_coding_tables(params))
        packet = EncodedPacket(
            mode=MODE_TEMPORAL, device_id=state.device_id, timestamp=t,
            feature_dims=dims, hyper_dims=(0, 0, 0),
            hyper_bytes=b"", feature_bytes=feat_stream.data)
        est_hyper = 0.0
    else:
        _, v_hat, params = hyper_path(z, state.hyper, mode="infer")
        hyper_dims = _int_dims(v_hat.shape)
        prior_params = factorized_params(state.hyper.prior, hyper_dims)
        hyper_stream = rc_encode(v_hat.reshape(-1).tolist(),
                                 build_coding_tables(prior_params))
        feat_stream = rc_encode(qfeat.values.reshape(-1).tolist(),
                                build_coding_tables(params))
        packet = EncodedPacket(
            mode=MODE_HIERARCHICAL, device_id=state.device_id, timestamp=t,
            feature_dims=dims, hyper_dims=hyper_dims,
            hyper_bytes=hyper_stream.data, feature_bytes=feat_stream.data)
        est_hyper = gu_bits(v_hat, prior_params)

    per_element = gu_bits_per_element(qfeat.values, params)
    info = EncodeInfo(est_feature_bits=float(per_element.sum()),
                      est_hyper_bits=est_hyper,
                      per_element_bits=per_element)
    state.history.append(qfeat)
    state.last_timestamp = t
    return packet, qfeat, info


def decode_frame(server: ServerState, packet: EncodedPacket) -> QuantizedFeature:
    """Losslessly recovers the device's quantized feature and updates the
    server-side mirror history."""
    if packet.device_id not in server.peers:
        raise ProtocolError(f"unknown device {packet.device_id}")
    peer = server.peers[packet.device_id]
    if packet.timestamp <= peer.last_timestamp:
        raise ProtocolError(
            f"out-of-order timestamp {packet.timestamp} (last was {peer.last_timestamp})")
    dims = packet.feature_dims
    n = int(np.prod(dims))

    if packet.mode == MODE_TEMPORAL:
        if peer.temporal is None:
            raise ProtocolError("temporal packet for a device without a temporal model")
        if len(peer.history) < peer.temporal.order:
            raise ProtocolError(
                f"missing history: need {peer.temporal.order} features, "
                f"have {len(peer.history)}")
        prev = list(reversed(peer.history))
        params = temporal_params(prev, peer.temporal)
    elif packet.mode == MODE_HIERARCHICAL:
        hdims = packet.hyper_dims
        hn = int(np.prod(hdims))
        prior_params = factorized_params(peer.hyper.prior, hdims)
        v_vals = rc_decode(Bitstream(packet.hyper_bytes),
                           build_coding_tables(prior_params), hn)
        v_hat = np.asarray(v_vals, dtype=np.float64).reshape(hdims)
        raw = graph_forward(peer.hyper.dec_spec, peer.hyper.dec_params, v_hat)
        params = split_and_clamp(raw)
    else:
        raise PacketFormatError(f"unknown mode {packet.mode}")

    if params.shape != dims:
        raise ProtocolError(
            f"feature dims {dims} do not match model output {params.shape}")
    values = rc_decode(Bitstream(packet.feature_bytes),
                       build_coding_tables(params), n)
    qfeat = QuantizedFeature(np.asarray(values, dtype=np.int64).reshape(dims),
                             device_id=packet.device_id,
                             timestamp=packet.timestamp)
    peer.history.append(qfeat)
    peer.last_timestamp = packet.timestamp
    return qfeat


# --------------------------------------------------------------------------
# offline container: magic, u32 count, then length-prefixed packets

def write_container(path, packets):
    with open(path, "wb") as fh:
        fh.write(CONTAINER_MAGIC)
        fh.write(struct.pack("<I", len(packets)))
        for p in packets:
            raw = serialize_packet(p)
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)


def read_container(path) -> list[EncodedPacket]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CONTAINER_MAGIC:
        raise PacketFormatError(f"bad container magic {data[:4]!r}")
    (count,) = struct.unpack_from("<I", data, 4)
    offset = 8
    packets = []
    for _ in range(count):
        if offset + 4 > len(data):
            raise PacketFormatError("truncated container")
        (plen,) = struct.unpack_from("<I", data, offset)
        offset += 4
        if offset + plen > len(data):
            raise PacketFormatError("truncated container")
        packets.append(parse_packet(data[offset:offset + plen]))
        offset += plen
    return packets
