"""Core data types and the wire protocol shared by every node.

Frame layout (all multi-byte integers big-endian):

    | offset  | size | field                          |
    |---------|------|--------------------------------|
    | 0       | 4    | magic 0x52504D31 ("RPM1")      |
    | 4       | 1    | version (currently 1)          |
    | 5       | 1    | data category                  |
    | 6       | 4    | patient id                     |
    | 10      | 4    | seq (chunk index)              |
    | 14      | 4    | total (chunk count)            |
    | 18      | 4    | payload length                 |
    | 22      | n    | payload                        |
    | 22 + n  | 4    | CRC-32 over all previous bytes |

Everything here is a pure value or pure function; safe to share across
threads.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from enum import Enum, IntEnum

MAGIC = 0x52504D31
VERSION = 1
HEADER_SIZE = 22
CRC_SIZE = 4
MAX_PAYLOAD = 65536

_HEADER = struct.Struct(">IBBIIII")


class DataCategory(IntEnum):
    """Kinds of data a frame can carry; the unit the filter acts on."""

    VITALS = 0
    AUDIO_CLIP = 1
    KEYWORD_EVENT = 2
    CAMERA_CONTROL = 3
    IDENTITY = 4
    ACK = 5


class VitalKind(IntEnum):
    HEART_RATE = 0
    SPO2 = 1
    TEMPERATURE = 2


# Accepted physiological ranges per vital kind, (low, high) inclusive.
VITAL_RANGES = {
    VitalKind.HEART_RATE: (20.0, 250.0),
    VitalKind.SPO2: (0.0, 100.0),
    VitalKind.TEMPERATURE: (25.0, 45.0),
}

AUDIO_SAMPLE_RATE = 16000
AUDIO_BIT_DEPTH = 16
AUDIO_CLIP_SAMPLES = 16000  # exactly one second


class FrameError(Exception):
    """Base for anything that can go wrong at the frame layer."""


class ProtocolError(FrameError):
    """Bad magic or unsupported version."""


class ChecksumError(FrameError):
    """CRC-32 did not verify."""


class NeedMoreData(FrameError):
    """Buffer ends before the frame does; feed more bytes and retry."""


class OversizeError(FrameError):
    """Payload exceeds MAX_PAYLOAD."""


class ReassemblyError(Exception):
    """Base for segmentation/reassembly failures."""


class IncompleteReassembly(ReassemblyError):
    def __init__(self, missing):
        self.missing = frozenset(missing)
        super().__init__(f"missing seqs {sorted(self.missing)}")


class DuplicateSeqError(ReassemblyError):
    pass


class MixedStreamError(ReassemblyError):
    pass


def validate_patient_id(patient: int) -> int:
    if not 1 <= patient <= 0xFFFFFFFF:
        raise ValueError(f"patient id must be a nonzero u32, got {patient}")
    return patient


@dataclass(frozen=True)
class VitalSample:
    """One sensed measurement from a wearable."""

    patient: int
    timestamp_ms: int
    kind: VitalKind
    value: float

    def __post_init__(self):
        validate_patient_id(self.patient)
        lo, hi = VITAL_RANGES[VitalKind(self.kind)]
        if not lo <= self.value <= hi:
            raise ValueError(f"{VitalKind(self.kind).name} value {self.value} outside [{lo}, {hi}]")


@dataclass(frozen=True)
class AudioClip:
    """Exactly one second of mono 16 kHz 16-bit audio."""

    patient: int
    samples: tuple  # int16 values, length AUDIO_CLIP_SAMPLES
    sample_rate: int = AUDIO_SAMPLE_RATE
    bit_depth: int = AUDIO_BIT_DEPTH

    def __post_init__(self):
        validate_patient_id(self.patient)
        if self.sample_rate != AUDIO_SAMPLE_RATE:
            raise ValueError(f"sample rate must be {AUDIO_SAMPLE_RATE}")
        if self.bit_depth != AUDIO_BIT_DEPTH:
            raise ValueError(f"bit depth must be {AUDIO_BIT_DEPTH}")
        if len(self.samples) != AUDIO_CLIP_SAMPLES:
            raise ValueError(f"clip must hold {AUDIO_CLIP_SAMPLES} samples, got {len(self.samples)}")


def fit_clip_length(samples):
    """Pad with trailing zeros or truncate to exactly one second."""
    samples = list(samples[:AUDIO_CLIP_SAMPLES])
    samples.extend([0] * (AUDIO_CLIP_SAMPLES - len(samples)))
    return tuple(samples)


@dataclass(frozen=True)
class Frame:
    """The unit that crosses a socket: one category, one chunk of payload."""

    category: DataCategory
    patient: int
    seq: int
    total: int
    payload: bytes = b""

    def __post_init__(self):
        validate_patient_id(self.patient)
        DataCategory(self.category)
        if self.total < 1:
            raise ValueError(f"total must be >= 1, got {self.total}")
        if not 0 <= self.seq < self.total:
            raise ValueError(f"seq {self.seq} not in [0, {self.total})")
        if self.total > 0xFFFFFFFF:
            raise ValueError("total exceeds u32")
        if len(self.payload) > MAX_PAYLOAD:
            raise OversizeError(f"payload {len(self.payload)} exceeds {MAX_PAYLOAD}")

    @property
    def payload_len(self) -> int:
        return len(self.payload)


def encode_frame(frame: Frame) -> bytes:
    """Serialize a frame to its deterministic wire form."""
    if len(frame.payload) > MAX_PAYLOAD:
        raise OversizeError(f"payload {len(frame.payload)} exceeds {MAX_PAYLOAD}")
    head = _HEADER.pack(
        MAGIC, VERSION, int(frame.category), frame.patient, frame.seq, frame.total, len(frame.payload)
    )
    body = head + frame.payload
    return body + struct.pack(">I", zlib.crc32(body))


def decode_frame(buf: bytes) -> tuple[Frame, int]:
    """Decode one frame from the start of ``buf``.

    Returns (frame, bytes consumed). Raises ProtocolError on bad
    magic/version, ChecksumError on CRC mismatch, NeedMoreData when the
    buffer holds only a prefix of the frame.
    """
    if len(buf) < HEADER_SIZE:
        raise NeedMoreData(f"have {len(buf)} bytes, header needs {HEADER_SIZE}")
    magic, version, category, patient, seq, total, payload_len = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic 0x{magic:08X}")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    if payload_len > MAX_PAYLOAD:
        raise ProtocolError(f"declared payload {payload_len} exceeds {MAX_PAYLOAD}")
    end = HEADER_SIZE + payload_len + CRC_SIZE
    if len(buf) < end:
        raise NeedMoreData(f"have {len(buf)} bytes, frame needs {end}")
    body = buf[: HEADER_SIZE + payload_len]
    (crc,) = struct.unpack_from(">I", buf, HEADER_SIZE + payload_len)
    if crc != zlib.crc32(body):
        raise ChecksumError("CRC-32 mismatch")
    frame = Frame(
        category=DataCategory(category),
        patient=patient,
        seq=seq,
        total=total,
        payload=bytes(buf[HEADER_SIZE : HEADER_SIZE + payload_len]),
    )
    return frame, end


class StreamDecoder:
    """Incremental decoder for a byte stream of concatenated frames.

    Keeps the connection usable after garbage: on a protocol error it
    skips one byte and rescans for the next magic. CRC failures consume
    the whole bad frame. Both are reported via counters.
    """

    def __init__(self):
        self._buf = bytearray()
        self.crc_failures = 0
        self.malformed = 0

    def feed(self, data: bytes):
        self._buf.extend(data)

    def frames(self):
        """Yield every complete frame currently buffered."""
        while True:
            if not self._buf:
                return
            try:
                frame, used = decode_frame(bytes(self._buf))
            except NeedMoreData:
                return
            except ProtocolError:
                self.malformed += 1
                del self._buf[:1]
                idx = self._buf.find(b"RPM1")
                if idx > 0:
                    del self._buf[:idx]
                elif idx < 0:
                    # keep a short tail in case magic straddles the boundary
                    del self._buf[: max(0, len(self._buf) - 3)]
                continue
            except ChecksumError:
                self.crc_failures += 1
                # header parsed, so the declared length is trustworthy enough to skip
                payload_len = _HEADER.unpack_from(self._buf)[6]
                del self._buf[: HEADER_SIZE + payload_len + CRC_SIZE]
                continue
            del self._buf[:used]
            yield frame


def segment_payload(patient: int, category: DataCategory, payload: bytes, chunk_size: int) -> list[Frame]:
    """Split a payload into chunk frames; empty payload yields one empty frame."""
    if chunk_size < 1:
        raise ValueError(f"chunk_size must be >= 1, got {chunk_size}")
    if chunk_size > MAX_PAYLOAD:
        raise OversizeError(f"chunk_size {chunk_size} exceeds {MAX_PAYLOAD}")
    chunks = [payload[i : i + chunk_size] for i in range(0, len(payload), chunk_size)] or [b""]
    total = len(chunks)
    return [
        Frame(category=category, patient=patient, seq=i, total=total, payload=chunk)
        for i, chunk in enumerate(chunks)
    ]


def reassemble(frames) -> bytes:
    """Rebuild the payload from chunk frames, in any arrival order."""
    frames = list(frames)
    if not frames:
        raise ValueError("no frames to reassemble")
    first = frames[0]
    by_seq = {}
    for f in frames:
        if (f.patient, f.category, f.total) != (first.patient, first.category, first.total):
            raise MixedStreamError("frames mix patients, categories or totals")
        if f.seq in by_seq:
            raise DuplicateSeqError(f"seq {f.seq} seen twice")
        by_seq[f.seq] = f
    missing = set(range(first.total)) - set(by_seq)
    if missing:
        raise IncompleteReassembly(missing)
    return b"".join(by_seq[i].payload for i in range(first.total))


# --- payload codecs for the individual categories ------------------------

_VITALS = struct.Struct(">QBd")


def encode_vitals_payload(sample: VitalSample) -> bytes:
    return _VITALS.pack(sample.timestamp_ms, int(sample.kind), sample.value)


def decode_vitals_payload(patient: int, payload: bytes) -> VitalSample:
    ts, kind, value = _VITALS.unpack(payload)
    return VitalSample(patient=patient, timestamp_ms=ts, kind=VitalKind(kind), value=value)


def encode_audio_payload(samples) -> bytes:
    """Clip samples as big-endian int16, matching the wire's byte order."""
    return struct.pack(f">{len(samples)}h", *samples)


def decode_audio_payload(payload: bytes) -> tuple:
    if len(payload) % 2:
        payload = payload[:-1]
    return struct.unpack(f">{len(payload) // 2}h", payload)


def encode_keyword_payload(label_index: int, confidence: float, label: str) -> bytes:
    """Compact classification result; always well under 64 bytes."""
    name = label.encode("utf-8")[:48]
    return struct.pack(">Hd", label_index, confidence) + struct.pack(">B", len(name)) + name


def decode_keyword_payload(payload: bytes) -> tuple[int, float, str]:
    label_index, confidence = struct.unpack_from(">Hd", payload)
    (n,) = struct.unpack_from(">B", payload, 10)
    return label_index, confidence, payload[11 : 11 + n].decode("utf-8")


def encode_identity_payload(name: str, extra: bytes = b"") -> bytes:
    """Identity record: length-prefixed name field plus opaque extra bytes."""
    raw = name.encode("utf-8")
    return struct.pack(">H", len(raw)) + raw + extra


def decode_identity_payload(payload: bytes) -> tuple[str, bytes]:
    (n,) = struct.unpack_from(">H", payload)
    return payload[2 : 2 + n].decode("utf-8", errors="replace"), payload[2 + n :]


def redact_identity_payload(payload: bytes) -> bytes:
    """Zero the name bytes in place, keeping the payload size unchanged."""
    (n,) = struct.unpack_from(">H", payload)
    return payload[:2] + b"\x00" * n + payload[2 + n :]


class CameraCommand(IntEnum):
    CAMERA_ON = 0
    CAMERA_OFF = 1
    CHECKUP_START = 2
    CHECKUP_END = 3


# CameraControl payload subtypes.
CAM_SUBTYPE_COMMAND = 0
CAM_SUBTYPE_POLICY_UPDATE = 1
CAM_SUBTYPE_HEARTBEAT = 2


def encode_camera_command(cmd: CameraCommand) -> bytes:
    return bytes([CAM_SUBTYPE_COMMAND, int(cmd)])


def encode_policy_update(policy_text: str) -> bytes:
    return bytes([CAM_SUBTYPE_POLICY_UPDATE]) + policy_text.encode("utf-8")


def encode_camera_heartbeat(resolution: str) -> bytes:
    return bytes([CAM_SUBTYPE_HEARTBEAT]) + resolution.encode("ascii")


class Mode(Enum):
    CLOUD = "cloud"
    FOG = "fog"


@dataclass
class TopologyConfig:
    """Node roles and emulated link/service parameters for one run."""

    mode: Mode
    rooms: int = 1
    devices_per_room: int = 2
    cloud_address: tuple[str, int] = ("127.0.0.1", 0)
    fog_addresses: list = field(default_factory=list)
    link_delay_ms: float = 0.0
    cloud_service_time_ms: float = 0.0
    fog_service_time_ms: float = 0.0
    # Optional per-hop byte rates; None means the hop is not rate limited.
    device_link_rate: float | None = None
    backhaul_link_rate: float | None = None

    def __post_init__(self):
        if self.rooms < 1:
            raise ValueError("rooms must be >= 1")
        if self.devices_per_room < 1:
            raise ValueError("devices_per_room must be >= 1")
        for name in ("link_delay_ms", "cloud_service_time_ms", "fog_service_time_ms"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
