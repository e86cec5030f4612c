"""Runnable device, fog, and cloud nodes over loopback TCP.

Each node is one thread group: a reader thread per connection plus one
sender thread per link. All outbound traffic goes through a Link queue, so
per-connection ordering survives the emulated per-hop delay and byte-rate.
Shared state (store, policy engine, metrics) mutates under locks only.
Timing uses the monotonic clock throughout.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from collections import Counter, deque
from dataclasses import dataclass, field
from enum import Enum

from . import kws
from .domain import (
    CAM_SUBTYPE_COMMAND,
    CAM_SUBTYPE_HEARTBEAT,
    CAM_SUBTYPE_POLICY_UPDATE,
    CameraCommand,
    DataCategory,
    Frame,
    StreamDecoder,
    VitalKind,
    VitalSample,
    decode_audio_payload,
    encode_camera_heartbeat,
    encode_frame,
    encode_keyword_payload,
    encode_vitals_payload,
    fit_clip_length,
    segment_payload,
)
from .domain import AudioClip, reassemble
from .filtering import Action, PolicyEngine, parse_policies

log = logging.getLogger(__name__)

RECV_CHUNK = 65536
SOCKET_POLL_S = 0.2


class NodeError(RuntimeError):
    pass


class DeviceError(NodeError):
    """Device could not reach or keep its upstream connection."""


class SendError(NodeError):
    pass


# --- camera state machine ---------------------------------------------------

DEFAULT_STREAM_RESOLUTION = "720p"


class CameraState(Enum):
    SLEEP = "sleep"
    MONITORING = "monitoring"
    STREAMING = "streaming"


_CAMERA_TRANSITIONS = {
    (CameraState.SLEEP, CameraCommand.CHECKUP_START): CameraState.MONITORING,
    (CameraState.MONITORING, CameraCommand.CAMERA_ON): CameraState.STREAMING,
    (CameraState.STREAMING, CameraCommand.CAMERA_OFF): CameraState.MONITORING,
    (CameraState.MONITORING, CameraCommand.CHECKUP_END): CameraState.SLEEP,
}


def handle_camera_command(state: CameraState, cmd: CameraCommand) -> CameraState:
    """Total transition function; unmapped (state, command) pairs are identity."""
    return _CAMERA_TRANSITIONS.get((state, cmd), state)


# --- link emulation ----------------------------------------------------------


def delayed_link_send(sock, frame: Frame, link_delay_ms: float = 0.0, rate_bytes_per_s: float | None = None):
    """Write a frame after the emulated per-hop transit time.

    Transit = fixed propagation delay plus serialization at the link's byte
    rate, slept in the calling thread before the write.
    """
    data = encode_frame(frame)
    delay = link_delay_ms / 1000.0
    if rate_bytes_per_s:
        delay += len(data) / rate_bytes_per_s
    if delay > 0:
        time.sleep(delay)
    try:
        sock.sendall(data)
    except OSError as exc:
        raise SendError(str(exc)) from exc
    return len(data)


class Link:
    """Outbound half of a connection: FIFO queue plus one sender thread.

    A bounded capacity gives drop-oldest behaviour (fog upstream buffer);
    unbounded otherwise. ``bytes_sent`` counts wire bytes that actually left.
    """

    def __init__(self, sock, delay_ms=0.0, rate=None, capacity=None, name="link"):
        self.sock = sock
        self.delay_ms = delay_ms
        self.rate = rate
        self.capacity = capacity
        self.name = name
        self.dropped = 0
        self.bytes_sent = 0
        self.frames_sent = 0
        self.broken = False
        self._q = deque()
        self._cv = threading.Condition()
        self._closed = False
        self._thread = threading.Thread(target=self._run, name=f"{name}-sender", daemon=True)
        self._thread.start()

    def send(self, frame: Frame):
        with self._cv:
            if self._closed or self.broken:
                raise SendError(f"{self.name} is closed")
            if self.capacity is not None and len(self._q) >= self.capacity:
                self._q.popleft()
                self.dropped += 1
            self._q.append(frame)
            self._cv.notify()

    def _run(self):
        while True:
            with self._cv:
                while not self._q and not self._closed:
                    self._cv.wait()
                if not self._q and self._closed:
                    return
                frame = self._q.popleft()
            try:
                n = delayed_link_send(self.sock, frame, self.delay_ms, self.rate)
            except SendError:
                with self._cv:
                    self.broken = True
                    self._q.clear()
                return
            self.bytes_sent += n
            self.frames_sent += 1

    def close(self, drain=True, timeout=5.0):
        """Stop the sender; with drain, queued frames are flushed first."""
        with self._cv:
            if not drain:
                self._q.clear()
            self._closed = True
            self._cv.notify_all()
        self._thread.join(timeout=timeout)


# --- shared metrics ----------------------------------------------------------


class Metrics:
    def __init__(self):
        self._lock = threading.Lock()
        self.frames_sent = 0
        self.frames_received = 0
        self.acks_received = 0
        self.crc_failures = 0
        self.malformed = 0
        self.bytes_received = 0
        self.bytes_forwarded = 0
        self.buffer_drops = 0
        self.reconnects = 0
        self.rtts_ms = []
        self.drops_by_category = Counter()

    def add_rtt(self, rtt_ms):
        with self._lock:
            self.rtts_ms.append(rtt_ms)

    def bump(self, name, amount=1):
        with self._lock:
            setattr(self, name, getattr(self, name) + amount)

    @property
    def mean_rtt_ms(self):
        with self._lock:
            return sum(self.rtts_ms) / len(self.rtts_ms) if self.rtts_ms else float("nan")

    def dump_lines(self):
        drops = ";".join(f"{DataCategory(c).name}:{n}" for c, n in sorted(self.drops_by_category.items()))
        return [
            f"frames_sent={self.frames_sent}",
            f"frames_received={self.frames_received}",
            f"crc_failures={self.crc_failures}",
            f"drops_by_category={drops}",
            f"mean_rtt_ms={self.mean_rtt_ms:.3f}",
        ]


class CloudStore:
    """Append-only log of accepted frames plus per-category tallies."""

    def __init__(self):
        self._lock = threading.Lock()
        self._log = []
        self.counters = Counter()

    def append(self, frame: Frame):
        with self._lock:
            self._log.append((frame, time.monotonic()))
            self.counters[frame.category] += 1

    def __len__(self):
        with self._lock:
            return len(self._log)

    def snapshot(self):
        with self._lock:
            return list(self._log)

    def category_count(self, category) -> int:
        with self._lock:
            return self.counters.get(category, 0)


# --- server plumbing shared by fog and cloud ---------------------------------


class _BaseServer:
    def __init__(self, host="127.0.0.1", port=0, name="server"):
        self._host = host
        self._port = port
        self._name = name
        self._listener = None
        self._threads = []
        self._conns = []
        self._conn_lock = threading.Lock()
        self._stop = threading.Event()
        self.metrics = Metrics()

    @property
    def address(self):
        return self._listener.getsockname()

    def start(self):
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self._listener.bind((self._host, self._port))
        except OSError as exc:
            raise NodeError(f"{self._name} cannot bind {self._host}:{self._port}: {exc}") from exc
        self._listener.listen(64)
        self._listener.settimeout(SOCKET_POLL_S)
        t = threading.Thread(target=self._accept_loop, name=f"{self._name}-accept", daemon=True)
        t.start()
        self._threads.append(t)
        return self

    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                conn, peer = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            conn.settimeout(SOCKET_POLL_S)
            with self._conn_lock:
                self._conns.append(conn)
            t = threading.Thread(target=self._serve, args=(conn, peer), name=f"{self._name}-reader", daemon=True)
            t.start()
            self._threads.append(t)

    def _serve(self, conn, peer):  # pragma: no cover - overridden
        raise NotImplementedError

    def connection_count(self):
        with self._conn_lock:
            return len(self._conns)

    def drop_connections(self):
        """Forcibly close every accepted connection (fault-injection hook)."""
        with self._conn_lock:
            for conn in self._conns:
                try:
                    conn.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
            self._conns.clear()

    def stop(self):
        self._stop.set()
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        self.drop_connections()
        for t in self._threads:
            t.join(timeout=2.0)


def _read_frames(conn, decoder, stop):
    """Yield frames as they arrive; returns on EOF or once stop is set."""
    while not stop.is_set():
        try:
            data = conn.recv(RECV_CHUNK)
        except socket.timeout:
            continue
        except OSError:
            return
        if not data:
            return
        decoder.feed(data)
        yield from decoder.frames()


def _ack_for(frame: Frame) -> Frame:
    return Frame(category=DataCategory.ACK, patient=frame.patient, seq=frame.seq, total=frame.total)


class _Reassembler:
    """Collects chunk frames per (patient, category) until a message completes."""

    def __init__(self):
        self._parts = {}

    def add(self, frame: Frame):
        """Returns the reassembled payload once all chunks arrived, else None."""
        if frame.total == 1:
            return frame.payload
        key = (frame.patient, frame.category)
        slot = self._parts.setdefault(key, {})
        slot[frame.seq] = frame
        if len(slot) == frame.total:
            frames = list(slot.values())
            del self._parts[key]
            return reassemble(frames)
        return None


# --- cloud node ---------------------------------------------------------------


@dataclass
class CloudConfig:
    host: str = "127.0.0.1"
    port: int = 0
    fog_fronted: bool = False  # True when fogs (not devices) connect upstream
    service_time_ms: float = 0.0
    link_delay_ms: float = 0.0
    link_rate: float | None = None
    policy_engine: PolicyEngine | None = None
    classifier: tuple | None = None  # (model, vocabulary)


class CloudNode(_BaseServer):
    """General storage of filtered information; one serialized service queue.

    When devices connect directly (``fog_fronted=False``) the cloud performs
    the processing a fog would have done: reassembly, classification of
    audio, and policy filtering, all before acknowledging.
    """

    def __init__(self, config: CloudConfig):
        super().__init__(config.host, config.port, name="cloud")
        self.config = config
        self.store = CloudStore()
        self._service_lock = threading.Lock()

    def _service(self):
        if self.config.service_time_ms > 0:
            with self._service_lock:
                time.sleep(self.config.service_time_ms / 1000.0)
        elif self.config.service_time_ms == 0:
            # still serialize, so the queueing model holds at zero cost
            with self._service_lock:
                pass

    def _serve(self, conn, peer):
        decoder = StreamDecoder()
        asm = _Reassembler()
        link = Link(conn, self.config.link_delay_ms, self.config.link_rate, name="cloud-ack")
        try:
            for frame in _read_frames(conn, decoder, self._stop):
                self.metrics.bump("frames_received")
                self.metrics.bump("bytes_received", len(frame.payload))
                if frame.category == DataCategory.ACK:
                    continue
                payload = asm.add(frame)
                if payload is not None:
                    self._service()
                    self._process_message(frame, payload)
                try:
                    link.send(_ack_for(frame))
                    self.metrics.bump("frames_sent")
                except SendError:
                    return
        finally:
            self.metrics.bump("crc_failures", decoder.crc_failures)
            self.metrics.bump("malformed", decoder.malformed)
            link.close(drain=not self._stop.is_set())
            try:
                conn.close()
            except OSError:
                pass

    def _process_message(self, last_frame: Frame, payload: bytes):
        if self.config.fog_fronted:
            # fogs forward pre-filtered traffic; storage only
            self.store.append(last_frame)
            return
        engine = self.config.policy_engine
        if last_frame.category == DataCategory.AUDIO_CLIP and self.config.classifier is not None:
            model, vocabulary = self.config.classifier
            clip = AudioClip(patient=last_frame.patient, samples=fit_clip_length(decode_audio_payload(payload)))
            label, confidence = kws.classify(model, vocabulary, clip)
            event = Frame(
                category=DataCategory.KEYWORD_EVENT,
                patient=last_frame.patient,
                seq=0,
                total=1,
                payload=encode_keyword_payload(vocabulary.index(label), confidence, label),
            )
            candidate = event
        else:
            candidate = Frame(
                category=last_frame.category,
                patient=last_frame.patient,
                seq=0,
                total=1,
                payload=payload if last_frame.total > 1 else last_frame.payload,
            )
        if engine is None:
            self.store.append(candidate)
            return
        decision = engine.evaluate(candidate)
        if decision.action in (Action.PASS, Action.REDACT):
            self.store.append(decision.frame)
        else:
            self.metrics.drops_by_category[candidate.category] += 1


# --- fog node -----------------------------------------------------------------


@dataclass
class FogConfig:
    host: str = "127.0.0.1"
    port: int = 0
    upstream: tuple[str, int] = ("127.0.0.1", 0)
    service_time_ms: float = 0.0
    device_link_delay_ms: float = 0.0
    device_link_rate: float | None = None
    backhaul_delay_ms: float = 0.0
    backhaul_rate: float | None = None
    buffer_capacity: int = 1024
    fog_patient: int = 0xF06F06
    heartbeat_period_s: float = 0.5
    policy_engine: PolicyEngine | None = None
    classifier: tuple | None = None  # (model, vocabulary); required to process audio


class FogNode(_BaseServer):
    """Local server: reassembles audio, classifies it, filters, forwards.

    Devices are acknowledged right after local processing; the upstream
    path is fire-and-forget through a bounded drop-oldest buffer.
    """

    def __init__(self, config: FogConfig):
        super().__init__(config.host, config.port, name="fog")
        self.config = config
        self.engine = config.policy_engine or PolicyEngine()
        self.camera_state = CameraState.SLEEP
        self._camera_lock = threading.Lock()
        self._service_lock = threading.Lock()
        self._upstream = None
        self._upstream_sock = None

    def start(self):
        if self.config.classifier is None:
            raise NodeError("fog requires a trained classifier at startup")
        try:
            self._upstream_sock = socket.create_connection(self.config.upstream, timeout=2.0)
        except OSError as exc:
            raise NodeError(f"fog cannot reach cloud at {self.config.upstream}: {exc}") from exc
        self._upstream = Link(
            self._upstream_sock,
            self.config.backhaul_delay_ms,
            self.config.backhaul_rate,
            capacity=self.config.buffer_capacity,
            name="fog-upstream",
        )
        super().start()
        t = threading.Thread(target=self._heartbeat_loop, name="fog-heartbeat", daemon=True)
        t.start()
        self._threads.append(t)
        return self

    def _service(self):
        if self.config.service_time_ms > 0:
            with self._service_lock:
                time.sleep(self.config.service_time_ms / 1000.0)

    def _serve(self, conn, peer):
        decoder = StreamDecoder()
        asm = _Reassembler()
        link = Link(conn, self.config.device_link_delay_ms, self.config.device_link_rate, name="fog-ack")
        try:
            for frame in _read_frames(conn, decoder, self._stop):
                self.metrics.bump("frames_received")
                self.metrics.bump("bytes_received", len(encode_frame(frame)))
                if frame.category == DataCategory.ACK:
                    continue
                self._handle(frame, asm)
                try:
                    link.send(_ack_for(frame))
                    self.metrics.bump("frames_sent")
                except SendError:
                    return
        finally:
            self.metrics.bump("crc_failures", decoder.crc_failures)
            self.metrics.bump("malformed", decoder.malformed)
            link.close(drain=not self._stop.is_set())
            try:
                conn.close()
            except OSError:
                pass

    def _handle(self, frame: Frame, asm: _Reassembler):
        if frame.category == DataCategory.CAMERA_CONTROL:
            self._handle_camera(frame)
            return
        payload = asm.add(frame)
        if payload is None:
            return  # chunk buffered; ack goes out regardless
        self._service()
        if frame.category == DataCategory.AUDIO_CLIP:
            model, vocabulary = self.config.classifier
            clip = AudioClip(patient=frame.patient, samples=fit_clip_length(decode_audio_payload(payload)))
            label, confidence = kws.classify(model, vocabulary, clip)
            candidate = Frame(
                category=DataCategory.KEYWORD_EVENT,
                patient=frame.patient,
                seq=0,
                total=1,
                payload=encode_keyword_payload(vocabulary.index(label), confidence, label),
            )
        else:
            candidate = frame
        decision = self.engine.evaluate(candidate)
        if decision.action in (Action.PASS, Action.REDACT):
            self._forward(decision.frame)
        else:
            self.metrics.drops_by_category[candidate.category] += 1

    def _forward(self, frame: Frame):
        try:
            self._upstream.send(frame)
        except SendError:
            self.metrics.bump("buffer_drops")
            return
        self.metrics.bump("bytes_forwarded", len(encode_frame(frame)))
        self.metrics.buffer_drops = self._upstream.dropped

    def _handle_camera(self, frame: Frame):
        if not frame.payload:
            return
        subtype = frame.payload[0]
        if subtype == CAM_SUBTYPE_COMMAND and len(frame.payload) >= 2:
            cmd = CameraCommand(frame.payload[1])
            with self._camera_lock:
                self.camera_state = handle_camera_command(self.camera_state, cmd)
        elif subtype == CAM_SUBTYPE_POLICY_UPDATE:
            try:
                policies = parse_policies(frame.payload[1:].decode("utf-8"))
            except Exception as exc:  # noqa: BLE001
                log.warning("bad policy update ignored: %s", exc)
                return
            for policy in policies:
                self.engine.update_policy(policy)

    def _heartbeat_loop(self):
        while not self._stop.wait(self.config.heartbeat_period_s):
            with self._camera_lock:
                streaming = self.camera_state is CameraState.STREAMING
            if not streaming:
                continue
            beat = Frame(
                category=DataCategory.CAMERA_CONTROL,
                patient=self.config.fog_patient,
                seq=0,
                total=1,
                payload=encode_camera_heartbeat(DEFAULT_STREAM_RESOLUTION),
            )
            decision = self.engine.evaluate(beat)
            if decision.action is Action.PASS:
                self._forward(decision.frame)

    def stop(self):
        super().stop()
        if self._upstream is not None:
            self._upstream.close(drain=False)
        if self._upstream_sock is not None:
            try:
                self._upstream_sock.close()
            except OSError:
                pass


# --- device client ------------------------------------------------------------


@dataclass
class DeviceConfig:
    upstream: tuple[str, int]
    patient: int
    period_ms: float = 100.0
    duration_s: float | None = None
    chunk_size: int = 8192
    audio_payloads: list = field(default_factory=list)
    link_delay_ms: float = 0.0
    link_rate: float | None = None
    retries: int = 3
    backoff_s: float = 0.2
    seed: int = 0


class DeviceClient:
    """Patient-side sender with per-frame acknowledgment tracking.

    RTTs are matched FIFO: the transport preserves ordering in both
    directions, and receivers acknowledge frames in arrival order.
    """

    def __init__(self, upstream, patient, link_delay_ms=0.0, link_rate=None, retries=3, backoff_s=0.2):
        self.upstream = upstream
        self.patient = patient
        self.link_delay_ms = link_delay_ms
        self.link_rate = link_rate
        self.retries = retries
        self.backoff_s = backoff_s
        self.metrics = Metrics()
        self._sock = None
        self._link = None
        self._reader = None
        self._pending = deque()
        self._pending_lock = threading.Lock()
        self._stop = threading.Event()
        self._reconnected = False

    def connect(self):
        last_error = None
        for attempt in range(self.retries):
            try:
                self._sock = socket.create_connection(self.upstream, timeout=2.0)
                break
            except OSError as exc:
                last_error = exc
                time.sleep(self.backoff_s * (2**attempt))
        else:
            raise DeviceError(f"cannot reach upstream {self.upstream} after {self.retries} attempts: {last_error}")
        self._sock.settimeout(SOCKET_POLL_S)
        self._link = Link(self._sock, self.link_delay_ms, self.link_rate, name=f"device-{self.patient}")
        self._reader = threading.Thread(target=self._read_acks, name=f"device-{self.patient}-reader", daemon=True)
        self._reader.start()
        return self

    def _read_acks(self):
        decoder = StreamDecoder()
        for frame in _read_frames(self._sock, decoder, self._stop):
            if frame.category != DataCategory.ACK:
                continue
            self.metrics.bump("acks_received")
            with self._pending_lock:
                if not self._pending:
                    continue
                t_send, event, slot = self._pending.popleft()
            rtt_ms = round((time.monotonic() - t_send) * 1000.0, 3)
            slot[0] = rtt_ms
            self.metrics.add_rtt(rtt_ms)
            event.set()

    def _track_and_send(self, frame: Frame):
        event = threading.Event()
        slot = [None]
        with self._pending_lock:
            self._pending.append((time.monotonic(), event, slot))
        try:
            self._link.send(frame)
        except SendError:
            with self._pending_lock:
                if self._pending and self._pending[-1][1] is event:
                    self._pending.pop()
            raise
        self.metrics.bump("frames_sent")
        return event, slot

    def probe(self, category=DataCategory.VITALS, payload=b"", timeout=10.0):
        """Stop-and-wait round trip; returns the RTT in milliseconds."""
        frame = Frame(category=category, patient=self.patient, seq=0, total=1, payload=payload)
        event, slot = self._track_and_send(frame)
        if not event.wait(timeout):
            raise DeviceError(f"no acknowledgment within {timeout}s")
        return slot[0]

    def send_vitals(self, sample: VitalSample):
        frame = Frame(
            category=DataCategory.VITALS,
            patient=self.patient,
            seq=0,
            total=1,
            payload=encode_vitals_payload(sample),
        )
        self._track_and_send(frame)

    def send_blob(self, category, payload: bytes, chunk_size: int, wait=True, timeout=30.0):
        """Segment a payload into chunk frames; optionally await all acks."""
        frames = segment_payload(self.patient, category, payload, chunk_size)
        waiters = [self._track_and_send(f)[0] for f in frames]
        if wait:
            deadline = time.monotonic() + timeout
            for event in waiters:
                if not event.wait(max(0.0, deadline - time.monotonic())):
                    raise DeviceError("audio transfer not fully acknowledged")
        return len(frames)

    def send_camera_command(self, cmd: CameraCommand):
        from .domain import encode_camera_command

        frame = Frame(
            category=DataCategory.CAMERA_CONTROL,
            patient=self.patient,
            seq=0,
            total=1,
            payload=encode_camera_command(cmd),
        )
        self._track_and_send(frame)

    def reconnect_once(self):
        """One mid-stream reconnect; a second failure is fatal."""
        if self._reconnected:
            raise DeviceError("upstream lost twice; giving up")
        self._reconnected = True
        self.metrics.bump("reconnects")
        self._teardown_transport()
        with self._pending_lock:
            self._pending.clear()
        retries, self.retries = self.retries, max(self.retries, 3)
        try:
            self.connect()
        finally:
            self.retries = retries

    def _teardown_transport(self):
        if self._link is not None:
            self._link.close(drain=False, timeout=1.0)
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass

    def close(self):
        self._stop.set()
        if self._link is not None:
            self._link.close(drain=True)
        if self._sock is not None:
            try:
                self._sock.shutdown(socket.SHUT_WR)
            except OSError:
                pass
        if self._reader is not None:
            self._reader.join(timeout=2.0)
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass


def _vital_sample(rng, patient) -> VitalSample:
    kind = VitalKind(rng.randrange(3))
    value = {
        VitalKind.HEART_RATE: lambda: rng.uniform(55.0, 110.0),
        VitalKind.SPO2: lambda: rng.uniform(92.0, 100.0),
        VitalKind.TEMPERATURE: lambda: rng.uniform(36.0, 38.5),
    }[kind]()
    return VitalSample(patient=patient, timestamp_ms=int(time.time() * 1000), kind=kind, value=value)


def run_device(config: DeviceConfig, stop_event: threading.Event | None = None) -> Metrics:
    """Blocking device loop: vitals on a fixed period, plus queued audio sends.

    Emission uses absolute deadlines, so the frame count over a window is
    period-exact up to boundary jitter. Returns the device metrics.
    """
    import random as _random

    stop_event = stop_event or threading.Event()
    client = DeviceClient(
        config.upstream,
        config.patient,
        link_delay_ms=config.link_delay_ms,
        link_rate=config.link_rate,
        retries=config.retries,
        backoff_s=config.backoff_s,
    )
    client.connect()
    rng = _random.Random(config.seed or config.patient)
    try:
        for payload in config.audio_payloads:
            client.send_blob(DataCategory.AUDIO_CLIP, payload, config.chunk_size)
        start = time.monotonic()
        deadline = start + config.period_ms / 1000.0
        while not stop_event.is_set():
            now = time.monotonic()
            if config.duration_s is not None and now - start >= config.duration_s:
                break
            if now < deadline:
                stop_event.wait(min(deadline - now, 0.05))
                continue
            deadline += config.period_ms / 1000.0
            try:
                client.send_vitals(_vital_sample(rng, config.patient))
            except SendError:
                client.reconnect_once()
    finally:
        client.close()
    return client.metrics


def run_fog(config: FogConfig, stop_event: threading.Event | None = None) -> FogNode:
    """Start a fog node and block until the stop signal."""
    node = FogNode(config).start()
    try:
        (stop_event or threading.Event()).wait()
    finally:
        node.stop()
    return node


def run_cloud(config: CloudConfig, stop_event: threading.Event | None = None) -> CloudNode:
    """Start a cloud node and block until the stop signal."""
    node = CloudNode(config).start()
    try:
        (stop_event or threading.Event()).wait()
    finally:
        node.stop()
    return node
