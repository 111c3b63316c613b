"""Experiment execution against a live broker endpoint.

Steps run strictly sequentially on the main thread while one reader
thread per session drains its socket; a single arrival sequencer
assigns every event (sent and received, all sessions) a gap-free seq
and a millisecond timestamp, so cross-session order is total.  All
inbound bytes become Received events via permissive decoding: frames
that cannot be parsed are preserved as Raw events, never dropped.

The runner never sends anything the script didn't ask for, with two
marked exceptions (``auto=True`` on the Sent event): the lazy CONNECT
that opens a session before its first wire-touching step, and the
auto-acks for broker-initiated QoS handshakes (PUBACK/PUBREC for
inbound publishes, PUBCOMP for inbound PUBREL) unless the session
declares ``auto_ack: false``.  In particular the runner never answers
a PUBREC: releasing a qos 2 publish is always a scripted decision.

RunnerError is reserved for local faults (refused connection, DNS,
unencodable script); peer disconnects and silence are trace outcomes,
not errors.
"""

from __future__ import annotations

import json
import socket
import threading
import time
import uuid
from dataclasses import dataclass

from . import codec
from .codec import (
    Connack,
    Connect,
    Disconnect,
    Packet,
    Pingreq,
    Puback,
    Pubcomp,
    Publish,
    Pubrec,
    Pubrel,
    Raw,
    Subscribe,
    Unsubscribe,
    Will,
)
from .experiment import (
    ConnectStep,
    DisconnectStep,
    Experiment,
    PingreqStep,
    PubackStep,
    PubcompStep,
    PublishStep,
    PubrecStep,
    PubrelStep,
    SendRawStep,
    SpliceNextStep,
    Step,
    SubscribeStep,
    UnsubscribeStep,
    WaitStep,
    expand_steps,
)

K_SENT = "sent"
K_RECEIVED = "received"
K_CONNECTED = "connected"
K_CLOSED_BY_PEER = "closed-by-peer"
K_TCP_ERROR = "tcp-error"
# Reserved for await-style steps; the current step set never blocks on
# a reply, so nothing emits it yet.
K_TIMEOUT = "timeout"

OUTCOME_COMPLETED = "completed"
OUTCOME_ABORTED_BY_PEER = "aborted-by-peer"
OUTCOME_RUNNER_ERROR = "runner-error"


class RunnerError(Exception):
    """Local failure: the target is unreachable or the script unencodable."""


@dataclass(frozen=True)
class Endpoint:
    host: str
    port: int = 1883
    connect_timeout_ms: int = 3000
    io_timeout_ms: int = 5000

    @classmethod
    def parse(cls, target: str, **kwargs: int) -> Endpoint:
        """Build from 'host', 'host:port', or '[v6addr]:port'."""
        if not target:
            raise RunnerError("empty target")
        if target.startswith("["):
            body, closed, rest = target.partition("]")
            host = body[1:]
            if not closed or not host:
                raise RunnerError(f"target {target!r} has unbalanced brackets")
            if not rest:
                return cls(host=host, **kwargs)
            if not rest.startswith(":"):
                raise RunnerError(f"target {target!r}: junk after ']'")
            return cls(host=host, port=cls._parse_port(target, rest[1:]), **kwargs)
        if ":" not in target:
            return cls(host=target, **kwargs)
        host, _, port_text = target.rpartition(":")
        if not host:
            raise RunnerError(f"target {target!r} is missing a host")
        if ":" in host:
            raise RunnerError(
                f"target {target!r}: bracket a literal v6 address as [addr]:port")
        return cls(host=host, port=cls._parse_port(target, port_text), **kwargs)

    @staticmethod
    def _parse_port(target: str, text: str) -> int:
        try:
            port = int(text)
        except ValueError:
            raise RunnerError(f"target {target!r} has a non-numeric port") from None
        if not 0 < port < 65_536:
            raise RunnerError(f"target {target!r} port outside 1..65535")
        return port

    @property
    def label(self) -> str:
        return f"{self.host}:{self.port}"


@dataclass(frozen=True)
class TraceEvent:
    seq: int
    t_ms: float
    session: str
    kind: str
    packet: Packet | None = None
    raw: bytes | None = None
    annotations: tuple[str, ...] = ()
    auto: bool = False
    note: str = ""


@dataclass(frozen=True)
class Trace:
    experiment_name: str
    endpoint: str
    started_at: float
    events: tuple[TraceEvent, ...]
    outcome: str
    outcome_detail: str = ""


@dataclass(frozen=True)
class Liveness:
    alive: bool
    detail: str = ""


@dataclass(frozen=True)
class CorpusResult:
    experiment: Experiment
    trace: Trace | None
    liveness: Liveness
    skipped: str | None = None


class _Sequencer:
    """Assigns seq numbers and timestamps under one lock."""

    def __init__(self) -> None:
        self.lock = threading.Lock()
        self.t0 = time.monotonic()
        self.events: list[TraceEvent] = []

    def record(self, session: str, kind: str, **fields: object) -> TraceEvent:
        with self.lock:
            event = TraceEvent(seq=len(self.events),
                               t_ms=round((time.monotonic() - self.t0) * 1000, 3),
                               session=session, kind=kind, **fields)  # type: ignore[arg-type]
            self.events.append(event)
            return event

    @property
    def last_seq(self) -> int:
        with self.lock:
            return len(self.events) - 1


class _SessionRun:
    def __init__(self, decl, endpoint: Endpoint, sequencer: _Sequencer):
        self.decl = decl
        self.endpoint = endpoint
        self.sequencer = sequencer
        self.sock: socket.socket | None = None
        self.reader: threading.Thread | None = None
        self.send_lock = threading.Lock()
        self.locally_closed = False
        self.stopping = False
        self.pending_splice: SpliceNextStep | None = None
        self.steps_done_seq = -1
        self.step_send_failed = False

    @property
    def connected(self) -> bool:
        return self.sock is not None and not self.locally_closed

    def connect(self, auto: bool) -> None:
        """Open TCP and send CONNECT; used lazily and by connect steps."""
        if self.sock is not None:
            self.local_close()
        self.locally_closed = False
        self.stopping = False
        try:
            sock = socket.create_connection(
                (self.endpoint.host, self.endpoint.port),
                timeout=self.endpoint.connect_timeout_ms / 1000)
        except OSError as exc:
            raise RunnerError(
                f"cannot connect to {self.endpoint.label}: {exc}") from exc
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.settimeout(0.1)
        self.sock = sock
        self.sequencer.record(self.decl.id, K_CONNECTED, note=self.endpoint.label)
        self.reader = threading.Thread(target=self._read_loop, args=(sock,),
                                       name=f"runner-reader-{self.decl.id}",
                                       daemon=True)
        self.reader.start()
        note = "auto-connect" if auto else ""
        self._send_packet(self.decl.to_connect(), auto=auto, note=note)

    def _send_packet(self, packet: Packet, auto: bool, note: str = "") -> None:
        try:
            frame = codec.encode_packet(packet)
        except codec.CodecError as exc:
            raise RunnerError(f"cannot encode {type(packet).__name__}: {exc}") from exc
        spliced = False
        if not auto and self.pending_splice is not None:
            step = self.pending_splice
            self.pending_splice = None
            try:
                frame = codec.splice(frame, step.offset, step.remove,
                                     step.insert, step.fixup_length)
            except codec.CodecError as exc:
                raise RunnerError(f"splice failed: {exc}") from exc
            spliced = True
        self._send_frame(frame,
                         packet=None if spliced else packet,
                         auto=auto,
                         note="spliced" if spliced else note)

    def _send_frame(self, frame: bytes, packet: Packet | None,
                    auto: bool, note: str = "") -> None:
        sock = self.sock
        if sock is None or self.locally_closed:
            self.sequencer.record(self.decl.id, K_TCP_ERROR,
                                  note="send on closed session", auto=auto)
            if not auto:
                self.step_send_failed = True
            return
        # The Sent event takes its seq before the bytes leave, under the
        # send lock, so a reply can never be sequenced ahead of the frame
        # that caused it.
        try:
            with self.send_lock:
                self.sequencer.record(self.decl.id, K_SENT, packet=packet,
                                      raw=frame, auto=auto, note=note)
                sock.sendall(frame)
        except OSError as exc:
            self.sequencer.record(self.decl.id, K_TCP_ERROR,
                                  note=f"send failed: {exc}", auto=auto)
            if not auto:
                self.step_send_failed = True

    def _read_loop(self, sock: socket.socket) -> None:
        buffer = b""
        ending: tuple[str, str] | None = None
        while not self.stopping and ending is None:
            try:
                chunk = sock.recv(65536)
            except socket.timeout:
                continue
            except ConnectionResetError:
                ending = (K_CLOSED_BY_PEER, "connection reset")
            except OSError as exc:
                ending = (K_TCP_ERROR, f"recv failed: {exc}")
            else:
                if not chunk:
                    ending = (K_CLOSED_BY_PEER, "")
                else:
                    buffer += chunk
                    buffer = self._drain(buffer)
        # Bytes that never completed a frame still count: flush them before
        # the close marker so the trace accounts for every byte received.
        if buffer:
            self.sequencer.record(self.decl.id, K_RECEIVED,
                                  packet=Raw(data=buffer), raw=buffer,
                                  annotations=("unparsed-at-close",))
        if ending is not None and not self.locally_closed:
            kind, note = ending
            self.sequencer.record(self.decl.id, kind, note=note)

    def _drain(self, buffer: bytes) -> bytes:
        while buffer:
            try:
                packet, annotations, consumed = codec.decode_packet(
                    buffer, codec.DecodeMode.PERMISSIVE)
            except codec.IncompleteFrame:
                return buffer
            except codec.MalformedFrame as exc:
                if exc.frame_length is not None and exc.frame_length <= len(buffer):
                    frame, buffer = buffer[:exc.frame_length], buffer[exc.frame_length:]
                else:
                    frame, buffer = buffer, b""
                self.sequencer.record(self.decl.id, K_RECEIVED, packet=Raw(frame),
                                      raw=frame,
                                      annotations=(f"malformed: {exc.reason}",))
                continue
            frame, buffer = buffer[:consumed], buffer[consumed:]
            self.sequencer.record(self.decl.id, K_RECEIVED, packet=packet,
                                  raw=frame, annotations=tuple(annotations))
            if self.decl.auto_ack:
                self._auto_ack(packet)
        return buffer

    def _auto_ack(self, packet: Packet) -> None:
        reply: Packet | None = None
        if isinstance(packet, Publish) and packet.packet_id is not None:
            if packet.qos == 1:
                reply = Puback(packet.packet_id)
            elif packet.qos == 2:
                reply = Pubrec(packet.packet_id)
        elif isinstance(packet, Pubrel):
            reply = Pubcomp(packet.packet_id)
        if reply is not None:
            try:
                frame = codec.encode_packet(reply)
            except codec.CodecError:
                return
            self._send_frame(frame, packet=reply, auto=True, note="auto-ack")

    def local_close(self) -> None:
        self.stopping = True
        self.locally_closed = True
        sock, self.sock = self.sock, None
        if sock is not None:
            try:
                sock.close()
            except OSError:
                pass
        if self.reader is not None:
            self.reader.join(timeout=2)
            self.reader = None


def _step_packet(step: Step) -> Packet:
    if isinstance(step, SubscribeStep):
        return Subscribe(step.packet_id, ((step.filter, step.qos),))
    if isinstance(step, UnsubscribeStep):
        return Unsubscribe(step.packet_id, (step.filter,))
    if isinstance(step, PublishStep):
        return Publish(topic=step.topic, payload=step.payload, qos=step.qos,
                       packet_id=step.packet_id, retain=step.retain, dup=step.dup)
    if isinstance(step, PubackStep):
        return Puback(step.packet_id)
    if isinstance(step, PubrecStep):
        return Pubrec(step.packet_id)
    if isinstance(step, PubrelStep):
        return Pubrel(step.packet_id)
    if isinstance(step, PubcompStep):
        return Pubcomp(step.packet_id)
    if isinstance(step, PingreqStep):
        return Pingreq()
    if isinstance(step, SendRawStep):
        return Raw(step.data)
    if isinstance(step, DisconnectStep):
        return Disconnect()
    raise RunnerError(f"step {step!r} does not emit a packet")


def check_reachable(endpoint: Endpoint) -> None:
    """Open and close a TCP connection to prove the endpoint accepts at all.

    Raises RunnerError on refusal or timeout.  No MQTT bytes are sent, so
    the probe is invisible above the transport layer.
    """
    try:
        sock = socket.create_connection(
            (endpoint.host, endpoint.port),
            timeout=endpoint.connect_timeout_ms / 1000)
        sock.close()
    except OSError as exc:
        raise RunnerError(
            f"cannot reach {endpoint.label}: {exc}") from exc


def run_experiment(experiment: Experiment, endpoint: Endpoint) -> Trace:
    """Execute one experiment and return its full trace.

    The endpoint is checked for plain TCP reachability first, so even an
    experiment that never touches the wire fails loudly against a dead
    target instead of reporting a vacuous success.
    """
    check_reachable(endpoint)
    started_at = time.time()
    sequencer = _Sequencer()
    sessions = {decl.id: _SessionRun(decl, endpoint, sequencer)
                for decl in experiment.sessions}
    steps = expand_steps(experiment)
    try:
        for step in steps:
            session = sessions[step.session]
            if isinstance(step, WaitStep):
                time.sleep(step.ms / 1000)
            elif isinstance(step, SpliceNextStep):
                session.pending_splice = step
            elif isinstance(step, ConnectStep):
                session.connect(auto=False)
            elif isinstance(step, DisconnectStep):
                if session.connected:
                    session._send_packet(Disconnect(), auto=False)
                    session.local_close()
                else:
                    sequencer.record(step.session, K_TCP_ERROR,
                                     note="disconnect on closed session")
            else:
                if not session.connected:
                    session.connect(auto=True)
                session._send_packet(_step_packet(step), auto=False)
            session.steps_done_seq = sequencer.last_seq
        time.sleep(experiment.settle_ms / 1000)
    finally:
        for session in sessions.values():
            session.local_close()

    events = tuple(sequencer.events)
    aborted = any(
        s.step_send_failed or _closed_before(events, s)
        for s in sessions.values())
    outcome = OUTCOME_ABORTED_BY_PEER if aborted else OUTCOME_COMPLETED
    return Trace(experiment_name=experiment.name, endpoint=endpoint.label,
                 started_at=started_at, events=events, outcome=outcome)


def _closed_before(events: tuple[TraceEvent, ...], session: _SessionRun) -> bool:
    sid = session.decl.id
    # A peer close that follows our own scripted DISCONNECT is the normal
    # end of the conversation, not an abort.
    bye_seq = next((e.seq for e in events
                    if e.kind == K_SENT and e.session == sid and not e.auto
                    and isinstance(e.packet, Disconnect)), None)
    return any(e.kind == K_CLOSED_BY_PEER and e.session == sid
               and e.seq <= session.steps_done_seq
               and (bye_seq is None or e.seq < bye_seq)
               for e in events)


def probe_liveness(endpoint: Endpoint) -> Liveness:
    """Fresh connection + CONNECT/CONNACK round trip."""
    client_id = f"probe-{uuid.uuid4().hex[:8]}".encode()
    try:
        sock = socket.create_connection(
            (endpoint.host, endpoint.port),
            timeout=endpoint.connect_timeout_ms / 1000)
    except OSError as exc:
        return Liveness(False, f"connect failed: {exc}")
    try:
        sock.settimeout(endpoint.io_timeout_ms / 1000)
        sock.sendall(codec.encode_packet(Connect(client_id=client_id)))
        buffer = b""
        deadline = time.monotonic() + endpoint.io_timeout_ms / 1000
        while time.monotonic() < deadline:
            try:
                chunk = sock.recv(4096)
            except socket.timeout:
                return Liveness(False, "no CONNACK before timeout")
            except OSError as exc:
                return Liveness(False, f"recv failed: {exc}")
            if not chunk:
                return Liveness(False, "closed before CONNACK")
            buffer += chunk
            try:
                packet, _, _ = codec.decode_packet(buffer, codec.DecodeMode.PERMISSIVE)
            except codec.IncompleteFrame:
                continue
            except codec.MalformedFrame as exc:
                return Liveness(False, f"malformed reply: {exc.reason}")
            if isinstance(packet, Connack):
                try:
                    sock.sendall(codec.encode_packet(Disconnect()))
                except OSError:
                    pass
                return Liveness(True, f"connack rc={packet.return_code}")
            return Liveness(False, f"unexpected reply {type(packet).__name__}")
        return Liveness(False, "no CONNACK before timeout")
    finally:
        try:
            sock.close()
        except OSError:
            pass


def run_corpus(experiments: list[Experiment], endpoint: Endpoint) -> list[CorpusResult]:
    """Run experiments in order, probing liveness after each.

    Once a probe reports the broker dead, the remaining experiments are
    returned as skipped rather than hammering a corpse.
    """
    results: list[CorpusResult] = []
    dead_detail: str | None = None
    for experiment in experiments:
        if dead_detail is not None:
            results.append(CorpusResult(experiment, None, Liveness(False, dead_detail),
                                        skipped=f"broker dead: {dead_detail}"))
            continue
        try:
            trace = run_experiment(experiment, endpoint)
        except RunnerError as exc:
            trace = Trace(experiment_name=experiment.name, endpoint=endpoint.label,
                          started_at=time.time(), events=(),
                          outcome=OUTCOME_RUNNER_ERROR, outcome_detail=str(exc))
        liveness = probe_liveness(endpoint)
        if not liveness.alive:
            dead_detail = liveness.detail
        results.append(CorpusResult(experiment, trace, liveness))
    return results


# --- serialization ---------------------------------------------------------

def _hex(value: bytes | None) -> str | None:
    return None if value is None else value.hex()


def _unhex(value: str | None) -> bytes | None:
    return None if value is None else bytes.fromhex(value)


def packet_to_obj(packet: Packet) -> dict:
    """JSON-ready form of a packet; byte fields are lowercase hex."""
    if isinstance(packet, Connect):
        will = None
        if packet.will is not None:
            will = {"topic": packet.will.topic.hex(), "payload": packet.will.payload.hex(),
                    "qos": packet.will.qos, "retain": packet.will.retain}
        return {"type": "connect", "client_id": packet.client_id.hex(),
                "clean_session": packet.clean_session, "keep_alive": packet.keep_alive,
                "protocol_name": packet.protocol_name.hex(),
                "protocol_level": packet.protocol_level, "will": will,
                "username": _hex(packet.username), "password": _hex(packet.password)}
    if isinstance(packet, Connack):
        return {"type": "connack", "session_present": packet.session_present,
                "return_code": packet.return_code}
    if isinstance(packet, Publish):
        return {"type": "publish", "topic": packet.topic.hex(),
                "payload": packet.payload.hex(), "qos": packet.qos,
                "packet_id": packet.packet_id, "retain": packet.retain,
                "dup": packet.dup}
    if isinstance(packet, (Puback, Pubrec, Pubrel, Pubcomp)):
        return {"type": type(packet).__name__.lower(), "packet_id": packet.packet_id}
    if isinstance(packet, Subscribe):
        return {"type": "subscribe", "packet_id": packet.packet_id,
                "entries": [[f.hex(), q] for f, q in packet.entries]}
    if isinstance(packet, codec.Suback):
        return {"type": "suback", "packet_id": packet.packet_id,
                "return_codes": list(packet.return_codes)}
    if isinstance(packet, Unsubscribe):
        return {"type": "unsubscribe", "packet_id": packet.packet_id,
                "filters": [f.hex() for f in packet.filters]}
    if isinstance(packet, codec.Unsuback):
        return {"type": "unsuback", "packet_id": packet.packet_id}
    if isinstance(packet, Pingreq):
        return {"type": "pingreq"}
    if isinstance(packet, codec.Pingresp):
        return {"type": "pingresp"}
    if isinstance(packet, Disconnect):
        return {"type": "disconnect"}
    if isinstance(packet, Raw):
        return {"type": "raw", "data": packet.data.hex()}
    raise ValueError(f"unserializable packet {packet!r}")


def packet_from_obj(obj: dict) -> Packet:
    kind = obj["type"]
    if kind == "connect":
        will = None
        if obj.get("will") is not None:
            w = obj["will"]
            will = Will(topic=bytes.fromhex(w["topic"]),
                        payload=bytes.fromhex(w["payload"]),
                        qos=w["qos"], retain=w["retain"])
        return Connect(client_id=bytes.fromhex(obj["client_id"]),
                       clean_session=obj["clean_session"],
                       keep_alive=obj["keep_alive"],
                       protocol_name=bytes.fromhex(obj["protocol_name"]),
                       protocol_level=obj["protocol_level"], will=will,
                       username=_unhex(obj.get("username")),
                       password=_unhex(obj.get("password")))
    if kind == "connack":
        return Connack(session_present=obj["session_present"],
                       return_code=obj["return_code"])
    if kind == "publish":
        return Publish(topic=bytes.fromhex(obj["topic"]),
                       payload=bytes.fromhex(obj["payload"]), qos=obj["qos"],
                       packet_id=obj.get("packet_id"), retain=obj["retain"],
                       dup=obj["dup"])
    if kind in ("puback", "pubrec", "pubrel", "pubcomp", "unsuback"):
        cls = {"puback": Puback, "pubrec": Pubrec, "pubrel": Pubrel,
               "pubcomp": Pubcomp, "unsuback": codec.Unsuback}[kind]
        return cls(packet_id=obj["packet_id"])
    if kind == "subscribe":
        return Subscribe(packet_id=obj["packet_id"],
                         entries=tuple((bytes.fromhex(f), q)
                                       for f, q in obj["entries"]))
    if kind == "suback":
        return codec.Suback(packet_id=obj["packet_id"],
                            return_codes=tuple(obj["return_codes"]))
    if kind == "unsubscribe":
        return Unsubscribe(packet_id=obj["packet_id"],
                           filters=tuple(bytes.fromhex(f) for f in obj["filters"]))
    if kind == "pingreq":
        return Pingreq()
    if kind == "pingresp":
        return codec.Pingresp()
    if kind == "disconnect":
        return Disconnect()
    if kind == "raw":
        return Raw(data=bytes.fromhex(obj["data"]))
    raise ValueError(f"unknown packet type {kind!r}")


def event_to_obj(event: TraceEvent) -> dict:
    return {"record": "event", "seq": event.seq, "t_ms": event.t_ms,
            "session": event.session, "kind": event.kind,
            "packet": None if event.packet is None else packet_to_obj(event.packet),
            "raw": _hex(event.raw), "annotations": list(event.annotations),
            "auto": event.auto, "note": event.note}


def event_from_obj(obj: dict) -> TraceEvent:
    return TraceEvent(seq=obj["seq"], t_ms=obj["t_ms"], session=obj["session"],
                      kind=obj["kind"],
                      packet=None if obj.get("packet") is None
                      else packet_from_obj(obj["packet"]),
                      raw=_unhex(obj.get("raw")),
                      annotations=tuple(obj.get("annotations", ())),
                      auto=obj.get("auto", False), note=obj.get("note", ""))


def trace_to_jsonl(trace: Trace) -> str:
    """One JSON object per line: header, events in seq order, outcome."""
    lines = [json.dumps({"record": "trace-header",
                         "experiment": trace.experiment_name,
                         "endpoint": trace.endpoint,
                         "started_at": trace.started_at})]
    lines.extend(json.dumps(event_to_obj(event)) for event in trace.events)
    lines.append(json.dumps({"record": "trace-outcome", "outcome": trace.outcome,
                             "detail": trace.outcome_detail}))
    return "\n".join(lines) + "\n"


def trace_from_jsonl(text: str) -> Trace:
    header: dict | None = None
    outcome: dict | None = None
    events: list[TraceEvent] = []
    for line_no, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        obj = json.loads(line)
        record = obj.get("record")
        if record == "trace-header":
            header = obj
        elif record == "trace-outcome":
            outcome = obj
        elif record == "event":
            events.append(event_from_obj(obj))
        else:
            raise ValueError(f"line {line_no}: unknown record {record!r}")
    if header is None or outcome is None:
        raise ValueError("trace stream is missing its header or outcome record")
    return Trace(experiment_name=header["experiment"], endpoint=header["endpoint"],
                 started_at=header["started_at"], events=tuple(events),
                 outcome=outcome["outcome"],
                 outcome_detail=outcome.get("detail", ""))
