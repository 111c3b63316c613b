"""Minimal standard-conformant MQTT 3.1.1 broker for loopback runs.

The broker exists as a known-good baseline: experiments executed
against it must come out anomaly-free, so its QoS semantics are the
conformance argument.  Routing decisions all pass through one Router
guarded by a single lock, giving every delivery a total order.

Scope: clean sessions only, no retained messages, no will delivery, no
keep-alive eviction, no auth.  A protocol violation on a connection
closes that connection and nothing else; no input may take the process
down.

The Router is transport-agnostic (sessions are keyed by opaque
hashables and replies come back as values), which lets tests enumerate
packet interleavings against the real routing logic without sockets.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from dataclasses import dataclass, field

from . import codec, topics
from .codec import (
    Connack,
    Connect,
    Disconnect,
    Packet,
    Pingreq,
    Pingresp,
    Puback,
    Pubcomp,
    Publish,
    Pubrec,
    Pubrel,
    Suback,
    Subscribe,
    Unsuback,
    Unsubscribe,
)

log = logging.getLogger("mqttprobe.refbroker")

RETURN_CODE_ACCEPTED = 0
RETURN_CODE_BAD_PROTOCOL = 1

# Annotations a conformant broker can let pass: the standard lets a
# server accept a client id it cannot read as text.  Everything else
# annotated by permissive decoding closes the connection.
TOLERATED_ANNOTATIONS = frozenset({codec.A_CLIENT_ID_NOT_UTF8})


class BrokerBindError(OSError):
    """The listener socket could not be bound."""


class ProtocolViolation(Exception):
    """Connection-fatal peer behavior; the transport closes the socket."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


@dataclass
class _OutboundFlow:
    message: Publish
    awaiting: str  # "puback" | "pubrec" | "pubcomp"


@dataclass
class _Session:
    key: object
    client_id: bytes
    subscriptions: list[tuple[bytes, int]] = field(default_factory=list)
    inbound_qos2: set[int] = field(default_factory=set)
    outbound: dict[int, _OutboundFlow] = field(default_factory=dict)
    next_packet_id: int = 1

    def allocate_packet_id(self) -> int:
        for _ in range(0xFFFF):
            packet_id = self.next_packet_id
            self.next_packet_id = packet_id % 0xFFFF + 1
            if packet_id not in self.outbound:
                return packet_id
        raise ProtocolViolation("no free outbound packet id")


@dataclass
class HandleResult:
    # (session key, packet) pairs in delivery order; replies to the
    # handling session are interleaved where the broker emits them.
    sends: list[tuple[object, Packet]] = field(default_factory=list)
    close: bool = False
    evicted: object | None = None


class Router:
    """Session registry and routing core; serialize calls per instance."""

    def __init__(self) -> None:
        self.lock = threading.Lock()
        self._sessions: dict[object, _Session] = {}
        self._by_client_id: dict[bytes, object] = {}

    def connect(self, key: object, packet: Connect) -> HandleResult:
        """Attach a new session; the first packet of every connection."""
        result = HandleResult()
        if key in self._sessions:
            raise ProtocolViolation("second CONNECT on one connection")
        if packet.protocol_name != b"MQTT" or packet.protocol_level != 4:
            result.sends.append((key, Connack(return_code=RETURN_CODE_BAD_PROTOCOL)))
            result.close = True
            return result
        old_key = self._by_client_id.get(packet.client_id)
        if old_key is not None:
            # Takeover: the standard requires disconnecting the holder.
            self._sessions.pop(old_key, None)
            result.evicted = old_key
        session = _Session(key=key, client_id=packet.client_id)
        self._sessions[key] = session
        self._by_client_id[packet.client_id] = key
        result.sends.append((key, Connack(session_present=False,
                                          return_code=RETURN_CODE_ACCEPTED)))
        return result

    def detach(self, key: object) -> None:
        session = self._sessions.pop(key, None)
        if session is not None and self._by_client_id.get(session.client_id) is key:
            del self._by_client_id[session.client_id]

    def handle(self, key: object, packet: Packet) -> HandleResult:
        """Dispatch one post-CONNECT inbound packet."""
        session = self._sessions.get(key)
        if session is None:
            raise ProtocolViolation("packet before CONNECT")
        if isinstance(packet, Connect):
            raise ProtocolViolation("second CONNECT on one connection")
        if isinstance(packet, (Connack, Suback, Unsuback, Pingresp)):
            raise ProtocolViolation(f"server-only packet {type(packet).__name__} from client")
        if isinstance(packet, Publish):
            return self._publish(session, packet)
        if isinstance(packet, Pubrel):
            # An orphan release still gets its completion: PUBCOMP is
            # the response whether or not the id is known.
            session.inbound_qos2.discard(packet.packet_id)
            return HandleResult(sends=[(key, Pubcomp(packet.packet_id))])
        if isinstance(packet, Puback):
            flow = session.outbound.get(packet.packet_id)
            if flow is not None and flow.awaiting == "puback":
                del session.outbound[packet.packet_id]
            return HandleResult()
        if isinstance(packet, Pubrec):
            flow = session.outbound.get(packet.packet_id)
            if flow is not None and flow.awaiting == "pubrec":
                flow.awaiting = "pubcomp"
                return HandleResult(sends=[(key, Pubrel(packet.packet_id))])
            return HandleResult()
        if isinstance(packet, Pubcomp):
            flow = session.outbound.get(packet.packet_id)
            if flow is not None and flow.awaiting == "pubcomp":
                del session.outbound[packet.packet_id]
            return HandleResult()
        if isinstance(packet, Subscribe):
            return self._subscribe(session, packet)
        if isinstance(packet, Unsubscribe):
            for topic_filter in packet.filters:
                session.subscriptions = [s for s in session.subscriptions
                                         if s[0] != topic_filter]
            return HandleResult(sends=[(key, Unsuback(packet.packet_id))])
        if isinstance(packet, Pingreq):
            return HandleResult(sends=[(key, Pingresp())])
        if isinstance(packet, Disconnect):
            return HandleResult(close=True)
        raise ProtocolViolation(f"unroutable packet {type(packet).__name__}")

    def _subscribe(self, session: _Session, packet: Subscribe) -> HandleResult:
        if not packet.entries:
            raise ProtocolViolation("SUBSCRIBE with no entries")
        for topic_filter, _ in packet.entries:
            violations = topics.validate_filter(topic_filter)
            if violations:
                raise ProtocolViolation(
                    f"invalid subscription filter: {', '.join(violations)}")
        granted = []
        for topic_filter, qos in packet.entries:
            # Re-subscribing to a filter replaces its granted qos.
            session.subscriptions = [s for s in session.subscriptions
                                     if s[0] != topic_filter]
            session.subscriptions.append((topic_filter, qos))
            granted.append(qos)
        return HandleResult(sends=[(session.key,
                                    Suback(packet.packet_id, tuple(granted)))])

    def _publish(self, session: _Session, packet: Publish) -> HandleResult:
        violations = topics.validate_topic(packet.topic)
        if violations:
            raise ProtocolViolation(f"invalid publish topic: {', '.join(violations)}")
        result = HandleResult()
        if packet.qos == 2:
            assert packet.packet_id is not None
            if packet.packet_id in session.inbound_qos2:
                # Retransmission of an open handshake: acknowledge
                # again, do not route again.
                result.sends.append((session.key, Pubrec(packet.packet_id)))
                return result
            session.inbound_qos2.add(packet.packet_id)
            result.sends.extend(self._route(packet))
            result.sends.append((session.key, Pubrec(packet.packet_id)))
        elif packet.qos == 1:
            result.sends.extend(self._route(packet))
            result.sends.append((session.key, Puback(packet.packet_id)))
        else:
            result.sends.extend(self._route(packet))
        return result

    def _route(self, packet: Publish) -> list[tuple[object, Packet]]:
        sends: list[tuple[object, Packet]] = []
        for session in self._sessions.values():
            for topic_filter, granted_qos in session.subscriptions:
                if not topics.match_filter(topic_filter, packet.topic):
                    continue
                out_qos = min(packet.qos, granted_qos)
                if out_qos == 0:
                    out = Publish(topic=packet.topic, payload=packet.payload, qos=0,
                                  retain=False)
                else:
                    packet_id = session.allocate_packet_id()
                    out = Publish(topic=packet.topic, payload=packet.payload,
                                  qos=out_qos, packet_id=packet_id, retain=False)
                    session.outbound[packet_id] = _OutboundFlow(
                        message=out,
                        awaiting="puback" if out_qos == 1 else "pubrec")
                sends.append((session.key, out))
        return sends


class _ConnHandler(threading.Thread):
    def __init__(self, broker: RefBroker, conn: socket.socket, peer: str):
        super().__init__(name=f"refbroker-conn-{peer}", daemon=True)
        self.broker = broker
        self.conn = conn
        self.peer = peer
        self.send_lock = threading.Lock()
        self.closing = False

    def send_packet(self, packet: Packet) -> bool:
        try:
            frame = codec.encode_packet(packet)
        except codec.CodecError:
            log.error("event=encode-failure peer=%s packet=%r", self.peer, packet)
            return False
        # Bounded retry instead of sendall: a peer that stops draining
        # must not wedge the router, only lose its own connection.
        deadline = time.monotonic() + 5.0
        view = memoryview(frame)
        with self.send_lock:
            while view:
                if self.closing or time.monotonic() > deadline:
                    return False
                try:
                    sent = self.conn.send(view)
                except socket.timeout:
                    continue
                except OSError:
                    return False
                view = view[sent:]
        return True

    def close(self) -> None:
        self.closing = True
        try:
            self.conn.close()
        except OSError:
            pass

    def run(self) -> None:
        try:
            self._serve()
        except Exception:
            log.exception("event=handler-crash peer=%s", self.peer)
        finally:
            with self.broker.router.lock:
                self.broker.router.detach(self)
            self.broker._forget(self)
            self.close()

    def _serve(self) -> None:
        self.conn.settimeout(0.2)
        buffer = b""
        connected = False
        while not self.broker.stopped and not self.closing:
            try:
                chunk = self.conn.recv(65536)
            except socket.timeout:
                continue
            except OSError:
                return
            if not chunk:
                log.debug("event=peer-closed peer=%s", self.peer)
                return
            buffer += chunk
            while True:
                try:
                    packet, annotations, consumed = codec.decode_packet(
                        buffer, codec.DecodeMode.PERMISSIVE)
                except codec.IncompleteFrame:
                    break
                except codec.MalformedFrame as exc:
                    log.info("event=close peer=%s reason=malformed detail=%s",
                             self.peer, exc.reason)
                    return
                buffer = buffer[consumed:]
                fatal = [a for a in annotations if a not in TOLERATED_ANNOTATIONS]
                if fatal:
                    log.info("event=close peer=%s reason=annotations detail=%s",
                             self.peer, ",".join(fatal))
                    return
                if not connected and not isinstance(packet, Connect):
                    log.info("event=close peer=%s reason=first-packet-not-connect",
                             self.peer)
                    return
                if not self._dispatch(packet, connected):
                    return
                if isinstance(packet, Connect):
                    connected = True

    def _dispatch(self, packet: Packet, connected: bool) -> bool:
        """Run one packet through the router; False closes the connection."""
        router = self.broker.router
        try:
            with router.lock:
                if isinstance(packet, Connect) and not connected:
                    result = router.connect(self, packet)
                    log.info("event=connect peer=%s client_id=%s",
                             self.peer, packet.client_id.hex())
                else:
                    result = router.handle(self, packet)
                for target, out in result.sends:
                    assert isinstance(target, _ConnHandler)
                    if not target.send_packet(out):
                        target.close()
        except ProtocolViolation as exc:
            log.info("event=close peer=%s reason=violation detail=%s",
                     self.peer, exc.reason)
            return False
        if result.evicted is not None and isinstance(result.evicted, _ConnHandler):
            log.info("event=evict peer=%s", result.evicted.peer)
            result.evicted.close()
        return not result.close


class RefBroker:
    """TCP front end around a Router; start() binds, stop() tears down."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self.host = host
        self.requested_port = port
        self.router = Router()
        self.stopped = False
        self._listener: socket.socket | None = None
        self._accept_thread: threading.Thread | None = None
        self._handlers: set[_ConnHandler] = set()
        self._handlers_lock = threading.Lock()

    @property
    def port(self) -> int:
        if self._listener is None:
            raise RuntimeError("broker not started")
        return self._listener.getsockname()[1]

    def start(self) -> RefBroker:
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            listener.bind((self.host, self.requested_port))
        except OSError as exc:
            listener.close()
            raise BrokerBindError(
                f"cannot bind {self.host}:{self.requested_port}: {exc}") from exc
        listener.listen(64)
        listener.settimeout(0.2)
        self._listener = listener
        self._accept_thread = threading.Thread(target=self._accept_loop,
                                               name="refbroker-accept", daemon=True)
        self._accept_thread.start()
        log.info("event=listening host=%s port=%d", self.host, self.port)
        return self

    def _accept_loop(self) -> None:
        assert self._listener is not None
        while not self.stopped:
            try:
                conn, addr = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            handler = _ConnHandler(self, conn, f"{addr[0]}:{addr[1]}")
            with self._handlers_lock:
                self._handlers.add(handler)
            handler.start()

    def _forget(self, handler: _ConnHandler) -> None:
        with self._handlers_lock:
            self._handlers.discard(handler)

    def stop(self) -> None:
        self.stopped = True
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        with self._handlers_lock:
            handlers = list(self._handlers)
        for handler in handlers:
            handler.close()
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=5)
        for handler in handlers:
            handler.join(timeout=5)
        log.info("event=stopped")

    def __enter__(self) -> RefBroker:
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.stop()


def serve(host: str = "127.0.0.1", port: int = 0) -> RefBroker:
    """Start a broker and return it; raises BrokerBindError on failure."""
    return RefBroker(host=host, port=port).start()
