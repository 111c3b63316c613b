"""MQTT 3.1.1 wire codec.

Packets are plain frozen dataclasses holding raw byte strings, so
deliberately nonconformant values (non-UTF-8 client ids, wildcard
publish topics, packet id 0) stay representable.  ``encode_packet``
refuses only what cannot be framed at all; ``decode_packet`` runs in
two modes: STRICT rejects any protocol violation, PERMISSIVE returns a
best-effort packet plus one annotation per violation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum, IntEnum

MAX_REMAINING_LENGTH = 268_435_455
MAX_STRING = 65_535


class PacketType(IntEnum):
    CONNECT = 1
    CONNACK = 2
    PUBLISH = 3
    PUBACK = 4
    PUBREC = 5
    PUBREL = 6
    PUBCOMP = 7
    SUBSCRIBE = 8
    SUBACK = 9
    UNSUBSCRIBE = 10
    UNSUBACK = 11
    PINGREQ = 12
    PINGRESP = 13
    DISCONNECT = 14


class DecodeMode(Enum):
    STRICT = "strict"
    PERMISSIVE = "permissive"


# Annotation codes attached by permissive decoding.  Stable strings:
# the oracle and the reference broker key off them.
A_RESERVED_FLAGS = "reserved-flags"
A_LENGTH_NOT_MINIMAL = "length-not-minimal"
A_TRAILING_BYTES = "trailing-bytes"
A_PACKET_ID_ZERO = "packet-id-zero"
A_PUBLISH_QOS_3 = "publish-qos-3"
A_DUP_ON_QOS0 = "dup-on-qos0"
A_TOPIC_NOT_UTF8 = "topic-not-utf8"
A_FILTER_NOT_UTF8 = "filter-not-utf8"
A_CLIENT_ID_NOT_UTF8 = "client-id-not-utf8"
A_CONNECT_RESERVED_FLAG = "connect-reserved-flag"
A_WILL_QOS_INVALID = "will-qos-invalid"
A_WILL_FLAGS_WITHOUT_WILL = "will-flags-without-will"
A_PASSWORD_WITHOUT_USERNAME = "password-without-username"
A_CONNACK_FLAGS = "connack-flags"
A_CONNACK_RETURN_CODE = "connack-return-code"
A_SUBSCRIBE_EMPTY = "subscribe-empty"
A_SUBSCRIBE_QOS_INVALID = "subscribe-qos-invalid"
A_UNSUBSCRIBE_EMPTY = "unsubscribe-empty"
A_SUBACK_EMPTY = "suback-empty"
A_SUBACK_RETURN_CODE = "suback-return-code"


class CodecError(Exception):
    """Base class for codec failures."""


class IncompleteFrame(CodecError):
    """More bytes are required before the frame can be decoded."""


class MalformedFrame(CodecError):
    """The bytes cannot be parsed into a packet, even permissively.

    ``frame_length`` is set when the fixed header was readable, so a
    stream reader can discard exactly the offending frame and resync.
    """

    def __init__(self, reason: str, frame_length: int | None = None):
        super().__init__(reason)
        self.reason = reason
        self.frame_length = frame_length


class InvariantViolation(CodecError):
    """A packet field cannot be represented on the wire."""

    def __init__(self, field_name: str, reason: str):
        super().__init__(f"{field_name}: {reason}")
        self.field = field_name
        self.reason = reason


class OutOfRange(CodecError):
    """Value exceeds the four-byte remaining-length limit."""


class OutOfBounds(CodecError):
    """Splice range falls outside the frame."""


def encode_remaining_length(value: int) -> bytes:
    """Encode an int as an MQTT variable-length quantity (1-4 bytes)."""
    if value < 0 or value > MAX_REMAINING_LENGTH:
        raise OutOfRange(f"remaining length {value} outside 0..{MAX_REMAINING_LENGTH}")
    out = bytearray()
    while True:
        value, digit = divmod(value, 128)
        if value:
            out.append(digit | 0x80)
        else:
            out.append(digit)
            return bytes(out)


def decode_remaining_length(data: bytes) -> tuple[int, int]:
    """Decode a variable-length quantity, returning (value, consumed).

    Raises IncompleteFrame if the continuation bit runs past the buffer
    and MalformedFrame if a fourth continuation bit is set.
    """
    value = 0
    for i in range(4):
        if i >= len(data):
            raise IncompleteFrame("remaining length truncated")
        byte = data[i]
        value |= (byte & 0x7F) << (7 * i)
        if not byte & 0x80:
            return value, i + 1
    raise MalformedFrame("remaining length exceeds four bytes")


def _encode_string(data: bytes, field_name: str) -> bytes:
    if len(data) > MAX_STRING:
        raise InvariantViolation(field_name, f"{len(data)} bytes exceeds {MAX_STRING}")
    return len(data).to_bytes(2, "big") + data


def _is_utf8(data: bytes) -> bool:
    try:
        data.decode("utf-8")
    except UnicodeDecodeError:
        return False
    return True


@dataclass(frozen=True)
class Will:
    topic: bytes
    payload: bytes
    qos: int = 0
    retain: bool = False


@dataclass(frozen=True)
class Connect:
    client_id: bytes = b""
    clean_session: bool = True
    keep_alive: int = 60
    protocol_name: bytes = b"MQTT"
    protocol_level: int = 4
    will: Will | None = None
    username: bytes | None = None
    password: bytes | None = None


@dataclass(frozen=True)
class Connack:
    session_present: bool = False
    return_code: int = 0


@dataclass(frozen=True)
class Publish:
    topic: bytes
    payload: bytes = b""
    qos: int = 0
    packet_id: int | None = None
    retain: bool = False
    dup: bool = False


@dataclass(frozen=True)
class Puback:
    packet_id: int


@dataclass(frozen=True)
class Pubrec:
    packet_id: int


@dataclass(frozen=True)
class Pubrel:
    packet_id: int


@dataclass(frozen=True)
class Pubcomp:
    packet_id: int


@dataclass(frozen=True)
class Subscribe:
    packet_id: int
    # (topic filter, requested qos) pairs
    entries: tuple[tuple[bytes, int], ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple((bytes(f), q) for f, q in self.entries))


@dataclass(frozen=True)
class Suback:
    packet_id: int
    return_codes: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "return_codes", tuple(self.return_codes))


@dataclass(frozen=True)
class Unsubscribe:
    packet_id: int
    filters: tuple[bytes, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "filters", tuple(bytes(f) for f in self.filters))


@dataclass(frozen=True)
class Unsuback:
    packet_id: int


@dataclass(frozen=True)
class Pingreq:
    pass


@dataclass(frozen=True)
class Pingresp:
    pass


@dataclass(frozen=True)
class Disconnect:
    pass


@dataclass(frozen=True)
class Raw:
    """Pre-framed bytes, emitted verbatim; decode never produces one."""

    data: bytes = field(default=b"")


Packet = (
    Connect | Connack | Publish | Puback | Pubrec | Pubrel | Pubcomp
    | Subscribe | Suback | Unsubscribe | Unsuback
    | Pingreq | Pingresp | Disconnect | Raw
)

# Fixed-header flag nibble required for each type; PUBLISH is dynamic.
_FIXED_FLAGS = {
    PacketType.CONNECT: 0,
    PacketType.CONNACK: 0,
    PacketType.PUBACK: 0,
    PacketType.PUBREC: 0,
    PacketType.PUBREL: 2,
    PacketType.PUBCOMP: 0,
    PacketType.SUBSCRIBE: 2,
    PacketType.SUBACK: 0,
    PacketType.UNSUBSCRIBE: 2,
    PacketType.UNSUBACK: 0,
    PacketType.PINGREQ: 0,
    PacketType.PINGRESP: 0,
    PacketType.DISCONNECT: 0,
}

_ACK_TYPES = {
    PacketType.PUBACK: Puback,
    PacketType.PUBREC: Pubrec,
    PacketType.PUBREL: Pubrel,
    PacketType.PUBCOMP: Pubcomp,
    PacketType.UNSUBACK: Unsuback,
}


def _check_packet_id(value: int, field_name: str = "packet_id") -> None:
    if not 0 <= value <= 0xFFFF:
        raise InvariantViolation(field_name, f"{value} outside 0..65535")


def _frame(ptype: PacketType, flags: int, body: bytes) -> bytes:
    if len(body) > MAX_REMAINING_LENGTH:
        raise InvariantViolation("remaining_length", f"body of {len(body)} bytes exceeds {MAX_REMAINING_LENGTH}")
    return bytes([(ptype << 4) | flags]) + encode_remaining_length(len(body)) + body


def encode_packet(packet: Packet) -> bytes:
    """Serialize a packet to a complete frame.

    Raises InvariantViolation naming the offending field when the
    packet cannot be framed (qos out of range, overlong strings, a
    packet id where none belongs).  Deliberate protocol violations that
    are frameable (packet id 0, wildcard topics, non-UTF-8 strings) are
    encoded as-is; breaking frames beyond that is what Raw and splice
    are for.
    """
    if isinstance(packet, Raw):
        return packet.data
    if isinstance(packet, Connect):
        return _encode_connect(packet)
    if isinstance(packet, Connack):
        if not 0 <= packet.return_code <= 5:
            raise InvariantViolation("return_code", f"{packet.return_code} outside 0..5")
        body = bytes([1 if packet.session_present else 0, packet.return_code])
        return _frame(PacketType.CONNACK, 0, body)
    if isinstance(packet, Publish):
        return _encode_publish(packet)
    if isinstance(packet, Puback):
        _check_packet_id(packet.packet_id)
        return _frame(PacketType.PUBACK, 0, packet.packet_id.to_bytes(2, "big"))
    if isinstance(packet, Pubrec):
        _check_packet_id(packet.packet_id)
        return _frame(PacketType.PUBREC, 0, packet.packet_id.to_bytes(2, "big"))
    if isinstance(packet, Pubrel):
        _check_packet_id(packet.packet_id)
        return _frame(PacketType.PUBREL, 2, packet.packet_id.to_bytes(2, "big"))
    if isinstance(packet, Pubcomp):
        _check_packet_id(packet.packet_id)
        return _frame(PacketType.PUBCOMP, 0, packet.packet_id.to_bytes(2, "big"))
    if isinstance(packet, Subscribe):
        _check_packet_id(packet.packet_id)
        body = bytearray(packet.packet_id.to_bytes(2, "big"))
        for i, (topic_filter, qos) in enumerate(packet.entries):
            if not 0 <= qos <= 2:
                raise InvariantViolation(f"entries[{i}].qos", f"{qos} outside 0..2")
            body += _encode_string(topic_filter, f"entries[{i}].filter")
            body.append(qos)
        return _frame(PacketType.SUBSCRIBE, 2, bytes(body))
    if isinstance(packet, Suback):
        _check_packet_id(packet.packet_id)
        for i, code in enumerate(packet.return_codes):
            if code not in (0, 1, 2, 0x80):
                raise InvariantViolation(f"return_codes[{i}]", f"{code} not in {{0, 1, 2, 0x80}}")
        body = packet.packet_id.to_bytes(2, "big") + bytes(packet.return_codes)
        return _frame(PacketType.SUBACK, 0, body)
    if isinstance(packet, Unsubscribe):
        _check_packet_id(packet.packet_id)
        body = bytearray(packet.packet_id.to_bytes(2, "big"))
        for i, topic_filter in enumerate(packet.filters):
            body += _encode_string(topic_filter, f"filters[{i}]")
        return _frame(PacketType.UNSUBSCRIBE, 2, bytes(body))
    if isinstance(packet, Unsuback):
        _check_packet_id(packet.packet_id)
        return _frame(PacketType.UNSUBACK, 0, packet.packet_id.to_bytes(2, "big"))
    if isinstance(packet, Pingreq):
        return _frame(PacketType.PINGREQ, 0, b"")
    if isinstance(packet, Pingresp):
        return _frame(PacketType.PINGRESP, 0, b"")
    if isinstance(packet, Disconnect):
        return _frame(PacketType.DISCONNECT, 0, b"")
    raise InvariantViolation("packet", f"unsupported packet {packet!r}")


def _encode_connect(packet: Connect) -> bytes:
    if not 0 <= packet.keep_alive <= 0xFFFF:
        raise InvariantViolation("keep_alive", f"{packet.keep_alive} outside 0..65535")
    if not 0 <= packet.protocol_level <= 0xFF:
        raise InvariantViolation("protocol_level", f"{packet.protocol_level} outside 0..255")
    flags = 0
    if packet.clean_session:
        flags |= 0x02
    if packet.will is not None:
        if not 0 <= packet.will.qos <= 2:
            raise InvariantViolation("will.qos", f"{packet.will.qos} outside 0..2")
        flags |= 0x04 | (packet.will.qos << 3)
        if packet.will.retain:
            flags |= 0x20
    if packet.username is not None:
        flags |= 0x80
    if packet.password is not None:
        flags |= 0x40
    body = bytearray()
    body += _encode_string(packet.protocol_name, "protocol_name")
    body.append(packet.protocol_level)
    body.append(flags)
    body += packet.keep_alive.to_bytes(2, "big")
    body += _encode_string(packet.client_id, "client_id")
    if packet.will is not None:
        body += _encode_string(packet.will.topic, "will.topic")
        body += _encode_string(packet.will.payload, "will.payload")
    if packet.username is not None:
        body += _encode_string(packet.username, "username")
    if packet.password is not None:
        body += _encode_string(packet.password, "password")
    return _frame(PacketType.CONNECT, 0, bytes(body))


def _encode_publish(packet: Publish) -> bytes:
    if not 0 <= packet.qos <= 2:
        raise InvariantViolation("qos", f"{packet.qos} outside 0..2")
    if packet.qos == 0 and packet.packet_id is not None:
        raise InvariantViolation("packet_id", "present on a qos 0 publish")
    if packet.qos > 0 and packet.packet_id is None:
        raise InvariantViolation("packet_id", f"missing on a qos {packet.qos} publish")
    flags = packet.qos << 1
    if packet.dup:
        flags |= 0x08
    if packet.retain:
        flags |= 0x01
    body = bytearray(_encode_string(packet.topic, "topic"))
    if packet.packet_id is not None:
        _check_packet_id(packet.packet_id)
        body += packet.packet_id.to_bytes(2, "big")
    body += packet.payload
    return _frame(PacketType.PUBLISH, flags, bytes(body))


class _Body:
    """Cursor over one frame body; overruns raise MalformedFrame."""

    def __init__(self, data: bytes, frame_length: int):
        self.data = data
        self.pos = 0
        self.frame_length = frame_length

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise MalformedFrame(f"{what} overruns the frame body", self.frame_length)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def take_u16(self, what: str) -> int:
        return int.from_bytes(self.take(2, what), "big")

    def take_string(self, what: str) -> bytes:
        return self.take(self.take_u16(f"{what} length"), what)

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos


def decode_packet(data: bytes, mode: DecodeMode = DecodeMode.STRICT) -> tuple[Packet, list[str], int]:
    """Decode one frame from the start of ``data``.

    Returns (packet, annotations, consumed).  STRICT mode raises
    MalformedFrame whenever PERMISSIVE mode would have annotated;
    IncompleteFrame means the buffer ends mid-frame and more bytes may
    complete it.
    """
    if not data:
        raise IncompleteFrame("empty buffer")
    type_value = data[0] >> 4
    flags = data[0] & 0x0F
    try:
        ptype = PacketType(type_value)
    except ValueError:
        raise MalformedFrame(f"reserved packet type {type_value}") from None
    length, length_consumed = decode_remaining_length(data[1:])
    frame_length = 1 + length_consumed + length
    if len(data) < frame_length:
        raise IncompleteFrame(f"need {frame_length} bytes, have {len(data)}")

    annotations: list[str] = []
    if length_consumed > len(encode_remaining_length(length)):
        annotations.append(A_LENGTH_NOT_MINIMAL)
    body = _Body(data[1 + length_consumed:frame_length], frame_length)

    if ptype == PacketType.PUBLISH:
        packet = _decode_publish(flags, body, annotations)
    else:
        if flags != _FIXED_FLAGS[ptype]:
            annotations.append(A_RESERVED_FLAGS)
        if ptype == PacketType.CONNECT:
            packet = _decode_connect(body, annotations)
        elif ptype == PacketType.CONNACK:
            ack_flags = body.take(1, "connack flags")[0]
            return_code = body.take(1, "connack return code")[0]
            if ack_flags & 0xFE:
                annotations.append(A_CONNACK_FLAGS)
            if return_code > 5:
                annotations.append(A_CONNACK_RETURN_CODE)
            packet = Connack(session_present=bool(ack_flags & 1), return_code=return_code)
        elif ptype in _ACK_TYPES:
            packet_id = body.take_u16("packet id")
            if packet_id == 0:
                annotations.append(A_PACKET_ID_ZERO)
            packet = _ACK_TYPES[ptype](packet_id=packet_id)
        elif ptype == PacketType.SUBSCRIBE:
            packet = _decode_subscribe(body, annotations)
        elif ptype == PacketType.SUBACK:
            packet_id = body.take_u16("packet id")
            if packet_id == 0:
                annotations.append(A_PACKET_ID_ZERO)
            codes = tuple(body.take(body.remaining, "return codes"))
            if not codes:
                annotations.append(A_SUBACK_EMPTY)
            if any(code not in (0, 1, 2, 0x80) for code in codes):
                annotations.append(A_SUBACK_RETURN_CODE)
            packet = Suback(packet_id=packet_id, return_codes=codes)
        elif ptype == PacketType.UNSUBSCRIBE:
            packet_id = body.take_u16("packet id")
            if packet_id == 0:
                annotations.append(A_PACKET_ID_ZERO)
            filters = []
            while body.remaining:
                filters.append(body.take_string("filter"))
            if not filters:
                annotations.append(A_UNSUBSCRIBE_EMPTY)
            packet = Unsubscribe(packet_id=packet_id, filters=tuple(filters))
        else:  # PINGREQ, PINGRESP, DISCONNECT
            packet = {PacketType.PINGREQ: Pingreq, PacketType.PINGRESP: Pingresp,
                      PacketType.DISCONNECT: Disconnect}[ptype]()

    if body.remaining:
        annotations.append(A_TRAILING_BYTES)
    if mode is DecodeMode.STRICT and annotations:
        raise MalformedFrame("; ".join(annotations), frame_length)
    return packet, annotations, frame_length


def _decode_publish(flags: int, body: _Body, annotations: list[str]) -> Publish:
    qos = (flags >> 1) & 0x03
    dup = bool(flags & 0x08)
    retain = bool(flags & 0x01)
    if qos == 3:
        annotations.append(A_PUBLISH_QOS_3)
    if dup and qos == 0:
        annotations.append(A_DUP_ON_QOS0)
    topic = body.take_string("topic")
    if not _is_utf8(topic):
        annotations.append(A_TOPIC_NOT_UTF8)
    packet_id = None
    if qos > 0:
        packet_id = body.take_u16("packet id")
        if packet_id == 0:
            annotations.append(A_PACKET_ID_ZERO)
    payload = body.take(body.remaining, "payload")
    return Publish(topic=topic, payload=payload, qos=qos, packet_id=packet_id,
                   retain=retain, dup=dup)


def _decode_connect(body: _Body, annotations: list[str]) -> Connect:
    protocol_name = body.take_string("protocol name")
    protocol_level = body.take(1, "protocol level")[0]
    flags = body.take(1, "connect flags")[0]
    keep_alive = body.take_u16("keep alive")
    if flags & 0x01:
        annotations.append(A_CONNECT_RESERVED_FLAG)
    has_will = bool(flags & 0x04)
    will_qos = (flags >> 3) & 0x03
    will_retain = bool(flags & 0x20)
    has_username = bool(flags & 0x80)
    has_password = bool(flags & 0x40)
    if not has_will and (will_qos or will_retain):
        annotations.append(A_WILL_FLAGS_WITHOUT_WILL)
    if has_will and will_qos == 3:
        annotations.append(A_WILL_QOS_INVALID)
    if has_password and not has_username:
        annotations.append(A_PASSWORD_WITHOUT_USERNAME)
    client_id = body.take_string("client id")
    if not _is_utf8(client_id):
        annotations.append(A_CLIENT_ID_NOT_UTF8)
    will = None
    if has_will:
        will_topic = body.take_string("will topic")
        will_payload = body.take_string("will payload")
        will = Will(topic=will_topic, payload=will_payload,
                    qos=min(will_qos, 2), retain=will_retain)
    username = body.take_string("username") if has_username else None
    password = body.take_string("password") if has_password else None
    return Connect(client_id=client_id, clean_session=bool(flags & 0x02),
                   keep_alive=keep_alive, protocol_name=protocol_name,
                   protocol_level=protocol_level, will=will,
                   username=username, password=password)


def _decode_subscribe(body: _Body, annotations: list[str]) -> Subscribe:
    packet_id = body.take_u16("packet id")
    if packet_id == 0:
        annotations.append(A_PACKET_ID_ZERO)
    entries = []
    while body.remaining:
        topic_filter = body.take_string("filter")
        qos = body.take(1, "requested qos")[0]
        if qos > 2:
            if A_SUBSCRIBE_QOS_INVALID not in annotations:
                annotations.append(A_SUBSCRIBE_QOS_INVALID)
        if not _is_utf8(topic_filter):
            if A_FILTER_NOT_UTF8 not in annotations:
                annotations.append(A_FILTER_NOT_UTF8)
        entries.append((topic_filter, qos))
    if not entries:
        annotations.append(A_SUBSCRIBE_EMPTY)
    return Subscribe(packet_id=packet_id, entries=tuple(entries))


def splice(frame: bytes, at: int, remove: int, insert: bytes, fixup_length: bool) -> bytes:
    """Replace ``remove`` bytes at offset ``at`` with ``insert``.

    With ``fixup_length`` the remaining-length varint of the patched
    frame is recomputed to match the new body, letting callers mutate a
    body without the frame length giving the edit away.  Raises
    OutOfBounds when the range falls outside the frame.
    """
    if at < 0 or remove < 0 or at + remove > len(frame):
        raise OutOfBounds(f"splice {at}+{remove} outside frame of {len(frame)} bytes")
    patched = frame[:at] + insert + frame[at + remove:]
    if not fixup_length:
        return patched
    if not patched:
        raise OutOfBounds("cannot fix up the length of an empty frame")
    try:
        _, length_consumed = decode_remaining_length(patched[1:])
    except CodecError as exc:
        raise OutOfBounds(f"cannot locate remaining length after splice: {exc}") from exc
    body = patched[1 + length_consumed:]
    return patched[:1] + encode_remaining_length(len(body)) + body
