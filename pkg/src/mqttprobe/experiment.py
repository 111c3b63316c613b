"""Scripted experiment model and its JSON document format.

An experiment declares sessions (each one broker connection) and an
ordered step list.  Sessions connect lazily: the runner opens the
socket and sends CONNECT right before the first step that needs the
wire, so a document doesn't have to script the connect unless it wants
to splice or reorder it.  Nothing is auto-assigned: packet ids appear
on the wire exactly as scripted, because reusing them is the point.

Parsing is total over arbitrary JSON text: any input either yields an
Experiment or raises one of the typed errors below with a path to the
offending element.
"""

from __future__ import annotations

import binascii
import json
from dataclasses import dataclass, field, fields

from . import codec

MAX_WAIT_MS = 60_000
MAX_REPEAT = 100_000
MAX_SETTLE_MS = 600_000
# Guard against nested repeats expanding into unbounded step lists.
MAX_EXPANDED_STEPS = 1_000_000
DEFAULT_SETTLE_MS = 500


class ExperimentError(Exception):
    """Base class for experiment document errors."""


class SchemaError(ExperimentError):
    def __init__(self, path: str, reason: str):
        super().__init__(f"{path}: {reason}" if path else reason)
        self.path = path
        self.reason = reason


class DuplicateSessionError(ExperimentError):
    def __init__(self, session_id: str):
        super().__init__(f"session {session_id!r} declared twice")
        self.session_id = session_id


class UnknownSessionRefError(ExperimentError):
    def __init__(self, path: str, session_id: str):
        super().__init__(f"{path}: step references undeclared session {session_id!r}")
        self.path = path
        self.session_id = session_id


@dataclass(frozen=True)
class SessionDecl:
    id: str
    client_id: bytes | None = None  # None resolves to the id, UTF-8 encoded
    clean_session: bool = True
    keep_alive: int = 60
    protocol_name: bytes = b"MQTT"
    protocol_level: int = 4
    username: str | None = None
    password: str | None = None
    auto_ack: bool = True

    def __post_init__(self) -> None:
        if self.client_id is None:
            object.__setattr__(self, "client_id", self.id.encode("utf-8"))

    def to_connect(self) -> codec.Connect:
        return codec.Connect(
            client_id=self.client_id,
            clean_session=self.clean_session,
            keep_alive=self.keep_alive,
            protocol_name=self.protocol_name,
            protocol_level=self.protocol_level,
            username=None if self.username is None else self.username.encode("utf-8"),
            password=None if self.password is None else self.password.encode("utf-8"),
        )


@dataclass(frozen=True)
class ConnectStep:
    session: str
    action = "connect"


@dataclass(frozen=True)
class DisconnectStep:
    session: str
    action = "disconnect"


@dataclass(frozen=True)
class SubscribeStep:
    session: str
    filter: bytes
    qos: int = 0
    packet_id: int = 1
    action = "subscribe"


@dataclass(frozen=True)
class UnsubscribeStep:
    session: str
    filter: bytes
    packet_id: int = 1
    action = "unsubscribe"


@dataclass(frozen=True)
class PublishStep:
    session: str
    topic: bytes
    payload: bytes = b""
    qos: int = 0
    packet_id: int | None = None
    retain: bool = False
    dup: bool = False
    action = "publish"


@dataclass(frozen=True)
class PubackStep:
    session: str
    packet_id: int
    action = "puback"


@dataclass(frozen=True)
class PubrecStep:
    session: str
    packet_id: int
    action = "pubrec"


@dataclass(frozen=True)
class PubrelStep:
    session: str
    packet_id: int
    action = "pubrel"


@dataclass(frozen=True)
class PubcompStep:
    session: str
    packet_id: int
    action = "pubcomp"


@dataclass(frozen=True)
class PingreqStep:
    session: str
    action = "pingreq"


@dataclass(frozen=True)
class SendRawStep:
    session: str
    data: bytes
    action = "send_raw"


@dataclass(frozen=True)
class SpliceNextStep:
    """Arm a byte-level patch for the session's next scripted frame."""

    session: str
    offset: int
    remove: int = 0
    insert: bytes = b""
    fixup_length: bool = True
    action = "splice_next"


@dataclass(frozen=True)
class WaitStep:
    session: str
    ms: int
    action = "wait"


@dataclass(frozen=True)
class RepeatStep:
    session: str
    count: int
    steps: tuple[Step, ...] = ()
    action = "repeat"

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))


Step = (
    ConnectStep | DisconnectStep | SubscribeStep | UnsubscribeStep | PublishStep
    | PubackStep | PubrecStep | PubrelStep | PubcompStep | PingreqStep
    | SendRawStep | SpliceNextStep | WaitStep | RepeatStep
)


@dataclass(frozen=True)
class Experiment:
    name: str
    description: str = ""
    sessions: tuple[SessionDecl, ...] = ()
    steps: tuple[Step, ...] = ()
    settle_ms: int = DEFAULT_SETTLE_MS

    def __post_init__(self) -> None:
        object.__setattr__(self, "sessions", tuple(self.sessions))
        object.__setattr__(self, "steps", tuple(self.steps))

    def session(self, session_id: str) -> SessionDecl:
        for decl in self.sessions:
            if decl.id == session_id:
                return decl
        raise KeyError(session_id)


def expand_steps(experiment: Experiment) -> list[Step]:
    """Flatten repeat blocks into the primitive step sequence."""
    out: list[Step] = []

    def walk(steps: tuple[Step, ...]) -> None:
        for step in steps:
            if isinstance(step, RepeatStep):
                for _ in range(step.count):
                    walk(step.steps)
            else:
                out.append(step)
                if len(out) > MAX_EXPANDED_STEPS:
                    raise SchemaError("steps", f"expansion exceeds {MAX_EXPANDED_STEPS} steps")

    walk(experiment.steps)
    return out


# --- parsing ---------------------------------------------------------------

class _Obj:
    """A JSON object being consumed key by key; leftovers are errors."""

    def __init__(self, raw: object, path: str):
        if not isinstance(raw, dict):
            raise SchemaError(path, f"expected an object, got {type(raw).__name__}")
        self.raw = dict(raw)
        self.path = path

    def sub(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def take(self, key: str, kind: type, default: object = ...) -> object:
        if key not in self.raw:
            if default is ...:
                raise SchemaError(self.path, f"missing required key {key!r}")
            return default
        value = self.raw.pop(key)
        if kind is int and isinstance(value, bool):
            raise SchemaError(self.sub(key), "expected an integer, got a boolean")
        if not isinstance(value, kind):
            raise SchemaError(self.sub(key), f"expected {kind.__name__}, got {type(value).__name__}")
        return value

    def take_int(self, key: str, low: int, high: int, default: object = ...) -> int | None:
        value = self.take(key, int, default)
        if value is None:
            return None
        if not low <= value <= high:  # type: ignore[operator]
            raise SchemaError(self.sub(key), f"{value} outside {low}..{high}")
        return value  # type: ignore[return-value]

    def take_bytes(self, key: str, default: object = ...) -> object:
        """Accept either a UTF-8 text key or its '<key>_hex' twin."""
        hex_key = f"{key}_hex"
        if key in self.raw and hex_key in self.raw:
            raise SchemaError(self.path, f"{key!r} and {hex_key!r} are mutually exclusive")
        if hex_key in self.raw:
            text = self.take(hex_key, str)
            try:
                return binascii.unhexlify(text)
            except (binascii.Error, ValueError):
                raise SchemaError(self.sub(hex_key), "invalid hex string") from None
        if key in self.raw:
            return self.take(key, str).encode("utf-8")  # type: ignore[union-attr]
        if default is ...:
            raise SchemaError(self.path, f"missing required key {key!r} (or {hex_key!r})")
        return default

    def finish(self) -> None:
        if self.raw:
            key = sorted(self.raw)[0]
            raise SchemaError(self.sub(key), "unknown key")


def _parse_session(raw: object, path: str) -> SessionDecl:
    obj = _Obj(raw, path)
    session_id = obj.take("id", str)
    decl = SessionDecl(
        id=session_id,
        client_id=obj.take_bytes("client_id", None),
        clean_session=obj.take("clean_session", bool, True),
        keep_alive=obj.take_int("keep_alive", 0, 65_535, 60),
        protocol_name=obj.take_bytes("protocol_name", b"MQTT"),
        protocol_level=obj.take_int("protocol_level", 0, 255, 4),
        username=obj.take("username", str, None),
        password=obj.take("password", str, None),
        auto_ack=obj.take("auto_ack", bool, True),
    )
    obj.finish()
    return decl


def _parse_step(raw: object, path: str, depth: int) -> Step:
    obj = _Obj(raw, path)
    session = obj.take("session", str)
    action = obj.take("action", str)
    step: Step
    if action == "connect":
        step = ConnectStep(session)
    elif action == "disconnect":
        step = DisconnectStep(session)
    elif action == "subscribe":
        step = SubscribeStep(session, filter=obj.take_bytes("filter"),
                             qos=obj.take_int("qos", 0, 2, 0),
                             packet_id=obj.take_int("packet_id", 0, 65_535, 1))
    elif action == "unsubscribe":
        step = UnsubscribeStep(session, filter=obj.take_bytes("filter"),
                               packet_id=obj.take_int("packet_id", 0, 65_535, 1))
    elif action == "publish":
        qos = obj.take_int("qos", 0, 2, 0)
        packet_id = obj.take_int("packet_id", 0, 65_535, None)
        if qos > 0 and packet_id is None:
            raise SchemaError(path, f"publish with qos {qos} requires an explicit packet_id")
        if qos == 0 and packet_id is not None:
            raise SchemaError(obj.sub("packet_id"), "not representable on a qos 0 publish; "
                                                    "use splice_next to force one")
        step = PublishStep(session, topic=obj.take_bytes("topic"),
                           payload=obj.take_bytes("payload", b""), qos=qos,
                           packet_id=packet_id,
                           retain=obj.take("retain", bool, False),
                           dup=obj.take("dup", bool, False))
    elif action in ("puback", "pubrec", "pubrel", "pubcomp"):
        cls = {"puback": PubackStep, "pubrec": PubrecStep,
               "pubrel": PubrelStep, "pubcomp": PubcompStep}[action]
        step = cls(session, packet_id=obj.take_int("packet_id", 0, 65_535))
    elif action == "pingreq":
        step = PingreqStep(session)
    elif action == "send_raw":
        step = SendRawStep(session, data=obj.take_bytes("data"))
    elif action == "splice_next":
        step = SpliceNextStep(session, offset=obj.take_int("offset", 0, 2**31, 0),
                              remove=obj.take_int("remove", 0, 2**31, 0),
                              insert=obj.take_bytes("insert", b""),
                              fixup_length=obj.take("fixup_length", bool, True))
    elif action == "wait":
        step = WaitStep(session, ms=obj.take_int("ms", 0, MAX_WAIT_MS))
    elif action == "repeat":
        if depth >= 4:
            raise SchemaError(path, "repeat nesting deeper than 4")
        count = obj.take_int("count", 1, MAX_REPEAT)
        inner_raw = obj.take("steps", list)
        inner = tuple(_parse_step(item, f"{path}.steps[{i}]", depth + 1)
                      for i, item in enumerate(inner_raw))  # type: ignore[union-attr]
        if not inner:
            raise SchemaError(obj.sub("steps"), "repeat with no steps")
        step = RepeatStep(session, count=count, steps=inner)
    else:
        raise SchemaError(obj.sub("action"), f"unknown action {action!r}")
    obj.finish()
    return step


def parse_experiment(text: str) -> Experiment:
    """Parse a JSON experiment document."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError("", f"not valid JSON: {exc}") from None
    obj = _Obj(raw, "")
    name = obj.take("name", str)
    if not name:
        raise SchemaError("name", "must not be empty")
    description = obj.take("description", str, "")
    settle_ms = obj.take_int("settle_ms", 0, MAX_SETTLE_MS, DEFAULT_SETTLE_MS)
    sessions_raw = obj.take("sessions", list)
    steps_raw = obj.take("steps", list)
    obj.finish()

    sessions = []
    seen = set()
    for i, item in enumerate(sessions_raw):  # type: ignore[union-attr]
        decl = _parse_session(item, f"sessions[{i}]")
        if decl.id in seen:
            raise DuplicateSessionError(decl.id)
        seen.add(decl.id)
        sessions.append(decl)
    if not sessions:
        raise SchemaError("sessions", "at least one session is required")

    steps = []
    for i, item in enumerate(steps_raw):  # type: ignore[union-attr]
        steps.append(_parse_step(item, f"steps[{i}]", 0))

    experiment = Experiment(name=name, description=description,
                            sessions=tuple(sessions), steps=tuple(steps),
                            settle_ms=settle_ms)
    _check_session_refs(experiment)
    expand_steps(experiment)  # enforces the expansion cap
    return experiment


def _check_session_refs(experiment: Experiment) -> None:
    declared = {decl.id for decl in experiment.sessions}

    def walk(steps: tuple[Step, ...], prefix: str) -> None:
        for i, step in enumerate(steps):
            path = f"{prefix}[{i}]"
            if step.session not in declared:
                raise UnknownSessionRefError(path, step.session)
            if isinstance(step, RepeatStep):
                walk(step.steps, f"{path}.steps")

    walk(experiment.steps, "steps")


# --- rendering -------------------------------------------------------------

def _render_step(step: Step) -> dict:
    out: dict[str, object] = {"session": step.session, "action": step.action}
    for f in fields(step):
        if f.name == "session":
            continue
        value = getattr(step, f.name)
        if f.name == "steps":
            out["steps"] = [_render_step(inner) for inner in value]
        elif isinstance(value, bytes):
            key = "data" if step.action == "send_raw" else f.name
            out[f"{key}_hex"] = value.hex()
        elif value is None:
            continue
        else:
            out[f.name] = value
    return out


def render_experiment(experiment: Experiment) -> str:
    """Serialize to the canonical document form.

    Byte-valued fields always render as their ``_hex`` spelling and
    defaults are written out, so rendering is stable and re-parsing
    yields an equal Experiment.
    """
    sessions = []
    for decl in experiment.sessions:
        session: dict[str, object] = {
            "id": decl.id,
            "client_id_hex": decl.client_id.hex(),
            "clean_session": decl.clean_session,
            "keep_alive": decl.keep_alive,
            "protocol_name_hex": decl.protocol_name.hex(),
            "protocol_level": decl.protocol_level,
            "auto_ack": decl.auto_ack,
        }
        if decl.username is not None:
            session["username"] = decl.username
        if decl.password is not None:
            session["password"] = decl.password
        sessions.append(session)
    doc = {
        "name": experiment.name,
        "description": experiment.description,
        "settle_ms": experiment.settle_ms,
        "sessions": sessions,
        "steps": [_render_step(step) for step in experiment.steps],
    }
    return json.dumps(doc, indent=2)
