"""Trace classification: conformance anomalies, fingerprints, diffs.

The oracle never trusts the broker: expected deliveries are recomputed
from the experiment script by a small conformant-broker model, then
compared with what the trace actually witnessed.  Rules:

R1  every matched publish routes exactly once: missing qos>0 payloads
    are lost-message, excess copies are duplicate-delivery, and copies
    of a same-id qos 2 retransmission (which a conformant broker must
    suppress) are id-reuse-mishandled.
R2  first-occurrence delivery order must follow publish order.
R3  a qos 2 publisher must see PUBREC before PUBCOMP for the same id.
R4  bulk-deferred forwarding: if the first forwarded publication
    arrives only after the last PUBACK/PUBREC and a PUBCOMP follows
    the forwards, completion outran delivery (late-completion).
R5  a granted wildcard-free subscription whose exact topic is published
    but never delivered, without a disconnect, marks the filter as
    stored truncated (topic-truncation).
R6  a peer close during a conformant-input script is
    unexpected-disconnect; for nonconformant input the close is the
    expected response and its absence is protocol-violation-tolerated.
R7  an orphan PUBREL must still be answered with PUBCOMP; a close or
    silence instead is orphan-pubrel-rejected (which claims the close,
    suppressing R6).

All rules compare received events against received events on one
session, whose order is TCP-FIFO, never a sent event against a
received one, so classifications are robust to scheduling jitter.
"""

from __future__ import annotations

import enum
import json
from collections import Counter
from dataclasses import dataclass, field

from . import topics
from .codec import (
    Disconnect,
    Puback,
    Pubcomp,
    Publish,
    Pubrec,
    Pubrel,
    Suback,
)
from .experiment import (
    Experiment,
    PubackStep,
    PubcompStep,
    PublishStep,
    PubrecStep,
    PubrelStep,
    SendRawStep,
    SpliceNextStep,
    SubscribeStep,
    UnsubscribeStep,
    expand_steps,
)
from .runner import (
    K_CLOSED_BY_PEER,
    K_RECEIVED,
    K_SENT,
    OUTCOME_COMPLETED,
    OUTCOME_RUNNER_ERROR,
    CorpusResult,
    Trace,
    TraceEvent,
)


class Severity(enum.IntEnum):
    INFO = 0
    WARNING = 1
    DOS = 2
    CRITICAL = 3

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_label(cls, label: str) -> Severity:
        try:
            return cls[label.upper()]
        except KeyError:
            raise ValueError(f"unknown severity {label!r}") from None


LOST_MESSAGE = "lost-message"
DUPLICATE_DELIVERY = "duplicate-delivery"
REORDERED_DELIVERY = "reordered-delivery"
ACK_BEFORE_PREREQUISITE = "ack-before-prerequisite"
LATE_COMPLETION = "late-completion"
TOPIC_TRUNCATION = "topic-truncation"
UNEXPECTED_DISCONNECT = "unexpected-disconnect"
BROKER_CRASH = "broker-crash"
ORPHAN_PUBREL_REJECTED = "orphan-pubrel-rejected"
ID_REUSE_MISHANDLED = "id-reuse-mishandled"
PROTOCOL_VIOLATION_TOLERATED = "protocol-violation-tolerated"

SEVERITY_BY_CODE: dict[str, Severity] = {
    LOST_MESSAGE: Severity.WARNING,
    DUPLICATE_DELIVERY: Severity.WARNING,
    REORDERED_DELIVERY: Severity.WARNING,
    ACK_BEFORE_PREREQUISITE: Severity.WARNING,
    LATE_COMPLETION: Severity.WARNING,
    TOPIC_TRUNCATION: Severity.WARNING,
    UNEXPECTED_DISCONNECT: Severity.DOS,
    BROKER_CRASH: Severity.DOS,
    ORPHAN_PUBREL_REJECTED: Severity.WARNING,
    ID_REUSE_MISHANDLED: Severity.WARNING,
    PROTOCOL_VIOLATION_TOLERATED: Severity.INFO,
}


class OracleError(Exception):
    pass


class TraceMismatchError(OracleError):
    """The trace was not produced by the given experiment."""


class NoOverlapError(OracleError):
    """Profiles share no experiment names."""


@dataclass(frozen=True)
class Anomaly:
    code: str
    severity: Severity
    evidence: tuple[int, ...]
    explanation: str


Identity = tuple[bytes, bytes]  # (topic, payload)


@dataclass(frozen=True)
class ScenarioOutcome:
    experiment_name: str
    delivered: tuple[Identity, ...]
    ack_flow: tuple[tuple[str, int], ...]
    anomalies: tuple[Anomaly, ...]
    aborted: bool


@dataclass(frozen=True)
class ScenarioSummary:
    delivered: tuple[tuple[str, str], ...]  # hex pairs
    anomalies: tuple[str, ...]  # sorted codes
    aborted: bool = False
    skipped: str | None = None


@dataclass(frozen=True)
class BehaviorProfile:
    broker_label: str
    version: str
    outcomes: dict[str, ScenarioSummary] = field(default_factory=dict)


def make_anomaly(code: str, evidence: tuple[int, ...], explanation: str) -> Anomaly:
    return Anomaly(code=code, severity=SEVERITY_BY_CODE[code],
                   evidence=evidence, explanation=explanation)


def _payload_text(payload: bytes, limit: int = 24) -> str:
    if payload and all(0x20 <= b < 0x7F for b in payload) and len(payload) <= limit:
        return payload.decode("ascii")
    text = payload.hex()
    return text[:limit] + ("..." if len(text) > limit else "")


# --- script model ----------------------------------------------------------

@dataclass
class _ScriptModel:
    expected: list[Identity]            # conformant delivery order
    suppressed: list[Identity]          # qos2 same-id retransmissions
    qos0_identities: set[Identity]      # loss of these is legal
    orphan_pubrels: list[tuple[str, int]]
    subscriber_sessions: set[str]
    exact_filters: dict[str, list[tuple[bytes, int]]]  # session -> (filter, sub packet_id)


def _model_script(experiment: Experiment) -> _ScriptModel:
    """Replay the script through a conformant broker model."""
    model = _ScriptModel(expected=[], suppressed=[], qos0_identities=set(),
                         orphan_pubrels=[], subscriber_sessions=set(),
                         exact_filters={})
    subscriptions: list[bytes] = []
    open_qos2: dict[str, set[int]] = {}
    seen_qos2: dict[str, set[int]] = {}
    for step in expand_steps(experiment):
        if isinstance(step, SubscribeStep):
            model.subscriber_sessions.add(step.session)
            if not topics.validate_filter(step.filter):
                subscriptions.append(step.filter)
                if not any(c in step.filter for c in b"+#"):
                    model.exact_filters.setdefault(step.session, []).append(
                        (step.filter, step.packet_id))
        elif isinstance(step, UnsubscribeStep):
            subscriptions = [f for f in subscriptions if f != step.filter]
        elif isinstance(step, PublishStep):
            identity = (step.topic, step.payload)
            opened = open_qos2.setdefault(step.session, set())
            if step.qos == 2 and step.packet_id in opened:
                model.suppressed.append(identity)
                continue
            if step.qos == 2 and step.packet_id is not None:
                opened.add(step.packet_id)
                seen_qos2.setdefault(step.session, set()).add(step.packet_id)
            if any(topics.match_filter(f, step.topic) for f in subscriptions):
                model.expected.append(identity)
                if step.qos == 0:
                    model.qos0_identities.add(identity)
        elif isinstance(step, PubrelStep):
            opened = open_qos2.setdefault(step.session, set())
            opened.discard(step.packet_id)
            if step.packet_id not in seen_qos2.get(step.session, set()):
                model.orphan_pubrels.append((step.session, step.packet_id))
    return model


def scripted_input_conformant(experiment: Experiment) -> bool:
    """Stateless scan: does the script stay inside the protocol?

    Deliberate packet-id reuse is NOT flagged: whether that is legal is
    exactly the question the QoS scenarios pose, and flagging it would
    reclassify their disconnect responses as conformant.
    """
    for decl in experiment.sessions:
        if decl.protocol_name != b"MQTT" or decl.protocol_level != 4:
            return False
        try:
            decl.client_id.decode("utf-8")
        except UnicodeDecodeError:
            return False
    for step in expand_steps(experiment):
        if isinstance(step, (SendRawStep, SpliceNextStep)):
            return False
        if isinstance(step, SubscribeStep) and topics.validate_filter(step.filter):
            return False
        if isinstance(step, UnsubscribeStep) and topics.validate_filter(step.filter):
            return False
        if isinstance(step, PublishStep):
            if topics.validate_topic(step.topic):
                return False
            if step.packet_id == 0:
                return False
        if isinstance(step, (PubackStep, PubrecStep, PubrelStep, PubcompStep)):
            if step.packet_id == 0:
                return False
    return True


# --- trace views -----------------------------------------------------------

def _received(trace: Trace) -> list[TraceEvent]:
    return [e for e in trace.events if e.kind == K_RECEIVED]


def _deliveries(trace: Trace, subscriber_sessions: set[str]) -> list[TraceEvent]:
    """Received publishes on subscriber sessions, retransmissions collapsed."""
    out: list[TraceEvent] = []
    seen: set[tuple[str, int, bytes, bytes]] = set()
    for event in _received(trace):
        packet = event.packet
        if not isinstance(packet, Publish) or event.session not in subscriber_sessions:
            continue
        if packet.dup and packet.packet_id is not None:
            key = (event.session, packet.packet_id, packet.topic, packet.payload)
            if key in seen:
                continue
            seen.add(key)
        elif packet.packet_id is not None:
            seen.add((event.session, packet.packet_id, packet.topic, packet.payload))
        out.append(event)
    return out


def _closes(trace: Trace, experiment: Experiment) -> list[TraceEvent]:
    """Peer closes, excluding those after a scripted disconnect."""
    disconnect_seq: dict[str, int] = {}
    for event in trace.events:
        if (event.kind == K_SENT and not event.auto
                and isinstance(event.packet, Disconnect)):
            disconnect_seq.setdefault(event.session, event.seq)
    return [e for e in trace.events
            if e.kind == K_CLOSED_BY_PEER
            and e.seq < disconnect_seq.get(e.session, e.seq + 1)]


def evaluate_trace(experiment: Experiment, trace: Trace) -> ScenarioOutcome:
    """Classify one trace against its script."""
    if trace.experiment_name != experiment.name:
        raise TraceMismatchError(
            f"trace is for {trace.experiment_name!r}, not {experiment.name!r}")
    model = _model_script(experiment)
    delivery_events = _deliveries(trace, model.subscriber_sessions)
    delivered = [(e.packet.topic, e.packet.payload) for e in delivery_events]  # type: ignore[union-attr]
    closes = _closes(trace, experiment)
    conformant = scripted_input_conformant(experiment)
    anomalies: list[Anomaly] = []

    ack_flow: list[tuple[str, int]] = []
    for event in _received(trace):
        packet = event.packet
        if isinstance(packet, (Puback, Pubrec, Pubrel, Pubcomp, Suback)):
            ack_flow.append((type(packet).__name__.lower(), packet.packet_id))

    # R1: per-identity delivery counts against the conformant model.
    expected_counts = Counter(model.expected)
    suppressed_counts = Counter(model.suppressed)
    observed_counts = Counter(delivered)
    for identity in sorted(set(expected_counts) | set(observed_counts),
                           key=lambda i: (i[0], i[1])):
        want = expected_counts.get(identity, 0)
        got = observed_counts.get(identity, 0)
        label = _payload_text(identity[1])
        if got < want and identity not in model.qos0_identities:
            evidence = _sent_publish_seqs(trace, identity)
            anomalies.append(make_anomaly(
                LOST_MESSAGE, evidence,
                f"payload {label} was published {want} time(s) with qos>0 "
                f"but delivered {got} time(s)"))
        elif got > want:
            excess_seqs = tuple(e.seq for e in delivery_events
                                if (e.packet.topic, e.packet.payload) == identity)[want:]  # type: ignore[union-attr]
            if suppressed_counts.get(identity, 0) > 0:
                anomalies.append(make_anomaly(
                    ID_REUSE_MISHANDLED, excess_seqs,
                    f"payload {label} reused an open qos 2 packet id; a "
                    f"conformant broker treats it as a retransmission, yet "
                    f"it was delivered"))
            else:
                anomalies.append(make_anomaly(
                    DUPLICATE_DELIVERY, excess_seqs,
                    f"payload {label} was delivered {got} time(s) but "
                    f"published {want} time(s)"))

    # R2: first-occurrence order of commonly-known identities.
    observed_first: list[Identity] = []
    for identity in delivered:
        if identity not in observed_first and identity in expected_counts:
            observed_first.append(identity)
    expected_first: list[Identity] = []
    for identity in model.expected:
        if identity not in expected_first and identity in observed_counts:
            expected_first.append(identity)
    if observed_first != expected_first:
        evidence = tuple(e.seq for e in delivery_events)
        order = ", ".join(_payload_text(p) for _, p in observed_first)
        want_order = ", ".join(_payload_text(p) for _, p in expected_first)
        anomalies.append(make_anomaly(
            REORDERED_DELIVERY, evidence,
            f"delivered order [{order}] differs from publish order [{want_order}]"))

    # R3: PUBCOMP received before PUBREC for the same packet id.
    first_pubrec: dict[tuple[str, int], int] = {}
    first_pubcomp: dict[tuple[str, int], int] = {}
    for event in _received(trace):
        packet = event.packet
        if isinstance(packet, Pubrec):
            first_pubrec.setdefault((event.session, packet.packet_id), event.seq)
        elif isinstance(packet, Pubcomp):
            first_pubcomp.setdefault((event.session, packet.packet_id), event.seq)
    for key, comp_seq in sorted(first_pubcomp.items(), key=lambda kv: kv[1]):
        rec_seq = first_pubrec.get(key)
        if rec_seq is not None and comp_seq < rec_seq:
            anomalies.append(make_anomaly(
                ACK_BEFORE_PREREQUISITE, (comp_seq, rec_seq),
                f"PUBCOMP for id {key[1]} arrived before its PUBREC"))

    # R4: all forwards deferred past the acks, then completed.
    if delivery_events:
        first_forward = delivery_events[0].seq
        ack_seqs = [e.seq for e in _received(trace)
                    if isinstance(e.packet, (Puback, Pubrec))]
        comp_seqs = [e.seq for e in _received(trace) if isinstance(e.packet, Pubcomp)]
        last_forward = delivery_events[-1].seq
        late_comps = [s for s in comp_seqs if s > last_forward]
        if ack_seqs and late_comps and first_forward > max(ack_seqs):
            anomalies.append(make_anomaly(
                LATE_COMPLETION, (first_forward, max(ack_seqs), late_comps[0]),
                "every forwarded publication arrived after the handshake "
                "acks, and PUBCOMP arrived after the forwards: completion "
                "outran delivery, leaving a replay window"))

    # R5: granted exact-topic subscription that never produced a delivery.
    closed_sessions = {e.session for e in closes}
    suback_ids = {(e.session, e.packet.packet_id)  # type: ignore[union-attr]
                  for e in _received(trace)
                  if isinstance(e.packet, Suback)
                  and any(rc != 0x80 for rc in e.packet.return_codes)}
    for session, filters in sorted(model.exact_filters.items()):
        if session in closed_sessions:
            continue
        for topic_filter, sub_packet_id in filters:
            if (session, sub_packet_id) not in suback_ids:
                continue
            matching = [i for i in model.expected if i[0] == topic_filter]
            if matching and not any(i[0] == topic_filter for i in delivered):
                suback_seq = next(e.seq for e in _received(trace)
                                  if isinstance(e.packet, Suback)
                                  and e.session == session
                                  and e.packet.packet_id == sub_packet_id)
                anomalies.append(make_anomaly(
                    TOPIC_TRUNCATION, (suback_seq,),
                    f"subscription to a {len(topic_filter)}-byte topic was "
                    f"granted but an exact-topic publish was never "
                    f"delivered: the stored filter no longer matches"))

    # R7 before R6: a rejected orphan release claims the close.
    orphan_rejected = False
    for session, packet_id in model.orphan_pubrels:
        got_pubcomp = any(isinstance(e.packet, Pubcomp)
                          and e.packet.packet_id == packet_id
                          and e.session == session
                          for e in _received(trace))
        if got_pubcomp:
            continue
        orphan_rejected = True
        evidence = tuple(e.seq for e in trace.events
                         if e.kind == K_SENT and not e.auto
                         and isinstance(e.packet, Pubrel)
                         and e.packet.packet_id == packet_id)
        evidence += tuple(e.seq for e in closes if e.session == session)
        anomalies.append(make_anomaly(
            ORPHAN_PUBREL_REJECTED, evidence or (0,),
            f"PUBREL for never-published id {packet_id} was not answered "
            f"with PUBCOMP"))

    # R6: unexpected close, or tolerated violation.
    if conformant:
        if closes and not orphan_rejected:
            anomalies.append(make_anomaly(
                UNEXPECTED_DISCONNECT, tuple(e.seq for e in closes),
                "the broker closed the connection during a conformant script"))
    elif not closes:
        evidence = tuple(e.seq for e in trace.events if e.kind == K_SENT)[:1]
        anomalies.append(make_anomaly(
            PROTOCOL_VIOLATION_TOLERATED, evidence or (0,),
            "the script violated the protocol but the broker kept the "
            "connection open"))

    return ScenarioOutcome(
        experiment_name=experiment.name,
        delivered=tuple(delivered),
        ack_flow=tuple(ack_flow),
        anomalies=tuple(anomalies),
        aborted=trace.outcome != OUTCOME_COMPLETED)


def _sent_publish_seqs(trace: Trace, identity: Identity) -> tuple[int, ...]:
    seqs = tuple(e.seq for e in trace.events
                 if e.kind == K_SENT and not e.auto
                 and isinstance(e.packet, Publish)
                 and (e.packet.topic, e.packet.payload) == identity)
    return seqs or (0,)


# --- fingerprints ----------------------------------------------------------

def summarize_outcome(outcome: ScenarioOutcome) -> ScenarioSummary:
    return ScenarioSummary(
        delivered=tuple((t.hex(), p.hex()) for t, p in outcome.delivered),
        anomalies=tuple(sorted({a.code for a in outcome.anomalies})),
        aborted=outcome.aborted)


def fingerprint(results: list[CorpusResult], broker_label: str,
                version: str = "") -> BehaviorProfile:
    """Canonical per-scenario summary of one corpus run.

    A dead liveness probe after a scenario rewrites that scenario's
    unexpected-disconnect (if any) into broker-crash: the close was the
    process dying, not a policy decision.
    """
    outcomes: dict[str, ScenarioSummary] = {}
    for result in results:
        name = result.experiment.name
        if result.skipped is not None or result.trace is None:
            outcomes[name] = ScenarioSummary(delivered=(), anomalies=(),
                                             skipped=result.skipped or "no trace")
            continue
        if result.trace.outcome == OUTCOME_RUNNER_ERROR:
            codes: tuple[str, ...] = ()
            if not result.liveness.alive:
                codes = (BROKER_CRASH,)
            outcomes[name] = ScenarioSummary(
                delivered=(), anomalies=codes, aborted=True,
                skipped=f"runner error: {result.trace.outcome_detail}")
            continue
        outcome = evaluate_trace(result.experiment, result.trace)
        summary = summarize_outcome(outcome)
        if not result.liveness.alive:
            codes = tuple(sorted(
                {c for c in summary.anomalies if c != UNEXPECTED_DISCONNECT}
                | {BROKER_CRASH}))
            summary = ScenarioSummary(delivered=summary.delivered,
                                      anomalies=codes, aborted=summary.aborted)
        outcomes[name] = summary
    return BehaviorProfile(broker_label=broker_label, version=version,
                           outcomes=outcomes)


def profile_anomaly_codes(profile: BehaviorProfile) -> dict[str, tuple[str, ...]]:
    return {name: summary.anomalies
            for name, summary in sorted(profile.outcomes.items())}


def diff_profiles(a: BehaviorProfile, b: BehaviorProfile) -> list[tuple[str, str]]:
    """Per-scenario divergences on the shared experiment set."""
    shared = sorted(set(a.outcomes) & set(b.outcomes))
    if not shared:
        raise NoOverlapError(
            f"profiles {a.broker_label!r} and {b.broker_label!r} share no "
            f"experiments")
    divergences: list[tuple[str, str]] = []
    for name in shared:
        sa, sb = a.outcomes[name], b.outcomes[name]
        parts: list[str] = []
        if sa.delivered != sb.delivered:
            parts.append(f"delivered [{_delivered_text(sa)}] vs "
                         f"[{_delivered_text(sb)}]")
        if sa.anomalies != sb.anomalies:
            parts.append(f"anomalies {{{', '.join(sa.anomalies)}}} vs "
                         f"{{{', '.join(sb.anomalies)}}}")
        if sa.aborted != sb.aborted:
            parts.append(f"aborted {str(sa.aborted).lower()} vs "
                         f"{str(sb.aborted).lower()}")
        if (sa.skipped is None) != (sb.skipped is None):
            parts.append(f"skipped {sa.skipped!r} vs {sb.skipped!r}")
        if parts:
            divergences.append((name, "; ".join(parts)))
    return divergences


def _delivered_text(summary: ScenarioSummary) -> str:
    return ", ".join(_payload_text(bytes.fromhex(p)) for _, p in summary.delivered)


# --- serialization ---------------------------------------------------------

def anomaly_to_obj(anomaly: Anomaly) -> dict:
    return {"code": anomaly.code, "severity": anomaly.severity.label,
            "evidence": list(anomaly.evidence), "explanation": anomaly.explanation}


def outcome_to_obj(outcome: ScenarioOutcome) -> dict:
    return {"experiment": outcome.experiment_name,
            "delivered": [[t.hex(), p.hex()] for t, p in outcome.delivered],
            "ack_flow": [[kind, packet_id] for kind, packet_id in outcome.ack_flow],
            "anomalies": [anomaly_to_obj(a) for a in outcome.anomalies],
            "aborted": outcome.aborted}


def summary_to_obj(summary: ScenarioSummary) -> dict:
    return {"delivered": [list(pair) for pair in summary.delivered],
            "anomalies": list(summary.anomalies),
            "aborted": summary.aborted,
            "skipped": summary.skipped}


def summary_from_obj(obj: dict) -> ScenarioSummary:
    return ScenarioSummary(
        delivered=tuple((t, p) for t, p in obj.get("delivered", [])),
        anomalies=tuple(obj.get("anomalies", [])),
        aborted=obj.get("aborted", False),
        skipped=obj.get("skipped"))


def profile_to_obj(profile: BehaviorProfile) -> dict:
    return {"broker_label": profile.broker_label,
            "version": profile.version,
            "outcomes": {name: summary_to_obj(summary)
                         for name, summary in sorted(profile.outcomes.items())}}


def profile_from_obj(obj: dict) -> BehaviorProfile:
    return BehaviorProfile(
        broker_label=obj["broker_label"],
        version=obj.get("version", ""),
        outcomes={name: summary_from_obj(summary)
                  for name, summary in obj.get("outcomes", {}).items()})


def profile_to_json(profile: BehaviorProfile) -> str:
    return json.dumps(profile_to_obj(profile), indent=2) + "\n"


def profile_from_json(text: str) -> BehaviorProfile:
    return profile_from_obj(json.loads(text))
