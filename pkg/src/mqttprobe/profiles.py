"""Reference behavior profiles for five widely deployed brokers.

Each profile transcribes the documented response of a specific broker
release to five corpus scenarios: the three packet-id-reuse QoS
scenarios, the 5000-byte-topic scenario, and the orphan PUBREL probe.
They serve as diff baselines for live runs and as the fixture the
transcription tests must reproduce from synthetic traces.

The Mosquitto version label "1.16.12" is carried exactly as documented
even though no upstream Mosquitto release by that number exists; see
README.  Profiles describe those specific builds, not current releases.
"""

from __future__ import annotations

from .corpus import (
    DOUBLE_TOPIC,
    LONG_PAYLOAD,
    LONG_TOPIC_5000,
    PAYLOAD_FIRST_QOS2,
    PAYLOAD_SECOND_QOS0,
    PAYLOAD_SECOND_QOS1,
    PAYLOAD_SECOND_QOS2,
    QOS20_TOPIC,
    QOS21_TOPIC,
)
from .oracle import (
    ACK_BEFORE_PREREQUISITE,
    BROKER_CRASH,
    DUPLICATE_DELIVERY,
    ID_REUSE_MISHANDLED,
    LATE_COMPLETION,
    LOST_MESSAGE,
    ORPHAN_PUBREL_REJECTED,
    REORDERED_DELIVERY,
    TOPIC_TRUNCATION,
    UNEXPECTED_DISCONNECT,
    BehaviorProfile,
    ScenarioSummary,
)

QOS21 = "qos2_then_qos1_same_id"
QOS20 = "qos2_then_qos0_same_id"
DOUBLE = "double_qos2_same_id"
LONG = "long_topic_5000"
ORPHAN = "orphan_pubrel"

PROFILED_SCENARIOS = (QOS21, QOS20, DOUBLE, LONG, ORPHAN)

_P1_21 = (QOS21_TOPIC, PAYLOAD_FIRST_QOS2)
_P2_21 = (QOS21_TOPIC, PAYLOAD_SECOND_QOS1)
_P1_20 = (QOS20_TOPIC, PAYLOAD_FIRST_QOS2)
_P0_20 = (QOS20_TOPIC, PAYLOAD_SECOND_QOS0)
_P1_D = (DOUBLE_TOPIC, PAYLOAD_FIRST_QOS2)
_P2_D = (DOUBLE_TOPIC, PAYLOAD_SECOND_QOS2)
_P_LONG = (LONG_TOPIC_5000, LONG_PAYLOAD)


def _s(delivered: tuple = (), anomalies: tuple = (),
       aborted: bool = False) -> ScenarioSummary:
    return ScenarioSummary(
        delivered=tuple((t.hex(), p.hex()) for t, p in delivered),
        anomalies=tuple(sorted(anomalies)),
        aborted=aborted)


def documented_profiles() -> dict[str, BehaviorProfile]:
    """Profiles keyed by broker label."""
    return {
        "Mosquitto": BehaviorProfile(
            broker_label="Mosquitto", version="1.16.12",
            outcomes={
                # Forwards the qos 2 publish; the id-reusing qos 1
                # publish is dropped because the id is still held.
                QOS21: _s(delivered=(_P1_21,), anomalies=(LOST_MESSAGE,)),
                # Both forwarded, but the qos 0 one overtakes.
                QOS20: _s(delivered=(_P0_20, _P1_20),
                          anomalies=(REORDERED_DELIVERY,)),
                # Second qos 2 publish treated as a retransmission.
                DOUBLE: _s(delivered=(_P1_D,)),
                LONG: _s(delivered=(_P_LONG,)),
                ORPHAN: _s(),
            }),
        "EMQX": BehaviorProfile(
            broker_label="EMQX", version="4.2.1",
            outcomes={
                # Runs one full flow per publish: both delivered in order.
                QOS21: _s(delivered=(_P1_21, _P2_21)),
                QOS20: _s(delivered=(_P1_20, _P0_20)),
                DOUBLE: _s(delivered=(_P1_D,)),
                LONG: _s(anomalies=(UNEXPECTED_DISCONNECT,), aborted=True),
                ORPHAN: _s(),
            }),
        "HiveMQ": BehaviorProfile(
            broker_label="HiveMQ", version="2020.5",
            outcomes={
                # Delivery order kept, but PUBCOMP overtakes PUBREC.
                QOS21: _s(delivered=(_P1_21, _P2_21),
                          anomalies=(ACK_BEFORE_PREREQUISITE,)),
                QOS20: _s(delivered=(_P1_20, _P0_20),
                          anomalies=(ACK_BEFORE_PREREQUISITE,)),
                # The same-id retransmission is forwarded as a new message.
                DOUBLE: _s(delivered=(_P1_D, _P2_D),
                           anomalies=(ID_REUSE_MISHANDLED,)),
                # Grants the subscription but stores a shortened filter.
                LONG: _s(anomalies=(TOPIC_TRUNCATION,)),
                ORPHAN: _s(),
            }),
        "Moquette": BehaviorProfile(
            broker_label="Moquette", version="0.13",
            outcomes={
                QOS21: _s(delivered=(_P1_21, _P2_21)),
                QOS20: _s(delivered=(_P1_20, _P0_20)),
                DOUBLE: _s(delivered=(_P1_D, _P2_D),
                           anomalies=(ID_REUSE_MISHANDLED,)),
                # An I/O error surfaces as a client disconnect.
                LONG: _s(anomalies=(UNEXPECTED_DISCONNECT,), aborted=True),
                ORPHAN: _s(),
            }),
        "Aedes": BehaviorProfile(
            broker_label="Aedes", version="0.43.0",
            outcomes={
                # Both delivered, but only after every ack: the PUBCOMP
                # trailing the publications opens a replay window.
                QOS21: _s(delivered=(_P1_21, _P2_21),
                          anomalies=(LATE_COMPLETION,)),
                QOS20: _s(delivered=(_P0_20, _P1_20),
                          anomalies=(LATE_COMPLETION, REORDERED_DELIVERY)),
                # The first payload goes out twice.
                DOUBLE: _s(delivered=(_P1_D, _P1_D),
                           anomalies=(DUPLICATE_DELIVERY, LATE_COMPLETION)),
                LONG: _s(anomalies=(BROKER_CRASH,), aborted=True),
                ORPHAN: _s(anomalies=(ORPHAN_PUBREL_REJECTED,), aborted=True),
            }),
    }
