"""Topic and topic-filter validation plus wildcard matching.

Topics and filters are byte strings throughout; levels are what '/'
splits produce, so "a//b" has three levels and trailing slashes create
an empty final level.  Validators return every violated rule rather
than stopping at the first, which lets callers report a frame's full
set of problems.
"""

from __future__ import annotations

MAX_TOPIC = 65_535

V_EMPTY = "empty"
V_NOT_UTF8 = "not-utf8"
V_TOO_LONG = "too-long"
V_NUL = "nul"
V_WILDCARD_IN_TOPIC = "wildcard-in-topic"
V_HASH_MISPLACED = "hash-misplaced"
V_PLUS_MISPLACED = "plus-misplaced"


def _as_bytes(value: bytes | str) -> bytes:
    return value.encode("utf-8") if isinstance(value, str) else value


def _common_violations(data: bytes) -> list[str]:
    violations = []
    if not data:
        violations.append(V_EMPTY)
    if len(data) > MAX_TOPIC:
        violations.append(V_TOO_LONG)
    try:
        data.decode("utf-8")
    except UnicodeDecodeError:
        violations.append(V_NOT_UTF8)
    if b"\x00" in data:
        violations.append(V_NUL)
    return violations


def validate_topic(topic: bytes | str) -> list[str]:
    """Return the rules a publish topic violates; empty means valid."""
    topic = _as_bytes(topic)
    violations = _common_violations(topic)
    if b"#" in topic or b"+" in topic:
        violations.append(V_WILDCARD_IN_TOPIC)
    return violations


def validate_filter(topic_filter: bytes | str) -> list[str]:
    """Return the rules a subscription filter violates; empty means valid."""
    topic_filter = _as_bytes(topic_filter)
    violations = _common_violations(topic_filter)
    levels = topic_filter.split(b"/")
    for i, level in enumerate(levels):
        if b"#" in level:
            # '#' must be the whole final level, at most once.
            if level != b"#" or i != len(levels) - 1:
                if V_HASH_MISPLACED not in violations:
                    violations.append(V_HASH_MISPLACED)
        if b"+" in level and level != b"+":
            if V_PLUS_MISPLACED not in violations:
                violations.append(V_PLUS_MISPLACED)
    return violations


def match_filter(topic_filter: bytes | str, topic: bytes | str) -> bool:
    """Decide whether a valid filter matches a valid topic.

    '+' matches exactly one level (empty levels included); a trailing
    '#' matches the remaining levels and also the parent itself, so
    "a/#" matches "a".  No '$'-prefix special case: these experiments
    never touch broker-internal topics.
    """
    filter_levels = _as_bytes(topic_filter).split(b"/")
    topic_levels = _as_bytes(topic).split(b"/")
    for i, level in enumerate(filter_levels):
        if level == b"#":
            return True
        if i >= len(topic_levels):
            return False
        if level == b"+":
            continue
        if level != topic_levels[i]:
            return False
    return len(topic_levels) == len(filter_levels)
