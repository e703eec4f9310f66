"""Deterministic synthetic SIP traffic.

Three trace kinds: complete clean calls, calls with a forged teardown
attempt ("bye-attack"), and a flat INVITE flood.  Everything is driven
by a seeded RNG, so the same seed always produces a byte-identical
trace.  Timestamps are quantized to whole microseconds to survive the
trace format round trip exactly.
"""

from __future__ import annotations

import random

from .trace import TraceRecord

__all__ = [
    "build_request",
    "build_response",
    "gen_clean_calls",
    "gen_bye_attack",
    "gen_invite_flood",
    "GENERATORS",
]

SIP_PORT = 5060
CALLER_HOST = "198.51.100.10"
CALLEE_HOST = "192.0.2.20"
ATTACKER_HOST = "203.0.113.66"
USER_AGENT = "sipwall-gen/0.1"


def _q(ts: float) -> float:
    return float(f"{ts:.6f}")


def build_request(
    method: str,
    uri: str,
    *,
    via: str,
    from_: str,
    to: str,
    call_id: str,
    cseq: str,
    contact: str | None = None,
    body: bytes = b"",
) -> bytes:
    lines = [
        f"{method} {uri} SIP/2.0",
        f"Via: {via}",
        f"Max-Forwards: 70",
        f"From: {from_}",
        f"To: {to}",
        f"Call-ID: {call_id}",
        f"CSeq: {cseq}",
    ]
    if contact:
        lines.append(f"Contact: {contact}")
    lines.append(f"User-Agent: {USER_AGENT}")
    lines.append(f"Content-Length: {len(body)}")
    head = "\r\n".join(lines).encode("utf-8")
    return head + b"\r\n\r\n" + body


def build_response(
    status: int,
    reason: str,
    *,
    via: str,
    from_: str,
    to: str,
    call_id: str,
    cseq: str,
    contact: str | None = None,
) -> bytes:
    lines = [
        f"SIP/2.0 {status} {reason}",
        f"Via: {via}",
        f"From: {from_}",
        f"To: {to}",
        f"Call-ID: {call_id}",
        f"CSeq: {cseq}",
    ]
    if contact:
        lines.append(f"Contact: {contact}")
    lines.append(f"User-Agent: {USER_AGENT}")
    lines.append("Content-Length: 0")
    return "\r\n".join(lines).encode("utf-8") + b"\r\n\r\n"


class _CallParams:
    """Identifiers for one call, all drawn from the trace RNG."""

    def __init__(self, rng: random.Random, index: int):
        self.index = index
        self.call_id = f"{rng.getrandbits(48):012x}@{CALLER_HOST}"
        self.from_tag = f"{rng.getrandbits(32):08x}"
        self.to_tag = f"{rng.getrandbits(32):08x}"
        self.branches = [f"z9hG4bK{rng.getrandbits(48):012x}" for _ in range(4)]
        self.caller_uri = f"sip:alice{index}@client.example"
        self.callee_uri = f"sip:bob{index}@gw.example"

    @property
    def from_value(self) -> str:
        return f"<{self.caller_uri}>;tag={self.from_tag}"

    @property
    def to_bare(self) -> str:
        return f"<{self.callee_uri}>"

    @property
    def to_tagged(self) -> str:
        return f"<{self.callee_uri}>;tag={self.to_tag}"

    def via(self, branch_index: int, host: str = CALLER_HOST) -> str:
        return f"SIP/2.0/UDP {host}:{SIP_PORT};branch={self.branches[branch_index]}"


_CALLER = (CALLER_HOST, SIP_PORT)
_CALLEE = (CALLEE_HOST, SIP_PORT)
_ATTACKER = (ATTACKER_HOST, SIP_PORT)


def _call_setup(call: _CallParams, base: float) -> list[TraceRecord]:
    invite = build_request(
        "INVITE",
        call.callee_uri,
        via=call.via(0),
        from_=call.from_value,
        to=call.to_bare,
        call_id=call.call_id,
        cseq="1 INVITE",
        contact=f"<sip:alice{call.index}@{CALLER_HOST}>",
    )
    ringing = build_response(
        180,
        "Ringing",
        via=call.via(0),
        from_=call.from_value,
        to=call.to_tagged,
        call_id=call.call_id,
        cseq="1 INVITE",
    )
    ok = build_response(
        200,
        "OK",
        via=call.via(0),
        from_=call.from_value,
        to=call.to_tagged,
        call_id=call.call_id,
        cseq="1 INVITE",
        contact=f"<sip:bob{call.index}@{CALLEE_HOST}>",
    )
    ack = build_request(
        "ACK",
        call.callee_uri,
        via=call.via(1),
        from_=call.from_value,
        to=call.to_tagged,
        call_id=call.call_id,
        cseq="1 ACK",
    )
    return [
        TraceRecord(_q(base), "in", _CALLER, _CALLEE, invite),
        TraceRecord(_q(base + 0.2), "out", _CALLEE, _CALLER, ringing),
        TraceRecord(_q(base + 0.4), "out", _CALLEE, _CALLER, ok),
        TraceRecord(_q(base + 0.6), "in", _CALLER, _CALLEE, ack),
    ]


def gen_clean_calls(
    calls: int = 10, seed: int = 42, start: float = 0.0, spacing: float = 2.0
) -> list[TraceRecord]:
    """Complete calls: INVITE, 180, 200, ACK, BYE, 200."""
    rng = random.Random(seed)
    records: list[TraceRecord] = []
    for i in range(calls):
        call = _CallParams(rng, i)
        base = start + i * spacing
        records.extend(_call_setup(call, base))
        bye = build_request(
            "BYE",
            call.callee_uri,
            via=call.via(2),
            from_=call.from_value,
            to=call.to_tagged,
            call_id=call.call_id,
            cseq="2 BYE",
        )
        bye_ok = build_response(
            200,
            "OK",
            via=call.via(2),
            from_=call.from_value,
            to=call.to_tagged,
            call_id=call.call_id,
            cseq="2 BYE",
        )
        records.append(TraceRecord(_q(base + 1.0), "in", _CALLER, _CALLEE, bye))
        records.append(TraceRecord(_q(base + 1.2), "out", _CALLEE, _CALLER, bye_ok))
    return records


def gen_bye_attack(
    calls: int = 10, seed: int = 42, start: float = 0.0, spacing: float = 2.0
) -> list[TraceRecord]:
    """Established calls where a third party forges a teardown.

    The forged BYE reuses the dialog identifiers (Call-ID and both tags)
    but carries a From value the dialog has never seen; the caller's own
    BYE afterwards repeats the original From byte for byte.
    """
    rng = random.Random(seed)
    records: list[TraceRecord] = []
    for i in range(calls):
        call = _CallParams(rng, i)
        base = start + i * spacing
        records.extend(_call_setup(call, base))
        forged = build_request(
            "BYE",
            call.callee_uri,
            via=call.via(2, ATTACKER_HOST),
            from_=f"<sip:intruder{i}@attack.example>;tag={call.from_tag}",
            to=call.to_tagged,
            call_id=call.call_id,
            cseq="2 BYE",
        )
        genuine = build_request(
            "BYE",
            call.callee_uri,
            via=call.via(3),
            from_=call.from_value,
            to=call.to_tagged,
            call_id=call.call_id,
            cseq="2 BYE",
        )
        records.append(TraceRecord(_q(base + 1.0), "in", _ATTACKER, _CALLEE, forged))
        records.append(TraceRecord(_q(base + 1.4), "in", _CALLER, _CALLEE, genuine))
    return records


def gen_invite_flood(
    count: int = 40, rate: float = 1.0, seed: int = 7, start: float = 0.0
) -> list[TraceRecord]:
    """count INVITEs at a flat rate, each with fresh identifiers."""
    if rate <= 0:
        raise ValueError("rate must be positive")
    rng = random.Random(seed)
    records: list[TraceRecord] = []
    for i in range(count):
        call_id = f"{rng.getrandbits(48):012x}@{ATTACKER_HOST}"
        from_tag = f"{rng.getrandbits(32):08x}"
        branch = f"z9hG4bK{rng.getrandbits(48):012x}"
        invite = build_request(
            "INVITE",
            "sip:victim@gw.example",
            via=f"SIP/2.0/UDP {ATTACKER_HOST}:{SIP_PORT};branch={branch}",
            from_=f"<sip:flood{i}@attack.example>;tag={from_tag}",
            to="<sip:victim@gw.example>",
            call_id=call_id,
            cseq="1 INVITE",
            contact=f"<sip:flood{i}@{ATTACKER_HOST}>",
        )
        records.append(
            TraceRecord(_q(start + i / rate), "in", _ATTACKER, _CALLEE, invite)
        )
    return records


GENERATORS = {
    "clean-calls": gen_clean_calls,
    "bye-attack": gen_bye_attack,
    "invite-flood": gen_invite_flood,
}
