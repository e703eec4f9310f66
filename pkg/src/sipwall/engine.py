"""Inspection engine: parse, track transactions, evaluate scheduled rules.

Every datagram gets exactly one verdict.  Anything that cannot be parsed
or that blows up mid-evaluation is dropped, never forwarded.  The engine
clock is whatever arrival time the caller supplies (trace timestamps in
replay, receive times in proxy mode); no wall-clock reads happen on the
message path.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from .parser import FieldPath, MalformedMessage, ParseTree, TransactionKey
from .rules import ActionKind, Clause, RuleProgram, ClauseKind, _COMPARATORS
from .state import GLOBAL_KEY, Scope, ScopeKey, StateStore

__all__ = [
    "Verdict",
    "MessageContext",
    "TransactionRecord",
    "TransactionTracker",
    "Engine",
]

DEFAULT_SWEEP_PERIOD = 256
DEFAULT_TRANSACTION_LIFETIME = 32.0

_NET_SRC = "FIELDS:net.src_addr"


@dataclass
class Verdict:
    decision: str  # "forward" | "drop"
    matched_rules: tuple[int, ...] = ()
    dropping_rule: int | None = None
    processing_time: float = 0.0  # seconds, dequeue to verdict
    malformed: bool = False
    internal_error: bool = False


@dataclass
class TransactionRecord:
    key: TransactionKey
    tx_class: str  # "invite" | "non-invite"
    state: str  # calling | trying | proceeding | completed | terminated
    last_update: float


@dataclass
class MessageContext:
    tree: ParseTree
    dialog_key: object
    transaction_key: TransactionKey | None
    tx_class: str | None
    direction: str
    src: tuple[str, int] | None
    dst: tuple[str, int] | None
    arrival_time: float

    @property
    def src_host(self) -> str | None:
        return self.src[0] if self.src else None


class TransactionTracker:
    """Collapsed per-transaction state machine.

    calling/trying -> proceeding on a 1xx -> completed on a final
    response -> terminated on ACK.  A response for an unknown key starts
    a record directly in the matching state so mid-trace starts work.
    """

    def __init__(self, lifetime: float = DEFAULT_TRANSACTION_LIFETIME):
        self.lifetime = lifetime
        self.records: dict[TransactionKey, TransactionRecord] = {}

    def update(self, key: TransactionKey, tree: ParseTree, now: float) -> TransactionRecord:
        rec = self.records.get(key)
        cls = "invite" if key.cseq_method.upper() in ("INVITE", "ACK") else "non-invite"
        if tree.message_kind == "request":
            method = tree.method.upper()
            if rec is None:
                if method == "ACK":
                    state = "terminated"
                elif cls == "invite":
                    state = "calling"
                else:
                    state = "trying"
                rec = TransactionRecord(key, cls, state, now)
                self.records[key] = rec
            else:
                if method == "ACK":
                    rec.state = "terminated"
                rec.last_update = now
        else:
            status = tree.status_code or 0
            if rec is None:
                state = "proceeding" if status < 200 else "completed"
                rec = TransactionRecord(key, cls, state, now)
                self.records[key] = rec
            else:
                if status < 200:
                    if rec.state in ("calling", "trying"):
                        rec.state = "proceeding"
                elif rec.state != "terminated":
                    rec.state = "completed"
                rec.last_update = now
        return rec

    def sweep(self, now: float) -> int:
        dead = [
            key
            for key, rec in self.records.items()
            if now - rec.last_update > self.lifetime
        ]
        for key in dead:
            del self.records[key]
        return len(dead)

    def live(self) -> int:
        return len(self.records)


@dataclass
class EngineStats:
    processed: int = 0
    forwarded: int = 0
    dropped: int = 0
    malformed: int = 0
    internal_errors: int = 0
    drops_by_rule: dict[int, int] = field(default_factory=dict)


class Engine:
    def __init__(
        self,
        program: RuleProgram,
        *,
        sweep_period: int = DEFAULT_SWEEP_PERIOD,
        transaction_lifetime: float = DEFAULT_TRANSACTION_LIFETIME,
        record_latency: bool = True,
    ):
        self.program = program
        self.store = StateStore(program.declared_objects)
        self.transactions = TransactionTracker(transaction_lifetime)
        self.stats = EngineStats()
        self.sweep_period = sweep_period
        self.record_latency = record_latency
        self.latencies_ns: list[int] = []
        self._since_sweep = 0
        self._clock = 0.0
        self._net_src_id = program.parser.field_id(_NET_SRC)

    # ------------------------------------------------------------------

    def process_message(
        self,
        raw: bytes,
        *,
        direction: str = "in",
        src: tuple[str, int] | None = None,
        dst: tuple[str, int] | None = None,
        arrival_time: float = 0.0,
    ) -> Verdict:
        t0 = time.perf_counter_ns()
        self._clock = arrival_time
        self.stats.processed += 1
        matched: tuple[int, ...] = ()
        dropping: int | None = None
        malformed = internal = False
        try:
            tree = self.program.parser.parse_message(raw)
        except MalformedMessage:
            malformed = True
        except Exception:
            internal = True
        else:
            try:
                ctx = self.context_for(
                    tree, direction=direction, src=src, dst=dst, arrival_time=arrival_time
                )
                matched, dropping = self._evaluate(ctx)
            except Exception:
                internal = True
                matched, dropping = (), None

        if malformed:
            decision = "drop"
            self.stats.malformed += 1
        elif internal:
            decision = "drop"
            self.stats.dropped += 1
            self.stats.internal_errors += 1
        elif dropping is not None:
            decision = "drop"
            self.stats.dropped += 1
            self.stats.drops_by_rule[dropping] = (
                self.stats.drops_by_rule.get(dropping, 0) + 1
            )
        else:
            decision = "forward"
            self.stats.forwarded += 1

        elapsed = time.perf_counter_ns() - t0
        if self.record_latency:
            self.latencies_ns.append(elapsed)
        self._maybe_sweep(arrival_time)
        return Verdict(
            decision=decision,
            matched_rules=matched,
            dropping_rule=dropping,
            processing_time=elapsed / 1e9,
            malformed=malformed,
            internal_error=internal,
        )

    def context_for(
        self,
        tree: ParseTree,
        *,
        direction: str = "in",
        src: tuple[str, int] | None = None,
        dst: tuple[str, int] | None = None,
        arrival_time: float = 0.0,
    ) -> MessageContext:
        parser = self.program.parser
        tkey = parser.extract_transaction_key(tree)
        tx_class = None
        if tkey is not None:
            tx_class = self.transactions.update(tkey, tree, arrival_time).tx_class
        return MessageContext(
            tree=tree,
            dialog_key=parser.extract_dialog_key(tree),
            transaction_key=tkey,
            tx_class=tx_class,
            direction=direction,
            src=src,
            dst=dst,
            arrival_time=arrival_time,
        )

    def end_of_trace(self) -> None:
        self.store.expire(self._clock)
        self.transactions.sweep(self._clock)
        self._since_sweep = 0

    def snapshot(self) -> dict:
        return {
            "processed": self.stats.processed,
            "forwarded": self.stats.forwarded,
            "dropped": self.stats.dropped,
            "malformed": self.stats.malformed,
            "internal_errors": self.stats.internal_errors,
            "drops_by_rule": dict(self.stats.drops_by_rule),
            "live_instances": self.store.live_counts(),
            "live_instances_total": self.store.live_total(),
            "live_transactions": self.transactions.live(),
        }

    # ------------------------------------------------------------------

    def _maybe_sweep(self, now: float) -> None:
        self._since_sweep += 1
        if self._since_sweep >= self.sweep_period:
            self._since_sweep = 0
            self.store.expire(now)
            self.transactions.sweep(now)

    def _scope_key(self, scope: Scope, ctx: MessageContext) -> ScopeKey | None:
        if scope is Scope.GLOBAL:
            return GLOBAL_KEY
        if scope is Scope.DIALOG:
            if ctx.dialog_key is None:
                return None
            return ScopeKey.for_dialog(ctx.dialog_key)
        if ctx.transaction_key is None:
            return None
        return ScopeKey.for_transaction(ctx.transaction_key)

    def _evaluate(self, ctx: MessageContext) -> tuple[tuple[int, ...], int | None]:
        matched: list[int] = []
        dropping: int | None = None
        now = ctx.arrival_time
        for rid in self.program.schedule:
            rule = self.program.rule(rid)
            if rule.phase != "any" and rule.phase != ctx.tx_class:
                continue
            if not all(self.evaluate_clause(c, ctx) for c in rule.clauses):
                continue
            matched.append(rid)
            stop = False
            for act in rule.actions:
                if act.kind is ActionKind.DROP:
                    dropping = rid
                    stop = True
                    break
                if act.kind is ActionKind.FORWARD:
                    continue
                desc = self.program.declared_objects[act.name]
                key = self._scope_key(desc.scope, ctx)
                if key is None:
                    continue
                if act.kind is ActionKind.HOLD:
                    value = ctx.tree.value_of(act.source_field_id)
                    if value is not None:
                        self.store.resolve(act.name, key, now).insert(value, now)
                else:
                    self.store.resolve(act.name, key, now).counter_increment(now)
            if stop:
                break
        return tuple(matched), dropping

    def evaluate_clause(self, clause: Clause, ctx: MessageContext) -> bool:
        base = self._clause_base(clause, ctx)
        if base is None:
            # absent field or unscopable message: the clause never
            # matches, negated or not
            return False
        return base != clause.negated

    def _clause_base(self, clause: Clause, ctx: MessageContext) -> bool | None:
        """Raw test outcome, or None when the subject is absent."""
        now = ctx.arrival_time
        if isinstance(clause.target, FieldPath):
            if self._net_src_id is not None and clause.field_id == self._net_src_id:
                value = ctx.src_host
            else:
                value = ctx.tree.value_of(clause.field_id)
            if value is None:
                return None
            kind = clause.kind
            if kind is ClauseKind.REGEX:
                return clause.regex.search(value) is not None
            if kind is ClauseKind.NORMALIZE:
                return True  # the cap itself is applied at parse time
            if kind is ClauseKind.IN:
                desc = self.program.declared_objects[clause.object_name]
                key = self._scope_key(desc.scope, ctx)
                if key is None:
                    return None
                inst = self.store.resolve(clause.object_name, key, now)
                return inst.contains(value)
            try:
                number = int(value.strip())
            except ValueError:
                return False
            return _COMPARATORS[kind](number, clause.operand)

        desc = self.program.declared_objects[clause.target]
        key = self._scope_key(desc.scope, ctx)
        if key is None:
            return None
        current = self.store.resolve(clause.target, key, now).counter_value(now)
        return _COMPARATORS[clause.kind](current, clause.operand)
