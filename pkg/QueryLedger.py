#!/usr/bin/env python3
"""
Exact accounting of environment steps and victim queries.

Every increment is recorded as a LedgerEvent naming the operation
that caused it, so that totals can be recomputed from the event log.
"""
import enum
import threading
from collections import namedtuple, Counter

__all__ = ["QueryContext", "QueryLedger", "LedgerEvent", "ledger_report", "merge_ledgers"]

class QueryContext(enum.Enum):
    # Victim queries made while training the attacker
    Training = "training"
    # Victim queries the attacker makes on its own during attack execution
    AttackExtra = "attack-extra"
    # The victim acting once per environment step during evaluation
    PolicyExecution = "policy-execution"

# Counter names
TRAIN_ENV = "train_env"
TRAIN_VIC = "train_vic"
ATTACK_EXTRA = "attack_extra"
POLICY_EXECUTION = "policy_execution"
ATTACK_STEPS = "attack_steps"
EVAL_ENV = "eval_env"

_CONTEXT_COUNTER = {
    QueryContext.Training: TRAIN_VIC,
    QueryContext.AttackExtra: ATTACK_EXTRA,
    QueryContext.PolicyExecution: POLICY_EXECUTION,
}

LedgerEvent = namedtuple("LedgerEvent", ["operation", "counter", "delta"])

class QueryLedger(object):
    """
    Monotone counters. All increments go through _add(), which holds a lock,
    so a ledger may be shared by concurrent callers.
    """
    def __init__(self, keep_events=True):
        self.counters = Counter()
        self.events = []
        self.keep_events = keep_events
        self._lock = threading.Lock()

    def _add(self, counter, delta, operation):
        if delta < 0:
            raise ValueError(f"Ledger counters are monotone, got delta {delta} for {counter}")
        if delta == 0:
            return
        with self._lock:
            self.counters[counter] += delta
            if self.keep_events:
                self.events.append(LedgerEvent(operation, counter, int(delta)))

    def record_env_steps(self, n=1, operation="env.step", evaluation=False):
        self._add(EVAL_ENV if evaluation else TRAIN_ENV, n, operation)

    def record_victim_queries(self, n=1, context=QueryContext.Training, operation="victim.act"):
        self._add(_CONTEXT_COUNTER[QueryContext(context)], n, operation)

    def record_attack_step(self, n=1, operation="attack.step"):
        self._add(ATTACK_STEPS, n, operation)

    @property
    def train_env_total(self) -> int:
        return self.counters[TRAIN_ENV]

    @property
    def train_vic_total(self) -> int:
        return self.counters[TRAIN_VIC]

    @property
    def atk_vic_per_step(self) -> float:
        steps = self.counters[ATTACK_STEPS]
        if steps == 0:
            return 0.0
        return self.counters[ATTACK_EXTRA] / steps

    def snapshot(self) -> dict:
        with self._lock:
            return {name: int(value) for name, value in sorted(self.counters.items())}

    def replay_events(self) -> Counter:
        """
        Recompute all counters from the event log.
        """
        totals = Counter()
        for event in self.events:
            totals[event.counter] += event.delta
        return totals

    def totals_by_operation(self, counter) -> Counter:
        totals = Counter()
        for event in self.events:
            if event.counter == counter:
                totals[event.operation] += event.delta
        return totals

    def merge(self, other: "QueryLedger"):
        """
        Add all counters (and events) of other to this ledger.
        """
        if other.keep_events:
            for event in list(other.events):
                self._add(event.counter, event.delta, event.operation)
        else:
            for name, value in other.snapshot().items():
                self._add(name, value, "merge")

    def __str__(self):
        return f"QueryLedger({self.snapshot()})"

    def __repr__(self) -> str:
        return self.__str__()

def merge_ledgers(ledgers) -> QueryLedger:
    merged = QueryLedger()
    for ledger in ledgers:
        merged.merge(ledger)
    return merged

def ledger_report(ledger: QueryLedger) -> dict:
    """
    The three query-efficiency metrics.
    """
    return {
        "train_env_total": int(ledger.train_env_total),
        "train_vic_total": int(ledger.train_vic_total),
        "atk_vic_per_step": float(ledger.atk_vic_per_step),
    }
