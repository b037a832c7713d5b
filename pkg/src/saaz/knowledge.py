"""Run-time models shared by the control loop: policy and topology digests,
threats, behaviour profiles, measures in force and adaptation records.

Snapshots are immutable; the history ring keeps the most recent ones.
"""

from __future__ import annotations

import hashlib
import itertools
import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable, Mapping, Protocol

from .errors import PreconditionViolation, UnknownThreatClass
from .policy import canonical_json

logger = logging.getLogger(__name__)


class LiveState(Protocol):
    def policy_digests(self) -> Mapping[str, str]: ...

    def topology_fingerprint(self) -> str: ...


@dataclass(frozen=True)
class ModelSnapshot:
    snapshot_id: int
    clock: float
    policy_digests: tuple[tuple[str, str], ...]
    topology_fingerprint: str
    active_measures: tuple[str, ...]
    digest: str

    def to_dict(self) -> dict:
        return {
            "snapshot_id": self.snapshot_id,
            "clock": self.clock,
            "policy_digests": dict(self.policy_digests),
            "topology_fingerprint": self.topology_fingerprint,
            "active_measures": list(self.active_measures),
            "digest": self.digest,
        }


class ThreatStatus(str, Enum):
    ACTIVE = "Active"
    MITIGATED = "Mitigated"
    LIFTED = "Lifted"


_NEXT_STATUS = {
    ThreatStatus.ACTIVE: ThreatStatus.MITIGATED,
    ThreatStatus.MITIGATED: ThreatStatus.LIFTED,
    ThreatStatus.LIFTED: ThreatStatus.LIFTED,
}


@dataclass
class ThreatRecord:
    threat_id: str
    threat_class: str
    party: str
    likelihood: float
    impact: float
    first_seen: float
    counter_state: dict[str, Any] = field(default_factory=dict)
    status: ThreatStatus = ThreatStatus.ACTIVE
    evidence: list[str] = field(default_factory=list)

    @property
    def risk(self) -> float:
        return self.likelihood * self.impact


@dataclass(frozen=True)
class BehaviorProfile:
    """EWMA of per-window event counts for one party and action."""

    owner: str
    action: str
    window: float
    mean: float = 0.0
    deviation: float = 0.0
    last_updated: float | None = None
    samples: int = 0

    def threshold(self, k: float) -> float:
        return self.mean + k * self.deviation


def update_profile(profile: BehaviorProfile, count: int, alpha: float,
                   clock: float | None = None) -> BehaviorProfile:
    if count < 0:
        raise ValueError("window count must be non-negative")
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    mean = (1 - alpha) * profile.mean + alpha * count
    dev = (1 - alpha) * profile.deviation + alpha * abs(count - profile.mean)
    return replace(profile, mean=mean, deviation=dev, last_updated=clock, samples=profile.samples + 1)


class AdaptationOutcome(str, Enum):
    SUCCEEDED = "Succeeded"
    ROLLED_BACK = "RolledBack"
    DEGRADED = "Degraded"


@dataclass
class AdaptationRecord:
    plan_id: str
    finding_id: str
    option: str
    party: str
    started: float
    finished: float
    outcome: AdaptationOutcome
    pre_snapshot: int
    post_snapshot: int | None
    disruptive: bool = False
    verification: str | None = None
    offending: Mapping[str, Any] | None = None
    verdict: str | None = None

    def to_dict(self) -> dict:
        return {
            "plan_id": self.plan_id,
            "finding_id": self.finding_id,
            "option": self.option,
            "party": self.party,
            "started": self.started,
            "finished": self.finished,
            "outcome": self.outcome.value,
            "pre_snapshot": self.pre_snapshot,
            "post_snapshot": self.post_snapshot,
            "disruptive": self.disruptive,
            "verification": self.verification,
            "verdict": self.verdict,
        }


@dataclass
class Measure:
    """A restrictive change left in force by an adaptation."""

    measure_id: str
    kind: str
    party: str
    subject: str | None
    applied_at: float
    plan_id: str
    liftable: bool
    restore: dict[str, Any] = field(default_factory=dict)
    threat_class: str | None = None
    lifted_at: float | None = None

    @property
    def active(self) -> bool:
        return self.lifted_at is None


@dataclass(frozen=True)
class PolicyMismatch:
    component: str
    modelled: str | None
    live: str | None


@dataclass(frozen=True)
class DriftReport:
    policy_mismatches: tuple[PolicyMismatch, ...] = ()
    topology_mismatch: tuple[str, str] | None = None

    def is_empty(self) -> bool:
        return not self.policy_mismatches and self.topology_mismatch is None


@dataclass(frozen=True)
class ReconciliationEvent:
    clock: float
    component: str
    modelled: str | None
    live: str | None


def _snapshot_digest(policy_digests, fingerprint, measures) -> str:
    payload = {"policies": dict(policy_digests), "topology": fingerprint, "measures": list(measures)}
    return hashlib.sha256(canonical_json(payload).encode()).hexdigest()


class KnowledgeBase:
    def __init__(self, *, alpha: float = 0.3, history_size: int = 4096,
                 impacts: Mapping[str, float] | None = None):
        if history_size < 1:
            raise ValueError("history_size must be positive")
        self.alpha = alpha
        self.history: deque[ModelSnapshot] = deque(maxlen=history_size)
        self.impacts = dict(impacts or {})
        self.modelled_digests: dict[str, str] = {}
        self.modelled_topology: str | None = None
        self.threats: dict[str, ThreatRecord] = {}
        self.profiles: dict[tuple[str, str], BehaviorProfile] = {}
        self.adaptations: list[AdaptationRecord] = []
        self.measures: dict[str, Measure] = {}
        self.reconciliations: list[ReconciliationEvent] = []
        self._snapshot_ids = itertools.count(1)
        self._threat_ids = itertools.count(1)
        self._measure_ids = itertools.count(1)

    # ------------------------------------------------------------- models
    def adopt(self, live: LiveState) -> None:
        """Take the live digests as the model, e.g. at start-up or after our own change."""
        self.modelled_digests = dict(live.policy_digests())
        self.modelled_topology = live.topology_fingerprint()

    def expect_digest(self, component: str, digest: str) -> None:
        self.modelled_digests[component] = digest

    def active_measures(self) -> list[Measure]:
        return [m for m in self.measures.values() if m.active]

    def snapshot(self, live: LiveState, clock: float) -> ModelSnapshot:
        digests = tuple(sorted(live.policy_digests().items()))
        fingerprint = live.topology_fingerprint()
        measures = tuple(sorted(m.measure_id for m in self.active_measures()))
        snap = ModelSnapshot(next(self._snapshot_ids), clock, digests, fingerprint, measures,
                             _snapshot_digest(digests, fingerprint, measures))
        self.history.append(snap)
        return snap

    def snapshot_by_id(self, snapshot_id: int) -> ModelSnapshot | None:
        for snap in self.history:
            if snap.snapshot_id == snapshot_id:
                return snap
        return None

    def export_history(self) -> str:
        return "".join(canonical_json(s.to_dict()) + "\n" for s in self.history)

    # -------------------------------------------------------------- drift
    def detect_drift(self, live: LiveState) -> DriftReport:
        live_digests = live.policy_digests()
        mismatches = [
            PolicyMismatch(c, self.modelled_digests.get(c), live_digests.get(c))
            for c in sorted(set(live_digests) | set(self.modelled_digests))
            if self.modelled_digests.get(c) != live_digests.get(c)
        ]
        fingerprint = live.topology_fingerprint()
        topo = None
        if self.modelled_topology is not None and fingerprint != self.modelled_topology:
            topo = (self.modelled_topology, fingerprint)
        return DriftReport(tuple(mismatches), topo)

    def reconcile(self, report: DriftReport, live: LiveState, clock: float) -> list[ReconciliationEvent]:
        if report.is_empty():
            raise PreconditionViolation("reconcile needs a non-empty drift report")
        events = [ReconciliationEvent(clock, m.component, m.modelled, m.live) for m in report.policy_mismatches]
        if report.topology_mismatch is not None:
            events.append(ReconciliationEvent(clock, "topology", *report.topology_mismatch))
        self.adopt(live)
        self.reconciliations.extend(events)
        logger.warning("reconciled %d out-of-band change(s) at %s", len(events), clock)
        return events

    # ------------------------------------------------------------ threats
    def register_threat(self, threat_class: str, party: str, likelihood: float, clock: float,
                        evidence: Iterable[str] = (), counter_state: Mapping[str, Any] | None = None
                        ) -> ThreatRecord:
        if threat_class not in self.impacts:
            raise UnknownThreatClass(threat_class)
        for rec in self.threats.values():
            if (rec.threat_class, rec.party) == (threat_class, party) and rec.status is not ThreatStatus.LIFTED:
                rec.evidence.extend(evidence)
                rec.likelihood = max(rec.likelihood, likelihood)
                if counter_state:
                    rec.counter_state.update(counter_state)
                return rec
        rec = ThreatRecord(f"T{next(self._threat_ids)}", threat_class, party, likelihood,
                           self.impacts[threat_class], clock, dict(counter_state or {}),
                           evidence=list(evidence))
        self.threats[rec.threat_id] = rec
        return rec

    def resolve_threat(self, threat_id: str) -> ThreatRecord:
        rec = self.threats[threat_id]
        rec.status = _NEXT_STATUS[rec.status]
        return rec

    def threats_of(self, party: str, threat_class: str | None = None) -> list[ThreatRecord]:
        return [t for t in self.threats.values()
                if t.party == party and (threat_class is None or t.threat_class == threat_class)]

    # ----------------------------------------------------------- profiles
    def profile(self, owner: str, action: str, window: float) -> BehaviorProfile:
        key = (owner, action)
        if key not in self.profiles:
            self.profiles[key] = BehaviorProfile(owner, action, window)
        return self.profiles[key]

    def record_window(self, owner: str, action: str, window: float, count: int, clock: float) -> BehaviorProfile:
        prof = update_profile(self.profile(owner, action, window), count, self.alpha, clock)
        self.profiles[(owner, action)] = prof
        return prof

    # ---------------------------------------------------- measures/records
    def add_measure(self, kind: str, party: str, subject: str | None, clock: float, plan_id: str,
                    liftable: bool, restore: Mapping[str, Any] | None = None,
                    threat_class: str | None = None) -> Measure:
        m = Measure(f"M{next(self._measure_ids)}", kind, party, subject, clock, plan_id, liftable,
                    dict(restore or {}), threat_class)
        self.measures[m.measure_id] = m
        return m

    def lift_measure(self, measure_id: str, clock: float) -> Measure:
        m = self.measures[measure_id]
        if m.lifted_at is None:
            m.lifted_at = clock
        return m

    def record_adaptation(self, record: AdaptationRecord) -> None:
        if record.outcome is AdaptationOutcome.ROLLED_BACK and record.post_snapshot is not None:
            pre = self.snapshot_by_id(record.pre_snapshot)
            post = self.snapshot_by_id(record.post_snapshot)
            if pre and post and pre.digest != post.digest:
                raise AssertionError(f"rolled-back plan {record.plan_id} left state changed")
        self.adaptations.append(record)

    def last_clock(self) -> float:
        return self.history[-1].clock if self.history else -math.inf
