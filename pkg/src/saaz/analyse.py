"""Detection and assessment: signature and case-based detectors, geo-mismatch
detection, alert fusion, diagnosis, risk, prioritisation, normality checks and
the background re-scan over history.
"""

from __future__ import annotations

import bisect
import itertools
import logging
import math
from collections import defaultdict, deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping, Protocol, Sequence

from .errors import EmptyAlertSet, InsufficientHistory, MissingAssociatedSignature, PreconditionViolation, \
    UnknownThreatClass
from .knowledge import BehaviorProfile, Measure, update_profile
from .monitor import fuse_location, record_clock, record_matches

logger = logging.getLogger(__name__)

DIAGNOSIS_TAGS = ("stolen-credential", "over-privilege", "compromised-service", "unknown")


class Classification(str, Enum):
    LEGITIMATE = "Legitimate"
    SUSPICIOUS = "Suspicious"
    THREAT = "Threat"

    @property
    def rank(self) -> int:
        return _RANK[self]


_RANK = {Classification.LEGITIMATE: 0, Classification.SUSPICIOUS: 1, Classification.THREAT: 2}


@dataclass(frozen=True)
class SignatureSpec:
    detector_id: str
    predicate: Mapping[str, Any]
    threshold: int
    window: float
    group_by: str = "party_id"
    threat_class: str = "over-query"

    def __post_init__(self):
        if self.threshold < 1:
            raise ValueError("signature threshold must be >= 1")
        if self.window <= 0:
            raise ValueError("signature window must be positive")


@dataclass(frozen=True)
class CaseSpec:
    detector_id: str
    predicate: Mapping[str, Any]
    window: float
    k: float = 3.0
    rho: float = 0.8
    m: int = 3
    floor: int = 3
    warmup: int = 0
    group_by: str = "party_id"
    threat_class: str = "over-query"
    signature: SignatureSpec | None = None
    evasion: bool = False
    evasion_confidence: float = 0.6

    def __post_init__(self):
        if self.k <= 0:
            raise ValueError("k must be positive")
        if not 0 < self.rho < 1:
            raise ValueError("rho must lie in (0, 1)")
        if self.m < 2:
            raise ValueError("evasion run length must be >= 2")
        if self.evasion and self.signature is None:
            raise MissingAssociatedSignature(self.detector_id)


@dataclass(frozen=True)
class GeoSpec:
    detector_id: str
    predicate: Mapping[str, Any] = field(default_factory=lambda: {"action": "authenticate", "outcome": "Permit"})
    horizon: float = 3600.0
    min_confidence: float = 0.5
    threat_class: str = "impersonation"


@dataclass(frozen=True)
class Alert:
    alert_id: str
    detector_id: str
    party: str | None
    subject: str | None
    clock: float
    confidence: float
    evidence: tuple[str, ...]
    kind: str
    threat_class: str
    window_start: float
    sessions: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.evidence:
            raise ValueError("an alert needs evidence")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("alert confidence outside [0, 1]")

    @property
    def implicated(self) -> tuple[str | None, str | None]:
        return self.party, self.subject


@dataclass(frozen=True)
class Diagnosis:
    entry_session: str | None
    first_malicious: float
    tag: str


@dataclass(frozen=True)
class Finding:
    finding_id: str
    party: str | None
    subject: str | None
    classification: Classification
    confidence: float
    alerts: tuple[Alert, ...]
    threat_class: str
    first_clock: float
    diagnosis: Diagnosis | None = None

    @property
    def target(self) -> str | None:
        return self.subject or self.party


@dataclass(frozen=True)
class RiskScore:
    finding_id: str
    likelihood: float
    impact: float

    @property
    def risk(self) -> float:
        return self.likelihood * self.impact


@dataclass(frozen=True)
class LiftRecommendation:
    measure_id: str
    party: str
    restore: Mapping[str, Any]


class Verdict(str, Enum):
    CONFIRMED = "Confirmed"
    ROLLBACK_SUGGESTED = "RollbackSuggested"


@dataclass(frozen=True)
class ScanResult:
    alerts: tuple[Alert, ...] = ()
    verdicts: Mapping[str, Verdict] = field(default_factory=dict)


def _payload(event: Any) -> Any:
    return getattr(event, "payload", event)


def _confidence(event: Any) -> float:
    conf = getattr(event, "confidence", None)
    if conf is None and isinstance(event, Mapping):
        conf = event.get("confidence")
    return 1.0 if conf is None else conf


def _get(record: Any, name: str) -> Any:
    if isinstance(record, Mapping):
        return record.get(name)
    return getattr(record, name, None)


def _ref(event: Any) -> str:
    rid = _get(_payload(event), "request_id")
    return rid if rid is not None else f"@{record_clock(_payload(event))}"


def _party_subject(group_by: str, key: Any, payload: Any) -> tuple[str | None, str | None]:
    party = _get(payload, "party_id")
    subject = _get(payload, "subject_id") if group_by == "subject_id" else None
    return party, subject


# ---------------------------------------------------------------- signature
class SignatureDetector:
    """Streaming sliding-window threshold detector.

    An alert is raised at a matching event when the events in ``(t - W, t]``
    (this one included) strictly exceed N, unless the same group alerted less
    than W ago.
    """

    def __init__(self, spec: SignatureSpec):
        self.spec = spec
        self._ids = itertools.count(1)
        self._windows: dict[Any, deque] = defaultdict(deque)
        self._last: dict[Any, float] = {}

    def feed(self, events: Iterable[Any]) -> list[Alert]:
        spec = self.spec
        out = []
        for event in events:
            payload = _payload(event)
            if not record_matches(payload, spec.predicate):
                continue
            t = record_clock(payload)
            key = _get(payload, spec.group_by)
            dq = self._windows[key]
            dq.append((t, _confidence(event), _ref(event), _get(payload, "session_id")))
            while dq[0][0] <= t - spec.window:
                dq.popleft()
            last = self._last.get(key)
            if len(dq) > spec.threshold and (last is None or t - last >= spec.window):
                self._last[key] = t
                party, subject = _party_subject(spec.group_by, key, payload)
                out.append(Alert(
                    f"{spec.detector_id}#{next(self._ids)}", spec.detector_id, party, subject, t,
                    min(c for _, c, _, _ in dq), tuple(r for _, _, r, _ in dq), "signature",
                    spec.threat_class, dq[0][0],
                    tuple(sorted({s for *_, s in dq if s is not None})),
                ))
        return out


def signature_detect(events: Sequence[Any], spec: SignatureSpec, clock: float | None = None) -> list[Alert]:
    if clock is not None:
        events = [e for e in events if record_clock(_payload(e)) <= clock]
    return SignatureDetector(spec).feed(events)


# --------------------------------------------------------------------- case
class ProfileStore(Protocol):
    def profile(self, owner: str, action: str, window: float) -> BehaviorProfile: ...

    def record_window(self, owner: str, action: str, window: float, count: int,
                      clock: float) -> BehaviorProfile: ...


class LocalProfiles:
    def __init__(self, alpha: float, initial: Mapping[Any, BehaviorProfile] | None = None):
        self.alpha = alpha
        self.profiles: dict[tuple[str, str], BehaviorProfile] = {}
        for owner, prof in (initial or {}).items():
            self.profiles[(owner, prof.action)] = prof

    def profile(self, owner, action, window):
        return self.profiles.setdefault((owner, action), BehaviorProfile(owner, action, window))

    def record_window(self, owner, action, window, count, clock):
        prof = update_profile(self.profile(owner, action, window), count, self.alpha, clock)
        self.profiles[(owner, action)] = prof
        return prof


@dataclass
class _CaseGroup:
    next_window: int
    pending: dict[int, list] = field(default_factory=lambda: defaultdict(list))
    run: int = 0
    party: str | None = None
    subject: str | None = None


class CaseDetector:
    """Profile-deviation and threshold-evasion detection over aligned windows ``[j*w, (j+1)*w)``."""

    def __init__(self, spec: CaseSpec, profiles: ProfileStore):
        self.spec = spec
        self.profiles = profiles
        self._ids = itertools.count(1)
        self._groups: dict[Any, _CaseGroup] = {}

    def feed(self, events: Iterable[Any], clock: float) -> list[Alert]:
        spec = self.spec
        w = spec.window
        for event in events:
            payload = _payload(event)
            if not record_matches(payload, spec.predicate):
                continue
            t = record_clock(payload)
            key = _get(payload, spec.group_by)
            idx = math.floor(t / w)
            group = self._groups.get(key)
            if group is None:
                group = self._groups[key] = _CaseGroup(idx)
                group.party, group.subject = _party_subject(spec.group_by, key, payload)
            if idx < group.next_window:
                raise ValueError(f"event at {t} falls in an already closed window")
            group.pending[idx].append(event)
        return self.advance(clock)

    def advance(self, clock: float) -> list[Alert]:
        spec = self.spec
        w = spec.window
        out = []
        last_closed = math.floor(clock / w) - 1
        for key in sorted(self._groups, key=str):
            group = self._groups[key]
            while group.next_window <= last_closed:
                j = group.next_window
                events = group.pending.pop(j, [])
                out.extend(self._close(key, group, j, events))
                group.next_window += 1
        return out

    def _close(self, key, group: _CaseGroup, j: int, events: list) -> list[Alert]:
        spec = self.spec
        w = spec.window
        start, end = j * w, (j + 1) * w
        count = len(events)
        owner = str(key)
        prof = self.profiles.profile(owner, spec.detector_id, w)
        out = []
        if events:
            refs = tuple(_ref(e) for e in events)
            sessions = tuple(sorted({s for s in (_get(_payload(e), "session_id") for e in events) if s}))
            obs_conf = min(_confidence(e) for e in events)
            thr = prof.threshold(spec.k)
            if prof.samples >= spec.warmup and count >= spec.floor and count > thr:
                excess = count - thr
                conf = min(obs_conf, excess / (excess + thr)) if excess + thr > 0 else obs_conf
                out.append(Alert(f"{spec.detector_id}#{next(self._ids)}", spec.detector_id, group.party, group.subject,
                                 end, conf, refs, "deviation", spec.threat_class, start, sessions))
        if spec.evasion:
            n = spec.signature.threshold
            if spec.rho * n <= count <= n:
                group.run += 1
                if group.run == spec.m:
                    refs = tuple(_ref(e) for e in events)
                    out.append(Alert(f"{spec.detector_id}#{next(self._ids)}", spec.detector_id, group.party,
                                     group.subject, end, spec.evasion_confidence, refs, "evasion",
                                     spec.threat_class, start - (spec.m - 1) * w))
            else:
                group.run = 0
        self.profiles.record_window(owner, spec.detector_id, w, count, end)
        return out


def case_detect(events: Sequence[Any], profile: BehaviorProfile | None, spec: CaseSpec, clock: float,
                alpha: float = 0.3) -> list[Alert]:
    """One-shot case detection for a single scope, starting from ``profile``."""
    store = LocalProfiles(alpha)
    if profile is not None:
        store.profiles[(profile.owner, spec.detector_id)] = profile
    return CaseDetector(spec, store).feed(events, clock)


# ---------------------------------------------------------------------- geo
class GeoDetector:
    """Flags authentications whose origin disagrees with the subject's fused location."""

    def __init__(self, spec: GeoSpec):
        self.spec = spec
        self._ids = itertools.count(1)
        self._readings: dict[str, deque] = defaultdict(deque)

    def observe_location(self, observations: Iterable[Any]) -> None:
        for obs in observations:
            payload = _payload(obs)
            self._readings[_get(payload, "subject")].append(
                (record_clock(payload), _get(payload, "geo"), _confidence(obs)))

    def feed(self, events: Iterable[Any]) -> list[Alert]:
        spec = self.spec
        out = []
        for event in events:
            payload = _payload(event)
            if not record_matches(payload, spec.predicate):
                continue
            t = record_clock(payload)
            subject = _get(payload, "subject_id")
            readings = [(g, c) for (rt, g, c) in self._readings.get(subject, ())
                        if t - spec.horizon < rt <= t]
            if not readings:
                continue
            label, share = fuse_location(readings)
            origin = _get(payload, "origin")
            geo = _get(origin, "geo") if origin is not None else None
            if geo is None or geo == label:
                continue
            winners = [c for g, c in readings if g == label]
            conf = min(share, sum(winners) / len(winners))
            if conf < spec.min_confidence:
                continue
            session = _get(payload, "session_id")
            out.append(Alert(f"{spec.detector_id}#{next(self._ids)}", spec.detector_id, _get(payload, "party_id"),
                             subject, t, conf, (_ref(event),), "geo-mismatch", spec.threat_class, t,
                             (session,) if session else ()))
        return out


# ------------------------------------------------------------------- fusion
def fuse(alerts: Sequence[Alert], x: float = 0.4, y: float = 0.75, finding_id: str | None = None) -> Finding:
    if not alerts:
        raise EmptyAlertSet("nothing to fuse")
    if not 0 <= x < y <= 1:
        raise ValueError("thresholds must satisfy 0 <= x < y <= 1")
    implicated = {a.implicated for a in alerts}
    if len(implicated) != 1:
        raise PreconditionViolation(f"alerts implicate several parties: {sorted(map(str, implicated))}")
    party, subject = implicated.pop()
    survive = 1.0
    for a in alerts:
        survive *= 1.0 - a.confidence
    c = 1.0 - survive
    if c >= y or any(a.confidence >= y for a in alerts):
        cls = Classification.THREAT
    elif c >= x:
        cls = Classification.SUSPICIOUS
    else:
        cls = Classification.LEGITIMATE
    lead = max(alerts, key=lambda a: (a.confidence, a.threat_class))
    first = min(a.window_start for a in alerts)
    fid = finding_id or f"F-{lead.alert_id}"
    return Finding(fid, party, subject, cls, c, tuple(alerts), lead.threat_class, first)


def group_alerts(alerts: Iterable[Alert]) -> dict[tuple, list[Alert]]:
    groups: dict[tuple, list[Alert]] = defaultdict(list)
    for a in alerts:
        groups[a.implicated].append(a)
    return dict(sorted(groups.items(), key=lambda kv: tuple(str(v) for v in kv[0])))


# ---------------------------------------------------------------- diagnosis
def diagnose(finding: Finding, log: Sequence[Any], history_start: float = -math.inf,
             tags: Mapping[str, str] | None = None) -> Diagnosis:
    if finding.classification.rank < Classification.SUSPICIOUS.rank:
        raise PreconditionViolation("only suspicious or threatening findings are diagnosed")
    first = finding.first_clock
    if first < history_start:
        raise InsufficientHistory(f"history starts at {history_start}, onset at {first}")

    evidence_sessions = {s for a in finding.alerts for s in a.sessions}
    refs = {r for a in finding.alerts for r in a.evidence}

    def implicated(entry) -> bool:
        if entry.synthetic or entry.session_id is None:
            return False
        if finding.subject is not None:
            return entry.subject_id == finding.subject
        return entry.party_id == finding.party

    candidates = [e for e in log if implicated(e)]
    if not candidates:
        raise InsufficientHistory(f"no sessions recorded for {finding.target}")
    entry = None
    for e in candidates:
        if e.session_id in evidence_sessions or e.request_id in refs:
            entry = e.session_id
            break
    if entry is None:
        later = [e for e in candidates if e.timestamp >= first]
        if not later:
            raise InsufficientHistory(f"no activity of {finding.target} after onset {first}")
        entry = later[0].session_id

    if any(a.kind == "geo-mismatch" for a in finding.alerts):
        tag = "stolen-credential"
    else:
        tag = (tags or {}).get(finding.threat_class, "unknown")
    if tag not in DIAGNOSIS_TAGS:
        tag = "unknown"
    return Diagnosis(entry, first, tag)


# --------------------------------------------------------------------- risk
def risk_score(finding: Finding, impacts: Mapping[str, float]) -> RiskScore:
    if finding.threat_class not in impacts:
        raise UnknownThreatClass(finding.threat_class)
    return RiskScore(finding.finding_id, finding.confidence, float(impacts[finding.threat_class]))


def prioritise(scored: Iterable[tuple[Finding, RiskScore]]) -> list[tuple[Finding, RiskScore]]:
    return sorted(scored, key=lambda fr: (-fr[1].risk, fr[0].first_clock, fr[0].finding_id))


# ---------------------------------------------------------------- normality
def normality_check(measures: Iterable[Measure], last_alert: Mapping[str, float], clock: float,
                    quiet_period: float) -> list[LiftRecommendation]:
    """Lift liftable measures whose party has been quiet for ``quiet_period``."""
    out = []
    for m in measures:
        if not m.active or not m.liftable:
            continue
        quiet_since = max(m.applied_at, last_alert.get(m.party, -math.inf))
        if clock - quiet_since >= quiet_period:
            out.append(LiftRecommendation(m.measure_id, m.party, dict(m.restore)))
    return out


# -------------------------------------------------------- background re-scan
def over_quota_permits(times: Sequence[float], max_count: int, window: float, after: float = -math.inf) -> int:
    """Permits at ``t > after`` that found ``max_count`` earlier permits within ``(t - window, t]``."""
    bad = 0
    for i, t in enumerate(times):
        if t <= after:
            continue
        prior = i - bisect.bisect_right(times, t - window, 0, i)
        if prior >= max_count:
            bad += 1
    return bad


def perpetual_scan(log: Sequence[Any], specs: Sequence[SignatureSpec], live_alerts: Sequence[Alert],
                   adaptations: Sequence[Any], *, window_factor: float = 3.0,
                   threshold_factor: float = 2.0, lifted: Mapping[str, float] | None = None) -> ScanResult:
    """Re-run detectors over the whole log with wider windows and check finished adaptations.

    Works on read-only inputs and returns its results; the caller decides what to enqueue.
    """
    entries = [e for e in log if not e.synthetic]
    if not entries:
        return ScanResult()
    retro = []
    for spec in specs:
        wide = SignatureSpec(f"{spec.detector_id}/wide", spec.predicate,
                             max(1, int(spec.threshold * threshold_factor)), spec.window * window_factor,
                             spec.group_by, spec.threat_class)
        for alert in SignatureDetector(wide).feed(entries):
            covered = any(
                la.implicated == alert.implicated and alert.window_start - spec.window <= la.clock <= alert.clock
                for la in live_alerts
            )
            if not covered:
                retro.append(alert)

    verdicts: dict[str, Verdict] = {}
    for rec in adaptations:
        if rec.offending is None or rec.outcome.value == "RolledBack":
            continue
        off = rec.offending
        end = (lifted or {}).get(rec.plan_id, math.inf)
        after = [e for e in entries if rec.finished < e.timestamp < end and record_matches(e, off["match"])]
        if "max_count" in off:
            permits = [e for e in entries if e.timestamp < end and e.permitted and not e.obligations
                       and record_matches(e, off["match"])]
            bad = over_quota_permits([e.timestamp for e in permits], off["max_count"], off["window"],
                                     after=rec.finished)
        else:
            bad = sum(1 for e in after if e.permitted)
        verdicts[rec.plan_id] = Verdict.ROLLBACK_SUGGESTED if bad else Verdict.CONFIRMED
    return ScanResult(tuple(retro), verdicts)
