"""The managed authorisation infrastructure: enforcement, decision, information
and administration points, federated identity services, sessions, trust, and
the access log.

Everything here runs on the simulator's single logical clock.  Mutations
happen on one thread of control; the controller reads logs, policies and
trust records between ticks.
"""

from __future__ import annotations

import bisect
import hashlib
import itertools
import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Iterable, Mapping

from .errors import (
    CredentialsSuspended,
    IdPBanned,
    IdPUnavailable,
    InvalidPolicy,
    SessionTerminated,
    UnknownParty,
    UnknownSession,
    UnknownSubject,
    UnsupportedOperation,
)
from .policy import (
    DEFAULT_VOCABULARY,
    AccessRequest,
    AttributeAssertion,
    Decision,
    Effect,
    Policy,
    PolicyDelta,
    PolicyKind,
    QuotaGrant,
    Rule,
    apply_delta,
    canonical_json,
    evaluate,
    filter_release,
    has_errors,
    lint,
    validate_credentials,
)

logger = logging.getLogger(__name__)

EMPTY_READING = "empty-reading"
PDP_UNAVAILABLE = "pdp-unavailable"


class ComponentKind(str, Enum):
    PEP = "PEP"
    PDP = "PDP"
    PIP = "PIP"
    PRP = "PRP"
    PAP = "PAP"
    IDENTITY = "IdentityService"


class ReloadMode(str, Enum):
    UPDATE = "Update"
    REDEPLOY = "Redeploy"


class SessionStatus(str, Enum):
    ACTIVE = "Active"
    AMENDED = "Amended"
    TERMINATED = "Terminated"


@dataclass
class ComponentDescriptor:
    component_id: str
    kind: ComponentKind
    owner: str
    available: bool = True
    restart_downtime: float = 0.0
    operations: frozenset = frozenset({ReloadMode.UPDATE, ReloadMode.REDEPLOY})


@dataclass(frozen=True)
class Origin:
    zone: str = "local"
    geo: str = "EU"

    def to_dict(self) -> dict:
        return {"zone": self.zone, "geo": self.geo}


@dataclass
class Session:
    session_id: str
    subject_id: str
    issuing_idp: str
    activated_attributes: frozenset
    origin: Origin
    created_at: float
    status: SessionStatus = SessionStatus.ACTIVE

    def subject_view(self) -> dict[str, frozenset]:
        view: dict[str, set] = defaultdict(set)
        for name, value in self.activated_attributes:
            view[name].add(value)
        return {k: frozenset(v) for k, v in view.items()}


@dataclass(frozen=True)
class ComplianceEvent:
    request: str
    deadline: float
    met: bool


@dataclass
class TrustRecord:
    party_id: str
    trust: float
    compliance_history: list[ComplianceEvent] = field(default_factory=list)


@dataclass(frozen=True)
class TrustParams:
    initial: float = 0.8
    reward: float = 0.05
    penalty: float = 0.2
    ban_threshold: float = 0.2
    ban_duration: float | None = 86400.0


@dataclass(frozen=True)
class AccessLogEntry:
    timestamp: float
    request_id: str
    subject_id: str
    session_id: str | None
    resource_id: str
    action: str
    outcome: str
    matched_rule: str | None
    origin: Origin | None
    party_id: str | None = None
    obligations: tuple[str, ...] = ()
    synthetic: bool = False
    reason: str | None = None

    @property
    def permitted(self) -> bool:
        return self.outcome == Effect.PERMIT.value

    def to_dict(self) -> dict:
        d = asdict(self)
        d["obligations"] = list(self.obligations)
        d["origin"] = self.origin.to_dict() if self.origin else None
        return d


@dataclass(frozen=True)
class ReloadReport:
    mode: ReloadMode
    kind: PolicyKind
    old_digest: str
    new_digest: str
    downtime: tuple[float, float]


@dataclass(frozen=True)
class AdminEvent:
    """A change or action that went through the administration point or console."""

    clock: float
    actor: str
    action: str
    outcome: str
    params: Mapping[str, Any] = field(default_factory=dict)


@dataclass
class SubjectRecord:
    subject_id: str
    party_id: str
    assertions: list[AttributeAssertion]


@dataclass
class IdentityService:
    idp_id: str
    owner: str
    subjects: dict[str, SubjectRecord] = field(default_factory=dict)
    credential_flags: dict[str, set[str]] = field(default_factory=lambda: defaultdict(set))
    # scripted behaviour towards requests from the controller
    compliance_mode: str = "honour"
    compliance_delay: float = 0.0


@dataclass
class IdPRequest:
    request_id: str
    idp_id: str
    subject_id: str
    action: str
    issued_at: float
    deadline: float
    complied_at: float | None = None
    cancelled: bool = False


class _PIPView:
    """The information point as seen by one request."""

    def __init__(self, infra: "Infrastructure", clock: float, counter_override: int | None = None,
                 ignore_quota: bool = False):
        self._infra = infra
        self._clock = clock
        self._override = counter_override
        self._ignore_quota = ignore_quota

    def resource(self, resource_id):
        return self._infra.resources.get(resource_id)

    def environment(self):
        return {"clock": self._clock, "hour": int(self._clock // 3600) % 24}

    def quota(self, quota_ref):
        return self._infra.quotas.get(quota_ref)

    def quota_count(self, grant):
        if self._ignore_quota:
            return 0
        if self._override is not None:
            return self._override
        return self._infra.permit_count(grant.party_id, grant.resource_id, grant.action,
                                        self._clock - grant.window, self._clock)


class Infrastructure:
    """One service-provider domain (the EMS) federated with N identity services."""

    def __init__(
        self,
        *,
        components: Iterable[ComponentDescriptor],
        idps: Iterable[IdentityService],
        parties: Iterable[str],
        resources: Mapping[str, Mapping[str, Any]],
        policies: Mapping[PolicyKind, Policy],
        quotas: Iterable[QuotaGrant] = (),
        trust: TrustParams = TrustParams(),
        sp_id: str = "ems",
        subscriptions: Mapping[str, Iterable[Rule]] | None = None,
        vocabulary: Mapping[str, Iterable[str]] = DEFAULT_VOCABULARY,
    ):
        self.components = {c.component_id: c for c in components}
        pdps = [c for c in self.components.values() if c.kind is ComponentKind.PDP]
        if len(pdps) != 1:
            raise ValueError("exactly one PDP is required in the service-provider domain")
        self.pdp_id = pdps[0].component_id
        self.idps = {i.idp_id: i for i in idps}
        self.parties = set(parties) | {i.owner for i in self.idps.values()}
        self.resources = {rid: dict(attrs) for rid, attrs in resources.items()}
        self.policies: dict[PolicyKind, Policy] = dict(policies)
        self.quotas: dict[str, QuotaGrant] = {q.quota_id: q for q in quotas}
        self.trust_params = trust
        self.sp_id = sp_id
        self.subscriptions = {k: tuple(v) for k, v in (subscriptions or {}).items()}
        self.vocabulary = vocabulary

        self.clock = -math.inf
        self.pdp_down_until = -math.inf
        self.sessions: dict[str, Session] = {}
        self.log: list[AccessLogEntry] = []
        self._log_times: list[float] = []
        self._permit_times: dict[tuple[str, str, str], list[float]] = defaultdict(list)
        self.availability_events: list[tuple[float, str, str]] = []
        self.admin_events: list[AdminEvent] = []
        self.fallbacks: set[tuple[str, str]] = set()
        self.bans: dict[str, float] = {}
        self.trust: dict[str, TrustRecord] = {
            p: TrustRecord(p, trust.initial) for p in sorted(self.parties | set(self.idps))
        }
        self.idp_requests: dict[str, IdPRequest] = {}
        self._session_seq = itertools.count(1)
        self._request_seq = itertools.count(1)

    # ------------------------------------------------------------------ clock
    def observe(self, clock: float) -> None:
        if clock < self.clock:
            raise ValueError(f"clock went backwards: {clock} < {self.clock}")
        self.clock = clock

    # ---------------------------------------------------------------- lookups
    def subject(self, subject_id: str) -> SubjectRecord | None:
        for idp in self.idps.values():
            rec = idp.subjects.get(subject_id)
            if rec is not None:
                return rec
        return None

    def idp_of(self, subject_id: str) -> str | None:
        for idp in self.idps.values():
            if subject_id in idp.subjects:
                return idp.idp_id
        return None

    def _require_party(self, party_id: str) -> None:
        if party_id not in self.trust:
            raise UnknownParty(party_id)

    def active_policy(self, kind: PolicyKind = PolicyKind.ACCESS_CONTROL) -> Policy:
        return self.policies[kind]

    def pdp_available(self, clock: float | None = None) -> bool:
        clock = self.clock if clock is None else clock
        return self.components[self.pdp_id].available and clock >= self.pdp_down_until

    # ------------------------------------------------------------------- log
    def _append(self, entry: AccessLogEntry) -> None:
        if self.log and entry.timestamp < self.log[-1].timestamp:
            raise ValueError("access log timestamps must be non-decreasing")
        self.log.append(entry)
        self._log_times.append(entry.timestamp)
        if entry.permitted and not entry.synthetic and EMPTY_READING not in entry.obligations:
            self._permit_times[(entry.party_id, entry.resource_id, entry.action)].append(entry.timestamp)

    def _next_request_id(self, prefix: str = "req") -> str:
        return f"{prefix}-{next(self._request_seq)}"

    def permit_count(self, party: str, resource: str, action: str, after: float, upto: float) -> int:
        """Permits for (party, resource, action) with ``after < t <= upto``."""
        times = self._permit_times.get((party, resource, action), [])
        return bisect.bisect_right(times, upto) - bisect.bisect_right(times, after)

    def query_log(self, window: tuple[float, float] = (-math.inf, math.inf),
                  predicate: Callable[[AccessLogEntry], bool] | Mapping[str, Any] | None = None
                  ) -> list[AccessLogEntry]:
        start, end = window
        if start > end:
            raise ValueError("window start after end")
        lo = bisect.bisect_left(self._log_times, start)
        hi = bisect.bisect_right(self._log_times, end)
        if predicate is None:
            return self.log[lo:hi]
        if not callable(predicate):
            fields = dict(predicate)
            predicate = lambda e: all(getattr(e, k) == v for k, v in fields.items())  # noqa: E731
        return [e for e in self.log[lo:hi] if predicate(e)]

    def export_log(self) -> str:
        return "".join(canonical_json(e.to_dict()) + "\n" for e in self.log)

    # ------------------------------------------------------------ identities
    def is_banned(self, party_id: str, clock: float | None = None) -> bool:
        clock = self.clock if clock is None else clock
        if self.bans.get(party_id, -math.inf) > clock:
            return True
        rec = self.trust.get(party_id)
        return rec is not None and rec.trust < self.trust_params.ban_threshold

    def authenticate(self, subject_id: str, idp_id: str, origin: Origin, clock: float) -> Session:
        self.observe(clock)
        idp = self.idps.get(idp_id)
        if idp is None:
            raise UnknownParty(idp_id)

        def refuse(reason, exc):
            self._append(AccessLogEntry(clock, self._next_request_id("auth"), subject_id, None, "session",
                                        "authenticate", Effect.DENY.value, None, origin,
                                        party_id=self._party_of(subject_id), reason=reason))
            raise exc

        if self.is_banned(idp_id, clock) or self.is_banned(idp.owner, clock):
            refuse("idp-banned", IdPBanned(idp_id))
        comp = self.components.get(idp_id)
        if comp is not None and not comp.available:
            refuse("idp-unavailable", IdPUnavailable(idp_id))
        rec = idp.subjects.get(subject_id)
        if rec is None:
            refuse("unknown-subject", UnknownSubject(subject_id))
        flags = idp.credential_flags.get(subject_id)
        if flags:
            refuse("credentials-" + "+".join(sorted(flags)), CredentialsSuspended(f"{subject_id}: {sorted(flags)}"))

        validated = validate_credentials(rec.assertions, self.policies[PolicyKind.CREDENTIAL_VALIDATION], clock)
        released = filter_release([(a.name, a.value) for a in validated],
                                  self.policies[PolicyKind.ATTRIBUTE_RELEASE], self.sp_id)
        attrs = released | {("id", subject_id), ("idp", idp_id), ("party", rec.party_id)}
        session = Session(f"s{next(self._session_seq)}", subject_id, idp_id, frozenset(attrs), origin, clock)
        self.sessions[session.session_id] = session
        self._append(AccessLogEntry(clock, self._next_request_id("auth"), subject_id, session.session_id,
                                    "session", "authenticate", Effect.PERMIT.value, None, origin,
                                    party_id=rec.party_id))
        logger.debug("session %s opened for %s via %s", session.session_id, subject_id, idp_id)
        return session

    def _party_of(self, subject_id: str) -> str | None:
        rec = self.subject(subject_id)
        return rec.party_id if rec else None

    def set_credential_flag(self, subject_id: str, flag: str) -> None:
        idp = self.idps[self.idp_of(subject_id)]
        idp.credential_flags[subject_id].add(flag)

    def clear_credential_flag(self, subject_id: str, flag: str) -> None:
        idp_id = self.idp_of(subject_id)
        if idp_id is not None:
            self.idps[idp_id].credential_flags.get(subject_id, set()).discard(flag)

    # -------------------------------------------------------------- requests
    def _session(self, session: Session | str) -> Session:
        sid = session if isinstance(session, str) else session.session_id
        try:
            return self.sessions[sid]
        except KeyError:
            raise UnknownSession(sid) from None

    def request_access(self, session: Session | str, resource_id: str, action: str, clock: float, *,
                       synthetic: bool = False, counter_override: int | None = None) -> Decision:
        self.observe(clock)
        sess = self._session(session)
        party = dict(sess.activated_attributes).get("party")
        rid = self._next_request_id("probe" if synthetic else "req")

        def record(decision: Decision, reason: str | None = None) -> Decision:
            self._append(AccessLogEntry(clock, rid, sess.subject_id, sess.session_id, resource_id, action,
                                        decision.outcome.value, decision.matched_rule, sess.origin,
                                        party_id=party, obligations=decision.obligations,
                                        synthetic=synthetic, reason=reason))
            return decision

        policy = self.policies[PolicyKind.ACCESS_CONTROL]
        if sess.status is SessionStatus.TERMINATED:
            record(Decision(Effect.DENY, None, policy.version), "session-terminated")
            raise SessionTerminated(sess.session_id)
        if not self.pdp_available(clock):
            self.availability_events.append((clock, self.pdp_id, PDP_UNAVAILABLE))
            return record(Decision(Effect.DENY, None, policy.version, (PDP_UNAVAILABLE,)), PDP_UNAVAILABLE)

        request = AccessRequest(sess.subject_view(), resource_id, action,
                                {"zone": sess.origin.zone, "geo": sess.origin.geo}, rid)
        decision = evaluate(request, self.policies, _PIPView(self, clock, counter_override))
        if not decision.permitted and party is not None and (party, resource_id) in self.fallbacks:
            unbounded = evaluate(request, self.policies, _PIPView(self, clock, ignore_quota=True))
            if unbounded.permitted:
                return record(Decision(Effect.PERMIT, unbounded.matched_rule, unbounded.policy_version,
                                       (EMPTY_READING,)), "over-quota")
        return record(decision)

    def reject_unauthenticated(self, subject_id: str, resource_id: str, action: str, origin: Origin,
                               clock: float, reason: str) -> Decision:
        """PEP path for a request that arrives without a usable session."""
        self.observe(clock)
        policy = self.policies[PolicyKind.ACCESS_CONTROL]
        decision = Decision(Effect.DENY, None, policy.version)
        self._append(AccessLogEntry(clock, self._next_request_id(), subject_id, None, resource_id, action,
                                    Effect.DENY.value, None, origin, party_id=self._party_of(subject_id),
                                    reason=reason))
        return decision

    def probe_decision(self, subject_id: str, resource_id: str, action: str, origin: Origin, clock: float,
                       counter_override: int | None = None) -> Decision:
        """Replay a synthetic request as ``subject_id`` would issue it now.

        Uses the subject's open sessions if any; otherwise the attributes a fresh
        authentication would yield.  Blocked credentials count as Deny.  The
        probe is logged as synthetic and never consumes quota.
        """
        self.observe(clock)
        open_sessions = [s for s in self.sessions.values()
                         if s.subject_id == subject_id and s.status is not SessionStatus.TERMINATED]
        decisions = []
        for s in open_sessions:
            decisions.append(self._probe_with(s, resource_id, action, clock, counter_override))
        idp_id = self.idp_of(subject_id)
        if idp_id is not None:
            idp = self.idps[idp_id]
            blocked = (self.is_banned(idp_id, clock) or self.is_banned(idp.owner, clock)
                       or bool(idp.credential_flags.get(subject_id)))
            if not blocked:
                rec = idp.subjects[subject_id]
                validated = validate_credentials(rec.assertions, self.policies[PolicyKind.CREDENTIAL_VALIDATION],
                                                 clock)
                released = filter_release([(a.name, a.value) for a in validated],
                                          self.policies[PolicyKind.ATTRIBUTE_RELEASE], self.sp_id)
                attrs = released | {("id", subject_id), ("idp", idp_id), ("party", rec.party_id)}
                transient = Session("probe", subject_id, idp_id, frozenset(attrs), origin, clock)
                decisions.append(self._probe_with(transient, resource_id, action, clock, counter_override))
        for d in decisions:
            if d.permitted:
                return d
        policy = self.policies[PolicyKind.ACCESS_CONTROL]
        return decisions[0] if decisions else Decision(Effect.DENY, None, policy.version)

    def _probe_with(self, sess: Session, resource_id, action, clock, counter_override) -> Decision:
        request = AccessRequest(sess.subject_view(), resource_id, action,
                                {"zone": sess.origin.zone, "geo": sess.origin.geo}, "probe")
        decision = evaluate(request, self.policies, _PIPView(self, clock, counter_override))
        self._append(AccessLogEntry(clock, self._next_request_id("probe"), sess.subject_id,
                                    sess.session_id if sess.session_id != "probe" else None, resource_id, action,
                                    decision.outcome.value, decision.matched_rule, sess.origin,
                                    party_id=dict(sess.activated_attributes).get("party"), synthetic=True))
        return decision

    # -------------------------------------------------------------- sessions
    def terminate_session(self, session_id: str) -> Session:
        sess = self._session(session_id)
        sess.status = SessionStatus.TERMINATED
        return sess

    def amend_session(self, session_id: str, attributes_to_remove: Iterable[tuple[str, Any]]) -> Session:
        sess = self._session(session_id)
        if sess.status is SessionStatus.TERMINATED:
            raise SessionTerminated(session_id)
        drop = set(attributes_to_remove)
        sess.activated_attributes = frozenset(a for a in sess.activated_attributes if a not in drop)
        sess.status = SessionStatus.AMENDED
        return sess

    def sessions_of(self, subject_id: str, include_terminated: bool = False) -> list[Session]:
        return [s for s in self.sessions.values()
                if s.subject_id == subject_id and (include_terminated or s.status is not SessionStatus.TERMINATED)]

    # -------------------------------------------------------------- policies
    def reload_policy(self, change: Policy | PolicyDelta, mode: ReloadMode, clock: float) -> ReloadReport:
        self.observe(clock)
        pdp = self.components[self.pdp_id]
        if mode not in pdp.operations:
            raise UnsupportedOperation(f"{self.pdp_id} does not support {mode.value}")
        if mode is ReloadMode.UPDATE:
            if not isinstance(change, PolicyDelta):
                raise TypeError("Update mode requires a PolicyDelta")
            kind = change.kind
            new = apply_delta(self.policies[kind], change)
        else:
            if not isinstance(change, Policy):
                raise TypeError("Redeploy mode requires a whole Policy")
            kind = change.kind
            new = change
        diags = lint(new, self.vocabulary)
        if has_errors(diags):
            raise InvalidPolicy(f"policy {new.policy_id} v{new.version} fails lint", diags)
        old = self.policies[kind]
        self.policies[kind] = new
        if mode is ReloadMode.REDEPLOY and pdp.restart_downtime > 0:
            self.pdp_down_until = max(self.pdp_down_until, clock + pdp.restart_downtime)
            self.availability_events.append((clock, self.pdp_id, "restart"))
            downtime = (clock, clock + pdp.restart_downtime)
        else:
            downtime = (clock, clock)
        logger.info("%s %s: %s -> %s", mode.value, kind.value, old.digest[:12], new.digest[:12])
        return ReloadReport(mode, kind, old.digest, new.digest, downtime)

    def pap_update(self, delta: PolicyDelta, clock: float, actor: str, action: str) -> ReloadReport:
        """A sanctioned administrative change; recorded so the controller can refresh its models."""
        report = self.reload_policy(delta, ReloadMode.UPDATE, clock)
        self.admin_events.append(AdminEvent(clock, actor, action, "applied",
                                            {"kind": delta.kind.value, "digest": report.new_digest}))
        return report

    def tamper_policy(self, policy: Policy) -> None:
        """Swap a policy in without going through the administration point."""
        self.policies[policy.kind] = policy

    def policy_digests(self) -> dict[str, str]:
        return {f"{self.pdp_id}:{k.value}": p.digest for k, p in sorted(self.policies.items(), key=lambda kv: kv[0].value)}

    def topology_fingerprint(self) -> str:
        payload = {
            "components": sorted([c.component_id, c.kind.value, c.owner] for c in self.components.values()),
            "idps": sorted(self.idps),
            "parties": sorted(self.parties),
        }
        return hashlib.sha256(canonical_json(payload).encode()).hexdigest()

    def state_digest(self) -> str:
        """Digest over everything a checkpoint restores."""
        payload = {
            "policies": self.policy_digests(),
            "quotas": {qid: q.to_dict() for qid, q in sorted(self.quotas.items())},
            "credential_flags": {
                f"{i.idp_id}:{s}": sorted(f) for i in self.idps.values()
                for s, f in sorted(i.credential_flags.items()) if f
            },
            "fallbacks": sorted(list(f) for f in self.fallbacks),
            "bans": {p: (None if math.isinf(t) else t) for p, t in sorted(self.bans.items())},
        }
        return hashlib.sha256(canonical_json(payload).encode()).hexdigest()

    def capture(self) -> dict:
        return {
            "policies": dict(self.policies),
            "quotas": dict(self.quotas),
            "credential_flags": {i.idp_id: {s: set(f) for s, f in i.credential_flags.items()}
                                 for i in self.idps.values()},
            "fallbacks": set(self.fallbacks),
            "bans": dict(self.bans),
        }

    def restore(self, captured: Mapping[str, Any]) -> None:
        """Put back captured policies, quotas, credential flags, fallbacks and bans.

        Captured policies were live (and lint-clean) before, so they are swapped
        back in place without a restart.  Terminated sessions stay terminated.
        """
        self.policies = dict(captured["policies"])
        self.quotas = dict(captured["quotas"])
        for idp_id, flags in captured["credential_flags"].items():
            table = self.idps[idp_id].credential_flags
            table.clear()
            for s, f in flags.items():
                table[s] = set(f)
        self.fallbacks = set(captured["fallbacks"])
        self.bans = dict(captured["bans"])

    # ----------------------------------------------------------------- quota
    def quota_in_force(self, party: str, resource: str, action: str) -> QuotaGrant | None:
        """The grant referenced by the access-control rule currently governing this triple."""
        policy = self.policies[PolicyKind.ACCESS_CONTROL]
        for rule in policy.ordered_rules:
            if rule.condition and rule.condition.quota_ref:
                q = self.quotas.get(rule.condition.quota_ref)
                if q and (q.party_id, q.resource_id, q.action) == (party, resource, action):
                    return q
        return None

    def register_quota(self, grant: QuotaGrant) -> None:
        self.quotas[grant.quota_id] = grant

    # ----------------------------------------------------------------- trust
    def adjust_trust(self, party_id: str, event: ComplianceEvent) -> TrustRecord:
        self._require_party(party_id)
        rec = self.trust[party_id]
        before = rec.trust
        delta = self.trust_params.reward if event.met else -self.trust_params.penalty
        rec.trust = min(1.0, max(0.0, round(before + delta, 12)))
        rec.compliance_history.append(event)
        thr = self.trust_params.ban_threshold
        if before >= thr > rec.trust:
            self.ban_party(party_id, self.trust_params.ban_duration)
        return rec

    def ban_party(self, party_id: str, duration: float | None = None, clock: float | None = None) -> None:
        """Ban for ``duration`` seconds from ``clock``; ``None`` means permanently."""
        self._require_party(party_id)
        clock = self.clock if clock is None else clock
        self.bans[party_id] = math.inf if duration is None else clock + duration
        logger.info("banned %s until %s", party_id, self.bans[party_id])

    def lift_ban(self, party_id: str) -> None:
        self.bans.pop(party_id, None)

    # --------------------------------------------------- requests to IdPs
    def request_idp_action(self, idp_id: str, subject_id: str, action: str, clock: float,
                           deadline: float) -> IdPRequest:
        if idp_id not in self.idps:
            raise UnknownParty(idp_id)
        comp = self.components.get(idp_id)
        if self.is_banned(idp_id, clock) or (comp is not None and not comp.available):
            raise IdPUnavailable(idp_id)
        req = IdPRequest(self._next_request_id("idp"), idp_id, subject_id, action, clock, deadline)
        self.idp_requests[req.request_id] = req
        return req

    def process_idp_requests(self, clock: float) -> None:
        """Let identity services act on pending requests according to their scripted behaviour."""
        for req in self.idp_requests.values():
            if req.complied_at is not None or req.cancelled:
                continue
            idp = self.idps[req.idp_id]
            if idp.compliance_mode != "honour":
                continue
            due = req.issued_at + idp.compliance_delay
            if due <= clock:
                req.complied_at = due
                if req.action == "suspend":
                    idp.credential_flags[req.subject_id].add("suspended")

    # --------------------------------------------------------------- console
    def console_action(self, subject_id: str, action: str, origin: Origin, clock: float,
                       params: Mapping[str, Any] | None = None) -> Decision:
        """An administration-console request; only the access-control policy decides who may use it."""
        self.observe(clock)
        params = dict(params or {})
        party = self._party_of(subject_id)
        subject = {"id": frozenset({subject_id})}
        if party:
            subject["party"] = frozenset({party})
        rid = self._next_request_id("console")
        policy = self.policies[PolicyKind.ACCESS_CONTROL]
        if not self.pdp_available(clock):
            decision = Decision(Effect.DENY, None, policy.version, (PDP_UNAVAILABLE,))
        else:
            request = AccessRequest(subject, "console", action, {"zone": origin.zone, "geo": origin.geo}, rid)
            decision = evaluate(request, self.policies, _PIPView(self, clock))
        self._append(AccessLogEntry(clock, rid, subject_id, None, "console", action, decision.outcome.value,
                                    decision.matched_rule, origin, party_id=party))
        if decision.permitted:
            self._console_effect(subject_id, action, params, clock)
        self.admin_events.append(AdminEvent(clock, subject_id, f"console:{action}", decision.outcome.value, params))
        return decision

    def _console_effect(self, subject_id: str, action: str, params: dict, clock: float) -> None:
        target = params.get("subject", subject_id)
        if action == "reset-password":
            self.clear_credential_flag(target, "reset-required")
        elif action == "strict-protocol":
            self.clear_credential_flag(target, "strict-protocol")
        elif action in ("subscribe", "unsubscribe"):
            name = params["service"]
            rules = self.subscriptions[name]
            policy = self.policies[PolicyKind.ACCESS_CONTROL]
            present = {r.rule_id for r in policy.rules}
            if action == "subscribe":
                delta = PolicyDelta(policy.version, add=tuple(r for r in rules if r.rule_id not in present))
            else:
                delta = PolicyDelta(policy.version, remove=tuple(r.rule_id for r in rules if r.rule_id in present))
            if not delta.is_empty():
                self.pap_update(delta, clock, subject_id, action)

    # --------------------------------------------------------- environment
    def set_component_available(self, component_id: str, available: bool) -> None:
        self.components[component_id].available = available

    def snapshot_view(self) -> dict:
        """Read-only summary for reports."""
        return {
            "policies": self.policy_digests(),
            "sessions": {sid: s.status.value for sid, s in sorted(self.sessions.items())},
            "trust": {p: r.trust for p, r in sorted(self.trust.items())},
            "bans": {p: (None if math.isinf(t) else t) for p, t in sorted(self.bans.items())},
            "quotas": {qid: q.to_dict() for qid, q in sorted(self.quotas.items())},
        }


def replace_session(session: Session, **changes) -> Session:
    return replace(session, **changes)
