"""Response planning: option enumeration, feasibility, ranking, seeded
selection within a tie band, the disruption guard, quota negotiation and
synthesis of abstract plans with alternatives and compensations.
"""

from __future__ import annotations

import hashlib
import logging
import random
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from typing import Any, Iterable, Mapping, Sequence

from .analyse import Classification, Diagnosis, Finding, RiskScore
from .errors import EmptyList, InfeasibleOption, PreconditionViolation
from .infrastructure import ReloadMode
from .policy import QuotaGrant

logger = logging.getLogger(__name__)


class OptionTemplate(str, Enum):
    REVOKE_CREDENTIALS = "RevokeCredentials"
    REDUCE_QUOTA = "ReduceQuota"
    TERMINATE_SESSIONS = "TerminateSessions"
    AMEND_SESSION = "AmendSession"
    REQUIRE_STRICT_PROTOCOL = "RequireStrictProtocol"
    RESTRICT_CONSOLE_TO_LOCAL = "RestrictConsoleToLocal"
    BAN_IDP = "BanIdP"
    EMPTY_READINGS_FALLBACK = "EmptyReadingsFallback"
    NOTIFY_USERS = "NotifyUsers"


POLICY_CHANGING = frozenset({
    OptionTemplate.REVOKE_CREDENTIALS,
    OptionTemplate.REDUCE_QUOTA,
    OptionTemplate.REQUIRE_STRICT_PROTOCOL,
    OptionTemplate.RESTRICT_CONSOLE_TO_LOCAL,
})
TERMINATING = frozenset({OptionTemplate.TERMINATE_SESSIONS, OptionTemplate.REQUIRE_STRICT_PROTOCOL})


class Controllability(str, Enum):
    DIRECT = "Direct"
    REQUEST_ONLY = "RequestOnly"
    NONE = "None"


@dataclass(frozen=True)
class PartyBoundary:
    observable: bool
    controllable: Controllability
    idp: str | None = None


@dataclass(frozen=True)
class BoundaryMap:
    parties: Mapping[str, PartyBoundary]

    def of(self, party: str | None) -> PartyBoundary:
        return self.parties.get(party, PartyBoundary(False, Controllability.NONE))


@dataclass(frozen=True)
class EffectorCapability:
    component_kinds: frozenset
    operations: frozenset
    owner: str


@dataclass(frozen=True)
class CapabilityRegistry:
    effectors: Mapping[str, EffectorCapability]

    def policy_operations(self) -> frozenset:
        ops = set()
        for cap in self.effectors.values():
            if "PDP" in cap.component_kinds:
                ops |= cap.operations
        return frozenset(ops)


@dataclass(frozen=True)
class CatalogEntry:
    template: OptionTemplate
    classes: frozenset
    effectiveness: float
    cost: float
    params: Mapping[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: Mapping) -> "CatalogEntry":
        return cls(OptionTemplate(data["template"]), frozenset(data["classes"]), float(data["effectiveness"]),
                   float(data["cost"]), dict(data.get("params", {})))


@dataclass(frozen=True)
class ResponseOption:
    option_id: str
    template: OptionTemplate
    party: str | None
    subject: str | None
    effectiveness: float
    cost: float
    params: Mapping[str, Any] = field(default_factory=dict)
    request_mediated: bool = False
    modes: tuple[ReloadMode, ...] = (ReloadMode.UPDATE, ReloadMode.REDEPLOY)

    def __post_init__(self):
        if not 0.0 <= self.effectiveness <= 1.0:
            raise ValueError("effectiveness outside [0, 1]")
        if self.cost < 0:
            raise ValueError("cost must be non-negative")

    @property
    def disruptive(self) -> bool:
        """Whether carrying the option out may cost downtime or end sessions."""
        if self.template in TERMINATING:
            return True
        return self.template in POLICY_CHANGING and ReloadMode.UPDATE not in self.modes


@dataclass(frozen=True)
class ScoredOption:
    option: ResponseOption
    score: float


@dataclass(frozen=True)
class Feasibility:
    ok: bool
    reason: str
    modes: tuple[ReloadMode, ...] = ()
    request_mediated: bool = False

    def __bool__(self) -> bool:
        return self.ok


def enumerate_options(finding: Finding, diagnosis: Diagnosis | None, catalog: Iterable[CatalogEntry],
                      pattern: Mapping[str, Any] | None = None) -> list[ResponseOption]:
    if finding.classification.rank < Classification.SUSPICIOUS.rank:
        raise PreconditionViolation("legitimate findings do not warrant a response")
    subject = finding.subject
    out = []
    for entry in catalog:
        if finding.threat_class not in entry.classes:
            continue
        params = dict(entry.params)
        if pattern:
            params.setdefault("pattern", dict(pattern))
        if diagnosis is not None:
            params.setdefault("entry_session", diagnosis.entry_session)
        out.append(ResponseOption(f"{finding.finding_id}:{entry.template.value}", entry.template, finding.party,
                                  subject, entry.effectiveness, entry.cost, params))
    return out


def feasible(option: ResponseOption, capabilities: CapabilityRegistry, boundary: BoundaryMap) -> Feasibility:
    pb = boundary.of(option.party)
    if option.template is OptionTemplate.NOTIFY_USERS:
        return Feasibility(True, "notification only")
    if pb.controllable is Controllability.NONE:
        return Feasibility(False, f"{option.party} is outside our sphere of influence")
    modes: tuple[ReloadMode, ...] = ()
    reason = "direct"
    if option.template in POLICY_CHANGING:
        ops = capabilities.policy_operations()
        modes = tuple(m for m in (ReloadMode.UPDATE, ReloadMode.REDEPLOY) if m in ops)
        if not modes:
            return Feasibility(False, "no effector can change the decision point's policy")
        if ReloadMode.UPDATE not in modes:
            reason = "policy change only via redeploy with restart"
    mediated = (option.template is OptionTemplate.REVOKE_CREDENTIALS
                and pb.controllable is Controllability.REQUEST_ONLY)
    if mediated:
        reason = "request-mediated through the party's identity service"
    return Feasibility(True, reason, modes, mediated)


def rank(options: Iterable[ResponseOption], risk: RiskScore) -> list[ScoredOption]:
    scored = [ScoredOption(o, risk.risk * o.effectiveness - o.cost) for o in options]
    return sorted(scored, key=lambda s: (-s.score, s.option.option_id))


def derive_seed(*parts: Any) -> int:
    text = "\x1f".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big")


def tie_band(scored: Sequence[ScoredOption], epsilon: float) -> list[ScoredOption]:
    if not scored:
        raise EmptyList("no options to choose from")
    top = max(s.score for s in scored)
    return [s for s in scored if s.score >= top - epsilon]


def select(scored: Sequence[ScoredOption], epsilon: float, seed: int) -> ResponseOption:
    band = tie_band(scored, epsilon)
    return band[random.Random(seed).randrange(len(band))].option


# ---------------------------------------------------------------- DoS guard
class GuardDecision(str, Enum):
    ALLOW = "Allow"
    DEFER = "Defer"
    DEGRADED = "DegradedMode"


@dataclass(frozen=True)
class DosParams:
    capacity: int = 3
    refill: float = 1.0
    window: float = 3600.0


def bucket_tokens(history: Iterable[float], clock: float, params: DosParams) -> Fraction:
    """Tokens left at ``clock`` after replaying disruptive adaptations at ``history``."""
    cap = Fraction(params.capacity)
    rate = Fraction(params.refill) / Fraction(params.window)
    tokens = cap
    prev = None
    for t in sorted(history):
        if t > clock:
            break
        if prev is not None:
            tokens = min(cap, tokens + (Fraction(t) - Fraction(prev)) * rate)
        tokens -= 1
        prev = t
    if prev is not None:
        tokens = min(cap, tokens + (Fraction(clock) - Fraction(prev)) * rate)
    return tokens


def dos_guard(history: Iterable[float], clock: float, classification: Classification,
              params: DosParams = DosParams()) -> GuardDecision:
    if bucket_tokens(history, clock, params) >= 1:
        return GuardDecision.ALLOW
    if classification is Classification.THREAT:
        return GuardDecision.DEGRADED
    return GuardDecision.DEFER


# -------------------------------------------------------------- negotiation
class NegotiationStatus(str, Enum):
    PROPOSED = "Proposed"
    COUNTERED = "Countered"
    AGREED = "Agreed"
    FAILED = "Failed"


@dataclass(frozen=True)
class NegotiationProposal:
    proposer: str
    counterparty: str
    grant: QuotaGrant
    round: int
    status: NegotiationStatus


@dataclass(frozen=True)
class NegotiationResult:
    status: NegotiationStatus
    grant: QuotaGrant | None
    transcript: tuple[NegotiationProposal, ...]

    @property
    def agreed(self) -> bool:
        return self.status is NegotiationStatus.AGREED


def _nearest(bounds: tuple[int, int], value: float) -> int:
    lo, hi = bounds
    return int(min(max(value, lo), hi))


def negotiate(template: QuotaGrant, proposer: str, counterparty: str, proposer_bounds: tuple[int, int],
              counter_bounds: tuple[int, int], max_rounds: int = 6) -> NegotiationResult:
    """Alternating offers over one scalar, the quota's ``max_count``.

    The proposer opens at its bound farthest from the counterparty.  Whoever
    receives an offer inside its own interval accepts, and the parties settle
    on the midpoint of the overlap (rounded down).  Otherwise the receiver
    counters with the point of its own interval nearest the offer.
    """
    for lo, hi in (proposer_bounds, counter_bounds):
        if lo > hi or lo < 0:
            raise ValueError(f"bad bounds {(lo, hi)}")
    parties = [(proposer, proposer_bounds), (counterparty, counter_bounds)]
    mid_other = (counter_bounds[0] + counter_bounds[1]) / 2
    offer = max(proposer_bounds, key=lambda b: (abs(b - mid_other), -b))
    transcript = []
    for rnd in range(1, max_rounds + 1):
        who, _ = parties[(rnd - 1) % 2]
        other, other_bounds = parties[rnd % 2]
        status = NegotiationStatus.PROPOSED if rnd == 1 else NegotiationStatus.COUNTERED
        transcript.append(NegotiationProposal(who, other, replace(template, max_count=offer), rnd, status))
        if other_bounds[0] <= offer <= other_bounds[1]:
            lo = max(proposer_bounds[0], counter_bounds[0])
            hi = min(proposer_bounds[1], counter_bounds[1])
            agreed = replace(template, max_count=(lo + hi) // 2)
            transcript.append(NegotiationProposal(proposer, counterparty, agreed, rnd, NegotiationStatus.AGREED))
            return NegotiationResult(NegotiationStatus.AGREED, agreed, tuple(transcript))
        offer = _nearest(other_bounds, offer)
    transcript.append(NegotiationProposal(proposer, counterparty, replace(template, max_count=offer), max_rounds,
                                          NegotiationStatus.FAILED))
    return NegotiationResult(NegotiationStatus.FAILED, None, tuple(transcript))


# ---------------------------------------------------------------- synthesis
class Rollback:
    """Compensation marker: undo by restoring the plan's checkpoint."""

    def __repr__(self) -> str:
        return "ROLLBACK"


ROLLBACK = Rollback()


@dataclass(frozen=True)
class Binding:
    effector: str
    payload: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class ProbeSpec:
    subject: str
    resource: str
    action: str
    zone: str = "local"
    geo: str = "EU"
    counter_override: int | None = None


@dataclass(frozen=True)
class Activity:
    goal: str
    alternatives: tuple[Binding, ...]
    compensation: Binding | Rollback | None = None
    mutating: bool = True
    post_check: ProbeSpec | None = None
    kind: str = "action"


@dataclass(frozen=True)
class AbstractPlan:
    plan_id: str
    option: ResponseOption
    activities: tuple[Activity, ...]
    offending: Mapping[str, Any] | None = None
    degraded: bool = False


def validate_plan(plan: AbstractPlan) -> None:
    if not plan.activities or plan.activities[0].kind != "checkpoint":
        raise ValueError(f"{plan.plan_id}: first activity must take a checkpoint")
    if not any(a.kind == "verify" for a in plan.activities):
        raise ValueError(f"{plan.plan_id}: no post-check")
    for act in plan.activities:
        if not act.alternatives:
            raise ValueError(f"{plan.plan_id}: activity {act.goal!r} has no alternatives")
        if act.mutating and act.compensation is None:
            raise ValueError(f"{plan.plan_id}: mutating activity {act.goal!r} lacks compensation")


def _policy_alternatives(change: Mapping[str, Any], modes: Sequence[ReloadMode]) -> tuple[Binding, ...]:
    effector = {ReloadMode.UPDATE: "policy-update", ReloadMode.REDEPLOY: "policy-redeploy"}
    return tuple(Binding(effector[m], change) for m in modes)


def synthesise(option: ResponseOption, capabilities: CapabilityRegistry, boundary: BoundaryMap,
               plan_id: str | None = None, degraded: bool = False) -> AbstractPlan:
    verdict = feasible(option, capabilities, boundary)
    if not verdict:
        raise InfeasibleOption(f"{option.option_id}: {verdict.reason}")
    modes = verdict.modes
    if degraded:
        modes = tuple(m for m in modes if m is ReloadMode.UPDATE)
        if option.template in POLICY_CHANGING and not modes:
            raise InfeasibleOption(f"{option.option_id}: no zero-downtime path in degraded mode")
        if option.template in TERMINATING:
            raise InfeasibleOption(f"{option.option_id}: ends sessions, not allowed in degraded mode")
    p = option.params
    pattern = p.get("pattern") or {}
    subject = option.subject or p.get("subject")
    pid = plan_id or f"P-{option.option_id}"
    acts: list[Activity] = [Activity("take checkpoint", (Binding("checkpoint"),), mutating=False, kind="checkpoint")]
    probe: ProbeSpec | None = None
    offending: dict[str, Any] | None = None
    t = option.template

    def who() -> dict:
        return {"subject_id": subject} if subject else {"party_id": option.party}

    if t is OptionTemplate.REVOKE_CREDENTIALS or t is OptionTemplate.REQUIRE_STRICT_PROTOCOL:
        target = subject or p.get("principal")
        if target is None:
            raise InfeasibleOption(f"{option.option_id}: no subject to revoke")
        duration = p.get("duration") if t is OptionTemplate.REVOKE_CREDENTIALS else None
        change = {"op": "revoke", "subject": target, "duration": duration}
        acts.append(Activity(f"revoke access of {target}", _policy_alternatives(change, modes), ROLLBACK))
        if t is OptionTemplate.REQUIRE_STRICT_PROTOCOL:
            acts.append(Activity("require strict re-credentialing",
                                 (Binding("credential-flag", {"subject": target, "flag": "strict-protocol"}),),
                                 ROLLBACK))
            acts.append(Activity("end open sessions", (Binding("session-terminate", {"subject": target}),),
                                 ROLLBACK))
        if verdict.request_mediated:
            idp = boundary.of(option.party).idp
            deadline = float(p.get("deadline", 300.0))
            acts.append(Activity(
                f"ask {idp} to suspend {target}",
                (Binding("idp-request", {"idp": idp, "subject": target, "action": "suspend", "deadline": deadline,
                                         "escalation": {"idp": idp, "duration": p.get("ban_duration", 86400.0)}}),
                 Binding("ban-idp", {"idp": idp, "duration": p.get("ban_duration", 86400.0)})),
                ROLLBACK))
        if pattern:
            probe = ProbeSpec(target, pattern["resource"], pattern["action"])
            offending = {"match": {"subject_id": target, "resource_id": pattern["resource"],
                                   "action": pattern["action"]}}
    elif t is OptionTemplate.REDUCE_QUOTA:
        grant = p["grant"]
        original = p.get("original")
        change = {"op": "quota", "grant": grant, "original": original}
        acts.append(Activity(f"enforce quota {grant.quota_id} ({grant.max_count}/{int(grant.window)}s)",
                             tuple(Binding("quota-update", {**change, "mode": m.value}) for m in modes), ROLLBACK))
        probe = ProbeSpec(p["probe_subject"], grant.resource_id, grant.action, counter_override=grant.max_count)
        offending = {"match": {"party_id": grant.party_id, "resource_id": grant.resource_id, "action": grant.action},
                     "max_count": grant.max_count, "window": grant.window}
    elif t is OptionTemplate.TERMINATE_SESSIONS:
        acts.append(Activity(f"terminate sessions of {subject}", (Binding("session-terminate", {"subject": subject}),),
                             ROLLBACK))
        acts.append(Activity("require password reset",
                             (Binding("credential-flag", {"subject": subject, "flag": "reset-required"}),), ROLLBACK))
        res, act = (pattern.get("resource"), pattern.get("action")) if pattern else ("history", "delete")
        probe = ProbeSpec(subject, res or "history", act or "delete", zone="remote",
                          geo=p.get("probe_geo", "EU"))
        offending = {"match": {"subject_id": subject, "resource_id": probe.resource, "action": probe.action}}
    elif t is OptionTemplate.AMEND_SESSION:
        attrs = tuple(tuple(a) for a in p.get("attributes", ()))
        acts.append(Activity(f"reduce privileges of {subject}",
                             (Binding("session-amend", {"subject": subject, "attributes": attrs}),), ROLLBACK))
        if pattern:
            probe = ProbeSpec(subject, pattern["resource"], pattern["action"])
            offending = {"match": {"subject_id": subject, "resource_id": pattern["resource"],
                                   "action": pattern["action"]}}
    elif t is OptionTemplate.RESTRICT_CONSOLE_TO_LOCAL:
        change = {"op": "console-local"}
        acts.append(Activity("restrict console to the local network", _policy_alternatives(change, modes), ROLLBACK))
        probe = ProbeSpec(subject or "couple", "console", "reset-password", zone="remote", geo="ASIA")
    elif t is OptionTemplate.BAN_IDP:
        idp = p.get("idp") or boundary.of(option.party).idp
        acts.append(Activity(f"ban {idp}", (Binding("ban-idp", {"idp": idp, "duration": p.get("duration")}),),
                             ROLLBACK))
        if pattern and subject:
            probe = ProbeSpec(subject, pattern["resource"], pattern["action"])
    elif t is OptionTemplate.EMPTY_READINGS_FALLBACK:
        resource = pattern.get("resource", "meter")
        acts.append(Activity(f"serve empty readings to {option.party}",
                             (Binding("fallback-enable", {"party": option.party, "resource": resource}),),
                             Binding("fallback-withdraw", {"party": option.party, "resource": resource})))
    acts.append(Activity("verify offending pattern denied", (Binding("verify", {"probe": probe}),),
                         mutating=False, post_check=probe, kind="verify"))
    acts.append(Activity("notify users", (Binding("notify", {
        "recipient": p.get("recipient", "household"),
        "message": f"{t.value} applied to {subject or option.party}",
    }),), mutating=False, kind="notify"))
    plan = AbstractPlan(pid, option, tuple(acts), offending, degraded)
    validate_plan(plan)
    return plan


def options_for_mode(scored: Sequence[ScoredOption], decision: GuardDecision) -> list[ScoredOption]:
    """Under the degraded guard only options that need neither downtime nor session ends remain."""
    if decision is not GuardDecision.DEGRADED:
        return list(scored)
    return [s for s in scored
            if s.option.template not in TERMINATING
            and (s.option.template not in POLICY_CHANGING or ReloadMode.UPDATE in s.option.modes)]


def with_modes(option: ResponseOption, verdict: Feasibility) -> ResponseOption:
    return replace(option, modes=verdict.modes or option.modes, request_mediated=verdict.request_mediated)


def quota_grant_for(original: QuotaGrant, max_count: int, suffix: str = "reduced") -> QuotaGrant:
    return replace(original, quota_id=f"{original.quota_id}-{suffix}", max_count=max_count)

