"""Transactional plan runner and the built-in effectors.

A plan runs activity by activity.  Each activity tries its alternatives in
order; when all of them fail, completed mutating activities are compensated in
reverse order and the plan ends RolledBack.  The runner never raises past
itself: every failure ends up in the report.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

from .errors import SaazError, UnknownCheckpoint, UnknownEffector, UnknownTemplate
from .infrastructure import ComplianceEvent, Infrastructure, IdPRequest, Origin, ReloadMode, Session, \
    SessionStatus
from .knowledge import KnowledgeBase
from .plan import ROLLBACK, AbstractPlan, Activity, Binding, ProbeSpec, Rollback
from .policy import Condition, Effect, Policy, PolicyDelta, PolicyKind, QuotaGrant, Rule, apply_delta, make_rule, \
    widens_access

logger = logging.getLogger(__name__)


class Outcome(str, Enum):
    SUCCESS = "Success"
    FAILED = "Failed"
    PENDING = "PendingDeadline"


class Overall(str, Enum):
    SUCCEEDED = "Succeeded"
    ROLLED_BACK = "RolledBack"
    DEGRADED = "Degraded"


class VerifyVerdict(str, Enum):
    PASS = "Pass"
    FAIL = "Fail"


class BoundaryMode(str, Enum):
    DIRECT = "Direct"
    REQUEST_ONLY = "RequestOnly"


@dataclass(frozen=True)
class EffectorDescriptor:
    effector_id: str
    template: str
    target: str
    mode: BoundaryMode = BoundaryMode.DIRECT
    deadline: float | None = None


@dataclass(frozen=True)
class Checkpoint:
    checkpoint_id: str
    snapshot_id: int | None
    captured: Mapping[str, Any]
    digests: Mapping[str, str]
    state_digest: str
    measure_ids: frozenset
    clock: float


@dataclass(frozen=True)
class ActivityReport:
    goal: str
    alternative: int | None
    outcome: Outcome
    compensated: bool = False


@dataclass(frozen=True)
class ExecutionReport:
    plan_id: str
    activities: tuple[ActivityReport, ...]
    overall: Overall
    verification: VerifyVerdict | None
    elapsed: float
    checkpoint_id: str | None
    disruptive: bool
    effects: tuple[Mapping[str, Any], ...] = ()

    def to_dict(self) -> dict:
        return {
            "plan_id": self.plan_id,
            "overall": self.overall.value,
            "verification": self.verification.value if self.verification else None,
            "elapsed": self.elapsed,
            "disruptive": self.disruptive,
            "activities": [
                {"goal": a.goal, "alternative": a.alternative, "outcome": a.outcome.value,
                 "compensated": a.compensated}
                for a in self.activities
            ],
        }


@dataclass
class PendingRequest:
    request: IdPRequest
    party: str
    escalation: Mapping[str, Any] | None
    resolved: bool = False


@dataclass
class Notification:
    clock: float
    recipient: str
    message: str
    finding_id: str | None

    def to_dict(self) -> dict:
        return {"clock": self.clock, "recipient": self.recipient, "message": self.message,
                "finding_id": self.finding_id}


BUILTIN_EFFECTORS = (
    EffectorDescriptor("checkpoint", "checkpoint", "controller"),
    EffectorDescriptor("policy-update", "policy-update", "pdp"),
    EffectorDescriptor("policy-redeploy", "policy-redeploy", "pdp"),
    EffectorDescriptor("quota-update", "quota-update", "pdp"),
    EffectorDescriptor("session-terminate", "session-terminate", "pep"),
    EffectorDescriptor("session-amend", "session-amend", "pep"),
    EffectorDescriptor("credential-flag", "credential-flag", "idp"),
    EffectorDescriptor("idp-request", "idp-request", "idp", BoundaryMode.REQUEST_ONLY, 300.0),
    EffectorDescriptor("ban-idp", "ban-idp", "pap"),
    EffectorDescriptor("fallback-enable", "fallback-enable", "pep"),
    EffectorDescriptor("fallback-withdraw", "fallback-withdraw", "pep"),
    EffectorDescriptor("verify", "verify", "controller"),
    EffectorDescriptor("notify", "notify", "outbox"),
)
TEMPLATES = frozenset(d.template for d in BUILTIN_EFFECTORS)


def revoke_rule(policy: Policy, subject: str, clock: float, duration: float | None) -> Rule:
    window = (clock, clock + duration) if duration else None
    priority = max((r.priority for r in policy.rules), default=0) + 1
    existing = policy.rule(f"revoke-{subject}")
    if existing is not None:
        priority = existing.priority
    return make_rule(f"revoke-{subject}", Effect.DENY, priority,
                     Condition(time_window=window) if window else None, subject=[("id", "eq", subject)])


def console_local_rule(policy: Policy) -> Rule:
    existing = policy.rule("console-remote-deny")
    priority = existing.priority if existing else max((r.priority for r in policy.rules), default=0) + 1
    return make_rule("console-remote-deny", Effect.DENY, priority,
                     resource=[("id", "eq", "console")], environment=[("zone", "eq", "remote")])


def _upsert(policy: Policy, rule: Rule) -> PolicyDelta:
    if policy.rule(rule.rule_id) is not None:
        return PolicyDelta(policy.version, replace=(rule,))
    return PolicyDelta(policy.version, add=(rule,))


def quota_rule_swap(policy: Policy, from_ref: str, to_ref: str) -> PolicyDelta:
    """Point every rule bound to quota ``from_ref`` at ``to_ref`` instead."""
    changed = []
    for rule in policy.rules:
        cond = rule.condition
        if cond is not None and cond.quota_ref == from_ref:
            changed.append(Rule(rule.rule_id, rule.effect, rule.priority, rule.target,
                                Condition(cond.time_window, cond.origin, to_ref)))
    if not changed:
        raise SaazError(f"no rule references quota {from_ref}")
    return PolicyDelta(policy.version, replace=tuple(changed))


class Executor:
    def __init__(self, infra: Infrastructure, knowledge: KnowledgeBase | None = None, *,
                 outbox_path: str | Path | None = None, deadline: float = 300.0):
        self.infra = infra
        self.knowledge = knowledge
        self.outbox: list[Notification] = []
        self.outbox_path = Path(outbox_path) if outbox_path else None
        self.default_deadline = deadline
        self.effectors: dict[str, EffectorDescriptor] = {d.effector_id: d for d in BUILTIN_EFFECTORS}
        self.checkpoints: dict[str, Checkpoint] = {}
        self.pending: list[PendingRequest] = []
        self.compliance_events: list[tuple[str, ComplianceEvent]] = []
        self.compensation_log: list[tuple[str, int]] = []
        self._faults: dict[tuple[int, int | None], str] = {}
        self._ids = itertools.count(1)
        self._current_finding: str | None = None

    # ---------------------------------------------------------- registry
    def deploy_effector(self, template_id: str, parameters: Mapping[str, Any] | None = None) -> EffectorDescriptor:
        if template_id not in TEMPLATES:
            raise UnknownTemplate(template_id)
        params = dict(parameters or {})
        mode = BoundaryMode(params.get("mode", "Direct"))
        deadline = params.get("deadline")
        if mode is BoundaryMode.REQUEST_ONLY and deadline is None:
            deadline = self.default_deadline
        desc = EffectorDescriptor(params.get("id", f"{template_id}-{next(self._ids)}"), template_id,
                                  params.get("target", "pdp"), mode, deadline)
        self.effectors[desc.effector_id] = desc
        return desc

    def withdraw_effector(self, effector_id: str) -> None:
        if effector_id not in self.effectors:
            raise UnknownEffector(effector_id)
        del self.effectors[effector_id]

    # ------------------------------------------------------ fault hooks
    def inject(self, activity: int, alternative: int | None = None, mode: str = "fail") -> None:
        """Make an alternative (or all of an activity's alternatives) fail, or succeed without effect."""
        if mode not in ("fail", "noop"):
            raise ValueError(mode)
        self._faults[(activity, alternative)] = mode

    def clear_faults(self) -> None:
        self._faults.clear()

    def _fault(self, activity: int, alternative: int) -> str | None:
        return self._faults.get((activity, alternative)) or self._faults.get((activity, None))

    # ---------------------------------------------------- checkpointing
    def checkpoint(self, clock: float) -> Checkpoint:
        snap = self.knowledge.snapshot(self.infra, clock) if self.knowledge else None
        measures = frozenset(self.knowledge.measures) if self.knowledge else frozenset()
        cp = Checkpoint(f"C{next(self._ids)}", snap.snapshot_id if snap else None, self.infra.capture(),
                        self.infra.policy_digests(), self.infra.state_digest(), measures, clock)
        self.checkpoints[cp.checkpoint_id] = cp
        return cp

    def rollback(self, checkpoint_id: str) -> None:
        cp = self.checkpoints.get(checkpoint_id)
        if cp is None:
            raise UnknownCheckpoint(checkpoint_id)
        self.infra.restore(cp.captured)
        if self.knowledge is not None:
            for mid in [m for m in self.knowledge.measures if m not in cp.measure_ids]:
                del self.knowledge.measures[mid]
            for component, digest in cp.digests.items():
                self.knowledge.expect_digest(component, digest)

    # --------------------------------------------------------- effectors
    def apply_policy_change(self, change: PolicyDelta | Policy, mode: ReloadMode, clock: float
                            ) -> tuple[Outcome, tuple[float, float] | None, str | None]:
        try:
            report = self.infra.reload_policy(change, mode, clock)
        except (SaazError, TypeError) as exc:
            logger.info("policy change failed (%s): %s", mode.value, exc)
            return Outcome.FAILED, None, str(exc)
        if self.knowledge is not None:
            self.knowledge.expect_digest(f"{self.infra.pdp_id}:{report.kind.value}", report.new_digest)
        return Outcome.SUCCESS, report.downtime, None

    def handle_sessions(self, subjects: Iterable[str], mode: str = "TerminateAll",
                        attributes: Iterable[tuple[str, Any]] = ()) -> list[Session]:
        updated = []
        attrs = tuple(attributes)
        for subject in subjects:
            sessions = self.infra.sessions_of(subject)
            if not sessions:
                logger.info("no open sessions for %s", subject)
            for s in sessions:
                if mode == "TerminateAll":
                    updated.append(self.infra.terminate_session(s.session_id))
                else:
                    updated.append(self.infra.amend_session(s.session_id, attrs))
        return updated

    def empty_readings_fallback(self, party: str, resource: str) -> Outcome:
        if not any(q.party_id == party and q.resource_id == resource for q in self.infra.quotas.values()):
            return Outcome.FAILED
        self.infra.fallbacks.add((party, resource))
        return Outcome.SUCCESS

    def withdraw_fallback(self, party: str, resource: str) -> Outcome:
        self.infra.fallbacks.discard((party, resource))
        return Outcome.SUCCESS

    def notify(self, recipient: str, message: str, clock: float, finding_id: str | None = None) -> Outcome:
        note = Notification(clock, recipient, message, finding_id)
        self.outbox.append(note)
        if self.outbox_path is not None:
            with self.outbox_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(note.to_dict(), sort_keys=True) + "\n")
        return Outcome.SUCCESS

    def verify(self, probe: ProbeSpec | None, clock: float) -> VerifyVerdict:
        if probe is None:
            return VerifyVerdict.PASS
        decision = self.infra.probe_decision(probe.subject, probe.resource, probe.action,
                                             Origin(probe.zone, probe.geo), clock, probe.counter_override)
        return VerifyVerdict.FAIL if decision.permitted else VerifyVerdict.PASS

    def _quota_limits(self) -> dict[str, tuple[int, float]]:
        return {q.quota_id: (q.max_count, q.window) for q in self.infra.quotas.values()}

    def _policy_delta(self, change: Mapping[str, Any], clock: float) -> PolicyDelta:
        policy = self.infra.active_policy()
        op = change["op"]
        if op == "revoke":
            return _upsert(policy, revoke_rule(policy, change["subject"], clock, change.get("duration")))
        if op == "console-local":
            return _upsert(policy, console_local_rule(policy))
        if op == "remove-rule":
            return PolicyDelta(policy.version, remove=(change["rule_id"],))
        if op == "quota-swap":
            return quota_rule_swap(policy, change["from"], change["to"])
        raise ValueError(f"unknown policy change {op!r}")

    def _change_policy(self, change: Mapping[str, Any], mode: ReloadMode, clock: float, state: dict,
                       forward: bool = True) -> Outcome:
        try:
            delta = self._policy_delta(change, clock)
        except SaazError as exc:
            logger.info("cannot build delta: %s", exc)
            return Outcome.FAILED
        # responses may only narrow access; lifting a measure is exempt
        wider = []
        if forward:
            wider = widens_access(self.infra.active_policy(delta.kind), delta, self._quota_limits(), clock)
        if wider:
            logger.warning("refusing %s: it would widen access via %s", change["op"], ", ".join(wider))
            return Outcome.FAILED
        if mode is ReloadMode.UPDATE:
            outcome, downtime, _ = self.apply_policy_change(delta, mode, clock)
        else:
            try:
                whole = apply_delta(self.infra.active_policy(delta.kind), delta)
            except SaazError:
                return Outcome.FAILED
            outcome, downtime, _ = self.apply_policy_change(whole, mode, clock)
        if outcome is Outcome.SUCCESS and downtime is not None and downtime[1] > downtime[0]:
            state["disruptive"] = True
            state["elapsed"] = max(state["elapsed"], downtime[1] - downtime[0])
        return outcome

    def invoke_effector(self, descriptor: EffectorDescriptor | str, payload: Mapping[str, Any], clock: float,
                        state: dict | None = None) -> Outcome:
        if isinstance(descriptor, str):
            if descriptor not in self.effectors:
                raise UnknownEffector(descriptor)
            descriptor = self.effectors[descriptor]
        state = state if state is not None else {"disruptive": False, "elapsed": 0.0, "effects": []}
        t = descriptor.template
        p = payload
        try:
            if t == "checkpoint":
                state["checkpoint"] = self.checkpoint(clock)
                return Outcome.SUCCESS
            if t in ("policy-update", "policy-redeploy"):
                mode = ReloadMode.UPDATE if t == "policy-update" else ReloadMode.REDEPLOY
                outcome = self._change_policy(p, mode, clock, state)
                if outcome is Outcome.SUCCESS and p["op"] == "revoke":
                    state["effects"].append({"kind": "revoke", "subject": p["subject"], "liftable": False,
                                             "restore": {"op": "remove-rule", "rule_id": f"revoke-{p['subject']}"}})
                elif outcome is Outcome.SUCCESS and p["op"] == "console-local":
                    state["effects"].append({"kind": "console-local", "liftable": False,
                                             "restore": {"op": "remove-rule", "rule_id": "console-remote-deny"}})
                return outcome
            if t == "quota-update":
                grant: QuotaGrant = p["grant"]
                original = p["original"]
                mode = ReloadMode(p.get("mode", ReloadMode.UPDATE.value))
                self.infra.register_quota(grant)
                outcome = self._change_policy({"op": "quota-swap", "from": original, "to": grant.quota_id},
                                              mode, clock, state)
                if outcome is not Outcome.SUCCESS:
                    self.infra.quotas.pop(grant.quota_id, None)
                    return outcome
                state["effects"].append({"kind": "quota", "liftable": True,
                                         "restore": {"op": "quota-swap", "from": grant.quota_id, "to": original,
                                                     "drop": grant.quota_id}})
                return outcome
            if t == "session-terminate":
                affected = self.handle_sessions([p["subject"]], "TerminateAll")
                if affected:
                    state["disruptive"] = True
                return Outcome.SUCCESS
            if t == "session-amend":
                self.handle_sessions([p["subject"]], "Amend", p.get("attributes", ()))
                return Outcome.SUCCESS
            if t == "credential-flag":
                if self.infra.idp_of(p["subject"]) is None:
                    return Outcome.FAILED
                self.infra.set_credential_flag(p["subject"], p["flag"])
                return Outcome.SUCCESS
            if t == "idp-request":
                deadline = clock + float(p.get("deadline") or descriptor.deadline or self.default_deadline)
                req = self.infra.request_idp_action(p["idp"], p["subject"], p["action"], clock, deadline)
                party = self.infra.idps[p["idp"]].owner
                self.pending.append(PendingRequest(req, party, p.get("escalation")))
                return Outcome.PENDING
            if t == "ban-idp":
                self.infra.ban_party(p["idp"], p.get("duration"), clock)
                return Outcome.SUCCESS
            if t == "fallback-enable":
                outcome = self.empty_readings_fallback(p["party"], p["resource"])
                if outcome is Outcome.SUCCESS:
                    state["effects"].append({"kind": "fallback", "liftable": True,
                                             "restore": {"op": "fallback-withdraw", "party": p["party"],
                                                         "resource": p["resource"]}})
                return outcome
            if t == "fallback-withdraw":
                return self.withdraw_fallback(p["party"], p["resource"])
            if t == "verify":
                verdict = self.verify(p.get("probe"), clock)
                state["verification"] = verdict
                return Outcome.SUCCESS if verdict is VerifyVerdict.PASS else Outcome.FAILED
            if t == "notify":
                return self.notify(p["recipient"], p["message"], clock, state.get("finding_id"))
        except SaazError as exc:
            logger.info("effector %s failed: %s", descriptor.effector_id, exc)
            return Outcome.FAILED
        raise UnknownEffector(descriptor.effector_id)

    # ------------------------------------------------------------ runner
    def run(self, plan: AbstractPlan, clock: float, finding_id: str | None = None) -> ExecutionReport:
        state: dict[str, Any] = {"disruptive": False, "elapsed": 0.0, "effects": [], "finding_id": finding_id}
        reports: list[ActivityReport] = []
        done: list[tuple[int, Activity]] = []
        overall = Overall.DEGRADED if plan.degraded else Overall.SUCCEEDED
        for i, act in enumerate(plan.activities):
            used = None
            for j, binding in enumerate(act.alternatives):
                fault = self._fault(i, j)
                if fault == "fail":
                    continue
                if fault == "noop":
                    outcome = Outcome.SUCCESS
                else:
                    outcome = self.invoke_effector(binding.effector, binding.payload, clock, state)
                if outcome is not Outcome.FAILED:
                    used = j
                    break
            if used is None:
                reports.append(ActivityReport(act.goal, None, Outcome.FAILED))
                if act.kind == "verify" and "verification" not in state:
                    state["verification"] = VerifyVerdict.FAIL
                compensated = self._compensate(plan, done, state, clock)
                reports = [ActivityReport(r.goal, r.alternative, r.outcome, r.compensated or k in compensated)
                           for k, r in enumerate(reports)]
                overall = Overall.ROLLED_BACK
                state["effects"] = []
                break
            reports.append(ActivityReport(act.goal, used, Outcome.SUCCESS))
            if act.mutating:
                done.append((i, act))
        return ExecutionReport(plan.plan_id, tuple(reports), overall, state.get("verification"), state["elapsed"],
                               state["checkpoint"].checkpoint_id if "checkpoint" in state else None,
                               state["disruptive"], tuple(state["effects"]))

    def _compensate(self, plan: AbstractPlan, done: list[tuple[int, Activity]], state: dict,
                    clock: float) -> set[int]:
        compensated = set()
        cp: Checkpoint | None = state.get("checkpoint")
        for i, act in reversed(done):
            comp = act.compensation
            if isinstance(comp, Rollback):
                if cp is not None:
                    self.rollback(cp.checkpoint_id)
            elif isinstance(comp, Binding):
                self.invoke_effector(comp.effector, comp.payload, clock, {"disruptive": False, "elapsed": 0.0,
                                                                          "effects": []})
            self.compensation_log.append((plan.plan_id, i))
            compensated.add(i)
        if cp is not None and done:
            # alternatives that failed midway may have left partial changes
            self.rollback(cp.checkpoint_id)
        return compensated

    # ----------------------------------------------------- lifting measures
    def lift(self, restore: Mapping[str, Any], clock: float) -> Outcome:
        op = restore["op"]
        if op == "fallback-withdraw":
            return self.withdraw_fallback(restore["party"], restore["resource"])
        state = {"disruptive": False, "elapsed": 0.0, "effects": []}
        outcome = self._change_policy(restore, ReloadMode.UPDATE, clock, state, forward=False)
        if outcome is Outcome.FAILED:
            outcome = self._change_policy(restore, ReloadMode.REDEPLOY, clock, state, forward=False)
        if outcome is Outcome.SUCCESS and restore.get("drop"):
            self.infra.quotas.pop(restore["drop"], None)
        return outcome

    # --------------------------------------------------- RequestOnly feedback
    def poll_pending(self, clock: float) -> list[tuple[str, ComplianceEvent]]:
        """Close pending identity-service requests that complied or ran past their deadline."""
        events = []
        for pend in self.pending:
            if pend.resolved:
                continue
            req = pend.request
            if req.complied_at is not None and req.complied_at <= req.deadline:
                event = ComplianceEvent(req.request_id, req.deadline, True)
            elif clock >= req.deadline:
                event = ComplianceEvent(req.request_id, req.deadline, False)
            else:
                continue
            pend.resolved = True
            self.infra.adjust_trust(pend.party, event)
            if not event.met and pend.escalation:
                esc = pend.escalation
                self.infra.ban_party(esc["idp"], esc.get("duration"), clock)
                logger.warning("%s missed deadline for %s; banned %s", pend.party, req.request_id, esc["idp"])
            events.append((pend.party, event))
        self.compliance_events.extend(events)
        return events


def outbox_lines(notes: Iterable[Notification]) -> str:
    return "".join(json.dumps(n.to_dict(), sort_keys=True) + "\n" for n in notes)


