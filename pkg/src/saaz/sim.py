"""Deterministic discrete-event simulator of a smart-home energy management
deployment, used to drive the authorisation infrastructure and the
controller through scripted scenarios."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import random
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .config import config_digest, data_path, load_config, merge, validate
from .controller import Controller
from .errors import SaazError, UnknownScenario
from .execute import outbox_lines
from .infrastructure import (
    ComponentDescriptor,
    ComponentKind,
    IdentityService,
    Infrastructure,
    Origin,
    ReloadMode,
    SessionStatus,
    SubjectRecord,
    TrustParams,
)
from .plan import derive_seed
from .policy import AttributeAssertion, Policy, PolicyKind, QuotaGrant, Rule, canonical_json, load_policy

logger = logging.getLogger(__name__)

POLICY_FILES = {
    PolicyKind.ACCESS_CONTROL: "access-control.json",
    PolicyKind.CREDENTIAL_VALIDATION: "credential-validation.json",
    PolicyKind.ATTRIBUTE_RELEASE: "attribute-release.json",
    PolicyKind.DELEGATION_ISSUING: "delegation-issuing.json",
}


class ActorKind(str, Enum):
    APPLIANCE = "Appliance"
    DER = "DER"
    METER = "Meter"
    CPD_APP = "CPDApp"
    THIRD_PARTY = "ThirdPartyService"
    CIS = "CustomerInfoSystem"
    RETAILER = "EnergyRetailer"
    ATTACKER = "Attacker"


class EventKind(str, Enum):
    AUTHENTICATE = "Authenticate"
    REQUEST = "Request"
    LOCATION = "LocationUpdate"
    CONSOLE = "ConsoleAction"
    TAMPER = "Tamper"
    AVAILABILITY = "Availability"


@dataclass(frozen=True)
class Actor:
    actor_id: str
    kind: ActorKind
    subject: str
    idp: str
    origin: Origin
    background: tuple[Mapping[str, Any], ...] = ()


@dataclass(frozen=True)
class TraceEvent:
    clock: float
    kind: EventKind
    seq: int
    actor: str | None = None
    fields: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class LocationReading:
    clock: float
    subject: str
    geo: str
    source: str
    confidence: float

    def to_dict(self) -> dict:
        return {"clock": self.clock, "subject": self.subject, "geo": self.geo, "source": self.source,
                "confidence": self.confidence}


@dataclass
class Scenario:
    scenario_id: str
    description: str
    horizon: float
    seed: int | None
    events: list[TraceEvent]
    expectations: list[dict]
    config_overrides: dict = field(default_factory=dict)
    background: bool = True
    background_scale: float = 1.0


@dataclass
class EnvironmentState:
    """A crude thermal model of the home: the EMS holds the temperature in its
    comfort band unless something else drives the appliances."""

    temperature: float = 20.0
    water_temperature: float = 55.0
    meter_kwh: float = 0.0
    solar_kw: float = 0.0
    geo: dict = field(default_factory=dict)
    outside: float = 10.0
    band: tuple[float, float] = (19.0, 21.0)
    heating: float = 0.0  # degrees per hour forced by the appliances
    forced_until: float = -math.inf
    history_records: int = 1000
    deletions: int = 0
    appliance_writes: int = 0
    out_of_band_seconds: float = 0.0

    def apply(self, resource: str, action: str, params: Mapping[str, Any], clock: float) -> None:
        if action == "delete" and resource == "history":
            self.history_records = max(0, self.history_records - 1)
            self.deletions += 1
        elif action == "write" and resource in ("ac-unit", "boiler"):
            self.appliance_writes += 1
            mode = params.get("mode", "heat" if resource == "boiler" else "cool")
            self.heating = 4.0 if mode == "heat" else -4.0
            self.forced_until = clock + 600

    def step(self, clock: float, dt: float) -> None:
        lo, hi = self.band
        if clock < self.forced_until:
            rate = self.heating
        else:
            mid = (lo + hi) / 2
            rate = max(-3.0, min(3.0, (mid - self.temperature) * 2.0))
        hour = (clock % 86400) / 3600
        self.solar_kw = round(max(0.0, 3.0 * math.sin(math.pi * (hour - 6) / 12)), 6) if 6 <= hour <= 18 else 0.0
        self.meter_kwh = round(self.meter_kwh + (0.4 + abs(rate) * 0.3 - self.solar_kw * 0.5) * dt / 3600, 6)
        self.water_temperature = round(max(40.0, self.water_temperature - 0.5 * dt / 3600), 6)
        leak = (self.outside - self.temperature) * 0.05
        self.temperature = round(self.temperature + (rate + leak) * dt / 3600, 6)
        if not lo <= self.temperature <= hi:
            self.out_of_band_seconds += dt


# ------------------------------------------------------------------ loading
def load_topology(path: str | Path | None = None) -> dict:
    with open(path or data_path("topology.json"), encoding="utf-8") as fh:
        return json.load(fh)


def load_policies(directory: str | Path | None = None) -> dict[PolicyKind, Policy]:
    base = Path(directory) if directory else data_path("policies")
    return {kind: load_policy(base / name) for kind, name in POLICY_FILES.items()}


def build_infrastructure(topology: Mapping[str, Any], cfg: Mapping[str, Any],
                         policies: Mapping[PolicyKind, Policy] | None = None) -> Infrastructure:
    components = [
        ComponentDescriptor(c["id"], ComponentKind(c["kind"]), c["owner"],
                            restart_downtime=float(c.get("restart_downtime", 0)),
                            operations=frozenset(ReloadMode(o) for o in c.get("operations", ("Update", "Redeploy"))))
        for c in topology["components"]
    ]
    idps = []
    for i in topology["idps"]:
        subjects = {}
        for sid, s in i["subjects"].items():
            assertions = [AttributeAssertion(sid, name, v, i["id"])
                          for name, values in s["attributes"].items() for v in values]
            subjects[sid] = SubjectRecord(sid, s["party"], assertions)
        idps.append(IdentityService(i["id"], i["owner"], subjects, compliance_mode=i.get("compliance", "honour"),
                                    compliance_delay=float(i.get("delay", 0))))
    tc = cfg["trust"]
    trust = TrustParams(tc["initial"], tc["reward"], tc["penalty"], tc["ban_threshold"], tc.get("ban_duration"))
    subs = {name: [Rule.from_dict(r) for r in rules] for name, rules in topology.get("subscriptions", {}).items()}
    return Infrastructure(
        components=components, idps=idps, parties=topology["parties"], resources=topology["resources"],
        policies=dict(policies) if policies else load_policies(),
        quotas=[QuotaGrant.from_dict(q) for q in topology.get("quotas", ())], trust=trust,
        sp_id=topology.get("sp", "ems"), subscriptions=subs,
    )


def actors_from(topology: Mapping[str, Any]) -> dict[str, Actor]:
    return {a["id"]: Actor(a["id"], ActorKind(a["kind"]), a["subject"], a["idp"], Origin(**a["origin"]),
                           tuple(a.get("background", ())))
            for a in topology["actors"]}


def expand_trace(lines: Iterable[Mapping[str, Any]]) -> list[TraceEvent]:
    """Turn trace records into events; ``repeat`` and ``every`` expand one record into a series."""
    out = []
    seq = 0
    for rec in lines:
        rec = dict(rec)
        kind = EventKind(rec.pop("event"))
        clock = float(rec.pop("clock"))
        repeat = int(rec.pop("repeat", 1))
        every = float(rec.pop("every", 0))
        actor = rec.pop("actor", None)
        for n in range(repeat):
            out.append(TraceEvent(clock + n * every, kind, seq, actor, rec))
            seq += 1
    return out


def read_trace(path: str | Path) -> list[TraceEvent]:
    with open(path, encoding="utf-8") as fh:
        return expand_trace(json.loads(line) for line in fh if line.strip())


def generate_background(actors: Mapping[str, Actor], horizon: float, seed: int, scale: float = 1.0,
                        start_seq: int = 1_000_000) -> list[TraceEvent]:
    """Poisson background traffic for every actor, one independent stream per (actor, resource, action)."""
    out = []
    seq = start_seq
    for aid in sorted(actors):
        for spec in actors[aid].background:
            rate = float(spec["rate"]) * scale / 3600.0
            if rate <= 0:
                continue
            rng = random.Random(derive_seed(seed, aid, spec["resource"], spec["action"]))
            t = rng.expovariate(rate)
            while t < horizon:
                out.append(TraceEvent(round(t, 3), EventKind.REQUEST, seq, aid,
                                      {"resource": spec["resource"], "action": spec["action"], "background": True}))
                seq += 1
                t += rng.expovariate(rate)
    return out


def scenario_names() -> list[str]:
    return sorted(p.stem for p in data_path("scenarios").glob("*.json"))


def load_scenario(name_or_path: str | Path) -> Scenario:
    path = Path(name_or_path)
    if not path.suffix:
        path = data_path("scenarios", f"{name_or_path}.json")
    if not path.exists():
        raise UnknownScenario(str(name_or_path))
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    trace = data.get("trace", [])
    if isinstance(trace, str):
        events = read_trace(path.parent / trace)
    else:
        events = expand_trace(trace)
    return Scenario(data["id"], data.get("description", ""), float(data["horizon"]), data.get("seed"), events,
                    list(data.get("expectations", ())), dict(data.get("config", {})),
                    bool(data.get("background", True)), float(data.get("background_scale", 1.0)))


# ------------------------------------------------------------------ outcome
@dataclass
class ScenarioOutcome:
    scenario_id: str
    seed: int
    controller_enabled: bool
    config_digest: str
    horizon: float
    initial_digests: dict[str, str]
    final_digests: dict[str, str]
    initial_quotas: dict[str, dict]
    quota_timeline: dict[str, list[tuple[float, int]]]
    log: list
    notifications: list
    adaptations: list
    findings: list
    measures: list
    sessions: list
    trust: dict[str, float]
    environment: dict[str, Any]
    lifts: list
    guard_log: list
    compliance: list

    def report(self) -> dict:
        log_text = "".join(canonical_json(e.to_dict()) + "\n" for e in self.log)
        return {
            "scenario": self.scenario_id,
            "seed": self.seed,
            "controller_enabled": self.controller_enabled,
            "config_digest": self.config_digest,
            "horizon": self.horizon,
            "policy_digests": {"initial": self.initial_digests, "final": self.final_digests},
            "quotas": {"initial": self.initial_quotas,
                       "timeline": {k: [list(p) for p in v] for k, v in self.quota_timeline.items()}},
            "notifications": [n.to_dict() for n in self.notifications],
            "adaptations": [a.to_dict() for a in self.adaptations],
            "findings": [f.to_dict() for f in self.findings],
            "measures": self.measures,
            "sessions": self.sessions,
            "trust": self.trust,
            "environment": self.environment,
            "lifts": [list(x) for x in self.lifts],
            "guard": [list(x) for x in self.guard_log],
            "compliance": self.compliance,
            "access_log_digest": hashlib.sha256(log_text.encode()).hexdigest(),
            "access_log": [e.to_dict() for e in self.log],
        }

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.report()).encode()).hexdigest()

    def outbox_text(self) -> str:
        return outbox_lines(self.notifications)


# ------------------------------------------------------------------ engine
class Simulator:
    def __init__(self, scenario: Scenario, cfg: Mapping[str, Any] | None = None, seed: int | None = None, *,
                 controller: bool = True, topology: Mapping[str, Any] | None = None,
                 policies: Mapping[PolicyKind, Policy] | None = None):
        base = dict(cfg) if cfg is not None else load_config()
        self.cfg = merge(base, scenario.config_overrides)
        validate(self.cfg)
        self.scenario = scenario
        if seed is None:
            seed = scenario.seed
        if seed is None:
            raise ValueError("a seed is required")
        self.seed = int(seed)
        self.topology = topology or load_topology()
        self.infra = build_infrastructure(self.topology, self.cfg, policies)
        self.actors = actors_from(self.topology)
        self.locations: list[LocationReading] = []
        self.controller = Controller(self.infra, self.cfg, self.seed, parties=self.topology["parties"],
                                     location_feed=lambda: self.locations, enabled=controller)
        self.env = EnvironmentState()
        self.sessions: dict[str, Any] = {}
        self.epoch: dict[str, int] = {}
        self.known_epoch: dict[str, int] = {}
        tracked = list(self.infra.quotas.values())
        self._tracked = {q.quota_id: (q.party_id, q.resource_id, q.action) for q in tracked}
        self.quota_timeline: dict[str, list[tuple[float, int]]] = {q.quota_id: [(0.0, q.max_count)] for q in tracked}
        self._initial_quotas = {q.quota_id: q.to_dict() for q in tracked}
        self._initial_digests = self.infra.policy_digests()

    # ---------------------------------------------------------- sessions
    def _origin(self, actor: Actor, ev: TraceEvent) -> Origin:
        o = ev.fields.get("origin")
        return Origin(**o) if o else actor.origin

    def _authenticate(self, actor: Actor, origin: Origin, clock: float):
        subject = actor.subject
        if self.known_epoch.get(actor.actor_id, 0) < self.epoch.get(subject, 0):
            self.infra.reject_unauthenticated(subject, "session", "authenticate", origin, clock, "bad-credentials")
            return None
        try:
            sess = self.infra.authenticate(subject, actor.idp, origin, clock)
        except SaazError as exc:
            logger.debug("authentication of %s failed: %s", actor.actor_id, exc)
            self.sessions.pop(actor.actor_id, None)
            return None
        self.sessions[actor.actor_id] = sess
        return sess

    def _session(self, actor: Actor, origin: Origin, clock: float):
        sess = self.sessions.get(actor.actor_id)
        if sess is not None and sess.status is not SessionStatus.TERMINATED and sess.origin == origin:
            return sess
        return self._authenticate(actor, origin, clock)

    # ------------------------------------------------------------ events
    def handle(self, ev: TraceEvent) -> None:
        clock = ev.clock
        f = ev.fields
        if ev.kind is EventKind.LOCATION:
            self.env.geo[f["subject"]] = f["geo"]
            self.locations.append(LocationReading(clock, f["subject"], f["geo"], f.get("source", "gps"),
                                                  float(f.get("confidence", 1.0))))
            return
        if ev.kind is EventKind.TAMPER:
            policy = self.infra.active_policy(PolicyKind(f.get("kind", "AccessControl")))
            drop = set(f.get("remove", ()))
            self.infra.observe(clock)
            self.infra.tamper_policy(Policy(policy.policy_id, policy.kind, policy.version,
                                            tuple(r for r in policy.rules if r.rule_id not in drop)))
            return
        if ev.kind is EventKind.AVAILABILITY:
            self.infra.observe(clock)
            self.infra.components[f["component"]].available = bool(f["available"])
            return
        actor = self.actors[ev.actor]
        origin = self._origin(actor, ev)
        if ev.kind is EventKind.AUTHENTICATE:
            self._authenticate(actor, origin, clock)
        elif ev.kind is EventKind.REQUEST:
            sess = self._session(actor, origin, clock)
            if sess is None:
                self.infra.reject_unauthenticated(actor.subject, f["resource"], f["action"], origin, clock,
                                                  "no-session")
                return
            decision = self.infra.request_access(sess, f["resource"], f["action"], clock)
            if decision.permitted and not decision.obligations:
                self.env.apply(f["resource"], f["action"], f.get("params", {}), clock)
        elif ev.kind is EventKind.CONSOLE:
            params = dict(f.get("params", {}))
            decision = self.infra.console_action(actor.subject, f["action"], origin, clock, params)
            if decision.permitted and f["action"] == "reset-password":
                target = params.get("subject", actor.subject)
                self.epoch[target] = self.epoch.get(target, 0) + 1
                self.known_epoch[actor.actor_id] = self.epoch[target]

    # --------------------------------------------------------------- run
    def run(self) -> ScenarioOutcome:
        sc = self.scenario
        events = list(sc.events)
        if sc.background:
            events += generate_background(self.actors, sc.horizon, self.seed, sc.background_scale)
        events.sort(key=lambda e: (e.clock, e.seq))
        tick = float(self.cfg["tick"])
        ticks = int(math.ceil(sc.horizon / tick))
        i = 0
        for k in range(1, ticks + 1):
            now = k * tick
            while i < len(events) and events[i].clock <= now:
                self.handle(events[i])
                i += 1
            self.infra.observe(now)
            self.infra.process_idp_requests(now)
            self.controller.step(now)
            self.env.step(now, tick)
            self._track_quotas(now)
        return self._outcome()

    def _track_quotas(self, clock: float) -> None:
        for qid, (party, res, act) in self._tracked.items():
            grant = self.infra.quota_in_force(party, res, act)
            current = grant.max_count if grant else -1
            if self.quota_timeline[qid][-1][1] != current:
                self.quota_timeline[qid].append((clock, current))

    def _outcome(self) -> ScenarioOutcome:
        c = self.controller
        kb = c.kb
        return ScenarioOutcome(
            scenario_id=self.scenario.scenario_id, seed=self.seed, controller_enabled=c.enabled,
            config_digest=config_digest(self.cfg), horizon=self.scenario.horizon,
            initial_digests=self._initial_digests, final_digests=self.infra.policy_digests(),
            initial_quotas=self._initial_quotas, quota_timeline=self.quota_timeline,
            log=list(self.infra.log), notifications=list(c.executor.outbox), adaptations=list(kb.adaptations),
            findings=list(c.findings),
            measures=[{"id": m.measure_id, "kind": m.kind, "party": m.party, "subject": m.subject,
                       "applied_at": m.applied_at, "lifted_at": m.lifted_at, "threat_class": m.threat_class,
                       "plan": m.plan_id} for m in kb.measures.values()],
            sessions=[{"id": s.session_id, "subject": s.subject_id, "origin": s.origin.to_dict(),
                       "created_at": s.created_at, "status": s.status.value} for s in self.infra.sessions.values()],
            trust={p: r.trust for p, r in sorted(self.infra.trust.items())},
            environment={"temperature": self.env.temperature, "meter_kwh": self.env.meter_kwh, "history_records": self.env.history_records,
                         "deletions": self.env.deletions, "appliance_writes": self.env.appliance_writes,
                         "out_of_band_seconds": self.env.out_of_band_seconds},
            lifts=list(c.lift_log), guard_log=list(c.guard_log),
            compliance=[{"party": p, "request": e.request, "deadline": e.deadline, "met": e.met}
                        for p, e in c.executor.compliance_events],
        )


def run_scenario(scenario: Scenario | str, seed: int | None = None, cfg: Mapping[str, Any] | None = None, *,
                 controller: bool = True) -> ScenarioOutcome:
    if not isinstance(scenario, Scenario):
        scenario = load_scenario(scenario)
    return Simulator(scenario, cfg, seed, controller=controller).run()


# ------------------------------------------------------------ expectations
@dataclass(frozen=True)
class ExpectationResult:
    kind: str
    ok: bool
    detail: str


def _threat_clock(outcome: ScenarioOutcome, threat_class: str | None = None, party: str | None = None) -> float | None:
    clocks = [f.clock for f in outcome.findings
              if f.finding.classification.value == "Threat"
              and (threat_class is None or f.finding.threat_class == threat_class)
              and (party is None or f.finding.party == party)]
    return min(clocks) if clocks else None


def _adaptation(outcome: ScenarioOutcome, options: Sequence[str], target: str | None = None):
    for a in outcome.adaptations:
        if a.option in options and a.outcome.value != "RolledBack" and (target is None or a.party == target):
            return a
    return None


def _measure_subject(outcome: ScenarioOutcome, plan_id: str) -> str | None:
    for m in outcome.measures:
        if m["plan"] == plan_id:
            return m["subject"]
    return None


def _revocation(outcome: ScenarioOutcome, subject: str):
    for a in outcome.adaptations:
        if a.option in ("RevokeCredentials", "RequireStrictProtocol") and a.outcome.value != "RolledBack" \
                and _measure_subject(outcome, a.plan_id) == subject:
            return a
    return None


def check_expectation(outcome: ScenarioOutcome, exp: Mapping[str, Any]) -> ExpectationResult:
    kind = exp["kind"]
    log = [e for e in outcome.log if not e.synthetic]

    if kind == "revoked-within":
        rev = _revocation(outcome, exp["subject"])
        t0 = _threat_clock(outcome, exp.get("threat_class"))
        if rev is None or t0 is None:
            return ExpectationResult(kind, False, f"no revocation of {exp['subject']} (threat at {t0})")
        lag = rev.finished - t0
        return ExpectationResult(kind, lag <= exp["within"], f"revoked {lag:.0f}s after the first Threat finding")

    if kind == "denied-after-revocation":
        rev = _revocation(outcome, exp["subject"])
        if rev is None:
            return ExpectationResult(kind, False, "no revocation")
        after = [e for e in log if e.subject_id == exp["subject"] and e.timestamp > rev.finished
                 and e.resource_id != "session"]
        bad = [e for e in after if e.permitted]
        return ExpectationResult(kind, bool(after) and not bad,
                                 f"{len(after)} requests after revocation, {len(bad)} permitted")

    if kind == "notification":
        n = len(outcome.notifications)
        return ExpectationResult(kind, n >= exp.get("min", 1), f"{n} notifications")

    if kind == "adaptation":
        a = _adaptation(outcome, exp["options"], exp.get("party"))
        return ExpectationResult(kind, a is not None, f"adaptation {a.option if a else None}")

    if kind == "quota-reduced":
        qid = exp["quota"]
        original = outcome.initial_quotas[qid]["max_count"]
        lows = [m for _, m in outcome.quota_timeline[qid] if 0 <= m < original]
        return ExpectationResult(kind, bool(lows), f"reduced to {min(lows) if lows else None} from {original}")

    if kind == "no-over-quota-permits":
        return _no_over_quota(outcome, exp)

    if kind == "quota-restored":
        qid = exp["quota"]
        tl = outcome.quota_timeline[qid]
        original = outcome.initial_quotas[qid]["max_count"]
        ok = len(tl) > 1 and tl[-1][1] == original and bool(outcome.lifts)
        return ExpectationResult(kind, ok, f"timeline {tl}")

    if kind == "deletions-after-threat":
        t0 = _threat_clock(outcome, exp.get("threat_class", "mass-deletion"))
        if t0 is None:
            return ExpectationResult(kind, False, "no Threat finding")
        first = min(f.finding.first_clock for f in outcome.findings if f.clock == t0)
        n = sum(1 for e in log if e.subject_id == exp["subject"] and e.action == "delete" and e.permitted
                and e.timestamp > t0)
        return ExpectationResult(kind, n <= exp["max"], f"{n} deletions after the Threat at {t0} "
                                                          f"(first evidence {first})")

    if kind == "recredential-after-console":
        subject = exp["subject"]
        consoles = [e for e in log if e.resource_id == "console" and e.action == exp["action"] and e.permitted]
        rev = _revocation(outcome, subject)
        if not consoles or rev is None:
            return ExpectationResult(kind, False, "missing console action or revocation")
        tc = consoles[0].timestamp
        auths = [e for e in log if e.subject_id == subject and e.action == "authenticate"]
        before = [e for e in auths if rev.finished < e.timestamp < tc]
        after = [e for e in auths if e.timestamp > tc]
        ok = bool(before) and not any(e.permitted for e in before) and any(e.permitted for e in after)
        return ExpectationResult(kind, ok, f"{len(before)} attempts denied before, "
                                           f"{sum(e.permitted for e in after)} permitted after")

    if kind == "sessions-terminated":
        n = sum(1 for s in outcome.sessions if s["subject"] == exp["subject"] and s["status"] == "Terminated")
        return ExpectationResult(kind, n >= exp["count"], f"{n} sessions terminated")

    if kind == "console-decision":
        hits = [e for e in log if e.resource_id == "console" and e.action == exp["action"]
                and e.subject_id == exp["subject"] and e.origin is not None and e.origin.zone == exp["zone"]]
        ok = bool(hits) and all(e.outcome == exp["outcome"] for e in hits)
        return ExpectationResult(kind, ok, f"{[e.outcome for e in hits]} from {exp['zone']}")

    if kind == "diagnosis":
        hits = [f for f in outcome.findings if f.finding.diagnosis is not None
                and f.finding.diagnosis.tag == exp["tag"]]
        return ExpectationResult(kind, bool(hits), f"{len(hits)} findings tagged {exp['tag']}")

    if kind == "no-adaptation":
        return ExpectationResult(kind, not outcome.adaptations, f"{len(outcome.adaptations)} adaptations")

    raise ValueError(f"unknown expectation kind {kind!r}")


def _no_over_quota(outcome: ScenarioOutcome, exp: Mapping[str, Any]) -> ExpectationResult:
    """Brute-force check: from the first reduction on, every permit fits the grant then in force."""
    qid = exp["quota"]
    q = outcome.initial_quotas[qid]
    original = q["max_count"]
    timeline = outcome.quota_timeline[qid]
    reduced = [t for t, m in timeline if 0 <= m < original]
    if not reduced:
        return ExpectationResult("no-over-quota-permits", False, "quota never reduced")
    start = reduced[0]
    times = [e.timestamp for e in outcome.log
             if not e.synthetic and e.permitted and "empty-reading" not in e.obligations
             and (e.party_id, e.resource_id, e.action) == (q["party"], q["resource"], q["action"])]
    window = float(q["window"])
    violations = 0
    for i, t in enumerate(times):
        if t <= start:
            continue
        in_force = original
        for tc, m in timeline:
            if tc < t:
                in_force = m
        prior = sum(1 for u in times[:i] if u > t - window)
        if prior >= in_force:
            violations += 1
    return ExpectationResult("no-over-quota-permits", violations == 0,
                             f"{violations} permits over the grant in force after {start}")


def assert_outcome(outcome: ScenarioOutcome, expectations: Sequence[Mapping[str, Any]]) -> list[ExpectationResult]:
    return [check_expectation(outcome, e) for e in expectations]
