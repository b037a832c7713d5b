"""The feedback loop: one Monitor, Analyse, Plan, Execute pass per clock tick
over the shared knowledge base."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

from .analyse import (
    Alert,
    CaseDetector,
    CaseSpec,
    Classification,
    Finding,
    GeoDetector,
    GeoSpec,
    SignatureDetector,
    SignatureSpec,
    diagnose,
    fuse,
    group_alerts,
    normality_check,
    perpetual_scan,
    prioritise,
    risk_score,
)
from .errors import InfeasibleOption, InsufficientHistory
from .execute import Executor, Overall
from .infrastructure import ComponentKind, Infrastructure
from .knowledge import AdaptationOutcome, AdaptationRecord, KnowledgeBase, ThreatStatus
from .monitor import Monitor, ProbeSource, ProbeTemplate, TuneBounds
from .plan import (
    BoundaryMap,
    CapabilityRegistry,
    CatalogEntry,
    Controllability,
    DosParams,
    EffectorCapability,
    GuardDecision,
    OptionTemplate,
    PartyBoundary,
    ResponseOption,
    derive_seed,
    dos_guard,
    enumerate_options,
    feasible,
    negotiate,
    options_for_mode,
    quota_grant_for,
    rank,
    select,
    synthesise,
    with_modes,
)

logger = logging.getLogger(__name__)

DOMAIN_PARTY = "ems"


@dataclass
class DetectorBinding:
    detector_id: str
    kind: str
    spec: Any
    detector: Any
    deploy_on: str | None
    probe_ids: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class FindingRecord:
    finding: Finding
    clock: float
    risk: float
    action: str

    def to_dict(self) -> dict:
        f = self.finding
        d = f.diagnosis
        return {
            "finding_id": f.finding_id,
            "clock": self.clock,
            "party": f.party,
            "subject": f.subject,
            "classification": f.classification.value,
            "confidence": round(f.confidence, 6),
            "threat_class": f.threat_class,
            "first_clock": f.first_clock,
            "alerts": [a.alert_id for a in f.alerts],
            "risk": round(self.risk, 6),
            "action": self.action,
            "diagnosis": None if d is None else {"entry_session": d.entry_session,
                                                   "first_malicious": d.first_malicious, "tag": d.tag},
        }


def build_boundary(parties: Mapping[str, Mapping[str, Any]]) -> BoundaryMap:
    return BoundaryMap({
        name: PartyBoundary(bool(p.get("observable", True)), Controllability(p.get("controllable", "None")),
                            p.get("idp"))
        for name, p in parties.items()
    } | {DOMAIN_PARTY: PartyBoundary(True, Controllability.DIRECT)})


def build_capabilities(infra: Infrastructure) -> CapabilityRegistry:
    pdp = infra.components[infra.pdp_id]
    return CapabilityRegistry({
        "policy": EffectorCapability(frozenset({"PDP"}), frozenset(pdp.operations), infra.sp_id),
        "sessions": EffectorCapability(frozenset({"PEP"}), frozenset(), infra.sp_id),
        "identity": EffectorCapability(frozenset({ComponentKind.IDENTITY.value}), frozenset(), infra.sp_id),
    })


def _signature_spec(d: Mapping[str, Any]) -> SignatureSpec:
    return SignatureSpec(d["id"], dict(d["predicate"]), int(d["N"]), float(d["W"]), d.get("scope", "party_id"),
                         d.get("threat_class", "over-query"))


class Controller:
    def __init__(self, infra: Infrastructure, cfg: Mapping[str, Any], seed: int, *,
                 parties: Mapping[str, Mapping[str, Any]], location_feed: Callable[[], Sequence[Any]] | None = None,
                 enabled: bool = True):
        self.infra = infra
        self.cfg = cfg
        self.seed = seed
        self.enabled = enabled
        kc = cfg["knowledge"]
        self.kb = KnowledgeBase(alpha=kc["alpha"], history_size=kc["history_size"], impacts=cfg["risk"]["impact"])
        self.kb.adopt(infra)
        mc = cfg["monitor"]
        self.monitor = Monitor([ProbeTemplate.from_dict(t) for t in mc["templates"]],
                               TuneBounds(mc["min_period"], mc["max_period"], mc["k"]))
        self.monitor.attach(ProbeSource.ACCESS_LOG, lambda: infra.log)
        self.monitor.attach(ProbeSource.LOCATION, location_feed or (lambda: ()))
        pc = cfg["plan"]
        self.executor = Executor(infra, self.kb, deadline=pc.get("deadline", 300))
        self.catalog = [CatalogEntry.from_dict(t) for t in pc["templates"]]
        self.boundary = build_boundary(parties)
        self.capabilities = build_capabilities(infra)
        self.dos = DosParams(**pc["dos"])
        self.x, self.y = cfg["risk"]["x"], cfg["risk"]["y"]
        self.quiet = cfg["normality"]["quiet_period"]
        ac = cfg.get("analyse", {})
        self.tags = ac.get("diagnosis_tags", {})
        self.drift_confidence = ac.get("drift_confidence", 0.5)
        self.scan_cfg = ac.get("perpetual", {"period": 3600, "window_factor": 3, "threshold_factor": 2})

        self.detectors: dict[str, DetectorBinding] = {}
        self.findings: list[FindingRecord] = []
        self.alerts: list[Alert] = []
        self.deferred: list[Finding] = []
        self._deferred_since: dict[str, float] = {}
        self.disruptive_history: list[float] = []
        self.last_alert: dict[str, float] = {}
        self.guard_log: list[tuple[float, str, str]] = []
        self.lift_log: list[tuple[float, str]] = []
        self.reports: list = []
        self._queued: list[Alert] = []
        self._admin_cursor = 0
        self._log_index: dict[str, Any] = {}
        self._log_indexed = 0
        self._last_snapshot = -math.inf
        self._last_scan = -math.inf
        self._scan_from = 0
        self._retro_seen: set[tuple] = set()
        self._finding_seq = 0
        self._location_probe: str | None = None
        self._setup_detectors()
        self.kb.snapshot(infra, infra.clock if math.isfinite(infra.clock) else 0.0)

    # -------------------------------------------------------------- setup
    def _setup_detectors(self) -> None:
        specs = {d["id"]: d for d in self.cfg["detectors"]}
        for d in self.cfg["detectors"]:
            kind = d["type"]
            if kind == "signature":
                spec = _signature_spec(d)
                det = SignatureDetector(spec)
            elif kind == "case":
                sig = _signature_spec(specs[d["signature"]]) if d.get("signature") else None
                spec = CaseSpec(d["id"], dict(d["predicate"]), float(d["W"]), d.get("k", 3.0), d.get("rho", 0.8),
                                d.get("m", 3), d.get("floor", 3), d.get("warmup", 0), d.get("scope", "party_id"),
                                d.get("threat_class", "over-query"), sig, bool(d.get("evasion", False)),
                                d.get("evasion_confidence", 0.6))
                det = CaseDetector(spec, self.kb)
            elif kind == "geo":
                spec = GeoSpec(d["id"], dict(d["predicate"]), float(d.get("horizon", 3600)),
                               float(d.get("min_confidence", 0.5)), d.get("threat_class", "impersonation"))
                det = GeoDetector(spec)
            else:
                raise ValueError(f"unknown detector type {kind!r}")
            self.detectors[d["id"]] = DetectorBinding(d["id"], kind, spec, det, d.get("deploy_on"))
        for binding in self.detectors.values():
            if binding.deploy_on is None:
                self._deploy(binding, -math.inf)

    def _deploy(self, binding: DetectorBinding, clock: float) -> None:
        if binding.probe_ids:
            return
        params = {k: v for k, v in binding.spec.predicate.items()}
        probe = self.monitor.deploy_probe("access-log", params, clock, probe_id=f"probe:{binding.detector_id}")
        binding.probe_ids.append(probe.probe_id)
        if binding.kind == "geo" and self._location_probe is None:
            self._location_probe = self.monitor.deploy_probe("location", {}, clock, probe_id="probe:location").probe_id
        logger.info("deployed detector %s", binding.detector_id)

    # ---------------------------------------------------------- helpers
    def _index_log(self) -> None:
        log = self.infra.log
        for entry in log[self._log_indexed:]:
            self._log_index[entry.request_id] = entry
        self._log_indexed = len(log)

    def _evidence_entries(self, finding: Finding) -> list:
        self._index_log()
        refs = [r for a in finding.alerts for r in a.evidence]
        return [self._log_index[r] for r in refs if r in self._log_index]

    def _pattern(self, finding: Finding) -> dict[str, Any] | None:
        entries = [e for e in self._evidence_entries(finding) if e.resource_id not in ("session", "console")]
        if not entries:
            return None
        counts: dict[tuple[str, str], int] = {}
        for e in entries:
            counts[(e.resource_id, e.action)] = counts.get((e.resource_id, e.action), 0) + 1
        resource, action = min(counts, key=lambda k: (-counts[k], k))
        return {"resource": resource, "action": action}

    def _principal(self, finding: Finding) -> str | None:
        if finding.subject:
            return finding.subject
        subjects = sorted({e.subject_id for e in self._evidence_entries(finding)})
        return subjects[0] if len(subjects) == 1 else None

    def _mitigated(self, finding: Finding) -> bool:
        for m in self.kb.active_measures():
            if m.threat_class == finding.threat_class and m.party == finding.party and \
                    (finding.subject is None or m.subject in (None, finding.subject)):
                return True
        return False

    # -------------------------------------------------------- main loop
    def submit(self, alerts: Iterable[Alert]) -> None:
        """Queue alerts raised outside the built-in detectors for the next iteration."""
        self._queued.extend(alerts)

    def step(self, clock: float) -> list[FindingRecord]:
        if not self.enabled:
            return []
        self.executor.poll_pending(clock)
        self._consume_admin_events(clock)
        alerts = list(self._queued)
        self._queued.clear()
        alerts.extend(self._check_drift(clock))
        alerts.extend(self._monitor(clock))
        for a in alerts:
            if a.party is not None:
                self.last_alert[a.party] = max(self.last_alert.get(a.party, -math.inf), a.clock)
        self.alerts.extend(alerts)
        produced = self._analyse_and_respond(alerts, clock)
        self._expire_measures(clock)
        self._resume_normality(clock)
        if clock - self._last_snapshot >= self.cfg["knowledge"]["snapshot_period"]:
            self.kb.snapshot(self.infra, clock)
            self._last_snapshot = clock
        if not produced and not alerts and clock - self._last_scan >= self.scan_cfg["period"]:
            self._scan(clock)
        return produced

    def _consume_admin_events(self, clock: float) -> None:
        events = self.infra.admin_events[self._admin_cursor:]
        self._admin_cursor = len(self.infra.admin_events)
        for ev in events:
            if ev.outcome == "applied" and "digest" in ev.params:
                self.kb.expect_digest(f"{self.infra.pdp_id}:{ev.params['kind']}", ev.params["digest"])
            if ev.outcome != "Permit":
                continue
            action = ev.action.removeprefix("console:")
            if action == "subscribe":
                trigger = f"subscribe:{ev.params.get('service')}"
                for b in self.detectors.values():
                    if b.deploy_on == trigger:
                        self._deploy(b, ev.clock)
            target = ev.params.get("subject", ev.actor)
            for m in self.kb.active_measures():
                if m.restore.get("awaits") == action and m.subject == target:
                    self._lift(m, clock, f"{action} completed for {target}")

    def _check_drift(self, clock: float) -> list[Alert]:
        report = self.kb.detect_drift(self.infra)
        if report.is_empty():
            return []
        events = self.kb.reconcile(report, self.infra, clock)
        return [Alert(f"drift#{i}@{clock}", "drift", DOMAIN_PARTY, None, clock, self.drift_confidence,
                      (ev.component,), "out-of-band", "out-of-band-change", clock)
                for i, ev in enumerate(events, 1)]

    def _monitor(self, clock: float) -> list[Alert]:
        out: list[Alert] = []
        geo = [b for b in self.detectors.values() if b.kind == "geo" and b.probe_ids]
        if self._location_probe and self.monitor.probes[self._location_probe].next_due <= clock:
            readings = self.monitor.poll(self._location_probe, clock)
            for b in geo:
                b.detector.observe_location(readings)
        for b in self.detectors.values():
            if not b.probe_ids:
                continue
            pid = b.probe_ids[0]
            probe = self.monitor.probes[pid]
            if probe.next_due > clock:
                continue
            obs = self.monitor.poll(pid, clock)
            if b.kind == "case":
                found = b.detector.feed(obs, clock)
            else:
                found = b.detector.feed(obs)
            score = max((a.confidence for a in found), default=0.0)
            self.monitor.tune(pid, score)
            out.extend(found)
        return out

    def _next_finding_id(self) -> str:
        self._finding_seq += 1
        return f"F{self._finding_seq}"

    def _analyse_and_respond(self, alerts: list[Alert], clock: float) -> list[FindingRecord]:
        findings = self._retry_deferred(clock)
        for _, group in group_alerts(alerts).items():
            f = fuse(group, self.x, self.y, self._next_finding_id())
            if f.classification is Classification.LEGITIMATE:
                continue
            try:
                diag = diagnose(f, self.infra.log, self._history_start(), self.tags)
            except InsufficientHistory as exc:
                logger.info("no diagnosis for %s: %s", f.finding_id, exc)
                diag = None
            findings.append(Finding(f.finding_id, f.party, f.subject, f.classification, f.confidence, f.alerts,
                                    f.threat_class, f.first_clock, diag))
        scored = [(f, risk_score(f, self.kb.impacts)) for f in findings]
        records = []
        for f, risk in prioritise(scored):
            self.kb.register_threat(f.threat_class, f.target or DOMAIN_PARTY, f.confidence, clock,
                                    [a.alert_id for a in f.alerts])
            action = self._respond(f, risk, clock)
            if action != "deferred":
                self._deferred_since.pop(f.finding_id, None)
            rec = FindingRecord(f, clock, risk.risk, action)
            self.findings.append(rec)
            records.append(rec)
        return records

    def _retry_deferred(self, clock: float) -> list[Finding]:
        # an empty bucket would only defer them again, so skip the replanning
        keep = [f for f in self.deferred if clock - self._deferred_since[f.finding_id] <= self.dos.window]
        for f in self.deferred:
            if f not in keep:
                logger.warning("dropping %s: deferred for longer than %ss", f.finding_id, self.dos.window)
                del self._deferred_since[f.finding_id]
        if dos_guard(self.disruptive_history, clock, Classification.SUSPICIOUS, self.dos) is GuardDecision.DEFER:
            self.deferred = keep
            return []
        self.deferred = []
        return keep

    def _history_start(self) -> float:
        log = self.infra.log
        return log[0].timestamp if log else math.inf

    # --------------------------------------------------------------- plan
    def _options(self, finding: Finding, clock: float) -> list[ResponseOption]:
        pattern = self._pattern(finding)
        principal = self._principal(finding)
        out = []
        for opt in enumerate_options(finding, finding.diagnosis, self.catalog, pattern):
            params = dict(opt.params)
            if principal:
                params.setdefault("principal", principal)
            if opt.template is OptionTemplate.REDUCE_QUOTA:
                extra = self._negotiate_quota(finding, pattern, principal)
                if extra is None:
                    continue
                params.update(extra)
            if opt.template is OptionTemplate.TERMINATE_SESSIONS and not opt.subject:
                if not principal:
                    continue
            opt = ResponseOption(opt.option_id, opt.template, opt.party, opt.subject or (
                principal if opt.template is not OptionTemplate.REDUCE_QUOTA else None),
                opt.effectiveness, opt.cost, params)
            verdict = feasible(opt, self.capabilities, self.boundary)
            if not verdict:
                logger.info("option %s infeasible: %s", opt.option_id, verdict.reason)
                continue
            out.append(with_modes(opt, verdict))
        return out

    def _negotiate_quota(self, finding: Finding, pattern, principal) -> dict | None:
        if not pattern or finding.party is None:
            return None
        grant = self.infra.quota_in_force(finding.party, pattern["resource"], pattern["action"])
        if grant is None:
            return None
        nc = self.cfg["plan"]["negotiation"]
        bounds = nc["bounds"]
        proposer = nc["proposer"]
        if finding.party not in bounds or proposer not in bounds:
            return None
        result = negotiate(grant, proposer, finding.party, tuple(bounds[proposer]), tuple(bounds[finding.party]),
                           nc["max_rounds"])
        if not result.agreed or result.grant.max_count >= grant.max_count:
            logger.info("quota negotiation with %s gave no reduction", finding.party)
            return None
        reduced = quota_grant_for(grant, result.grant.max_count, f"r{self._finding_seq}")
        return {"grant": reduced, "original": grant.quota_id, "probe_subject": principal or finding.party,
                "negotiation_rounds": result.transcript[-1].round}

    def _respond(self, finding: Finding, risk, clock: float) -> str:
        if self._mitigated(finding):
            return "already-mitigated"
        options = self._options(finding, clock)
        if not options:
            return "no-feasible-option"
        scored = rank(options, risk)
        decision = dos_guard(self.disruptive_history, clock, finding.classification, self.dos)
        self.guard_log.append((clock, finding.finding_id, decision.value))
        if decision is GuardDecision.DEFER:
            self.deferred.append(finding)
            self._deferred_since.setdefault(finding.finding_id, clock)
            return "deferred"
        degraded = decision is GuardDecision.DEGRADED
        if degraded:
            scored = options_for_mode(scored, decision)
            if not scored:
                scored = [s for s in rank(options, risk) if s.option.template is OptionTemplate.NOTIFY_USERS]
            if not scored:
                return "no-zero-downtime-option"
        seed = derive_seed(self.seed, finding.finding_id)
        remaining = list(scored)
        while remaining:
            option = select(remaining, self.cfg["plan"]["epsilon"], seed)
            try:
                plan = synthesise(option, self.capabilities, self.boundary, f"P-{finding.finding_id}", degraded)
            except InfeasibleOption as exc:
                logger.info("cannot synthesise %s: %s", option.option_id, exc)
                remaining = [s for s in remaining if s.option is not option]
                continue
            self._execute(plan, finding, clock)
            return option.template.value
        return "no-plan"

    def _execute(self, plan, finding: Finding, clock: float) -> None:
        pre = self.kb.snapshot(self.infra, clock)
        report = self.executor.run(plan, clock, finding.finding_id)
        if report.disruptive:
            self.disruptive_history.append(clock)
        outcome = AdaptationOutcome(report.overall.value)
        if report.overall is not Overall.ROLLED_BACK:
            self._record_measure(plan, finding, report, clock)
            for t in self.kb.threats_of(finding.target or DOMAIN_PARTY, finding.threat_class):
                if t.status is ThreatStatus.ACTIVE and plan.option.template is not OptionTemplate.NOTIFY_USERS:
                    self.kb.resolve_threat(t.threat_id)
        post = self.kb.snapshot(self.infra, clock)
        self.kb.record_adaptation(AdaptationRecord(
            plan.plan_id, finding.finding_id, plan.option.template.value, finding.target or DOMAIN_PARTY, clock,
            clock + report.elapsed, outcome, pre.snapshot_id, post.snapshot_id, report.disruptive,
            report.verification.value if report.verification else None, plan.offending,
        ))
        self.reports.append(report)
        logger.info("%s -> %s (%s)", plan.plan_id, plan.option.template.value, report.overall.value)

    def _record_measure(self, plan, finding: Finding, report, clock: float) -> None:
        t = plan.option.template
        if t is OptionTemplate.NOTIFY_USERS:
            return
        restore: dict[str, Any] = dict(report.effects[0]["restore"]) if report.effects else {"op": "none"}
        liftable = t in (OptionTemplate.REDUCE_QUOTA, OptionTemplate.EMPTY_READINGS_FALLBACK)
        params = plan.option.params
        if t is OptionTemplate.REQUIRE_STRICT_PROTOCOL:
            restore["awaits"] = "strict-protocol"
        elif t is OptionTemplate.TERMINATE_SESSIONS:
            restore["awaits"] = "reset-password"
        if params.get("duration") and t in (OptionTemplate.REVOKE_CREDENTIALS, OptionTemplate.BAN_IDP):
            restore["expires_at"] = clock + params["duration"]
        subject = plan.option.subject or params.get("principal")
        self.kb.add_measure(t.value, finding.party or DOMAIN_PARTY, subject, clock, plan.plan_id, liftable, restore,
                            finding.threat_class)

    # ------------------------------------------------------- normality
    def _lift(self, measure, clock: float, why: str) -> None:
        restore = measure.restore
        if restore.get("op") not in (None, "none"):
            self.executor.lift(restore, clock)
        self.kb.lift_measure(measure.measure_id, clock)
        for t in self.kb.threats_of(measure.subject or measure.party, measure.threat_class):
            if t.status is ThreatStatus.MITIGATED:
                self.kb.resolve_threat(t.threat_id)
        self.lift_log.append((clock, measure.measure_id))
        self.executor.notify("household", f"lifted {measure.kind} on {measure.subject or measure.party}: {why}",
                             clock, None)

    def _expire_measures(self, clock: float) -> None:
        for m in self.kb.active_measures():
            expires = m.restore.get("expires_at")
            if expires is not None and clock >= expires:
                self.kb.lift_measure(m.measure_id, clock)
                self.lift_log.append((clock, m.measure_id))

    def _resume_normality(self, clock: float) -> None:
        for rec in normality_check(self.kb.active_measures(), self.last_alert, clock, self.quiet):
            self._lift(self.kb.measures[rec.measure_id], clock, "quiet period elapsed")

    # ---------------------------------------------------- background scan
    def _scan(self, clock: float) -> None:
        self._last_scan = clock
        sigs = [b.spec for b in self.detectors.values() if b.kind == "signature" and b.probe_ids]
        horizon = max((s.window for s in sigs), default=0) * self.scan_cfg["window_factor"]
        log = self.infra.log
        lo = self._scan_from
        while lo < len(log) and log[lo].timestamp <= clock - 2 * horizon:
            lo += 1
        self._scan_from = lo
        lifted = {m.plan_id: m.lifted_at for m in self.kb.measures.values() if m.lifted_at is not None}
        result = perpetual_scan(log[lo:], sigs, self.alerts, self.kb.adaptations,
                                window_factor=self.scan_cfg["window_factor"],
                                threshold_factor=self.scan_cfg["threshold_factor"], lifted=lifted)
        for a in result.alerts:
            key = (a.detector_id, a.implicated, a.window_start)
            if key not in self._retro_seen:
                self._retro_seen.add(key)
                self._queued.append(a)
        for rec in self.kb.adaptations:
            if rec.plan_id in result.verdicts:
                rec.verdict = result.verdicts[rec.plan_id].value
