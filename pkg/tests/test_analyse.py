import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import case_oracle, signature_oracle
from saaz.analyse import (
    Alert,
    CaseSpec,
    Classification,
    Finding,
    GeoDetector,
    GeoSpec,
    RiskScore,
    SignatureSpec,
    Verdict,
    case_detect,
    diagnose,
    fuse,
    normality_check,
    over_quota_permits,
    perpetual_scan,
    prioritise,
    risk_score,
    signature_detect,
)
from saaz.errors import EmptyAlertSet, InsufficientHistory, MissingAssociatedSignature, PreconditionViolation, \
    UnknownThreatClass
from saaz.infrastructure import AccessLogEntry, Origin
from saaz.knowledge import AdaptationOutcome, AdaptationRecord, BehaviorProfile, Measure

READ = {"action": "read"}


def ev(t, party="p", action="read", **kw):
    return {"clock": t, "party_id": party, "action": action, "request_id": f"r@{t}", **kw}


def sig(n=4, w=60.0):
    return SignatureSpec("sig", READ, n, w)


def alert(conf, party="p", subject=None, clock=0.0, kind="signature", threat="over-query", sessions=()):
    return Alert(f"a{conf}{clock}", "d", party, subject, clock, conf, ("r",), kind, threat, clock, sessions)


# --------------------------------------------------------------- signature
def test_five_in_window_alerts_once():
    out = signature_detect([ev(t) for t in (0, 10, 20, 30, 40)], sig())
    assert len(out) == 1 and out[0].clock == 40 and len(out[0].evidence) == 5


def test_exactly_n_is_silent():
    assert signature_detect([ev(t) for t in (0, 10, 20, 30)], sig()) == []
    assert signature_detect([], sig()) == []


def test_window_is_half_open_on_the_left():
    # at t=60 the window (0, 60] no longer holds the event at 0
    assert signature_detect([ev(t) for t in (0, 15, 30, 45, 60)], sig()) == []


def test_non_matching_and_clock_cutoff():
    events = [ev(t) for t in range(5)] + [ev(t, action="write") for t in range(5, 20)]
    assert len(signature_detect(events, sig())) == 1
    assert signature_detect(events, sig(), clock=3) == []


def test_signature_spec_validation():
    with pytest.raises(ValueError):
        SignatureSpec("s", READ, 0, 10)
    with pytest.raises(ValueError):
        SignatureSpec("s", READ, 1, 0)


times_st = st.lists(st.integers(0, 2000).map(lambda x: x / 4), max_size=120).map(sorted)


@given(times_st, st.lists(st.sampled_from(["a", "b", "c"]), min_size=120, max_size=120),
       st.integers(1, 6), st.sampled_from([5.0, 30.0, 60.25, 200.0]))
def test_signature_matches_oracle(times, keys, n, w):
    keys = keys[:len(times)]
    events = [ev(t, party=k) for t, k in zip(times, keys)]
    got = sorted(((a.party, a.clock, len(a.evidence)) for a in signature_detect(events, sig(n, w))),
                 key=lambda a: (a[1], a[0]))
    assert got == signature_oracle(times, keys, n, w)


# -------------------------------------------------------------------- case
def case_spec(**kw):
    base = dict(detector_id="case", predicate=READ, window=60.0, k=3.0, rho=0.8, m=3, floor=3, warmup=0)
    base.update(kw)
    return CaseSpec(**base)


def burst(window_index, count, w=60.0):
    return [ev(window_index * w + i * (w / (count + 1))) for i in range(count)]


def test_deviation_eight_over_seven():
    prof = BehaviorProfile("p", "case", 60.0, mean=4.0, deviation=1.0, samples=10)
    out = case_detect(burst(0, 8), prof, case_spec(), clock=60)
    assert [a.kind for a in out] == ["deviation"]
    assert case_detect(burst(0, 7), prof, case_spec(), clock=60) == []
    assert case_detect(burst(0, 4), prof, case_spec(), clock=60) == []


def test_open_window_not_judged():
    prof = BehaviorProfile("p", "case", 60.0, mean=4.0, deviation=1.0, samples=10)
    assert case_detect(burst(0, 8), prof, case_spec(), clock=59.9) == []


def test_evasion_run_nine_nine_ten():
    spec = case_spec(rho=0.8, m=3, signature=SignatureSpec("s", READ, 10, 60.0), evasion=True, k=100)
    events = burst(0, 9) + burst(1, 9) + burst(2, 10)
    out = case_detect(events, None, spec, clock=180)
    assert [(a.kind, a.clock) for a in out if a.kind == "evasion"] == [("evasion", 180.0)]
    # a break in the run resets it
    broken = burst(0, 9) + burst(1, 2) + burst(2, 10)
    assert [a for a in case_detect(broken, None, spec, clock=180) if a.kind == "evasion"] == []


def test_evasion_needs_signature():
    with pytest.raises(MissingAssociatedSignature):
        case_spec(evasion=True)


def test_warmup_suppresses_deviation():
    spec = case_spec(warmup=2)
    assert case_detect(burst(0, 9), None, spec, clock=60) == []


@given(st.lists(st.integers(0, 40 * 60 - 1).map(float), max_size=200).map(sorted),
       st.sampled_from([1.0, 2.0, 3.0]), st.sampled_from([0.5, 0.75]), st.integers(2, 4),
       st.integers(0, 4), st.integers(0, 5), st.integers(1, 12))
def test_case_matches_oracle(times, k, rho, m, floor, warmup, n):
    spec = case_spec(k=k, rho=rho, m=m, floor=floor, warmup=warmup,
                     signature=SignatureSpec("s", READ, n, 60.0), evasion=True)
    clock = 40 * 60
    got = sorted(((a.kind, int(a.clock // 60) - 1) for a in case_detect([ev(t) for t in times], None, spec, clock)),
                 key=lambda a: (a[1], a[0]))
    assert got == case_oracle(times, 60.0, k, rho, m, floor, warmup, 0.3, n, clock)


# --------------------------------------------------------------------- geo
def test_geo_mismatch_flags_other_continent():
    det = GeoDetector(GeoSpec("geo", horizon=7200))
    det.observe_location([{"clock": 0, "subject": "couple", "geo": "EU", "confidence": 0.9},
                          {"clock": 0, "subject": "couple", "geo": "EU", "confidence": 0.8}])
    auth = {"clock": 100, "action": "authenticate", "outcome": "Permit", "subject_id": "couple",
            "party_id": "household", "origin": {"geo": "ASIA"}, "session_id": "s9", "request_id": "x"}
    home = dict(auth, origin={"geo": "EU"}, session_id="s1")
    out = det.feed([home, auth])
    assert len(out) == 1 and out[0].sessions == ("s9",) and out[0].confidence == pytest.approx(0.85)
    stale = dict(auth, clock=9000)
    assert det.feed([stale]) == []


# ------------------------------------------------------------------ fusion
def test_noisy_or_examples():
    f = fuse([alert(0.5), alert(0.5, clock=1)])
    assert f.confidence == pytest.approx(0.75) and f.classification is Classification.THREAT
    assert fuse([alert(0.2)]).classification is Classification.LEGITIMATE
    assert fuse([alert(0.5)]).classification is Classification.SUSPICIOUS
    assert fuse([alert(0.8), alert(0.0, clock=1)]).classification is Classification.THREAT
    with pytest.raises(EmptyAlertSet):
        fuse([])
    with pytest.raises(PreconditionViolation):
        fuse([alert(0.5, party="a"), alert(0.5, party="b")])


@given(st.lists(st.floats(0, 1), min_size=1, max_size=8))
def test_fusion_monotone_and_bounded(confs):
    alerts = [alert(c, clock=i) for i, c in enumerate(confs)]
    c = fuse(alerts).confidence
    assert max(confs) - 1e-12 <= c <= 1.0
    more = fuse(alerts + [alert(0.3, clock=99)]).confidence
    assert more >= c - 1e-12


# --------------------------------------------------------------- diagnosis
def entry(t, subject, session, party="household", **kw):
    return AccessLogEntry(t, f"r{t}", subject, session, "history", "delete", "Permit", "x", Origin(),
                          party_id=party, **kw)


def finding(alerts, cls=Classification.THREAT, subject=None, party="household", threat="over-query", first=0.0):
    return Finding("F1", party, subject, cls, 0.9, tuple(alerts), threat, first)


def test_diagnosis_picks_evidence_session():
    log = [entry(0, "couple", "s1"), entry(50, "couple", "s2"), entry(60, "couple", "s2")]
    geo = alert(0.9, party="household", subject="couple", clock=50, kind="geo-mismatch",
                threat="impersonation", sessions=("s2",))
    d = diagnose(finding([geo], subject="couple", threat="impersonation", first=50), log)
    assert (d.entry_session, d.tag) == ("s2", "stolen-credential")


def test_diagnosis_without_sessions():
    with pytest.raises(InsufficientHistory):
        diagnose(finding([alert(0.9, party="x")], party="x"), [entry(0, "couple", "s1")])
    with pytest.raises(PreconditionViolation):
        diagnose(finding([alert(0.1)], cls=Classification.LEGITIMATE), [])


def test_diagnosis_onset_is_first_window_start():
    prof = BehaviorProfile("p", "case", 60.0, mean=1.0, deviation=0.5, samples=10)
    alerts = case_detect(burst(3, 9), prof, case_spec(), clock=240)
    f = fuse(alerts)
    assert f.first_clock == 180.0
    log = [entry(100, "cis", "s1", party="p"), entry(190, "cis", "s1", party="p")]
    d = diagnose(Finding("F", "p", None, Classification.THREAT, 0.9, tuple(alerts), "over-query", f.first_clock),
                 log, tags={"over-query": "over-privilege"})
    assert d.first_malicious == 180.0 and d.tag == "over-privilege"


# -------------------------------------------------------------------- risk
def test_risk_and_priority():
    f = finding([alert(0.9)])
    assert risk_score(f, {"over-query": 10}).risk == pytest.approx(9.0)
    assert risk_score(Finding("z", "p", None, Classification.SUSPICIOUS, 0.0, (alert(0.0),), "over-query", 0),
                      {"over-query": 10}).risk == 0
    with pytest.raises(UnknownThreatClass):
        risk_score(f, {})
    deletion = (Finding("D", "h", None, Classification.THREAT, 0.9, (), "mass-deletion", 5), RiskScore("D", 0.9, 10))
    query = (Finding("Q", "r", None, Classification.THREAT, 0.5, (), "over-query", 1), RiskScore("Q", 0.5, 5))
    assert [f.finding_id for f, _ in prioritise([query, deletion])] == ["D", "Q"]
    early = (Finding("E", "r", None, Classification.THREAT, 0.5, (), "over-query", 0), RiskScore("E", 0.5, 5))
    assert [f.finding_id for f, _ in prioritise([query, early])] == ["E", "Q"]


def test_shipped_impacts_rank_deletion_over_query(cfg):
    impact = cfg["risk"]["impact"]
    assert impact["mass-deletion"] > impact["over-query"]


# --------------------------------------------------------------- normality
def measure(liftable=True, applied=0.0):
    return Measure("M1", "ReduceQuota", "retailer", None, applied, "P1", liftable, {"op": "quota-swap"})


def test_normality_after_quiet_period():
    Q = 14400
    assert [r.measure_id for r in normality_check([measure()], {}, Q, Q)] == ["M1"]
    assert normality_check([measure()], {"retailer": 1}, Q, Q) == []
    assert normality_check([measure(liftable=False)], {}, 10 ** 9, Q) == []


# ------------------------------------------------------------- re-scanning
def log_entries(times, party="retailer", outcome="Permit"):
    return [AccessLogEntry(t, f"r{i}", "cis", "s1", "meter", "read", outcome, "x", Origin(), party_id=party)
            for i, t in enumerate(times)]


def test_slow_attack_found_by_wide_window():
    spec = SignatureSpec("rate", {"party_id": "retailer"}, 8, 3600)
    times = [450.0 * i for i in range(1, 25)]
    log = log_entries(times)
    assert signature_detect(log, spec) == []
    res = perpetual_scan(log, [spec], [], [])
    assert len(res.alerts) == 1 and res.alerts[0].detector_id == "rate/wide"
    assert perpetual_scan([], [spec], [], []).alerts == ()


def test_rescan_verdicts():
    match = {"subject_id": "cis", "resource_id": "meter", "action": "read"}
    rec = AdaptationRecord("P1", "F1", "RevokeCredentials", "cis", 100, 100, AdaptationOutcome.SUCCEEDED, 1, 2,
                           offending={"match": match})
    leaky = perpetual_scan(log_entries([50, 150]), [], [], [rec])
    tight = perpetual_scan(log_entries([50]) + log_entries([150], outcome="Deny"), [], [], [rec])
    assert leaky.verdicts == {"P1": Verdict.ROLLBACK_SUGGESTED}
    assert tight.verdicts == {"P1": Verdict.CONFIRMED}


@given(st.lists(st.floats(0, 1000), max_size=50).map(sorted), st.integers(1, 5), st.floats(1, 300))
def test_over_quota_permits_brute(times, max_count, window):
    from oracles import quota_violations
    assert over_quota_permits(times, max_count, window) == quota_violations(times, max_count, window)
    assert not math.isnan(window)
