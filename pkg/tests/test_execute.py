import pytest

from saaz.controller import build_boundary, build_capabilities
from saaz.errors import UnknownCheckpoint, UnknownEffector, UnknownTemplate
from saaz.execute import Executor, Outcome, Overall, VerifyVerdict, outbox_lines
from saaz.infrastructure import Origin, ReloadMode
from saaz.knowledge import KnowledgeBase
from saaz.plan import OptionTemplate, ProbeSpec, ResponseOption, feasible, quota_grant_for, synthesise, with_modes
from saaz.policy import PolicyDelta, PolicyKind

T = OptionTemplate


@pytest.fixture
def kb(cfg, infra):
    k = KnowledgeBase(impacts=cfg["risk"]["impact"])
    k.adopt(infra)
    return k


@pytest.fixture
def ex(infra, kb):
    infra.observe(0)
    return Executor(infra, kb, deadline=300)


@pytest.fixture
def planning(infra, topology):
    return build_capabilities(infra), build_boundary(topology["parties"])


def quota_plan(infra, planning, max_count=36):
    caps, boundary = planning
    original = infra.quotas["q-retailer-meter"]
    opt = ResponseOption("F1:ReduceQuota", T.REDUCE_QUOTA, "retailer", None, 0.9, 0.5,
                         {"grant": quota_grant_for(original, max_count, "r1"), "original": original.quota_id,
                          "probe_subject": "cis"})
    return synthesise(with_modes(opt, feasible(opt, caps, boundary)), caps, boundary)


def revoke_plan(planning, subject="cpd-app"):
    caps, boundary = planning
    opt = ResponseOption("F1:RevokeCredentials", T.REVOKE_CREDENTIALS, "household", subject, 0.95, 2.5,
                         {"duration": 86400, "pattern": {"resource": "history", "action": "delete"}})
    return synthesise(opt, caps, boundary)


def test_clean_run_uses_first_alternatives(ex, infra, planning):
    report = ex.run(quota_plan(infra, planning), 100, "F1")
    assert report.overall is Overall.SUCCEEDED
    assert [a.alternative for a in report.activities] == [0, 0, 0, 0]
    assert report.verification is VerifyVerdict.PASS and not report.disruptive
    assert infra.quota_in_force("retailer", "meter", "read").max_count == 36
    assert report.effects[0]["restore"]["op"] == "quota-swap"


def test_failed_update_falls_over_to_redeploy(ex, infra, planning):
    ex.inject(1, 0)
    report = ex.run(quota_plan(infra, planning), 100)
    assert report.overall is Overall.SUCCEEDED and report.activities[1].alternative == 1
    assert report.disruptive and report.elapsed == 30
    assert not infra.pdp_available(110) and infra.pdp_available(130)


def test_all_alternatives_fail_rolls_back(ex, infra, planning):
    before = infra.state_digest()
    ex.inject(1)
    report = ex.run(quota_plan(infra, planning), 100)
    assert report.overall is Overall.ROLLED_BACK
    assert infra.state_digest() == before
    assert infra.quota_in_force("retailer", "meter", "read").max_count == 96


@pytest.mark.parametrize("activity", [1, 2, 3])
def test_rollback_restores_state_for_any_failing_activity(ex, infra, planning, activity):
    plan = quota_plan(infra, planning)
    ex.inject(activity)
    report = ex.run(plan, 100)
    cp = ex.checkpoints[report.checkpoint_id]
    assert report.overall is Overall.ROLLED_BACK
    assert infra.policy_digests() == cp.digests and infra.state_digest() == cp.state_digest


def test_checkpoint_rollback(ex, infra):
    cp = ex.checkpoint(5)
    ex.rollback(cp.checkpoint_id)
    assert infra.state_digest() == cp.state_digest
    pol = infra.active_policy()
    infra.reload_policy(PolicyDelta(pol.version, remove=("ems-cis",)), ReloadMode.UPDATE, 6)
    assert infra.policy_digests() != cp.digests
    ex.rollback(cp.checkpoint_id)
    assert infra.policy_digests() == cp.digests
    with pytest.raises(UnknownCheckpoint):
        ex.rollback("C999")


def test_policy_change_modes(ex, infra):
    pol = infra.active_policy()
    ok, downtime, _ = ex.apply_policy_change(PolicyDelta(pol.version), ReloadMode.UPDATE, 10)
    assert ok is Outcome.SUCCESS and downtime == (10, 10)
    stale, _, err = ex.apply_policy_change(PolicyDelta(pol.version), ReloadMode.UPDATE, 11)
    assert stale is Outcome.FAILED and "based on v1" in err
    _, downtime, _ = ex.apply_policy_change(infra.active_policy(), ReloadMode.REDEPLOY, 20)
    assert downtime == (20, 50)
    assert ex.knowledge.detect_drift(infra).is_empty()


def test_revocation_verified_and_noop_effector_caught(ex, infra, planning):
    s = infra.authenticate("cpd-app", "household-idp", Origin(), 1)
    report = ex.run(revoke_plan(planning), 10)
    assert report.verification is VerifyVerdict.PASS
    assert not infra.request_access(s, "history", "delete", 11).permitted

    fresh = Executor(infra, None)
    infra.tamper_policy(ex.checkpoints[report.checkpoint_id].captured["policies"][PolicyKind.ACCESS_CONTROL])
    fresh.inject(1, mode="noop")
    faulty = fresh.run(revoke_plan(planning), 20)
    assert faulty.verification is VerifyVerdict.FAIL and faulty.overall is Overall.ROLLED_BACK


def test_vacuous_verify(ex):
    assert ex.verify(None, 0) is VerifyVerdict.PASS
    assert ex.verify(ProbeSpec("cis", "meter", "read", zone="remote"), 0) is VerifyVerdict.FAIL


def test_request_honoured_before_deadline(ex, infra):
    ex.invoke_effector("idp-request", {"idp": "service-idp", "subject": "service", "action": "suspend",
                                       "deadline": 300}, 0)
    infra.process_idp_requests(120)
    events = ex.poll_pending(120)
    assert [(p, e.met) for p, e in events] == [("service", True)]
    assert infra.trust["service"].trust == pytest.approx(0.85)


def test_ignored_request_penalised_and_escalated(ex, infra):
    ex.invoke_effector("idp-request", {"idp": "retailer-idp", "subject": "cis", "action": "suspend",
                                       "deadline": 300}, 0)
    infra.process_idp_requests(200)
    assert ex.poll_pending(200) == []
    ex.pending[0].escalation = {"idp": "retailer-idp", "duration": 3600}
    infra.observe(300)
    events = ex.poll_pending(300)
    assert [(p, e.met) for p, e in events] == [("retailer", False)]
    assert infra.trust["retailer"].trust == pytest.approx(0.6)
    assert infra.is_banned("retailer-idp", 301)


def test_empty_readings_after_quota(ex, infra):
    s = infra.authenticate("cis", "retailer-idp", Origin("remote"), 0)
    for t in range(96):
        assert infra.request_access(s, "meter", "read", 1 + t).obligations == ()
    assert ex.empty_readings_fallback("retailer", "meter") is Outcome.SUCCESS
    assert infra.request_access(s, "meter", "read", 200).obligations == ("empty-reading",)
    ex.withdraw_fallback("retailer", "meter")
    assert not infra.request_access(s, "meter", "read", 201).permitted
    assert ex.empty_readings_fallback("household", "thermostat") is Outcome.FAILED


def test_sessions_handling(ex, infra):
    a = infra.authenticate("couple", "household-idp", Origin(), 1)
    b = infra.authenticate("couple", "household-idp", Origin("remote", "ASIA"), 2)
    assert ex.handle_sessions([]) == []
    done = ex.handle_sessions(["couple"])
    assert {s.session_id for s in done} == {a.session_id, b.session_id}
    assert infra.sessions_of("couple") == []


def test_effector_registry(ex):
    d = ex.deploy_effector("idp-request", {"mode": "RequestOnly"})
    assert d.deadline == 300
    ex.withdraw_effector(d.effector_id)
    with pytest.raises(UnknownEffector):
        ex.withdraw_effector(d.effector_id)
    with pytest.raises(UnknownTemplate):
        ex.deploy_effector("laser")


def test_outbox(ex, tmp_path):
    ex.outbox_path = tmp_path / "outbox.jsonl"
    ex.notify("household", "hello", 5, "F1")
    assert ex.outbox_path.read_text() == outbox_lines(ex.outbox)


def test_plan_that_would_raise_a_quota_is_refused(ex, infra, planning):
    before = infra.policy_digests()
    report = ex.run(quota_plan(infra, planning, max_count=200), 100, "F1")
    assert report.overall is Overall.ROLLED_BACK
    assert infra.policy_digests() == before
    assert infra.quota_in_force("retailer", "meter", "read").max_count == 96


def test_lifting_a_measure_may_restore_wider_access(ex, infra, planning):
    report = ex.run(quota_plan(infra, planning), 100, "F1")
    assert ex.lift(report.effects[0]["restore"], 500) is Outcome.SUCCESS
    assert infra.quota_in_force("retailer", "meter", "read").max_count == 96
