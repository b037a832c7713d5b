import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import quota_violations
from saaz.errors import (
    CredentialsSuspended,
    IdPBanned,
    SessionTerminated,
    StaleDelta,
    UnknownSubject,
)
from saaz.infrastructure import PDP_UNAVAILABLE, ComplianceEvent, Origin, ReloadMode, SessionStatus
from saaz.policy import PolicyDelta, PolicyKind, QuotaGrant, make_rule
from saaz.sim import build_infrastructure

LOCAL = Origin("local", "EU")
REMOTE = Origin("remote", "EU")


def test_couple_session_carries_household_attributes(infra):
    s = infra.authenticate("couple", "household-idp", LOCAL, 10)
    view = s.subject_view()
    assert s.status is SessionStatus.ACTIVE
    assert view["role"] == {"household"} and view["party"] == {"household"}
    # location is withheld by the release policy
    assert "location" not in view


def test_unknown_subject(infra):
    with pytest.raises(UnknownSubject):
        infra.authenticate("mallory", "household-idp", LOCAL, 0)
    assert infra.log[-1].reason == "unknown-subject" and not infra.log[-1].permitted


def test_ban_expires_after_an_hour(infra):
    infra.observe(0)
    infra.ban_party("retailer", 3600)
    with pytest.raises(IdPBanned):
        infra.authenticate("cis", "retailer-idp", REMOTE, 1800)
    assert infra.authenticate("cis", "retailer-idp", REMOTE, 3660).status is SessionStatus.ACTIVE


def test_permanent_ban(infra):
    infra.observe(0)
    infra.ban_party("service-idp")
    assert infra.is_banned("service-idp", 10 ** 9)
    with pytest.raises(IdPBanned):
        infra.authenticate("service", "service-idp", REMOTE, 100)


def test_suspended_credentials_refused(infra):
    infra.set_credential_flag("cpd-app", "strict-protocol")
    with pytest.raises(CredentialsSuspended):
        infra.authenticate("cpd-app", "household-idp", LOCAL, 5)
    assert infra.log[-1].reason == "credentials-strict-protocol"


def test_terminated_session_is_absorbing(infra):
    s = infra.authenticate("cpd-app", "household-idp", LOCAL, 0)
    infra.terminate_session(s.session_id)
    infra.terminate_session(s.session_id)
    assert s.status is SessionStatus.TERMINATED
    with pytest.raises(SessionTerminated):
        infra.request_access(s, "history", "delete", 1)
    assert infra.log[-1].reason == "session-terminated" and not infra.log[-1].permitted


def test_amend_removes_delete_but_keeps_read(infra):
    s = infra.authenticate("cpd-app", "household-idp", LOCAL, 0)
    assert infra.request_access(s, "history", "delete", 1).permitted
    infra.amend_session(s.session_id, [("privilege", "delete")])
    assert not infra.request_access(s, "history", "delete", 2).permitted
    assert infra.request_access(s, "history", "read", 3).permitted
    before = s.activated_attributes
    infra.amend_session(s.session_id, [])
    infra.amend_session(s.session_id, [("privilege", "teleport")])
    assert s.activated_attributes == before and s.status is SessionStatus.AMENDED


def test_retailer_quota_first_and_97th(infra):
    s = infra.authenticate("cis", "retailer-idp", REMOTE, 0)
    first = infra.request_access(s, "meter", "read", 1)
    assert first.permitted and first.matched_rule == "cis-meter-read"
    for i in range(95):
        assert infra.request_access(s, "meter", "read", 2 + i).permitted
    assert not infra.request_access(s, "meter", "read", 200).permitted
    # the window slides: a day after the first read there is room again
    assert infra.request_access(s, "meter", "read", 86401.5).permitted


def test_empty_reading_fallback(infra):
    infra.register_quota(QuotaGrant("q-retailer-meter", "retailer", "meter", "read", 2, 86400))
    s = infra.authenticate("cis", "retailer-idp", REMOTE, 0)
    assert infra.request_access(s, "meter", "read", 1).obligations == ()
    infra.request_access(s, "meter", "read", 2)
    infra.fallbacks.add(("retailer", "meter"))
    d = infra.request_access(s, "meter", "read", 3)
    assert d.permitted and d.obligations == ("empty-reading",)
    infra.fallbacks.clear()
    assert not infra.request_access(s, "meter", "read", 4).permitted


def test_update_has_no_downtime_and_changes_digest(infra):
    pol = infra.active_policy()
    report = infra.reload_policy(PolicyDelta(pol.version, remove=("ems-display",)), ReloadMode.UPDATE, 50)
    assert report.downtime == (50, 50) and report.new_digest != report.old_digest


def test_stale_update_leaves_digest(infra):
    before = infra.active_policy().digest
    with pytest.raises(StaleDelta):
        infra.reload_policy(PolicyDelta(0), ReloadMode.UPDATE, 10)
    assert infra.active_policy().digest == before


def test_redeploy_fails_closed_during_restart(infra):
    s = infra.authenticate("ems", "household-idp", LOCAL, 0)
    pol = infra.active_policy()
    infra.reload_policy(pol, ReloadMode.REDEPLOY, 1000)
    d = infra.request_access(s, "thermostat", "read", 1010)
    assert not d.permitted and PDP_UNAVAILABLE in d.obligations
    assert (1010, "pdp", PDP_UNAVAILABLE) in infra.availability_events
    assert not infra.request_access(s, "thermostat", "read", 1029.9).permitted
    assert infra.request_access(s, "thermostat", "read", 1030).permitted


@pytest.mark.parametrize("start,met,expected,banned", [
    (0.5, False, 0.3, False),
    (0.05, False, 0.0, True),
    (1.0, True, 1.0, False),
])
def test_trust_arithmetic(infra, start, met, expected, banned):
    infra.observe(100)
    infra.trust["retailer"].trust = start
    rec = infra.adjust_trust("retailer", ComplianceEvent("r", 100, met))
    assert rec.trust == pytest.approx(expected)
    assert infra.is_banned("retailer") is banned


def test_query_log(infra):
    assert infra.query_log() == []
    s = infra.authenticate("ems", "household-idp", LOCAL, 0)
    c = infra.authenticate("cis", "retailer-idp", REMOTE, 1)
    for t in range(2, 12):
        infra.request_access(s if t % 2 else c, "meter", "read", t)
    assert infra.query_log((100, 200)) == []
    only = infra.query_log(predicate={"subject_id": "cis"})
    assert only == [e for e in infra.log if e.subject_id == "cis"] and len(only) == 6
    assert [e.timestamp for e in infra.query_log((3, 5))] == [3, 4, 5]


def test_console_local_only(infra):
    remote = infra.console_action("couple", "reset-password", Origin("remote", "ASIA"), 10)
    local = infra.console_action("couple", "reset-password", LOCAL, 20)
    assert not remote.permitted and local.permitted
    assert [e.action for e in infra.admin_events] == ["console:reset-password"] * 2


def test_subscription_installs_rules(infra):
    svc = infra.authenticate("service", "service-idp", REMOTE, 0)
    assert not infra.request_access(svc, "thermostat", "read", 1).permitted
    infra.console_action("couple", "subscribe", LOCAL, 2, {"service": "heating-service"})
    assert infra.request_access(svc, "thermostat", "read", 3).permitted
    assert [e.outcome for e in infra.admin_events] == ["applied", "Permit"]


def test_state_digest_restored_by_capture(infra):
    snap, digest = infra.capture(), infra.state_digest()
    infra.observe(10)
    infra.ban_party("service", 60)
    infra.set_credential_flag("cis", "suspended")
    infra.fallbacks.add(("retailer", "meter"))
    pol = infra.active_policy()
    infra.reload_policy(PolicyDelta(pol.version, add=(make_rule("x", "Deny", 999),)), ReloadMode.UPDATE, 10)
    assert infra.state_digest() != digest
    infra.restore(snap)
    assert infra.state_digest() == digest


@given(st.lists(st.floats(0, 500, allow_nan=False), min_size=1, max_size=60),
       st.integers(1, 5), st.sampled_from([10.0, 37.5, 100.0]))
def test_quota_never_exceeded(cfg, topology, policies, raw, max_count, window):
    infra = build_infrastructure(topology, cfg, policies)
    infra.register_quota(QuotaGrant("q-retailer-meter", "retailer", "meter", "read", max_count, window))
    s = infra.authenticate("cis", "retailer-idp", REMOTE, 0)
    times = sorted(raw)
    for t in times:
        infra.request_access(s, "meter", "read", t)
    permits = [e.timestamp for e in infra.log if e.permitted and e.resource_id == "meter"]
    assert quota_violations(permits, max_count, window) == 0
    # every denial was justified: max_count permits already inside the window
    for e in infra.log:
        if e.resource_id == "meter" and not e.permitted:
            assert sum(1 for p in permits if e.timestamp - window < p <= e.timestamp) >= max_count
    assert not math.isnan(sum(permits))
