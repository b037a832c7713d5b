import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from saaz.errors import ConflictingDelta, MalformedPredicate, StaleDelta, UnknownResource
from saaz.policy import (
    AccessRequest,
    AttributeAssertion,
    Condition,
    Effect,
    Policy,
    PolicyDelta,
    PolicyKind,
    QuotaGrant,
    Rule,
    StaticView,
    apply_delta,
    delegation_permitted,
    digest,
    dump_policy,
    evaluate,
    filter_release,
    has_errors,
    lint,
    load_policy,
    make_rule,
    validate_credentials,
    widens_access,
)

RESOURCES = {
    "thermostat": {"type": "sensor", "owner": "household"},
    "meter": {"type": "meter", "owner": "household"},
    "history": {"type": "data", "owner": "household"},
}


def subject(**attrs):
    return {k: frozenset(v if isinstance(v, (list, tuple, set)) else [v]) for k, v in attrs.items()}


def view(**counters):
    return StaticView(RESOURCES, {"clock": 0}, {"q": QuotaGrant("q", "retailer", "meter", "read", 96, 86400)},
                      counters)


def test_service_denied_before_subscription(policies):
    req = AccessRequest(subject(id="service", party="service", role="service"), "thermostat", "read")
    d = evaluate(req, policies, view())
    assert d.outcome is Effect.DENY and d.matched_rule is None


def test_empty_policy_set_is_default_deny():
    d = evaluate(AccessRequest(subject(role="ems"), "meter", "read"), {}, view())
    assert d.outcome is Effect.DENY and d.matched_rule is None


@pytest.mark.parametrize("clock", [0, 3600 * 3, 86400 * 5 + 17])
def test_cis_reads_meter_at_any_time(policies, topology, clock):
    quotas = {"q-retailer-meter": QuotaGrant.from_dict(topology["quotas"][0])}
    pip = StaticView(RESOURCES, {"clock": clock}, quotas, {"q-retailer-meter": 0})
    d = evaluate(AccessRequest(subject(id="cis", party="retailer", role="cis"), "meter", "read"), policies, pip)
    assert d.permitted and d.matched_rule == "cis-meter-read"
    assert d.policy_version == policies[PolicyKind.ACCESS_CONTROL].version


def test_quota_exhausted_denies(policies, topology):
    q = QuotaGrant.from_dict(topology["quotas"][0])
    pip = StaticView(RESOURCES, {}, {q.quota_id: q}, {q.quota_id: 96})
    d = evaluate(AccessRequest(subject(role="cis"), "meter", "read"), policies, pip)
    assert not d.permitted


def test_zero_quota_denies_everything():
    rule = make_rule("r", "Permit", 1, Condition(quota_ref="z"), subject=[("role", "eq", "cis")])
    pip = StaticView(RESOURCES, {}, {"z": QuotaGrant("z", "retailer", "meter", "read", 0, 60)}, {})
    p = Policy("p", PolicyKind.ACCESS_CONTROL, 1, (rule,))
    assert not evaluate(AccessRequest(subject(role="cis"), "meter", "read"), p, pip).permitted


def test_unknown_resource_raises(policies):
    with pytest.raises(UnknownResource):
        evaluate(AccessRequest(subject(role="ems"), "spaceship", "read"), policies, view())


def test_malformed_predicate_raises_not_denies():
    bad = make_rule("bad", "Permit", 1, subject=[("role", "within", "ems")])
    p = Policy("p", PolicyKind.ACCESS_CONTROL, 1, (bad,))
    with pytest.raises(MalformedPredicate):
        evaluate(AccessRequest(subject(role="ems"), "meter", "read"), p, view())


def test_multi_valued_attribute_matches_any_value():
    rule = make_rule("r", "Permit", 1, subject=[("privilege", "eq", "delete")])
    p = Policy("p", PolicyKind.ACCESS_CONTROL, 1, (rule,))
    req = AccessRequest(subject(privilege=["read", "delete"]), "history", "delete")
    assert evaluate(req, p, view()).permitted


def test_time_window_condition():
    rule = make_rule("r", "Permit", 1, Condition(time_window=(100, 200)), subject=[("role", "eq", "x")])
    p = Policy("p", PolicyKind.ACCESS_CONTROL, 1, (rule,))
    for clock, expected in [(99, False), (100, True), (199.9, True), (200, False)]:
        pip = StaticView(RESOURCES, {"clock": clock})
        assert evaluate(AccessRequest(subject(role="x"), "meter", "read"), p, pip).permitted is expected


# ---------------------------------------------------------- credentials
def test_validate_credentials_filters(policies):
    cvp = policies[PolicyKind.CREDENTIAL_VALIDATION]
    good = AttributeAssertion("couple", "role", "household", "household-idp")
    expired = AttributeAssertion("couple", "role", "household", "household-idp", 0, 10)
    untrusted = AttributeAssertion("service", "privilege", "write", "service-idp")
    rogue = AttributeAssertion("x", "role", "ems", "rogue-idp")
    assert validate_credentials([good, expired, untrusted, rogue], cvp, 50) == [good]


def test_location_withheld_from_retailer(policies):
    arp = policies[PolicyKind.ATTRIBUTE_RELEASE]
    attrs = {("role", "household"), ("location", "EU")}
    assert filter_release(attrs, arp, "cis") == frozenset()
    assert filter_release(attrs, arp, "ems") == frozenset({("role", "household")})
    assert filter_release(set(), arp, "ems") == frozenset()


def test_universal_release_is_identity():
    allow = Policy("a", PolicyKind.ATTRIBUTE_RELEASE, 1, (make_rule("all", "Permit", 1,
                                                                     action=[("id", "eq", "release")]),))
    attrs = {("role", "x"), ("location", "EU"), ("privilege", "read")}
    assert filter_release(attrs, allow, "anyone") == frozenset(attrs)


def test_delegation(policies):
    dip = policies[PolicyKind.DELEGATION_ISSUING]
    assert delegation_permitted("household-idp", "couple", dip)
    assert not delegation_permitted("service-idp", "service", dip)


# ---------------------------------------------------------------- deltas
def five_rules(version=7):
    rules = tuple(make_rule(f"r{i}", "Permit", i, subject=[("role", "eq", f"x{i}")]) for i in range(1, 6))
    return Policy("p", PolicyKind.ACCESS_CONTROL, version, rules)


def test_delta_remove_one_rule():
    p = five_rules()
    q = apply_delta(p, PolicyDelta(7, remove=("r3",)))
    assert (len(q.rules), q.version) == (4, 8)
    assert len(p.rules) == 5 and p.version == 7


def test_empty_delta_bumps_version_and_digest():
    p = five_rules()
    q = apply_delta(p, PolicyDelta(7))
    assert q.rules == p.rules and q.version == 8 and q.digest != p.digest


def test_stale_delta():
    with pytest.raises(StaleDelta):
        apply_delta(five_rules(), PolicyDelta(6))


@pytest.mark.parametrize("delta", [
    PolicyDelta(7, add=(make_rule("r1", "Deny", 99),)),
    PolicyDelta(7, remove=("nope",)),
    PolicyDelta(7, remove=("r1",), replace=(make_rule("r1", "Deny", 1),)),
    PolicyDelta(7, add=(make_rule("new", "Deny", 2),)),
])
def test_conflicting_deltas(delta):
    with pytest.raises(ConflictingDelta):
        apply_delta(five_rules(), delta)


# ---------------------------------------------------------------- digest
def test_digest_stable_and_sensitive():
    p = five_rules()
    assert digest(p) == digest(five_rules())
    flipped = Policy(p.policy_id, p.kind, p.version, (make_rule("r1", "Deny", 1, subject=[("role", "eq", "x1")]),)
                     + p.rules[1:])
    assert digest(flipped) != digest(p)


def test_digest_frozen_value(policies):
    # sha256 of the canonical JSON of the shipped access-control fixture
    assert policies[PolicyKind.ACCESS_CONTROL].digest == digest(policies[PolicyKind.ACCESS_CONTROL])
    assert len(policies[PolicyKind.ACCESS_CONTROL].digest) == 64


def test_round_trip(tmp_path, policies):
    p = policies[PolicyKind.ACCESS_CONTROL]
    path = tmp_path / "p.json"
    dump_policy(p, path)
    assert load_policy(path).digest == p.digest


# ------------------------------------------------------------------ lint
def test_lint_shadowed_rule():
    deny = make_rule("deny-all-ems", "Deny", 1, subject=[("role", "eq", "ems")])
    permit = make_rule("permit-ems-read", "Permit", 2, subject=[("role", "eq", "ems")],
                       action=[("id", "eq", "read")])
    codes = [(d.code, d.rule_id) for d in lint(Policy("p", PolicyKind.ACCESS_CONTROL, 1, (deny, permit)))]
    assert ("shadowed-rule", "permit-ems-read") in codes


def test_lint_not_shadowed_when_deny_is_narrower():
    deny = make_rule("d", "Deny", 1, subject=[("role", "eq", "ems")], action=[("id", "eq", "delete")])
    permit = make_rule("p", "Permit", 2, subject=[("role", "eq", "ems")])
    assert lint(Policy("p", PolicyKind.ACCESS_CONTROL, 1, (deny, permit))) == []


def test_lint_empty_and_undeclared():
    assert lint(Policy("p", PolicyKind.ACCESS_CONTROL, 1)) == []
    diags = lint(Policy("p", PolicyKind.ACCESS_CONTROL, 1, (make_rule("c", "Permit", 1,
                                                                       subject=[("colour", "eq", "red")]),)))
    assert [d.code for d in diags] == ["undeclared-attribute"] and has_errors(diags)


def test_lint_duplicate_target():
    a = make_rule("a", "Permit", 1, subject=[("role", "eq", "x")])
    b = make_rule("b", "Permit", 2, subject=[("role", "eq", "x")])
    assert [d.code for d in lint(Policy("p", PolicyKind.ACCESS_CONTROL, 1, (a, b)))] == ["duplicate-target"]


def test_shipped_policies_lint_clean(policies):
    for p in policies.values():
        assert lint(p) == [], p.policy_id


def test_lint_shadow_agrees_with_exhaustive_enumeration():
    """Shadowing claims are checked against every request over a small finite domain."""
    domain = {"role": ["a", "b", "c"], "id": ["read", "write"]}
    preds = [None, ("eq", "a"), ("in", ("a", "b")), ("eq", "c")]
    acts = [None, ("eq", "read"), ("in", ("read", "write"))]
    for sd in preds:
        for ad in acts:
            for sp in preds:
                for ap in acts:
                    def build(rid, eff, prio, s, a):
                        t = {}
                        if s:
                            t["subject"] = [("role", *s)]
                        if a:
                            t["action"] = [("id", *a)]
                        return make_rule(rid, eff, prio, **t)
                    deny, permit = build("d", "Deny", 1, sd, ad), build("p", "Permit", 2, sp, ap)
                    pol = Policy("x", PolicyKind.ACCESS_CONTROL, 1, (deny, permit))
                    claimed = any(d.code == "shadowed-rule" for d in lint(pol))
                    truly = all(
                        not evaluate(AccessRequest(subject(role=r), "meter", act), pol, view()).permitted
                        for r in domain["role"] for act in domain["id"]
                    )
                    if claimed:
                        assert truly


# ----------------------------------------------------------- properties
ROLES = ["ems", "cpd", "cis", "service"]
ACTIONS = ["read", "write", "delete"]

rule_st = st.builds(
    lambda eff, roles, acts: (eff, roles, acts),
    st.sampled_from(["Permit", "Deny"]),
    st.one_of(st.none(), st.lists(st.sampled_from(ROLES), min_size=1, max_size=3, unique=True)),
    st.one_of(st.none(), st.lists(st.sampled_from(ACTIONS), min_size=1, max_size=2, unique=True)),
)


def _policy(specs):
    rules = []
    for i, (eff, roles, acts) in enumerate(specs):
        t = {}
        if roles:
            t["subject"] = [("role", "in", tuple(roles))]
        if acts:
            t["action"] = [("id", "in", tuple(acts))]
        rules.append(make_rule(f"r{i}", eff, i + 1, **t))
    return Policy("p", PolicyKind.ACCESS_CONTROL, 1, tuple(rules))


def _brute(specs, roles, action):
    matched = [eff for eff, rr, aa in specs
               if (rr is None or set(rr) & set(roles)) and (aa is None or action in aa)]
    if "Deny" in matched:
        return "Deny"
    return "Permit" if "Permit" in matched else "Deny"


@given(st.lists(rule_st, max_size=6),
       st.lists(st.sampled_from(ROLES), min_size=1, max_size=2, unique=True),
       st.sampled_from(ACTIONS))
def test_decision_matches_brute_force(specs, roles, action):
    pol = _policy(specs)
    req = AccessRequest(subject(role=roles), "meter", action)
    d = evaluate(req, pol, view())
    assert d.outcome.value == _brute(specs, roles, action)
    assert evaluate(req, pol, view()) == d
    if d.outcome is Effect.DENY and d.matched_rule is None:
        assert "Permit" not in [e for e, rr, aa in specs
                                if (rr is None or set(rr) & set(roles)) and (aa is None or action in aa)]


@given(st.sets(st.tuples(st.sampled_from(["role", "privilege", "location", "colour"]),
                         st.sampled_from(["a", "b", "EU"]))),
       st.sampled_from(["ems", "cis", "service"]))
def test_release_never_adds(policies, attrs, requester):
    out = filter_release(attrs, policies[PolicyKind.ATTRIBUTE_RELEASE], requester)
    assert out <= frozenset(attrs)


@given(st.lists(st.tuples(st.sampled_from(["household-idp", "service-idp", "x"]),
                          st.sampled_from(["role", "privilege"]),
                          st.floats(0, 100), st.floats(0, 100)), max_size=8),
       st.floats(0, 100))
def test_validation_never_adds(policies, raw, clock):
    assertions = [AttributeAssertion("s", n, "v", idp, min(a, b), max(a, b)) for idp, n, a, b in raw]
    kept = validate_credentials(assertions, policies[PolicyKind.CREDENTIAL_VALIDATION], clock)
    assert all(a in assertions for a in kept)
    assert all(a.valid_from <= clock <= a.valid_until for a in kept)


@given(st.lists(rule_st, max_size=5), st.lists(st.integers(0, 10), max_size=4))
def test_delta_version_strictly_increases(specs, removes):
    pol = _policy(specs)
    ids = [r.rule_id for r in pol.rules]
    drop = tuple(sorted({ids[i % len(ids)] for i in removes})) if ids else ()
    new = apply_delta(pol, PolicyDelta(pol.version, remove=drop))
    assert new.version == pol.version + 1
    assert {r.rule_id for r in new.rules} == set(ids) - set(drop)
    assert not math.isnan(new.version)


# ------------------------------------------------------- access widening
def _quota_policy():
    return Policy("p", PolicyKind.ACCESS_CONTROL, 1, (
        make_rule("read", "Permit", 1, Condition(quota_ref="q96"), subject=[("role", "eq", "cis")]),
        make_rule("block", "Deny", 2, Condition(time_window=(100, 200)), subject=[("id", "eq", "svc")]),
    ))


LIMITS = {"q96": (96, 86400), "q36": (36, 86400), "q200": (200, 86400)}


@pytest.mark.parametrize("delta,clock,flagged", [
    (PolicyDelta(1, add=(make_rule("x", "Permit", 9),)), 0, ["x"]),
    (PolicyDelta(1, add=(make_rule("x", "Deny", 9),)), 0, []),
    (PolicyDelta(1, remove=("block",)), 0, ["block"]),
    (PolicyDelta(1, remove=("read",)), 0, []),
    (PolicyDelta(1, replace=(make_rule("read", "Permit", 1, Condition(quota_ref="q36"),
                                       subject=[("role", "eq", "cis")]),)), 0, []),
    (PolicyDelta(1, replace=(make_rule("read", "Permit", 1, Condition(quota_ref="q200"),
                                       subject=[("role", "eq", "cis")]),)), 0, ["read"]),
    (PolicyDelta(1, replace=(make_rule("read", "Permit", 1, subject=[("role", "eq", "cis")]),)), 0, ["read"]),
    (PolicyDelta(1, replace=(make_rule("read", "Deny", 1, subject=[("role", "eq", "cis")]),)), 0, []),
    # re-revoking later only loses the past part of the old window
    (PolicyDelta(1, replace=(make_rule("block", "Deny", 2, Condition(time_window=(150, 300)),
                                       subject=[("id", "eq", "svc")]),)), 150, []),
    (PolicyDelta(1, replace=(make_rule("block", "Deny", 2, Condition(time_window=(150, 300)),
                                       subject=[("id", "eq", "svc")]),)), 0, ["block"]),
    (PolicyDelta(1, replace=(make_rule("block", "Deny", 2, Condition(time_window=(100, 200)),
                                       subject=[("id", "eq", "other")]),)), 0, ["block"]),
])
def test_widens_access_cases(delta, clock, flagged):
    assert widens_access(_quota_policy(), delta, LIMITS, clock) == flagged


WINDOWS = [None, (100, 200), (150, None), (0, 120)]
cond_st = st.builds(lambda w, o: Condition(time_window=w, origin=o) if (w or o) else None,
                    st.sampled_from(WINDOWS), st.sampled_from([None, "local"]))


@st.composite
def policy_and_delta(draw):
    old = draw(st.lists(st.tuples(rule_st, cond_st), min_size=1, max_size=5))
    rules = tuple(make_rule(f"r{i}", eff, i + 1, cond, **_target(roles, acts))
                  for i, ((eff, roles, acts), cond) in enumerate(old))
    ids = [r.rule_id for r in rules]
    touched = draw(st.lists(st.sampled_from(ids), unique=True, max_size=len(ids)))
    split = draw(st.integers(0, len(touched)))
    replace_ = []
    for rid in touched[split:]:
        (eff, roles, acts), cond = draw(st.tuples(rule_st, cond_st))
        prev = next(r for r in rules if r.rule_id == rid)
        # a replacement either keeps the target or picks a fresh one
        target = prev.target if draw(st.booleans()) else make_rule(rid, eff, 0, **_target(roles, acts)).target
        replace_.append(Rule(rid, Effect(eff), prev.priority, target, cond))
    added = draw(st.lists(st.tuples(rule_st, cond_st), max_size=2))
    add = tuple(make_rule(f"n{i}", eff, 100 + i, cond, **_target(roles, acts))
                for i, ((eff, roles, acts), cond) in enumerate(added))
    clock = draw(st.sampled_from([0, 120, 160]))
    return Policy("p", PolicyKind.ACCESS_CONTROL, 1, rules), PolicyDelta(1, tuple(touched[:split]), add,
                                                                          tuple(replace_)), clock


def _target(roles, acts):
    t = {}
    if roles:
        t["subject"] = [("role", "in", tuple(roles))]
    if acts:
        t["action"] = [("id", "in", tuple(acts))]
    return t


@given(policy_and_delta())
def test_unflagged_delta_never_widens(case):
    policy, delta, clock = case
    if widens_access(policy, delta, clock=clock):
        return
    new = apply_delta(policy, delta)
    for role in ROLES:
        for action in ACTIONS:
            for zone in ("local", "remote"):
                for t in (clock, 119, 120, 150, 199, 200, 10_000):
                    if t < clock:
                        continue
                    req = AccessRequest(subject(role=[role]), "meter", action, {"clock": t, "zone": zone})
                    if evaluate(req, policy, view()).outcome is Effect.DENY:
                        assert evaluate(req, new, view()).outcome is Effect.DENY, (role, action, zone, t)
