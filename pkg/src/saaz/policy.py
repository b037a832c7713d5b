"""Attribute-based policies and the decision function that evaluates them.

Policies are immutable values.  Every change goes through :func:`apply_delta`
(or a whole-policy redeploy) and produces a new value with a new digest, so
the active policy can be swapped atomically by whoever owns the slot.

Combining is fixed to deny-overrides with default deny.  Rules are scanned in
ascending ``priority`` order; the first matching Deny wins, otherwise the
first matching Permit.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol

from .errors import ConflictingDelta, MalformedPredicate, StaleDelta, UnknownResource

logger = logging.getLogger(__name__)

CATEGORIES = ("subject", "resource", "action", "environment")
OPS = ("eq", "in", "lt", "le", "gt", "ge", "within")
DENY_OVERRIDES = "DenyOverrides"

DEFAULT_VOCABULARY: dict[str, frozenset[str]] = {
    "subject": frozenset({"id", "party", "role", "privilege", "idp", "location"}),
    "resource": frozenset({"id", "type", "owner"}),
    "action": frozenset({"id"}),
    "environment": frozenset({"clock", "hour", "zone", "geo"}),
}


class Effect(str, Enum):
    PERMIT = "Permit"
    DENY = "Deny"


class PolicyKind(str, Enum):
    ACCESS_CONTROL = "AccessControl"
    CREDENTIAL_VALIDATION = "CredentialValidation"
    DELEGATION_ISSUING = "DelegationIssuing"
    ATTRIBUTE_RELEASE = "AttributeRelease"


def _freeze(value: Any) -> Any:
    if isinstance(value, (list, tuple)):
        return tuple(_freeze(v) for v in value)
    return value


def _thaw(value: Any) -> Any:
    if isinstance(value, tuple):
        return [_thaw(v) for v in value]
    return value


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


@dataclass(frozen=True)
class Predicate:
    attr: str
    op: str
    value: Any

    def problem(self) -> str | None:
        """Return a description of why the predicate cannot be evaluated, if it can't."""
        if self.op not in OPS:
            return f"unknown operator {self.op!r}"
        if self.op == "in":
            if not isinstance(self.value, tuple):
                return "'in' expects a list of values"
        elif self.op == "within":
            if (
                not isinstance(self.value, tuple)
                or len(self.value) != 2
                or not all(_is_number(v) for v in self.value)
                or self.value[0] > self.value[1]
            ):
                return "'within' expects an ordered numeric pair [lo, hi]"
        elif self.op in ("lt", "le", "gt", "ge"):
            if not _is_number(self.value):
                return f"{self.op!r} expects a numeric value"
        elif isinstance(self.value, tuple):
            return "'eq' expects a scalar"
        return None

    def matches(self, values: Iterable[Any]) -> bool:
        """True when any of the attribute's values satisfies the predicate."""
        issue = self.problem()
        if issue:
            raise MalformedPredicate(f"{self.attr}: {issue}")
        return self._match(values)

    def _match(self, values: Iterable[Any]) -> bool:
        op, ref = self.op, self.value
        for v in values:
            if op == "eq":
                if v == ref:
                    return True
            elif op == "in":
                if v in ref:
                    return True
            elif not _is_number(v):
                continue
            elif op == "lt" and v < ref:
                return True
            elif op == "le" and v <= ref:
                return True
            elif op == "gt" and v > ref:
                return True
            elif op == "ge" and v >= ref:
                return True
            elif op == "within" and ref[0] <= v < ref[1]:
                return True
        return False

    def to_dict(self) -> dict:
        return {"attr": self.attr, "op": self.op, "value": _thaw(self.value)}

    @classmethod
    def from_dict(cls, data: Mapping) -> "Predicate":
        return cls(attr=data["attr"], op=data["op"], value=_freeze(data["value"]))


@dataclass(frozen=True)
class Condition:
    time_window: tuple[float, float | None] | None = None
    origin: str | None = None
    quota_ref: str | None = None

    def is_empty(self) -> bool:
        return self.time_window is None and self.origin is None and self.quota_ref is None

    def to_dict(self) -> dict:
        out: dict[str, Any] = {}
        if self.time_window is not None:
            out["time_window"] = list(self.time_window)
        if self.origin is not None:
            out["origin"] = self.origin
        if self.quota_ref is not None:
            out["quota_ref"] = self.quota_ref
        return out

    @classmethod
    def from_dict(cls, data: Mapping | None) -> "Condition | None":
        if not data:
            return None
        tw = data.get("time_window")
        return cls(
            time_window=tuple(tw) if tw is not None else None,
            origin=data.get("origin"),
            quota_ref=data.get("quota_ref"),
        )


@dataclass(frozen=True)
class Rule:
    rule_id: str
    effect: Effect
    priority: int
    target: Mapping[str, tuple[Predicate, ...]] = field(default_factory=dict)
    condition: Condition | None = None

    def predicates(self) -> Iterable[tuple[str, Predicate]]:
        for category in sorted(self.target):
            for pred in self.target[category]:
                yield category, pred

    def to_dict(self) -> dict:
        out: dict[str, Any] = {
            "id": self.rule_id,
            "effect": self.effect.value,
            "priority": self.priority,
            "target": {
                cat: [p.to_dict() for p in preds] for cat, preds in self.target.items() if preds
            },
        }
        if self.condition is not None and not self.condition.is_empty():
            out["condition"] = self.condition.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "Rule":
        target = {
            cat: tuple(Predicate.from_dict(p) for p in preds)
            for cat, preds in (data.get("target") or {}).items()
            if preds
        }
        return cls(
            rule_id=data["id"],
            effect=Effect(data["effect"]),
            priority=int(data["priority"]),
            target=target,
            condition=Condition.from_dict(data.get("condition")),
        )


def make_rule(rule_id: str, effect: Effect | str, priority: int, condition: Condition | None = None,
              **target: Iterable[tuple[str, str, Any]]) -> Rule:
    """Shorthand used by tests and templates: ``make_rule("r1", "Permit", 1, subject=[("role", "eq", "ems")])``."""
    return Rule(
        rule_id=rule_id,
        effect=Effect(effect),
        priority=priority,
        target={cat: tuple(Predicate(a, o, _freeze(v)) for a, o, v in preds) for cat, preds in target.items()},
        condition=condition,
    )


@dataclass(frozen=True)
class Policy:
    policy_id: str
    kind: PolicyKind
    version: int
    rules: tuple[Rule, ...] = ()
    combining: str = DENY_OVERRIDES

    def canonical(self) -> dict:
        return {
            "kind": self.kind.value,
            "version": self.version,
            "combining": self.combining,
            "rules": [r.to_dict() for r in self.rules],
        }

    @cached_property
    def digest(self) -> str:
        return digest(self)

    @cached_property
    def ordered_rules(self) -> tuple[Rule, ...]:
        return tuple(sorted(self.rules, key=lambda r: (r.priority, r.rule_id)))

    @cached_property
    def _malformed(self) -> str | None:
        for rule in self.rules:
            for category, pred in rule.predicates():
                if category not in CATEGORIES:
                    return f"rule {rule.rule_id}: unknown category {category!r}"
                issue = pred.problem()
                if issue:
                    return f"rule {rule.rule_id}: {category}.{pred.attr}: {issue}"
        return None

    def rule(self, rule_id: str) -> Rule | None:
        for r in self.rules:
            if r.rule_id == rule_id:
                return r
        return None

    def to_dict(self) -> dict:
        return {"policy_id": self.policy_id, **self.canonical()}

    @classmethod
    def from_dict(cls, data: Mapping) -> "Policy":
        if not isinstance(data, Mapping):
            raise ValueError("a policy must be a JSON object")
        combining = data.get("combining", DENY_OVERRIDES)
        if combining != DENY_OVERRIDES:
            raise ValueError(f"unsupported combining algorithm {combining!r}")
        return cls(
            policy_id=data["policy_id"],
            kind=PolicyKind(data["kind"]),
            version=int(data["version"]),
            rules=tuple(Rule.from_dict(r) for r in data.get("rules", ())),
            combining=combining,
        )


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def digest(policy: Policy) -> str:
    """SHA-256 over the canonical serialisation of (kind, version, combining, rules)."""
    return hashlib.sha256(canonical_json(policy.canonical()).encode()).hexdigest()


def load_policy(path: str | Path) -> Policy:
    with open(path, encoding="utf-8") as fh:
        return Policy.from_dict(json.load(fh))


def dump_policy(policy: Policy, path: str | Path) -> None:
    Path(path).write_text(json.dumps(policy.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class QuotaGrant:
    quota_id: str
    party_id: str
    resource_id: str
    action: str
    max_count: int
    window: float

    def to_dict(self) -> dict:
        return {
            "id": self.quota_id,
            "party": self.party_id,
            "resource": self.resource_id,
            "action": self.action,
            "max_count": self.max_count,
            "window": self.window,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "QuotaGrant":
        return cls(
            quota_id=data["id"],
            party_id=data["party"],
            resource_id=data["resource"],
            action=data["action"],
            max_count=int(data["max_count"]),
            window=data["window"],
        )


@dataclass(frozen=True)
class AttributeAssertion:
    subject_id: str
    name: str
    value: Any
    issuer_id: str
    valid_from: float = 0
    valid_until: float = math.inf
    signed: bool = True

    def __post_init__(self):
        if self.valid_from > self.valid_until:
            raise ValueError("valid_from must not exceed valid_until")


@dataclass(frozen=True)
class AccessRequest:
    subject: Mapping[str, frozenset]
    resource_id: str
    action: str
    environment: Mapping[str, Any] = field(default_factory=dict)
    request_id: str = ""


@dataclass(frozen=True)
class Decision:
    outcome: Effect
    matched_rule: str | None
    policy_version: int
    obligations: tuple[str, ...] = ()

    @property
    def permitted(self) -> bool:
        return self.outcome is Effect.PERMIT


class AttributeView(Protocol):
    """What the PDP needs from the information point."""

    def resource(self, resource_id: str) -> Mapping[str, Any] | None: ...

    def environment(self) -> Mapping[str, Any]: ...

    def quota(self, quota_ref: str) -> QuotaGrant | None: ...

    def quota_count(self, grant: QuotaGrant) -> int: ...


@dataclass
class StaticView:
    """An AttributeView over plain dictionaries; counters are fixed numbers."""

    resources: Mapping[str, Mapping[str, Any]] = field(default_factory=dict)
    env: Mapping[str, Any] = field(default_factory=dict)
    quotas: Mapping[str, QuotaGrant] = field(default_factory=dict)
    counters: Mapping[str, int] = field(default_factory=dict)

    def resource(self, resource_id):
        return self.resources.get(resource_id)

    def environment(self):
        return self.env

    def quota(self, quota_ref):
        return self.quotas.get(quota_ref)

    def quota_count(self, grant):
        return self.counters.get(grant.quota_id, 0)


PolicySet = Mapping[PolicyKind, Policy]


def _as_values(value: Any) -> tuple:
    if value is None:
        return ()
    if isinstance(value, (set, frozenset, list, tuple)):
        return tuple(value)
    return (value,)


def _condition_holds(cond: Condition | None, env: Mapping[str, Any], pip: AttributeView | None) -> bool:
    if cond is None:
        return True
    if cond.time_window is not None:
        start, end = cond.time_window
        clock = env.get("clock")
        if clock is None or clock < start or (end is not None and clock >= end):
            return False
    if cond.origin is not None and env.get("zone") != cond.origin:
        return False
    if cond.quota_ref is not None:
        grant = pip.quota(cond.quota_ref) if pip is not None else None
        if grant is None:
            raise MalformedPredicate(f"unknown quota reference {cond.quota_ref!r}")
        if pip.quota_count(grant) >= grant.max_count:
            return False
    return True


def _decide(policy: Policy, attrs: Mapping[tuple[str, str], tuple], env: Mapping[str, Any],
            pip: AttributeView | None) -> Decision:
    problem = policy._malformed
    if problem:
        raise MalformedPredicate(problem)
    permit: Rule | None = None
    for rule in policy.ordered_rules:
        if permit is not None and rule.effect is Effect.PERMIT:
            continue
        if not all(pred._match(attrs.get((cat, pred.attr), ())) for cat, pred in rule.predicates()):
            continue
        if not _condition_holds(rule.condition, env, pip):
            continue
        if rule.effect is Effect.DENY:
            return Decision(Effect.DENY, rule.rule_id, policy.version)
        permit = rule
    if permit is not None:
        return Decision(Effect.PERMIT, permit.rule_id, policy.version)
    return Decision(Effect.DENY, None, policy.version)


def request_attributes(request: AccessRequest, resource: Mapping[str, Any],
                       env: Mapping[str, Any]) -> dict[tuple[str, str], tuple]:
    attrs: dict[tuple[str, str], tuple] = {}
    for name, value in request.subject.items():
        attrs[("subject", name)] = _as_values(value)
    for name, value in resource.items():
        attrs[("resource", name)] = _as_values(value)
    attrs[("action", "id")] = (request.action,)
    for name, value in env.items():
        attrs[("environment", name)] = _as_values(value)
    return attrs


def _access_policy(policies: PolicySet | Policy | None) -> Policy | None:
    if policies is None:
        return None
    if isinstance(policies, Policy):
        return policies
    return policies.get(PolicyKind.ACCESS_CONTROL)


def evaluate(request: AccessRequest, policies: PolicySet | Policy | None, pip: AttributeView) -> Decision:
    """Decide a request against the access-control policy of ``policies``."""
    policy = _access_policy(policies)
    if policy is None or not policy.rules:
        return Decision(Effect.DENY, None, policy.version if policy else 0)
    resource = pip.resource(request.resource_id)
    if resource is None:
        raise UnknownResource(request.resource_id)
    env = {**pip.environment(), **request.environment}
    attrs = request_attributes(request, {"id": request.resource_id, **resource}, env)
    return _decide(policy, attrs, env, pip)


def _require_kind(policy: Policy, kind: PolicyKind) -> None:
    if policy.kind is not kind:
        raise ValueError(f"expected a {kind.value} policy, got {policy.kind.value}")


def validate_credentials(assertions: Iterable[AttributeAssertion], cvp: Policy,
                         clock: float) -> list[AttributeAssertion]:
    """Keep assertions whose issuer the validation policy trusts and that are valid at ``clock``."""
    _require_kind(cvp, PolicyKind.CREDENTIAL_VALIDATION)
    kept = []
    env = {"clock": clock}
    for a in assertions:
        if not (a.valid_from <= clock <= a.valid_until):
            logger.info("dropped expired assertion %s.%s from %s", a.subject_id, a.name, a.issuer_id)
            continue
        attrs = {
            ("subject", "id"): (a.subject_id,),
            ("subject", "idp"): (a.issuer_id,),
            ("resource", "id"): (a.name,),
            ("action", "id"): ("assert",),
            ("environment", "clock"): (clock,),
        }
        if _decide(cvp, attrs, env, None).permitted:
            kept.append(a)
        else:
            logger.info("dropped untrusted assertion %s.%s from %s", a.subject_id, a.name, a.issuer_id)
    return kept


def filter_release(attributes: Iterable[tuple[str, Any]], arp: Policy, requester: str) -> frozenset:
    """Subset of ``(name, value)`` pairs the release policy lets ``requester`` see."""
    _require_kind(arp, PolicyKind.ATTRIBUTE_RELEASE)
    released = set()
    for name, value in attributes:
        attrs = {
            ("subject", "id"): (requester,),
            ("resource", "id"): (name,),
            ("action", "id"): ("release",),
        }
        if _decide(arp, attrs, {}, None).permitted:
            released.add((name, value))
    return frozenset(released)


def delegation_permitted(issuer_id: str, delegator_id: str, dip: Policy) -> bool:
    """A delegated assertion is accepted when the issuing policy lets ``delegator_id`` issue via ``issuer_id``."""
    _require_kind(dip, PolicyKind.DELEGATION_ISSUING)
    attrs = {
        ("subject", "id"): (delegator_id,),
        ("subject", "idp"): (issuer_id,),
        ("action", "id"): ("delegate",),
    }
    return _decide(dip, attrs, {}, None).permitted


@dataclass(frozen=True)
class PolicyDelta:
    base_version: int
    remove: tuple[str, ...] = ()
    add: tuple[Rule, ...] = ()
    replace: tuple[Rule, ...] = ()
    kind: PolicyKind = PolicyKind.ACCESS_CONTROL

    def is_empty(self) -> bool:
        return not (self.remove or self.add or self.replace)


def apply_delta(policy: Policy, delta: PolicyDelta) -> Policy:
    if delta.base_version != policy.version:
        raise StaleDelta(f"delta based on v{delta.base_version}, policy is v{policy.version}")
    existing = {r.rule_id for r in policy.rules}
    touched = list(delta.remove) + [r.rule_id for r in delta.replace] + [r.rule_id for r in delta.add]
    if len(touched) != len(set(touched)):
        raise ConflictingDelta("delta touches the same rule id more than once")
    for rid in list(delta.remove) + [r.rule_id for r in delta.replace]:
        if rid not in existing:
            raise ConflictingDelta(f"rule {rid!r} does not exist")
    for r in delta.add:
        if r.rule_id in existing:
            raise ConflictingDelta(f"rule {r.rule_id!r} already exists")

    replacements = {r.rule_id: r for r in delta.replace}
    removed = set(delta.remove)
    rules = [replacements.get(r.rule_id, r) for r in policy.rules if r.rule_id not in removed]
    rules.extend(delta.add)
    priorities = [r.priority for r in rules]
    if len(priorities) != len(set(priorities)):
        raise ConflictingDelta("delta produces duplicate rule priorities")
    return replace(policy, version=policy.version + 1, rules=tuple(rules))


def _window_within(inner: tuple | None, outer: tuple | None, clock: float) -> bool:
    """Whether every instant from ``clock`` on that ``inner`` covers is also in ``outer``."""
    lo_i, hi_i = inner if inner is not None else (-math.inf, None)
    lo_o, hi_o = outer if outer is not None else (-math.inf, None)
    hi_i = math.inf if hi_i is None else hi_i
    hi_o = math.inf if hi_o is None else hi_o
    lo_i = max(lo_i, clock)
    return lo_i >= hi_i or (lo_i >= lo_o and hi_i <= hi_o)


def widens_access(policy: Policy, delta: PolicyDelta, quota_limits: Mapping[str, tuple[int, float]] | None = None,
                  clock: float = -math.inf) -> list[str]:
    """Rule ids through which ``delta`` could permit, at or after ``clock``, something ``policy`` denies.

    Sound but coarse.  Added Permits and removed Denies always count.  A
    replaced rule must keep its target; a Permit may only narrow its
    condition and a Deny may only widen it.  A swapped quota narrows a Permit
    when ``quota_limits`` (id -> (max_count, window)) shows it is no larger.
    """
    limits = quota_limits or {}

    def quota_narrower(old: str | None, new: str | None) -> bool:
        if old is None or old == new:
            return True
        if new not in limits or old not in limits:
            return False
        (old_max, old_win), (new_max, new_win) = limits[old], limits[new]
        return new_max <= old_max and new_win >= old_win

    rules = {r.rule_id: r for r in policy.rules}
    flagged = [r.rule_id for r in delta.add if r.effect is Effect.PERMIT]
    flagged += [rid for rid in delta.remove if rid in rules and rules[rid].effect is Effect.DENY]
    for r in delta.replace:
        prev = rules.get(r.rule_id)
        if prev is None:
            flagged.append(r.rule_id)
            continue
        if prev.effect is Effect.PERMIT and r.effect is Effect.DENY:
            continue
        if prev.effect is not r.effect or dict(prev.target) != dict(r.target):
            flagged.append(r.rule_id)
            continue
        pc, nc = prev.condition or Condition(), r.condition or Condition()
        if r.effect is Effect.PERMIT:
            ok = (_window_within(nc.time_window, pc.time_window, clock)
                  and (pc.origin is None or nc.origin == pc.origin)
                  and quota_narrower(pc.quota_ref, nc.quota_ref))
        else:
            ok = (_window_within(pc.time_window, nc.time_window, clock)
                  and (nc.origin is None or nc.origin == pc.origin)
                  and (nc.quota_ref is None or nc.quota_ref == pc.quota_ref))
        if not ok:
            flagged.append(r.rule_id)
    return flagged


@dataclass(frozen=True)
class Diagnostic:
    code: str
    severity: str
    rule_id: str | None
    message: str

    def __str__(self) -> str:
        where = f" [{self.rule_id}]" if self.rule_id else ""
        return f"{self.severity}: {self.code}{where}: {self.message}"


# Satisfying set of a single predicate: ("set", frozenset) or ("range", lo, lo_closed, hi, hi_closed).
def _satisfying(pred: Predicate):
    op, v = pred.op, pred.value
    if op == "eq":
        return ("set", frozenset([v]))
    if op == "in":
        return ("set", frozenset(v))
    inf = math.inf
    return {
        "lt": ("range", -inf, False, v, False),
        "le": ("range", -inf, False, v, True),
        "gt": ("range", v, False, inf, False),
        "ge": ("range", v, True, inf, False),
        "within": ("range", v[0], True, v[1], False) if op == "within" else None,
    }[op]


def _in_range(x, rng) -> bool:
    _, lo, lo_c, hi, hi_c = rng
    if not _is_number(x):
        return False
    above = x > lo or (lo_c and x == lo)
    below = x < hi or (hi_c and x == hi)
    return above and below


def _implies(p: Predicate, d: Predicate) -> bool:
    """Every value satisfying ``p`` also satisfies ``d``."""
    sp, sd = _satisfying(p), _satisfying(d)
    if sp[0] == "set":
        if sd[0] == "set":
            return sp[1] <= sd[1]
        return all(_in_range(x, sd) for x in sp[1])
    if sd[0] == "set":
        return False
    _, plo, plc, phi, phc = sp
    _, dlo, dlc, dhi, dhc = sd
    lower_ok = plo > dlo or (plo == dlo and (dlc or not plc))
    upper_ok = phi < dhi or (phi == dhi and (dhc or not phc))
    return lower_ok and upper_ok


def target_implies(narrow: Rule, broad: Rule) -> bool:
    """True when every request matching ``narrow``'s target also matches ``broad``'s."""
    for cat, d in broad.predicates():
        candidates = [p for c, p in narrow.predicates() if c == cat and p.attr == d.attr]
        if not any(_implies(p, d) for p in candidates):
            return False
    return True


def _target_key(rule: Rule):
    return canonical_json({"t": rule.to_dict()["target"], "c": rule.to_dict().get("condition")})


def lint(policy: Policy, vocabulary: Mapping[str, Iterable[str]] = DEFAULT_VOCABULARY) -> list[Diagnostic]:
    diags: list[Diagnostic] = []
    seen_ids: set[str] = set()
    seen_prio: dict[int, str] = {}
    well_formed: set[str] = set()
    for rule in policy.rules:
        if rule.rule_id in seen_ids:
            diags.append(Diagnostic("duplicate-rule-id", "error", rule.rule_id, "rule id used twice"))
        seen_ids.add(rule.rule_id)
        if rule.priority in seen_prio:
            diags.append(Diagnostic("duplicate-priority", "error", rule.rule_id,
                                    f"priority {rule.priority} already used by {seen_prio[rule.priority]}"))
        else:
            seen_prio[rule.priority] = rule.rule_id
        ok = True
        for cat in rule.target:
            if cat not in CATEGORIES:
                diags.append(Diagnostic("unknown-category", "error", rule.rule_id, f"category {cat!r}"))
                ok = False
        for cat, pred in rule.predicates():
            if cat in CATEGORIES and pred.attr not in set(vocabulary.get(cat, ())):
                diags.append(Diagnostic("undeclared-attribute", "error", rule.rule_id,
                                        f"{cat}.{pred.attr} is not a declared attribute"))
            issue = pred.problem()
            if issue:
                diags.append(Diagnostic("malformed-predicate", "error", rule.rule_id, f"{cat}.{pred.attr}: {issue}"))
                ok = False
        if ok:
            well_formed.add(rule.rule_id)

    by_key: dict[str, str] = {}
    for rule in policy.rules:
        if rule.rule_id not in well_formed:
            continue
        key = _target_key(rule)
        if key in by_key:
            diags.append(Diagnostic("duplicate-target", "warning", rule.rule_id,
                                    f"same target and condition as {by_key[key]}"))
        else:
            by_key[key] = rule.rule_id

    denies = [r for r in policy.ordered_rules
              if r.effect is Effect.DENY and r.rule_id in well_formed
              and (r.condition is None or r.condition.is_empty())]
    for rule in policy.ordered_rules:
        if rule.effect is not Effect.PERMIT or rule.rule_id not in well_formed:
            continue
        for deny in denies:
            if target_implies(rule, deny):
                diags.append(Diagnostic("shadowed-rule", "warning", rule.rule_id,
                                        f"never effective: every matching request is denied by {deny.rule_id}"))
                break
    return diags


def has_errors(diagnostics: Iterable[Diagnostic]) -> bool:
    return any(d.severity == "error" for d in diagnostics)
