"""Policy decision point: flow decisions, conflict detection, translation.

decide() combines every rule whose condition matches a flow: an explicit
Deny dominates, effective bandwidth bounds are the tightest of the matched
bounds (largest min, smallest max; min is clamped to max and flagged when
they cross), and priority comes from the first matched rule that sets one.
A flow matching no rule is allowed at priority 1 with no bounds.

detect_conflicts() examines every rule pair whose condition spaces overlap
and attaches a deterministic witness flow taken from the overlap: the
lowest common address on each side, the lowest common protocol/port, and
the earliest common weekly minute.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from ipaddress import IPv4Address, IPv4Network

from .model import (
    Admission,
    Catalogs,
    Condition,
    DAY_NAMES,
    EntityGroup,
    FlowDescriptor,
    PolicyRule,
    Scope,
    ServiceClass,
    ServiceMatcher,
    TimeClass,
    condition_matches,
    day_runs,
    timestamp_at,
)


class DecisionFlag(Enum):
    MIN_EXCEEDS_MAX = "MinExceedsMax"
    ADMISSION_CONTRADICTION = "AdmissionContradiction"


@dataclass(frozen=True)
class Decision:
    """Outcome of evaluating a rule set against one flow."""

    matched: tuple[str, ...]
    admission: Admission
    effective_min_kbps: int | None
    effective_max_kbps: int | None
    priority: int
    flags: frozenset[DecisionFlag] = frozenset()

    def __post_init__(self):
        if not (1 <= self.priority <= 9):
            raise ValueError(f"decision priority must be in 1..9, got {self.priority}")
        if self.admission is Admission.DENY and (
            self.effective_min_kbps is not None or self.effective_max_kbps is not None
        ):
            raise ValueError("a denied decision cannot carry bandwidth bounds")
        if (
            self.effective_min_kbps is not None
            and self.effective_max_kbps is not None
            and self.effective_min_kbps > self.effective_max_kbps
        ):
            raise ValueError("effective min exceeds effective max")


def decide(
    rules: tuple[PolicyRule, ...] | list[PolicyRule],
    flow: FlowDescriptor,
    catalogs: Catalogs,
) -> Decision:
    """Combine all matching rules (in document order) into one decision."""
    matched = [r for r in rules if condition_matches(r.condition, flow, catalogs)]
    flags: set[DecisionFlag] = set()
    denied = any(r.actions.admission is Admission.DENY for r in matched)
    allowed_explicitly = any(r.actions.admission is Admission.ALLOW for r in matched)
    if denied and allowed_explicitly:
        flags.add(DecisionFlag.ADMISSION_CONTRADICTION)
    priority = next(
        (r.actions.priority for r in matched if r.actions.priority is not None), 1
    )
    effective_min = effective_max = None
    if not denied:
        mins = [
            r.actions.bandwidth.min_kbps
            for r in matched
            if r.actions.bandwidth is not None and r.actions.bandwidth.min_kbps is not None
        ]
        maxes = [
            r.actions.bandwidth.max_kbps
            for r in matched
            if r.actions.bandwidth is not None and r.actions.bandwidth.max_kbps is not None
        ]
        effective_min = max(mins) if mins else None
        effective_max = min(maxes) if maxes else None
        if (
            effective_min is not None
            and effective_max is not None
            and effective_min > effective_max
        ):
            effective_min = effective_max
            flags.add(DecisionFlag.MIN_EXCEEDS_MAX)
    return Decision(
        matched=tuple(r.id for r in matched),
        admission=Admission.DENY if denied else Admission.ALLOW,
        effective_min_kbps=effective_min,
        effective_max_kbps=effective_max,
        priority=priority,
        flags=frozenset(flags),
    )


# -- conflict detection --------------------------------------------------------


class ConflictKind(Enum):
    ADMISSION = "AdmissionConflict"
    BANDWIDTH = "BandwidthConflict"
    PRIORITY_DIVERGENCE = "PriorityDivergence"


@dataclass(frozen=True)
class Conflict:
    rule_a: str
    rule_b: str
    kind: ConflictKind
    witness: FlowDescriptor

    @property
    def severity(self) -> str:
        return "warning" if self.kind is ConflictKind.PRIORITY_DIVERGENCE else "error"


def _address_witness(a: EntityGroup, b: EntityGroup) -> IPv4Address | None:
    """Lowest address in the intersection of two groups, or None."""
    if a.members is None and b.members is None:
        return IPv4Address("0.0.0.0")
    if a.members is None or b.members is None:
        members = b.members if a.members is None else a.members
        assert members is not None
        return min(net.network_address for net in members)
    candidates = [
        max(na.network_address, nb.network_address)
        for na in a.members
        for nb in b.members
        if na.overlaps(nb)
    ]
    return min(candidates) if candidates else None


_WILD_MATCHERS = (ServiceMatcher("any", 0, 65535),)
_PROTO_RANK = {"tcp": 0, "udp": 1}


def _protocols(matcher: ServiceMatcher) -> frozenset[str]:
    return frozenset(("tcp", "udp")) if matcher.protocol == "any" else frozenset((matcher.protocol,))


def _service_witness(a: ServiceClass, b: ServiceClass) -> tuple[str, int] | None:
    """Lowest (port, protocol) point matched by both classes, or None."""
    ma = tuple(a.matchers) if a.matchers is not None else _WILD_MATCHERS
    mb = tuple(b.matchers) if b.matchers is not None else _WILD_MATCHERS
    best: tuple[int, int, str] | None = None
    for x in ma:
        for y in mb:
            protos = _protocols(x) & _protocols(y)
            low = max(x.low, y.low)
            if not protos or low > min(x.high, y.high):
                continue
            proto = min(protos, key=_PROTO_RANK.__getitem__)
            key = (low, _PROTO_RANK[proto], proto)
            if best is None or key < best:
                best = key
    if best is None:
        return None
    return best[2], best[0]


def _time_witness(a: TimeClass, b: TimeClass) -> tuple[int, int] | None:
    """Earliest (day, minute) of the week covered by both classes, or None."""
    if a.windows is None and b.windows is None:
        return 0, 0
    if a.windows is None or b.windows is None:
        windows = b.windows if a.windows is None else a.windows
        assert windows is not None
        return min((min(w.days), w.start_minute) for w in windows)
    best: tuple[int, int] | None = None
    for wa in a.windows:
        for wb in b.windows:
            common = wa.days & wb.days
            start = max(wa.start_minute, wb.start_minute)
            if not common or start >= min(wa.end_minute, wb.end_minute):
                continue
            candidate = (min(common), start)
            if best is None or candidate < best:
                best = candidate
    return best


def _pair_witness(
    a: Condition, b: Condition, catalogs: Catalogs
) -> FlowDescriptor | None:
    src = _address_witness(
        catalogs.entity_group(a.source), catalogs.entity_group(b.source)
    )
    dst = _address_witness(
        catalogs.entity_group(a.destination), catalogs.entity_group(b.destination)
    )
    service = _service_witness(
        catalogs.service_class(a.service), catalogs.service_class(b.service)
    )
    when = _time_witness(catalogs.time_class(a.time), catalogs.time_class(b.time))
    if src is None or dst is None or service is None or when is None:
        return None
    proto, port = service
    day, minute = when
    return FlowDescriptor(
        src=src,
        dst=dst,
        protocol=proto,
        port=port,
        timestamp=timestamp_at(day, minute, catalogs.tz_offset_minutes),
        demand_kbps=1,
    )


def _pair_conflicts(a: PolicyRule, b: PolicyRule) -> list[ConflictKind]:
    kinds: list[ConflictKind] = []
    admissions = {a.actions.admission, b.actions.admission}
    if Admission.ALLOW in admissions and Admission.DENY in admissions:
        kinds.append(ConflictKind.ADMISSION)
    ba, bb = a.actions.bandwidth, b.actions.bandwidth
    if ba is not None and bb is not None and ba.scope is bb.scope:
        if (
            ba.min_kbps is not None
            and bb.max_kbps is not None
            and ba.min_kbps > bb.max_kbps
        ) or (
            bb.min_kbps is not None
            and ba.max_kbps is not None
            and bb.min_kbps > ba.max_kbps
        ):
            kinds.append(ConflictKind.BANDWIDTH)
    pa, pb = a.actions.priority, b.actions.priority
    if pa is not None and pb is not None and pa != pb:
        kinds.append(ConflictKind.PRIORITY_DIVERGENCE)
    return kinds


def detect_conflicts(
    rules: tuple[PolicyRule, ...] | list[PolicyRule], catalogs: Catalogs
) -> list[Conflict]:
    """All pairwise conflicts between rules with overlapping conditions."""
    conflicts: list[Conflict] = []
    ordered = list(rules)
    for i, a in enumerate(ordered):
        for b in ordered[i + 1:]:
            kinds = _pair_conflicts(a, b)
            if not kinds:
                continue
            witness = _pair_witness(a.condition, b.condition, catalogs)
            if witness is None:
                continue
            conflicts.extend(
                Conflict(a.id, b.id, kind, witness) for kind in kinds
            )
    return conflicts


# -- device translation --------------------------------------------------------


class TranslationError(Exception):
    """The rule uses an action kind or dialect the profile cannot express."""


ACTION_KINDS = ("admission", "bandwidth", "priority")
SHAPERCONF_V1 = "shaperconf-v1"


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    dialect: str
    capacity_kbps: int
    supported: frozenset[str]  # subset of ACTION_KINDS


DEFAULT_PROFILES = {
    "shaper": DeviceProfile("shaper", SHAPERCONF_V1, 100_000, frozenset(ACTION_KINDS)),
    "filter": DeviceProfile(
        "filter", SHAPERCONF_V1, 100_000, frozenset(("admission", "priority"))
    ),
}


def _rule_action_kinds(rule: PolicyRule) -> list[str]:
    kinds = []
    if rule.actions.admission is not None:
        kinds.append("admission")
    if rule.actions.bandwidth is not None:
        kinds.append("bandwidth")
    if rule.actions.priority is not None:
        kinds.append("priority")
    return kinds


def _render_addresses(group: EntityGroup) -> str:
    if group.members is None:
        return "0.0.0.0/0"
    ordered = sorted(group.members, key=lambda n: (int(n.network_address), n.prefixlen))
    return ",".join(str(net) for net in ordered)


def _render_service(svc: ServiceClass) -> tuple[str, str]:
    if svc.matchers is None:
        return "any", "any"
    protocols = {m.protocol for m in svc.matchers}
    proto = protocols.pop() if len(protocols) == 1 else "any"
    spans = sorted({(m.low, m.high) for m in svc.matchers})
    ports = ",".join(str(lo) if lo == hi else f"{lo}-{hi}" for lo, hi in spans)
    return proto, ports


def _render_time(tc: TimeClass) -> str:
    if tc.windows is None:
        return "any"
    entries: list[tuple[int, int, str]] = []
    for window in tc.windows:
        clock = (
            f"{window.start_minute // 60:02d}:{window.start_minute % 60:02d}"
            f"-{window.end_minute // 60:02d}:{window.end_minute % 60:02d}"
        )
        for first, last in day_runs(window.days):
            run = DAY_NAMES[first] if first == last else f"{DAY_NAMES[first]}-{DAY_NAMES[last]}"
            entries.append((first, window.start_minute, f"{run}:{clock}"))
    return ",".join(text for _, _, text in sorted(entries))


def translate_to_device(
    rule: PolicyRule, catalogs: Catalogs, profile: DeviceProfile
) -> list[str]:
    """Render one rule as device configuration lines (shaperconf v1)."""
    if profile.dialect != SHAPERCONF_V1:
        raise TranslationError(f"unsupported dialect {profile.dialect!r}")
    for kind in _rule_action_kinds(rule):
        if kind not in profile.supported:
            raise TranslationError(
                f"profile {profile.name!r} does not support {kind} actions"
            )
    cond = rule.condition
    src = _render_addresses(catalogs.entity_group(cond.source))
    dst = _render_addresses(catalogs.entity_group(cond.destination))
    proto, ports = _render_service(catalogs.service_class(cond.service))
    when = _render_time(catalogs.time_class(cond.time))
    actions = rule.actions
    admit = "deny" if actions.admission is Admission.DENY else "allow"
    bw = actions.bandwidth
    min_part = str(bw.min_kbps) if bw is not None and bw.min_kbps is not None else "-"
    max_part = str(bw.max_kbps) if bw is not None and bw.max_kbps is not None else "-"
    prio = str(actions.priority) if actions.priority is not None else "-"
    scope = "conn" if bw is not None and bw.scope is Scope.PER_CONNECTION else "agg"
    return [
        f"rule {rule.id} match src={src} dst={dst} proto={proto} ports={ports}"
        f" time={when} action admit={admit} min={min_part} max={max_part}"
        f" prio={prio} scope={scope}"
    ]
