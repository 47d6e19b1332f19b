"""Enforcement-point simulator: bandwidth allocation and trace replay.

allocate() shares a link between admitted flows in two phases.

Phase A walks priority tiers from 9 down to 1 and reserves guarantees.
Within a tier the items are the flows carrying a minimum (in input order)
followed by the aggregate pipes at that priority (in given order); each
item's target is the part of its minimum it can still use.  When the
remaining pool cannot cover a tier's targets the pool is split one
kilobit at a time, always to the item with the highest target/(share+1)
ratio (ties favour the earlier item), so growing the pool never shrinks
anybody's share.  Shares are applied subject to live limits (demand, own
maximum, containing pipe maximums); a pipe's share is dealt to its
members one kilobit per round.

Phase B pours the leftover pool over admitted flows tier by tier in
round-robin rounds of one kilobit, implemented in equal-sized chunks for
speed.  Denied flows take no part and receive nothing.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from ipaddress import IPv4Address
from typing import Iterable, Sequence

from .model import Admission, Catalogs, FlowDescriptor, PolicyRule, Scope
from .pdp import Decision, decide


class TraceError(Exception):
    """A trace file line is malformed."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.message = message


@dataclass(frozen=True)
class Pipe:
    """Aggregate bandwidth constraint spanning a set of flows.

    members holds indices into the flow sequence given to allocate().
    """

    rule_id: str
    min_kbps: int | None
    max_kbps: int | None
    priority: int
    members: tuple[int, ...]
    scope: Scope = Scope.AGGREGATE

    def __post_init__(self):
        if self.min_kbps is None and self.max_kbps is None:
            raise ValueError("a pipe needs a minimum or a maximum")
        for bound in (self.min_kbps, self.max_kbps):
            if bound is not None and bound <= 0:
                raise ValueError("pipe bounds must be positive")
        if (
            self.min_kbps is not None
            and self.max_kbps is not None
            and self.min_kbps > self.max_kbps
        ):
            raise ValueError("pipe min exceeds pipe max")
        if not (1 <= self.priority <= 9):
            raise ValueError("pipe priority must be in 1..9")


@dataclass(frozen=True)
class FlowAllocation:
    flow: str
    rules: tuple[str, ...]
    granted_kbps: int
    demand_kbps: int
    denied: bool

    def __post_init__(self):
        if self.granted_kbps < 0 or self.demand_kbps < 0:
            raise ValueError("negative bandwidth in allocation")
        if self.granted_kbps > self.demand_kbps:
            raise ValueError("granted bandwidth exceeds demand")
        if self.denied and self.granted_kbps != 0:
            raise ValueError("denied flow received bandwidth")


@dataclass(frozen=True)
class AllocationReport:
    timestep: int
    flows: tuple[FlowAllocation, ...]
    capacity_kbps: int
    used_kbps: int

    def __post_init__(self):
        total = sum(f.granted_kbps for f in self.flows)
        if total != self.used_kbps:
            raise ValueError("used bandwidth does not match flow grants")
        if self.used_kbps > self.capacity_kbps:
            raise ValueError("allocation exceeds link capacity")


class _LiveState:
    """Mutable grant ledger shared by both allocation phases."""

    def __init__(self, flows: Sequence[tuple[Decision, int]], pipes: Sequence[Pipe]):
        self.decisions = [d for d, _ in flows]
        self.demands = [demand for _, demand in flows]
        self.granted = [0] * len(flows)
        self.pipes = list(pipes)
        self.pipe_used = [0] * len(pipes)
        self.allowed = [d.admission is Admission.ALLOW for d in self.decisions]
        # pipe membership restricted to admitted flows
        self.pipe_members: list[tuple[int, ...]] = [
            tuple(i for i in pipe.members if self.allowed[i]) for pipe in pipes
        ]
        self.flow_pipes: list[tuple[int, ...]] = [
            tuple(
                p for p, members in enumerate(self.pipe_members) if i in members
            )
            for i in range(len(flows))
        ]

    def flow_room(self, i: int) -> int:
        """Kilobits flow i can still absorb under every live limit."""
        decision = self.decisions[i]
        room = self.demands[i] - self.granted[i]
        if decision.effective_max_kbps is not None:
            room = min(room, decision.effective_max_kbps - self.granted[i])
        for p in self.flow_pipes[i]:
            cap = self.pipes[p].max_kbps
            if cap is not None:
                room = min(room, cap - self.pipe_used[p])
        return max(room, 0)

    def grant(self, i: int, amount: int):
        self.granted[i] += amount
        for p in self.flow_pipes[i]:
            self.pipe_used[p] += amount


def _dhondt_split(targets: list[int], pool: int) -> list[int]:
    """Split pool kilobits across items by highest target/(share+1) ratio.

    One kilobit per step; ties go to the earliest item.  No item ever
    exceeds its target while another still sits below its own.
    """
    shares = [0] * len(targets)
    for _ in range(pool):
        best = -1
        for i, target in enumerate(targets):
            if shares[i] >= target:
                continue
            # target[i]/(shares[i]+1) > target[best]/(shares[best]+1), cross-multiplied
            if best < 0 or target * (shares[best] + 1) > targets[best] * (shares[i] + 1):
                best = i
        if best < 0:
            break
        shares[best] += 1
    return shares


def _apply_flow_share(state: _LiveState, i: int, share: int) -> int:
    amount = min(share, state.flow_room(i))
    if amount > 0:
        state.grant(i, amount)
    return amount


def _apply_pipe_share(state: _LiveState, p: int, share: int) -> int:
    """Deal a pipe's share to its members, one kilobit per round."""
    members = state.pipe_members[p]
    applied = 0
    while applied < share:
        progressed = False
        for i in members:
            if applied == share:
                break
            if state.flow_room(i) > 0:
                state.grant(i, 1)
                applied += 1
                progressed = True
        if not progressed:
            break
    return applied


def _guarantee_phase(state: _LiveState, capacity: int) -> int:
    pool = capacity
    for tier in range(9, 0, -1):
        items: list[tuple[str, int, int]] = []  # (kind, index, target)
        for i, decision in enumerate(state.decisions):
            if not state.allowed[i] or decision.priority != tier:
                continue
            if decision.effective_min_kbps is None:
                continue
            target = min(
                decision.effective_min_kbps - state.granted[i], state.flow_room(i)
            )
            if target > 0:
                items.append(("flow", i, target))
        for p, pipe in enumerate(state.pipes):
            if pipe.priority != tier or pipe.min_kbps is None:
                continue
            absorbable = sum(state.flow_room(i) for i in state.pipe_members[p])
            target = min(pipe.min_kbps - state.pipe_used[p], absorbable)
            if target > 0:
                items.append(("pipe", p, target))
        if not items or pool == 0:
            continue
        targets = [target for _, _, target in items]
        if sum(targets) <= pool:
            shares = targets
        else:
            shares = _dhondt_split(targets, pool)
        for (kind, index, _), share in zip(items, shares):
            if share == 0:
                continue
            if kind == "flow":
                pool -= _apply_flow_share(state, index, share)
            else:
                pool -= _apply_pipe_share(state, index, share)
    return pool


def _surplus_phase(state: _LiveState, pool: int) -> int:
    for tier in range(9, 0, -1):
        flows = [
            i
            for i, decision in enumerate(state.decisions)
            if state.allowed[i] and decision.priority == tier
        ]
        while pool > 0:
            takers = [i for i in flows if state.flow_room(i) > 0]
            if not takers:
                break
            chunk = min(state.flow_room(i) for i in takers)
            chunk = min(chunk, pool // len(takers))
            for p, members in enumerate(state.pipe_members):
                cap = state.pipes[p].max_kbps
                if cap is None:
                    continue
                inside = sum(1 for i in takers if i in members)
                if inside:
                    chunk = min(chunk, (cap - state.pipe_used[p]) // inside)
            if chunk > 0:
                for i in takers:
                    state.grant(i, chunk)
                pool -= chunk * len(takers)
                continue
            # less than one kilobit per taker: walk a single round by hand
            progressed = False
            for i in takers:
                if pool == 0:
                    break
                if state.flow_room(i) > 0:
                    state.grant(i, 1)
                    pool -= 1
                    progressed = True
            if not progressed:
                break
    return pool


def allocate(
    flows: Sequence[tuple[Decision, int]],
    capacity_kbps: int,
    pipes: Sequence[Pipe] = (),
) -> list[int]:
    """Grant bandwidth to each flow; returns kilobits in input order."""
    if capacity_kbps < 0:
        raise ValueError("capacity must not be negative")
    for _, demand in flows:
        if demand < 0:
            raise ValueError("demand must not be negative")
    for pipe in pipes:
        for i in pipe.members:
            if not 0 <= i < len(flows):
                raise ValueError(f"pipe {pipe.rule_id} references flow {i}")
    state = _LiveState(flows, pipes)
    pool = _guarantee_phase(state, capacity_kbps)
    _surplus_phase(state, pool)
    return list(state.granted)


# -- trace replay --------------------------------------------------------------

TRACE_HEADER = ("ts", "src", "dst", "proto", "port", "demand_kbps")
REPORT_HEADER = ("ts", "flow", "rules", "granted_kbps", "demand_kbps", "denied")


def read_trace(lines: Iterable[str]) -> list[FlowDescriptor]:
    """Parse a flow trace in CSV form; raises TraceError on bad rows."""
    reader = csv.reader(lines)
    flows: list[FlowDescriptor] = []
    header = next(reader, None)
    if header is None:
        raise TraceError(1, "empty trace")
    if tuple(header) != TRACE_HEADER:
        raise TraceError(1, f"expected header {','.join(TRACE_HEADER)}")
    for number, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(TRACE_HEADER):
            raise TraceError(number, f"expected {len(TRACE_HEADER)} fields, got {len(row)}")
        ts_text, src, dst, proto, port_text, demand_text = [f.strip() for f in row]
        try:
            flow = FlowDescriptor(
                src=IPv4Address(src),
                dst=IPv4Address(dst),
                protocol=proto,
                port=int(port_text),
                timestamp=int(ts_text),
                demand_kbps=int(demand_text),
            )
        except ValueError as exc:
            raise TraceError(number, str(exc)) from None
        flows.append(flow)
    return flows


def _connection_view(decision: Decision, rules_by_id: dict[str, PolicyRule]) -> Decision:
    """Refold a decision keeping only per-connection bounds.

    Aggregate bounds are enforced through pipes during replay, so the
    per-flow decision handed to allocate() must not repeat them.
    """
    mins: list[int] = []
    maxes: list[int] = []
    for rule_id in decision.matched:
        bw = rules_by_id[rule_id].actions.bandwidth
        if bw is None or bw.scope is not Scope.PER_CONNECTION:
            continue
        if bw.min_kbps is not None:
            mins.append(bw.min_kbps)
        if bw.max_kbps is not None:
            maxes.append(bw.max_kbps)
    effective_min = max(mins) if mins else None
    effective_max = min(maxes) if maxes else None
    if effective_min is not None and effective_max is not None:
        effective_min = min(effective_min, effective_max)
    return Decision(
        matched=decision.matched,
        admission=decision.admission,
        effective_min_kbps=effective_min,
        effective_max_kbps=effective_max,
        priority=decision.priority,
    )


def replay(
    rules: Sequence[PolicyRule],
    catalogs: Catalogs,
    flows: Sequence[FlowDescriptor],
    capacity_kbps: int,
    step_seconds: int = 1,
) -> list[AllocationReport]:
    """Decide and allocate a trace, one report per time step."""
    if step_seconds < 1:
        raise ValueError("step_seconds must be at least 1")
    for earlier, later in zip(flows, flows[1:]):
        if later.timestamp < earlier.timestamp:
            raise ValueError("trace flows must be ordered by timestamp")
    rules_by_id = {rule.id: rule for rule in rules}
    reports: list[AllocationReport] = []
    start = 0
    counter = 0
    while start < len(flows):
        bucket = flows[start].timestamp // step_seconds
        end = start
        while end < len(flows) and flows[end].timestamp // step_seconds == bucket:
            end += 1
        batch = flows[start:end]
        names = [f"f{counter + offset + 1}" for offset in range(len(batch))]
        counter += len(batch)
        decisions = [decide(rules, flow, catalogs) for flow in batch]
        alloc_inputs = [
            (_connection_view(d, rules_by_id), flow.demand_kbps)
            for d, flow in zip(decisions, batch)
        ]
        pipe_rules: dict[str, list[int]] = {}
        for index, decision in enumerate(decisions):
            if decision.admission is not Admission.ALLOW:
                continue
            for rule_id in decision.matched:
                bw = rules_by_id[rule_id].actions.bandwidth
                if bw is not None and bw.scope is Scope.AGGREGATE:
                    pipe_rules.setdefault(rule_id, []).append(index)
        pipes = []
        for rule_id, members in pipe_rules.items():
            rule = rules_by_id[rule_id]
            bw = rule.actions.bandwidth
            assert bw is not None
            pipes.append(
                Pipe(
                    rule_id=rule_id,
                    min_kbps=bw.min_kbps,
                    max_kbps=bw.max_kbps,
                    priority=rule.actions.priority or 1,
                    members=tuple(members),
                )
            )
        grants = allocate(alloc_inputs, capacity_kbps, pipes)
        allocations = tuple(
            FlowAllocation(
                flow=name,
                rules=decision.matched,
                granted_kbps=grant,
                demand_kbps=flow.demand_kbps,
                denied=decision.admission is Admission.DENY,
            )
            for name, decision, flow, grant in zip(names, decisions, batch, grants)
        )
        reports.append(
            AllocationReport(
                timestep=bucket * step_seconds,
                flows=allocations,
                capacity_kbps=capacity_kbps,
                used_kbps=sum(grants),
            )
        )
        start = end
    return reports


def write_report(reports: Sequence[AllocationReport], out) -> None:
    """Write allocation reports as CSV rows, one per flow."""
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(REPORT_HEADER)
    for report in reports:
        for allocation in report.flows:
            writer.writerow(
                [
                    report.timestep,
                    allocation.flow,
                    ";".join(allocation.rules),
                    allocation.granted_kbps,
                    allocation.demand_kbps,
                    "true" if allocation.denied else "false",
                ]
            )
