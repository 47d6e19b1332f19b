"""Bandwidth allocation, trace parsing, replay and report output."""
import io
import random
from pathlib import Path

import pytest

from pbmkit.dsl import parse
from pbmkit.model import Admission, Catalogs, timestamp_at
from pbmkit.pdp import Decision
from pbmkit.pep_sim import (
    AllocationReport,
    FlowAllocation,
    Pipe,
    TraceError,
    allocate,
    read_trace,
    replay,
    write_report,
)
from pbmkit.refiner import compile_strategy, enumerate_strategies

from .generators import gen_allocate_instance
from .oracles import oracle_allocate

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


def D(mn=None, mx=None, prio=1, deny=False):
    if deny:
        return Decision((), Admission.DENY, None, None, prio)
    return Decision((), Admission.ALLOW, mn, mx, prio)


@pytest.fixture(scope="module")
def campus():
    doc = parse((FIXTURES / "unicauca.pbm").read_text())
    [strategy] = enumerate_strategies(doc.graph, "G1-1")
    return doc, compile_strategy(doc, strategy)


# -- allocate ------------------------------------------------------------------


def test_guaranteed_minimums_then_priority_weighted_surplus():
    flows = [(D(64, prio=9), 64), (D(64, prio=9), 64), (D(prio=4), 10000)]
    assert allocate(flows, 200) == [64, 64, 72]


def test_uncontended_demands_fully_met():
    flows = [(D(), 120), (D(50), 300), (D(prio=8), 7)]
    assert allocate(flows, 1000) == [120, 300, 7]


def test_zero_capacity_grants_nothing():
    assert allocate([(D(100), 500), (D(), 50)], 0) == [0, 0]


def test_denied_flows_get_zero_and_free_capacity():
    assert allocate([(D(deny=True), 500), (D(), 10)], 1000) == [0, 10]


def test_max_bound_caps_grant():
    assert allocate([(D(mx=30), 100)], 1000) == [30]


def test_higher_tier_guarantees_served_first():
    flows = [(D(80, prio=9), 80), (D(80, prio=1), 80)]
    assert allocate(flows, 100) == [80, 20]


def test_scarce_pool_split_proportionally_house_monotone():
    flows = [(D(6), 6), (D(6), 6), (D(2), 2)]
    assert allocate(flows, 10) == [5, 4, 1]
    # one extra kilobit never shrinks anyone's share
    assert allocate(flows, 11) == [5, 5, 1]


def test_pipe_minimum_dealt_round_robin():
    pipes = [Pipe("X", 90, None, 5, (0, 1))]
    assert allocate([(D(), 100), (D(), 20)], 90, pipes) == [70, 20]


def test_pipe_maximum_shared_evenly():
    pipes = [Pipe("X", None, 100, 5, (0, 1))]
    assert allocate([(D(), 100), (D(), 100)], 1000, pipes) == [50, 50]


def test_pipe_max_binds_flow_minimum_draw():
    # the pipe's own max bounds what its min guarantee can pull in
    pipes = [Pipe("X", 60, 80, 5, (0, 1))]
    grants = allocate([(D(), 100), (D(), 100)], 1000, pipes)
    assert sum(grants) == 80


def test_denied_member_excluded_from_pipe():
    pipes = [Pipe("X", None, 100, 5, (0, 1))]
    grants = allocate([(D(deny=True), 500), (D(), 500)], 1000, pipes)
    assert grants == [0, 100]


def test_allocate_input_validation():
    with pytest.raises(ValueError, match="capacity"):
        allocate([], -1)
    with pytest.raises(ValueError, match="demand"):
        allocate([(D(), -5)], 100)
    with pytest.raises(ValueError, match="references flow"):
        allocate([(D(), 10)], 100, [Pipe("X", 50, None, 5, (3,))])


def test_pipe_validation():
    with pytest.raises(ValueError, match="needs a minimum or a maximum"):
        Pipe("X", None, None, 5, (0,))
    with pytest.raises(ValueError, match="must be positive"):
        Pipe("X", 0, None, 5, (0,))
    with pytest.raises(ValueError, match="min exceeds"):
        Pipe("X", 100, 50, 5, (0,))
    with pytest.raises(ValueError, match="priority"):
        Pipe("X", 50, None, 0, (0,))


def test_allocation_record_validation():
    with pytest.raises(ValueError, match="exceeds demand"):
        FlowAllocation("f1", (), 10, 5, False)
    with pytest.raises(ValueError, match="denied flow"):
        FlowAllocation("f1", (), 3, 5, True)
    with pytest.raises(ValueError, match="negative"):
        FlowAllocation("f1", (), -1, 5, False)
    ok = FlowAllocation("f1", ("P1",), 5, 5, False)
    with pytest.raises(ValueError, match="does not match"):
        AllocationReport(0, (ok,), 100, 4)
    with pytest.raises(ValueError, match="exceeds link capacity"):
        AllocationReport(0, (ok,), 4, 5)


def test_random_instances_match_reference_allocator():
    rng = random.Random(44)
    for _ in range(400):
        flows, capacity, pipes = gen_allocate_instance(rng)
        got = allocate(flows, capacity, pipes)
        assert got == oracle_allocate(flows, capacity, pipes)
        assert sum(got) <= capacity
        for (decision, demand), grant in zip(flows, got):
            assert 0 <= grant <= demand
            if decision.admission is Admission.DENY:
                assert grant == 0
            elif decision.effective_max_kbps is not None:
                assert grant <= decision.effective_max_kbps
        for pipe in pipes:
            total = sum(got[i] for i in pipe.members)
            if pipe.max_kbps is not None:
                assert total <= pipe.max_kbps


# -- traces --------------------------------------------------------------------


def test_read_trace_fixture():
    flows = read_trace((FIXTURES / "sample_trace.csv").read_text().splitlines())
    assert len(flows) == 4
    assert flows[0].timestamp == 399600
    assert flows[0].port == 6881
    assert flows[1].demand_kbps == 300
    assert flows[2].protocol == "udp"


def test_read_trace_errors():
    with pytest.raises(TraceError, match="line 1: empty trace"):
        read_trace([])
    with pytest.raises(TraceError, match="line 1: expected header"):
        read_trace(["time,who\n"])
    header = "ts,src,dst,proto,port,demand_kbps"
    with pytest.raises(TraceError, match="line 3: expected 6 fields, got 2"):
        read_trace([header, "0,10.0.0.1,10.0.0.2,tcp,80,5", "0,oops"])
    with pytest.raises(TraceError, match="line 2: .*protocol"):
        read_trace([header, "0,10.0.0.1,10.0.0.2,icmp,80,5"])
    with pytest.raises(TraceError) as info:
        read_trace([header, "zero,10.0.0.1,10.0.0.2,tcp,80,5"])
    assert info.value.line == 2


def test_read_trace_skips_blank_rows():
    header = "ts,src,dst,proto,port,demand_kbps"
    flows = read_trace([header, "", "5,10.0.0.1,10.0.0.2,tcp,80,9", ""])
    assert len(flows) == 1


# -- replay --------------------------------------------------------------------


def test_replay_empty_trace():
    assert replay([], Catalogs(), [], 100) == []


def test_replay_fixture_report(campus):
    doc, rules = campus
    flows = read_trace((FIXTURES / "sample_trace.csv").read_text().splitlines())
    reports = replay(rules, doc.catalogs, flows, 2000)
    buf = io.StringIO()
    write_report(reports, buf)
    assert buf.getvalue() == (
        "ts,flow,rules,granted_kbps,demand_kbps,denied\n"
        "399600,f1,P9,0,2000,true\n"
        "399600,f2,P1,300,300,false\n"
        "399600,f3,P4,64,64,false\n"
        "435600,f4,P10,2000,2000,false\n"
    )
    assert [r.timestep for r in reports] == [399600, 435600]
    assert reports[0].used_kbps == 364


def test_replay_builds_aggregate_pipes(campus):
    doc, rules = campus
    ts = timestamp_at(1, 600, -300)
    header = "ts,src,dst,proto,port,demand_kbps"
    rows = [
        f"{ts},10.1.7.1,198.18.0.50,tcp,21,400",
        f"{ts},10.1.7.1,198.18.0.51,tcp,20,400",
    ]
    [report] = replay(rules, doc.catalogs, read_trace([header] + rows), 2000)
    # both uploads sit in one aggregate ceiling of 512
    assert [f.rules for f in report.flows] == [("P12",), ("P12",)]
    assert [f.granted_kbps for f in report.flows] == [256, 256]


def test_replay_buckets_compose(campus):
    doc, rules = campus
    header = "ts,src,dst,proto,port,demand_kbps"
    rows = [
        "399600,10.1.1.3,198.18.0.10,tcp,25,300",
        "399630,10.1.3.1,198.18.0.11,udp,5060,64",
        "399659,10.1.5.9,198.18.0.12,tcp,9999,800",
        "435600,10.1.20.7,198.18.0.9,tcp,6881,2000",
    ]
    flows = read_trace([header] + rows)
    whole = replay(rules, doc.catalogs, flows, 500, step_seconds=60)
    assert [r.timestep for r in whole] == [399600, 435600]
    first_alone = replay(rules, doc.catalogs, flows[:3], 500, step_seconds=60)
    assert whole[0].flows == first_alone[0].flows
    # flow names continue across buckets
    assert [f.flow for r in whole for f in r.flows] == ["f1", "f2", "f3", "f4"]


def test_replay_rejects_bad_input(campus):
    doc, rules = campus
    header = "ts,src,dst,proto,port,demand_kbps"
    flows = read_trace([
        header,
        "100,10.0.0.1,10.0.0.2,tcp,80,5",
        "50,10.0.0.1,10.0.0.2,tcp,80,5",
    ])
    with pytest.raises(ValueError, match="ordered by timestamp"):
        replay(rules, doc.catalogs, flows, 100)
    with pytest.raises(ValueError, match="at least 1"):
        replay(rules, doc.catalogs, [], 100, step_seconds=0)
