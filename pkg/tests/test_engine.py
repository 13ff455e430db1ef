import io
import math

import pytest

from topoemu.backend import SimulatedBackend
from topoemu.dynamics import build_snapshot_sequence
from topoemu.engine import (
    CSV_COLUMNS,
    EmulationManager,
    EngineError,
    PartitionError,
    WorkloadError,
    WorkloadSpec,
    partition_instances,
    run_experiment,
    write_csv,
)
from topoemu.topology import parse_experiment

PAIR = """
experiment:
  services: [{name: a}, {name: b}, {name: c}]
  bridges: [{name: x}]
  links:
    - {orig: a, dest: x, latency: 5, up: 50Mbps, down: 50Mbps}
    - {orig: c, dest: x, latency: 5, up: 50Mbps, down: 50Mbps}
    - {orig: x, dest: b, latency: 5, up: 100Mbps, down: 100Mbps}
"""


@pytest.fixture(scope="module")
def pair():
    return parse_experiment(PAIR)


def flows(*pairs, rate=math.inf, start=0.0, end=math.inf):
    return WorkloadSpec({p: ((start, end, rate),) for p in pairs})


class TestSingleManager:
    def test_one_flow_gets_bottleneck_after_one_tick(self, pair):
        res = run_experiment(pair, flows(("a-0", "b-0")), duration_s=0.05)
        assert [(r.src, r.dst, r.allocated_bps) for r in res.rows] == [("a-0", "b-0", 50_000_000)]
        assert res.rows[0].latency_ms == 10 and res.rows[0].loss == 0

    def test_two_flows_share_the_server_link(self, pair):
        res = run_experiment(pair, flows(("a-0", "b-0"), ("c-0", "b-0")), duration_s=1)
        last = [r for r in res.rows if r.time_s == 1]
        assert [r.allocated_bps for r in last] == [50_000_000, 50_000_000]

    def test_finite_demand_respected(self, pair):
        res = run_experiment(pair, flows(("a-0", "b-0"), rate=3e6), duration_s=0.5)
        assert all(r.allocated_bps == 3_000_000 and r.demand_bps == 3e6 for r in res.rows)

    def test_no_flows(self, pair):
        seq = build_snapshot_sequence(pair)
        backends = {n: SimulatedBackend() for n in seq.instances}
        mgr = EmulationManager(0, seq.instances, seq, backends)
        assert mgr.collect(0.05) == [b"\x00\x00\x00\x00"]
        report = mgr.enforce(0.05)
        assert report.rows == () and report.metadata_bytes == 0
        assert not [c for b in backends.values() for c in b.calls if c[0] == "change_bandwidth"]

    def test_inactive_flow_emits_no_rows(self, pair):
        res = run_experiment(pair, flows(("a-0", "b-0"), start=1, end=2), duration_s=3, tick_s=0.5)
        assert sorted({r.time_s for r in res.rows}) == [1.5, 2.0]

    def test_zero_duration(self, pair):
        res = run_experiment(pair, flows(("a-0", "b-0")), duration_s=0)
        assert res.rows == [] and res.metadata == []

    def test_bad_arguments(self, pair):
        with pytest.raises(ValueError):
            run_experiment(pair, duration_s=-1)
        with pytest.raises(ValueError):
            run_experiment(pair, duration_s=1, tick_s=0)
        with pytest.raises(WorkloadError, match="unknown"):
            run_experiment(pair, flows(("a-0", "z-0")), duration_s=1)

    def test_missing_backend(self, pair):
        seq = build_snapshot_sequence(pair)
        with pytest.raises(EngineError, match="no backend"):
            EmulationManager(0, ["a-0"], seq, {})

    def test_backend_failure_names_the_flow(self, pair):
        class Broken(SimulatedBackend):
            def query_usage(self, ip):
                raise OSError("gone")

        seq = build_snapshot_sequence(pair)
        w = flows(("a-0", "b-0"))
        backends = {n: SimulatedBackend() for n in seq.instances}
        backends["a-0"] = Broken({"10.1.0.2": w.segments[("a-0", "b-0")]})
        mgr = EmulationManager(0, seq.instances, seq, backends)
        with pytest.raises(EngineError, match=r"a-0.*b-0"):
            mgr.tick(0.05)


class TestWorkloadSpec:
    def test_overlap_rejected(self):
        with pytest.raises(WorkloadError, match="overlapping"):
            WorkloadSpec({("a-0", "b-0"): ((0, 10, 1), (5, 20, 1))})

    def test_bare_name_of_replicated_service(self, figure1):
        t = parse_experiment(PAIR + "workload:\n  - {src: a, dst: b, start: 0, rate: 1Mbps}\n")
        assert WorkloadSpec.from_topology(t).segments == {("a-0", "b-0"): ((0, math.inf, 1_000_000),)}
        text = PAIR.replace("{name: b}", "{name: b, replicas: 2}") + "workload:\n  - {src: a, dst: b, start: 0}\n"
        with pytest.raises(WorkloadError, match="replicated"):
            WorkloadSpec.from_topology(parse_experiment(text))


class TestPartition:
    def test_round_robin(self):
        assert partition_instances(["a", "b", "c"], 2) == (("a", "c"), ("b",))

    @pytest.mark.parametrize("groups, match", [
        ([["a", "b"], ["b", "c"]], "assigned to managers"),
        ([["a"], ["b"]], "without a manager"),
        ([["a", "b", "c", "d"]], "unknown"),
        ([], "empty"),
        (0, "at least 1"),
    ])
    def test_invalid(self, groups, match):
        with pytest.raises(PartitionError, match=match):
            partition_instances(["a", "b", "c"], groups)


@pytest.fixture(scope="module")
def result(listing):
    return run_experiment(listing, duration_s=260, tick_s=0.5)


@pytest.fixture(scope="module")
def dumbbell_run(dumbbell):
    seq = build_snapshot_sequence(dumbbell)
    return seq, run_experiment(dumbbell, duration_s=660, tick_s=1.0, sequence=seq)


class TestListing:
    def test_phases(self, result):
        s = dict(result.series("c1-0", "sv-0"))
        assert s[100.0] == 10_000_000 and s[199.5] == 10_000_000
        assert all(s[t / 2] == 0 for t in range(401, 420))
        assert s[210.5] == 100_000_000
        assert max(s) < 240.5

    def test_partitioned_rows(self, result):
        rows = [r for r in result.rows if 200 < r.time_s < 210]
        assert rows and all(r.loss == 1 and math.isnan(r.latency_ms) for r in rows)

    def test_jitter_follows_events(self, result):
        by_t = {r.time_s: r for r in result.rows}
        assert by_t[100.0].jitter_ms == 0.25 and by_t[150.0].jitter_ms == 0.5
        assert by_t[220.0].latency_ms == 12


class TestInvariants:
    def test_capacity_at_every_tick(self, dumbbell_run):
        seq, res = dumbbell_run
        ct = seq[0].collapsed
        load: dict[tuple[float, int], int] = {}
        for r in res.rows:
            for lid in ct.link_ids(r.src, r.dst):
                load[(r.time_s, lid)] = load.get((r.time_s, lid), 0) + r.allocated_bps
        assert load
        for (_, lid), total in load.items():
            assert total <= ct.links[lid].bandwidth_bps

    def test_allocations_below_demand(self, dumbbell_run):
        _, res = dumbbell_run
        assert all(0 <= r.allocated_bps <= r.demand_bps for r in res.rows)

    def test_deterministic(self, dumbbell, dumbbell_run):
        seq, res = dumbbell_run
        again = run_experiment(dumbbell, duration_s=660, tick_s=1.0, sequence=seq)
        assert again.to_csv() == res.to_csv()

    def test_metadata_independent_of_demand(self, pair):
        a = run_experiment(pair, flows(("a-0", "b-0"), ("c-0", "b-0"), rate=1e6), managers=2, duration_s=2)
        b = run_experiment(pair, flows(("a-0", "b-0"), ("c-0", "b-0"), rate=9e7), managers=2, duration_s=2)
        assert a.metadata == b.metadata and sum(m for _, _, m in a.metadata) > 0

    def test_single_manager_sends_nothing(self, pair):
        res = run_experiment(pair, flows(("a-0", "b-0")), duration_s=1)
        assert all(m == 0 for _, _, m in res.metadata)


class TestCsv:
    def test_format(self, pair):
        res = run_experiment(pair, flows(("a-0", "b-0")), duration_s=0.1)
        lines = res.to_csv().splitlines()
        assert lines[0] == ",".join(CSV_COLUMNS)
        assert lines[1] == "0.05,0,a-0,b-0,inf,50000000,0,10,0"

    def test_write_csv_empty(self):
        buf = io.StringIO()
        write_csv([], buf)
        assert buf.getvalue() == ",".join(CSV_COLUMNS) + "\n"
