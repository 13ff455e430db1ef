import math
import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import enumerate_best_path, oracle_pairs, random_topology
from topoemu.collapse import UNLIMITED_BPS, collapse_topology, compose_path, shortest_paths
from topoemu.topology import Link, parse_experiment


def _link(i, lat=0.0, jit=0.0, loss=0.0, bw=10**6):
    return Link(i, "a", "b", lat, bw, jit, loss)


class TestComposePath:
    def test_jitter_three_four_five(self):
        assert compose_path([_link(0, jit=0.3), _link(1, jit=0.4)]).jitter_ms == pytest.approx(0.5)

    def test_loss(self):
        assert compose_path([_link(0, loss=0.1), _link(1, loss=0.1)]).loss == pytest.approx(0.19)

    def test_bandwidth_is_minimum(self):
        bws = [50_000_000, 50_000_000, 100_000_000, 50_000_000]
        assert compose_path([_link(i, bw=b) for i, b in enumerate(bws)]).max_bandwidth_bps == 50_000_000

    def test_latency_sums(self):
        assert compose_path([_link(0, lat=10), _link(1, lat=10), _link(2, lat=10), _link(3, lat=5)]).latency_ms == 35

    def test_empty(self):
        p = compose_path([])
        assert (p.latency_ms, p.jitter_ms, p.loss) == (0, 0, 0)
        assert p.max_bandwidth_bps == UNLIMITED_BPS

    @given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=8), st.randoms())
    def test_jitter_permutation_invariant(self, jitters, rnd):
        links = [_link(i, jit=j) for i, j in enumerate(jitters)]
        shuffled = links[:]
        rnd.shuffle(shuffled)
        assert math.isclose(compose_path(links).jitter_ms, compose_path(shuffled).jitter_ms,
                            rel_tol=1e-12, abs_tol=1e-12)


class TestShortestPaths:
    def test_dumbbell_client_to_server(self, dumbbell):
        paths = shortest_paths(dumbbell, "c1-0")
        links = {l.id: l for l in dumbbell.links}
        hops = [(links[i].orig, links[i].dest) for i in paths["s1-0"]]
        assert hops == [("c1", "b1"), ("b1", "b2"), ("b2", "b3"), ("b3", "s1")]
        assert sum(links[i].latency_ms for i in paths["s1-0"]) == 35

    def test_dumbbell_against_enumeration(self, dumbbell):
        links = dumbbell.links
        paths = shortest_paths(dumbbell, "c1-0")
        best = enumerate_best_path([s.name for s in dumbbell.services], [b.name for b in dumbbell.bridges],
                                   links, "c1", "s1")
        assert tuple(paths["s1-0"]) == best[2] and best[0] == 35

    def test_self_is_empty(self, dumbbell):
        assert shortest_paths(dumbbell, "c1-0")["c1-0"] == []

    def test_disconnected_component_absent(self):
        t = parse_experiment("""
experiment:
  services: [{name: a}, {name: b}, {name: c}]
  bridges: [{name: x}]
  links:
    - {orig: a, dest: x, latency: 1, up: 1Mbps, down: 1Mbps}
    - {orig: b, dest: x, latency: 1, up: 1Mbps, down: 1Mbps}
""")
        paths = shortest_paths(t, "a-0")
        assert "b-0" in paths and "c-0" not in paths

    def test_services_are_not_transit(self):
        # the only route from a to c runs through service b
        t = parse_experiment("""
experiment:
  services: [{name: a}, {name: b}, {name: c}]
  links:
    - {orig: a, dest: b, latency: 1, up: 1Mbps, down: 1Mbps}
    - {orig: b, dest: c, latency: 1, up: 1Mbps, down: 1Mbps}
""")
        ct = collapse_topology(t)
        assert ("a-0", "b-0") in ct and ("a-0", "c-0") not in ct

    def test_tie_break_prefers_fewer_hops_then_smaller_ids(self):
        t = parse_experiment("""
experiment:
  services: [{name: a}, {name: z}]
  bridges: [{name: x}, {name: y}, {name: w}]
  links:
    - {orig: a, dest: y, latency: 2, up: 1Mbps}
    - {orig: y, dest: z, latency: 2, up: 1Mbps}
    - {orig: a, dest: x, latency: 2, up: 1Mbps}
    - {orig: x, dest: z, latency: 2, up: 1Mbps}
    - {orig: a, dest: w, latency: 1, up: 1Mbps}
    - {orig: w, dest: x, latency: 1, up: 1Mbps}
""")
        # three 4 ms routes; the 3-hop one loses, ids (0, 1) beat (2, 3)
        assert shortest_paths(t, "a-0")["z-0"] == [0, 1]


class TestCollapseTopology:
    def test_figure1(self, figure1):
        ct = collapse_topology(figure1)
        assert len(ct) == 6
        services = {s.name for s in figure1.services}
        for p in ct.pairs():
            transit = [ct.links[i].dest for i in p.link_ids[:-1]]
            assert not services & set(transit)
        replica = ct.path("sv-0", "sv-1")
        assert [(ct.links[i].orig, ct.links[i].dest) for i in replica.link_ids] == [("sv", "s2"), ("s2", "sv")]

    def test_single_instance_is_empty(self):
        ct = collapse_topology(parse_experiment("experiment:\n  services: [{name: a}]\n"))
        assert len(ct) == 0 and list(ct.pairs()) == []

    def test_reverse_index(self, dumbbell):
        ct = collapse_topology(dumbbell)
        for lid in ct.links:
            for src, dst in ct.paths_through(lid):
                assert lid in ct.path(src, dst).link_ids
        bottleneck = next(l.id for l in dumbbell.links if (l.orig, l.dest) == ("b1", "b2"))
        assert ("c1-0", "s1-0") in ct.paths_through(bottleneck)

    def test_rtt_symmetric(self, dumbbell):
        ct = collapse_topology(dumbbell)
        for p in ct.pairs():
            assert p.rtt_ms == ct.rtt_ms(p.dst, p.src)
        assert [ct.rtt_ms(f"c{i}-0", f"s{i}-0") for i in range(1, 7)] == [70, 60, 60, 50, 40, 40]

    def test_matrix_matches_pairs(self, figure1):
        ct = collapse_topology(figure1)
        lat = ct.matrix("latency_ms")
        for p in ct.pairs():
            i, j = ct.instance_index[p.src], ct.instance_index[p.dst]
            assert lat[i, j] == p.latency_ms
        assert ct.reachable_matrix().sum() == len(ct)

    @pytest.mark.parametrize("seed", range(25))
    def test_random_small_graphs_against_enumeration(self, seed):
        rng = random.Random(1000 + seed)
        t = random_topology(rng, max_nodes=9)
        ct = collapse_topology(t)
        svc = [s.name for s in t.services]
        brg = [b.name for b in t.bridges]
        for s in t.services:
            for d in t.services:
                if s.name == d.name:
                    continue
                best = enumerate_best_path(svc, brg, t.links, s.name, d.name)
                a, b = s.instances[0], d.instances[0]
                if best is None:
                    assert (a, b) not in ct
                else:
                    assert ct.link_ids(a, b) == best[2]
                    assert ct.latency_ms(a, b) == best[0]

    @pytest.mark.parametrize("seed", range(20))
    def test_random_graphs_against_bellman_ford(self, seed):
        t = random_topology(random.Random(seed), max_nodes=30)
        ct = collapse_topology(t)
        expected = oracle_pairs(t)
        got = {(p.src, p.dst): p for p in ct.pairs()}
        assert set(got) == set(expected)
        for key, (lat, jit, loss, bw, ids) in expected.items():
            p = got[key]
            assert (p.latency_ms, p.jitter_ms, p.loss, p.max_bandwidth_bps, p.link_ids) == (lat, jit, loss, bw, ids)

    def test_unreachable_latency_is_infinite(self):
        t = parse_experiment("experiment:\n  services: [{name: a}, {name: b}]\n")
        ct = collapse_topology(t)
        assert ct.path("a-0", "b-0") is None
        assert np.isinf(ct.latency_ms("a-0", "b-0"))
