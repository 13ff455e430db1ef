import pytest

from topoemu.dynamics import EventError, apply_event, build_snapshot_sequence, snapshot_at
from topoemu.topology import DynamicEvent, parse_experiment


@pytest.fixture(scope="module")
def seq(listing):
    return build_snapshot_sequence(listing)


def link(state, orig, dest):
    return next(l for l in state.links if (l.orig, l.dest) == (orig, dest))


class TestApplyEvent:
    def test_jitter_change_touches_only_jitter(self, listing):
        before = listing.initial_state()
        after = apply_event(before, listing.events[0])
        for o, d in [("c1", "s1"), ("s1", "c1")]:
            old, new = link(before, o, d), link(after, o, d)
            assert new.jitter_ms == 0.5
            assert (new.latency_ms, new.bandwidth_bps, new.loss) == (old.latency_ms, old.bandwidth_bps, old.loss)
        untouched = [l for l in after.links if "c1" not in (l.orig, l.dest)]
        assert untouched == [l for l in before.links if "c1" not in (l.orig, l.dest)]

    def test_bridge_leave_removes_links(self, listing):
        state = listing.initial_state()
        for ev in listing.events[:2]:
            state = apply_event(state, ev)
        assert "s1" not in state.element_names()
        assert not [l for l in state.links if "s1" in (l.orig, l.dest)]

    def test_link_join_adds_two_directions(self, listing):
        state = listing.initial_state()
        for ev in listing.events[:3]:
            state = apply_event(state, ev)
        assert link(state, "c1", "s2").bandwidth_bps == 100_000_000
        assert link(state, "s2", "c1").latency_ms == 10
        ids = [l.id for l in state.links]
        assert len(set(ids)) == len(ids)

    def test_up_down_set_their_own_direction(self, listing):
        ev = DynamicEvent(5, "link-change", orig="c1", dest="s1", changes={"up_bps": 1, "down_bps": 2})
        state = apply_event(listing.initial_state(), ev)
        assert link(state, "c1", "s1").bandwidth_bps == 1
        assert link(state, "s1", "c1").bandwidth_bps == 2

    def test_service_leave_and_join(self, listing):
        state = apply_event(listing.initial_state(), DynamicEvent(1, "leave", name="sv"))
        assert state.instances == ("c1-0",)
        with pytest.raises(EventError):
            apply_event(state, DynamicEvent(2, "leave", name="sv"))

    def test_input_state_unchanged(self, listing):
        state = listing.initial_state()
        links = state.links
        apply_event(state, listing.events[1])
        assert state.links == links


class TestSequence:
    def test_listing_schedule(self, seq):
        assert seq.times == [0, 120, 200, 210, 240]
        assert [s.changed_elements for s in seq] == [(), ("c1->s1",), ("s1",), ("c1->s2",), ("sv",)]

    def test_reachability_per_snapshot(self, seq):
        assert [len(s.collapsed) for s in seq] == [6, 6, 2, 6, 0]
        assert ("c1-0", "sv-0") not in seq[2].collapsed
        assert seq[3].collapsed.path("c1-0", "sv-0").max_bandwidth_bps == 100_000_000

    def test_no_dynamic_block(self, figure1):
        assert len(build_snapshot_sequence(figure1)) == 1

    def test_equal_times_fold(self, figure1):
        text = """
experiment:
  services: [{name: a}, {name: b}]
  bridges: [{name: x}]
  links:
    - {orig: a, dest: x, latency: 1, up: 1Mbps, down: 1Mbps}
    - {orig: b, dest: x, latency: 1, up: 1Mbps, down: 1Mbps}
dynamic:
  - {orig: a, dest: x, latency: 4, time: 7}
  - {orig: b, dest: x, latency: 6, time: 7}
"""
        seq = build_snapshot_sequence(parse_experiment(text))
        assert seq.times == [0, 7] and len(seq[1].events) == 2
        assert seq[1].collapsed.latency_ms("a-0", "b-0") == 10

    def test_time_zero_events_fold_into_initial(self):
        text = """
experiment:
  services: [{name: a}, {name: b}]
  links: [{orig: a, dest: b, latency: 1, up: 1Mbps, down: 1Mbps}]
dynamic: [{orig: a, dest: b, latency: 3, time: 0}]
"""
        seq = build_snapshot_sequence(parse_experiment(text))
        assert seq.times == [0] and seq[0].collapsed.latency_ms("a-0", "b-0") == 3

    def test_replay_reproduces_each_snapshot(self, seq):
        for prev, snap in zip(seq, seq.snapshots[1:]):
            state = prev.state
            for ev in snap.events:
                state = apply_event(state, ev)
            assert state == snap.state

    def test_deterministic(self, listing, seq):
        assert build_snapshot_sequence(listing).to_json() == seq.to_json()

    def test_cache(self, listing, tmp_path, seq):
        first = build_snapshot_sequence(listing, cache_dir=tmp_path)
        assert len(list(tmp_path.glob("snapshots-*.pkl"))) == 1
        again = build_snapshot_sequence(listing, cache_dir=tmp_path)
        assert again.to_json() == first.to_json() == seq.to_json()


class TestSnapshotAt:
    @pytest.mark.parametrize("t, start", [(0, 0), (119.99, 0), (120, 120), (150, 120), (209.999, 200),
                                          (210, 210), (1e9, 240)])
    def test_lookup(self, seq, t, start):
        assert snapshot_at(seq, t).effective_from_s == start
