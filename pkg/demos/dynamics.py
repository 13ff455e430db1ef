"""A client keeps sending while the network under it changes.

The jitter on its access link doubles at 120 s, its bridge disappears at
200 s, a faster replacement link shows up at 210 s and the server leaves at
240 s. Prints one line whenever what the client sees changes.
"""
import math

from topoemu import bundled_experiment
from topoemu.dynamics import build_snapshot_sequence
from topoemu.engine import run_experiment
from topoemu.topology import load_experiment


def main():
    t = load_experiment(bundled_experiment("listing"))
    seq = build_snapshot_sequence(t)
    for time_s, changed, pairs in seq.schedule():
        print(f"snapshot at {time_s:5.0f}s  changed={','.join(changed) or '-':8}  reachable pairs={pairs}")
    print()
    res = run_experiment(t, duration_s=250, tick_s=0.05, sequence=seq)
    last = None
    for r in res.rows:
        view = (r.allocated_bps, r.loss, None if math.isnan(r.latency_ms) else r.latency_ms, r.jitter_ms)
        if view != last:
            print(f"t={r.time_s:7.2f}s  {r.allocated_bps / 1e6:6.1f} Mb/s  loss={r.loss:g}  "
                  f"latency={r.latency_ms:g} ms  jitter={r.jitter_ms:g} ms")
            last = view
    print(f"last row at t={res.rows[-1].time_s:g}s (the server left at 240 s)")


if __name__ == "__main__":
    main()
