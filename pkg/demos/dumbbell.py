"""Six clients ramp up and down over a shared bottleneck.

Prints the allocation of every active client in the middle of each
60-second phase, in Mb/s.
"""
from topoemu import bundled_experiment
from topoemu.engine import run_experiment
from topoemu.topology import load_experiment


def main():
    t = load_experiment(bundled_experiment("dumbbell-6"))
    res = run_experiment(t, duration_s=660, tick_s=0.05)
    mid = {}
    for r in res.rows:
        if r.time_s % 60 == 30:
            mid.setdefault(r.time_s, {})[r.src.split("-")[0]] = r.allocated_bps / 1e6
    print("time_s  " + "  ".join(f"{f'c{i}':>6}" for i in range(1, 7)))
    for t_s, alloc in sorted(mid.items()):
        cells = [f"{alloc[f'c{i}']:6.2f}" if f"c{i}" in alloc else "     -" for i in range(1, 7)]
        print(f"{t_s:6.0f}  " + "  ".join(cells))


if __name__ == "__main__":
    main()
