"""Collapse generated scale-free topologies of growing size and time it."""
import sys
import time

import numpy as np

from topoemu.collapse import collapse_topology
from topoemu.generate import gen_scalefree


def main(sizes=(1000, 2000, 4000)):
    for n in sizes:
        t = gen_scalefree(n, seed=n)
        start = time.perf_counter()
        ct = collapse_topology(t)
        elapsed = time.perf_counter() - start
        rtt = ct.matrix("rtt_ms")
        off = rtt[~np.eye(len(rtt), dtype=bool)]
        print(f"{n:5d} elements: {len(t.services)} services, {len(ct)} pairs in {elapsed:.2f}s, "
              f"mean RTT {off.mean():.1f} ms, max {off.max():.0f} ms")


if __name__ == "__main__":
    main(tuple(int(a) for a in sys.argv[1:]) or (1000, 2000, 4000))
