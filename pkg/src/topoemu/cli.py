"""Command-line front end.

Exit codes: 0 success, 1 invalid experiment, 2 I/O error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

from . import __version__, bundled_experiment
from .dynamics import build_snapshot_sequence
from .engine import DEFAULT_TICK_S, run_experiment, write_csv
from .generate import gen_scalefree
from .topology import TopologyError, ValidationError, dump_experiment, parse_experiment, validate
from .wire import DEFAULT_PORT

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("topoemu")


class _Fail(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class RunConfig:
    experiment: Path
    duration_s: float | None = None
    tick_s: float = DEFAULT_TICK_S
    distributed: bool = False
    managers: int = 1
    out: Path | None = None
    seed: int = 0
    port: int = DEFAULT_PORT

    def __post_init__(self):
        if self.duration_s is not None and (self.duration_s < 0 or not math.isfinite(self.duration_s)):
            raise ValueError("--duration must be a non-negative number")
        if self.tick_s <= 0:
            raise ValueError("--tick must be positive")
        if self.managers < 1:
            raise ValueError("--managers must be at least 1")


def resolve_experiment(path) -> Path:
    """``path`` itself, or the bundled experiment of that name when no such file exists."""
    p = Path(path)
    if not p.exists() and p.parent == Path("."):
        try:
            return bundled_experiment(p.name)
        except FileNotFoundError:
            pass
    return p


def _load(path, check: bool = True):
    path = resolve_experiment(path)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise _Fail(EXIT_IO, f"cannot read {path}: {exc.strerror or exc}") from None
    try:
        return parse_experiment(text, check=check)
    except ValidationError as exc:
        raise _Fail(EXIT_INVALID, "\n".join(f"{path}: {d}" for d in exc.diagnostics)) from None
    except TopologyError as exc:
        raise _Fail(EXIT_INVALID, f"{path}: {exc}") from None


class _AtomicOutput:
    """Write to a temporary file next to ``path`` and move it in place on success."""

    def __init__(self, path: Path | None):
        self.path = path
        self.fh = None
        self._tmp = None

    def __enter__(self):
        if self.path is None:
            return sys.stdout
        try:
            fd, self._tmp = tempfile.mkstemp(prefix=f".{self.path.name}.", dir=self.path.parent or ".")
        except OSError as exc:
            raise _Fail(EXIT_IO, f"cannot write {self.path}: {exc.strerror or exc}") from None
        self.fh = os.fdopen(fd, "w", encoding="utf-8", newline="")
        return self.fh

    def __exit__(self, exc_type, exc, tb):
        if self.fh is None:
            return False
        self.fh.close()
        if exc_type is None:
            os.replace(self._tmp, self.path)
        else:
            os.unlink(self._tmp)
        return False


def cmd_validate(args) -> int:
    t = _load(args.file, check=False)
    diagnostics = validate(t)
    for d in diagnostics:
        print(f"{args.file}: {d}", file=sys.stderr)
    if diagnostics:
        return EXIT_INVALID
    print(f"{args.file}: ok")
    return EXIT_OK


def cmd_collapse(args) -> int:
    t = _load(args.file)
    ct = build_snapshot_sequence(t)[0].collapsed
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["src", "dst", "latency_ms", "jitter_ms", "loss", "max_bw_bps", "rtt_ms"])
    for p in ct.pairs():
        w.writerow([p.src, p.dst, format(p.latency_ms, ".9g"), format(p.jitter_ms, ".9g"),
                    format(p.loss, ".9g"), p.max_bandwidth_bps, format(p.rtt_ms, ".9g")])
    return EXIT_OK


def cmd_events(args) -> int:
    t = _load(args.file)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["time_s", "changed_elements", "reachable_pairs"])
    for time_s, changed, pairs in build_snapshot_sequence(t).schedule():
        w.writerow([format(time_s, ".9g"), ";".join(changed), pairs])
    return EXIT_OK


def default_duration(t) -> float:
    """Last finite workload end or event time, so a bare ``run`` covers the scenario."""
    times = [tr.end_s for tr in t.workload if math.isfinite(tr.end_s)]
    times += [tr.start_s for tr in t.workload]
    times += [ev.time_s for ev in t.events]
    return max(times, default=0.0) or 60.0


def cmd_run(args) -> int:
    try:
        cfg = RunConfig(Path(args.file), args.duration, args.tick, args.distributed, args.managers,
                        Path(args.out) if args.out else None, args.seed, args.port)
    except ValueError as exc:
        raise _Fail(EXIT_RUNTIME, str(exc)) from None
    t = _load(cfg.experiment)
    duration = cfg.duration_s if cfg.duration_s is not None else default_duration(t)
    log.info("running %s for %gs, tick %gs, %d manager(s)%s", cfg.experiment, duration, cfg.tick_s,
             cfg.managers, " over UDP" if cfg.distributed else "")
    # the simulated data plane is deterministic; the seed is kept for reproducibility records
    with _AtomicOutput(cfg.out) as fh:
        result = run_experiment(t, managers=cfg.managers, duration_s=duration, tick_s=cfg.tick_s,
                                distributed=cfg.distributed, base_port=cfg.port)
        write_csv(result.rows, fh)
    return EXIT_OK


def cmd_gen_scalefree(args) -> int:
    try:
        t = gen_scalefree(args.size, args.seed)
    except ValueError as exc:
        raise _Fail(EXIT_RUNTIME, str(exc)) from None
    with _AtomicOutput(Path(args.out) if args.out else None) as fh:
        fh.write(dump_experiment(t))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="topoemu", description="Emulate network topologies over a simulated data plane.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("validate", help="check an experiment file")
    s.add_argument("file")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("collapse", help="print end-to-end path properties as CSV")
    s.add_argument("file")
    s.set_defaults(func=cmd_collapse)

    s = sub.add_parser("events", help="print the snapshot schedule as CSV")
    s.add_argument("file")
    s.set_defaults(func=cmd_events)

    s = sub.add_parser("run", help="run an experiment and write per-tick flow rows as CSV")
    s.add_argument("file")
    s.add_argument("--duration", type=float, help="simulated seconds (default: end of the scenario)")
    s.add_argument("--tick", type=float, default=DEFAULT_TICK_S, help="loop period in seconds")
    s.add_argument("--managers", type=int, default=1, help="number of emulation managers")
    s.add_argument("--out", help="output CSV (default: stdout)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--distributed", action="store_true", help="one process per manager, metadata over UDP")
    s.add_argument("--port", type=int, default=DEFAULT_PORT, help="first UDP port; 0 picks free ports")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("gen-scalefree", help="generate a preferential-attachment topology")
    s.add_argument("--size", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="output file (default: stdout)")
    s.set_defaults(func=cmd_gen_scalefree)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except _Fail as exc:
        print(f"topoemu: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"topoemu: {exc}", file=sys.stderr)
        return EXIT_IO
    except TopologyError as exc:
        print(f"topoemu: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        print(f"topoemu: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
