"""Multi-process experiment driver: one manager per process, metadata over loopback UDP.

A coordinator keeps the processes in lockstep through pipes. Each tick has
two phases. First every manager advances its simulated data plane, runs the
collection steps and sends its datagrams to every peer, then reports how
many it sent. Once all reports are in, each manager is told how many
datagrams to expect, drains its socket (giving up after a timeout, so a
lost datagram only costs freshness) and runs the enforcement steps.
"""
from __future__ import annotations

import multiprocessing as mp
import socket
import traceback

from .engine import EngineError, build_manager
from .wire import DEFAULT_PORT

__all__ = ["RECEIVE_TIMEOUT_S", "run_distributed"]

RECEIVE_TIMEOUT_S = 2.0
_HOST = "127.0.0.1"


def _open_socket(port: int) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 1 << 20)
    sock.bind((_HOST, port))
    return sock


def _worker(conn, m, owned, seq, workload, tick_s, n_managers, port):
    sock = None
    mgr = None
    try:
        sock = _open_socket(port)
        conn.send(("port", sock.getsockname()[1]))
        peers = [(_HOST, p) for k, p in enumerate(conn.recv()) if k != m]
        mgr, backends = build_manager(m, owned, seq, workload, tick_s, n_managers,
                                      control_port=sock.getsockname()[1])
        while True:
            cmd = conn.recv()
            if cmd[0] == "collect":
                now = cmd[1]
                for b in backends.values():
                    b.advance(now - tick_s, now)
                datagrams = mgr.collect(now)
                for d in datagrams:
                    for addr in peers:
                        sock.sendto(d, addr)
                conn.send(("sent", len(datagrams)))
            elif cmd[0] == "enforce":
                now, expected = cmd[1], cmd[2]
                sock.settimeout(RECEIVE_TIMEOUT_S)
                got = 0
                while got < expected:
                    try:
                        data = sock.recv(65535)
                    except socket.timeout:
                        break
                    mgr.receive(data)
                    got += 1
                report = mgr.enforce(now)
                conn.send(("report", report.rows, report.metadata_bytes, got))
            elif cmd[0] == "stop":
                break
        mgr.tear_down()
        mgr = None
        conn.send(("done",))
    except BaseException:
        conn.send(("error", m, traceback.format_exc()))
    finally:
        if mgr is not None:
            try:
                mgr.tear_down()
            except Exception:
                pass
        if sock is not None:
            sock.close()
        conn.close()


def _expect(conn, kind: str):
    msg = conn.recv()
    if msg[0] == "error":
        raise EngineError(f"manager {msg[1]} failed:\n{msg[2]}")
    if msg[0] != kind:
        raise EngineError(f"unexpected reply {msg[0]!r} while waiting for {kind!r}")
    return msg


def run_distributed(seq, workload, partition, times, tick_s, base_port: int = DEFAULT_PORT):
    """Drive ``len(partition)`` manager processes through ``times``.

    Ports are ``base_port + manager id``; with ``base_port=0`` every
    manager binds a free port and the coordinator shares the choices.
    Returns the same ``(rows, metadata)`` pair as the in-process driver.
    """
    ctx = mp.get_context("fork")
    n = len(partition)
    conns, procs = [], []
    try:
        for m, owned in enumerate(partition):
            parent, child = ctx.Pipe()
            port = 0 if base_port == 0 else base_port + m
            p = ctx.Process(target=_worker, name=f"manager-{m}",
                            args=(child, m, owned, seq, workload, tick_s, n, port), daemon=True)
            p.start()
            child.close()
            conns.append(parent)
            procs.append(p)
        ports = [_expect(c, "port")[1] for c in conns]
        for c in conns:
            c.send(ports)

        rows, metadata = [], []
        for now in times:
            for c in conns:
                c.send(("collect", now))
            sent = [_expect(c, "sent")[1] for c in conns]
            total = sum(sent)
            for m, c in enumerate(conns):
                c.send(("enforce", now, total - sent[m]))
            for m, c in enumerate(conns):
                _, tick_rows, nbytes, _ = _expect(c, "report")
                rows.extend(tick_rows)
                metadata.append((now, m, nbytes))
        for c in conns:
            c.send(("stop",))
        for c in conns:
            _expect(c, "done")
        return rows, metadata
    finally:
        for c in conns:
            c.close()
        for p in procs:
            p.join(timeout=5)
            if p.is_alive():
                p.terminate()
                p.join()
