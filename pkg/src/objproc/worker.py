"""``objproc-worker``: serve one machine of a socket cluster."""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading
from pathlib import Path

from .cluster import make_node
from .transport import SOCKET, SocketNetwork, TransportConfig, read_topology


def serve(machine_id: int, topology: str, root: str, register: list[str]) -> None:
    endpoints = read_topology(topology)
    ids = [e.machine_id for e in endpoints]
    if machine_id not in ids:
        raise SystemExit(f"machine {machine_id} is not in {topology}")
    cfg = TransportConfig(backend=SOCKET, register=tuple(register))
    network = SocketNetwork(endpoints)
    node = make_node(machine_id, network, Path(root), ids, cfg)
    node.serve()
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    stop.wait()
    node.shutdown()
    network.shutdown_machine(machine_id)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="objproc-worker", description="Serve one machine of a socket cluster.")
    p.add_argument("--machine-id", type=int, required=True)
    p.add_argument("--topology", required=True, help="file with one 'machine_id address' per line")
    p.add_argument("--root", default=".", help="directory holding per-machine working directories")
    p.add_argument("--register", action="append", default=[], metavar="MODULE:FUNC", help="extra class registration hook")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(asctime)s machine-%(process)d %(levelname)s %(message)s")
    serve(args.machine_id, args.topology, args.root, args.register)
    return 0


if __name__ == "__main__":
    sys.exit(main())
