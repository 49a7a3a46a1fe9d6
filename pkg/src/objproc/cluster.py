"""Bring clusters up and down on either transport backend."""

from __future__ import annotations

import importlib
import logging
import os
import shutil
import subprocess
import sys
import tempfile
import time
from pathlib import Path
from typing import Callable

from .errors import TransportFailure
from .runtime import Node
from .transport import (
    SIM,
    Endpoint,
    SimNetwork,
    SocketNetwork,
    TransportConfig,
    allocate_endpoints,
    write_topology,
)

log = logging.getLogger(__name__)


def builtin_classes() -> list:
    from . import distarray, fftdemo, pagestore, runtime

    return [
        *runtime.BUILTIN_CLASSES,
        *pagestore.CLASSES,
        *distarray.CLASSES,
        *fftdemo.CLASSES,
    ]


def load_hook(hook: str | Callable) -> Callable:
    if callable(hook):
        return hook
    module, _, func = hook.partition(":")
    if not func:
        raise ValueError(f"registration hook must look like 'module:function', got {hook!r}")
    return getattr(importlib.import_module(module), func)


def make_node(machine_id: int, network, root: Path, machines, cfg: TransportConfig) -> Node:
    node = Node(machine_id, network, root / f"machine-{machine_id}", machines, cfg.call_timeout)
    for cls in builtin_classes():
        node.register_class(cls)
    for hook in cfg.register:
        load_hook(hook)(node)
    return node


class Cluster:
    """A running set of machines; machine 0 is this process.

    Use ``cluster.master`` (or the shortcuts below) to issue calls as the
    main program. Under the simulated backend every node is local and
    reachable through ``cluster.nodes``.
    """

    def __init__(self, endpoints: list[Endpoint], cfg: TransportConfig, network, nodes: dict[int, Node], root: Path, owns_root: bool, workers=None):
        self.endpoints = endpoints
        self.cfg = cfg
        self.network = network
        self.nodes = nodes
        self.root = root
        self._owns_root = owns_root
        self._workers = dict(workers or {})
        self.up = True

    @property
    def master(self) -> Node:
        return self.nodes[0]

    @property
    def size(self) -> int:
        return len(self.endpoints)

    def spawn(self, machine, class_name, args=()):
        return self.master.spawn(machine, class_name, args)

    def invoke(self, ref, method, args=()):
        return self.master.invoke(ref, method, args)

    def destroy(self, ref):
        return self.master.destroy(ref)

    def proxy(self, ref):
        return self.master.proxy(ref)

    def now(self) -> float:
        return self.network.now()

    @property
    def stats(self):
        return self.network.stats

    def machine_root(self, machine_id: int) -> Path:
        return self.root / f"machine-{machine_id}"

    def shutdown_machine(self, machine_id: int) -> None:
        """Stop one machine; connections to it fail with TransportFailure."""
        node = self.nodes.pop(machine_id, None)
        if node is not None:
            node.shutdown()
            self.network.shutdown_machine(machine_id)
            return
        proc = self._workers.pop(machine_id, None)
        if proc is not None:
            proc.terminate()
            proc.wait(10)

    def shutdown(self) -> None:
        if not self.up:
            return
        self.up = False
        for proc in self._workers.values():
            proc.terminate()
        for proc in self._workers.values():
            try:
                proc.wait(10)
            except subprocess.TimeoutExpired:
                proc.kill()
        for mid in list(self.nodes):
            self.nodes[mid].shutdown()
            self.network.shutdown_machine(mid)
        if self._owns_root:
            shutil.rmtree(self.root, ignore_errors=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


def cluster_up(n_machines: int, cfg: TransportConfig | None = None) -> Cluster:
    """Start ``n_machines`` machines and return the running cluster.

    With the socket backend, machines 1..n-1 are ``objproc-worker``
    subprocesses on localhost that read the topology file written under the
    cluster root.
    """
    if n_machines < 1:
        raise ValueError("a cluster needs at least one machine")
    cfg = cfg or TransportConfig()
    owns_root = cfg.root is None
    root = Path(cfg.root) if cfg.root else Path(tempfile.mkdtemp(prefix="objproc-"))
    root.mkdir(parents=True, exist_ok=True)
    machines = range(n_machines)

    if cfg.backend == SIM:
        network = SimNetwork(cfg.sim_latency, cfg.sim_seed)
        endpoints = [Endpoint(k, f"sim:{k}") for k in machines]
        nodes = {k: make_node(k, network, root, machines, cfg) for k in machines}
        for node in nodes.values():
            node.serve()
        return Cluster(endpoints, cfg, network, nodes, root, owns_root)

    endpoints = allocate_endpoints(n_machines, cfg.bind_addr)
    topology = root / "topology.txt"
    write_topology(str(topology), endpoints)
    network = SocketNetwork(endpoints)
    master = make_node(0, network, root, machines, cfg)
    master.serve()
    workers = {}
    env = dict(os.environ)
    env["PYTHONPATH"] = os.pathsep.join(filter(None, [*sys.path, env.get("PYTHONPATH")]))
    for k in machines[1:]:
        cmd = [sys.executable, "-m", "objproc.worker", "--machine-id", str(k), "--topology", str(topology), "--root", str(root)]
        for hook in cfg.register:
            if not isinstance(hook, str):
                raise ValueError("socket clusters take registration hooks as 'module:function' strings")
            cmd += ["--register", hook]
        log_path = root / f"worker-{k}.log"
        with open(log_path, "ab") as logf:
            workers[k] = subprocess.Popen(cmd, stdout=logf, stderr=subprocess.STDOUT, env=env)
    cluster = Cluster(endpoints, cfg, network, {0: master}, root, owns_root, workers)
    try:
        for k in machines[1:]:
            _wait_ready(network, k, workers[k])
    except BaseException:
        cluster.shutdown()
        raise
    return cluster


def _wait_ready(network: SocketNetwork, machine_id: int, proc: subprocess.Popen, timeout: float = 30.0) -> None:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if proc.poll() is not None:
            raise TransportFailure(f"worker for machine {machine_id} exited with code {proc.returncode}")
        try:
            conn = network.connect(-1, machine_id, timeout=0.2)
        except TransportFailure:
            time.sleep(0.05)
            continue
        conn.close()
        return
    raise TransportFailure(f"worker for machine {machine_id} did not come up within {timeout} s")
