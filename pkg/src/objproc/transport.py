"""Frame transport: a deterministic simulated network and real TCP sockets.

Both backends expose the same small surface used by the runtime:

* ``backend.spawn(fn, *args)`` starts a concurrent activity,
* ``backend.future()`` makes a one-shot result cell an activity can block on,
* ``network.listen(machine_id, on_accept)`` starts a machine's server loop,
* ``network.connect(src, dst)`` opens an ordered, reliable connection whose
  ends provide ``send_frame`` / ``recv_frame``.

The simulated backend runs every activity as a greenlet on one OS thread and
keeps a virtual clock in integer nanoseconds. A frame sent at virtual time
``t`` is delivered at ``t + latency``; activities do not consume virtual
time unless they sleep. Ties between connections are broken by a per
connection priority drawn from the seeded RNG, so interleaving depends only
on ``(seed, program)``.
"""

from __future__ import annotations

import heapq
import itertools
import os
import random
import socket
import struct
import threading
import time
import zlib
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Any, Callable

import greenlet

from .errors import SimDeadlock, TransportFailure
from .wire import MAX_PAYLOAD

SIM = "sim"
SOCKET = "socket"

_LEN = struct.Struct("<I")


@dataclass(frozen=True)
class Endpoint:
    machine_id: int
    address: str


@dataclass
class TransportConfig:
    backend: str = SIM
    sim_latency: float = 0.0  # seconds per one-way delivery
    sim_seed: int = 0
    root: str | None = None  # per-machine working directories live under here
    register: tuple[str, ...] = ()  # extra "module:function" class registration hooks
    bind_addr: str | None = None  # socket backend only; default from OBJPROC_BIND_ADDR
    call_timeout: float = 300.0

    def __post_init__(self):
        if self.backend not in (SIM, SOCKET):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.sim_latency < 0:
            raise ValueError("sim_latency must be >= 0")


@dataclass
class TrafficStats:
    """Frame and byte counters.

    The simulated network sees every frame once. A socket process counts
    the frames it sends and the frames it receives, so traffic between two
    other machines is invisible to it.
    """

    frames: int = 0
    bytes: int = 0
    by_link: dict[tuple[int, int], int] = field(default_factory=lambda: defaultdict(int))

    def record(self, src: int, dst: int, n: int) -> None:
        self.frames += 1
        self.bytes += n
        self.by_link[(src, dst)] += n

    def snapshot(self) -> tuple[int, int]:
        return self.frames, self.bytes


def send_frame(conn, frame: bytes) -> None:
    conn.send_frame(frame)


def recv_frame(conn) -> bytes:
    return conn.recv_frame()


# -- simulated backend -------------------------------------------------------


class SimFuture:
    __slots__ = ("_kernel", "_done", "_value", "_exc", "_waiters")

    def __init__(self, kernel: "SimKernel"):
        self._kernel = kernel
        self._done = False
        self._value = None
        self._exc: BaseException | None = None
        self._waiters: list = []

    def done(self) -> bool:
        return self._done

    def set_result(self, value: Any) -> None:
        if self._done:
            return
        self._done = True
        self._value = value
        self._wake()

    def set_exception(self, exc: BaseException) -> None:
        if self._done:
            return
        self._done = True
        self._exc = exc
        self._wake()

    def _wake(self) -> None:
        for g in self._waiters:
            self._kernel._ready.append(g)
        self._waiters.clear()

    def result(self, timeout: float | None = None) -> Any:
        while not self._done:
            self._waiters.append(greenlet.getcurrent())
            self._kernel._block()
        if self._exc is not None:
            raise self._exc
        return self._value


class SimKernel:
    """Cooperative scheduler with a virtual clock.

    The greenlet that creates the kernel is the *main* activity (machine 0's
    program). Blocking in any activity switches to the hub, which resumes
    ready activities in FIFO order and otherwise fires the earliest timed
    event. If the hub runs out of work while main is still blocked, main
    receives ``SimDeadlock``.
    """

    def __init__(self):
        self.now_ns = 0
        self._events: list = []
        self._seq = itertools.count()
        self._ready: deque = deque()
        self._main = greenlet.getcurrent()
        self._hub = greenlet.greenlet(self._loop)

    def now(self) -> float:
        return self.now_ns / 1e9

    def future(self) -> SimFuture:
        return SimFuture(self)

    def schedule_at(self, t_ns: int, fn: Callable, *args, priority: int = 0) -> None:
        heapq.heappush(self._events, (t_ns, priority, next(self._seq), fn, args))

    def spawn(self, fn: Callable, *args) -> None:
        g = greenlet.greenlet(self._guard(fn), parent=self._hub)
        self._ready.append((g, args))

    @staticmethod
    def _guard(fn):
        def run(*args):
            try:
                fn(*args)
            except (TransportFailure, greenlet.GreenletExit):
                pass

        return run

    def sleep(self, seconds: float) -> None:
        fut = self.future()
        self.schedule_at(self.now_ns + round(seconds * 1e9), fut.set_result, None)
        fut.result()

    def _block(self) -> None:
        current = greenlet.getcurrent()
        if current is self._hub:
            raise RuntimeError("the simulation hub cannot block")
        if current is not self._main and current.parent is not self._hub:
            raise RuntimeError("simulated activities must run on the thread that created the cluster")
        self._hub.switch()

    def _loop(self) -> None:
        while True:
            if self._ready:
                item = self._ready.popleft()
                if isinstance(item, tuple):
                    g, args = item
                    g.switch(*args)
                elif not item.dead:
                    item.switch()
                continue
            if self._events:
                t, _, _, fn, args = heapq.heappop(self._events)
                self.now_ns = t
                fn(*args)
                continue
            self._main.throw(SimDeadlock("no runnable activity and no message in flight"))


class _SimPipe:
    """One direction of a simulated connection."""

    def __init__(self, net: "SimNetwork", src: int, dst: int, priority: int):
        self.net = net
        self.src = src
        self.dst = dst
        self.priority = priority
        self.inbox: deque[bytes] = deque()
        self.closed = False
        self.last_delivery = 0
        self.waiter: SimFuture | None = None

    def deliver(self, frame: bytes) -> None:
        if self.closed:
            return
        self.inbox.append(frame)
        self._wake()

    def close(self) -> None:
        self.closed = True
        self._wake()

    def _wake(self) -> None:
        if self.waiter is not None:
            w, self.waiter = self.waiter, None
            w.set_result(None)


class SimConnection:
    def __init__(self, out: _SimPipe, inp: _SimPipe):
        self._out = out
        self._in = inp
        self.local = out.src
        self.peer = out.dst

    def send_frame(self, frame: bytes) -> None:
        if self._out.closed:
            raise TransportFailure(f"connection {self.local}->{self.peer} is closed")
        self._out.net._transmit(self._out, bytes(frame))

    def recv_frame(self) -> bytes:
        pipe = self._in
        while not pipe.inbox:
            if pipe.closed:
                raise TransportFailure(f"peer machine {self.peer} closed the connection")
            pipe.waiter = pipe.net.kernel.future()
            pipe.waiter.result()
        return pipe.inbox.popleft()

    def close(self) -> None:
        self._out.close()
        self._in.close()


class SimNetwork:
    """In-process cluster network driven by a ``SimKernel``."""

    def __init__(self, latency: float = 0.0, seed: int = 0, kernel: SimKernel | None = None):
        self.kernel = kernel or SimKernel()
        self.latency_ns = round(latency * 1e9)
        self.rng = random.Random(seed)
        self.stats = TrafficStats()
        self.trace: list[tuple[int, int, int, int, int]] = []
        self._listeners: dict[int, Callable] = {}
        self._pipes: list[_SimPipe] = []

    # backend surface
    def spawn(self, fn: Callable, *args) -> None:
        self.kernel.spawn(fn, *args)

    def future(self) -> SimFuture:
        return self.kernel.future()

    def sleep(self, seconds: float) -> None:
        self.kernel.sleep(seconds)

    def now(self) -> float:
        return self.kernel.now()

    def listen(self, machine_id: int, on_accept: Callable) -> None:
        self._listeners[machine_id] = on_accept

    def connect(self, src: int, dst: int) -> SimConnection:
        if dst not in self._listeners:
            raise TransportFailure(f"machine {dst} is not reachable")
        fwd = _SimPipe(self, src, dst, self.rng.getrandbits(32))
        back = _SimPipe(self, dst, src, self.rng.getrandbits(32))
        self._pipes += [fwd, back]
        self.kernel.spawn(self._listeners[dst], SimConnection(back, fwd))
        return SimConnection(fwd, back)

    def shutdown_machine(self, machine_id: int) -> None:
        self._listeners.pop(machine_id, None)
        for p in self._pipes:
            if machine_id in (p.src, p.dst):
                p.close()
        self._pipes = [p for p in self._pipes if not p.closed]

    def _transmit(self, pipe: _SimPipe, frame: bytes) -> None:
        if len(frame) - 4 > MAX_PAYLOAD:
            raise TransportFailure("frame too large")
        t = max(self.kernel.now_ns + self.latency_ns, pipe.last_delivery)
        pipe.last_delivery = t
        self.stats.record(pipe.src, pipe.dst, len(frame))
        self.trace.append((self.kernel.now_ns, pipe.src, pipe.dst, len(frame), zlib.crc32(frame)))
        self.kernel.schedule_at(t, pipe.deliver, frame, priority=pipe.priority)


# -- socket backend ----------------------------------------------------------


class ThreadFuture:
    __slots__ = ("_event", "_value", "_exc")

    def __init__(self):
        self._event = threading.Event()
        self._value = None
        self._exc: BaseException | None = None

    def done(self) -> bool:
        return self._event.is_set()

    def set_result(self, value: Any) -> None:
        if not self._event.is_set():
            self._value = value
            self._event.set()

    def set_exception(self, exc: BaseException) -> None:
        if not self._event.is_set():
            self._exc = exc
            self._event.set()

    def result(self, timeout: float | None = None) -> Any:
        if not self._event.wait(timeout):
            raise TransportFailure(f"no reply within {timeout} s")
        if self._exc is not None:
            raise self._exc
        return self._value


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        try:
            chunk = sock.recv(min(n, 1 << 20))
        except OSError as exc:
            raise TransportFailure(f"receive failed: {exc}") from None
        if not chunk:
            raise TransportFailure("peer closed the connection")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


class SocketConnection:
    def __init__(self, sock: socket.socket, local: int, peer: int, stats: TrafficStats):
        self.sock = sock
        self.local = local
        self.peer = peer
        self._stats = stats
        self._send_lock = threading.Lock()

    def send_frame(self, frame: bytes) -> None:
        with self._send_lock:
            try:
                self.sock.sendall(frame)
            except OSError as exc:
                raise TransportFailure(f"send to machine {self.peer} failed: {exc}") from None
            self._stats.record(self.local, self.peer, len(frame))

    def recv_frame(self) -> bytes:
        prefix = _recv_exact(self.sock, 4)
        frame = prefix + _recv_exact(self.sock, _LEN.unpack(prefix)[0])
        self._stats.record(self.peer, self.local, len(frame))
        return frame

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def parse_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    return host or "127.0.0.1", int(port)


def free_port(host: str = "127.0.0.1") -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.bind((host, 0))
        return s.getsockname()[1]


def read_topology(path: str) -> list[Endpoint]:
    endpoints = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            mid, address = line.split()
            endpoints.append(Endpoint(int(mid), address))
    ids = [e.machine_id for e in endpoints]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate machine_id in topology")
    return sorted(endpoints, key=lambda e: e.machine_id)


def write_topology(path: str, endpoints: list[Endpoint]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for e in endpoints:
            f.write(f"{e.machine_id} {e.address}\n")


def allocate_endpoints(n: int, bind_addr: str | None = None) -> list[Endpoint]:
    """Pick localhost addresses for ``n`` machines.

    ``bind_addr`` (or ``OBJPROC_BIND_ADDR``) is ``host`` or ``host:port``;
    with a port, machine ``k`` gets ``port + k``, otherwise free ports are
    chosen by the OS.
    """
    bind_addr = bind_addr or os.environ.get("OBJPROC_BIND_ADDR") or "127.0.0.1"
    host, _, port = bind_addr.partition(":")
    host = host or "127.0.0.1"
    if port:
        return [Endpoint(k, f"{host}:{int(port) + k}") for k in range(n)]
    return [Endpoint(k, f"{host}:{free_port(host)}") for k in range(n)]


class SocketNetwork:
    """TCP transport for the machines hosted by this OS process."""

    def __init__(self, endpoints: list[Endpoint]):
        self.endpoints = {e.machine_id: e for e in endpoints}
        self.stats = TrafficStats()
        self._servers: dict[int, socket.socket] = {}
        self._conns: list[SocketConnection] = []
        self._lock = threading.Lock()
        self._t0 = time.monotonic()

    def spawn(self, fn: Callable, *args) -> None:
        def run():
            try:
                fn(*args)
            except TransportFailure:
                pass

        threading.Thread(target=run, daemon=True).start()

    def future(self) -> ThreadFuture:
        return ThreadFuture()

    def sleep(self, seconds: float) -> None:
        time.sleep(seconds)

    def now(self) -> float:
        return time.monotonic() - self._t0

    def listen(self, machine_id: int, on_accept: Callable) -> None:
        host, port = parse_address(self.endpoints[machine_id].address)
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            srv.bind((host, port))
        except OSError as exc:
            srv.close()
            raise TransportFailure(f"cannot bind {host}:{port}: {exc}") from None
        srv.listen(128)
        self._servers[machine_id] = srv
        self.spawn(self._accept_loop, machine_id, srv, on_accept)

    def _accept_loop(self, machine_id: int, srv: socket.socket, on_accept: Callable) -> None:
        while True:
            try:
                sock, _ = srv.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = SocketConnection(sock, machine_id, -1, self.stats)
            with self._lock:
                self._conns.append(conn)
            self.spawn(on_accept, conn)

    def connect(self, src: int, dst: int, timeout: float = 2.0) -> SocketConnection:
        if dst not in self.endpoints:
            raise TransportFailure(f"machine {dst} is not in the topology")
        host, port = parse_address(self.endpoints[dst].address)
        deadline = time.monotonic() + timeout
        while True:
            try:
                sock = socket.create_connection((host, port), timeout=timeout)
                break
            except OSError as exc:
                if time.monotonic() > deadline:
                    raise TransportFailure(f"cannot reach machine {dst} at {host}:{port}: {exc}") from None
                time.sleep(0.02)
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        conn = SocketConnection(sock, src, dst, self.stats)
        with self._lock:
            self._conns.append(conn)
        return conn

    def shutdown_machine(self, machine_id: int) -> None:
        srv = self._servers.pop(machine_id, None)
        if srv is not None:
            srv.close()
        with self._lock:
            conns, self._conns = self._conns, []
        for c in conns:
            c.close()
