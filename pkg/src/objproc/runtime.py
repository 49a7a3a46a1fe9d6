"""Objects as processes: spawn, invoke and destroy objects on cluster machines.

Each machine runs one ``Node``. A node is both a server, hosting objects
spawned on it, and a client, issuing requests to other machines on behalf
of the code running on it (the main program on machine 0, or a method body
on any machine). Every call blocks until the remote side has finished.

Requests for one object are executed strictly one at a time in arrival
order through a per-object mailbox; different objects on the same machine
run concurrently.
"""

from __future__ import annotations

import inspect
import itertools
import logging
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

from .errors import (
    BadArgs,
    DecodeError,
    DeviceError,
    DuplicateClass,
    EncodeError,
    InternalError,
    OutOfBounds,
    RemoteError,
    TransportFailure,
    UnknownClass,
    UnknownMachine,
    UnknownMethod,
    UnknownObject,
    error_from_code,
)
from .transport import Endpoint
from .wire import (
    Message,
    MsgType,
    RemoteRef,
    decode_message,
    destroy_msg,
    encode_message,
    error_msg,
    invoke_msg,
    spawn_msg,
)

log = logging.getLogger(__name__)

FENCE = "__fence__"
CLASSNAME = "__classname__"


# -- class tables ------------------------------------------------------------


@dataclass
class ClassSpec:
    """Dispatch table for one spawnable class.

    ``constructor(node, args)`` builds an instance on the hosting node;
    ``methods[name](instance, args)`` runs a method and returns a wire value.
    """

    name: str
    constructor: Callable[["Node", list], Any]
    methods: dict[str, Callable[[Any, list], Any]] = field(default_factory=dict)


def remote(func):
    """Mark a method as callable through ``invoke``."""
    func._remote = True
    return func


def _checked(func, name: str, skip: int):
    sig = inspect.signature(func)

    def call(target, args):
        try:
            sig.bind(*([None] * skip), *args)
        except TypeError as exc:
            raise BadArgs(f"{name}: {exc}") from None
        return func(target, *args) if skip else func(*args)

    return call


def class_spec(cls, name: str | None = None) -> ClassSpec:
    """Build a ``ClassSpec`` from a Python class.

    The constructor is called as ``cls(node, *ctor_args)`` and every method
    marked with ``@remote``, including inherited ones, becomes invokable.
    """
    name = name or cls.__name__
    init = _checked(cls, name, 0)

    def construct(node, args):
        return init(None, [node, *args])

    methods = {}
    for attr in dir(cls):
        fn = getattr(cls, attr, None)
        if callable(fn) and getattr(fn, "_remote", False):
            methods[attr] = _checked(fn, f"{name}.{attr}", 1)
    return ClassSpec(name, construct, methods)


# -- built-in classes --------------------------------------------------------


class DoubleBuffer:
    """A remote block of ``n`` doubles, zero-initialised."""

    def __init__(self, node, n: int):
        if not isinstance(n, int) or n < 0:
            raise BadArgs(f"DoubleBuffer size must be a non-negative int, got {n!r}")
        self.data = [0.0] * n

    def _index(self, i) -> int:
        if not isinstance(i, int):
            raise BadArgs(f"index must be an int, got {type(i).__name__}")
        if not 0 <= i < len(self.data):
            raise OutOfBounds(f"index {i} outside [0, {len(self.data)})")
        return i

    @remote
    def get(self, i):
        return self.data[self._index(i)]

    @remote
    def set(self, i, v):
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise BadArgs(f"value must be a number, got {type(v).__name__}")
        self.data[self._index(i)] = float(v)

    @remote
    def len(self):
        return len(self.data)


class Counter:
    def __init__(self, node, start: int = 0):
        self.value = start

    @remote
    def increment(self, by: int = 1):
        self.value += by
        return self.value

    @remote
    def get(self):
        return self.value


class GroupList:
    """Holds a list of references; the remote array of remote pointers."""

    def __init__(self, node, refs: list):
        if not all(isinstance(r, RemoteRef) for r in refs):
            raise BadArgs("GroupList holds references only")
        self.refs = list(refs)

    @remote
    def len(self):
        return len(self.refs)

    @remote
    def get(self, i):
        if not 0 <= i < len(self.refs):
            raise OutOfBounds(f"index {i} outside [0, {len(self.refs)})")
        return self.refs[i]

    @remote
    def items(self):
        return list(self.refs)


BUILTIN_CLASSES = (DoubleBuffer, Counter, GroupList)


# -- node --------------------------------------------------------------------


@dataclass
class _Hosted:
    instance: Any
    spec: ClassSpec
    mailbox: deque = field(default_factory=deque)
    busy: bool = False
    dead: bool = False


class _ClientConn:
    def __init__(self, conn):
        self.conn = conn
        self.pending: dict[int, Any] = {}
        self.broken: TransportFailure | None = None


def _machine_id(machine) -> int:
    return machine.machine_id if isinstance(machine, Endpoint) else int(machine)


def _to_wire(v):
    # numpy scalars and arrays come back from method bodies regularly
    if hasattr(v, "item") and getattr(v, "shape", None) == ():
        return v.item()
    if isinstance(v, tuple):
        return [_to_wire(x) for x in v]
    if isinstance(v, list):
        return [_to_wire(x) for x in v]
    return v


class Node:
    """One machine of the cluster: object host plus request client."""

    def __init__(self, machine_id: int, network, root: str | Path, machines: Iterable[int], call_timeout: float = 300.0):
        self.machine_id = machine_id
        self.net = network
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.machines = set(machines)
        self.call_timeout = call_timeout
        self.classes: dict[str, ClassSpec] = {}
        self._objects: dict[int, _Hosted] = {}
        self._object_ids = itertools.count(1)
        self._request_ids = itertools.count(1)
        self._lock = threading.Lock()
        self._conns: dict[int, _ClientConn] = {}

    def __repr__(self) -> str:
        return f"<Node {self.machine_id}>"

    # registration and serving

    def register_class(self, spec: ClassSpec | type) -> None:
        if not isinstance(spec, ClassSpec):
            spec = class_spec(spec)
        if spec.name in self.classes:
            raise DuplicateClass(spec.name)
        self.classes[spec.name] = spec

    def serve(self) -> None:
        self.net.listen(self.machine_id, self._serve_connection)

    def shutdown(self) -> None:
        """Drop every hosted object without running remote destroys."""
        with self._lock:
            hosted = list(self._objects.values())
            self._objects.clear()
        for h in hosted:
            h.dead = True
            _release(h.instance)

    def resolve_path(self, filename: str) -> Path:
        return self.root / filename

    def live_objects(self) -> dict[int, str]:
        with self._lock:
            return {oid: h.spec.name for oid, h in self._objects.items()}

    # client side

    def spawn(self, machine, class_name: str, args: Iterable = ()) -> RemoteRef:
        mid = self._check_machine(machine)
        (reply,) = self.call_many([(mid, spawn_msg(self._rid(), class_name, list(args)))])
        ref = _unwrap(reply)
        return RemoteRef(ref.machine_id, ref.object_id, class_name)

    def invoke(self, ref: RemoteRef, method: str, args: Iterable = ()) -> Any:
        mid = self._check_machine(ref.machine_id)
        (reply,) = self.call_many([(mid, invoke_msg(self._rid(), ref, method, list(args)))])
        return _unwrap(reply)

    def destroy(self, ref: RemoteRef) -> None:
        mid = self._check_machine(ref.machine_id)
        (reply,) = self.call_many([(mid, destroy_msg(self._rid(), ref))])
        _unwrap(reply)

    def proxy(self, ref: RemoteRef) -> "Proxy":
        return Proxy(self, ref)

    def sleep(self, seconds: float) -> None:
        self.net.sleep(seconds)

    def now(self) -> float:
        return self.net.now()

    def _rid(self) -> int:
        return next(self._request_ids)

    def _check_machine(self, machine) -> int:
        mid = _machine_id(machine)
        if mid not in self.machines:
            raise UnknownMachine(f"machine {mid} is not part of the cluster")
        return mid

    def _client(self, dst: int) -> _ClientConn:
        with self._lock:
            cc = self._conns.get(dst)
        if cc is not None and cc.broken is None:
            return cc
        conn = self.net.connect(self.machine_id, dst)
        cc = _ClientConn(conn)
        with self._lock:
            existing = self._conns.get(dst)
            if existing is not None and existing.broken is None:
                conn.close()
                return existing
            self._conns[dst] = cc
        self.net.spawn(self._read_replies, cc)
        return cc

    def _read_replies(self, cc: _ClientConn) -> None:
        try:
            while True:
                msg = decode_message(cc.conn.recv_frame())
                with self._lock:
                    fut = cc.pending.pop(msg.request_id, None)
                if fut is not None:
                    fut.set_result(msg)
        except (TransportFailure, DecodeError) as exc:
            failure = exc if isinstance(exc, TransportFailure) else TransportFailure(str(exc))
            with self._lock:
                cc.broken = failure
                pending, cc.pending = cc.pending, {}
            for fut in pending.values():
                fut.set_exception(failure)

    def call_many(self, requests: list[tuple[int, Message]]) -> list[Message]:
        """Send every request, then wait for every reply (the loop split).

        Replies are matched by request id and returned in request order.
        Transport failures are raised only after all replies were awaited.
        """
        futures = []
        for dst, msg in requests:
            frame = encode_message(msg)
            cc = self._client(dst)
            fut = self.net.future()
            with self._lock:
                if cc.broken is not None:
                    fut.set_exception(cc.broken)
                else:
                    cc.pending[msg.request_id] = fut
            if not fut.done():
                try:
                    cc.conn.send_frame(frame)
                except TransportFailure as exc:
                    with self._lock:
                        cc.pending.pop(msg.request_id, None)
                    fut.set_exception(exc)
            futures.append(fut)
        replies, failure = [], None
        for fut in futures:
            try:
                replies.append(fut.result(self.call_timeout))
            except TransportFailure as exc:
                failure = failure or exc
                replies.append(None)
        if failure is not None:
            raise failure
        return replies

    # server side

    def _serve_connection(self, conn) -> None:
        while True:
            frame = conn.recv_frame()
            try:
                msg = decode_message(frame)
            except DecodeError as exc:
                log.warning("machine %d: dropping connection after bad frame: %s", self.machine_id, exc)
                conn.close()
                return
            if msg.is_request:
                self._dispatch(msg, conn)

    def _reply(self, conn, msg: Message) -> None:
        try:
            frame = encode_message(msg)
        except EncodeError as exc:
            frame = encode_message(error_msg(msg.request_id, InternalError.code, f"unencodable reply: {exc}"))
        try:
            conn.send_frame(frame)
        except TransportFailure:
            pass

    def _dispatch(self, msg: Message, conn) -> None:
        if msg.kind == MsgType.SPAWN:
            self.net.spawn(self._do_spawn, msg, conn)
            return
        ref: RemoteRef = msg.body[0]
        with self._lock:
            hosted = self._objects.get(ref.object_id) if ref.machine_id == self.machine_id else None
            if hosted is not None:
                hosted.mailbox.append((msg, conn))
                start = not hosted.busy
                hosted.busy = True
        if hosted is None:
            self._reply(conn, error_msg(msg.request_id, UnknownObject.code, f"no object {ref.machine_id}:{ref.object_id}"))
        elif start:
            self.net.spawn(self._drain, ref.object_id, hosted)

    def _drain(self, oid: int, hosted: _Hosted) -> None:
        while True:
            with self._lock:
                if not hosted.mailbox:
                    hosted.busy = False
                    return
                msg, conn = hosted.mailbox.popleft()
            if hosted.dead:
                reply = error_msg(msg.request_id, UnknownObject.code, f"object {self.machine_id}:{oid} was destroyed")
            elif msg.kind == MsgType.DESTROY:
                reply = self._do_destroy(oid, hosted, msg)
            else:
                reply = self._do_invoke(hosted, msg)
            self._reply(conn, reply)

    def _do_spawn(self, msg: Message, conn) -> None:
        class_name, args = msg.body
        spec = self.classes.get(class_name)
        if spec is None:
            self._reply(conn, error_msg(msg.request_id, UnknownClass.code, f"class {class_name!r} not registered on machine {self.machine_id}"))
            return
        try:
            instance = spec.constructor(self, args)
        except BaseException as exc:  # noqa: BLE001 - every failure becomes an Error reply
            self._reply(conn, _error_reply(msg.request_id, exc))
            return
        with self._lock:
            oid = next(self._object_ids)
            self._objects[oid] = _Hosted(instance, spec)
        self._reply(conn, Message(MsgType.SPAWN_REPLY, msg.request_id, (RemoteRef(self.machine_id, oid),)))

    def _do_invoke(self, hosted: _Hosted, msg: Message) -> Message:
        ref, method, args = msg.body
        if method == FENCE:
            return Message(MsgType.INVOKE_REPLY, msg.request_id, (None,))
        if method == CLASSNAME:
            return Message(MsgType.INVOKE_REPLY, msg.request_id, (hosted.spec.name,))
        handler = hosted.spec.methods.get(method)
        if handler is None:
            return error_msg(msg.request_id, UnknownMethod.code, f"{hosted.spec.name} has no method {method!r}")
        try:
            result = _to_wire(handler(hosted.instance, args))
        except BaseException as exc:  # noqa: BLE001
            return _error_reply(msg.request_id, exc)
        return Message(MsgType.INVOKE_REPLY, msg.request_id, (result,))

    def _do_destroy(self, oid: int, hosted: _Hosted, msg: Message) -> Message:
        with self._lock:
            self._objects.pop(oid, None)
        hosted.dead = True
        try:
            _release(hosted.instance)
        except BaseException as exc:  # noqa: BLE001
            return _error_reply(msg.request_id, exc)
        return Message(MsgType.DESTROY_REPLY, msg.request_id, (None,))


def _release(instance) -> None:
    close = getattr(instance, "close", None)
    if callable(close):
        close()


def _error_reply(request_id: int, exc: BaseException) -> Message:
    if isinstance(exc, RemoteError):
        return error_msg(request_id, exc.code, exc.detail)
    if isinstance(exc, OSError):
        return error_msg(request_id, DeviceError.code, str(exc))
    if isinstance(exc, TransportFailure):
        return error_msg(request_id, InternalError.code, f"nested call failed: {exc}")
    log.exception("unexpected error in remote call", exc_info=exc)
    return error_msg(request_id, InternalError.code, f"{type(exc).__name__}: {exc}")


def _unwrap(reply: Message):
    if reply.kind == MsgType.ERROR:
        code, detail = reply.body
        raise error_from_code(code, detail)
    return reply.body[0]


class Proxy:
    """Attribute-style access to a remote object: ``proxy.read(3)``."""

    def __init__(self, node: Node, ref: RemoteRef):
        self._node = node
        self.ref = ref

    def __getattr__(self, method: str):
        if method.startswith("_"):
            raise AttributeError(method)

        def call(*args):
            return self._node.invoke(self.ref, method, args)

        return call

    def __repr__(self) -> str:
        return f"Proxy({self.ref!r})"
