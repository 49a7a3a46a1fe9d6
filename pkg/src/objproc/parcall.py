"""Parallelism from sequential semantics: batched calls, barriers, group copies.

``batch_invoke`` is the two-loop form of a loop of remote calls: the first
loop sends every request, the second collects every reply. Calls on distinct
objects therefore overlap their latencies and their method bodies.
"""

from __future__ import annotations

from typing import Any, Iterable, NamedTuple

from .errors import BadArgs, RemoteError, UnknownMethod, error_from_code
from .runtime import FENCE, Node
from .wire import MsgType, RemoteRef, invoke_msg


class Call(NamedTuple):
    ref: RemoteRef
    method: str
    args: tuple = ()


def batch_invoke(node: Node, calls: Iterable) -> list[Any]:
    """Invoke every call, pipelined, and return results in call order.

    Each call is a ``(ref, method, args)`` triple. All requests are sent
    before the first reply is awaited. If any call failed, every reply is
    still collected and the lowest-index error is raised with ``index`` set.
    """
    calls = [Call(c[0], c[1], tuple(c[2]) if len(c) > 2 else ()) for c in calls]
    requests = []
    for c in calls:
        mid = node._check_machine(c.ref.machine_id)
        requests.append((mid, invoke_msg(node._rid(), c.ref, c.method, list(c.args))))
    replies = node.call_many(requests)
    results = []
    for i, reply in enumerate(replies):
        if reply.kind == MsgType.ERROR:
            code, detail = reply.body
            raise error_from_code(code, detail, index=i)
        results.append(reply.body[0])
    return results


def barrier(node: Node, group: Iterable[RemoteRef]) -> None:
    """Return once every member has finished all calls issued to it before.

    Implemented as one batched no-op fence per member; per-object ordering
    makes each fence wait behind that member's earlier calls.
    """
    batch_invoke(node, [(ref, FENCE, ()) for ref in group])


def deep_copy_group(node: Node, holder: RemoteRef) -> list[RemoteRef]:
    """Copy a remote list of references into a local list.

    ``holder`` must expose ``len()`` and ``get(i)``. The elements are fetched
    with one batch, after which the holder is no longer needed.
    """
    try:
        n = node.invoke(holder, "len")
        refs = batch_invoke(node, [(holder, "get", (i,)) for i in range(n)]) if n else []
    except UnknownMethod as exc:
        raise BadArgs(f"{holder!r} does not expose the list interface: {exc.detail}") from None
    except RemoteError as exc:
        if exc.index is not None:
            exc.index = None
        raise
    if not isinstance(n, int) or not all(isinstance(r, RemoteRef) for r in refs):
        raise BadArgs(f"{holder!r} did not return a list of references")
    return refs
