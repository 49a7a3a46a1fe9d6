"""Frame format and tagged value encoding for the request/reply protocol.

A frame is a 4-byte little-endian payload length followed by the payload::

    payload = msg_type:u8 | request_id:u64 | body

The body is a fixed sequence of tagged values whose shape depends on the
message type (see ``BODY_SHAPES``). ``docs/protocol.md`` has the byte-level
description.

Python values map onto wire values as follows: ``int`` -> Int, ``float`` ->
Float, ``bytes`` -> Bytes, ``str`` -> Str, ``RemoteRef`` -> Ref, ``list``
(or ``tuple`` on encode) -> List, ``None`` -> Unit.
"""

from __future__ import annotations

import enum
import numbers
import struct
from dataclasses import dataclass, field
from typing import Any, Iterator

from .errors import DecodeError, EncodeError

MAX_DEPTH = 16
MAX_PAYLOAD = 2**32 - 1

TAG_INT = 0x01
TAG_FLOAT = 0x02
TAG_BYTES = 0x03
TAG_STR = 0x04
TAG_REF = 0x05
TAG_LIST = 0x06
TAG_UNIT = 0x07

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_I64 = struct.Struct("<q")
_F64 = struct.Struct("<d")
_REF = struct.Struct("<IQ")
_HEADER = struct.Struct("<BQ")


@dataclass(frozen=True)
class RemoteRef:
    """Handle to an object hosted by some machine of the cluster.

    Only ``machine_id`` and ``object_id`` travel over the wire; ``class_name``
    is a client-side annotation and does not take part in equality.
    """

    machine_id: int
    object_id: int
    class_name: str = field(default="", compare=False)

    def __repr__(self) -> str:
        cls = f" {self.class_name}" if self.class_name else ""
        return f"<ref{cls} {self.machine_id}:{self.object_id}>"


class MsgType(enum.IntEnum):
    SPAWN = 0
    SPAWN_REPLY = 1
    INVOKE = 2
    INVOKE_REPLY = 3
    DESTROY = 4
    DESTROY_REPLY = 5
    ERROR = 6


REQUESTS = frozenset({MsgType.SPAWN, MsgType.INVOKE, MsgType.DESTROY})

# Python-level type expected at each body position; ``object`` means any Value.
BODY_SHAPES: dict[MsgType, tuple[type, ...]] = {
    MsgType.SPAWN: (str, list),
    MsgType.SPAWN_REPLY: (RemoteRef,),
    MsgType.INVOKE: (RemoteRef, str, list),
    MsgType.INVOKE_REPLY: (object,),
    MsgType.DESTROY: (RemoteRef,),
    MsgType.DESTROY_REPLY: (type(None),),
    MsgType.ERROR: (int, str),
}


@dataclass(frozen=True)
class Message:
    kind: MsgType
    request_id: int
    body: tuple = ()

    @property
    def is_request(self) -> bool:
        return self.kind in REQUESTS


def spawn_msg(request_id: int, class_name: str, ctor_args: list) -> Message:
    return Message(MsgType.SPAWN, request_id, (class_name, list(ctor_args)))


def invoke_msg(request_id: int, ref: RemoteRef, method: str, args: list) -> Message:
    return Message(MsgType.INVOKE, request_id, (ref, method, list(args)))


def destroy_msg(request_id: int, ref: RemoteRef) -> Message:
    return Message(MsgType.DESTROY, request_id, (ref,))


def error_msg(request_id: int, code: int, detail: str) -> Message:
    return Message(MsgType.ERROR, request_id, (code, detail))


# -- encoding ---------------------------------------------------------------


def _encode_value(v: Any, out: bytearray, depth: int) -> None:
    if v is None:
        out.append(TAG_UNIT)
    elif isinstance(v, bool):
        raise EncodeError("bool is not a wire value; use int")
    elif isinstance(v, numbers.Integral):
        try:
            out.append(TAG_INT)
            out += _I64.pack(int(v))
        except struct.error:
            raise EncodeError(f"integer {v} outside signed 64-bit range") from None
    elif isinstance(v, float):
        out.append(TAG_FLOAT)
        out += _F64.pack(v)
    elif isinstance(v, (bytes, bytearray, memoryview)):
        raw = bytes(v)
        if len(raw) > MAX_PAYLOAD:
            raise EncodeError("bytes value too long")
        out.append(TAG_BYTES)
        out += _U32.pack(len(raw))
        out += raw
    elif isinstance(v, str):
        raw = v.encode("utf-8")
        if len(raw) > MAX_PAYLOAD:
            raise EncodeError("string value too long")
        out.append(TAG_STR)
        out += _U32.pack(len(raw))
        out += raw
    elif isinstance(v, RemoteRef):
        try:
            packed = _REF.pack(v.machine_id, v.object_id)
        except struct.error:
            raise EncodeError(f"reference ids out of range: {v!r}") from None
        out.append(TAG_REF)
        out += packed
    elif isinstance(v, (list, tuple)):
        if depth >= MAX_DEPTH:
            raise EncodeError(f"list nesting deeper than {MAX_DEPTH}")
        out.append(TAG_LIST)
        out += _U32.pack(len(v))
        for item in v:
            _encode_value(item, out, depth + 1)
    else:
        raise EncodeError(f"cannot encode {type(v).__name__} as a wire value")


def encode_value(v: Any) -> bytes:
    out = bytearray()
    _encode_value(v, out, 0)
    return bytes(out)


def _check_body(m: Message) -> None:
    shape = BODY_SHAPES.get(m.kind)
    if shape is None:
        raise EncodeError(f"unknown message type {m.kind!r}")
    if len(m.body) != len(shape):
        raise EncodeError(f"{m.kind.name} body needs {len(shape)} values, got {len(m.body)}")
    for want, got in zip(shape, m.body):
        if want is list:
            ok = isinstance(got, (list, tuple))
        elif want is int:
            ok = isinstance(got, numbers.Integral) and not isinstance(got, bool)
        else:
            ok = isinstance(got, want)
        if not ok:
            raise EncodeError(f"{m.kind.name} body expects {want.__name__}, got {type(got).__name__}")


def encode_message(m: Message) -> bytes:
    """Serialize ``m`` into one length-prefixed frame."""
    _check_body(m)
    try:
        payload = bytearray(_HEADER.pack(int(m.kind), m.request_id))
    except struct.error:
        raise EncodeError(f"request_id {m.request_id} outside unsigned 64-bit range") from None
    for v in m.body:
        _encode_value(v, payload, 0)
    if len(payload) > MAX_PAYLOAD:
        raise EncodeError("payload exceeds 2**32 - 1 bytes")
    return _U32.pack(len(payload)) + bytes(payload)


# -- decoding ---------------------------------------------------------------


class _Reader:
    def __init__(self, buf: bytes, pos: int = 0):
        self.buf = buf
        self.pos = pos

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise DecodeError("truncated payload")
        chunk = self.buf[self.pos:end]
        self.pos = end
        return chunk

    def value(self, depth: int = 0) -> Any:
        tag = self.take(1)[0]
        if tag == TAG_UNIT:
            return None
        if tag == TAG_INT:
            return _I64.unpack(self.take(8))[0]
        if tag == TAG_FLOAT:
            return _F64.unpack(self.take(8))[0]
        if tag == TAG_BYTES:
            (n,) = _U32.unpack(self.take(4))
            return bytes(self.take(n))
        if tag == TAG_STR:
            (n,) = _U32.unpack(self.take(4))
            try:
                return self.take(n).decode("utf-8")
            except UnicodeDecodeError as exc:
                raise DecodeError(f"invalid UTF-8 in string: {exc}") from None
        if tag == TAG_REF:
            machine_id, object_id = _REF.unpack(self.take(12))
            return RemoteRef(machine_id, object_id)
        if tag == TAG_LIST:
            if depth >= MAX_DEPTH:
                raise DecodeError(f"list nesting deeper than {MAX_DEPTH}")
            (n,) = _U32.unpack(self.take(4))
            # each element takes at least one byte
            if n > len(self.buf) - self.pos:
                raise DecodeError("truncated payload")
            return [self.value(depth + 1) for _ in range(n)]
        raise DecodeError(f"unknown value tag 0x{tag:02x}")


def decode_value(b: bytes) -> Any:
    r = _Reader(bytes(b))
    v = r.value()
    if r.pos != len(r.buf):
        raise DecodeError("trailing bytes after value")
    return v


def decode_payload(payload: bytes) -> Message:
    if len(payload) < _HEADER.size:
        raise DecodeError("truncated header")
    tag, request_id = _HEADER.unpack_from(payload)
    try:
        kind = MsgType(tag)
    except ValueError:
        raise DecodeError(f"unknown message type tag 0x{tag:02x}") from None
    r = _Reader(payload, _HEADER.size)
    body = tuple(r.value() for _ in BODY_SHAPES[kind])
    if r.pos != len(payload):
        raise DecodeError("trailing bytes after message body")
    m = Message(kind, request_id, body)
    try:
        _check_body(m)
    except EncodeError as exc:
        raise DecodeError(str(exc)) from None
    return m


def decode_message(b: bytes) -> Message:
    """Parse exactly one complete frame."""
    b = bytes(b)
    if len(b) < 4:
        raise DecodeError("truncated length prefix")
    (n,) = _U32.unpack_from(b)
    if len(b) - 4 < n:
        raise DecodeError(f"truncated frame: declared {n} payload bytes, have {len(b) - 4}")
    if len(b) - 4 > n:
        raise DecodeError(f"length mismatch: declared {n} payload bytes, have {len(b) - 4}")
    return decode_payload(b[4:])


def split_frames(stream: bytes) -> Iterator[bytes]:
    """Cut a byte stream of back-to-back frames on their length prefixes."""
    pos = 0
    while pos < len(stream):
        if len(stream) - pos < 4:
            raise DecodeError("truncated length prefix")
        (n,) = _U32.unpack_from(stream, pos)
        end = pos + 4 + n
        if end > len(stream):
            raise DecodeError("truncated frame")
        yield stream[pos:end]
        pos = end


def frame_length(prefix: bytes) -> int:
    return _U32.unpack(prefix)[0]
