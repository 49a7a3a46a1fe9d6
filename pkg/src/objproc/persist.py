"""Persistent objects addressed by symbolic names.

A manifest file records, for each symbolic address, the class, the home
machine and the constructor arguments that re-create the object from its
files. Resolving an address returns the live object if this registry
activated it and it still exists; otherwise the object is rebuilt on its
home machine. Only file-backed classes (those exposing ``persist_spec``)
can be persisted.

Manifest format, one record per line::

    <address> <class> <machine_id> <base64 of the wire-encoded argument list>
"""

from __future__ import annotations

import base64
import binascii
import os
import re
import threading
from dataclasses import dataclass
from pathlib import Path

from filelock import FileLock

from .distarray import format_ref, parse_ref
from .errors import BadArgs, DecodeError, DuplicateAddress, UnknownAddress, UnknownMethod, UnknownObject
from .runtime import CLASSNAME, FENCE, Node
from .wire import RemoteRef, decode_value, encode_value

SCHEME = "objproc://"
_ADDRESS = re.compile(r"^objproc://(?P<ns>[^\s/]+(?:/[^\s/]+)*)/(?P<cls>[^\s/]+)/(?P<name>[^\s/]+)$")
_DEVICE_LINE = re.compile(r"^device=(.*)$", re.MULTILINE)


@dataclass(frozen=True)
class SymbolicAddress:
    namespace: str
    class_name: str
    name: str

    @classmethod
    def parse(cls, text: str) -> "SymbolicAddress":
        m = _ADDRESS.match(text)
        if not m:
            raise BadArgs(f"{text!r} is not of the form objproc://<namespace>/<class>/<name>")
        return cls(m["ns"], m["cls"], m["name"])

    def __str__(self) -> str:
        return f"{SCHEME}{self.namespace}/{self.class_name}/{self.name}"


@dataclass(frozen=True)
class Entry:
    address: str
    class_name: str
    machine_id: int
    args: list

    def to_line(self) -> str:
        blob = base64.b64encode(encode_value(list(self.args))).decode("ascii")
        return f"{self.address} {self.class_name} {self.machine_id} {blob}"

    @classmethod
    def from_line(cls, line: str) -> "Entry":
        try:
            address, class_name, machine, blob = line.split()
            args = decode_value(base64.b64decode(blob, validate=True))
            return cls(address, class_name, int(machine), args)
        except (ValueError, binascii.Error, DecodeError) as exc:
            raise BadArgs(f"corrupt manifest line {line!r}: {exc}") from None


def default_manifest_path() -> Path:
    return Path(os.environ.get("OBJPROC_MANIFEST", "objproc-manifest.txt"))


def read_manifest(path: str | Path) -> dict[str, Entry]:
    path = Path(path)
    if not path.exists():
        return {}
    entries = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            e = Entry.from_line(line)
            entries[e.address] = e
    return entries


class Registry:
    """Manifest-backed persistence for one client node."""

    def __init__(self, node: Node, path: str | Path | None = None):
        self.node = node
        self.path = Path(path) if path is not None else default_manifest_path()
        self._flock = FileLock(str(self.path) + ".lock")
        self._lock = threading.RLock()
        self._live: dict[str, RemoteRef] = {}

    def entries(self) -> dict[str, Entry]:
        with self._lock, self._flock:
            return read_manifest(self.path)

    def _write(self, entries: dict[str, Entry]) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_name(self.path.name + ".tmp")
        with open(tmp, "w", encoding="utf-8") as f:
            for e in entries.values():
                f.write(e.to_line() + "\n")
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, self.path)

    def persist(self, ref: RemoteRef, address: str) -> None:
        addr = SymbolicAddress.parse(address)
        with self._lock, self._flock:
            entries = read_manifest(self.path)
            if address in entries:
                raise DuplicateAddress(address)
            class_name = self.node.invoke(ref, CLASSNAME)
            if addr.class_name != class_name:
                raise BadArgs(f"address names class {addr.class_name!r} but the object is a {class_name}")
            try:
                spec = self.node.invoke(ref, "persist_spec")
            except UnknownMethod:
                raise BadArgs(f"class {class_name} is not persistable (no persist_spec)") from None
            args = [self._to_stored(v) for v in spec]
            entries[address] = Entry(address, class_name, ref.machine_id, args)
            self._write(entries)
            self._live[address] = RemoteRef(ref.machine_id, ref.object_id, class_name)

    def resolve(self, address: str) -> RemoteRef:
        with self._lock, self._flock:
            entries = read_manifest(self.path)
            entry = entries.get(address)
            if entry is None:
                raise UnknownAddress(address)
            if SymbolicAddress.parse(address).class_name != entry.class_name:
                raise BadArgs(f"manifest entry for {address} records class {entry.class_name}")
            live = self._live.get(address)
            if live is not None:
                try:
                    self.node.invoke(live, FENCE)
                    return live
                except UnknownObject:
                    del self._live[address]
            args = [self._to_live(v) for v in entry.args]
            ref = self.node.spawn(entry.machine_id, entry.class_name, args)
            self._live[address] = ref
            return ref

    def unpersist(self, address: str) -> None:
        with self._lock, self._flock:
            entries = read_manifest(self.path)
            if address not in entries:
                raise UnknownAddress(address)
            del entries[address]
            self._write(entries)
            self._live.pop(address, None)

    def forget(self) -> None:
        """Drop the record of activated objects, as after a restart."""
        with self._lock:
            self._live.clear()

    # references inside reconstruction arguments are stored as addresses

    def _address_of(self, ref: RemoteRef) -> str:
        for address, live in self._live.items():
            if live == ref:
                return address
        raise BadArgs(f"{ref!r} is referenced but not persisted; persist it first")

    def _to_stored(self, v):
        if isinstance(v, RemoteRef):
            return self._address_of(v)
        if isinstance(v, list):
            return [self._to_stored(x) for x in v]
        if isinstance(v, str) and "device=ref:" in v:
            return _DEVICE_LINE.sub(lambda m: "device=" + self._address_of(parse_ref(m[1])), v)
        return v

    def _to_live(self, v):
        if isinstance(v, list):
            return [self._to_live(x) for x in v]
        if isinstance(v, str) and v.startswith(SCHEME) and _ADDRESS.match(v):
            return self.resolve(v)
        if isinstance(v, str) and "device=" + SCHEME in v:
            return _DEVICE_LINE.sub(lambda m: "device=" + format_ref(self.resolve(m[1])) if m[1].startswith(SCHEME) else m[0], v)
        return v
