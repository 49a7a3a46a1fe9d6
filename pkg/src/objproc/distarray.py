"""A 3D array of doubles stored as pages spread over many page devices.

The global index space ``N1 x N2 x N3`` is cut into ``n1 x n2 x n3`` page
blocks. Page block ``(i1, i2, i3)`` lives on device ``map.lookup(i1, i2,
i3).device_id`` at page ``.index``. An ``Array`` is a client: it keeps no
element data, assembles subarrays from pages fetched with one batched call
per operation, and pushes sums down to the devices for whole pages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import BadArgs, OutOfBounds
from .parcall import batch_invoke
from .pagestore import ELEMENT, page_sum
from .runtime import Node, remote
from .wire import RemoteRef


@dataclass(frozen=True)
class Domain:
    """Half-open box ``[N11, N12) x [N21, N22) x [N31, N32)``."""

    N11: int
    N12: int
    N21: int
    N22: int
    N31: int
    N32: int

    def __post_init__(self):
        for lo, hi in self.bounds:
            if not (isinstance(lo, (int, np.integer)) and isinstance(hi, (int, np.integer))):
                raise BadArgs("domain bounds must be integers")
            if lo > hi:
                raise BadArgs(f"domain has lo {lo} > hi {hi}")

    @classmethod
    def full(cls, N1: int, N2: int, N3: int) -> "Domain":
        return cls(0, N1, 0, N2, 0, N3)

    @classmethod
    def from_value(cls, v) -> "Domain":
        if isinstance(v, Domain):
            return v
        if not isinstance(v, (list, tuple)) or len(v) != 6:
            raise BadArgs("a domain travels as six integers [N11, N12, N21, N22, N31, N32]")
        return cls(*v)

    @property
    def bounds(self) -> tuple[tuple[int, int], ...]:
        return ((self.N11, self.N12), (self.N21, self.N22), (self.N31, self.N32))

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.N12 - self.N11, self.N22 - self.N21, self.N32 - self.N31)

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def empty(self) -> bool:
        return self.size == 0

    def to_list(self) -> list[int]:
        return [int(b) for pair in self.bounds for b in pair]


class PageAddress(NamedTuple):
    device_id: int
    index: int


class PageMap:
    """Injective map from page-grid coordinates to physical page addresses."""

    name = ""

    def __init__(self, grid: Sequence[int], n_devices: int):
        if n_devices < 1:
            raise BadArgs("a page map needs at least one device")
        self.grid = tuple(int(g) for g in grid)
        self.n_devices = n_devices
        self.n_pages = math.prod(self.grid)
        self.pages_per_device = -(-self.n_pages // n_devices)

    def rank(self, i1: int, i2: int, i3: int) -> int:
        P1, P2, P3 = self.grid
        if not (0 <= i1 < P1 and 0 <= i2 < P2 and 0 <= i3 < P3):
            raise OutOfBounds(f"page ({i1}, {i2}, {i3}) outside page grid {self.grid}")
        return (i1 * P2 + i2) * P3 + i3

    def lookup(self, i1: int, i2: int, i3: int) -> PageAddress:
        return self.address(self.rank(i1, i2, i3))

    def address(self, rank: int) -> PageAddress:
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}(grid={self.grid}, n_devices={self.n_devices})"


class LinearMap(PageMap):
    """Row-major page ranks packed device by device."""

    name = "linear"

    def address(self, rank: int) -> PageAddress:
        return PageAddress(rank // self.pages_per_device, rank % self.pages_per_device)


class RoundRobinMap(PageMap):
    """Page rank ``r`` goes to device ``r mod D`` at index ``r div D``."""

    name = "roundrobin"

    def address(self, rank: int) -> PageAddress:
        return PageAddress(rank % self.n_devices, rank // self.n_devices)


PAGE_MAPS = {cls.name: cls for cls in (LinearMap, RoundRobinMap)}


def make_page_map(name: str, grid: Sequence[int], n_devices: int) -> PageMap:
    try:
        return PAGE_MAPS[name](grid, n_devices)
    except KeyError:
        raise BadArgs(f"unknown page map {name!r}; choose from {sorted(PAGE_MAPS)}") from None


def page_map_lookup(page_map: PageMap, i1: int, i2: int, i3: int) -> PageAddress:
    return page_map.lookup(i1, i2, i3)


# -- array metadata ---------------------------------------------------------


@dataclass(frozen=True)
class ArraySpec:
    N: tuple[int, int, int]
    n: tuple[int, int, int]
    storage: tuple[RemoteRef, ...]
    map_name: str = "roundrobin"

    def __post_init__(self):
        if len(self.N) != 3 or len(self.n) != 3:
            raise BadArgs("array and page extents are three integers each")
        for N, n in zip(self.N, self.n):
            if n <= 0 or N <= 0:
                raise BadArgs("extents must be positive")
            if N % n:
                raise BadArgs(f"page extent {n} does not divide array extent {N}")
        if not self.storage:
            raise BadArgs("an array needs at least one storage device")
        make_page_map(self.map_name, self.grid, len(self.storage))

    @property
    def grid(self) -> tuple[int, int, int]:
        return tuple(N // n for N, n in zip(self.N, self.n))

    @property
    def page_map(self) -> PageMap:
        return make_page_map(self.map_name, self.grid, len(self.storage))

    def to_manifest(self, device_names: Sequence[str] | None = None) -> str:
        """One ``key=value`` per line; devices listed in storage order."""
        lines = [f"N{k + 1}={v}" for k, v in enumerate(self.N)]
        lines += [f"n{k + 1}={v}" for k, v in enumerate(self.n)]
        lines.append(f"map={self.map_name}")
        names = device_names or [format_ref(r) for r in self.storage]
        lines += [f"device={name}" for name in names]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_manifest(cls, text: str) -> "ArraySpec":
        fields, devices = parse_manifest(text)
        try:
            N = tuple(int(fields[f"N{k}"]) for k in (1, 2, 3))
            n = tuple(int(fields[f"n{k}"]) for k in (1, 2, 3))
        except (KeyError, ValueError) as exc:
            raise BadArgs(f"bad array manifest: {exc}") from None
        return cls(N, n, tuple(parse_ref(d) for d in devices), fields.get("map", "roundrobin"))


def parse_manifest(text: str) -> tuple[dict[str, str], list[str]]:
    fields, devices = {}, []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise BadArgs(f"bad manifest line {line!r}")
        if key == "device":
            devices.append(value)
        else:
            fields[key] = value
    return fields, devices


def format_ref(ref: RemoteRef) -> str:
    return f"ref:{ref.machine_id}:{ref.object_id}"


def parse_ref(text: str) -> RemoteRef:
    kind, _, rest = text.partition(":")
    machine, _, obj = rest.partition(":")
    if kind != "ref" or not machine.isdigit() or not obj.isdigit():
        raise BadArgs(f"device entry {text!r} is not a live reference")
    return RemoteRef(int(machine), int(obj), "ArrayPageDevice")


def create_block_storage(node: Node, machines: Iterable[int], filename: str, n_pages: int, n: Sequence[int]) -> list[RemoteRef]:
    """Spawn one ``ArrayPageDevice`` per machine (machines may repeat)."""
    refs, used = [], {}
    for mid in machines:
        k = used[mid] = used.get(mid, -1) + 1
        name = filename if k == 0 else f"{filename}.{k}"
        refs.append(node.spawn(mid, "ArrayPageDevice", [name, n_pages, *n]))
    return refs


# -- the array client -------------------------------------------------------


class Array:
    """Client for one distributed array.

    Construct locally with ``Array(node, spec)`` or spawn remotely as class
    ``"Array"`` with the manifest text as the only argument. Local calls take
    ``Domain`` objects and numpy arrays; the remote methods ``read_raw``,
    ``write_raw`` and ``sum`` take domains as six-integer lists.
    """

    def __init__(self, node: Node, spec: ArraySpec | str, verify: bool = True):
        if isinstance(spec, str):
            spec = ArraySpec.from_manifest(spec)
        self.node = node
        self.spec = spec
        self.N = spec.N
        self.n = spec.n
        self.storage = list(spec.storage)
        self.map = spec.page_map
        self.page_bytes = math.prod(self.n) * ELEMENT.itemsize
        if verify:
            self._verify_storage()

    def _verify_storage(self) -> None:
        calls = [(r, "geometry", ()) for r in self.storage] + [(r, "num_pages", ()) for r in self.storage]
        res = batch_invoke(self.node, calls)
        D = len(self.storage)
        for k, (geom, pages) in enumerate(zip(res[:D], res[D:])):
            if tuple(geom) != tuple(self.n):
                raise BadArgs(f"device {k} holds {tuple(geom)} pages, array uses {self.n}")
            if pages < self.map.pages_per_device:
                raise BadArgs(f"device {k} has {pages} pages, the layout needs {self.map.pages_per_device}")

    # geometry helpers

    def _check(self, d: Domain) -> Domain:
        d = Domain.from_value(d)
        for (lo, hi), N in zip(d.bounds, self.N):
            if lo < 0 or hi > N:
                raise OutOfBounds(f"{d} outside array extents {self.N}")
        return d

    def pages_touching(self, d: Domain) -> list[tuple[int, int, int]]:
        if d.empty:
            return []
        ranges = [range(lo // n, (hi - 1) // n + 1) for (lo, hi), n in zip(d.bounds, self.n)]
        return [(a, b, c) for a in ranges[0] for b in ranges[1] for c in ranges[2]]

    def _page_box(self, p) -> Domain:
        (a, b, c), (n1, n2, n3) = p, self.n
        return Domain(a * n1, (a + 1) * n1, b * n2, (b + 1) * n2, c * n3, (c + 1) * n3)

    def _overlap(self, d: Domain, p):
        """Slices of the overlap in page-local and domain-local coordinates."""
        box = self._page_box(p)
        in_page, in_dom = [], []
        for (dlo, dhi), (plo, phi) in zip(d.bounds, box.bounds):
            lo, hi = max(dlo, plo), min(dhi, phi)
            in_page.append(slice(lo - plo, hi - plo))
            in_dom.append(slice(lo - dlo, hi - dlo))
        return tuple(in_page), tuple(in_dom)

    def _covers(self, d: Domain, p) -> bool:
        box = self._page_box(p)
        return all(dlo <= plo and phi <= dhi for (dlo, dhi), (plo, phi) in zip(d.bounds, box.bounds))

    def _rank(self, p) -> int:
        return self.map.rank(*p)

    def _call(self, p, method: str, *args):
        addr = self.map.lookup(*p)
        return (self.storage[addr.device_id], method, (*args, addr.index))

    def _fetch(self, pages) -> dict:
        pages = sorted(set(pages), key=self._rank)
        data = batch_invoke(self.node, [self._call(p, "read") for p in pages])
        return {p: np.frombuffer(raw, dtype=ELEMENT).reshape(self.n) for p, raw in zip(pages, data)}

    # public operations

    def read(self, d: Domain) -> np.ndarray:
        return self.read_many([d])[0]

    def read_many(self, domains: Sequence[Domain]) -> list[np.ndarray]:
        """Read several domains with one batch; each page is fetched once."""
        domains = [self._check(d) for d in domains]
        pages = self._fetch(p for d in domains for p in self.pages_touching(d))
        out = []
        for d in domains:
            sub = np.zeros(d.shape, dtype=np.float64)
            for p in self.pages_touching(d):
                in_page, in_dom = self._overlap(d, p)
                sub[in_dom] = pages[p][in_page]
            out.append(sub)
        return out

    def write(self, d: Domain, subarray) -> None:
        self.write_many([(d, subarray)])

    def write_many(self, items: Sequence[tuple[Domain, np.ndarray]]) -> None:
        """Write several domains; later items win where they overlap.

        Pages covered completely by one item are written blind; the rest are
        read, patched and written back.
        """
        checked = []
        for d, sub in items:
            d = self._check(d)
            sub = np.asarray(sub, dtype=np.float64)
            if sub.shape != d.shape:
                raise BadArgs(f"subarray shape {sub.shape} does not match domain shape {d.shape}")
            checked.append((d, sub))
        touched = {p for d, _ in checked for p in self.pages_touching(d)}
        partial = [p for p in touched if not any(self._covers(d, p) for d, _ in checked)]
        pages = {p: a.copy() for p, a in self._fetch(partial).items()}
        for p in touched:
            pages.setdefault(p, np.zeros(self.n, dtype=np.float64))
        for d, sub in checked:
            for p in self.pages_touching(d):
                in_page, in_dom = self._overlap(d, p)
                pages[p][in_page] = sub[in_dom]
        order = sorted(touched, key=self._rank)
        batch_invoke(self.node, [self._call(p, "write", pages[p].astype(ELEMENT).tobytes()) for p in order])

    def sum(self, d: Domain) -> float:
        """Sum over ``d``: whole pages on their devices, edge pages here."""
        d = self._check(d)
        pages = sorted(self.pages_touching(d), key=self._rank)
        calls = [self._call(p, "sum" if self._covers(d, p) else "read") for p in pages]
        results = batch_invoke(self.node, calls)
        total = 0.0
        for p, (_, method, _), res in zip(pages, calls, results):
            if method == "sum":
                total += res
            else:
                in_page, _ = self._overlap(d, p)
                block = np.frombuffer(res, dtype=ELEMENT).reshape(self.n)[in_page]
                total += page_sum(np.ascontiguousarray(block).tobytes(), *block.shape)
        return total

    # remote surface

    @remote
    def read_raw(self, d):
        return self.read(Domain.from_value(d)).astype(ELEMENT).tobytes()

    @remote
    def write_raw(self, d, data):
        d = Domain.from_value(d)
        if not isinstance(data, bytes) or len(data) != d.size * ELEMENT.itemsize:
            raise BadArgs(f"expected {d.size * ELEMENT.itemsize} bytes for {d}")
        self.write(d, np.frombuffer(data, dtype=ELEMENT).reshape(d.shape))

    @remote
    def sum_raw(self, d):
        return self.sum(Domain.from_value(d))

    @remote
    def manifest(self):
        return self.spec.to_manifest()

    @remote
    def persist_spec(self):
        return [self.spec.to_manifest()]


def attach(node: Node, array_ref: RemoteRef) -> Array:
    """Build a local client for the array held by a remote ``Array`` object."""
    return Array(node, node.invoke(array_ref, "manifest"), verify=False)


CLASSES = (Array,)
