"""File-backed page devices and their 3D-structured specialisation.

A device file holds ``NumberOfPages * PageSize`` raw bytes with page ``i``
at offset ``i * PageSize`` and no header. Array pages hold little-endian
float64 values in row-major order with the last axis fastest.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadArgs, DeviceError, OutOfBounds
from .runtime import remote
from .wire import RemoteRef

ELEMENT = np.dtype("<f8")

CREATE = "create"
OPEN = "open"


@dataclass(frozen=True)
class Page:
    """A fixed-size block of unstructured bytes."""

    data: bytes

    def __len__(self) -> int:
        return len(self.data)


@dataclass(frozen=True)
class ArrayPage(Page):
    n1: int = 1
    n2: int = 1
    n3: int = 1

    def __post_init__(self):
        if len(self.data) != self.n1 * self.n2 * self.n3 * ELEMENT.itemsize:
            raise BadArgs(f"page of {len(self.data)} bytes does not hold {self.n1}x{self.n2}x{self.n3} doubles")

    @classmethod
    def from_array(cls, a: np.ndarray) -> "ArrayPage":
        a = np.ascontiguousarray(a, dtype=ELEMENT)
        if a.ndim != 3:
            raise BadArgs("array pages are three-dimensional")
        return cls(a.tobytes(), *a.shape)

    def as_array(self) -> np.ndarray:
        return np.frombuffer(self.data, dtype=ELEMENT).reshape(self.n1, self.n2, self.n3)

    def sum(self) -> float:
        return page_sum(self.data, self.n1, self.n2, self.n3)


def page_sum(data: bytes, n1: int, n2: int, n3: int) -> float:
    """Sum the doubles of one array page, accumulating in storage order."""
    if len(data) != n1 * n2 * n3 * ELEMENT.itemsize:
        raise BadArgs(f"page of {len(data)} bytes does not hold {n1}x{n2}x{n3} doubles")
    values = np.frombuffer(data, dtype=ELEMENT)
    if values.size == 0:
        return 0.0
    # cumsum is a strict left-to-right accumulation, unlike np.sum's pairwise scheme
    return float(np.cumsum(values)[-1])


def _positive_int(name: str, v) -> int:
    if not isinstance(v, int) or isinstance(v, bool) or v <= 0:
        raise BadArgs(f"{name} must be a positive int, got {v!r}")
    return v


class PageDevice:
    """Stores ``NumberOfPages`` pages of ``PageSize`` bytes in one file.

    A missing file is created zero-filled. An existing file of exactly the
    right size is adopted as is; any other size is a ``DeviceError``. With
    ``mode="open"`` the file must already exist.
    """

    def __init__(self, node, filename: str, NumberOfPages: int, PageSize: int, mode: str = CREATE):
        self.NumberOfPages = _positive_int("NumberOfPages", NumberOfPages)
        self.PageSize = _positive_int("PageSize", PageSize)
        if mode not in (CREATE, OPEN):
            raise BadArgs(f"mode must be {CREATE!r} or {OPEN!r}")
        path = Path(filename)
        if node is not None and not path.is_absolute():
            path = node.resolve_path(filename)
        self.path = path.resolve()
        self.filename = str(self.path)
        self._fd = self._open(mode)

    def _open(self, mode: str) -> int:
        size = self.NumberOfPages * self.PageSize
        if self.path.exists():
            actual = self.path.stat().st_size
            if actual != size:
                raise DeviceError(f"{self.path} has {actual} bytes, expected {size}")
            return os.open(self.path, os.O_RDWR)
        if mode == OPEN:
            raise DeviceError(f"{self.path} does not exist")
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fd = os.open(self.path, os.O_RDWR | os.O_CREAT, 0o644)
        os.ftruncate(fd, size)
        return fd

    def _check_index(self, PageIndex) -> int:
        if not isinstance(PageIndex, int) or isinstance(PageIndex, bool):
            raise BadArgs(f"page index must be an int, got {PageIndex!r}")
        if not 0 <= PageIndex < self.NumberOfPages:
            raise OutOfBounds(f"page {PageIndex} outside [0, {self.NumberOfPages})")
        return PageIndex

    def _require_open(self) -> int:
        if self._fd is None:
            raise DeviceError(f"{self.path} is closed")
        return self._fd

    @remote
    def write(self, page, PageIndex):
        data = page.data if isinstance(page, Page) else page
        if not isinstance(data, (bytes, bytearray, memoryview)):
            raise BadArgs(f"page must be bytes, got {type(page).__name__}")
        if len(data) != self.PageSize:
            raise BadArgs(f"page has {len(data)} bytes, device pages have {self.PageSize}")
        offset = self._check_index(PageIndex) * self.PageSize
        fd = self._require_open()
        if os.pwrite(fd, data, offset) != self.PageSize:
            raise DeviceError(f"short write to {self.path}")

    @remote
    def read(self, PageIndex):
        offset = self._check_index(PageIndex) * self.PageSize
        data = os.pread(self._require_open(), self.PageSize, offset)
        if len(data) != self.PageSize:
            raise DeviceError(f"short read from {self.path}")
        return data

    @remote
    def num_pages(self):
        return self.NumberOfPages

    @remote
    def page_size(self):
        return self.PageSize

    @remote
    def persist_spec(self):
        return [self.filename, self.NumberOfPages, self.PageSize, OPEN]

    def close(self) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None


class ArrayPageDevice(PageDevice):
    """A page device whose pages are ``n1 x n2 x n3`` blocks of doubles.

    Constructed either from ``(filename, NumberOfPages, n1, n2, n3[, mode])``
    or from ``(page_device_ref, n1, n2, n3)``; the second form adopts the
    file of an existing live ``PageDevice``.
    """

    def __init__(self, node, *args):
        if args and isinstance(args[0], RemoteRef):
            filename, pages, n1, n2, n3, mode = self._adopt(node, *args)
        else:
            if len(args) not in (5, 6):
                raise BadArgs("ArrayPageDevice(filename, NumberOfPages, n1, n2, n3[, mode])")
            filename, pages, n1, n2, n3, *rest = args
            mode = rest[0] if rest else CREATE
        self.N1 = _positive_int("n1", n1)
        self.N2 = _positive_int("n2", n2)
        self.N3 = _positive_int("n3", n3)
        super().__init__(node, filename, pages, n1 * n2 * n3 * ELEMENT.itemsize, mode)

    @staticmethod
    def _adopt(node, ref, *geometry):
        if len(geometry) != 3:
            raise BadArgs("ArrayPageDevice(page_device_ref, n1, n2, n3)")
        n1, n2, n3 = (_positive_int(k, v) for k, v in zip(("n1", "n2", "n3"), geometry))
        filename = node.invoke(ref, "persist_spec")[0]
        pages = node.invoke(ref, "num_pages")
        page_size = node.invoke(ref, "page_size")
        if page_size != n1 * n2 * n3 * ELEMENT.itemsize:
            raise BadArgs(f"device pages hold {page_size} bytes, geometry {n1}x{n2}x{n3} needs {n1 * n2 * n3 * 8}")
        return filename, pages, n1, n2, n3, OPEN

    @remote
    def sum(self, PageAddress):
        return page_sum(self.read(PageAddress), self.N1, self.N2, self.N3)

    @remote
    def geometry(self):
        return [self.N1, self.N2, self.N3]

    @remote
    def persist_spec(self):
        return [self.filename, self.NumberOfPages, self.N1, self.N2, self.N3, OPEN]


CLASSES = (PageDevice, ArrayPageDevice)
