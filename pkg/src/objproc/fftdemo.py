"""A group of FFT processes transforming a complex grid held in an Array.

The complex grid ``(M1, M2, M3)`` is stored in an Array of extent
``(2*M1, M2, M3)``: rows ``[0, M1)`` hold real parts, rows ``[M1, 2*M1)``
imaginary parts. The 3D transform is three passes of 1D transforms, along
axis 3, then 2, then 1, with a group barrier after each pass.

Work split: a line along axis ``a`` is identified by its two other
coordinates. Lines are grouped into page columns (lines that cross the same
pages); column ``r`` in row-major order belongs to worker ``r mod N``. No two
workers ever write the same page during a pass, which keeps the
read-modify-write of partially covered pages race free.
"""

from __future__ import annotations

import cmath
import math
from typing import Sequence

import numpy as np

from .distarray import Array, ArraySpec, Domain, attach, create_block_storage
from .errors import BadArgs
from .parcall import barrier, batch_invoke, deep_copy_group
from .runtime import Node, remote
from .wire import RemoteRef

FORWARD = -1
INVERSE = +1


def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def fft1d(sign: int, v) -> np.ndarray:
    """Unnormalised iterative radix-2 transform with exponent ``sign``."""
    if sign not in (FORWARD, INVERSE):
        raise BadArgs("sign must be -1 or +1")
    x = np.array(v, dtype=np.complex128)
    n = x.shape[0]
    if not _is_pow2(n):
        raise BadArgs(f"length {n} is not a power of two")
    bits = n.bit_length() - 1
    rev = np.zeros(n, dtype=np.intp)
    for i in range(n):
        rev[i] = int(format(i, f"0{bits}b")[::-1], 2) if bits else 0
    x = x[rev]
    size = 2
    while size <= n:
        half = size // 2
        w = np.exp(sign * 2j * np.pi * np.arange(half) / size)
        x = x.reshape(-1, size)
        top = x[:, :half].copy()
        bot = x[:, half:] * w
        x[:, :half] = top + bot
        x[:, half:] = top - bot
        x = x.reshape(n)
        size *= 2
    return x


def dft1d_oracle(sign: int, v) -> list[complex]:
    """Direct O(n^2) evaluation of the same transform."""
    v = [complex(z) for z in v]
    n = len(v)
    return [sum(v[j] * cmath.exp(sign * 2j * math.pi * j * k / n) for j in range(n)) for k in range(n)]


# -- line partition ---------------------------------------------------------

AXES = (2, 1, 0)  # pass order: axis 3, axis 2, axis 1


def _other_axes(axis: int) -> tuple[int, int]:
    return tuple(k for k in range(3) if k != axis)


def page_columns(axis: int, shape: Sequence[int], page: Sequence[int]) -> list[tuple[int, int]]:
    b, c = _other_axes(axis)
    return [(x, y) for x in range(shape[b] // page[b]) for y in range(shape[c] // page[c])]


def assigned_columns(axis: int, worker: int, n_workers: int, shape, page) -> list[tuple[int, int]]:
    return [col for r, col in enumerate(page_columns(axis, shape, page)) if r % n_workers == worker]


def assigned_lines(axis: int, worker: int, n_workers: int, shape, page) -> list[tuple[int, int]]:
    """Lines (by their two fixed coordinates) that ``worker`` transforms."""
    b, c = _other_axes(axis)
    lines = []
    for x, y in assigned_columns(axis, worker, n_workers, shape, page):
        for i in range(x * page[b], (x + 1) * page[b]):
            for j in range(y * page[c], (y + 1) * page[c]):
                lines.append((i, j))
    return lines


def _line_domains(axis: int, line: tuple[int, int], shape) -> tuple[Domain, Domain]:
    """Domains of the real and imaginary parts of one line."""
    M1 = shape[0]
    b, c = _other_axes(axis)
    lo = [0, 0, 0]
    hi = list(shape)
    lo[b], hi[b] = line[0], line[0] + 1
    lo[c], hi[c] = line[1], line[1] + 1
    re = Domain(lo[0], hi[0], lo[1], hi[1], lo[2], hi[2])
    im = Domain(lo[0] + M1, hi[0] + M1, lo[1], hi[1], lo[2], hi[2])
    return re, im


def _slab_domains(axis: int, col: tuple[int, int], shape, page) -> tuple[Domain, Domain]:
    M1 = shape[0]
    b, c = _other_axes(axis)
    lo = [0, 0, 0]
    hi = list(shape)
    lo[b], hi[b] = col[0] * page[b], (col[0] + 1) * page[b]
    lo[c], hi[c] = col[1] * page[c], (col[1] + 1) * page[c]
    re = Domain(lo[0], hi[0], lo[1], hi[1], lo[2], hi[2])
    im = Domain(lo[0] + M1, hi[0] + M1, lo[1], hi[1], lo[2], hi[2])
    return re, im


def transform_lines(sign: int, z: np.ndarray, axis: int) -> np.ndarray:
    """Apply ``fft1d`` along ``axis`` of ``z``; the inverse divides by length."""
    z = np.moveaxis(np.asarray(z, dtype=np.complex128), axis, -1)
    out = np.empty_like(z)
    for idx in np.ndindex(z.shape[:-1]):
        out[idx] = fft1d(sign, z[idx])
    if sign == INVERSE:
        out /= z.shape[-1]
    return np.moveaxis(out, -1, axis)


class FFT:
    """One member of a transform group."""

    def __init__(self, node: Node, id: int):
        if not isinstance(id, int) or id < 0:
            raise BadArgs(f"FFT id must be a non-negative int, got {id!r}")
        self.node = node
        self.id = id
        self.N = 0
        self.group: list[RemoteRef] = []
        self.lines_done = 0

    @remote
    def SetGroup(self, N, group_list_ref):
        if not isinstance(N, int) or not 0 <= self.id < N:
            raise BadArgs(f"worker id {self.id} is not below group size {N!r}")
        group = deep_copy_group(self.node, group_list_ref)
        if len(group) != N:
            raise BadArgs(f"group list holds {len(group)} members, expected {N}")
        self.N = N
        self.group = group

    @remote
    def get_group(self):
        return list(self.group)

    @remote
    def get_id(self):
        return self.id

    @remote
    def ping(self, target):
        """Call ``get_id`` on group member ``target`` straight through the copy."""
        return self.node.invoke(self.group[target], "get_id")

    @remote
    def lines(self, axis, shape, page):
        return [list(line) for line in assigned_lines(axis, self.id, self.N, shape, page)]

    @remote
    def transform(self, sign, array_ref, axis, slab=0):
        """Transform this worker's lines along ``axis`` (0, 1 or 2)."""
        if not self.N:
            raise BadArgs("SetGroup must run before transform")
        if sign not in (FORWARD, INVERSE) or axis not in (0, 1, 2):
            raise BadArgs("sign must be -1/+1 and axis 0, 1 or 2")
        array = attach(self.node, array_ref)
        shape = complex_shape(array)
        if slab:
            self._transform_slabs(sign, array, axis, shape)
        else:
            self._transform_lines(sign, array, axis, shape)
        return self.lines_done

    def _transform_lines(self, sign, array: Array, axis: int, shape) -> None:
        for line in assigned_lines(axis, self.id, self.N, shape, array.n):
            re_d, im_d = _line_domains(axis, line, shape)
            re, im = array.read_many([re_d, im_d])
            z = transform_lines(sign, re + 1j * im, axis)
            array.write_many([(re_d, z.real), (im_d, z.imag)])
            self.lines_done += 1

    def _transform_slabs(self, sign, array: Array, axis: int, shape) -> None:
        for col in assigned_columns(axis, self.id, self.N, shape, array.n):
            re_d, im_d = _slab_domains(axis, col, shape, array.n)
            re, im = array.read_many([re_d, im_d])
            z = transform_lines(sign, re + 1j * im, axis)
            array.write_many([(re_d, z.real), (im_d, z.imag)])
            b, c = _other_axes(axis)
            self.lines_done += array.n[b] * array.n[c]


CLASSES = (FFT,)


# -- driver -----------------------------------------------------------------


def complex_shape(array: Array) -> tuple[int, int, int]:
    N1, N2, N3 = array.N
    return (N1 // 2, N2, N3)


def check_grid(shape: Sequence[int], page: Sequence[int]) -> None:
    for M, n in zip(shape, page):
        if not _is_pow2(M):
            raise BadArgs(f"grid extent {M} is not a power of two")
        if M % n:
            raise BadArgs(f"page extent {n} does not divide grid extent {M}")


def create_group(node: Node, n_workers: int, machines: Sequence[int]) -> tuple[list[RemoteRef], RemoteRef]:
    """Spawn workers ``FFT(id)`` on ``machines[id % len]`` and publish the group.

    Returns the member refs and the ref of the ``GroupList`` holding them;
    every member deep-copies the list in ``SetGroup``.
    """
    fft = [node.spawn(machines[i % len(machines)], "FFT", [i]) for i in range(n_workers)]
    holder = node.spawn(node.machine_id, "GroupList", [fft])
    batch_invoke(node, [(ref, "SetGroup", (n_workers, holder)) for ref in fft])
    return fft, holder


def transform(node: Node, group: Sequence[RemoteRef], sign: int, array_ref: RemoteRef, slab: bool = False) -> None:
    """Run the three passes over the group, with a barrier after each."""
    for axis in AXES:
        batch_invoke(node, [(ref, "transform", (sign, array_ref, axis, int(slab))) for ref in group])
        barrier(node, group)


def create_complex_array(node: Node, shape: Sequence[int], page: Sequence[int], machines: Sequence[int], map_name: str = "roundrobin", filename: str = "fft_blocks") -> tuple[Array, RemoteRef]:
    """Allocate storage for a complex grid and spawn a shared ``Array`` object."""
    check_grid(shape, page)
    N = (2 * shape[0], shape[1], shape[2])
    grid_pages = math.prod(Nk // nk for Nk, nk in zip(N, page))
    per_device = -(-grid_pages // len(machines))
    storage = create_block_storage(node, machines, filename, per_device, page)
    spec = ArraySpec(N, tuple(page), tuple(storage), map_name)
    array = Array(node, spec)
    ref = node.spawn(node.machine_id, "Array", [spec.to_manifest()])
    return array, ref


def store_complex(array: Array, z: np.ndarray) -> None:
    M1 = z.shape[0]
    N1, N2, N3 = array.N
    array.write_many([(Domain(0, M1, 0, N2, 0, N3), z.real), (Domain(M1, N1, 0, N2, 0, N3), z.imag)])


def load_complex(array: Array) -> np.ndarray:
    N1, N2, N3 = array.N
    M1 = N1 // 2
    re, im = array.read_many([Domain(0, M1, 0, N2, 0, N3), Domain(M1, N1, 0, N2, 0, N3)])
    return re + 1j * im


def dft3d_oracle(sign: int, z: np.ndarray) -> np.ndarray:
    """Brute-force 3D DFT: every output mode sums over every input element."""
    z = np.asarray(z, dtype=np.complex128)
    M1, M2, M3 = z.shape
    j1, j2, j3 = np.meshgrid(np.arange(M1), np.arange(M2), np.arange(M3), indexing="ij")
    out = np.empty_like(z)
    for k1, k2, k3 in np.ndindex(z.shape):
        phase = k1 * j1 / M1 + k2 * j2 / M2 + k3 * j3 / M3
        out[k1, k2, k3] = np.sum(z * np.exp(sign * 2j * np.pi * phase))
    return out


