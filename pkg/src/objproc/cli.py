"""``objproc`` command line: clusters, demos, the parallel-read bench, persistence."""

from __future__ import annotations

import argparse
import math
import sys
import tempfile
import time
from contextlib import contextmanager

import numpy as np

from . import fftdemo, worker
from .cluster import cluster_up
from .distarray import Array, ArraySpec, Domain, create_block_storage
from .errors import ObjprocError, OutOfBounds
from .pagestore import page_sum
from .parcall import batch_invoke
from .persist import Registry, default_manifest_path, read_manifest
from .transport import SIM, SOCKET, TransportConfig


class UsageError(Exception):
    pass


class Report:
    """Collects ``key=value`` results and failed checks for one command."""

    def __init__(self, fmt: str, out=None):
        self.fmt = fmt
        self.out = out or sys.stdout
        self.failed = False

    def emit(self, **values) -> None:
        if self.fmt == "kv":
            print(" ".join(f"{k}={_fmt(v)}" for k, v in values.items()), file=self.out)
        else:
            for k, v in values.items():
                print(f"{k.replace('_', ' ')}: {_fmt(v)}", file=self.out)

    def check(self, key: str, ok: bool, detail: str = "") -> str:
        if not ok:
            self.failed = True
            print(f"FAIL key={key}" + (f" detail={detail}" if detail else ""), file=self.out)
        return "ok" if ok else "fail"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _positive(text: str) -> int:
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"{text} is not a positive integer")
    return v


@contextmanager
def _cluster(args, machines: int, latency: float = 0.0):
    with tempfile.TemporaryDirectory(prefix="objproc-cli-") as tmp:
        cfg = TransportConfig(
            backend=args.transport,
            sim_latency=latency,
            sim_seed=args.seed,
            root=getattr(args, "root", None) or tmp,
        )
        with cluster_up(machines, cfg) as cluster:
            yield cluster


# -- subcommands ---------------------------------------------------------------


def cmd_cluster_up(args, report: Report) -> None:
    cfg = TransportConfig(backend=args.transport, sim_seed=args.seed, root=args.root)
    with cluster_up(args.machines, cfg) as cluster:
        for e in cluster.endpoints:
            report.emit(machine=e.machine_id, address=e.address)
        if args.transport == SOCKET and args.hold != 0:
            report.emit(topology=cluster.root / "topology.txt")
            sys.stdout.flush()
            try:
                time.sleep(args.hold if args.hold > 0 else 1e9)
            except KeyboardInterrupt:
                pass


def cmd_demo_pagestore(args, report: Report) -> None:
    if args.page_bytes % 8:
        raise UsageError("--page-bytes must be a multiple of 8 for the array-page part")
    rng = np.random.default_rng(args.seed)
    with _cluster(args, args.machines, args.latency_ms / 1000) as c:
        home = args.machines - 1
        dev = c.spawn(home, "PageDevice", ["pagefile", args.pages, args.page_bytes])
        pages = {i: rng.integers(0, 256, args.page_bytes, dtype=np.uint8).tobytes() for i in range(args.pages)}
        for i, p in pages.items():
            c.invoke(dev, "write", [p, i])
        roundtrip = all(c.invoke(dev, "read", [i]) == p for i, p in pages.items())
        try:
            c.invoke(dev, "write", [pages[0], 17])
            index17 = "accepted"
        except OutOfBounds:
            index17 = "out_of_bounds"

        blocks = c.spawn(home, "ArrayPageDevice", [dev, args.page_bytes // 8, 1, 1])
        c.destroy(dev)
        page_address = min(4, args.pages - 1)
        before = c.stats.bytes
        remote = c.invoke(blocks, "sum", [page_address])
        remote_bytes = c.stats.bytes - before
        before = c.stats.bytes
        local = page_sum(c.invoke(blocks, "read", [page_address]), args.page_bytes // 8, 1, 1)
        local_bytes = c.stats.bytes - before
        report.emit(
            roundtrip=report.check("roundtrip", roundtrip),
            remote_sum=report.check("remote_sum", remote == local, f"{remote!r}!={local!r}"),
            index_17=index17,
            move_computation_bytes=remote_bytes,
            move_data_bytes=local_bytes,
        )
        report.check("index_17", index17 == "out_of_bounds", index17)
        report.check("wire_accounting", remote_bytes < args.page_bytes <= local_bytes)


def cmd_demo_sum(args, report: Report) -> None:
    N, n = args.size, args.page
    if N % n:
        raise UsageError("--page must divide --size")
    rng = np.random.default_rng(args.seed)
    machines = [k % args.machines for k in range(args.devices)]
    with _cluster(args, args.machines, args.latency_ms / 1000) as c:
        grid = (N // n) ** 3
        storage = create_block_storage(c.master, machines, "array_blocks", -(-grid // args.devices), (n, n, n))
        array = Array(c.master, ArraySpec((N, N, N), (n, n, n), tuple(storage), args.map))
        # non-negative data keeps the relative-error check well conditioned
        shadow = rng.random((N, N, N))
        array.write(Domain.full(N, N, N), shadow)
        mismatches = 0
        for _ in range(args.ops):
            lo = rng.integers(0, N, 3)
            hi = [int(rng.integers(a, N)) + 1 for a in lo]
            d = Domain(int(lo[0]), hi[0], int(lo[1]), hi[1], int(lo[2]), hi[2])
            sl = tuple(slice(a, b) for a, b in d.bounds)
            if rng.random() < 0.5:
                sub = rng.random(d.shape)
                array.write(d, sub)
                shadow[sl] = sub
            elif not np.array_equal(array.read(d), shadow[sl]):
                mismatches += 1
        t0 = c.now()
        total = array.sum(Domain.full(N, N, N))
        elapsed = c.now() - t0
        oracle = math.fsum(shadow.ravel().tolist())
        rel = abs(total - oracle) / max(abs(oracle), 1e-300)
        report.emit(
            sum=f"{total:.17g}",
            oracle=f"{oracle:.17g}",
            rel_err=f"{rel:.3e}",
            shadow_ops=args.ops,
            shadow=report.check("shadow", mismatches == 0, f"{mismatches} mismatched reads"),
            verify=report.check("sum", rel <= 1e-12, f"rel_err={rel:.3e}"),
            **({"virtual_sum_s": f"{elapsed:.6f}"} if args.transport == SIM else {}),
        )


def cmd_demo_fft(args, report: Report) -> None:
    M, n = args.grid, min(args.page, args.grid)
    try:
        fftdemo.check_grid((M, M, M), (n, n, n))
    except ObjprocError as exc:
        raise UsageError(str(exc)) from None
    rng = np.random.default_rng(args.seed)
    z = rng.standard_normal((M, M, M)) + 1j * rng.standard_normal((M, M, M))
    machines = list(range(args.machines))
    with _cluster(args, args.machines, args.latency_ms / 1000) as c:
        group, _ = fftdemo.create_group(c.master, args.workers, machines)
        array, aref = fftdemo.create_complex_array(c.master, (M, M, M), (n, n, n), machines)
        fftdemo.store_complex(array, z)
        fftdemo.transform(c.master, group, fftdemo.FORWARD, aref, slab=args.slab)
        X = fftdemo.load_complex(array)
        parseval = abs(np.sum(np.abs(z) ** 2) - np.sum(np.abs(X) ** 2) / z.size) / np.sum(np.abs(z) ** 2)
        values = {}
        if M <= args.oracle_max:
            err = float(np.max(np.abs(X - fftdemo.dft3d_oracle(fftdemo.FORWARD, z))))
            values["max_forward_err"] = f"{err:.3e}"
            report.check("forward", err <= 1e-9, f"{err:.3e}")
        fftdemo.transform(c.master, group, fftdemo.INVERSE, aref, slab=args.slab)
        rt = float(np.max(np.abs(fftdemo.load_complex(array) - z)))
        report.emit(
            grid=M,
            workers=args.workers,
            max_roundtrip_err=f"{rt:.3e}",
            parseval_rel_err=f"{parseval:.3e}",
            **values,
            roundtrip=report.check("roundtrip", rt <= 1e-10, f"{rt:.3e}"),
            parseval=report.check("parseval", parseval <= 1e-9, f"{parseval:.3e}"),
            **({"virtual_s": f"{c.now():.6f}"} if args.transport == SIM else {}),
        )


def cmd_bench_parallel_read(args, report: Report) -> None:
    if args.transport != SIM:
        raise UsageError("bench parallel-read measures virtual time; use --transport sim")
    D, latency = args.devices, args.latency_ms / 1000
    n = (8, 8, 8)
    rng = np.random.default_rng(args.seed)
    with _cluster(args, D, latency) as c:
        devices = create_block_storage(c.master, range(D), "array_blocks", 4, n)
        address = [int(rng.integers(0, 4)) for _ in range(D)]
        for dev, a in zip(devices, address):
            c.invoke(dev, "write", [rng.standard_normal(n).tobytes(), a])
        t0 = c.now()
        seq = [c.invoke(dev, "read", [a]) for dev, a in zip(devices, address)]
        t_seq = c.now() - t0
        t0 = c.now()
        bat = batch_invoke(c.master, [(dev, "read", (a,)) for dev, a in zip(devices, address)])
        t_bat = c.now() - t0
        ratio = t_seq / t_bat if t_bat else float("inf")
        report.emit(
            devices=D,
            latency_ms=args.latency_ms,
            sequential_s=f"{t_seq:.6f}",
            batched_s=f"{t_bat:.6f}",
            ratio=f"{ratio:.3f}",
            pages_identical=report.check("pages_identical", seq == bat),
            bound=report.check("ratio", ratio >= D / 2, f"ratio {ratio:.3f} < {D / 2}"),
        )


def cmd_persist_list(args, report: Report) -> None:
    for e in read_manifest(args.manifest or default_manifest_path()).values():
        report.emit(address=e.address, **{"class": e.class_name}, machine=e.machine_id)


def cmd_persist_resolve(args, report: Report) -> None:
    with _cluster(args, args.machines) as c:
        reg = Registry(c.master, args.manifest or default_manifest_path())
        ref = reg.resolve(args.address)
        extra = {}
        if ref.class_name in ("PageDevice", "ArrayPageDevice"):
            extra["pages"] = c.invoke(ref, "num_pages")
        report.emit(address=args.address, **{"class": ref.class_name}, machine=ref.machine_id, object=ref.object_id, **extra)


# -- parser ------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, machines: int = 2) -> None:
    p.add_argument("--machines", type=_positive, default=machines)
    p.add_argument("--transport", choices=(SIM, SOCKET), default=SIM)
    p.add_argument("--latency-ms", type=float, default=0.0, help="simulated one-way latency")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("kv", "human"), default="kv")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="objproc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    cluster = sub.add_parser("cluster", help="bring a cluster up").add_subparsers(dest="action", required=True)
    up = cluster.add_parser("up", help="start a cluster and print its endpoints")
    _common(up)
    up.add_argument("--root", help="working directory for machine files")
    up.add_argument("--hold", type=float, default=-1, help="seconds to keep a socket cluster up (-1: until interrupted)")
    up.set_defaults(func=cmd_cluster_up)

    w = sub.add_parser("worker", help="serve one machine of a socket cluster", add_help=False)
    w.add_argument("rest", nargs=argparse.REMAINDER)
    w.set_defaults(func=None)

    demo = sub.add_parser("demo", help="run the example programs end to end").add_subparsers(dest="demo", required=True)
    ps = demo.add_parser("pagestore", help="page roundtrip and remote vs local sum")
    _common(ps)
    ps.add_argument("--pages", type=_positive, default=10)
    ps.add_argument("--page-bytes", type=_positive, default=1024)
    ps.set_defaults(func=cmd_demo_pagestore)

    sm = demo.add_parser("sum", help="distributed array with shadow-array and sum checks")
    _common(sm, machines=4)
    sm.add_argument("--size", type=_positive, default=32)
    sm.add_argument("--page", type=_positive, default=8)
    sm.add_argument("--devices", type=_positive, default=4)
    sm.add_argument("--map", choices=("linear", "roundrobin"), default="roundrobin")
    sm.add_argument("--ops", type=int, default=100)
    sm.set_defaults(func=cmd_demo_sum)

    ff = demo.add_parser("fft", help="distributed 3D FFT with verification")
    _common(ff, machines=4)
    ff.add_argument("--grid", type=_positive, default=16)
    ff.add_argument("--page", type=_positive, default=8)
    ff.add_argument("--workers", type=_positive, default=4)
    ff.add_argument("--slab", action="store_true", help="page-aligned slab I/O instead of line-at-a-time")
    ff.add_argument("--oracle-max", type=int, default=8, help="largest grid checked against the brute-force DFT")
    ff.set_defaults(func=cmd_demo_fft)

    bench = sub.add_parser("bench", help="latency-hiding measurements").add_subparsers(dest="bench", required=True)
    pr = bench.add_parser("parallel-read", help="sequential vs batched page reads in virtual time")
    _common(pr)
    pr.add_argument("--devices", type=_positive, default=8)
    pr.set_defaults(func=cmd_bench_parallel_read, latency_ms=10.0)

    persist = sub.add_parser("persist", help="inspect and resolve persisted objects").add_subparsers(dest="action", required=True)
    ls = persist.add_parser("list", help="print the manifest entries")
    ls.add_argument("--manifest", help="manifest file (default: $OBJPROC_MANIFEST)")
    ls.add_argument("--format", choices=("kv", "human"), default="kv")
    ls.set_defaults(func=cmd_persist_list)
    rs = persist.add_parser("resolve", help="activate a persisted object and describe it")
    rs.add_argument("address")
    rs.add_argument("--manifest", help="manifest file (default: $OBJPROC_MANIFEST)")
    rs.add_argument("--root", help="cluster root holding the machines' files")
    _common(rs)
    rs.set_defaults(func=cmd_persist_resolve)
    return parser


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv[:1] == ["worker"]:
        return worker.main(argv[1:])
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage or help
        return 0 if exc.code in (0, None) else 2
    report = Report(getattr(args, "format", "kv"))
    try:
        args.func(args, report)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"objproc: error: {exc}", file=sys.stderr)
        return 2
    except ObjprocError as exc:
        print(f"FAIL key=error detail={type(exc).__name__}:{str(exc).replace(' ', '_')}")
        return 1
    return 1 if report.failed else 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
