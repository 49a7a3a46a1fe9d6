import numpy as np
import pytest

from conftest import sim, sock
from objproc.distarray import Array, ArraySpec, Domain, attach, create_block_storage
from objproc.errors import BadArgs, DeviceError, DuplicateAddress, UnknownAddress
from objproc.persist import Entry, Registry, SymbolicAddress, read_manifest
from objproc.wire import RemoteRef

BACKENDS = {"sim": sim, "socket": sock}
DEV = "objproc://data/PageDevice/34"


def test_address_syntax():
    a = SymbolicAddress.parse("objproc://data/set/PageDevice/34")
    assert (a.namespace, a.class_name, a.name) == ("data/set", "PageDevice", "34")
    assert str(a) == "objproc://data/set/PageDevice/34"
    for bad in ["http://data/set/PageDevice/34", "objproc://PageDevice/34", "objproc://a/b c/d"]:
        with pytest.raises(BadArgs):
            SymbolicAddress.parse(bad)


def test_manifest_line_format():
    e = Entry(DEV, "PageDevice", 1, ["/x/pagefile", 10, 1024, "open"])
    fields = e.to_line().split(" ")
    assert fields[:3] == [DEV, "PageDevice", "1"] and len(fields) == 4
    assert Entry.from_line(e.to_line()) == e
    with pytest.raises(BadArgs):
        Entry.from_line(f"{DEV} PageDevice 1 !!notbase64")


@pytest.mark.parametrize("backend", ["sim", "socket"])
def test_restart_roundtrip(backend, tmp_path):
    manifest = tmp_path / "manifest.txt"
    rng = np.random.default_rng(3)
    pages = {i: rng.bytes(1024) for i in (0, 3, 9)}
    with BACKENDS[backend](3, root=tmp_path / "cluster") as c:
        reg = Registry(c.master, manifest)
        dev = c.spawn(1, "PageDevice", ["pagefile", 10, 1024])
        for i, p in pages.items():
            c.invoke(dev, "write", [p, i])
        reg.persist(dev, DEV)
        assert DEV in read_manifest(manifest)
    with BACKENDS[backend](3, root=tmp_path / "cluster") as c:
        reg = Registry(c.master, manifest)
        dev = reg.resolve(DEV)
        assert dev.machine_id == 1
        for i in range(10):
            assert c.invoke(dev, "read", [i]) == pages.get(i, bytes(1024))


@pytest.mark.parametrize("backend", ["sim", "socket"])
def test_array_restart_roundtrip(backend, tmp_path):
    manifest = tmp_path / "manifest.txt"
    shape, page = (16, 16, 16), (8, 8, 8)
    x = np.random.default_rng(4).normal(size=shape)
    with BACKENDS[backend](3, root=tmp_path / "cluster") as c:
        reg = Registry(c.master, manifest)
        storage = create_block_storage(c.master, [1, 2], "blocks", 4, page)
        spec = ArraySpec(shape, page, tuple(storage), "linear")
        Array(c.master, spec).write(Domain.full(*shape), x)
        array_ref = c.spawn(0, "Array", [spec.to_manifest()])
        with pytest.raises(BadArgs):
            reg.persist(array_ref, "objproc://sim/Array/field")  # devices not yet persisted
        for k, ref in enumerate(storage):
            reg.persist(ref, f"objproc://sim/ArrayPageDevice/block{k}")
        reg.persist(array_ref, "objproc://sim/Array/field")
        expected_sum = attach(c.master, array_ref).sum(Domain.full(*shape))
    with BACKENDS[backend](3, root=tmp_path / "cluster") as c:
        reg = Registry(c.master, manifest)
        array = attach(c.master, reg.resolve("objproc://sim/Array/field"))
        assert array.read(Domain.full(*shape)).tobytes() == x.tobytes()
        assert array.sum(Domain.full(*shape)) == expected_sum
        assert sorted(r.machine_id for r in array.storage) == [1, 2]


def test_duplicate_and_unpersistable(sim4, tmp_path):
    reg = Registry(sim4.master, tmp_path / "m.txt")
    dev = sim4.spawn(1, "PageDevice", ["pagefile", 10, 1024])
    reg.persist(dev, DEV)
    with pytest.raises(DuplicateAddress):
        reg.persist(dev, DEV)
    with pytest.raises(BadArgs):
        reg.persist(sim4.spawn(1, "Counter"), "objproc://data/Counter/1")
    with pytest.raises(BadArgs):
        reg.persist(dev, "objproc://data/Counter/2")  # class segment must match


def test_resolve_is_idempotent(sim4, tmp_path):
    reg = Registry(sim4.master, tmp_path / "m.txt")
    dev = sim4.spawn(2, "PageDevice", ["pagefile", 10, 1024])
    reg.persist(dev, DEV)
    reg.forget()
    a = reg.resolve(DEV)
    b = reg.resolve(DEV)
    assert a == b
    sim4.invoke(a, "write", [b"\x05" * 1024, 2])
    assert sim4.invoke(b, "read", [2]) == b"\x05" * 1024


def test_resolve_returns_live_object(sim4, tmp_path):
    reg = Registry(sim4.master, tmp_path / "m.txt")
    dev = sim4.spawn(2, "PageDevice", ["pagefile", 10, 1024])
    reg.persist(dev, DEV)
    assert reg.resolve(DEV) == dev


def test_destroy_without_unpersist(sim4, tmp_path):
    reg = Registry(sim4.master, tmp_path / "m.txt")
    dev = sim4.spawn(1, "PageDevice", ["pagefile", 10, 1024])
    sim4.invoke(dev, "write", [b"\x09" * 1024, 7])
    reg.persist(dev, DEV)
    sim4.destroy(dev)
    again = reg.resolve(DEV)
    assert again != dev
    assert sim4.invoke(again, "read", [7]) == b"\x09" * 1024


def test_unpersist_without_destroy(sim4, tmp_path):
    reg = Registry(sim4.master, tmp_path / "m.txt")
    dev = sim4.spawn(1, "PageDevice", ["pagefile", 10, 1024])
    reg.persist(dev, DEV)
    reg.unpersist(DEV)
    assert sim4.invoke(dev, "num_pages") == 10
    assert (sim4.machine_root(1) / "pagefile").exists()
    with pytest.raises(UnknownAddress):
        reg.resolve(DEV)
    with pytest.raises(UnknownAddress):
        reg.unpersist(DEV)
    reg.persist(dev, DEV)
    assert reg.resolve(DEV) == dev


def test_missing_file_fails_resolve(sim4, tmp_path):
    reg = Registry(sim4.master, tmp_path / "m.txt")
    dev = sim4.spawn(1, "PageDevice", ["pagefile", 10, 1024])
    reg.persist(dev, DEV)
    sim4.destroy(dev)
    (sim4.machine_root(1) / "pagefile").unlink()
    with pytest.raises(DeviceError):
        reg.resolve(DEV)


def test_registries_share_one_manifest(sim4, tmp_path):
    path = tmp_path / "m.txt"
    one, two = Registry(sim4.master, path), Registry(sim4.master, path)
    for k in range(5):
        reg = one if k % 2 else two
        reg.persist(sim4.spawn(1, "PageDevice", [f"f{k}", 1, 8]), f"objproc://data/PageDevice/{k}")
    assert sorted(read_manifest(path)) == [f"objproc://data/PageDevice/{k}" for k in range(5)]


def test_manifest_env_var(monkeypatch, tmp_path):
    from objproc.persist import default_manifest_path

    monkeypatch.setenv("OBJPROC_MANIFEST", str(tmp_path / "env.txt"))
    assert default_manifest_path() == tmp_path / "env.txt"


def test_wrapper_persists_by_file(sim4, tmp_path):
    reg = Registry(sim4.master, tmp_path / "m.txt")
    raw = sim4.spawn(1, "PageDevice", ["pagefile", 2, 4096])
    wrapped = sim4.spawn(1, "ArrayPageDevice", [raw, 8, 8, 8])
    # the wrapper stores its own file, not the wrapped ref, so it persists alone
    reg.persist(wrapped, "objproc://data/ArrayPageDevice/w")
    assert isinstance(reg.resolve("objproc://data/ArrayPageDevice/w"), RemoteRef)
