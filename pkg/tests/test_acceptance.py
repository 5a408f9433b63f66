"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The randomized fixtures run once per session: fifty base/modified image
pairs on a 256 MiB FAT32 base are diffed, packaged, and injected both ways,
and several criteria assert over the shared results.
"""

import contextlib
import os
import random
import string
import time
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import pytest

from eviforge import diffing, handlers, imgfs, inject, package
from eviforge.compose import build_chain, compose, reconstruct, retarget_time
from eviforge.diffing import ArtifactRecord, make_artifact_id
from eviforge.imgfs import FileAttrs, FileMeta
from eviforge.registry import RegistryClient, RegistryStore, start_background

import fatref
from conftest import meta

ACC_BYTES = 256 * 1024 * 1024
ACC_PART = imgfs.PartitionEntry(index=0, start_lba=2048,
                                sector_count=ACC_BYTES // 512 - 2048,
                                type_code=0x0C, bootable=False)
ACC_CLUSTER = 2048  # 256 MiB leaves no room for 65525 clusters above 2 KiB
PAIRS = 50
COMPOSE_PAIRS = 25
RETARGET_DELTAS = 1000
FUZZ_CASES = 10000


@contextlib.contextmanager
def criterion(number: int, title: str):
    try:
        yield
    except BaseException:
        print(f"ACCEPTANCE {number} [{title}]: FAIL")
        raise
    print(f"ACCEPTANCE {number} [{title}]: PASS")


# -- randomized pipeline fixtures -------------------------------------------------


NAME_CHARS = string.ascii_letters + string.digits


def _random_name(rng, allow_long=True):
    if allow_long and rng.random() < 0.4:
        length = rng.randrange(12, 40)
        words = "".join(rng.choice(NAME_CHARS + "  __--") for _ in range(length))
        name = " ".join(words.split())  # collapse runs, strip edges
        if not name or name[-1] in " .":
            name += "x"
        return name
    stem = "".join(rng.choice(string.ascii_uppercase) for _ in range(rng.randrange(1, 9)))
    if rng.random() < 0.5:
        return stem
    return stem + "." + "".join(rng.choice(string.ascii_uppercase)
                                for _ in range(rng.randrange(1, 4)))


def _random_mtime(rng):
    base = datetime(1995, 1, 1)
    return base + timedelta(seconds=rng.randrange(0, 3_000_000_000, 2))


def apply_random_script(vol, rng, op_count):
    """5..50 file add/modify/delete/metadata operations against a volume."""
    files: list[str] = []
    dirs: list[str] = [""]
    applied = 0
    while applied < op_count:
        roll = rng.random()
        if roll < 0.45 or not files:
            parent = rng.choice(dirs)
            path = f"{parent}/{_random_name(rng)}"
            size = rng.choice((0, rng.randrange(1, 2000), rng.randrange(2000, 65536)))
            m = FileMeta(mtime=_random_mtime(rng), ctime=_random_mtime(rng),
                         atime=_random_mtime(rng),
                         attrs=FileAttrs(rng.choice((0, 0x20, 0x22, 0x01))))
            try:
                vol.write_file(path, rng.randbytes(size), m)
            except (imgfs.InvalidPath, imgfs.IsDirectory):
                continue
            if path.upper() not in {f.upper() for f in files}:
                files.append(path)
        elif roll < 0.65:
            target = rng.choice(files)
            m = FileMeta(mtime=_random_mtime(rng), ctime=_random_mtime(rng))
            vol.write_file(target, rng.randbytes(rng.randrange(0, 32768)), m)
        elif roll < 0.8:
            target = rng.choice(files)
            vol.delete_entry(target)
            files.remove(target)
        elif roll < 0.93:
            target = rng.choice(files)
            vol.set_metadata(target, FileMeta(
                mtime=_random_mtime(rng),
                attrs=FileAttrs(rng.choice((0, 0x02, 0x04, 0x20)))))
        else:
            parent = rng.choice(dirs)
            path = f"{parent}/{_random_name(rng, allow_long=False)}"
            try:
                vol.make_dir(path, FileMeta(mtime=_random_mtime(rng)))
            except imgfs.InvalidPath:
                continue
            if path.upper() not in {d.upper() for d in dirs}:
                dirs.append(path)
        applied += 1


@dataclass
class PairResult:
    """Compact per-pair outcome; images are deleted once this is recorded."""

    physical_exact: bool
    logical_equivalent: bool
    verify_physical_passed: bool
    verify_logical_passed: bool
    check_count: int
    fault_localized: bool | None  # None when this pair was not probed


@dataclass
class PipelineResults:
    results: list[PairResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def fault_probes(self) -> int:
        return sum(1 for r in self.results if r.fault_localized is not None)


@pytest.fixture(scope="session")
def acc_base(tmp_path_factory):
    path = str(tmp_path_factory.mktemp("acc") / "base256.img")
    img = imgfs.create_image(path, ACC_BYTES)
    imgfs.write_mbr(img, [ACC_PART])
    vol = imgfs.format_fixture(img, ACC_PART, cluster_size=ACC_CLUSTER, label="ACCBASE")
    seed_meta = meta(ctime=meta().mtime, atime=meta().mtime)
    vol.write_file("/system/boot.cfg", b"boot-order=disk\n", seed_meta)
    vol.write_file("/system/kernel.bin", bytes(range(256)) * 64, seed_meta)
    vol.write_file("/users/readme.txt", b"base system image\n", seed_meta)
    img.flush()
    img.close()
    return path


def _tracked_state(vol):
    state = {}
    for entry in vol.list_entries():
        content_hash = None
        if entry.kind == "file":
            content_hash = package.hash_blob(vol.read_file(entry.path))
        state[entry.path.upper()] = (entry.path, entry.kind, entry.size,
                                     entry.meta, content_hash)
    return state


def _probe_single_fault(physical_path, pkg):
    """Flip one byte owned exclusively by one file artifact; expect one failure.

    The poke lands inside a fully-covered content sector, so no block_extent
    shares the byte and no directory/FAT structure is touched.
    """
    victim = next((a for a in pkg.artifacts
                   if a.kind in ("file_add", "file_modify")
                   and a.size and a.size >= 1024), None)
    if victim is None:
        return None
    img = imgfs.open_image(physical_path, "rw")
    _file_off, img_off, length = max(victim.extents, key=lambda e: e[2])
    poke = img_off + min(600, length - 1)
    img.write_at(poke, bytes([img.read_at(poke, 1)[0] ^ 0xFF]))
    report = inject.verify_injection(img, pkg, mode="physical")
    img.close()
    return {c.artifact_id for c in report.failed} == {victim.artifact_id}


@pytest.fixture(scope="session")
def pipeline(acc_base, tmp_path_factory) -> PipelineResults:
    """Run all randomized pairs, keeping results but never more than one
    pair's images on disk (this environment cannot hold sparse files)."""
    work = tmp_path_factory.mktemp("pipeline")
    results = PipelineResults()
    base = imgfs.open_image(acc_base, "ro")
    t0 = time.monotonic()
    for i in range(PAIRS):
        rng = random.Random(1000 + i)
        mod_path = str(work / "mod.img")
        imgfs.sparse_copy(acc_base, mod_path)
        mod = imgfs.open_image(mod_path, "rw")
        vol = imgfs.mount_volume(mod, imgfs.parse_partitions(mod)[0])
        apply_random_script(vol, rng, rng.randrange(5, 51))
        mod.flush()
        report = diffing.diff_images(base, mod)
        pkg = package.build_package(report, labels={f"pair-{i}"})
        mod_hash = mod.content_hash
        mod_state = _tracked_state(vol)
        mod.close()

        physical_path = str(work / "phys.img")
        imgfs.sparse_copy(acc_base, physical_path)
        target = imgfs.open_image(physical_path, "rw")
        outcome = inject.inject_physical(target, pkg)
        verify_phys = inject.verify_injection(target, pkg, mode="physical")
        target.close()
        fault = None
        if results.fault_probes < 8:
            fault = _probe_single_fault(physical_path, pkg)
        os.unlink(physical_path)

        logical_path = str(work / "logi.img")
        imgfs.sparse_copy(acc_base, logical_path)
        ltarget = imgfs.open_image(logical_path, "rw")
        inject.inject_logical(ltarget, pkg)
        lvol = imgfs.mount_volume(ltarget, imgfs.parse_partitions(ltarget)[0])
        logical_state = _tracked_state(lvol)
        verify_logi = inject.verify_injection(ltarget, pkg, mode="logical")
        ltarget.close()
        os.unlink(logical_path)
        os.unlink(mod_path)

        results.results.append(PairResult(
            physical_exact=(outcome.output_image_hash == mod_hash),
            logical_equivalent=(logical_state == mod_state),
            verify_physical_passed=verify_phys.all_passed,
            verify_logical_passed=verify_logi.all_passed,
            check_count=len(verify_phys.checks),
            fault_localized=fault,
        ))
    results.seconds = time.monotonic() - t0
    base.close()
    return results


def test_criterion_1_physical_round_trip(pipeline):
    with criterion(1, "physical round trip"):
        assert len(pipeline.results) >= PAIRS
        for i, pair in enumerate(pipeline.results):
            assert pair.physical_exact, f"pair {i} diverged"
        print(f"  {len(pipeline.results)} pairs, full pipeline in "
              f"{pipeline.seconds:.1f}s", end=" ")


def test_criterion_2_logical_equivalence(pipeline):
    with criterion(2, "logical equivalence"):
        for i, pair in enumerate(pipeline.results):
            assert pair.logical_equivalent, f"pair {i} differs"


def test_criterion_3_package_size_claim(acc_base, tmp_path):
    with criterion(3, "package size vs base image"):
        rng = random.Random(777)
        mod_path = str(tmp_path / "sized.img")
        imgfs.sparse_copy(acc_base, mod_path)
        mod = imgfs.open_image(mod_path, "rw")
        vol = imgfs.mount_volume(mod, imgfs.parse_partitions(mod)[0])
        budget = 1024 * 1024  # one MiB of incompressible user data
        written = 0
        n = 0
        while written < budget - 40000:
            size = min(rng.randrange(1000, 40000), budget - written)
            vol.write_file(f"/payload/file{n:03d}.bin", rng.randbytes(size),
                           meta(mtime=_random_mtime(rng)))
            written += size
            n += 1
        mod.flush()
        base = imgfs.open_image(acc_base, "ro")
        pkg = package.build_package(diffing.diff_images(base, mod))
        out = str(tmp_path / "sized.evpkg")
        package.write_package(pkg, out)
        container_size = os.path.getsize(out)
        ratio = container_size / ACC_BYTES
        mod.close()
        base.close()
        os.unlink(mod_path)
        assert container_size <= 2 * 1024 * 1024, f"{container_size} bytes"
        assert ratio < 0.01, f"ratio {ratio:.5f}"
        print(f"  {written} bytes touched -> {container_size} byte package "
              f"(ratio {ratio:.5f})", end=" ")


def test_criterion_4_composition_fold_equivalence(base_template, tmp_path):
    with criterion(4, "composition fold equivalence"):
        base = imgfs.open_image(base_template, "ro")
        for i in range(COMPOSE_PAIRS):
            rng = random.Random(5000 + i)
            pkgs = []
            for j in (0, 1):
                mod_path = str(tmp_path / f"cmp{i}_{j}.img")
                imgfs.sparse_copy(base_template, mod_path)
                mod = imgfs.open_image(mod_path, "rw")
                vol = imgfs.mount_volume(mod, imgfs.parse_partitions(mod)[0])
                apply_random_script(vol, rng, rng.randrange(3, 12))
                mod.flush()
                pkgs.append(package.build_package(diffing.diff_images(base, mod)))
                mod.close()
                os.unlink(mod_path)

            seq_path = str(tmp_path / f"seq{i}.img")
            imgfs.sparse_copy(base_template, seq_path)
            seq = imgfs.open_image(seq_path, "rw")
            inject.inject_physical(seq, pkgs[0])
            inject.inject_physical(seq, pkgs[1], enforce_base=False)
            merged = compose(pkgs, allow_kind_conflicts=True)
            comp_path = str(tmp_path / f"comp{i}.img")
            imgfs.sparse_copy(base_template, comp_path)
            comp = imgfs.open_image(comp_path, "rw")
            inject.inject_physical(comp, merged)
            assert seq.content_hash == comp.content_hash, f"pair {i} diverged"
            seq.close()
            comp.close()
            os.unlink(seq_path)
            os.unlink(comp_path)
        base.close()


def test_criterion_5_point_in_time_chain(base_template, tmp_path):
    with criterion(5, "point-in-time reconstruction"):
        snapshots = [base_template]
        rng = random.Random(31337)
        for k in range(1, 6):
            prev, cur = snapshots[-1], str(tmp_path / f"snap{k}.img")
            imgfs.sparse_copy(prev, cur)
            img = imgfs.open_image(cur, "rw")
            vol = imgfs.mount_volume(img, imgfs.parse_partitions(img)[0])
            apply_random_script(vol, rng, rng.randrange(3, 10))
            img.close()
            snapshots.append(cur)
        images = [imgfs.open_image(s, "ro") for s in snapshots]
        chain = build_chain(images)
        assert len(chain.packages) == 5
        for k in range(len(snapshots)):
            out = reconstruct(images[0], chain, k, str(tmp_path / f"rec{k}.img"))
            assert out.content_hash == images[k].content_hash, f"prefix {k}"
            out.close()
            os.unlink(str(tmp_path / f"rec{k}.img"))
        for img in images:
            img.close()


def _retarget_fixture_package():
    log = b"\n".join(
        f"2017-06-{d:02d}T{h:02d}:30:00 event {d}-{h}".encode()
        for d in range(1, 11) for h in (0, 6, 12, 18)) + b"\n"
    artifacts, blobs = [], {}
    log_ref = package.hash_blob(log)
    blobs[log_ref] = log
    artifacts.append(ArtifactRecord(
        artifact_id=make_artifact_id("file_add", "/logs/app.log", log_ref),
        kind="file_add", path="/logs/app.log", volume=0,
        meta=FileMeta(mtime=datetime(2017, 6, 10, 12, 0, 0),
                      ctime=datetime(2017, 6, 1, 8, 0, 0, 500000),
                      atime=datetime(2017, 6, 10)),
        content_ref=log_ref, size=len(log), extents=[(0, 1 << 20, len(log))],
        handler=handlers.TEXT_LOG_ISO8601))
    payload = b"opaque-black-box-bytes"
    ref = package.hash_blob(payload)
    blobs[ref] = payload
    artifacts.append(ArtifactRecord(
        artifact_id=make_artifact_id("file_add", "/blob.bin", ref),
        kind="file_add", path="/blob.bin", volume=0,
        meta=FileMeta(mtime=datetime(2017, 6, 5, 6, 4, 2)),
        content_ref=ref, size=len(payload), extents=[(0, 2 << 20, len(payload))]))
    artifacts.append(ArtifactRecord(
        artifact_id=make_artifact_id("meta_only", "/touched.txt", None),
        kind="meta_only", path="/touched.txt", volume=0,
        meta=FileMeta(mtime=datetime(2017, 6, 7, 7, 7, 6))))
    return package.EvidencePackage(
        package_id="retarget-fixture", base_image_hash="00" * 32,
        created_at=datetime(2024, 1, 1), artifacts=artifacts, blobs=blobs)


def test_criterion_6_retarget_involution():
    with criterion(6, "retarget involution"):
        pkg = _retarget_fixture_package()
        original_meta = [a.meta for a in pkg.artifacts]
        original_refs = [a.content_ref for a in pkg.artifacts]
        rng = random.Random(99)
        # stay inside the FAT range: fixture stamps live in 2017
        span = int((datetime(2107, 1, 1) - datetime(2018, 1, 1)).total_seconds())
        low = -int((datetime(2017, 1, 1) - datetime(1980, 2, 1)).total_seconds())
        for _ in range(RETARGET_DELTAS):
            delta = rng.randrange(low, span)
            fwd = retarget_time(pkg, delta)
            back = retarget_time(fwd, -delta)
            for artifact, want_meta, want_ref in zip(back.artifacts, original_meta,
                                                     original_refs):
                assert artifact.meta == want_meta, f"delta {delta}"
                assert artifact.content_ref == want_ref, f"delta {delta}"
            assert back.blobs == pkg.blobs


def test_criterion_7_filesystem_oracle(tmp_path):
    with criterion(7, "bidirectional filesystem oracle"):
        # no mainstream FAT32 driver exists in this environment (no kernel
        # vfat, no userspace FAT package on the mirror); the independent
        # reference driver in fatref.py fills that role
        rng = random.Random(4242)

        # direction A: package-formatted and -written, reference-read
        ours_path = str(tmp_path / "ours.img")
        img = imgfs.create_image(ours_path, ACC_BYTES)
        imgfs.write_mbr(img, [ACC_PART])
        vol = imgfs.format_fixture(img, ACC_PART, cluster_size=ACC_CLUSTER,
                                   label="ORACLE")
        written = {}
        for _ in range(40):
            path = f"/{_random_name(rng)}"
            content = rng.randbytes(rng.randrange(0, 8000))
            m = FileMeta(mtime=_random_mtime(rng), attrs=FileAttrs(0x20))
            try:
                vol.write_file(path, content, m)
            except imgfs.InvalidPath:
                continue
            written[path.upper()] = (path, content, m)
        img.flush()
        with open(ours_path, "rb") as fh:
            buf = fh.read()
        ref_view = fatref.list_tree(buf, ACC_PART.byte_offset)
        ours_view = {e.path: e for e in vol.list_entries()}
        assert set(ref_view) == set(ours_view)
        for path, info in ref_view.items():
            entry = ours_view[path]
            assert info["is_dir"] == (entry.kind == "dir")
            if not info["is_dir"]:
                assert info["content"] == vol.read_file(path), path
                assert info["mtime"] == entry.meta.mtime, path
        img.close()

        # direction B: reference-formatted and -written, package-read
        theirs_path = str(tmp_path / "theirs.img")
        img0 = imgfs.create_image(theirs_path, ACC_BYTES)
        imgfs.write_mbr(img0, [ACC_PART])
        img0.close()
        with open(theirs_path, "rb") as fh:
            buf = bytearray(fh.read())
        fatref.format_volume(buf, ACC_PART.byte_offset, ACC_PART.byte_length,
                             cluster_size=ACC_CLUSTER, label="REFORA")
        writer = fatref.RefWriter(buf, ACC_PART.byte_offset)
        ref_written = {}
        writer.mkdir("/holding area", when=datetime(2019, 1, 1, 1, 1, 0))
        for n in range(40):
            name = _random_name(rng)
            path = f"/holding area/{name}" if n % 3 else f"/{name}"
            if path.upper() in ref_written or path.rstrip() != path:
                continue
            content = rng.randbytes(rng.randrange(0, 8000))
            when = _random_mtime(rng)
            writer.write(path, content, when=when)
            ref_written[path.upper()] = (path, content, when)
        with open(theirs_path, "wb") as fh:
            fh.write(bytes(buf))
        img = imgfs.open_image(theirs_path, "ro")
        vol = imgfs.mount_volume(img, imgfs.parse_partitions(img)[0])
        entries = {e.path.upper(): e for e in vol.list_entries() if e.kind == "file"}
        assert set(entries) == set(ref_written)
        for key, (path, content, when) in ref_written.items():
            assert vol.read_file(path) == content, path
            assert entries[key].meta.mtime == when.replace(
                second=when.second - when.second % 2, microsecond=0), path
        img.close()
        del buf
        os.unlink(ours_path)
        os.unlink(theirs_path)


def test_criterion_8_container_fuzzing():
    with criterion(8, "container fuzz robustness"):
        rng = random.Random(2024)
        seed_pkg = _retarget_fixture_package()
        valid = package.write_package_bytes(seed_pkg)
        crashes = 0
        for i in range(FUZZ_CASES):
            kind = i % 4
            if kind == 0:
                data = rng.randbytes(rng.randrange(0, 400))
            elif kind == 1:
                data = b"EVIPKG01" + rng.randbytes(rng.randrange(0, 200))
            elif kind == 2:
                mutated = bytearray(valid)
                for _ in range(rng.randrange(1, 8)):
                    mutated[rng.randrange(len(mutated))] = rng.randrange(256)
                data = bytes(mutated)
            else:
                cut = rng.randrange(0, len(valid))
                data = valid[:cut]
            try:
                package.read_package_bytes(data)
            except package.PackageError:
                pass
            except BaseException:
                crashes += 1
                raise
        # hostile declared lengths must fail fast without allocation
        import struct
        hostile = bytearray(valid)
        struct.pack_into("<Q", hostile, 10, 1 << 62)
        with pytest.raises(package.PackageError):
            package.read_package_bytes(bytes(hostile))
        assert crashes == 0
        print(f"  {FUZZ_CASES} inputs, zero crashes", end=" ")


def test_criterion_9_registry_dedup_and_delta(tmp_path):
    with criterion(9, "registry dedup and delta transfer"):
        rng = random.Random(11)
        shared = {f"/shared/{i}.bin": rng.randbytes(40_000) for i in range(5)}
        only1 = {f"/one/{i}.bin": rng.randbytes(40_000) for i in range(5)}
        only2 = {f"/two/{i}.bin": rng.randbytes(40_000) for i in range(5)}

        def mk(files):
            artifacts, blobs = [], {}
            for path, content in sorted(files.items()):
                ref = package.hash_blob(content)
                blobs[ref] = content
                artifacts.append(ArtifactRecord(
                    artifact_id=make_artifact_id("file_add", path, ref),
                    kind="file_add", path=path, volume=0,
                    meta=FileMeta(mtime=datetime(2017, 1, 26)), content_ref=ref,
                    size=len(content), extents=[(0, 1 << 20, len(content))]))
            report = diffing.DiffReport(
                artifacts=artifacts, base_image_hash="00" * 32,
                modified_image_hash="11" * 32,
                geometry=diffing.Geometry(ACC_BYTES, "22" * 32), blobs=blobs)
            return package.build_package(report)

        p1 = mk({**shared, **only1})
        p2 = mk({**shared, **only2})  # 50% of blobs shared with p1
        c1 = package.write_package_bytes(p1)
        c2 = package.write_package_bytes(p2)

        server, url = start_background(str(tmp_path / "root"))
        try:
            client = RegistryClient(url, cache_dir=str(tmp_path / "cache"))
            client.publish(c1)
            receipt2 = client.publish(c2)
            assert receipt2["blobs_deduplicated"] == 5
            # stored bytes equal the union of unique compressed blobs
            store = RegistryStore(str(tmp_path / "root"))
            unique = {}
            for pkg in (p1, p2):
                for ref, blob in pkg.blobs.items():
                    unique[ref] = package._compress(blob)
            assert store.stats()["blobs"] == len(unique)
            assert store.stats()["blob_bytes_compressed"] == \
                sum(len(c) for c in unique.values())
            # byte-identical fetch round trip
            assert client.fetch(p1.package_id).data == c1
            # delta fetch: everything already cached from publish
            result = client.fetch(p2.package_id)
            assert result.data == c2
            assert result.transferred_bytes < 0.05 * len(c2), \
                f"{result.transferred_bytes} of {len(c2)}"
            print(f"  delta transfer {result.transferred_bytes}/{len(c2)} bytes",
                  end=" ")
        finally:
            server.shutdown()


def test_criterion_10_verify_after_inject(pipeline):
    with criterion(10, "verification and single-fault localization"):
        checked = 0
        for i, pair in enumerate(pipeline.results):
            assert pair.verify_physical_passed, f"pair {i}: physical verify failed"
            assert pair.verify_logical_passed, f"pair {i}: logical verify failed"
            checked += pair.check_count
        probed = [r.fault_localized for r in pipeline.results
                  if r.fault_localized is not None]
        assert len(probed) >= 5
        assert all(probed), "a single-byte fault was not localized to its artifact"
        print(f"  {checked} artifact checks passed, {len(probed)} single-fault "
              "probes localized correctly", end=" ")
