from datetime import datetime

import pytest

from eviforge import diffing, imgfs

from conftest import meta


def open_pair(base_copy):
    base_path, mod_path = base_copy("b.img"), base_copy("m.img")
    base = imgfs.open_image(base_path, "ro")
    mod = imgfs.open_image(mod_path, "rw")
    vol = imgfs.mount_volume(mod, imgfs.parse_partitions(mod)[0])
    return base, mod, vol


def brute_force_diff_sectors(base, mod):
    """Independent oracle: compare raw bytes sector by sector."""
    differing = []
    for sector in range(base.byte_length // 512):
        if base.read_at(sector * 512, 512) != mod.read_at(sector * 512, 512):
            differing.append(sector)
    return differing


def test_identical_images_diff_empty(base_copy):
    base, mod, _ = open_pair(base_copy)
    report = diffing.diff_images(base, mod)
    assert report.artifacts == []
    assert report.blobs == {}
    assert report.stats == {"counts": {}, "blob_bytes": 0}


def test_size_mismatch_raises(base_copy, tmp_path):
    base = imgfs.open_image(base_copy(), "ro")
    other = imgfs.create_image(str(tmp_path / "short.img"), 1024)
    with pytest.raises(diffing.GeometryMismatch):
        diffing.diff_images(base, other)


def test_partition_table_mismatch_raises(base_copy):
    base, mod, _ = open_pair(base_copy)
    raw = bytearray(mod.read_at(446, 64))
    raw[8] ^= 0x01  # nudge the start LBA
    mod.write_at(446, bytes(raw))
    with pytest.raises(diffing.GeometryMismatch):
        diffing.diff_images(base, mod)


def test_single_file_add_artifacts_and_residue_attribution(base_copy):
    base, mod, vol = open_pair(base_copy)
    content = b"the evidence payload" * 40
    vol.write_file("/evidence.txt", content, meta())
    mod.flush()

    report = diffing.diff_images(base, mod)
    adds = [a for a in report.artifacts if a.kind == "file_add"]
    blocks = [a for a in report.artifacts if a.kind == "block_extent"]
    assert [a.path for a in adds] == ["/evidence.txt"]
    assert {a.kind for a in report.artifacts} == {"file_add", "block_extent"}

    # oracle: brute-force sector diff minus the file's own full content sectors
    differing = set(brute_force_diff_sectors(base, mod))
    own = set()
    for _f, img_off, length in adds[0].extents:
        own.update(range(-(-img_off // 512), (img_off + length) // 512))
    expected_residue = differing - own
    emitted = set()
    for artifact in blocks:
        off, length = artifact.extent
        emitted.update(range(off // 512, (off + length) // 512))
    assert emitted == expected_residue
    # residue must cover FAT and directory sectors, never the file body
    assert not emitted & own


def test_one_byte_change_is_file_modify(base_copy):
    base, mod, vol = open_pair(base_copy)
    original = vol.read_file("/apps/data.bin")
    changed = b"X" + original[1:]
    vol.write_file("/apps/data.bin", changed, vol.get_entry("/apps/data.bin").meta)
    mod.flush()
    report = diffing.diff_images(base, mod)
    mods = [a for a in report.artifacts if a.kind == "file_modify"]
    assert [a.path for a in mods] == ["/apps/data.bin"]
    assert report.blobs[mods[0].content_ref] == changed


def test_touch_mtime_is_meta_only(base_copy):
    base, mod, vol = open_pair(base_copy)
    vol.set_metadata("/readme.txt", meta(mtime=datetime(2021, 3, 4, 5, 6, 8)))
    mod.flush()
    report = diffing.diff_images(base, mod)
    metas = [a for a in report.artifacts if a.kind == "meta_only"]
    assert [a.path for a in metas] == ["/readme.txt"]
    assert metas[0].meta.mtime == datetime(2021, 3, 4, 5, 6, 8)
    assert not any(a.kind in ("file_add", "file_modify") for a in report.artifacts)


def test_delete_file_then_directory(base_copy):
    base, mod, vol = open_pair(base_copy)
    vol.delete_entry("/apps/config.ini")
    vol.delete_entry("/apps/data.bin")
    vol.delete_entry("/apps")
    mod.flush()
    report = diffing.diff_images(base, mod)
    logical = [(a.kind, a.path) for a in report.artifacts if a.kind != "block_extent"]
    assert logical == [("file_delete", "/apps/config.ini"),
                       ("file_delete", "/apps/data.bin"),
                       ("dir_delete", "/apps")]
    # verify against the changed images with an independent lister
    base_vol = imgfs.mount_volume(base, imgfs.parse_partitions(base)[0])
    gone = {e.path for e in base_vol.list_entries()} - {e.path for e in vol.list_entries()}
    assert gone == {"/apps/config.ini", "/apps/data.bin", "/apps"}


def test_kind_flip_emits_delete_then_add(base_copy):
    base, mod, vol = open_pair(base_copy)
    vol.delete_entry("/readme.txt")
    vol.write_file("/readme.txt/inner.txt", b"now a dir", meta())
    mod.flush()
    report = diffing.diff_images(base, mod)
    logical = [(a.kind, a.path) for a in report.artifacts if a.kind != "block_extent"]
    assert ("file_delete", "/readme.txt") in logical
    assert ("dir_add", "/readme.txt") in logical
    assert ("file_add", "/readme.txt/inner.txt") in logical
    assert logical.index(("file_delete", "/readme.txt")) < logical.index(("dir_add", "/readme.txt"))


def test_diff_is_deterministic(base_copy):
    base, mod, vol = open_pair(base_copy)
    vol.write_file("/zed.txt", b"z", meta())
    vol.write_file("/alpha.txt", b"a", meta())
    vol.delete_entry("/readme.txt")
    mod.flush()
    r1 = diffing.diff_images(base, mod)
    r2 = diffing.diff_images(base, mod)
    assert [a.artifact_id for a in r1.artifacts] == [a.artifact_id for a in r2.artifacts]
    assert r1.blobs == r2.blobs


def test_residue_of_raw_write_into_unallocated_space(base_copy):
    base, mod, vol = open_pair(base_copy)
    offset, length = vol.unallocated_extents()[-1]
    payload = b"\xde\xad\xbe\xef" * 128  # one sector
    mod.write_at(offset, payload)
    mod.flush()
    report = diffing.diff_images(base, mod)
    assert [a.kind for a in report.artifacts] == ["block_extent"]
    artifact = report.artifacts[0]
    assert artifact.extent == (offset, 512)
    assert report.blobs[artifact.content_ref] == payload


def test_usage_session_always_touches_fs_metadata(base_copy):
    # any real session modifies the filesystem's own bookkeeping structures;
    # for FAT32 that is the FSINFO sector and the allocation tables, and the
    # diff must capture them as residue so reconstruction is exact
    base, mod, vol = open_pair(base_copy)
    vol.write_file("/session/downloads/tool.exe", b"MZ" + bytes(600), meta())
    vol.delete_entry("/apps/data.bin")
    vol.write_file("/readme.txt", b"browsed, installed, deleted", meta())
    mod.flush()
    report = diffing.diff_images(base, mod)
    covered = set()
    for artifact in report.artifacts:
        if artifact.kind == "block_extent":
            off, length = artifact.extent
            covered.update(range(off, off + length, 512))
    part_off = 2048 * 512
    fsinfo_offset = part_off + 1 * 512
    fat0_offset = part_off + 32 * 512
    fat1_offset = fat0_offset + vol._bp.fat_sectors * 512
    assert fsinfo_offset in covered, "FSINFO sector missing from residue"
    assert fat0_offset in covered, "first FAT copy missing from residue"
    assert fat1_offset in covered, "second FAT copy missing from residue"


def test_sector_residue_identical_images_empty(base_copy):
    base, mod, _ = open_pair(base_copy)
    blobs = {}
    assert diffing.sector_residue(base, mod, [], blobs) == []
    assert blobs == {}


def test_artifact_ids_stable_and_unique(base_copy):
    base, mod, vol = open_pair(base_copy)
    vol.write_file("/same-content-1.txt", b"dup", meta())
    vol.write_file("/same-content-2.txt", b"dup", meta())
    mod.flush()
    report = diffing.diff_images(base, mod)
    ids = [a.artifact_id for a in report.artifacts]
    assert len(ids) == len(set(ids))
    by_path = {a.path: a for a in report.artifacts if a.path}
    assert by_path["/same-content-1.txt"].content_ref == by_path["/same-content-2.txt"].content_ref
    assert by_path["/same-content-1.txt"].artifact_id != by_path["/same-content-2.txt"].artifact_id


def test_artifact_json_round_trip(base_copy):
    base, mod, vol = open_pair(base_copy)
    vol.write_file("/meta.bin", b"bytes", meta(ctime=datetime(2019, 1, 1, 1, 1, 1, 500000),
                                               atime=datetime(2019, 1, 2),
                                               attrs=imgfs.FileAttrs.HIDDEN | imgfs.FileAttrs.SYSTEM))
    mod.flush()
    report = diffing.diff_images(base, mod)
    for artifact in report.artifacts:
        again = diffing.ArtifactRecord.from_json(artifact.to_json())
        assert again == artifact
