from datetime import datetime

import pytest

from eviforge import imgfs

# 36 MiB image: 1 MiB gap before the partition, 512-byte clusters; the
# smallest comfortable geometry above the 65525-cluster FAT32 minimum.
BASE_BYTES = 36 * 1024 * 1024
BASE_PART = imgfs.PartitionEntry(index=0, start_lba=2048,
                                 sector_count=BASE_BYTES // 512 - 2048,
                                 type_code=0x0C, bootable=False)

T0 = datetime(2017, 1, 26, 12, 0, 0)


def meta(mtime=T0, ctime=None, atime=None, attrs=imgfs.FileAttrs(0)):
    return imgfs.FileMeta(mtime=mtime, ctime=ctime, atime=atime, attrs=attrs)


def make_base_image(path: str, populate=()) -> None:
    img = imgfs.create_image(path, BASE_BYTES)
    imgfs.write_mbr(img, [BASE_PART])
    vol = imgfs.format_fixture(img, BASE_PART, cluster_size=512, label="EVIBASE")
    for file_path, content in populate:
        vol.write_file(file_path, content, meta(ctime=T0, atime=T0))
    img.flush()
    img.close()


@pytest.fixture(scope="session")
def base_template(tmp_path_factory):
    """Pristine formatted base image; tests take sparse copies of it."""
    path = str(tmp_path_factory.mktemp("base") / "base.img")
    make_base_image(path, populate=[
        ("/readme.txt", b"welcome to the base system\n"),
        ("/apps/config.ini", b"[app]\nversion=1\n"),
        ("/apps/data.bin", bytes(range(256)) * 8),
    ])
    return path


@pytest.fixture
def base_copy(base_template, tmp_path):
    def copier(name="work.img"):
        dst = str(tmp_path / name)
        imgfs.sparse_copy(base_template, dst)
        return dst
    return copier


@pytest.fixture
def mounted(base_copy):
    """A writable volume on a fresh copy; closes the image afterwards."""
    opened = []

    def factory(name="work.img"):
        path = base_copy(name)
        img = imgfs.open_image(path, "rw")
        opened.append(img)
        return img, imgfs.mount_volume(img, imgfs.parse_partitions(img)[0])

    yield factory
    for img in opened:
        img.close()
