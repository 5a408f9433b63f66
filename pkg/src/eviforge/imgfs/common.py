"""Shared filesystem-layer types: paths, timestamps, metadata, errors."""

import re
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from enum import IntFlag
from typing import Optional

SECTOR_SIZE = 512

# FAT timestamps are representable from 1980-01-01 to 2107-12-31 only.
FAT_EPOCH = datetime(1980, 1, 1)
FAT_MAX = datetime(2107, 12, 31, 23, 59, 59)


class ImgFsError(Exception):
    """Base class for image/filesystem layer failures."""


class NotFound(ImgFsError):
    pass


class MisalignedImage(ImgFsError):
    pass


class NoPartitionTable(ImgFsError):
    pass


class OverlappingPartitions(ImgFsError):
    pass


class PartitionOutOfBounds(ImgFsError):
    pass


class UnsupportedFilesystem(ImgFsError):
    pass


class CorruptBootSector(ImgFsError):
    pass


class CorruptDirectory(ImgFsError):
    """A directory subtree could not be walked; carries the offending path."""

    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = path
        self.reason = reason


class IsDirectory(ImgFsError):
    pass


class BrokenChain(ImgFsError):
    pass


class VolumeFull(ImgFsError):
    pass


class ReadOnlyVolume(ImgFsError):
    pass


class InvalidPath(ImgFsError):
    pass


class DirectoryNotEmpty(ImgFsError):
    pass


class PartitionTooSmall(ImgFsError):
    pass


class FileAttrs(IntFlag):
    """FAT directory-entry attribute bits (the subset carried as metadata)."""

    READ_ONLY = 0x01
    HIDDEN = 0x02
    SYSTEM = 0x04
    ARCHIVE = 0x20

    def to_names(self) -> list[str]:
        return sorted(name.lower() for name, bit in FileAttrs.__members__.items() if self & bit)

    @classmethod
    def from_names(cls, names) -> "FileAttrs":
        attrs = cls(0)
        for name in names:
            attrs |= cls[name.upper()]
        return attrs


@dataclass
class FileMeta:
    """Timestamps and attribute bits attached to a file or directory.

    Values are stored at full resolution here; the FAT layer truncates on
    write (2 s mtime, 10 ms ctime, date-only atime).
    """

    mtime: datetime
    ctime: Optional[datetime] = None
    atime: Optional[datetime] = None
    attrs: FileAttrs = FileAttrs(0)

    def shifted(self, delta_seconds: int) -> "FileMeta":
        d = timedelta(seconds=delta_seconds)
        return replace(
            self,
            mtime=self.mtime + d,
            ctime=self.ctime + d if self.ctime else None,
            atime=self.atime + d if self.atime else None,
        )


@dataclass
class FsEntry:
    """One file or directory as seen by a mounted volume."""

    path: str
    kind: str  # "file" | "dir"
    size: int
    meta: FileMeta
    first_cluster: Optional[int] = None

    @property
    def is_dir(self) -> bool:
        return self.kind == "dir"


@dataclass
class ExtentMap:
    """Absolute image byte runs backing one file, plus its slack tail."""

    extents: list[tuple[int, int]] = field(default_factory=list)
    slack_length: int = 0


_BAD_COMPONENT_CHARS = re.compile(r'[\x00-\x1f<>:"/\\|?*]')


def canon_path(path: str) -> str:
    """Normalize to an absolute, forward-slash, case-preserving path.

    Collapses repeated separators and strips trailing slashes (except the
    root itself). Rejects relative paths and empty components.
    """
    if not path.startswith("/"):
        raise InvalidPath(f"path must be absolute: {path!r}")
    parts = [p for p in path.split("/") if p]
    for p in parts:
        if p in (".", ".."):
            raise InvalidPath(f"dot components not allowed: {path!r}")
    return "/" + "/".join(parts)


def fold_path(path: str) -> str:
    """Case-insensitive comparison key, per FAT name-matching semantics."""
    return canon_path(path).upper()


def split_path(path: str) -> list[str]:
    return [p for p in canon_path(path).split("/") if p]


def validate_component(name: str) -> None:
    """Reject names FAT long-name entries cannot store."""
    if not name or len(name) > 255:
        raise InvalidPath(f"bad name length: {name!r}")
    if _BAD_COMPONENT_CHARS.search(name):
        raise InvalidPath(f"illegal character in name: {name!r}")
    if name.strip(" .") == "":
        raise InvalidPath(f"name is all dots/spaces: {name!r}")
    if name[-1] in " .":
        raise InvalidPath(f"trailing space/dot not allowed: {name!r}")


# --- FAT timestamp encoding ----------------------------------------------
# Date word: bits 15-9 year-1980, 8-5 month, 4-0 day.
# Time word: bits 15-11 hours, 10-5 minutes, 4-0 seconds/2.


def clamp_fat_range(dt: datetime) -> datetime:
    if dt < FAT_EPOCH:
        return FAT_EPOCH
    if dt > FAT_MAX:
        return FAT_MAX
    return dt


def encode_fat_date(dt: datetime) -> int:
    dt = clamp_fat_range(dt)
    return ((dt.year - 1980) << 9) | (dt.month << 5) | dt.day


def encode_fat_time(dt: datetime) -> int:
    return (dt.hour << 11) | (dt.minute << 5) | (dt.second // 2)


def decode_fat_datetime(date_word: int, time_word: int) -> Optional[datetime]:
    """Decode a date+time word pair; returns None for the all-zero encoding."""
    if date_word == 0:
        return None
    year = 1980 + ((date_word >> 9) & 0x7F)
    month = (date_word >> 5) & 0x0F
    day = date_word & 0x1F
    hour = (time_word >> 11) & 0x1F
    minute = (time_word >> 5) & 0x3F
    second = (time_word & 0x1F) * 2
    try:
        return datetime(year, month, day, hour, minute, second)
    except ValueError:
        return None


def truncate_mtime(dt: datetime) -> datetime:
    dt = clamp_fat_range(dt)
    return dt.replace(second=dt.second - dt.second % 2, microsecond=0)


def truncate_ctime(dt: datetime) -> datetime:
    dt = clamp_fat_range(dt)
    return dt.replace(microsecond=dt.microsecond - dt.microsecond % 10000)


def truncate_atime(dt: datetime) -> datetime:
    dt = clamp_fat_range(dt)
    return dt.replace(hour=0, minute=0, second=0, microsecond=0)


def encode_ctime(dt: datetime) -> tuple[int, int, int]:
    """Creation time maps to (tenths-of-10ms, time word, date word).

    The tenths byte carries 0..199 counts of 10 ms on top of the 2-second
    time word.
    """
    dt = clamp_fat_range(dt)
    tenths = (dt.second % 2) * 100 + dt.microsecond // 10000
    return tenths, encode_fat_time(dt), encode_fat_date(dt)


def decode_ctime(tenths: int, time_word: int, date_word: int) -> Optional[datetime]:
    base = decode_fat_datetime(date_word, time_word)
    if base is None:
        return None
    if tenths > 199:
        tenths = 0
    return base + timedelta(seconds=tenths // 100, microseconds=(tenths % 100) * 10000)


def format_ts(dt: Optional[datetime]) -> Optional[str]:
    """Manifest timestamp form: seconds, plus the shortest exact fraction.

    FAT-resolution values (ctime tenths) stay compact as centiseconds; any
    other precision is still preserved losslessly.
    """
    if dt is None:
        return None
    s = dt.strftime("%Y-%m-%dT%H:%M:%S")
    if dt.microsecond:
        if dt.microsecond % 10000 == 0:
            s += ".%02d" % (dt.microsecond // 10000)
        else:
            s += ".%06d" % dt.microsecond
    return s


def parse_ts(s: Optional[str]) -> Optional[datetime]:
    if s is None:
        return None
    if "." in s:
        base, frac = s.split(".", 1)
        dt = datetime.strptime(base, "%Y-%m-%dT%H:%M:%S")
        return dt + timedelta(microseconds=int(frac.ljust(6, "0")[:6]))
    return datetime.strptime(s, "%Y-%m-%dT%H:%M:%S")
