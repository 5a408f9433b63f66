"""Content handlers for "reversed" artifacts.

Artifacts tagged with a handler have an understood internal format, so their
contents can be rewritten when a package is retargeted in time. Untagged
artifacts are opaque ("black box") and travel byte-identical.
"""

import re
from datetime import datetime, timedelta
from typing import Callable

Transform = Callable[[bytes, int], bytes]


class HandlerError(Exception):
    pass


class DuplicateHandlerTag(HandlerError):
    pass


class Unparseable(HandlerError):
    """The handler could not interpret the content; callers fall back to black box."""


_HANDLERS: dict[str, Transform] = {}


def register_handler(tag: str, transform: Transform) -> None:
    if tag in _HANDLERS:
        raise DuplicateHandlerTag(f"handler {tag!r} already registered")
    _HANDLERS[tag] = transform


def get_handler(tag: str):
    return _HANDLERS.get(tag)


def registered_tags() -> list[str]:
    return sorted(_HANDLERS)


_ISO_TS = re.compile(rb"(\d{4})-(\d{2})-(\d{2})([T ])(\d{2}):(\d{2}):(\d{2})")


def shift_iso8601_text(content: bytes, delta_seconds: int) -> bytes:
    """Shift every ISO-8601 timestamp in UTF-8 text by a signed delta.

    The rewrite is width-preserving and therefore an exact involution:
    shifting by -delta restores the original bytes.
    """
    try:
        content.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise Unparseable(f"content is not UTF-8 text: {exc}") from exc
    delta = timedelta(seconds=delta_seconds)

    def shift(match: re.Match) -> bytes:
        y, mo, d, sep, h, mi, s = match.groups()
        try:
            dt = datetime(int(y), int(mo), int(d), int(h), int(mi), int(s)) + delta
        except (ValueError, OverflowError) as exc:
            raise Unparseable(f"timestamp out of range: {match.group(0)!r}") from exc
        return dt.strftime(f"%Y-%m-%d{sep.decode()}%H:%M:%S").encode("ascii")

    return _ISO_TS.sub(shift, content)


TEXT_LOG_ISO8601 = "text-log-iso8601"
register_handler(TEXT_LOG_ISO8601, shift_iso8601_text)
