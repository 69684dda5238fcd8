# msat_music/services/vocabulary.py
"""Code tables for the six-token event tuple.

Every non-type field reserves code 0 (NULL) for structural events; real
values are shifted by one. Durations go through a 64-entry table.
"""

from __future__ import annotations

import bisect

RESOLUTION = 12  # positions per beat
BEATS_PER_BAR = 4
MAX_BEATS = 256
MAX_DURATION = 384

NULL = 0

TYPE_SOS = 0
TYPE_INSTRUMENT = 1
TYPE_SON = 2
TYPE_NOTE = 3
TYPE_EOS = 4
TYPE_NAMES = ("SOS", "INSTRUMENT", "SON", "NOTE", "EOS")

FIELDS = ("type", "beat", "position", "pitch", "duration", "instrument")


def _build_duration_table() -> tuple[int, ...]:
    table = list(range(1, 37))
    table += list(range(39, 49, 3))
    table += list(range(54, 97, 6))
    table += list(range(108, 193, 12))
    table += list(range(216, 385, 24))
    return tuple(table)


DURATION_TABLE = _build_duration_table()
assert len(DURATION_TABLE) == 64 and DURATION_TABLE[-1] == MAX_DURATION

FIELD_SIZES = (
    len(TYPE_NAMES),
    MAX_BEATS + 1,
    RESOLUTION + 1,
    128 + 1,
    len(DURATION_TABLE) + 1,
    128 + 1,
)


def snap_duration(duration: int) -> int:
    """Nearest table entry; ties go to the shorter one."""
    d = max(1, min(MAX_DURATION, int(duration)))
    i = bisect.bisect_left(DURATION_TABLE, d)
    if i < len(DURATION_TABLE) and DURATION_TABLE[i] == d:
        return d
    lo = DURATION_TABLE[i - 1]
    hi = DURATION_TABLE[i]
    return lo if d - lo <= hi - d else hi


def duration_code(duration: int) -> int:
    i = bisect.bisect_left(DURATION_TABLE, snap_duration(duration))
    return i + 1


def duration_value(code: int) -> int:
    return DURATION_TABLE[code - 1]


def beat_code(beat: int) -> int:
    return beat + 1


def position_code(position: int) -> int:
    return position + 1


def pitch_code(pitch: int) -> int:
    return pitch + 1


def instrument_code(program: int) -> int:
    return program + 1
