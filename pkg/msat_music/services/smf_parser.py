# msat_music/services/smf_parser.py
"""Standard MIDI File (format 0/1) reader.

Only what ingestion needs is decoded into events (notes, program changes,
tempo, time signature); every other message is skipped by length.
Note pairing happens per track, first-in-first-out per (channel, pitch).
"""

from __future__ import annotations

import logging
from collections import defaultdict, deque
from dataclasses import dataclass, field

logger = logging.getLogger(__name__)

KIND_NOTE_ON = "note_on"
KIND_NOTE_OFF = "note_off"
KIND_PROGRAM = "program_change"
KIND_TEMPO = "tempo"
KIND_TIME_SIGNATURE = "time_signature"

# data bytes following each channel-voice status nibble
_DATA_LENGTH = {0x80: 2, 0x90: 2, 0xA0: 2, 0xB0: 2, 0xC0: 1, 0xD0: 1, 0xE0: 2}


class MalformedHeader(ValueError):
    pass


class SmpteDivisionUnsupported(ValueError):
    pass


class TruncatedChunk(ValueError):
    pass


class VlqOverflow(ValueError):
    pass


class MalformedEvent(ValueError):
    pass


@dataclass(frozen=True)
class MidiEvent:
    tick: int
    kind: str
    channel: int = -1
    data: tuple[int, ...] = ()


@dataclass(frozen=True)
class RawNote:
    channel: int
    pitch: int
    velocity: int
    on_tick: int
    off_tick: int


@dataclass
class RawTrack:
    events: list[MidiEvent] = field(default_factory=list)
    notes: list[RawNote] = field(default_factory=list)
    unmatched_note_ons: int = 0


@dataclass
class RawMidi:
    format: int
    division: int
    tracks: list[RawTrack] = field(default_factory=list)

    @property
    def note_count(self) -> int:
        return sum(len(t.notes) for t in self.tracks)

    @property
    def unmatched_note_ons(self) -> int:
        return sum(t.unmatched_note_ons for t in self.tracks)


def read_vlq(data: bytes, offset: int, end: int) -> tuple[int, int]:
    """Decode a variable-length quantity; return (value, next_offset)."""
    value = 0
    for i in range(4):
        if offset + i >= end:
            raise TruncatedChunk("variable-length quantity runs past chunk end")
        byte = data[offset + i]
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, offset + i + 1
    raise VlqOverflow(f"variable-length quantity longer than 4 bytes at offset {offset}")


def _read_chunk_header(data: bytes, offset: int) -> tuple[bytes, int, int]:
    if offset + 8 > len(data):
        raise TruncatedChunk(f"chunk header truncated at offset {offset}")
    tag = bytes(data[offset:offset + 4])
    length = int.from_bytes(data[offset + 4:offset + 8], "big")
    body = offset + 8
    if body + length > len(data):
        raise TruncatedChunk(f"chunk {tag!r} declares {length} bytes, only {len(data) - body} left")
    return tag, body, body + length


def pair_notes(track: RawTrack) -> None:
    pending: dict[tuple[int, int], deque[MidiEvent]] = defaultdict(deque)
    for ev in track.events:
        if ev.kind == KIND_NOTE_ON:
            pending[(ev.channel, ev.data[0])].append(ev)
        elif ev.kind == KIND_NOTE_OFF:
            queue = pending.get((ev.channel, ev.data[0]))
            if not queue:
                continue  # stray note-off
            on = queue.popleft()
            track.notes.append(
                RawNote(
                    channel=on.channel,
                    pitch=on.data[0],
                    velocity=on.data[1],
                    on_tick=on.tick,
                    off_tick=ev.tick,
                )
            )
    track.unmatched_note_ons = sum(len(q) for q in pending.values())
    track.notes.sort(key=lambda n: (n.on_tick, n.channel, n.pitch, n.off_tick))


def _parse_track(data: bytes, start: int, end: int) -> RawTrack:
    track = RawTrack()
    offset = start
    tick = 0
    running = None

    while offset < end:
        delta, offset = read_vlq(data, offset, end)
        tick += delta
        if offset >= end:
            raise TruncatedChunk("event status missing at end of track")
        status = data[offset]

        if status == 0xFF:
            if offset + 1 >= end:
                raise TruncatedChunk("meta event type missing")
            meta_type = data[offset + 1]
            length, offset = read_vlq(data, offset + 2, end)
            if offset + length > end:
                raise TruncatedChunk(f"meta event 0x{meta_type:02x} runs past chunk end")
            payload = data[offset:offset + length]
            offset += length
            running = None
            if meta_type == 0x51 and length == 3:
                track.events.append(MidiEvent(tick, KIND_TEMPO, data=(int.from_bytes(payload, "big"),)))
            elif meta_type == 0x58 and length >= 2:
                track.events.append(
                    MidiEvent(tick, KIND_TIME_SIGNATURE, data=(payload[0], 2 ** payload[1]))
                )
            elif meta_type == 0x2F:
                break
            continue

        if status in (0xF0, 0xF7):
            length, offset = read_vlq(data, offset + 1, end)
            if offset + length > end:
                raise TruncatedChunk("sysex event runs past chunk end")
            offset += length
            running = None
            continue

        if status & 0x80:
            if status >= 0xF0:
                raise MalformedEvent(f"unsupported system status 0x{status:02x} in track data")
            running = status
            offset += 1
        elif running is None:
            raise MalformedEvent(f"data byte 0x{status:02x} without running status")

        kind_nibble = running & 0xF0
        channel = running & 0x0F
        n = _DATA_LENGTH[kind_nibble]
        if offset + n > end:
            raise TruncatedChunk("channel message runs past chunk end")
        args = tuple(data[offset:offset + n])
        offset += n

        if kind_nibble == 0x90 and args[1] > 0:
            track.events.append(MidiEvent(tick, KIND_NOTE_ON, channel, args))
        elif kind_nibble == 0x80 or kind_nibble == 0x90:
            # velocity-0 note-on is a note-off
            track.events.append(MidiEvent(tick, KIND_NOTE_OFF, channel, args))
        elif kind_nibble == 0xC0:
            track.events.append(MidiEvent(tick, KIND_PROGRAM, channel, args))

    pair_notes(track)
    return track


def parse_smf(data: bytes) -> RawMidi:
    """Parse SMF bytes into a RawMidi with matched notes per track."""
    data = bytes(data)
    if len(data) < 8 or data[:4] != b"MThd":
        raise MalformedHeader("missing MThd header chunk")
    length = int.from_bytes(data[4:8], "big")
    if length < 6:
        raise MalformedHeader(f"header length {length} < 6")
    if 8 + length > len(data):
        raise TruncatedChunk("header chunk truncated")

    fmt = int.from_bytes(data[8:10], "big")
    division = int.from_bytes(data[12:14], "big")
    if fmt not in (0, 1):
        raise MalformedHeader(f"unsupported SMF format {fmt}")
    if division & 0x8000:
        raise SmpteDivisionUnsupported("SMPTE time division is not supported")
    if division == 0:
        raise MalformedHeader("division must be > 0")

    raw = RawMidi(format=fmt, division=division)
    offset = 8 + length
    while offset < len(data):
        tag, body, end = _read_chunk_header(data, offset)
        if tag == b"MTrk":
            raw.tracks.append(_parse_track(data, body, end))
        offset = end

    if raw.unmatched_note_ons:
        logger.warning("dropped %d unmatched note-on event(s)", raw.unmatched_note_ons)
    return raw
