# msat_music/services/song_store.py
"""CanonicalSong type and its JSON store.

Documents are versioned and integer-only; writes go through a tmp file and
an atomic replace.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional

from .vocabulary import MAX_BEATS, MAX_DURATION, RESOLUTION

SONG_FORMAT = "msat-song"
SONG_VERSION = 1
SPLIT_FILE = "split.json"
SONGS_DIR = "songs"


class SongFormatError(ValueError):
    pass


class Note(NamedTuple):
    beat: int
    position: int
    pitch: int
    duration: int


@dataclass
class Track:
    program: int
    notes: List[Note] = field(default_factory=list)


@dataclass
class CanonicalSong:
    tracks: List[Track] = field(default_factory=list)
    length_beats: int = 0
    resolution: int = RESOLUTION

    @property
    def programs(self) -> List[int]:
        return [t.program for t in self.tracks]

    @property
    def note_count(self) -> int:
        return sum(len(t.notes) for t in self.tracks)

    def track_for(self, program: int) -> Optional[Track]:
        for t in self.tracks:
            if t.program == program:
                return t
        return None


def length_of(tracks: List[Track]) -> int:
    last = -1
    for t in tracks:
        for n in t.notes:
            last = max(last, n.beat)
    return last + 1


def check_song(song: CanonicalSong) -> None:
    """Raise SongFormatError if a type invariant is broken."""
    if song.resolution != RESOLUTION:
        raise SongFormatError(f"resolution must be {RESOLUTION}")
    programs = song.programs
    if programs != sorted(set(programs)):
        raise SongFormatError("tracks must be sorted by program with no duplicates")
    for t in song.tracks:
        if not 0 <= t.program <= 127:
            raise SongFormatError(f"program {t.program} out of range")
        if t.notes != sorted(set(t.notes)):
            raise SongFormatError(f"notes of program {t.program} are not strictly sorted")
        keys = [(n.beat, n.position, n.pitch) for n in t.notes]
        if len(keys) != len(set(keys)):
            raise SongFormatError(f"duplicate onset in program {t.program}")
        for n in t.notes:
            if not (0 <= n.position < RESOLUTION and 0 <= n.beat < song.length_beats
                    and n.beat < MAX_BEATS and 0 <= n.pitch <= 127
                    and 1 <= n.duration <= MAX_DURATION):
                raise SongFormatError(f"note {tuple(n)} of program {t.program} out of range")


def song_to_dict(song: CanonicalSong, name: str = "") -> Dict[str, Any]:
    data: Dict[str, Any] = {
        "format": SONG_FORMAT,
        "version": SONG_VERSION,
        "resolution": song.resolution,
        "length_beats": song.length_beats,
        "tracks": [
            {"program": t.program, "notes": [list(n) for n in t.notes]}
            for t in song.tracks
        ],
    }
    if name:
        data["name"] = name
    return data


def song_from_dict(data: Dict[str, Any]) -> CanonicalSong:
    if data.get("format") != SONG_FORMAT:
        raise SongFormatError(f"not a {SONG_FORMAT} document")
    if int(data.get("version") or 0) != SONG_VERSION:
        raise SongFormatError(f"unsupported song version {data.get('version')}")
    tracks = [
        Track(
            program=int(t["program"]),
            notes=[Note(*(int(v) for v in n)) for n in t.get("notes") or []],
        )
        for t in data.get("tracks") or []
    ]
    song = CanonicalSong(
        tracks=tracks,
        length_beats=int(data.get("length_beats") or 0),
        resolution=int(data.get("resolution") or RESOLUTION),
    )
    check_song(song)
    return song


def _write_json(path: Path, data: Dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(data, ensure_ascii=False, indent=1), encoding="utf-8")
    tmp.replace(path)


def save_song(song: CanonicalSong, path: Path | str, name: str = "") -> None:
    _write_json(Path(path), song_to_dict(song, name=name))


def load_song(path: Path | str) -> CanonicalSong:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SongFormatError(f"{path}: {e}") from e
    return song_from_dict(data)


# ---------- corpus directory ----------
def save_corpus(corpus_dir: Path | str, songs: Dict[str, CanonicalSong]) -> List[Path]:
    songs_dir = Path(corpus_dir) / SONGS_DIR
    out: List[Path] = []
    for name in sorted(songs):
        p = songs_dir / f"{name}.json"
        save_song(songs[name], p, name=name)
        out.append(p)
    return out


def load_corpus(corpus_dir: Path | str) -> Dict[str, CanonicalSong]:
    songs_dir = Path(corpus_dir) / SONGS_DIR
    if not songs_dir.exists():
        return {}
    return {p.stem: load_song(p) for p in sorted(songs_dir.glob("*.json"))}


def save_split(corpus_dir: Path | str, split: Dict[str, List[str]]) -> None:
    data = {"version": 1, **{k: list(v) for k, v in split.items()}}
    _write_json(Path(corpus_dir) / SPLIT_FILE, data)


def load_split(corpus_dir: Path | str) -> Optional[Dict[str, List[str]]]:
    path = Path(corpus_dir) / SPLIT_FILE
    if not path.exists():
        return None
    data = json.loads(path.read_text(encoding="utf-8"))
    return {k: list(data.get(k) or []) for k in ("train", "valid", "test")}
