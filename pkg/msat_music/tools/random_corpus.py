#!/usr/bin/env python3
"""Write a directory of random 4/4 multi-track MIDI files for desk tests.

    python msat_music/tools/random_corpus.py OUT_DIR [COUNT] [SEED]
"""
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[2]))

import numpy as np

from msat_music.services.generation import write_smf
from msat_music.services.song_store import CanonicalSong, Note, Track, length_of
from msat_music.services.vocabulary import DURATION_TABLE, RESOLUTION

PROGRAMS = (0, 24, 33, 40, 48, 56, 73)


def random_song(rng: np.random.Generator, bars: int = 8) -> CanonicalSong:
    tracks = []
    for program in sorted(rng.choice(PROGRAMS, size=int(rng.integers(1, 4)), replace=False)):
        notes = {}
        for _ in range(int(rng.integers(4, 6 * bars))):
            onset = (int(rng.integers(0, bars * 4)), int(rng.choice([0, 3, 6, 9])), int(rng.integers(36, 90)))
            # one note per (beat, position, pitch)
            notes[onset] = Note(*onset, duration=int(rng.choice(DURATION_TABLE[:RESOLUTION * 2])))
        tracks.append(Track(program=int(program), notes=sorted(notes.values())))
    return CanonicalSong(tracks=tracks, length_beats=length_of(tracks))


def write_corpus(out_dir: Path | str, count: int, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    paths = []
    for i in range(count):
        p = out / f"song_{i:03d}.mid"
        write_smf(random_song(rng), p)
        paths.append(p)
    return paths


if __name__ == "__main__":
    if len(sys.argv) < 2:
        raise SystemExit(__doc__)
    n = int(sys.argv[2]) if len(sys.argv) > 2 else 50
    s = int(sys.argv[3]) if len(sys.argv) > 3 else 0
    for path in write_corpus(sys.argv[1], n, s):
        print(path)
