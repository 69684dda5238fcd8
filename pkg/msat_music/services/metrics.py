# msat_music/services/metrics.py
"""Objective metrics over CanonicalSongs.

Entropy, scale and groove are computed on the pooled song (all instruments).
Degenerate inputs return a defined value with a flag instead of raising.
"""

from __future__ import annotations

import csv
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Set

import numpy as np

from .song_store import CanonicalSong
from .vocabulary import BEATS_PER_BAR, RESOLUTION

logger = logging.getLogger(__name__)

FLAG_EMPTY = "empty"
FLAG_SINGLE_BAR = "single_bar"
FLAG_SINGLE_INSTRUMENT = "single_instrument"
FLAG_CONSTANT_SERIES = "constant_series"

MAJOR = (0, 2, 4, 5, 7, 9, 11)
NATURAL_MINOR = (0, 2, 3, 5, 7, 8, 10)
BAR_SLOTS = BEATS_PER_BAR * RESOLUTION

METRIC_NAMES = (
    "pitch_class_entropy",
    "scale_consistency",
    "groove_consistency",
    "empty_measure_rate",
    "inter_instrument_similarity",
    "instrument_consistency",
)
METRIC_HEADERS = ("PCE", "SC(%)", "GC(%)", "EMR(%)", "IIS", "IC")
GROUND_TRUTH = "ground-truth"
REPORT_VERSION = 1


class PairingMismatch(ValueError):
    pass


class MetricValue(NamedTuple):
    value: float
    flag: Optional[str] = None


# ---------- helpers ----------
def _entropy(counts: np.ndarray) -> float:
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-(p * np.log2(p)).sum()) + 0.0


def _pitch_class_counts(pitches) -> np.ndarray:
    return np.bincount(np.asarray(list(pitches), dtype=np.int64) % 12, minlength=12)


def _bars_of(song: CanonicalSong) -> int:
    """Bars up to and including the last sounded one."""
    last = max((n.beat for t in song.tracks for n in t.notes), default=-1)
    return last // BEATS_PER_BAR + 1


# ---------- per-song metrics ----------
def pitch_class_entropy(song: CanonicalSong) -> MetricValue:
    pitches = [n.pitch for t in song.tracks for n in t.notes]
    if not pitches:
        return MetricValue(0.0, FLAG_EMPTY)
    return MetricValue(_entropy(_pitch_class_counts(pitches)))


def scale_consistency(song: CanonicalSong) -> MetricValue:
    pitches = [n.pitch for t in song.tracks for n in t.notes]
    if not pitches:
        return MetricValue(100.0, FLAG_EMPTY)
    counts = _pitch_class_counts(pitches)
    best = 0
    for root in range(12):
        for mode in (MAJOR, NATURAL_MINOR):
            best = max(best, int(sum(counts[(root + step) % 12] for step in mode)))
    return MetricValue(100.0 * best / len(pitches))


def groove_patterns(song: CanonicalSong) -> np.ndarray:
    """[bars, 48] onset grid over all instruments."""
    grid = np.zeros((_bars_of(song), BAR_SLOTS), dtype=bool)
    for t in song.tracks:
        for n in t.notes:
            bar, beat = divmod(n.beat, BEATS_PER_BAR)
            grid[bar, beat * RESOLUTION + n.position] = True
    return grid


def groove_consistency(song: CanonicalSong) -> MetricValue:
    grid = groove_patterns(song)
    if len(grid) == 0:
        return MetricValue(100.0, FLAG_EMPTY)
    if len(grid) < 2:
        return MetricValue(100.0, FLAG_SINGLE_BAR)
    distances = (grid[1:] != grid[:-1]).sum(axis=1) / BAR_SLOTS
    return MetricValue(float((1.0 - distances.mean()) * 100.0))


def empty_measure_rate(song: CanonicalSong) -> MetricValue:
    bars = _bars_of(song)
    if bars == 0:
        return MetricValue(100.0, FLAG_EMPTY)
    rates = []
    for t in song.tracks:
        sounded = {n.beat // BEATS_PER_BAR for n in t.notes}
        rates.append((bars - len(sounded)) / bars)
    return MetricValue(float(np.mean(rates)) * 100.0)


def inter_instrument_similarity(song: CanonicalSong) -> MetricValue:
    tracks = [t for t in song.tracks if t.notes]
    if not tracks:
        return MetricValue(0.0, FLAG_EMPTY)
    if len(tracks) == 1:
        return MetricValue(0.0, FLAG_SINGLE_INSTRUMENT)
    entropies = [_entropy(_pitch_class_counts(n.pitch for n in t.notes)) for t in tracks]
    return MetricValue(float(np.std(entropies)))


def instruments_per_bar(song: CanonicalSong, bars: Optional[int] = None) -> np.ndarray:
    bars = _bars_of(song) if bars is None else bars
    active: Dict[int, Set[int]] = defaultdict(set)
    for t in song.tracks:
        for n in t.notes:
            active[n.beat // BEATS_PER_BAR].add(t.program)
    return np.array([len(active.get(b, ())) for b in range(bars)], dtype=np.float64)


def instrument_consistency(generated: CanonicalSong, reference: CanonicalSong) -> MetricValue:
    bars = min(_bars_of(generated), _bars_of(reference))
    if bars == 0:
        both_empty = generated.note_count == 0 and reference.note_count == 0
        return MetricValue(1.0 if both_empty else 0.0, FLAG_EMPTY)
    a = instruments_per_bar(generated, bars)
    b = instruments_per_bar(reference, bars)
    if a.std() == 0 or b.std() == 0:
        return MetricValue(1.0 if np.array_equal(a, b) else 0.0, FLAG_CONSTANT_SERIES)
    r = float(np.corrcoef(a, b)[0, 1])
    return MetricValue(max(-1.0, min(1.0, r)))


def song_metrics(song: CanonicalSong, reference: Optional[CanonicalSong] = None) -> Dict[str, MetricValue]:
    return {
        "pitch_class_entropy": pitch_class_entropy(song),
        "scale_consistency": scale_consistency(song),
        "groove_consistency": groove_consistency(song),
        "empty_measure_rate": empty_measure_rate(song),
        "inter_instrument_similarity": inter_instrument_similarity(song),
        "instrument_consistency": instrument_consistency(song, reference if reference is not None else song),
    }


# ---------- corpus ----------
@dataclass
class MetricsRow:
    label: str
    means: Dict[str, float]
    songs: Dict[str, Dict[str, MetricValue]] = field(default_factory=dict)


@dataclass
class MetricsReport:
    rows: List[MetricsRow] = field(default_factory=list)

    def row(self, label: str) -> MetricsRow:
        return next(r for r in self.rows if r.label == label)

    def to_text(self) -> str:
        width = max(12, *(len(r.label) + 2 for r in self.rows))
        lines = [f"{'model':<{width}}" + "".join(f"{h:>10}" for h in METRIC_HEADERS)]
        for r in self.rows:
            lines.append(f"{r.label:<{width}}" + "".join(f"{r.means[m]:>10.3f}" for m in METRIC_NAMES))
        return "\n".join(lines) + "\n"

    def to_dict(self) -> Dict[str, object]:
        return {
            "version": REPORT_VERSION,
            "metrics": list(METRIC_NAMES),
            "rows": [{"label": r.label, **r.means} for r in self.rows],
        }


def _as_named(songs: Sequence[CanonicalSong] | Mapping[str, CanonicalSong]) -> Dict[str, CanonicalSong]:
    if isinstance(songs, Mapping):
        return dict(songs)
    return {f"{i:04d}": s for i, s in enumerate(songs)}


def _pair(generated: Dict[str, CanonicalSong], reference: Dict[str, CanonicalSong]) -> List[tuple]:
    if not generated:
        raise PairingMismatch("no generated songs to evaluate")
    if set(generated) != set(reference):
        missing = sorted(set(reference) ^ set(generated))
        raise PairingMismatch(f"generated and reference songs do not pair up 1:1 (unmatched: {', '.join(missing[:5])})")
    return [(name, generated[name], reference[name]) for name in sorted(generated)]


def evaluate_corpus(generated, reference, label: str = "generated") -> MetricsRow:
    pairs = _pair(_as_named(generated), _as_named(reference))
    songs = {name: song_metrics(g, r) for name, g, r in pairs}
    means = {m: float(np.mean([v[m].value for v in songs.values()])) for m in METRIC_NAMES}
    flagged = sum(1 for v in songs.values() for mv in v.values() if mv.flag)
    if flagged:
        logger.info("%s: %d flagged metric value(s) over %d song(s)", label, flagged, len(songs))
    return MetricsRow(label=label, means=means, songs=songs)


def evaluate_models(models: Mapping[str, object], reference) -> MetricsReport:
    """Ground-truth row first, then one row per model label."""
    report = MetricsReport()
    report.rows.append(evaluate_corpus(reference, reference, GROUND_TRUTH))
    for label, songs in models.items():
        report.rows.append(evaluate_corpus(songs, reference, label))
    return report


def write_report(report: MetricsReport, out_dir: Path | str) -> Dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"text": out / "report.txt", "json": out / "report.json", "details": out / "details.csv"}

    for key, body in (("text", report.to_text()), ("json", json.dumps(report.to_dict(), indent=2) + "\n")):
        tmp = paths[key].with_suffix(paths[key].suffix + ".tmp")
        tmp.write_text(body, encoding="utf-8")
        tmp.replace(paths[key])

    tmp = paths["details"].with_suffix(".csv.tmp")
    with tmp.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["label", "song", *METRIC_NAMES, "flags"])
        for r in report.rows:
            for name, values in r.songs.items():
                flags = ";".join(f"{m}:{values[m].flag}" for m in METRIC_NAMES if values[m].flag)
                w.writerow([r.label, name, *(f"{values[m].value:.6f}" for m in METRIC_NAMES), flags])
    tmp.replace(paths["details"])
    return paths
