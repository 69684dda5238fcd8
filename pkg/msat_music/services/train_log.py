# msat_music/services/train_log.py
from __future__ import annotations

import re
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional, Sequence

# ---------- regex helpers ----------
FLOAT_RE = r"[-+]?(?:\d+\.?\d*(?:[eE][-+]?\d+)?|nan|inf)"

TS_PREFIX_RE = re.compile(r"^(?P<ts>\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}Z)\s+(?P<msg>.+)$")

# step=100 train_loss=2.5 valid_loss=2.7 fields=0.1,0.4,0.2,0.9,0.6,0.3 alpha=0.33,...
ENTRY_RE = re.compile(
    rf"^step=(?P<step>\d+)\s+train_loss=(?P<train>{FLOAT_RE})\s+valid_loss=(?P<valid>{FLOAT_RE})"
    rf"\s+fields=(?P<fields>{FLOAT_RE}(?:,{FLOAT_RE}){{5}})"
    rf"(?:\s+alpha=(?P<alpha>{FLOAT_RE}(?:,{FLOAT_RE}){{17}}))?\s*$"
)


@dataclass(frozen=True)
class LogEntry:
    step: int
    train_loss: float
    valid_loss: float
    field_losses: tuple
    alpha: Optional[tuple] = None  # 18 values, row-major [field][scale]
    time: str = ""


def _floats(s: str) -> tuple:
    return tuple(float(x) for x in s.split(","))


def format_entry(step: int, train_loss: float, valid_loss: float, field_losses: Sequence[float],
                 alpha: Optional[Sequence[float]] = None) -> str:
    line = (
        f"step={step} train_loss={train_loss:.6f} valid_loss={valid_loss:.6f} "
        f"fields={','.join(f'{x:.6f}' for x in field_losses)}"
    )
    if alpha is not None:
        line += f" alpha={','.join(f'{x:.6f}' for x in alpha)}"
    return line


def parse_line(line: str) -> Optional[LogEntry]:
    s = line.strip()
    ts = ""
    m = TS_PREFIX_RE.match(s)
    if m:
        ts, s = m.group("ts"), m.group("msg")
    m = ENTRY_RE.match(s)
    if not m:
        return None
    return LogEntry(
        step=int(m.group("step")),
        train_loss=float(m.group("train")),
        valid_loss=float(m.group("valid")),
        field_losses=_floats(m.group("fields")),
        alpha=_floats(m.group("alpha")) if m.group("alpha") else None,
        time=ts,
    )


class TrainLog:
    """Append-only training log; a missing path makes every call a no-op."""

    def __init__(self, path: Path | str | None) -> None:
        self.path = Path(path) if path else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")

    def append(self, line: str) -> None:
        if self.path is None:
            return
        ts = datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
        with self.path.open("a", encoding="utf-8") as f:
            f.write(f"{ts} {line}\n")


def read_train_log(path: Path | str) -> List[LogEntry]:
    path = Path(path)
    if not path.exists():
        return []
    out: List[LogEntry] = []
    for line in path.read_text(encoding="utf-8").splitlines():
        entry = parse_line(line)
        if entry is not None:
            out.append(entry)
    return out
