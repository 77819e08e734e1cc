"""Per-admission day sequences and their CSV representation.

Day indices start at 0 on the admission day. A stay of ``total_los`` days is
observed on days ``0 .. total_los - 1`` and the label on day ``t`` is the
number of days still to come, ``total_los - 1 - t`` (0 on the discharge day).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .soi import PANEL_FIELDS, VitalsPanel, panel_from_strings, panel_to_strings

MIN_LOS = 2
MAX_LOS = 31
LOS_SCALE = 31.0


@dataclass(frozen=True)
class DayRecord:
    day: int
    panel: VitalsPanel
    remaining_los: float


@dataclass(frozen=True)
class PatientTimeline:
    patient_id: str
    days: tuple[DayRecord, ...]
    total_los: int

    def __post_init__(self):
        if not MIN_LOS <= self.total_los <= MAX_LOS:
            raise ValueError(f"{self.patient_id}: total LOS {self.total_los} outside [{MIN_LOS}, {MAX_LOS}]")
        if not self.days:
            raise ValueError(f"{self.patient_id}: empty timeline")
        prev = -1
        for rec in self.days:
            if rec.day <= prev:
                raise ValueError(f"{self.patient_id}: days must be strictly increasing")
            if rec.day >= self.total_los:
                raise ValueError(f"{self.patient_id}: day {rec.day} beyond a {self.total_los}-day stay")
            if rec.remaining_los != self.total_los - 1 - rec.day:
                raise ValueError(
                    f"{self.patient_id}: day {rec.day} remaining LOS {rec.remaining_los} "
                    f"!= {self.total_los - 1 - rec.day}"
                )
            prev = rec.day
        if self.days[0].day != 0:
            raise ValueError(f"{self.patient_id}: timeline must start on day 0")

    @property
    def day_indices(self) -> list[int]:
        return [r.day for r in self.days]

    @property
    def labels(self) -> list[float]:
        return [r.remaining_los for r in self.days]

    def prefix(self, through_day: int) -> "PatientTimeline":
        kept = tuple(r for r in self.days if r.day <= through_day)
        return PatientTimeline(self.patient_id, kept, self.total_los)


TIMELINE_COLUMNS = ("patient_id", "day", "remaining_los") + PANEL_FIELDS


def write_timelines_csv(path: str | Path, timelines: Iterable[PatientTimeline]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TIMELINE_COLUMNS)
        for tl in timelines:
            for rec in tl.days:
                cells = panel_to_strings(rec.panel)
                writer.writerow(
                    [tl.patient_id, rec.day, _fmt_days(rec.remaining_los)] + [cells[c] for c in PANEL_FIELDS]
                )


def _fmt_days(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def read_timelines_csv(path: str | Path) -> list[PatientTimeline]:
    rows: dict[str, list[DayRecord]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"patient_id", "day", "remaining_los"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing column(s) {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                rec = DayRecord(int(row["day"]), panel_from_strings(row), float(row["remaining_los"]))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            rows.setdefault(row["patient_id"], []).append(rec)
    out = []
    for pid in sorted(rows):
        days = tuple(sorted(rows[pid], key=lambda r: r.day))
        total = int(round(days[0].remaining_los + days[0].day)) + 1
        out.append(PatientTimeline(pid, days, total))
    return out
