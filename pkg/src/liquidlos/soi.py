"""Severity-of-illness scores (APACHE-II, SAPS-II, SOFA, OASIS) from range tables.

Every score is a sum of points looked up per physiologic variable in a data
file; the code knows nothing about individual scores beyond their names.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

SCORES = ("apache2", "saps2", "sofa", "oasis")


class ScoringTableError(ValueError):
    pass


@dataclass(frozen=True)
class VitalsPanel:
    """One patient-day of (pre-aggregated) vitals and labs. ``None`` = missing."""

    age: float | None = None
    heart_rate: float | None = None
    mean_arterial_pressure: float | None = None
    systolic_bp: float | None = None
    temperature: float | None = None
    respiratory_rate: float | None = None
    pao2_fio2: float | None = None
    gcs: int | None = None
    creatinine: float | None = None
    bilirubin: float | None = None
    platelets: float | None = None
    white_blood_count: float | None = None
    sodium: float | None = None
    potassium: float | None = None
    urine_output_24h: float | None = None
    mechanical_ventilation: bool | None = None
    norepinephrine: float | None = None

    def __post_init__(self):
        if self.gcs is not None and (int(self.gcs) != self.gcs or not 3 <= self.gcs <= 15):
            raise ValueError(f"gcs must be an integer in [3, 15], got {self.gcs}")

    def get(self, name: str) -> float | None:
        value = getattr(self, name)
        return None if value is None else float(value)

    def replace(self, **changes) -> "VitalsPanel":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return VitalsPanel(**values)


PANEL_FIELDS = tuple(f.name for f in fields(VitalsPanel))


def panel_from_strings(row: Mapping[str, str]) -> VitalsPanel:
    """Build a panel from CSV cells; empty cells are missing values."""
    kwargs = {}
    for name in PANEL_FIELDS:
        cell = row.get(name, "")
        if cell is None or cell == "":
            continue
        if name == "gcs":
            kwargs[name] = int(float(cell))
        elif name == "mechanical_ventilation":
            kwargs[name] = cell.strip().lower() in ("1", "true", "yes")
        else:
            kwargs[name] = float(cell)
    return VitalsPanel(**kwargs)


def panel_to_strings(panel: VitalsPanel) -> dict[str, str]:
    out = {}
    for name in PANEL_FIELDS:
        value = getattr(panel, name)
        if value is None:
            out[name] = ""
        elif name == "mechanical_ventilation":
            out[name] = "1" if value else "0"
        elif name == "gcs":
            out[name] = str(int(value))
        else:
            out[name] = repr(float(value))
    return out


@dataclass(frozen=True)
class Band:
    lower: float
    upper: float
    points: int

    def contains(self, value: float) -> bool:
        return self.lower <= value < self.upper


@dataclass(frozen=True)
class VariableRule:
    name: str
    bands: tuple[Band, ...]
    missing_points: int
    group: str | None

    def points(self, value: float | None) -> int:
        if value is None:
            return self.missing_points
        for band in self.bands:
            if band.contains(value):
                return band.points
        raise ValueError(f"{self.name}={value} falls outside every band")

    @property
    def max_points(self) -> int:
        return max(max(b.points for b in self.bands), self.missing_points)

    @property
    def min_points(self) -> int:
        return min(min(b.points for b in self.bands), self.missing_points)


@dataclass(frozen=True)
class ScoreTable:
    name: str
    rules: tuple[VariableRule, ...]
    offset: int = 0

    def _combine(self, per_rule: Iterable[tuple[VariableRule, int]]) -> int:
        total = self.offset
        grouped: dict[str, int] = {}
        for rule, pts in per_rule:
            if rule.group is None:
                total += pts
            else:
                grouped[rule.group] = max(grouped.get(rule.group, pts), pts)
        return total + sum(grouped.values())

    def score(self, panel: VitalsPanel) -> int:
        return self._combine((r, r.points(panel.get(r.name))) for r in self.rules)

    @property
    def max_attainable(self) -> int:
        return self._combine((r, r.max_points) for r in self.rules)

    @property
    def min_attainable(self) -> int:
        return self._combine((r, r.min_points) for r in self.rules)


@dataclass(frozen=True)
class ScoringTables:
    bounds: Mapping[str, tuple[float, float]]
    tables: Mapping[str, ScoreTable]

    def __getitem__(self, score: str) -> ScoreTable:
        return self.tables[score]

    def score_range(self, score: str) -> tuple[int, int]:
        t = self.tables[score]
        return t.min_attainable, t.max_attainable

    def check_panel(self, panel: VitalsPanel) -> None:
        for name, (lo, hi) in self.bounds.items():
            value = panel.get(name)
            if value is None:
                continue
            if math.isnan(value) or not lo <= value <= hi:
                raise ValueError(f"{name}={value} outside plausible range [{lo}, {hi}]")


def _number(text: str) -> float:
    text = text.strip().lower()
    if text in ("inf", "+inf"):
        return math.inf
    if text == "-inf":
        return -math.inf
    return float(text)


def _validate_rule(score: str, rule: VariableRule, bounds: tuple[float, float]) -> None:
    bands = sorted(rule.bands, key=lambda b: b.lower)
    where = f"[{score}] {rule.name}"
    for b in bands:
        if b.points < 0:
            raise ScoringTableError(f"{where}: negative points {b.points}")
        if not b.lower < b.upper:
            raise ScoringTableError(f"{where}: empty range [{b.lower}, {b.upper})")
    if rule.missing_points < 0:
        raise ScoringTableError(f"{where}: negative missing-value points")
    for prev, nxt in zip(bands, bands[1:]):
        if nxt.lower < prev.upper:
            raise ScoringTableError(
                f"{where}: overlapping ranges [{prev.lower}, {prev.upper}) and "
                f"[{nxt.lower}, {nxt.upper})"
            )
        if nxt.lower > prev.upper:
            raise ScoringTableError(f"{where}: gap between {prev.upper} and {nxt.lower}")
    lo, hi = bounds
    if bands[0].lower > lo or bands[-1].upper <= hi:
        raise ScoringTableError(
            f"{where}: ranges [{bands[0].lower}, {bands[-1].upper}) do not cover "
            f"plausible domain [{lo}, {hi}]"
        )


def parse_scoring_tables(lines: Iterable[str], required: Iterable[str] = SCORES) -> ScoringTables:
    bounds: dict[str, tuple[float, float]] = {}
    raw: dict[str, dict] = {}
    section = None
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            if section != "bounds":
                if section in raw:
                    raise ScoringTableError(f"line {lineno}: duplicate section [{section}]")
                raw[section] = {"offset": 0, "missing": 0, "missing_var": {}, "bands": {}}
            continue
        if section is None:
            raise ScoringTableError(f"line {lineno}: content before any section")
        try:
            if section == "bounds":
                name, lo, hi = (p.strip() for p in line.split(","))
                bounds[name] = (_number(lo), _number(hi))
                continue
            sec = raw[section]
            if "=" in line:
                key, value = (p.strip() for p in line.split("=", 1))
                if key == "offset":
                    sec["offset"] = int(value)
                elif key == "missing":
                    sec["missing"] = int(value)
                elif key.startswith("missing."):
                    sec["missing_var"][key[len("missing.") :]] = int(value)
                else:
                    raise ScoringTableError(f"line {lineno}: unknown directive {key!r}")
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) not in (4, 5):
                raise ValueError("expected 'variable, lower, upper, points[, group]'")
            name = parts[0]
            group = parts[4] if len(parts) == 5 else None
            band = Band(_number(parts[1]), _number(parts[2]), int(parts[3]))
            entry = sec["bands"].setdefault(name, {"group": group, "bands": []})
            if entry["group"] != group:
                raise ScoringTableError(f"[{section}] {name}: inconsistent group")
            entry["bands"].append(band)
        except ScoringTableError:
            raise
        except ValueError as exc:
            raise ScoringTableError(f"line {lineno}: {exc}") from None

    missing = [s for s in required if s not in raw]
    if missing:
        raise ScoringTableError(f"missing score section(s): {', '.join(missing)}")

    tables = {}
    for score, sec in raw.items():
        rules = []
        for name, entry in sec["bands"].items():
            if name not in bounds:
                raise ScoringTableError(f"[{score}] {name}: no plausibility bounds declared")
            rule = VariableRule(
                name=name,
                bands=tuple(sorted(entry["bands"], key=lambda b: b.lower)),
                missing_points=sec["missing_var"].get(name, sec["missing"]),
                group=entry["group"],
            )
            _validate_rule(score, rule, bounds[name])
            rules.append(rule)
        tables[score] = ScoreTable(score, tuple(rules), sec["offset"])
    return ScoringTables(bounds=bounds, tables=tables)


def load_scoring_tables(path: str | Path) -> ScoringTables:
    with open(path, encoding="utf-8") as fh:
        return parse_scoring_tables(fh)


_DEFAULT: ScoringTables | None = None


def default_tables() -> ScoringTables:
    global _DEFAULT
    if _DEFAULT is None:
        text = resources.files("liquidlos.data").joinpath("scoring_tables.txt").read_text("utf-8")
        _DEFAULT = parse_scoring_tables(text.splitlines())
    return _DEFAULT


@dataclass(frozen=True)
class SOIVector:
    apache2: int
    saps2: int
    sofa: int
    oasis: int

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.apache2, self.saps2, self.sofa, self.oasis)


def compute_score(panel: VitalsPanel, score: str, tables: ScoringTables | None = None) -> int:
    tables = tables or default_tables()
    if score not in tables.tables:
        raise KeyError(f"no table for score {score!r}")
    tables.check_panel(panel)
    return tables[score].score(panel)


def soi_vector(panel: VitalsPanel, tables: ScoringTables | None = None) -> SOIVector:
    tables = tables or default_tables()
    return SOIVector(*(compute_score(panel, s, tables) for s in SCORES))


def normalize_soi(soi: SOIVector, tables: ScoringTables | None = None) -> list[float]:
    """Min-max scale each score by its table's attainable range into [0, 1]."""
    tables = tables or default_tables()
    out = []
    for name, value in zip(SCORES, soi.as_tuple()):
        lo, hi = tables.score_range(name)
        if not lo <= value <= hi:
            raise ValueError(f"{name}={value} outside attainable range [{lo}, {hi}]")
        out.append((value - lo) / (hi - lo) if hi > lo else 0.0)
    return out


def write_soi_csv(path: str | Path, rows: Iterable[tuple[str, int, SOIVector]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "day", *SCORES])
        for pid, day, v in rows:
            w.writerow([pid, day, *v.as_tuple()])


def read_soi_csv(path: str | Path) -> dict[tuple[str, int], SOIVector]:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"patient_id", "day", *SCORES} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing column(s) {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                out[(row["patient_id"], int(row["day"]))] = SOIVector(*(int(row[s]) for s in SCORES))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out
