"""Concept extraction from clinical notes and daily ternary health vectors.

A local lexicon maps lowercase surface forms to concept IDs (CUIs). Notes are
tokenized, matched greedily against the lexicon (longest match, left to
right), and each mention is checked for negation with a NegEx-style window
rule. Mentions for one patient-day collapse into a vector over the sorted
vocabulary: +1 present, -1 only mentioned negatively, 0 not mentioned.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CATEGORIES = (
    "disease_symptom",
    "injury_poisoning",
    "abnormality",
    "lifestyle",
    "mental_health",
    "prior_history",
)
NOTE_TYPES = ("nursing", "radiology", "ecg", "other")

DEFAULT_WINDOW = 5
# Sentence punctuation closes a negation scope in addition to [TERM] words.
SENTENCE_BREAKS = frozenset({".", ";", "!", "?"})

_TOKEN_RE = re.compile(r"\w+(?:['\-]\w+)*|[^\w\s]")


class LexiconError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase word/punctuation tokens; punctuation is split off."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Concept:
    cui: str
    canonical_name: str
    category: str
    surface_forms: tuple[str, ...]


class ConceptLexicon:
    """Surface form -> CUI dictionary with a deterministic vocabulary index."""

    def __init__(self, concepts: Iterable[Concept]):
        by_cui: dict[str, Concept] = {}
        form_owner: dict[str, str] = {}
        for c in concepts:
            if c.cui in by_cui:
                raise LexiconError(f"duplicate CUI {c.cui}")
            if c.category not in CATEGORIES:
                raise LexiconError(f"{c.cui}: unknown category {c.category!r}")
            if not c.surface_forms:
                raise LexiconError(f"{c.cui}: no surface forms")
            for form in c.surface_forms:
                if not form or form != " ".join(form.split()) or form != form.lower():
                    raise LexiconError(
                        f"{c.cui}: surface form {form!r} must be lowercase, "
                        "whitespace-normalized and non-empty"
                    )
                if form in form_owner and form_owner[form] != c.cui:
                    raise LexiconError(
                        f"surface form {form!r} maps to both {form_owner[form]} and {c.cui}"
                    )
                form_owner[form] = c.cui
            by_cui[c.cui] = c

        self.concepts: tuple[Concept, ...] = tuple(by_cui[k] for k in sorted(by_cui))
        self.index: dict[str, int] = {c.cui: i for i, c in enumerate(self.concepts)}
        self._forms: dict[tuple[str, ...], str] = {}
        for form, cui in form_owner.items():
            toks = tuple(tokenize(form))
            if toks in self._forms and self._forms[toks] != cui:
                raise LexiconError(
                    f"surface form {form!r} tokenizes like a form of {self._forms[toks]} "
                    f"but maps to {cui}"
                )
            self._forms[toks] = cui
        self.max_form_len = max((len(k) for k in self._forms), default=0)

    @property
    def vocab_size(self) -> int:
        return len(self.concepts)

    @property
    def cuis(self) -> list[str]:
        return [c.cui for c in self.concepts]

    def lookup(self, tokens: Sequence[str]) -> str | None:
        return self._forms.get(tuple(tokens))

    def __contains__(self, cui: str) -> bool:
        return cui in self.index

    def __len__(self) -> int:
        return len(self.concepts)

    def to_jsonl(self) -> str:
        lines = [
            json.dumps(
                {
                    "cui": c.cui,
                    "name": c.canonical_name,
                    "category": c.category,
                    "surface_forms": list(c.surface_forms),
                }
            )
            for c in self.concepts
        ]
        return "\n".join(lines) + "\n"


def parse_lexicon(lines: Iterable[str]) -> ConceptLexicon:
    concepts = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            concepts.append(
                Concept(
                    cui=str(row["cui"]),
                    canonical_name=str(row["name"]),
                    category=str(row["category"]),
                    surface_forms=tuple(row["surface_forms"]),
                )
            )
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise LexiconError(f"line {lineno}: malformed lexicon entry ({exc})") from None
    return ConceptLexicon(concepts)


def load_lexicon(path: str | Path) -> ConceptLexicon:
    with open(path, encoding="utf-8") as fh:
        return parse_lexicon(fh)


def default_lexicon() -> ConceptLexicon:
    text = resources.files("liquidlos.data").joinpath("lexicon.jsonl").read_text("utf-8")
    return parse_lexicon(text.splitlines())


# ---------------------------------------------------------------------------
# Negation


@dataclass(frozen=True)
class NegationTriggers:
    pre: tuple[tuple[str, ...], ...]
    post: tuple[tuple[str, ...], ...]
    term: tuple[tuple[str, ...], ...]
    _table: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        table = {}
        for kind in ("term", "post", "pre"):
            for phrase in getattr(self, kind):
                table[phrase] = kind
        object.__setattr__(self, "_table", table)

    def find(self, tokens: Sequence[str]) -> list[tuple[int, int, str]]:
        """Greedy longest, non-overlapping trigger matches as (start, end, kind)."""
        max_len = max((len(p) for p in self._table), default=0)
        out = []
        i = 0
        while i < len(tokens):
            if tokens[i] in SENTENCE_BREAKS:
                out.append((i, i + 1, "term"))
                i += 1
                continue
            for n in range(min(max_len, len(tokens) - i), 0, -1):
                kind = self._table.get(tuple(tokens[i : i + n]))
                if kind is not None:
                    out.append((i, i + n, kind))
                    i += n
                    break
            else:
                i += 1
        return out


def parse_triggers(lines: Iterable[str]) -> NegationTriggers:
    sections: dict[str, list[tuple[str, ...]]] = {"PRE": [], "POST": [], "TERM": []}
    current = None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].upper()
            if current not in sections:
                raise ValueError(f"line {lineno}: unknown trigger section {line}")
            continue
        if current is None:
            raise ValueError(f"line {lineno}: trigger outside of a section")
        sections[current].append(tuple(tokenize(line)))
    return NegationTriggers(
        pre=tuple(sections["PRE"]), post=tuple(sections["POST"]), term=tuple(sections["TERM"])
    )


def load_triggers(path: str | Path) -> NegationTriggers:
    with open(path, encoding="utf-8") as fh:
        return parse_triggers(fh)


_DEFAULT_TRIGGERS: NegationTriggers | None = None


def default_triggers() -> NegationTriggers:
    global _DEFAULT_TRIGGERS
    if _DEFAULT_TRIGGERS is None:
        text = resources.files("liquidlos.data").joinpath("negex_triggers.txt").read_text("utf-8")
        _DEFAULT_TRIGGERS = parse_triggers(text.splitlines())
    return _DEFAULT_TRIGGERS


def detect_negation(
    tokens: Sequence[str],
    entity_span: tuple[int, int],
    triggers: NegationTriggers | None = None,
    window: int = DEFAULT_WINDOW,
    matches: list[tuple[int, int, str]] | None = None,
) -> bool:
    """True if a trigger negates the span.

    A pre-trigger must end at most ``window`` tokens before the span, a
    post-trigger must start at most ``window`` tokens after it, and no scope
    terminator may sit between trigger and span.
    """
    start, end = entity_span
    if not 0 <= start < end <= len(tokens):
        raise ValueError(f"span {entity_span} invalid for {len(tokens)} tokens")
    if triggers is None:
        triggers = default_triggers()
    if matches is None:
        matches = triggers.find(tokens)
    terms = [m for m in matches if m[2] == "term"]

    def blocked(lo: int, hi: int) -> bool:
        return any(lo <= ts and te <= hi for ts, te, _ in terms)

    for ts, te, kind in matches:
        if kind == "pre" and te <= start and start - te <= window and not blocked(te, start):
            return True
        if kind == "post" and ts >= end and ts - end <= window and not blocked(end, ts):
            return True
    return False


# ---------------------------------------------------------------------------
# Entities and vectors


@dataclass(frozen=True)
class EntityMention:
    cui: str
    span: tuple[int, int]
    negated: bool


def extract_entities(
    text: str,
    lexicon: ConceptLexicon,
    triggers: NegationTriggers | None = None,
    window: int = DEFAULT_WINDOW,
) -> list[EntityMention]:
    tokens = tokenize(text)
    if triggers is None:
        triggers = default_triggers()
    matches = triggers.find(tokens)
    mentions = []
    i = 0
    while i < len(tokens):
        for n in range(min(lexicon.max_form_len, len(tokens) - i), 0, -1):
            cui = lexicon.lookup(tokens[i : i + n])
            if cui is not None:
                span = (i, i + n)
                neg = detect_negation(tokens, span, triggers, window, matches)
                mentions.append(EntityMention(cui, span, neg))
                i += n
                break
        else:
            i += 1
    return mentions


@dataclass(frozen=True)
class ClinicalNote:
    patient_id: str
    day: int
    note_type: str
    text: str

    def __post_init__(self):
        if self.day < 0:
            raise ValueError(f"note day must be >= 0, got {self.day}")
        if self.note_type not in NOTE_TYPES:
            raise ValueError(f"unknown note type {self.note_type!r}")


@dataclass(frozen=True, eq=False)
class HealthVector:
    values: np.ndarray
    patient_id: str
    day: int

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.int8)
        if vals.ndim != 1 or not np.isin(vals, (-1, 0, 1)).all():
            raise ValueError("health vector entries must be -1, 0 or +1")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __eq__(self, other):
        return (
            isinstance(other, HealthVector)
            and self.patient_id == other.patient_id
            and self.day == other.day
            and np.array_equal(self.values, other.values)
        )


def build_health_vector(
    mentions: Iterable[EntityMention], lexicon: ConceptLexicon, patient_id: str, day: int
) -> HealthVector:
    values = np.zeros(lexicon.vocab_size, dtype=np.int8)
    for m in mentions:
        try:
            j = lexicon.index[m.cui]
        except KeyError:
            raise KeyError(f"unknown CUI {m.cui}") from None
        if not m.negated:
            values[j] = 1
        elif values[j] == 0:
            values[j] = -1
    return HealthVector(values, patient_id, day)


def aggregate_day(
    notes: Sequence[ClinicalNote],
    lexicon: ConceptLexicon,
    triggers: NegationTriggers | None = None,
    patient_id: str | None = None,
    day: int | None = None,
) -> HealthVector:
    keys = {(n.patient_id, n.day) for n in notes}
    if len(keys) > 1:
        raise ValueError(f"notes span several patient-days: {sorted(keys)}")
    if keys:
        patient_id, day = keys.pop()
    mentions = [m for n in notes for m in extract_entities(n.text, lexicon, triggers)]
    return build_health_vector(mentions, lexicon, patient_id or "", day or 0)


def load_notes(path: str | Path) -> list[ClinicalNote]:
    notes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                notes.append(
                    ClinicalNote(
                        str(row["patient_id"]), int(row["day"]), row["note_type"], row["text"]
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad note ({exc})") from None
    return notes


def note_to_json(note: ClinicalNote) -> str:
    return json.dumps(
        {"patient_id": note.patient_id, "day": note.day, "note_type": note.note_type, "text": note.text}
    )


def vectorize_notes(
    notes: Iterable[ClinicalNote],
    lexicon: ConceptLexicon,
    triggers: NegationTriggers | None = None,
) -> dict[tuple[str, int], HealthVector]:
    """Group notes by (patient, day) and build one vector per group."""
    groups: dict[tuple[str, int], list[ClinicalNote]] = {}
    for n in notes:
        groups.setdefault((n.patient_id, n.day), []).append(n)
    return {k: aggregate_day(groups[k], lexicon, triggers) for k in sorted(groups)}


def write_vectors_csv(path: str | Path, vectors: dict[tuple[str, int], HealthVector], lexicon: ConceptLexicon) -> None:
    """One row per patient-day: ``patient_id, day`` then a column per CUI."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "day", *lexicon.cuis])
        for key in sorted(vectors):
            v = vectors[key]
            if v.values.size != lexicon.vocab_size:
                raise ValueError(f"vector for {key} has {v.values.size} entries, lexicon has {lexicon.vocab_size}")
            w.writerow([v.patient_id, v.day, *(int(x) for x in v.values)])


def read_vectors_csv(path: str | Path) -> tuple[list[str], dict[tuple[str, int], HealthVector]]:
    """Returns the CUI column order and the vectors keyed by (patient, day)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["patient_id", "day"]:
            raise ValueError(f"{path}: expected header starting with patient_id,day")
        cuis = header[2:]
        out = {}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                hv = HealthVector(np.array([int(x) for x in row[2:]]), row[0], int(row[1]))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            out[(hv.patient_id, hv.day)] = hv
    return cuis, out
