"""Synthetic admissions with a known latent severity process.

Each patient gets a disease, an admission severity in [0, 1] and a personal
recovery rate. Severity follows a bounded random walk drifting down by that
rate; the stay ends the first day severity falls to the recovery threshold
(clipped to 2..31 days). Concept mentions, note text and vitals are all drawn
from the current severity, so a pipeline that recovers severity and its trend
from notes and SOI scores can forecast the remaining stay.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .concepts import ClinicalNote, ConceptLexicon, default_lexicon, note_to_json
from .soi import VitalsPanel, default_tables
from .timeline import MAX_LOS, MIN_LOS, DayRecord, PatientTimeline, write_timelines_csv

DISEASES = ("pneumonia", "sepsis", "cardiovascular")
DEFAULT_MIX = {"pneumonia": 0.45, "sepsis": 0.31, "cardiovascular": 0.24}

RECOVERY_THRESHOLD = 0.15
INITIAL_SEVERITY = (0.35, 0.95)
# relative speed of recovery per disease; sepsis resolves slowest
DISEASE_PACE = {"pneumonia": 1.0, "sepsis": 0.8, "cardiovascular": 1.2}

# Concept pools by canonical name; resolved to CUIs against the lexicon.
POOLS = {
    "pneumonia": [
        "pneumonia", "cough", "fever", "dyspnea", "rales", "hypoxia", "pleural effusion",
        "atelectasis", "respiratory failure", "chills", "wheezing", "cyanosis", "hemoptysis",
    ],
    "sepsis": [
        "sepsis", "fever", "chills", "hypotension", "tachycardia", "septic shock", "confusion",
        "delirium", "acute kidney injury", "leukocytosis", "thrombocytopenia", "jaundice",
        "urinary tract infection", "shock",
    ],
    "cardiovascular": [
        "chest pain", "congestive heart failure", "pulmonary edema", "edema", "atrial fibrillation",
        "myocardial infarction", "dyspnea", "palpitations", "angina pectoris", "bradycardia",
        "tachycardia", "hypotension", "syncope", "cardiac arrest",
    ],
    "general": [
        "pain", "fatigue", "nausea", "vomiting", "anorexia", "malaise", "anxiety", "insomnia",
        "headache", "diarrhea", "dehydration",
    ],
}
BACKGROUND = [
    "hypertension", "diabetes mellitus", "copd", "smoking", "alcohol consumption", "obesity",
    "coronary artery disease", "chronic kidney disease", "hyperlipidemia", "asthma", "stroke",
    "cancer", "drug abuse", "fall", "fracture", "depression",
]
RADIOLOGY = {"pulmonary edema", "pleural effusion", "atelectasis", "pneumonia", "pneumothorax", "edema"}
ECG = {"atrial fibrillation", "tachycardia", "bradycardia", "myocardial infarction"}

POSITIVE_TEMPLATES = (
    "Patient reports {f}.",
    "{F} noted.",
    "Findings consistent with {f}.",
    "Continues to have {f}.",
    "Exam notable for {f}.",
)
NEGATIVE_TEMPLATES = (
    "No {f}.",
    "Patient denies {f}.",
    "No history of {f}.",
    "Absence of {f}.",
    "{F} ruled out.",
    "Negative for {f}.",
    "No evidence of {f}.",
    "{F} not present.",
)
CONTRAST_TEMPLATE = "No {neg} but reports {pos}."
FILLERS = (
    "Patient resting comfortably.",
    "Vital signs reviewed.",
    "Plan discussed with family.",
    "Will continue current management.",
)


class InfeasibleSpec(ValueError):
    pass


@dataclass
class CohortSpec:
    n_patients: int = 500
    lexicon: ConceptLexicon | None = None
    los_range: tuple[int, int] = (MIN_LOS, MAX_LOS)
    disease_mix: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_MIX))
    mean_los: float = 10.0
    seed: int = 0
    p_neg: float = 0.3
    severity_noise: float = 0.02
    rate_spread: float = 0.25
    vitals_noise: float = 1.0
    p_missing: float = 0.03

    def validate(self) -> None:
        if self.n_patients < 1:
            raise InfeasibleSpec("n_patients must be >= 1")
        lo, hi = self.los_range
        if not MIN_LOS <= lo < hi <= MAX_LOS:
            raise InfeasibleSpec(f"los_range {self.los_range} must lie within [{MIN_LOS}, {MAX_LOS}]")
        if not lo < self.mean_los < hi:
            raise InfeasibleSpec(f"mean_los {self.mean_los} outside los_range {self.los_range}")
        if set(self.disease_mix) - set(DISEASES):
            raise InfeasibleSpec(f"unknown disease(s) {sorted(set(self.disease_mix) - set(DISEASES))}")
        if any(v < 0 for v in self.disease_mix.values()) or not math.isclose(
            sum(self.disease_mix.values()), 1.0, abs_tol=1e-9
        ):
            raise InfeasibleSpec("disease proportions must be non-negative and sum to 1")
        for name in ("p_neg", "p_missing"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InfeasibleSpec(f"{name} must be a probability")


@dataclass(frozen=True)
class DayTruth:
    patient_id: str
    day: int
    severity: float
    disease: str
    total_los: int
    present: tuple[str, ...]
    negated: tuple[str, ...]


@dataclass
class Cohort:
    timelines: list[PatientTimeline]
    notes: list[ClinicalNote]
    truth: list[DayTruth]
    lexicon: ConceptLexicon
    recovery_rate: float

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "lexicon": out / "lexicon.jsonl",
            "notes": out / "notes.jsonl",
            "timelines": out / "timelines.csv",
            "ground_truth": out / "ground_truth.jsonl",
        }
        paths["lexicon"].write_text(self.lexicon.to_jsonl(), encoding="utf-8")
        with open(paths["notes"], "w", encoding="utf-8") as fh:
            for n in self.notes:
                fh.write(note_to_json(n) + "\n")
        write_timelines_csv(paths["timelines"], self.timelines)
        with open(paths["ground_truth"], "w", encoding="utf-8") as fh:
            for d in self.truth:
                fh.write(
                    json.dumps(
                        {
                            "patient_id": d.patient_id,
                            "day": d.day,
                            "severity": d.severity,
                            "disease": d.disease,
                            "total_los": d.total_los,
                            "present": list(d.present),
                            "negated": list(d.negated),
                        }
                    )
                    + "\n"
                )
        return paths


# ---------------------------------------------------------------------------
# Severity process


def _walk_los(s0, rate, eps, threshold, lo, hi):
    """Vectorized first-passage day of the severity walk, clipped to [lo, hi]."""
    s = s0.copy()
    los = np.full(s0.shape, hi)
    done = np.zeros(s0.shape, dtype=bool)
    for n in range(1, hi + 1):
        s = np.clip(s - rate + eps[:, n - 1], 0.0, 1.0)
        hit = (~done) & (s <= threshold)
        los[hit] = n
        done |= hit
    return np.clip(los, lo, hi)


def calibrate_recovery_rate(spec: CohortSpec, n_sim: int = 20000) -> float:
    """Base daily recovery rate giving the requested mean stay.

    Bisection on a fixed simulation (common random numbers), so the result
    depends only on the cohort's distributional settings, not on its seed.
    """
    spec.validate()
    rng = np.random.default_rng(20240601)
    lo_los, hi_los = spec.los_range
    names = list(spec.disease_mix)
    diseases = rng.choice(len(names), size=n_sim, p=[spec.disease_mix[d] for d in names])
    pace = np.array([DISEASE_PACE[names[i]] for i in diseases])
    s0 = rng.uniform(*INITIAL_SEVERITY, size=n_sim)
    spread = np.exp(spec.rate_spread * rng.standard_normal(n_sim))
    eps = spec.severity_noise * rng.standard_normal((n_sim, hi_los))

    def mean_los(r):
        return _walk_los(s0, r * pace * spread, eps, RECOVERY_THRESHOLD, lo_los, hi_los).mean()

    a, b = 1e-4, 1.0
    if not mean_los(b) <= spec.mean_los <= mean_los(a):
        raise InfeasibleSpec(f"mean_los {spec.mean_los} is not reachable within {spec.los_range}")
    for _ in range(60):
        mid = 0.5 * (a + b)
        if mean_los(mid) > spec.mean_los:
            a = mid
        else:
            b = mid
    return 0.5 * (a + b)


# ---------------------------------------------------------------------------
# Text rendering


def _cap(text: str) -> str:
    return text[:1].upper() + text[1:]


def render_sentence(rng: np.random.Generator, surface: str, negated: bool) -> str:
    templates = NEGATIVE_TEMPLATES if negated else POSITIVE_TEMPLATES
    t = templates[int(rng.integers(len(templates)))]
    return t.format(f=surface, F=_cap(surface))


def negation_corpus(n: int = 50, seed: int = 0, lexicon: ConceptLexicon | None = None):
    """``n`` template sentences tagged with (cui, expected negation flag)."""
    lexicon = lexicon or default_lexicon()
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        concept = lexicon.concepts[int(rng.integers(len(lexicon.concepts)))]
        surface = concept.surface_forms[int(rng.integers(len(concept.surface_forms)))]
        negated = bool(k % 2)
        out.append((render_sentence(rng, surface, negated), concept.cui, negated))
    return out


# ---------------------------------------------------------------------------
# Vitals


def _vitals(rng, s: float, disease: str, age: float, noise: float, p_missing: float) -> VitalsPanel:
    def n(sd):
        return noise * sd * rng.standard_normal()

    infectious = disease in ("pneumonia", "sepsis")
    hr = 78 + 55 * s + (12 * s if disease == "sepsis" else 0) + n(5)
    mapv = 88 - 38 * s - (8 * s if disease != "pneumonia" else 0) + n(4)
    values = {
        "age": age,
        "heart_rate": hr,
        "mean_arterial_pressure": mapv,
        "systolic_bp": 1.4 * mapv + n(6),
        "temperature": 36.7 + (2.6 if infectious else 0.5) * s + n(0.2),
        "respiratory_rate": 15 + 18 * s + n(1.5),
        "pao2_fio2": 460 - (420 if disease == "pneumonia" else 360) * s + n(20),
        "gcs": 15 - 14 * max(0.0, s - 0.3) + n(0.5),
        "creatinine": 0.9 + (5.5 if disease == "sepsis" else 4.0) * s**2 + n(0.1),
        "bilirubin": 0.7 + 9.0 * s**3 + n(0.1),
        "platelets": 260 - 235 * s + n(15),
        "white_blood_count": 8 + (20 if infectious else 8) * s + n(1.5),
        "sodium": 140 - 12 * s + n(2),
        "potassium": 4.1 + 1.5 * s + n(0.2),
        "urine_output_24h": 2800 - 2500 * s + n(150),
        "norepinephrine": max(0.0, (s - (0.55 if disease != "pneumonia" else 0.75)) * 0.6),
    }
    bounds = default_tables().bounds
    for k, v in values.items():
        lo, hi = bounds[k]
        values[k] = float(min(max(v, lo), hi))
    values["gcs"] = int(round(values["gcs"]))
    values["mechanical_ventilation"] = bool(s > 0.72)
    for k in ("creatinine", "bilirubin", "platelets", "white_blood_count", "sodium", "potassium"):
        if rng.random() < p_missing:
            values[k] = None
    # round to charting precision
    for k, digits in (("temperature", 1), ("creatinine", 2), ("bilirubin", 2), ("potassium", 1),
                      ("heart_rate", 0), ("mean_arterial_pressure", 0), ("systolic_bp", 0),
                      ("respiratory_rate", 0), ("pao2_fio2", 0), ("platelets", 0),
                      ("white_blood_count", 1), ("sodium", 0), ("urine_output_24h", 0),
                      ("norepinephrine", 3)):
        if values[k] is not None:
            values[k] = round(values[k], digits)
    return VitalsPanel(**values)


# ---------------------------------------------------------------------------
# Cohort


def _resolve_pools(lexicon: ConceptLexicon):
    by_name = {c.canonical_name: c for c in lexicon.concepts}

    def resolve(names):
        return [by_name[n] for n in names if n in by_name]

    pools = {k: resolve(v) for k, v in POOLS.items()}
    background = resolve(BACKGROUND)
    if not any(pools.values()):
        # foreign lexicon: spread its concepts over the pools deterministically
        cs = list(lexicon.concepts)
        pools = {k: cs[i::4] for i, k in enumerate(POOLS)}
        background = []
    return pools, background


def _onset(cui: str, disease: str) -> float:
    """Severity at which a concept becomes likely; fixed per (concept, disease)."""
    h = np.random.default_rng([zlib.crc32(cui.encode()), zlib.crc32(disease.encode())])
    return float(h.uniform(0.15, 0.85))


def _patient(spec: CohortSpec, index: int, rate0: float, pools, background):
    rng = np.random.default_rng([spec.seed, index])
    pid = f"P{index + 1:04d}"
    names = list(spec.disease_mix)
    disease = names[int(rng.choice(len(names), p=[spec.disease_mix[d] for d in names]))]
    age = float(np.round(rng.uniform(18, 90), 0))
    s = float(rng.uniform(*INITIAL_SEVERITY))
    rate = rate0 * DISEASE_PACE[disease] * math.exp(spec.rate_spread * rng.standard_normal())
    lo, hi = spec.los_range

    sev = [s]
    los = hi
    for n in range(1, hi + 1):
        s = float(np.clip(s - rate + spec.severity_noise * rng.standard_normal(), 0.0, 1.0))
        if s <= RECOVERY_THRESHOLD:
            los = n
            break
        sev.append(s)
    los = int(min(max(los, lo), hi))
    while len(sev) < los:
        # stays padded up to the minimum length keep their last severity
        sev.append(sev[-1])
    sev = sev[:los]

    pool = pools[disease] + pools["general"]
    history = [c for c in background if rng.random() < 0.2]
    records, notes, truth = [], [], []
    for day, sd in enumerate(sev):
        present, negated = [], []
        for c in pool:
            p = 1.0 / (1.0 + math.exp(-12.0 * (sd - _onset(c.cui, disease))))
            if rng.random() < p:
                present.append(c)
            elif rng.random() < spec.p_neg:
                negated.append(c)
        if day == 0 or rng.random() < 0.15:
            present.extend(c for c in history if c not in present)
        present_ids = {c.cui for c in present}
        negated = [c for c in negated if c.cui not in present_ids]

        by_type: dict[str, list[str]] = {"nursing": [], "radiology": [], "ecg": []}
        neg_queue = list(negated)
        for c in present:
            surface = c.surface_forms[int(rng.integers(len(c.surface_forms)))]
            kind = "radiology" if c.canonical_name in RADIOLOGY else "ecg" if c.canonical_name in ECG else "nursing"
            if kind == "nursing" and neg_queue and rng.random() < 0.2:
                nc = neg_queue.pop()
                nsurf = nc.surface_forms[int(rng.integers(len(nc.surface_forms)))]
                by_type[kind].append(CONTRAST_TEMPLATE.format(neg=nsurf, pos=surface))
            else:
                by_type[kind].append(render_sentence(rng, surface, False))
        for c in neg_queue:
            surface = c.surface_forms[int(rng.integers(len(c.surface_forms)))]
            kind = "radiology" if c.canonical_name in RADIOLOGY else "ecg" if c.canonical_name in ECG else "nursing"
            by_type[kind].append(render_sentence(rng, surface, True))
        by_type["nursing"].insert(0, FILLERS[int(rng.integers(len(FILLERS)))])
        for kind in ("nursing", "radiology", "ecg"):
            sentences = by_type[kind]
            if sentences:
                order = rng.permutation(len(sentences)) if kind != "nursing" else range(len(sentences))
                notes.append(ClinicalNote(pid, day, kind, " ".join(sentences[i] for i in order)))

        panel = _vitals(rng, sd, disease, age, spec.vitals_noise, spec.p_missing)
        records.append(DayRecord(day, panel, float(los - 1 - day)))
        truth.append(
            DayTruth(
                pid,
                day,
                round(sd, 6),
                disease,
                los,
                tuple(sorted(present_ids)),
                tuple(sorted(c.cui for c in negated)),
            )
        )
    return PatientTimeline(pid, tuple(records), los), notes, truth


def generate_cohort(spec: CohortSpec | None = None) -> Cohort:
    spec = spec or CohortSpec()
    spec.validate()
    lexicon = spec.lexicon or default_lexicon()
    rate0 = calibrate_recovery_rate(spec)
    pools, background = _resolve_pools(lexicon)
    timelines, notes, truth = [], [], []
    for i in range(spec.n_patients):
        tl, ns, tr = _patient(spec, i, rate0, pools, background)
        timelines.append(tl)
        notes.extend(ns)
        truth.extend(tr)
    return Cohort(timelines, notes, truth, lexicon, rate0)


def oracle_features(truth: list[DayTruth]) -> dict[tuple[str, int], dict]:
    """Per-day ideal features keyed by (patient_id, day)."""
    return {
        (d.patient_id, d.day): {
            "severity": d.severity,
            "disease": d.disease,
            "remaining_los": d.total_los - 1 - d.day,
            "present": d.present,
            "negated": d.negated,
        }
        for d in truth
    }


def load_ground_truth(path: str | Path) -> list[DayTruth]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                r = json.loads(line)
                out.append(
                    DayTruth(
                        r["patient_id"], r["day"], r["severity"], r["disease"], r["total_los"],
                        tuple(r["present"]), tuple(r["negated"]),
                    )
                )
    return out


__all__ = [
    "CohortSpec",
    "Cohort",
    "DayTruth",
    "InfeasibleSpec",
    "generate_cohort",
    "oracle_features",
    "negation_corpus",
    "calibrate_recovery_rate",
    "load_ground_truth",
]
