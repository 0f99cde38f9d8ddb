"""Synthetic EHR cohorts: data model, generator, and corpus files.

A patient record is a time-ordered list of ``(window, code)`` events, where a
window is a 90-day bucket. Patients carry comorbidity clusters; a few
"signature" clusters are more prevalent (and more active) among cases, which
is where the case/control signal comes from.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .rng import stream

CASE, CONTROL = 1, 0
LABEL_NAMES = {CASE: "case", CONTROL: "control"}
LABEL_VALUES = {v: k for k, v in LABEL_NAMES.items()}
MIN_EVENTS, MAX_EVENTS = 50, 250
SPLITS = ("train", "val", "test")
SPLIT_RATIO = (7, 1, 2)
CORPUS_VERSION = 1


class CorpusFormatError(ValueError):
    pass


@dataclass(frozen=True)
class EventCode:
    id: int
    kind: str  # "diagnosis" | "medication"
    display: str


class Vocabulary:
    """Dense code ids ``[0, size)``: diagnoses first, then medications."""

    def __init__(self, size: int, n_diagnosis: int):
        if not 0 <= n_diagnosis <= size:
            raise ValueError(f"n_diagnosis={n_diagnosis} outside [0, {size}]")
        self.size = size
        self.n_diagnosis = n_diagnosis

    def __len__(self) -> int:
        return self.size

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and (self.size, self.n_diagnosis) == (other.size, other.n_diagnosis)

    def __repr__(self) -> str:
        return f"Vocabulary(size={self.size}, n_diagnosis={self.n_diagnosis})"

    def kind(self, code: int) -> str:
        return "diagnosis" if code < self.n_diagnosis else "medication"

    def code(self, code: int) -> EventCode:
        if not 0 <= code < self.size:
            raise KeyError(f"code {code} outside vocabulary of size {self.size}")
        if code < self.n_diagnosis:
            return EventCode(code, "diagnosis", f"DX{code:05d}")
        return EventCode(code, "medication", f"RX{code - self.n_diagnosis:05d}")

    def diagnosis_ids(self) -> np.ndarray:
        return np.arange(self.n_diagnosis)


@dataclass
class PatientRecord:
    patient_id: str
    label: int
    events: list[tuple[int, int]]

    @property
    def codes(self) -> list[int]:
        return [c for _, c in self.events]

    def __len__(self) -> int:
        return len(self.events)


@dataclass
class Cohort:
    name: str
    records: list[PatientRecord]
    vocabulary: Vocabulary
    splits: dict[str, list[str]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.patient_id in seen:
                raise ValueError(f"duplicate patient id {r.patient_id!r}")
            seen.add(r.patient_id)

    def __len__(self) -> int:
        return len(self.records)

    def by_id(self) -> dict[str, PatientRecord]:
        return {r.patient_id: r for r in self.records}

    def split(self, name: str) -> list[PatientRecord]:
        if name not in self.splits:
            raise KeyError(f"cohort {self.name!r} has no split {name!r}")
        index = self.by_id()
        return [index[pid] for pid in self.splits[name]]

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def subset(self, records: list[PatientRecord], name: str | None = None) -> "Cohort":
        return Cohort(name or self.name, list(records), self.vocabulary, {}, dict(self.meta))


@dataclass(frozen=True)
class CohortSpec:
    """Parameters of the synthetic cohort generator."""

    vocab_size: int = 2000
    diagnosis_fraction: float = 0.6
    n_clusters: int = 24
    cluster_size: int = 30
    # explicit per-cluster code sets; derived from the seed when None
    clusters: tuple[tuple[int, ...], ...] | None = None
    prevalence_range: tuple[float, float] = (0.08, 0.3)
    codraw: float = 0.7
    personal_codes: tuple[int, int] = (3, 8)
    noise: float = 0.1
    zipf_exponent: float = 1.0
    n_signature: int = 4
    signature_boost: float = 0.45
    signature_weight: float = 2.0
    n_case: int = 1000
    n_control: int = 2000
    length_median: float = 90.0
    length_sigma: float = 0.3
    events_per_window: float = 3.0
    seed: int = 0
    name: str = "synthetic"

    def __post_init__(self):
        lo, hi = self.prevalence_range
        for label, p in (("codraw", self.codraw), ("noise", self.noise), ("prevalence low", lo),
                         ("prevalence high", hi), ("signature_boost", self.signature_boost),
                         ("diagnosis_fraction", self.diagnosis_fraction)):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{label} must be a probability, got {p}")
        if lo > hi:
            raise ValueError(f"prevalence_range must be ordered, got {self.prevalence_range}")
        if self.n_case > self.n_control:
            raise ValueError(f"case count {self.n_case} exceeds control count {self.n_control}")
        if self.n_case < 0 or self.n_control < 0:
            raise ValueError("patient counts must be non-negative")
        if self.clusters is not None:
            for c in self.clusters:
                if not c or any(not 0 <= k < self.vocab_size for k in c):
                    raise ValueError("cluster code sets must be non-empty subsets of the vocabulary")
        elif self.n_clusters * self.cluster_size > self.vocab_size:
            raise ValueError("clusters do not fit in the vocabulary")
        if self.n_signature > self.n_cluster_sets:
            raise ValueError("more signature clusters than clusters")
        if self.length_median <= 0 or self.length_sigma < 0:
            raise ValueError("length distribution parameters must be positive")
        # lognormal support must reach [50, 250] with non-negligible mass
        from scipy.stats import lognorm
        dist = lognorm(s=max(self.length_sigma, 1e-12), scale=self.length_median)
        if dist.cdf(MAX_EVENTS + 0.5) - dist.cdf(MIN_EVENTS - 0.5) < 1e-3:
            raise ValueError(
                f"length distribution (median {self.length_median}, sigma {self.length_sigma}) "
                f"puts essentially no mass in [{MIN_EVENTS}, {MAX_EVENTS}]")

    @property
    def n_cluster_sets(self) -> int:
        return len(self.clusters) if self.clusters is not None else self.n_clusters

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["prevalence_range"] = list(self.prevalence_range)
        d["personal_codes"] = list(self.personal_codes)
        d["clusters"] = None if self.clusters is None else [list(c) for c in self.clusters]
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class CohortStructure:
    """Cluster layout shared by all patients of a cohort."""

    clusters: list[np.ndarray]
    weights: list[np.ndarray]
    prevalence: np.ndarray
    signature: np.ndarray
    background: np.ndarray  # probability over the whole vocabulary


def _zipf(n: int, s: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


def build_structure(spec: CohortSpec) -> CohortStructure:
    rng = stream(spec.seed, "structure")
    v = spec.vocab_size
    n_diag = int(round(v * spec.diagnosis_fraction))
    if spec.clusters is not None:
        clusters = [np.array(c, dtype=np.int64) for c in spec.clusters]
    else:
        # clusters mix diagnoses and medications, roughly 2:1
        n_dx = min(int(round(spec.cluster_size * 2 / 3)), n_diag // max(spec.n_clusters, 1))
        n_rx = spec.cluster_size - n_dx
        dx_pool = rng.permutation(n_diag)
        rx_pool = n_diag + rng.permutation(v - n_diag)
        if n_rx * spec.n_clusters > len(rx_pool):
            raise ValueError("not enough medication codes for the requested clusters")
        clusters = [np.concatenate([dx_pool[i * n_dx:(i + 1) * n_dx], rx_pool[i * n_rx:(i + 1) * n_rx]])
                    for i in range(spec.n_clusters)]
    weights = []
    for c in clusters:
        w = _zipf(len(c), spec.zipf_exponent)
        weights.append(w[rng.permutation(len(c))])
    lo, hi = spec.prevalence_range
    prevalence = rng.uniform(lo, hi, size=len(clusters))
    signature = np.sort(rng.choice(len(clusters), size=spec.n_signature, replace=False))
    background = _zipf(v, spec.zipf_exponent)[rng.permutation(v)]
    return CohortStructure(clusters, weights, prevalence, signature, background)


@dataclass
class GenerationStats:
    requested: int = 0
    kept: int = 0
    dropped_short: int = 0
    truncated_long: int = 0
    dropped_ids: list[str] = field(default_factory=list)
    cluster_rate: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def clamp_and_order(record: PatientRecord, stats: GenerationStats | None = None) -> PatientRecord | None:
    """Sort events by window, keep the most recent 250, drop records under 50 events."""
    if not record.events:
        raise ValueError(f"record {record.patient_id!r} has no events")
    events = sorted(record.events, key=lambda e: e[0])
    if len(events) < MIN_EVENTS:
        if stats is not None:
            stats.dropped_short += 1
            stats.dropped_ids.append(record.patient_id)
        return None
    if len(events) > MAX_EVENTS:
        events = events[-MAX_EVENTS:]
        if stats is not None:
            stats.truncated_long += 1
    return PatientRecord(record.patient_id, record.label, events)


def _draw(rng: np.random.Generator, cdf: np.ndarray) -> int:
    return min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), len(cdf) - 1)


def _patient_events(spec: CohortSpec, st: CohortStructure, pid: str, label: int) -> tuple[list, np.ndarray]:
    rng = stream(spec.seed, "patient", pid)
    k = len(st.clusters)
    prev = st.prevalence.copy()
    if label == CASE:
        prev[st.signature] = np.minimum(1.0, prev[st.signature] + spec.signature_boost)
    active = np.flatnonzero(rng.random(k) < prev)
    if active.size == 0:
        active = np.array([rng.choice(k, p=prev / prev.sum())])
    lo, hi = spec.personal_codes
    personal, personal_w = [], []
    for c in active:
        n = min(int(rng.integers(lo, hi + 1)), len(st.clusters[c]))
        pick = rng.choice(len(st.clusters[c]), size=n, replace=False, p=st.weights[c])
        personal.append(st.clusters[c][pick])
        w = st.weights[c][pick]
        personal_w.append(w / w.sum())
    cluster_w = np.ones(active.size)
    if label == CASE:
        cluster_w[np.isin(active, st.signature)] *= spec.signature_weight
    cluster_cdf = np.cumsum(cluster_w / cluster_w.sum())
    personal_cdf = [np.cumsum(w) for w in personal_w]
    background_cdf = np.cumsum(st.background)

    target = int(round(rng.lognormal(np.log(spec.length_median), spec.length_sigma)))
    target = max(target, 1)
    events: list[tuple[int, int]] = []
    window = 0
    prev_cluster = -1
    while len(events) < target:
        n_w = min(1 + int(rng.poisson(max(spec.events_per_window - 1.0, 0.0))), target - len(events))
        drawn: list[int] = []
        attempts = 0
        while len(drawn) < n_w and attempts < 4 * n_w:
            attempts += 1
            if spec.noise > 0 and rng.random() < spec.noise:
                code = _draw(rng, background_cdf)
            else:
                if prev_cluster >= 0 and rng.random() < spec.codraw:
                    ci = prev_cluster
                else:
                    ci = _draw(rng, cluster_cdf)
                prev_cluster = ci
                code = int(personal[ci][_draw(rng, personal_cdf[ci])])
            if code not in drawn:
                drawn.append(code)
        events.extend((window, c) for c in drawn)
        window += 1 + int(rng.poisson(0.5))
    return events, active


def assign_splits(records: list[PatientRecord], seed: int) -> dict[str, list[str]]:
    """7:1:2 patient-level split, label-stratified by interleaving."""
    rng = stream(seed, "split")
    keyed = []
    for label in sorted({r.label for r in records}):
        group = [r.patient_id for r in records if r.label == label]
        order = rng.permutation(len(group))
        n = len(group)
        keyed.extend(((i + 0.5) / n, label, group[j]) for i, j in enumerate(order))
    keyed.sort()
    ids = [pid for _, _, pid in keyed]
    n = len(ids)
    total = sum(SPLIT_RATIO)
    cut1 = int(round(n * SPLIT_RATIO[0] / total))
    cut2 = int(round(n * (SPLIT_RATIO[0] + SPLIT_RATIO[1]) / total))
    return {"train": ids[:cut1], "val": ids[cut1:cut2], "test": ids[cut2:]}


def generate_cohort(spec: CohortSpec, prefix: str = "P", n_case: int | None = None,
                    n_control: int | None = None) -> tuple[Cohort, GenerationStats]:
    """Generate a cohort; each patient is a pure function of ``(spec, patient id)``.

    ``prefix`` namespaces patient ids, so a reserve pool drawn with a different
    prefix is disjoint from (and independent of) the main cohort.
    """
    st = build_structure(spec)
    n_case = spec.n_case if n_case is None else n_case
    n_control = spec.n_control if n_control is None else n_control
    n = n_case + n_control
    width = max(6, len(str(n)))
    labels = np.array([CASE] * n_case + [CONTROL] * n_control)
    labels = labels[stream(spec.seed, "labels", prefix).permutation(n)]
    stats = GenerationStats(requested=n)
    records = []
    active_counts = np.zeros((2, len(st.clusters)))
    label_counts = np.zeros(2)
    for i in range(n):
        pid = f"{prefix}{i:0{width}d}"
        events, active = _patient_events(spec, st, pid, int(labels[i]))
        rec = clamp_and_order(PatientRecord(pid, int(labels[i]), events), stats)
        if rec is None:
            continue
        records.append(rec)
        active_counts[rec.label, active] += 1
        label_counts[rec.label] += 1
    stats.kept = len(records)
    with np.errstate(invalid="ignore", divide="ignore"):
        rates = active_counts / np.maximum(label_counts, 1)[:, None]
    stats.cluster_rate = {"case": rates[CASE].round(4).tolist(), "control": rates[CONTROL].round(4).tolist(),
                          "signature": st.signature.tolist()}
    n_diag = int(round(spec.vocab_size * spec.diagnosis_fraction))
    cohort = Cohort(spec.name, records, Vocabulary(spec.vocab_size, n_diag),
                    assign_splits(records, spec.seed), {"spec": spec.digest(), "seed": spec.seed})
    return cohort, stats


# ---------------------------------------------------------------------------
# corpus files


def _format_record(r: PatientRecord) -> str:
    events = ",".join(f"{w}:{c}" for w, c in r.events)
    return f"{r.patient_id}\t{LABEL_NAMES[r.label]}\t{events}"


def save_corpus(cohort: Cohort, path, stats: GenerationStats | None = None) -> None:
    """Write the line-delimited corpus (and a ``.stats.json`` sidecar when given stats)."""
    lines = [f"#ehr-corpus\tversion={CORPUS_VERSION}\tV={cohort.vocabulary.size}"
             f"\tdiagnoses={cohort.vocabulary.n_diagnosis}\tspec={cohort.meta.get('spec', '-')}"
             f"\tname={cohort.name}"]
    for split in SPLITS:
        if split in cohort.splits:
            lines.append(f"#split\t{split}\t{','.join(cohort.splits[split])}")
    lines.extend(_format_record(r) for r in cohort.records)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    if stats is not None:
        Path(str(path) + ".stats.json").write_text(json.dumps(stats.to_dict(), indent=1, sort_keys=True))


def _parse_header(line: str, lineno: int) -> dict[str, str]:
    fields = line.rstrip("\n").split("\t")
    if fields[0] != "#ehr-corpus":
        raise CorpusFormatError(f"line {lineno}: missing '#ehr-corpus' header")
    out = {}
    for f in fields[1:]:
        if "=" not in f:
            raise CorpusFormatError(f"line {lineno}: malformed header field {f!r}")
        k, v = f.split("=", 1)
        out[k] = v
    return out


def load_corpus(path) -> Cohort:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise CorpusFormatError(f"{path}: empty file (line 1: missing header)")
    head = _parse_header(lines[0], 1)
    if head.get("version") != str(CORPUS_VERSION):
        raise CorpusFormatError(f"{path}: unsupported corpus version {head.get('version')!r}")
    try:
        vocab = Vocabulary(int(head["V"]), int(head["diagnoses"]))
    except (KeyError, ValueError) as exc:
        raise CorpusFormatError(f"line 1: bad vocabulary fields ({exc})") from exc
    splits: dict[str, list[str]] = {}
    records: list[PatientRecord] = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if line.startswith("#split\t"):
            parts = line.split("\t")
            if len(parts) != 3 or parts[1] not in SPLITS:
                raise CorpusFormatError(f"line {lineno}: malformed split line")
            splits[parts[1]] = parts[2].split(",") if parts[2] else []
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise CorpusFormatError(f"line {lineno}: expected 3 tab-separated fields, got {len(parts)}")
        pid, label, body = parts
        if pid in seen:
            raise CorpusFormatError(f"line {lineno}: duplicate patient id {pid!r}")
        if label not in LABEL_VALUES:
            raise CorpusFormatError(f"line {lineno}: unknown label {label!r}")
        events = []
        try:
            for item in body.split(","):
                w, c = item.split(":")
                events.append((int(w), int(c)))
        except ValueError as exc:
            raise CorpusFormatError(f"line {lineno}: malformed event list ({exc})") from exc
        for i, (w, c) in enumerate(events):
            if not 0 <= c < vocab.size:
                raise CorpusFormatError(f"line {lineno}: code {c} outside vocabulary of size {vocab.size}")
            if i and w < events[i - 1][0]:
                raise CorpusFormatError(f"line {lineno}: window indices decrease")
        seen.add(pid)
        records.append(PatientRecord(pid, LABEL_VALUES[label], events))
    for name, ids in splits.items():
        unknown = [p for p in ids if p not in seen]
        if unknown:
            raise CorpusFormatError(f"split {name!r} references unknown patient {unknown[0]!r}")
    meta = {"spec": head.get("spec", "-")}
    return Cohort(head.get("name", "corpus"), records, vocab, splits, meta)


def code_counts(records: Iterable[PatientRecord], vocab_size: int) -> np.ndarray:
    counts = np.zeros(vocab_size, dtype=np.int64)
    for r in records:
        np.add.at(counts, np.asarray(r.codes, dtype=np.int64), 1)
    return counts
