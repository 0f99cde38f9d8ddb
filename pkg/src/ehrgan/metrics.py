"""Classification metrics, corpus fidelity analyses, and run comparison tables."""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata, spearmanr

from .synth import MAX_EVENTS, MIN_EVENTS, Cohort, PatientRecord, code_counts


def _check_binary(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels).astype(np.int64)
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must be 0/1")
    if labels.min(initial=1) == labels.max(initial=0) or labels.size == 0:
        raise ValueError("AUROC needs both classes present")
    return labels


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: P(s+ > s-) + 0.5 P(s+ = s-), via average ranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_binary(labels)
    ranks = rankdata(scores)  # ties share the average rank
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


def roc_curve(scores, labels) -> RocCurve:
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_binary(labels)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s)), y.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    tpr = np.r_[0.0, tp / y.sum()]
    fpr = np.r_[0.0, fp / (y.size - y.sum())]
    return RocCurve(np.r_[np.inf, s[last]], fpr, tpr, auroc(scores, labels))


def accuracy(probabilities, labels, threshold: float = 0.5) -> float:
    """Fraction correct: argmax for ``(N, K)`` probabilities, threshold for scalar scores."""
    p = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    pred = p.argmax(axis=1) if p.ndim == 2 else (p >= threshold).astype(np.int64)
    if pred.shape != labels.shape:
        raise ValueError(f"{pred.shape[0]} predictions for {labels.shape[0]} labels")
    return float(np.mean(pred == labels))


# ---------------------------------------------------------------------------
# fidelity


LENGTH_EDGES = np.r_[0, np.arange(MIN_EVENTS, MAX_EVENTS + 1, 10), np.iinfo(np.int64).max]


def length_histogram(records: list[PatientRecord]) -> np.ndarray:
    """Probability per bin: [0, 50), ten-wide bins over [50, 250), and [250, inf)."""
    lengths = np.array([len(r) for r in records])
    counts, _ = np.histogram(lengths, bins=LENGTH_EDGES)
    return counts / max(counts.sum(), 1)


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return float(0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum())


def _spearman(a: np.ndarray, b: np.ndarray) -> float:
    if np.all(a == a[0]) or np.all(b == b[0]):
        return 1.0 if np.array_equal(rankdata(a), rankdata(b)) else 0.0
    return float(spearmanr(a, b).statistic)


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a.ravel() - a.mean()
    b = b.ravel() - b.mean()
    den = np.sqrt((a * a).sum() * (b * b).sum())
    if den == 0:
        return 1.0 if np.allclose(a, b) else 0.0
    return float((a * b).sum() / den)


def cooccurrence(records: list[PatientRecord], codes: np.ndarray) -> np.ndarray:
    """Raw record-level co-presence counts for ``codes`` (diagonal = presence counts)."""
    pos = {int(c): i for i, c in enumerate(codes)}
    k = len(codes)
    mat = np.zeros((k, k), dtype=np.int64)
    for r in records:
        present = sorted({pos[c] for c in r.codes if c in pos})
        if present:
            idx = np.array(present)
            mat[np.ix_(idx, idx)] += 1
    return mat


@dataclass
class FidelityReport:
    length_hist_original: np.ndarray
    length_hist_generated: np.ndarray
    length_tv: float
    top_codes: np.ndarray
    freq_original: np.ndarray
    freq_generated: np.ndarray
    freq_spearman: float
    cooc_codes: np.ndarray
    cooc_original: np.ndarray
    cooc_generated: np.ndarray
    cooc_raw_original: np.ndarray
    cooc_raw_generated: np.ndarray
    cooc_correlation: float
    extras: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {"length_tv": self.length_tv, "freq_spearman": self.freq_spearman,
                "cooc_correlation": self.cooc_correlation, "top_k_freq": len(self.top_codes),
                "top_k_cooc": len(self.cooc_codes), **self.extras}

    def dump_grids(self, prefix) -> None:
        """Plain whitespace grids for external plotting."""
        np.savetxt(f"{prefix}.length_hist.txt", np.c_[self.length_hist_original, self.length_hist_generated])
        np.savetxt(f"{prefix}.freq.txt", np.c_[self.top_codes, self.freq_original, self.freq_generated])
        np.savetxt(f"{prefix}.cooc_original.txt", self.cooc_original)
        np.savetxt(f"{prefix}.cooc_generated.txt", self.cooc_generated)


def _records(x) -> list[PatientRecord]:
    return list(x.records) if isinstance(x, Cohort) else list(x)


def fidelity(original, generated, top_k_freq: int = 100, top_k_cooc: int = 20,
             cooc_codes: np.ndarray | None = None) -> FidelityReport:
    """Compare two corpora on lengths, top-k code frequencies, and co-occurrence.

    Code ranks come from the original corpus. Labels are ignored. By default
    the co-occurrence set is the ``top_k_cooc`` most frequent diagnosis codes
    when the inputs are cohorts, else the most frequent codes of any kind.
    """
    orig, gen = _records(original), _records(generated)
    if not orig or not gen:
        raise ValueError("fidelity needs two non-empty corpora")
    if isinstance(original, Cohort) and isinstance(generated, Cohort) and original.vocabulary != generated.vocabulary:
        raise ValueError("corpora use different vocabularies")
    vocab = original.vocabulary.size if isinstance(original, Cohort) else 1 + max(
        max(r.codes) for r in orig + gen if r.codes)
    c_orig = code_counts(orig, vocab).astype(np.float64)
    c_gen = code_counts(gen, vocab).astype(np.float64)
    f_orig = c_orig / max(c_orig.sum(), 1)
    f_gen = c_gen / max(c_gen.sum(), 1)
    ranking = np.argsort(-c_orig, kind="mergesort")
    top = ranking[:top_k_freq]

    if cooc_codes is None:
        pool = ranking
        if isinstance(original, Cohort):
            pool = ranking[ranking < original.vocabulary.n_diagnosis]
        cooc_codes = pool[:top_k_cooc]
    cooc_codes = np.asarray(cooc_codes)
    raw_o = cooccurrence(orig, cooc_codes)
    raw_g = cooccurrence(gen, cooc_codes)
    norm_o = raw_o / len(orig)
    norm_g = raw_g / len(gen)

    h_o, h_g = length_histogram(orig), length_histogram(gen)
    return FidelityReport(
        length_hist_original=h_o, length_hist_generated=h_g, length_tv=total_variation(h_o, h_g),
        top_codes=top, freq_original=f_orig[top], freq_generated=f_gen[top],
        freq_spearman=_spearman(f_orig[top], f_gen[top]),
        cooc_codes=cooc_codes, cooc_original=norm_o, cooc_generated=norm_g,
        cooc_raw_original=raw_o, cooc_raw_generated=raw_g, cooc_correlation=_pearson(norm_o, norm_g),
    )


# ---------------------------------------------------------------------------
# run comparison


@dataclass
class ComparisonRow:
    key: str
    n: int
    metrics: dict[str, tuple[float, float, float]]  # name -> (median, min, max)


def compare_runs(runs: list[dict], group_by: str = "mode", metrics=("auroc", "accuracy")) -> list[ComparisonRow]:
    """Median and spread over seeds per group.

    Each run is a flat dict holding ``group_by`` plus metric values. Groups
    keep first-seen order.
    """
    groups: dict[str, list[dict]] = {}
    for r in runs:
        groups.setdefault(str(r[group_by]), []).append(r)
    rows = []
    for key, items in groups.items():
        stats = {}
        for m in metrics:
            vals = [float(r[m]) for r in items if m in r]
            if vals:
                stats[m] = (statistics.median(vals), min(vals), max(vals))
        rows.append(ComparisonRow(key, len(items), stats))
    return rows


def format_table(rows: list[ComparisonRow], title: str = "") -> str:
    metric_names = []
    for r in rows:
        for m in r.metrics:
            if m not in metric_names:
                metric_names.append(m)
    header = ["group", "n"] + [f"{m} median [min, max]" for m in metric_names]
    body = []
    for r in rows:
        cells = [r.key, str(r.n)]
        for m in metric_names:
            if m in r.metrics:
                med, lo, hi = r.metrics[m]
                cells.append(f"{med:.4f} [{lo:.4f}, {hi:.4f}]")
            else:
                cells.append("-")
        body.append(cells)
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    lines = [title] if title else []
    lines.append("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in body)
    return "\n".join(lines)


def table_records(rows: list[ComparisonRow]) -> list[str]:
    out = []
    for r in rows:
        rec = {"group": r.key, "n": r.n}
        for m, (med, lo, hi) in r.metrics.items():
            rec[f"{m}_median"], rec[f"{m}_min"], rec[f"{m}_max"] = med, lo, hi
        out.append(json.dumps(rec, sort_keys=True))
    return out
