"""Skip-gram code embeddings, sequence matrices, and cosine decoding.

The table has ``V + 1`` rows: one per event code plus a learned END mark
(id ``V``) that closes every record. PAD is the zero vector and is not a
table row; it decodes to :data:`PAD`.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from .rng import stream
from .synth import Cohort, PatientRecord

log = logging.getLogger(__name__)

PAD = -1
MAGIC = b"EHRE"
VERSION = 1


class UnknownCodeError(KeyError):
    pass


@dataclass(frozen=True)
class EmbeddingConfig:
    dim: int = 200
    window: int = 5
    negatives: int = 5
    epochs: int = 5
    lr: float = 0.025
    min_lr_fraction: float = 1e-4
    batch_size: int = 1024
    row_step_cap: float = 64.0
    seed: int = 0

    def __post_init__(self):
        if min(self.dim, self.window, self.negatives, self.epochs, self.batch_size) <= 0:
            raise ValueError("embedding dim, window, negatives, epochs and batch size must be positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not self.row_step_cap >= 1:
            raise ValueError("row_step_cap must be at least 1")


@dataclass
class EmbeddingTable:
    vectors: np.ndarray  # (V + 1, M); last row is END
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 2:
            raise ValueError(f"embedding table must be (V+1, M), got {self.vectors.shape}")
        self._unit = None

    @property
    def vocab_size(self) -> int:
        return self.vectors.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def end_id(self) -> int:
        return self.vocab_size

    def unit_vectors(self) -> np.ndarray:
        if self._unit is None:
            norms = np.linalg.norm(self.vectors, axis=1, keepdims=True)
            self._unit = self.vectors / np.where(norms > 0, norms, 1.0)
        return self._unit

    def max_abs(self) -> np.ndarray:
        """Per-dimension max |value| over all rows (output bound for generators)."""
        return np.abs(self.vectors).max(axis=0)


# ---------------------------------------------------------------------------
# training


def _token_stream(cohort: Cohort) -> list[np.ndarray]:
    end = cohort.vocabulary.size
    return [np.asarray(r.codes + [end], dtype=np.int64) for r in cohort.records]


def _epoch_pairs(seqs: list[np.ndarray], window: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """(center, context) pairs with a per-position reduced window, word2vec style."""
    centers, contexts = [], []
    for seq in seqs:
        n = len(seq)
        reach = rng.integers(1, window + 1, size=n)
        for d in range(1, min(window, n - 1) + 1):
            left = np.arange(n - d)
            fwd = reach[left] >= d
            centers.append(seq[left[fwd]])
            contexts.append(seq[left[fwd] + d])
            bwd = reach[left + d] >= d
            centers.append(seq[left[bwd] + d])
            contexts.append(seq[left[bwd]])
    if not centers:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    c = np.concatenate(centers)
    o = np.concatenate(contexts)
    perm = rng.permutation(len(c))
    return c[perm], o[perm]


def _scatter_capped(ids: np.ndarray, rows: np.ndarray, n: int, cap: float) -> np.ndarray:
    """Dense ``(n, M)`` array of the ``rows[i]`` summed into row ``ids[i]``, with large sums scaled down.

    A row hit ``k`` times in one minibatch gets its summed gradient divided by
    ``max(1, k / cap)``. Rows hit at most ``cap`` times therefore get the same
    step as sequential SGD would give them, and no row moves more than ``cap``
    single-pair steps per batch. With ``cap = 1`` this is a per-row mean.
    """
    counts = np.bincount(ids, minlength=n).astype(rows.dtype)
    weight = 1.0 / np.maximum(1.0, counts[ids] / cap)
    ind = sparse.csr_matrix((weight, (ids, np.arange(len(ids)))), shape=(n, len(ids)))
    return ind @ rows


def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -x)


def train_embedding(cohort: Cohort, cfg: EmbeddingConfig = EmbeddingConfig()) -> EmbeddingTable:
    """Skip-gram with negative sampling over each record's code stream (END appended)."""
    if not cohort.records:
        raise ValueError("cannot train embeddings on an empty corpus")
    rng = stream(cfg.seed, "embedding")
    v = cohort.vocabulary.size + 1
    m = cfg.dim
    seqs = _token_stream(cohort)
    counts = np.bincount(np.concatenate(seqs), minlength=v).astype(np.float64)
    noise = counts ** 0.75
    noise_cdf = np.cumsum(noise / noise.sum())

    # float32 working copies; the returned table is float64
    w_in = ((rng.random((v, m)) - 0.5) / m).astype(np.float32)
    w_out = np.zeros((v, m), dtype=np.float32)

    epoch_pairs = [_epoch_pairs(seqs, cfg.window, rng) for _ in range(cfg.epochs)]
    total = sum(len(c) for c, _ in epoch_pairs)
    seen = 0
    losses = []
    for centers, contexts in epoch_pairs:
        epoch_loss = 0.0
        negatives = np.minimum(np.searchsorted(noise_cdf, rng.random((len(centers), cfg.negatives)),
                                               side="right"), v - 1)
        for lo in range(0, len(centers), cfg.batch_size):
            c_ids = centers[lo:lo + cfg.batch_size]
            o_ids = contexts[lo:lo + cfg.batch_size]
            n_ids = negatives[lo:lo + cfg.batch_size]
            b = len(c_ids)
            lr = cfg.lr * max(cfg.min_lr_fraction, 1.0 - seen / max(total, 1))
            seen += b
            c = w_in[c_ids]
            o = w_out[o_ids]
            n = w_out[n_ids]
            pos = np.einsum("bm,bm->b", c, o)
            neg = np.einsum("bm,bkm->bk", c, n)
            epoch_loss += float(-_log_sigmoid(pos).sum() - _log_sigmoid(-neg).sum())
            gpos = 1.0 / (1.0 + np.exp(-pos)) - 1.0  # d loss / d pos
            gneg = 1.0 / (1.0 + np.exp(-neg))  # d loss / d neg
            gc = gpos[:, None] * o + np.einsum("bk,bkm->bm", gneg, n)
            go = gpos[:, None] * c
            gn = gneg[:, :, None] * c[:, None, :]
            w_in -= np.float32(lr) * _scatter_capped(c_ids, gc, v, cfg.row_step_cap)
            w_out -= np.float32(lr) * _scatter_capped(np.concatenate([o_ids, n_ids.reshape(-1)]),
                                                      np.concatenate([go, gn.reshape(-1, m)]), v,
                                                      cfg.row_step_cap)
        losses.append(epoch_loss / max(len(centers), 1))
        log.debug("embedding epoch %d loss %.4f", len(losses), losses[-1])

    absent = np.flatnonzero(counts[:-1] == 0).tolist()
    if absent:
        log.info("%d codes absent from corpus keep their random initialisation", len(absent))
    if not np.all(np.isfinite(w_in)):
        raise FloatingPointError("embedding training diverged (non-finite vectors)")
    meta = {"config": asdict(cfg), "loss": losses, "absent_codes": absent, "pairs": int(total),
            "corpus_spec": cohort.meta.get("spec", "-")}
    return EmbeddingTable(w_in.astype(np.float64), meta)


# ---------------------------------------------------------------------------
# sequence matrices


@dataclass
class SequenceMatrix:
    matrix: np.ndarray  # (T, M)
    n_events: int  # events kept (END row sits at index n_events)
    patient_id: str
    label: int

    @property
    def length(self) -> int:
        """Rows before padding, END mark included."""
        return self.n_events + 1


def _check_codes(codes: np.ndarray, table: EmbeddingTable) -> None:
    bad = codes[(codes < 0) | (codes >= table.vocab_size)]
    if bad.size:
        raise UnknownCodeError(f"code {int(bad[0])} is not in the embedding vocabulary of size {table.vocab_size}")


def record_ids(record: PatientRecord, target_t: int) -> np.ndarray:
    """The most recent ``target_t - 1`` codes of a record; one row stays free for END."""
    if target_t < 1:
        raise ValueError("target_t must be >= 1")
    codes = np.asarray(record.codes, dtype=np.int64)
    if len(codes) > target_t - 1:
        codes = codes[len(codes) - (target_t - 1):]
    return codes


def embed_record(record: PatientRecord, table: EmbeddingTable, target_t: int) -> SequenceMatrix:
    codes = record_ids(record, target_t)
    _check_codes(codes, table)
    mat = np.zeros((target_t, table.dim), dtype=table.vectors.dtype)
    mat[:len(codes)] = table.vectors[codes]
    mat[len(codes)] = table.vectors[table.end_id]
    return SequenceMatrix(mat, len(codes), record.patient_id, record.label)


def embed_batch(records: list[PatientRecord], table: EmbeddingTable, target_t: int, dtype=None) -> np.ndarray:
    """Stack of embedded records, shape ``(B, target_t, M)``."""
    ids = np.full((len(records), target_t), PAD, dtype=np.int64)
    for i, r in enumerate(records):
        codes = record_ids(r, target_t)
        _check_codes(codes, table)
        ids[i, :len(codes)] = codes
        ids[i, len(codes)] = table.end_id
    return embed_ids(ids, table, dtype)


def embed_ids(ids: np.ndarray, table: EmbeddingTable, dtype=None) -> np.ndarray:
    ext = np.vstack([table.vectors, np.zeros((1, table.dim))])
    out = ext[np.where(ids == PAD, table.vocab_size + 1, ids)]
    return out.astype(dtype) if dtype is not None else out


# ---------------------------------------------------------------------------
# decoding


def nearest_codes(rows: np.ndarray, table: EmbeddingTable) -> tuple[np.ndarray, np.ndarray]:
    """Cosine nearest table entry (codes and END) for each row of ``rows``.

    Zero rows decode to :data:`PAD` with score 0. Ties go to the smallest id.
    """
    rows = np.asarray(rows, dtype=np.float64)
    flat = rows.reshape(-1, table.dim)
    norms = np.linalg.norm(flat, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    sims = (flat / safe[:, None]) @ table.unit_vectors().T
    ids = np.argmax(sims, axis=1)
    scores = np.clip(sims[np.arange(len(ids)), ids], -1.0, 1.0)
    zero = norms == 0
    ids = np.where(zero, PAD, ids)
    scores = np.where(zero, 0.0, scores)
    return ids.reshape(rows.shape[:-1]), scores.reshape(rows.shape[:-1])


def nearest_code(row: np.ndarray, table: EmbeddingTable) -> tuple[int, float]:
    ids, scores = nearest_codes(np.asarray(row)[None, :], table)
    return int(ids[0]), float(scores[0])


def decode_ids(ids: np.ndarray, end_id: int) -> tuple[list[int], bool]:
    """Codes before the first END (PAD rows skipped); flag whether END was found."""
    out = []
    for i in ids:
        i = int(i)
        if i == end_id:
            return out, True
        if i != PAD:
            out.append(i)
    return out, False


# ---------------------------------------------------------------------------
# files


def save_embedding(table: EmbeddingTable, path) -> None:
    meta = json.dumps(table.meta, sort_keys=True).encode("utf-8")
    v1, m = table.vectors.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HIII", VERSION, v1, m, len(meta)))
        fh.write(meta)
        fh.write(np.asarray(table.vectors, dtype="<f8").tobytes())


def load_embedding(path) -> EmbeddingTable:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not an embedding file")
    version, v1, m, mlen = struct.unpack_from("<HIII", buf, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported embedding version {version}")
    pos = 4 + struct.calcsize("<HIII")
    meta = json.loads(buf[pos:pos + mlen].decode("utf-8"))
    pos += mlen
    if len(buf) - pos != 8 * v1 * m:
        raise ValueError(f"{path}: expected {v1}x{m} values, file holds {(len(buf) - pos) // 8}")
    vectors = np.frombuffer(buf, dtype="<f8", offset=pos).reshape(v1, m).copy()
    return EmbeddingTable(vectors, meta)


def export_text(table: EmbeddingTable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{table.vocab_size + 1} {table.dim}\n")
        for i, row in enumerate(table.vectors):
            name = "END" if i == table.end_id else str(i)
            fh.write(name + " " + " ".join(repr(float(x)) for x in row) + "\n")
