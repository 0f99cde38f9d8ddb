"""CNN risk model and its training modes.

Four modes share one training loop:

* ``BASIC``: labeled data only.
* ``SSL_GAN``: each labeled example is paired with a transition sample that
  inherits its label; the augmented loss is weighted by ``mu``.
* ``RAND``: ``round(mu * N)`` extra pool records carrying uniformly random labels.
* ``FULL``: ``round(mu * N)`` extra pool records carrying their true labels.

With ``mu = 0`` every mode follows the BASIC trajectory exactly.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngs
from .embedding import EmbeddingTable, embed_batch
from .metrics import accuracy, auroc
from .nets import ConvTrunk, glorot_init
from .synth import CASE, Cohort, PatientRecord
from .tensor import OptimConfig, ParamSet, Tensor, backward, clip_and_step, no_grad, ops
from .tensor.checkpoint import load_tensors, save_tensors

log = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    BASIC = "BASIC"
    RAND = "RAND"
    FULL = "FULL"
    SSL_GAN = "SSL_GAN"


class TrainingDivergedError(FloatingPointError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass(frozen=True)
class SslConfig:
    mu: float = 0.0
    a: int = 1
    mode: Mode = Mode.BASIC
    labeled_fraction: float = 0.5
    seed: int = 0
    snap: bool = True  # decode transition samples to codes and re-embed
    fixed_once: bool = False  # draw augmentations once instead of every epoch

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.mu < 0:
            raise ValueError(f"mu must be >= 0, got {self.mu}")
        if self.a < 1:
            raise ValueError(f"augmentation multiplier must be >= 1, got {self.a}")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ValueError(f"labeled fraction must lie in (0, 1], got {self.labeled_fraction}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    lr: float = 0.001
    clip: float = 5.0
    seq_len: int = 150
    widths: tuple[int, ...] = (3, 4, 5)
    maps: int = 100
    dtype: str = "float32"

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ValueError("batch size and patience must be >= 1, epochs >= 0")
        if self.seq_len < max(self.widths):
            raise ValueError(f"sequence length {self.seq_len} is shorter than the widest filter")

    def build(self, emb_dim: int, seed: int) -> "PredictorModel":
        return PredictorModel(emb_dim, self.widths, self.maps, seed, self.dtype)


class PredictorModel:
    """Conv banks, max-over-time pooling, and a two-way softmax head."""

    def __init__(self, emb_dim: int, widths=(3, 4, 5), maps: int = 100, seed: int = 0, dtype="float32"):
        self.emb_dim = emb_dim
        self.widths = tuple(widths)
        self.maps = maps
        self.seed = seed
        self.dtype = np.dtype(dtype)
        rng = rngs.stream(seed, "predictor", "init")
        self.params = ParamSet()
        self.trunk = ConvTrunk(self.params, "trunk", emb_dim, self.widths, maps, rng, self.dtype)
        d = self.trunk.out_dim
        self.params.add("head.w", glorot_init(rng, (d, 2), d, 2, self.dtype))
        self.params.add("head.b", np.zeros(2, self.dtype))

    def logits(self, x: Tensor) -> Tensor:
        return ops.dense(self.trunk(x), self.params["head.w"], self.params["head.b"])

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Class probabilities ``(B, 2)`` for a batch ``(B, T, M)``."""
        with no_grad():
            return ops.softmax(self.logits(Tensor(np.asarray(x))).data.astype(np.float64))

    def config(self) -> dict:
        return {"emb_dim": self.emb_dim, "widths": list(self.widths), "maps": self.maps,
                "seed": self.seed, "dtype": self.dtype.name}

    def save(self, path, meta: dict | None = None) -> None:
        save_tensors(path, self.params.state_dict(), {"kind": "predictor", "model": self.config(), **(meta or {})})

    @classmethod
    def load(cls, path) -> tuple["PredictorModel", dict]:
        tensors, meta = load_tensors(path)
        if meta.get("kind") != "predictor":
            raise ValueError(f"{path}: not a predictor checkpoint (kind={meta.get('kind')!r})")
        model = cls(**meta["model"])
        model.params.load_state_dict(tensors)
        return model, meta


def _records(data) -> list[PatientRecord]:
    return list(data.records) if isinstance(data, Cohort) else list(data)


def predict_proba(model: PredictorModel, data, table: EmbeddingTable, seq_len: int = 150,
                  chunk: int = 256) -> np.ndarray:
    """Case probability per record."""
    if isinstance(data, Cohort) and data.vocabulary.size != table.vocab_size:
        raise ValueError(f"cohort vocabulary ({data.vocabulary.size}) does not match the embedding table "
                         f"({table.vocab_size})")
    if table.dim != model.emb_dim:
        raise ValueError(f"embedding width {table.dim} does not match the model ({model.emb_dim})")
    records = _records(data)
    out = np.empty(len(records))
    for lo in range(0, len(records), chunk):
        x = embed_batch(records[lo:lo + chunk], table, seq_len, dtype=model.dtype)
        out[lo:lo + chunk] = model.forward(x)[:, CASE]
    return out


def _proba_matrix(model: PredictorModel, x: np.ndarray, chunk: int = 256) -> np.ndarray:
    return np.concatenate([model.forward(x[lo:lo + chunk])[:, CASE] for lo in range(0, len(x), chunk)])


def ssl_objective(model: PredictorModel, x: np.ndarray, y: np.ndarray, x_aug: list[np.ndarray] | None = None,
                  mu: float = 0.0) -> Tensor:
    """``mean L(x, y) + mu * mean_j mean L(x_aug[j], y)``; augmented rows inherit ``y``."""
    loss = ops.softmax_xent(model.logits(Tensor(x)), y)
    if mu > 0 and x_aug:
        aug = [ops.softmax_xent(model.logits(Tensor(xa)), y) for xa in x_aug]
        total = aug[0]
        for t in aug[1:]:
            total = ops.add(total, t)
        loss = ops.add(loss, ops.mul(total, mu / len(aug)))
    return loss


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_auroc: float = float("-inf")

    def to_lines(self) -> list[str]:
        return [json.dumps(r, sort_keys=True) for r in self.rows]


def extra_pool_size(mu: float, n_labeled: int) -> int:
    return int(round(mu * n_labeled))


def train_predictor(model: PredictorModel, labeled: list[PatientRecord], val: list[PatientRecord],
                    table: EmbeddingTable, ssl: SslConfig = SslConfig(), cfg: TrainConfig = TrainConfig(),
                    gan=None, pool: list[PatientRecord] | None = None) -> History:
    """Train ``model`` in place with early stopping on validation AUROC.

    ``gan`` (a model or per-label mapping) is required for ``SSL_GAN``;
    ``pool`` (records beyond the labeled set) for ``RAND`` and ``FULL``.
    The best-scoring weights are restored at the end.
    """
    mode, mu = ssl.mode, ssl.mu
    n = len(labeled)
    if n == 0:
        raise ValueError("no labeled records")
    if mode is Mode.SSL_GAN and mu > 0 and gan is None:
        raise ValueError("SSL_GAN mode needs a trained generator")
    extra = extra_pool_size(mu, n) if mode in (Mode.RAND, Mode.FULL) else 0
    if mode in (Mode.RAND, Mode.FULL) and mu > 0:
        if pool is None:
            raise ValueError(f"{mode.value} mode needs a pool of additional records")
        if extra > len(pool):
            raise ValueError(f"mu={mu} asks for {extra} extra records but the pool holds {len(pool)}")

    dt = model.dtype
    train_records = list(labeled) + list(pool[:extra] if extra else [])
    x = embed_batch(train_records, table, cfg.seq_len, dtype=dt)
    y = np.array([r.label for r in train_records], dtype=np.int64)
    if mode is Mode.RAND and extra:
        y[n:] = rngs.stream(ssl.seed, "predictor", "rand-labels").integers(0, 2, size=extra)
    x_val = embed_batch(val, table, cfg.seq_len, dtype=dt)
    y_val = np.array([r.label for r in val], dtype=np.int64)

    use_aug = mode is Mode.SSL_GAN and mu > 0
    order_rng = rngs.stream(ssl.seed, "predictor", "order")
    aug_rng = rngs.stream(ssl.seed, "predictor", "augment")
    opt = OptimConfig(lr=cfg.lr, clip=cfg.clip)
    hist = History()
    best_state = model.params.state_dict()
    stale = 0
    aug: list[np.ndarray] | None = None

    x_src = x
    if use_aug:
        from .gan import generator_length, transition_augment
        t_gan = generator_length(gan)
        if t_gan != cfg.seq_len:
            if not ssl.snap:
                raise ValueError(f"generator length {t_gan} differs from predictor length {cfg.seq_len}; "
                                 "this needs snapped augmentation")
            x_src = embed_batch(train_records, table, t_gan, dtype=dt)

    for epoch in range(cfg.max_epochs):
        if use_aug and (aug is None or not ssl.fixed_once):
            aug = [transition_augment(gan, x_src, y, aug_rng, table if ssl.snap else None,
                                      length=cfg.seq_len if ssl.snap else None) for _ in range(ssl.a)]
        perm = order_rng.permutation(len(x))
        losses = []
        for lo in range(0, len(x), cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            model.params.zero_grad()
            loss = ssl_objective(model, x[idx], y[idx], [a_[idx] for a_ in aug] if use_aug else None, mu)
            if not np.isfinite(loss.item()):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}",
                                            {"epoch": epoch, "batch_start": lo, "params": model.params.state_dict()})
            backward(loss)
            clip_and_step(model.params, opt)
            losses.append(loss.item() * len(idx))
        p_val = _proba_matrix(model, x_val)
        val_auc = auroc(p_val, y_val)
        eps = 1e-7
        val_loss = float(-np.mean(np.log(np.clip(np.where(y_val == CASE, p_val, 1 - p_val), eps, 1.0))))
        hist.rows.append({"epoch": epoch, "split": "train", "loss": float(np.sum(losses) / len(x))})
        hist.rows.append({"epoch": epoch, "split": "val", "loss": val_loss,
                          "accuracy": accuracy(p_val, y_val), "auroc": val_auc})
        if val_auc > hist.best_val_auroc:
            hist.best_val_auroc = val_auc
            hist.best_epoch = epoch
            best_state = model.params.state_dict()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.params.load_state_dict(best_state)
    return hist


def evaluate(model: PredictorModel, records: list[PatientRecord], table: EmbeddingTable,
             seq_len: int = 150) -> dict:
    p = predict_proba(model, records, table, seq_len)
    y = np.array([r.label for r in records])
    return {"auroc": auroc(p, y), "accuracy": accuracy(p, y), "n": len(records)}
