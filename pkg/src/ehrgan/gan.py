"""Adversarial sequence generator with a latent-mixing (VCD) transition.

The generator is an encoder/decoder pair. A real sequence matrix ``x`` is
encoded to ``h``; a random binary mask swaps a subset of ``h`` for Gaussian
noise and the decoder turns the mixed code into a neighbour ``x_tilde`` of
``x``. The generator minimises

    rho * (-log D(x_tilde)) + (1 - rho) * ||decode(h) - x||^2

and the discriminator is the CNN trunk of the risk model with a single
sigmoid output.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import rng as rngs
from .embedding import PAD, EmbeddingTable, decode_ids, embed_batch, embed_ids, nearest_codes
from .nets import ConvTrunk, glorot_init, he_init, weight_names
from .synth import Cohort, PatientRecord, Vocabulary
from .tensor import OptimConfig, ParamSet, Tensor, backward, clip_and_step, no_grad, ops
from .tensor.checkpoint import load_tensors, save_tensors

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GanConfig:
    rho: float = 0.1
    k: int = 5
    z_dim: int = 100
    mask_prob: float = 0.5
    seq_len: int = 150
    label_smoothing: float = 0.9
    l2: float = 1e-4
    batch_size: int = 32
    max_iterations: int = 2000
    widths: tuple[int, ...] = (3, 4, 5)
    maps: int = 100
    encoder: str = "strided"  # "strided" | "trunk"
    enc_maps: int = 100
    dec_maps: int = 100
    dec_kernel: int = 3
    fc_hidden: int = 256
    batch_norm: bool = True
    bn_momentum: float = 0.1
    lr: float = 0.001
    clip: float = 5.0
    converge_tol: float = 0.02
    converge_patience: int = 100
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.z_dim <= 0:
            raise ValueError(f"z_dim must be positive, got {self.z_dim}")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError(f"mask probability must lie in [0, 1], got {self.mask_prob}")
        if not 0.0 < self.label_smoothing <= 1.0:
            raise ValueError(f"label smoothing target must lie in (0, 1], got {self.label_smoothing}")
        if self.encoder not in ("strided", "trunk"):
            raise ValueError(f"unknown encoder type {self.encoder!r}")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2")
        if self.seq_len < 8:
            raise ValueError("generator sequence length must be >= 8")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GanConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


class DivergenceError(FloatingPointError):
    """Non-finite loss during GAN training; carries the last finite state."""

    def __init__(self, message: str, last_state: dict[str, np.ndarray], iteration: int):
        super().__init__(message)
        self.last_state = last_state
        self.iteration = iteration


def mix_latent(h, z, m):
    """``m * z + (1 - m) * h`` elementwise; ``m`` must be binary.

    Works on arrays, or on a :class:`Tensor` ``h`` with array ``z``/``m``.
    """
    m = np.asarray(m)
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask entries must be 0 or 1")
    z = np.asarray(z)
    if isinstance(h, Tensor):
        if h.shape != z.shape or h.shape != m.shape:
            raise ops.ShapeError(f"latent {h.shape}, noise {z.shape} and mask {m.shape} must match")
        m = m.astype(h.dtype)
        return ops.add(ops.mul(h, 1.0 - m), m * z.astype(h.dtype))
    h = np.asarray(h)
    if h.shape != z.shape or h.shape != m.shape:
        raise ValueError(f"latent {h.shape}, noise {z.shape} and mask {m.shape} must match")
    return m * z + (1 - m) * h


def _decoder_base_len(seq_len: int, kernel: int) -> int:
    # two stride-2 transposed convs: L -> 2L - 2 + k -> 4L - 6 + 3k
    return max(1, -(-(seq_len + 6 - 3 * kernel) // 4))


class Generator:
    """Encoder + decoder. The decoder ends in ``tanh`` scaled to the embedding range."""

    def __init__(self, cfg: GanConfig, emb_dim: int, scale: np.ndarray, rng: np.random.Generator):
        self.cfg = cfg
        self.emb_dim = emb_dim
        dt = np.dtype(cfg.dtype)
        self.scale = np.asarray(scale, dtype=dt)
        p = self.params = ParamSet()
        d = cfg.z_dim
        if cfg.encoder == "strided":
            t1 = (cfg.seq_len - 3) // 2 + 1
            t2 = (t1 - 3) // 2 + 1
            p.add("enc.c1.w", he_init(rng, (3, emb_dim, cfg.enc_maps), 3 * emb_dim, dt))
            p.add("enc.c1.b", np.zeros(cfg.enc_maps, dt))
            p.add("enc.c2.w", he_init(rng, (3, cfg.enc_maps, cfg.enc_maps), 3 * cfg.enc_maps, dt))
            p.add("enc.c2.b", np.zeros(cfg.enc_maps, dt))
            flat = t2 * cfg.enc_maps
            self.trunk = None
        else:
            self.trunk = ConvTrunk(p, "enc.trunk", emb_dim, cfg.widths, cfg.maps, rng, dt)
            flat = self.trunk.out_dim
        p.add("enc.fc.w", glorot_init(rng, (flat, d), flat, d, dt))
        p.add("enc.fc.b", np.zeros(d, dt))

        self.base_len = _decoder_base_len(cfg.seq_len, cfg.dec_kernel)
        c0 = cfg.dec_maps
        p.add("dec.fc1.w", he_init(rng, (d, cfg.fc_hidden), d, dt))
        p.add("dec.fc1.b", np.zeros(cfg.fc_hidden, dt))
        p.add("dec.fc2.w", he_init(rng, (cfg.fc_hidden, self.base_len * c0), cfg.fc_hidden, dt))
        p.add("dec.fc2.b", np.zeros(self.base_len * c0, dt))
        kw = cfg.dec_kernel
        p.add("dec.up1.w", he_init(rng, (kw, c0, c0), kw * c0, dt))
        p.add("dec.up1.b", np.zeros(c0, dt))
        p.add("dec.up2.w", he_init(rng, (kw, c0, c0), kw * c0, dt))
        p.add("dec.up2.b", np.zeros(c0, dt))
        p.add("dec.out.w", glorot_init(rng, (1, c0, emb_dim), c0, emb_dim, dt))
        p.add("dec.out.b", np.zeros(emb_dim, dt))
        self.bn = []
        if cfg.batch_norm:
            for i in range(3):
                p.add(f"dec.bn{i}.g", np.ones(c0, dt))
                p.add(f"dec.bn{i}.b", np.zeros(c0, dt))
                self.bn.append(ops.BatchNormState.create(c0, cfg.bn_momentum, dtype=dt))

    def encode(self, x: Tensor) -> Tensor:
        p = self.params
        if x.shape[1:] != (self.cfg.seq_len, self.emb_dim):
            raise ops.ShapeError(f"generator input must be ({self.cfg.seq_len}, {self.emb_dim}), got {x.shape[1:]}")
        if self.trunk is None:
            a = ops.relu(ops.conv1d(x, p["enc.c1.w"], p["enc.c1.b"], stride=2))
            a = ops.relu(ops.conv1d(a, p["enc.c2.w"], p["enc.c2.b"], stride=2))
            a = ops.reshape(a, (a.shape[0], -1))
        else:
            a = self.trunk(x)
        return ops.dense(a, p["enc.fc.w"], p["enc.fc.b"])

    def _norm_relu(self, a: Tensor, i: int, training: bool) -> Tensor:
        if self.bn:
            p = self.params
            a = ops.batch_norm(a, p[f"dec.bn{i}.g"], p[f"dec.bn{i}.b"], self.bn[i], training)
        return ops.relu(a)

    def decode(self, h: Tensor, training: bool = False) -> Tensor:
        p = self.params
        bsz = h.shape[0]
        a = ops.relu(ops.dense(h, p["dec.fc1.w"], p["dec.fc1.b"]))
        a = ops.dense(a, p["dec.fc2.w"], p["dec.fc2.b"])
        a = ops.reshape(a, (bsz, self.base_len, self.cfg.dec_maps))
        a = self._norm_relu(a, 0, training)
        a = self._norm_relu(ops.deconv1d(a, p["dec.up1.w"], p["dec.up1.b"], stride=2), 1, training)
        a = self._norm_relu(ops.deconv1d(a, p["dec.up2.w"], p["dec.up2.b"], stride=2), 2, training)
        a = ops.crop_time(a, self.cfg.seq_len)
        a = ops.tanh(ops.conv1d(a, p["dec.out.w"], p["dec.out.b"]))
        return ops.mul(a, self.scale)

    def buffers(self) -> dict[str, np.ndarray]:
        out = {"scale": self.scale}
        for i, st in enumerate(self.bn):
            out[f"bn{i}.mean"] = st.mean
            out[f"bn{i}.var"] = st.var
        return out

    def load_buffers(self, buf: dict[str, np.ndarray]) -> None:
        dt = np.dtype(self.cfg.dtype)
        self.scale = buf["scale"].astype(dt)
        for i, st in enumerate(self.bn):
            st.mean = buf[f"bn{i}.mean"].astype(dt)
            st.var = buf[f"bn{i}.var"].astype(dt)


class Discriminator:
    def __init__(self, cfg: GanConfig, emb_dim: int, rng: np.random.Generator):
        dt = np.dtype(cfg.dtype)
        self.params = ParamSet()
        self.trunk = ConvTrunk(self.params, "trunk", emb_dim, cfg.widths, cfg.maps, rng, dt)
        self.params.add("head.w", glorot_init(rng, (self.trunk.out_dim, 1), self.trunk.out_dim, 1, dt))
        self.params.add("head.b", np.zeros(1, dt))

    def logits(self, x: Tensor) -> Tensor:
        h = self.trunk(x)
        out = ops.dense(h, self.params["head.w"], self.params["head.b"])
        return ops.reshape(out, (x.shape[0],))

    def prob(self, x) -> np.ndarray:
        with no_grad():
            return ops._stable_sigmoid(self.logits(x if isinstance(x, Tensor) else Tensor(x)).data)

    def l2_penalty(self) -> Tensor | None:
        terms = [ops.sum_squares(self.params[n]) for n in weight_names(self.params)]
        if not terms:
            return None
        out = terms[0]
        for t in terms[1:]:
            out = ops.add(out, t)
        return out


@dataclass
class GanModel:
    cfg: GanConfig
    generator: Generator
    discriminator: Discriminator
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, cfg: GanConfig, table: EmbeddingTable) -> "GanModel":
        rng = rngs.stream(cfg.seed, "gan", "init")
        gen = Generator(cfg, table.dim, table.max_abs(), rng)
        disc = Discriminator(cfg, table.dim, rng)
        return cls(cfg, gen, disc)

    def save(self, path, extra_meta: dict | None = None) -> None:
        tensors = {f"G.{n}": p.data for n, p in self.generator.params.items()}
        tensors.update({f"D.{n}": p.data for n, p in self.discriminator.params.items()})
        tensors.update({f"B.{n}": v for n, v in self.generator.buffers().items()})
        meta = {"kind": "gan", "gan_config": self.cfg.to_dict(), "emb_dim": self.generator.emb_dim,
                **self.meta, **(extra_meta or {})}
        save_tensors(path, tensors, meta)

    @classmethod
    def load(cls, path) -> "GanModel":
        tensors, meta = load_tensors(path)
        if meta.get("kind") != "gan":
            raise ValueError(f"{path}: not a GAN checkpoint (kind={meta.get('kind')!r})")
        cfg = GanConfig.from_dict(meta["gan_config"])
        emb_dim = int(meta["emb_dim"])
        rng = np.random.default_rng(0)
        gen = Generator(cfg, emb_dim, np.ones(emb_dim), rng)
        disc = Discriminator(cfg, emb_dim, rng)
        gen.params.load_state_dict({n[2:]: v for n, v in tensors.items() if n.startswith("G.")})
        disc.params.load_state_dict({n[2:]: v for n, v in tensors.items() if n.startswith("D.")})
        gen.load_buffers({n[2:]: v for n, v in tensors.items() if n.startswith("B.")})
        extra = {k: v for k, v in meta.items() if k not in ("kind", "gan_config", "emb_dim")}
        return cls(cfg, gen, disc, extra)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"G.{n}": v for n, v in self.generator.params.state_dict().items()}
        out.update({f"D.{n}": v for n, v in self.discriminator.params.state_dict().items()})
        out.update({f"B.{n}": np.array(v, copy=True) for n, v in self.generator.buffers().items()})
        return out


# ---------------------------------------------------------------------------
# objectives


def draw_noise(rng: np.random.Generator, n: int, cfg: GanConfig, dtype) -> tuple[np.ndarray, np.ndarray]:
    z = rng.standard_normal((n, cfg.z_dim)).astype(dtype)
    m = (rng.random((n, cfg.z_dim)) < cfg.mask_prob).astype(dtype)
    return z, m


def generator_objective(fake_logits: Tensor | None, recon: Tensor | None, x, rho: float) -> Tensor:
    """Batch mean of ``rho * -log D(x_tilde) + (1 - rho) * ||x_bar - x||^2``.

    ``-log D`` is evaluated as ``softplus(-logit)``. Terms with zero weight
    may be passed as ``None``.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    parts = []
    if rho > 0:
        parts.append(ops.mul(ops.mean(ops.softplus(ops.mul(fake_logits, -1.0))), rho))
    if rho < 1:
        err = ops.sub(recon, x)
        parts.append(ops.mul(ops.mean(ops.row_sq_norm(err)), 1.0 - rho))
    return parts[0] if len(parts) == 1 else ops.add(parts[0], parts[1])


def generator_loss(x: np.ndarray, gan: GanModel, rng: np.random.Generator, training: bool = True,
                   mask: np.ndarray | None = None) -> tuple[Tensor, dict]:
    cfg = gan.cfg
    gen = gan.generator
    xt = Tensor(x)
    h = gen.encode(xt)
    z, m = draw_noise(rng, x.shape[0], cfg, x.dtype)
    if mask is not None:
        m = np.broadcast_to(mask, m.shape).astype(x.dtype)
    recon = gen.decode(h, training) if cfg.rho < 1 else None
    fake_logits = None
    if cfg.rho > 0:
        fake = gen.decode(mix_latent(h, z, m), training)
        fake_logits = gan.discriminator.logits(fake)
    loss = generator_objective(fake_logits, recon, xt, cfg.rho)
    info = {}
    if fake_logits is not None:
        info["mean_d_fake_g"] = float(ops._stable_sigmoid(fake_logits.data).mean())
    return loss, info


def discriminator_objective(real_logits: Tensor, fake_logits: Tensor, smoothing: float,
                            l2_term: Tensor | None, l2: float) -> Tensor:
    """``-mean[s log D(real) + (1-s) log(1-D(real))] - mean log(1 - D(fake)) + l2 * ||W||^2``."""
    loss = ops.add(ops.bce_with_logits(real_logits, smoothing), ops.bce_with_logits(fake_logits, 0.0))
    if l2 > 0 and l2_term is not None:
        loss = ops.add(loss, ops.mul(l2_term, l2))
    return loss


def discriminator_loss(real: np.ndarray, fake: np.ndarray, disc: Discriminator, smoothing: float,
                       l2: float) -> tuple[Tensor, float, float]:
    if real.shape[0] == 0 or fake.shape[0] == 0:
        raise ValueError("discriminator loss needs non-empty real and fake batches")
    rl = disc.logits(Tensor(real))
    fl = disc.logits(Tensor(fake))
    loss = discriminator_objective(rl, fl, smoothing, disc.l2_penalty() if l2 > 0 else None, l2)
    return loss, float(ops._stable_sigmoid(rl.data).mean()), float(ops._stable_sigmoid(fl.data).mean())


# ---------------------------------------------------------------------------
# sampling


def sample_transition(gan: GanModel, x: np.ndarray, rng: np.random.Generator, mask: np.ndarray | None = None,
                      training: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``x_tilde ~ p(. | x)``; returns ``(x_tilde, x_bar)``.

    ``x`` is one ``(T_g, M)`` matrix or a batch ``(B, T_g, M)``. ``mask``
    overrides the Bernoulli mask (broadcast to ``(B, z_dim)``).
    """
    cfg = gan.cfg
    single = x.ndim == 2
    xb = x[None] if single else x
    dt = np.dtype(cfg.dtype)
    xb = np.asarray(xb, dtype=dt)
    if xb.shape[1:] != (cfg.seq_len, gan.generator.emb_dim):
        raise ops.ShapeError(f"expected ({cfg.seq_len}, {gan.generator.emb_dim}) input, got {xb.shape[1:]}")
    z, m = draw_noise(rng, xb.shape[0], cfg, dt)
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=dt), m.shape)
    with no_grad():
        h = gan.generator.encode(Tensor(xb))
        x_bar = gan.generator.decode(h, training).data
        x_tilde = gan.generator.decode(mix_latent(h, z, m), training).data
    if single:
        return x_tilde[0], x_bar[0]
    return x_tilde, x_bar


# ---------------------------------------------------------------------------
# training


@dataclass
class GanHistory:
    rows: list[dict] = field(default_factory=list)
    converged_at: int | None = None

    def append(self, **row) -> None:
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def to_lines(self) -> list[str]:
        import json
        return [json.dumps(r, sort_keys=True) for r in self.rows]


def train_gan(records: list[PatientRecord], table: EmbeddingTable, cfg: GanConfig,
              callback: Callable[[int, dict], None] | None = None,
              init: GanModel | None = None) -> tuple[GanModel, GanHistory]:
    """Alternate ``k`` generator steps with one discriminator step.

    Each generator step draws a fresh data minibatch, noise and masks; the
    discriminator step draws a fresh real batch and fresh fakes.
    """
    if not records:
        raise ValueError("train_gan needs at least one record")
    dt = np.dtype(cfg.dtype)
    data = embed_batch(records, table, cfg.seq_len, dtype=dt)
    gan = init or GanModel.create(cfg, table)
    gen, disc = gan.generator, gan.discriminator
    g_opt = OptimConfig(lr=cfg.lr, clip=cfg.clip)
    d_opt = OptimConfig(lr=cfg.lr, clip=cfg.clip)
    rng = rngs.stream(cfg.seed, "gan", "train")
    hist = GanHistory()
    n = len(data)
    bs = min(cfg.batch_size, n) if n >= 2 else 2
    streak = 0
    last_good = gan.state()

    def batch() -> np.ndarray:
        return data[rng.integers(0, n, size=bs)]

    for it in range(cfg.max_iterations):
        g_losses = []
        for _ in range(cfg.k):
            gen.params.zero_grad()
            with disc.params.frozen():
                loss, _ = generator_loss(batch(), gan, rng, training=True)
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"non-finite generator loss at iteration {it}", last_good, it)
            backward(loss)
            clip_and_step(gen.params, g_opt)
            g_losses.append(loss.item())

        real = batch()
        with no_grad():
            src = batch()
            h = gen.encode(Tensor(src))
            z, m = draw_noise(rng, bs, cfg, dt)
            fake = gen.decode(mix_latent(h, z, m), training=True).data
        disc.params.zero_grad()
        d_loss, d_real, d_fake = discriminator_loss(real, fake, disc, cfg.label_smoothing, cfg.l2)
        if not np.isfinite(d_loss.item()):
            raise DivergenceError(f"non-finite discriminator loss at iteration {it}", last_good, it)
        backward(d_loss)
        clip_and_step(disc.params, d_opt)

        row = {"iteration": it, "loss_g": float(np.mean(g_losses)), "loss_d": d_loss.item(),
               "mean_d_real": d_real, "mean_d_fake": d_fake}
        hist.append(**row)
        if callback is not None:
            callback(it, row)
        last_good = gan.state()

        tol = cfg.converge_tol
        if abs(d_real - 0.5) < tol and abs(d_fake - 0.5) < tol:
            streak += 1
            if streak >= cfg.converge_patience:
                hist.converged_at = it
                log.info("GAN converged at iteration %d", it)
                break
        else:
            streak = 0
    gan.meta["iterations"] = len(hist)
    return gan, hist


# ---------------------------------------------------------------------------
# corpus generation


@dataclass
class GenerationReport:
    sources: int = 0
    generated: int = 0
    dropped_empty: int = 0
    no_end_mark: int = 0


def decode_matrix(mat: np.ndarray, table: EmbeddingTable) -> tuple[list[int], bool]:
    ids, _ = nearest_codes(mat, table)
    return decode_ids(ids, table.end_id)


def _inherit_windows(source: PatientRecord, n: int, seq_len: int) -> list[int]:
    src = [w for w, _ in source.events[-(seq_len - 1):]]
    out = src[:n]
    last = src[-1] if src else 0
    while len(out) < n:
        last += 1
        out.append(last)
    return out


def generator_length(gans) -> int:
    """Sequence length a model (or every model of a per-label mapping) expects."""
    models = [gans] if isinstance(gans, GanModel) else list(dict(gans).values())
    lengths = {m.cfg.seq_len for m in models}
    if len(lengths) != 1:
        raise ValueError(f"generators disagree on sequence length: {sorted(lengths)}")
    return lengths.pop()


def generate_corpus(gan: GanModel, table: EmbeddingTable, sources: list[PatientRecord], vocabulary: Vocabulary,
                    rng: np.random.Generator, n_per_source: int = 1, mask: np.ndarray | None = None,
                    chunk: int = 64, name: str = "generated") -> tuple[Cohort, GenerationReport]:
    """Sample a transition per source record and decode it to codes.

    Rows decode to their cosine-nearest code; the sequence stops at the first
    END. Labels are inherited from the source record.
    """
    cfg = gan.cfg
    rep = GenerationReport(sources=len(sources))
    out: list[PatientRecord] = []
    for rep_i in range(n_per_source):
        for lo in range(0, len(sources), chunk):
            part = sources[lo:lo + chunk]
            x = embed_batch(part, table, cfg.seq_len, dtype=np.dtype(cfg.dtype))
            x_tilde, _ = sample_transition(gan, x, rng, mask=mask)
            ids, _ = nearest_codes(x_tilde, table)
            for src, row_ids in zip(part, ids):
                codes, found = decode_ids(row_ids, table.end_id)
                if not found:
                    rep.no_end_mark += 1
                if len(codes) < 1:
                    rep.dropped_empty += 1
                    continue
                windows = _inherit_windows(src, len(codes), cfg.seq_len)
                pid = f"G{rep_i}-{src.patient_id}"
                out.append(PatientRecord(pid, src.label, list(zip(windows, codes))))
    rep.generated = len(out)
    return Cohort(name, out, vocabulary, {}, {"source": "gan"}), rep


def snap_to_codes(x_tilde: np.ndarray, table: EmbeddingTable, length: int | None = None) -> np.ndarray:
    """Decode generated matrices to codes and embed them again.

    Each row snaps to its nearest code, the sequence is cut at the first END
    and rebuilt as codes + END + zero padding, ``length`` rows long (default:
    the input length). Sequences that do not fit keep their most recent codes.
    """
    bsz, t_in, _ = x_tilde.shape
    t = t_in if length is None else length
    ids, _ = nearest_codes(x_tilde, table)
    out = np.full((bsz, t), PAD, dtype=np.int64)
    for i in range(bsz):
        codes, _ = decode_ids(ids[i], table.end_id)
        codes = codes[max(0, len(codes) - (t - 1)):]
        out[i, :len(codes)] = codes
        out[i, len(codes)] = table.end_id
    return embed_ids(out, table, dtype=x_tilde.dtype)


def transition_augment(gans, x: np.ndarray, labels: np.ndarray, rng: np.random.Generator,
                       table: EmbeddingTable | None = None, chunk: int = 128,
                       length: int | None = None) -> np.ndarray:
    """One transition sample per row of ``x``.

    ``gans`` is a single model or a ``{label: model}`` mapping, in which case
    each row goes through the model of its own class. With a ``table`` the
    samples are snapped to codes and re-embedded at ``length`` rows
    (default: the generator length).
    """
    if table is None and length is not None and length != x.shape[1]:
        raise ValueError("changing the sample length requires snapping to codes (pass a table)")
    t_out = x.shape[1] if length is None else length
    out = np.empty((x.shape[0], t_out, x.shape[2]), dtype=x.dtype)
    if isinstance(gans, GanModel):
        groups = {None: np.arange(len(x))}
        models = {None: gans}
    else:
        models = dict(gans)
        groups = {}
        for lab in np.unique(labels):
            if int(lab) not in models:
                raise KeyError(f"no generator for label {int(lab)}")
            groups[int(lab)] = np.flatnonzero(labels == lab)
    for key in sorted(groups, key=lambda k: -1 if k is None else k):
        idx = groups[key]
        for lo in range(0, len(idx), chunk):
            part = idx[lo:lo + chunk]
            x_tilde, _ = sample_transition(models[key], x[part], rng)
            if table is not None:
                x_tilde = snap_to_codes(x_tilde, table, t_out)
            out[part] = x_tilde
    return out
