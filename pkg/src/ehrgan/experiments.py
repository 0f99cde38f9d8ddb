"""End-to-end experiment drivers shared by the CLI sweep and the acceptance suite.

A *world* is everything one root seed fixes before any model sees a label:
the cohort, the code embedding, the labeled/unlabeled split of the training
patients, and a reserve of extra real records. All predictor runs on one
world start from the same initial weights and batch order, so mode
comparisons within a seed are paired.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, replace

import numpy as np

from . import rng as rngs
from .config import RunConfig
from .embedding import EmbeddingTable, train_embedding
from .gan import GanConfig, GanModel, generate_corpus, train_gan
from .metrics import FidelityReport, fidelity
from .predictor import Mode, SslConfig, evaluate, train_predictor
from .synth import CASE, CONTROL, Cohort, PatientRecord, generate_cohort

log = logging.getLogger(__name__)


@dataclass
class World:
    seed: int
    cohort: Cohort
    table: EmbeddingTable
    labeled: list[PatientRecord]
    unlabeled: list[PatientRecord]  # rest of the training split
    reserve: list[PatientRecord]  # extra real records beyond the training split
    val: list[PatientRecord]
    test: list[PatientRecord]

    @property
    def full_pool(self) -> list[PatientRecord]:
        """Held-off real records in a fixed order; prefixes are nested across mu."""
        return self.unlabeled + self.reserve


def split_labeled(records: list[PatientRecord], fraction: float, rng: np.random.Generator
                  ) -> tuple[list[PatientRecord], list[PatientRecord]]:
    """Per-class random split into a labeled part (``fraction``) and the rest."""
    labeled, rest = [], []
    for label in (CONTROL, CASE):
        group = [r for r in records if r.label == label]
        order = rng.permutation(len(group))
        k = int(round(fraction * len(group)))
        labeled.extend(group[i] for i in order[:k])
        rest.extend(group[i] for i in order[k:])
    lab_order = rng.permutation(len(labeled))
    rest_order = rng.permutation(len(rest))
    return [labeled[i] for i in lab_order], [rest[i] for i in rest_order]


def build_world(cfg: RunConfig, max_extra: float = 1.4) -> World:
    """Cohort, embedding and splits for one configuration.

    The reserve is sized so that ``max_extra * len(labeled)`` real records
    are available beyond the labeled set.
    """
    t0 = time.perf_counter()
    cohort, _ = generate_cohort(cfg.cohort)
    table = train_embedding(cohort, cfg.embedding)
    labeled, unlabeled = split_labeled(cohort.split("train"), cfg.ssl.labeled_fraction,
                                       rngs.stream(cfg.ssl.seed, "labeled-split"))
    need = max(0, math.ceil(max_extra * len(labeled)) - len(unlabeled))
    reserve: list[PatientRecord] = []
    if need:
        spec = cfg.cohort
        frac_case = spec.n_case / max(spec.n_case + spec.n_control, 1)
        # over-draw a little: records shorter than the minimum length are dropped
        n_total = int(math.ceil(need * 1.1)) + 10
        n_case = int(round(n_total * frac_case))
        extra, _ = generate_cohort(spec, prefix="R", n_case=n_case, n_control=n_total - n_case)
        order = rngs.stream(cfg.ssl.seed, "reserve-order").permutation(len(extra.records))
        reserve = [extra.records[i] for i in order]
    log.info("world seed=%d built in %.1fs", cfg.seed, time.perf_counter() - t0)
    return World(cfg.seed, cohort, table, labeled, unlabeled, reserve, cohort.split("val"), cohort.split("test"))


def train_class_gans(records: list[PatientRecord], table: EmbeddingTable, gan_cfg: GanConfig,
                     callback=None) -> dict[int, GanModel]:
    """One generator per label, each trained on that label's records only."""
    out = {}
    for label in sorted({r.label for r in records}):
        cfg = replace(gan_cfg, seed=rngs.child_seed(gan_cfg.seed, "class", label))
        group = [r for r in records if r.label == label]
        out[label], _ = train_gan(group, table, cfg, callback=callback)
    return out


def run_predictor(world: World, cfg: RunConfig, mode: Mode, mu: float, gans=None, tag: dict | None = None) -> dict:
    """Train one predictor on ``world`` and report test metrics."""
    ssl = replace(cfg.ssl, mode=mode, mu=mu)
    model = cfg.train.build(world.table.dim, cfg.ssl.seed)
    pool = None
    if mode is Mode.FULL:
        pool = world.full_pool
    elif mode is Mode.RAND:
        pool = world.unlabeled
    t0 = time.perf_counter()
    hist = train_predictor(model, world.labeled, world.val, world.table, ssl, cfg.train, gan=gans, pool=pool)
    test = evaluate(model, world.test, world.table, cfg.train.seq_len)
    row = {"seed": world.seed, "mode": mode.value, "mu": mu, "auroc": test["auroc"], "accuracy": test["accuracy"],
           "val_auroc": hist.best_val_auroc, "best_epoch": hist.best_epoch,
           "seconds": round(time.perf_counter() - t0, 1), **(tag or {})}
    log.info("run %s", row)
    return row


def fidelity_run(cfg: RunConfig, label: int = CASE) -> tuple[FidelityReport, dict]:
    """Train a GAN on one class of the training split and compare its corpus to that split.

    The reference corpus is the training records as the generator sees them:
    the most recent ``seq_len - 1`` events, since one row is reserved for END.
    """
    cohort, _ = generate_cohort(cfg.cohort)
    table = train_embedding(cohort, cfg.embedding)
    train = [r for r in cohort.split("train") if r.label == label]
    gan, hist = train_gan(train, table, cfg.gan)
    gen, rep = generate_corpus(gan, table, train, cohort.vocabulary, rngs.stream(cfg.gan.seed, "generate"),
                               n_per_source=cfg.eval.n_per_source)
    keep = cfg.gan.seq_len - 1
    reference = cohort.subset([PatientRecord(r.patient_id, r.label, r.events[-keep:]) for r in train], "reference")
    report = fidelity(reference, gen, cfg.eval.top_k_freq, cfg.eval.top_k_cooc)
    info = {"iterations": len(hist), "generated": rep.generated, "no_end_mark": rep.no_end_mark,
            "dropped_empty": rep.dropped_empty, "final": hist.rows[-1] if hist.rows else {}}
    return report, info


# ---------------------------------------------------------------------------
# the semi-supervised suite


@dataclass(frozen=True)
class SuitePlan:
    """Which runs to make on every seed."""

    rhos: tuple[float, ...] = (0.0, 0.1, 1.0)
    mu_grid: tuple[float, ...] = (0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4)
    mu: float = 0.6
    rho: float = 0.1
    full_grid: tuple[float, ...] = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4)
    rand: bool = True


def ssl_suite(cfg: RunConfig, seeds, plan: SuitePlan = SuitePlan(), progress=None) -> list[dict]:
    """Run the mode comparison, the rho sweep and the mu sweeps for every seed."""
    runs: list[dict] = []

    def emit(row):
        runs.append(row)
        if progress is not None:
            progress(row)

    for seed in seeds:
        scfg = cfg.with_seed(seed)
        world = build_world(scfg, max(plan.full_grid, default=0.0))
        emit(run_predictor(world, scfg, Mode.BASIC, 0.0, tag={"rho": None, "group": "BASIC"}))
        if plan.rand:
            emit(run_predictor(world, scfg, Mode.RAND, plan.mu, tag={"rho": None, "group": "RAND"}))
        for rho in plan.rhos:
            gans = train_class_gans(world.labeled, world.table, replace(scfg.gan, rho=rho))
            mus = plan.mu_grid if rho == plan.rho else (plan.mu,)
            for mu in mus:
                emit(run_predictor(world, scfg, Mode.SSL_GAN, mu, gans,
                                   tag={"rho": rho, "group": f"SSL rho={rho} mu={mu}"}))
        for mu in plan.full_grid:
            if mu == 0:
                continue
            emit(run_predictor(world, scfg, Mode.FULL, mu, tag={"rho": None, "group": f"FULL mu={mu}"}))
    return runs


def medians(runs: list[dict], key: str = "auroc") -> dict[str, float]:
    groups: dict[str, list[float]] = {}
    for r in runs:
        groups.setdefault(r["group"], []).append(r[key])
    return {g: float(np.median(v)) for g, v in groups.items()}
