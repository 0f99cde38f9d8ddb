"""Acceptance suite.

Every test carries an ``acceptance`` marker with its criterion number; the
session summary prints one PASS/FAIL line per criterion (see conftest.py).
Criteria 5 to 8 train real models at the ``desk`` profile and take most of
the wall-clock time; they are additionally marked ``slow``.

Set ``EHRGAN_ACCEPTANCE_LOG=/some/dir`` to keep the raw per-seed runs as JSON.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import replace

import numpy as np
import pytest

from ehrgan.config import RunConfig
from ehrgan.embedding import EmbeddingConfig, EmbeddingTable, embed_batch, load_embedding, save_embedding, train_embedding
from ehrgan.experiments import SuitePlan, fidelity_run, medians, ssl_suite
from ehrgan.gan import (
    GanConfig, GanModel, discriminator_loss, generate_corpus, generator_loss, sample_transition, train_gan,
)
from ehrgan.metrics import auroc
from ehrgan.predictor import Mode, PredictorModel, SslConfig, TrainConfig, evaluate, ssl_objective, train_predictor
from ehrgan.rng import stream
from ehrgan.synth import CASE, CohortSpec, generate_cohort, load_corpus, save_corpus
from ehrgan.tensor import Tensor, ops
from ehrgan.tensor.gradcheck import check_gradients

SEEDS_20 = range(20)
REL_TOL = 1e-4


def _log(name: str, payload) -> None:
    root = os.environ.get("EHRGAN_ACCEPTANCE_LOG")
    if root:
        os.makedirs(root, exist_ok=True)
        with open(os.path.join(root, f"{name}.json"), "w") as fh:
            json.dump(payload, fh, indent=1)


# ===========================================================================
# 1. gradients


def away_from_zero(rng, shape, gap=0.05):
    """Normal draws nudged off the ReLU kink so a 1e-5 step never crosses it."""
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap, x)


def distinct_max(rng, shape, gap=0.05):
    """Values whose per-column time maximum leads the runner-up by at least ``gap``."""
    x = rng.normal(size=shape)
    top = np.argmax(x, axis=1)
    b, _, c = np.indices((shape[0], 1, shape[2]))
    x[b, top[:, None, :], c] += gap
    return x


def elementwise(rng):
    a = Tensor(rng.normal(size=(3, 4)))
    b = Tensor(rng.normal(size=(4,)))
    c = Tensor(rng.normal(size=(3, 1)))
    v = rng.normal(size=(3, 4))

    def f():
        return ops.total(ops.mul(ops.sub(ops.add(a, b), ops.mul(a, c)), v))
    return f, {"a": a, "b": b, "c": c}


def shape_ops(rng):
    x = Tensor(rng.normal(size=(2, 5, 3)))
    y = Tensor(rng.normal(size=(2, 6, 2)))
    length = int(rng.integers(1, 5))
    v = rng.normal(size=(2, length, 5))

    def f():
        joined = ops.concat([ops.crop_time(x, length), ops.crop_time(y, length)], axis=-1)
        return ops.total(ops.mul(ops.reshape(ops.reshape(joined, (2, -1)), (2, length, 5)), v))
    return f, {"x": x, "y": y}


def reductions(rng):
    x = Tensor(rng.normal(size=(3, 2, 4)))
    return (lambda: ops.add(ops.add(ops.mean(x), ops.sum_squares(x)), ops.mean(ops.row_sq_norm(x)))), {"x": x}


def activations(rng):
    x = Tensor(away_from_zero(rng, (4, 5)))
    v = rng.normal(size=(4, 5))

    def f():
        return ops.total(ops.mul(ops.add(ops.add(ops.relu(x), ops.tanh(x)), ops.add(ops.sigmoid(x), ops.softplus(x))), v))
    return f, {"x": x}


def dense(rng):
    x = Tensor(rng.normal(size=(4, 3)))
    w = Tensor(rng.normal(size=(3, 2)))
    b = Tensor(rng.normal(size=2))
    v = rng.normal(size=(4, 2))
    return (lambda: ops.total(ops.mul(ops.dense(x, w, b), v))), {"x": x, "w": w, "b": b}


def conv(rng):
    stride = int(rng.integers(1, 3))
    width = int(rng.integers(1, 4))
    x = Tensor(rng.normal(size=(2, width + int(rng.integers(2, 6)), 3)))
    w = Tensor(rng.normal(size=(width, 3, 2)))
    b = Tensor(rng.normal(size=2))
    v = rng.normal(size=ops.conv1d(x, w, b, stride).shape)
    return (lambda: ops.total(ops.mul(ops.conv1d(x, w, b, stride), v))), {"x": x, "w": w, "b": b}


def deconv(rng):
    stride = int(rng.integers(1, 3))
    x = Tensor(rng.normal(size=(2, int(rng.integers(2, 5)), 3)))
    w = Tensor(rng.normal(size=(int(rng.integers(1, 4)), 2, 3)))
    b = Tensor(rng.normal(size=2))
    v = rng.normal(size=ops.deconv1d(x, w, b, stride).shape)
    return (lambda: ops.total(ops.mul(ops.deconv1d(x, w, b, stride), v))), {"x": x, "w": w, "b": b}


def max_pool(rng):
    x = Tensor(distinct_max(rng, (3, 6, 4)))
    v = rng.normal(size=(3, 4))
    return (lambda: ops.total(ops.mul(ops.max_over_time(x)[0], v))), {"x": x}


def softmax_xent(rng):
    x = Tensor(rng.normal(size=(5, 3)))
    y = rng.integers(0, 3, size=5)
    return (lambda: ops.softmax_xent(x, y)), {"x": x}


def binary_losses(rng):
    x = Tensor(rng.normal(size=(6,)))
    t = rng.uniform(size=6)
    return (lambda: ops.add(ops.bce_with_logits(x, t), ops.binary_xent(ops.sigmoid(x), t))), {"x": x}


def batch_norm(rng):
    x = Tensor(rng.normal(size=(4, 3, 2)))
    g = Tensor(rng.normal(size=2))
    b = Tensor(rng.normal(size=2))
    v = rng.normal(size=(4, 3, 2))
    state = ops.BatchNormState.create(2)
    state.mean[:] = rng.normal(size=2)
    state.var[:] = rng.uniform(0.5, 2.0, size=2)
    training = bool(rng.integers(0, 2))
    return (lambda: ops.total(ops.mul(ops.batch_norm(x, g, b, state, training), v))), {"x": x, "g": g, "b": b}


LAYERS = [elementwise, shape_ops, reductions, activations, dense, conv, deconv, max_pool, softmax_xent,
          binary_losses, batch_norm]


def random_table(rng, vocab=12, dim=4):
    return EmbeddingTable(rng.normal(size=(vocab + 1, dim)))


def random_biases(params, rng):
    """Freshly built layers have zero biases, which parks some pre-activations exactly on a ReLU kink
    (for instance upsampled positions that no input reaches). Random biases move them off it."""
    for name, p in params.items():
        if name.endswith(".b"):
            p.data[:] = rng.normal(scale=0.5, size=p.data.shape)


def micro_gan(seed, rng, **kw):
    cfg = GanConfig(seq_len=8, z_dim=4, widths=(2, 3), maps=3, enc_maps=4, dec_maps=4, fc_hidden=6, batch_size=4,
                    encoder="trunk" if seed % 2 else "strided", batch_norm=bool(rng.integers(0, 2)),
                    rho=float(rng.uniform(0.05, 0.95)), dtype="float64", seed=seed, **kw)
    table = random_table(rng)
    gan = GanModel.create(cfg, table)
    random_biases(gan.generator.params, rng)
    random_biases(gan.discriminator.params, rng)
    return gan, table


@pytest.mark.acceptance(1, "gradients match central differences (every layer, generator and SSL objectives)")
class TestGradients:
    budget = {"start": None}

    @pytest.fixture(autouse=True)
    def _clock(self):
        if self.budget["start"] is None:
            self.budget["start"] = time.perf_counter()
        yield

    @pytest.mark.parametrize("seed", SEEDS_20)
    def test_layers(self, seed):
        for build in LAYERS:
            rng = np.random.default_rng([seed, LAYERS.index(build)])
            fn, tensors = build(rng)
            errors = check_gradients(fn, tensors)
            assert max(errors.values()) < REL_TOL, (build.__name__, errors)

    @pytest.mark.parametrize("seed", SEEDS_20)
    def test_generator_objective(self, seed):
        rng = np.random.default_rng([seed, 100])
        gan, table = micro_gan(seed, rng)
        x = rng.normal(size=(3, 8, table.dim))
        params = dict(gan.generator.params.items())

        def loss():
            return generator_loss(x, gan, stream(seed, "fd"), training=gan.cfg.batch_norm)[0]

        # a small step keeps the ReLU and max-over-time switches out of reach
        with gan.discriminator.params.frozen():
            errors = check_gradients(loss, params, h=1e-6, max_coords=6, rng=rng)
        assert max(errors.values()) < REL_TOL, errors

    @pytest.mark.parametrize("seed", SEEDS_20)
    def test_discriminator_objective(self, seed):
        rng = np.random.default_rng([seed, 200])
        gan, table = micro_gan(seed, rng)
        real, fake = rng.normal(size=(3, 8, table.dim)), rng.normal(size=(3, 8, table.dim))
        disc = gan.discriminator

        def loss():
            return discriminator_loss(real, fake, disc, 0.9, 1e-3)[0]

        errors = check_gradients(loss, dict(disc.params.items()), h=1e-6, max_coords=6, rng=rng)
        assert max(errors.values()) < REL_TOL, errors

    @pytest.mark.parametrize("seed", SEEDS_20)
    def test_ssl_objective(self, seed):
        rng = np.random.default_rng([seed, 300])
        model = PredictorModel(4, widths=(2, 3), maps=3, seed=seed, dtype="float64")
        random_biases(model.params, rng)
        x, xa, xb = (rng.normal(size=(4, 7, 4)) for _ in range(3))
        y = rng.integers(0, 2, size=4)
        mu = float(rng.uniform(0.1, 1.4))
        errors = check_gradients(lambda: ssl_objective(model, x, y, [xa, xb], mu), dict(model.params.items()),
                                 h=1e-6, max_coords=8, rng=rng)
        assert max(errors.values()) < REL_TOL, errors

    def test_runtime_budget(self, record_property):
        spent = time.perf_counter() - self.budget["start"]
        record_property("measured", f"gradient checks took {spent:.1f}s")
        assert spent < 60.0


# ===========================================================================
# 2. AUROC oracle


def pair_count_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


MONOTONE = [np.exp, np.arctan, lambda v: 5.0 * v - 2.0, lambda v: v ** 3 + v]


@pytest.mark.acceptance(2, "AUROC equals the pair-counting oracle and is invariant under increasing maps")
def test_auroc_oracle(record_property):
    rng = np.random.default_rng(2024)
    tied = 0
    for _ in range(200):
        n = int(rng.integers(2, 80))
        y = rng.integers(0, 2, size=n)
        y[:2] = (0, 1)
        s = rng.integers(0, int(rng.integers(2, 10)), size=n) / 3.0
        tied += len(np.unique(s)) < n
        exact = pair_count_auroc(s, y)
        assert auroc(s, y) == exact
        for f in MONOTONE:
            assert auroc(f(s), y) == exact
    record_property("measured", f"{tied}/200 instances contain ties")
    assert tied > 150


# ===========================================================================
# 3. adjoint identity


@pytest.mark.acceptance(3, "conv1d and deconv1d are adjoint")
def test_adjoint_identity(record_property):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(50):
        width, stride = int(rng.integers(1, 6)), int(rng.integers(1, 4))
        t_out = int(rng.integers(1, 9))
        t_in = (t_out - 1) * stride + width
        c, f, bsz = (int(v) for v in rng.integers(1, 6, size=3))
        w = rng.normal(size=(width, c, f))
        u = rng.normal(size=(bsz, t_in, c))
        v = rng.normal(size=(bsz, t_out, f))
        lhs = np.sum(ops.conv1d(Tensor(u), Tensor(w), stride=stride).data * v)
        rhs = np.sum(u * ops.deconv1d(Tensor(v), Tensor(w), stride=stride).data)
        worst = max(worst, abs(lhs - rhs))
    record_property("measured", f"max gap {worst:.1e}")
    assert worst < 1e-10


# ===========================================================================
# 4. mask collapse


@pytest.fixture(scope="module")
def small_world():
    spec = CohortSpec(vocab_size=120, n_clusters=6, cluster_size=10, n_case=40, n_control=80, n_signature=2)
    cohort, stats = generate_cohort(spec)
    table = train_embedding(cohort, EmbeddingConfig(dim=6, epochs=2))
    return spec, cohort, stats, table


def tiny_gan_cfg(**kw):
    base = dict(seq_len=16, z_dim=8, widths=(2, 3), maps=4, enc_maps=6, dec_maps=6, fc_hidden=12, batch_size=8, k=1,
                max_iterations=6)
    base.update(kw)
    return GanConfig(**base)


@pytest.mark.acceptance(4, "an all-zero mask makes the transition sample equal the reconstruction")
@pytest.mark.parametrize("state", ["fresh", "trained", "no-batch-norm", "trunk-encoder", "float64"])
@pytest.mark.parametrize("training", [False, True])
def test_zero_mask_collapse(small_world, state, training):
    _, cohort, _, table = small_world
    kw = {"no-batch-norm": dict(batch_norm=False), "trunk-encoder": dict(encoder="trunk"),
          "float64": dict(dtype="float64")}.get(state, {})
    cfg = tiny_gan_cfg(**kw)
    records = cohort.records[:24]
    gan = train_gan(records, table, cfg)[0] if state == "trained" else GanModel.create(cfg, table)
    x = embed_batch(records[:9], table, cfg.seq_len, dtype=np.dtype(cfg.dtype))
    x_tilde, x_bar = sample_transition(gan, x, stream(4, state), mask=np.zeros(cfg.z_dim), training=training)
    assert x_tilde.tobytes() == x_bar.tobytes()


# ===========================================================================
# 5. fidelity


def desk(**overrides) -> RunConfig:
    return RunConfig.from_mapping({"profile": "desk", **overrides})


@pytest.fixture(scope="module")
def fidelity_reports():
    base = desk(**{"gan.max_iterations": "2000", "eval.top_k_freq": "20"})
    out = []
    for seed in (0, 1, 2):
        report, info = fidelity_run(base.with_seed(seed), CASE)
        out.append({"seed": seed, **report.summary(), **{k: v for k, v in info.items() if k != "final"}})
    _log("fidelity", out)
    return out


@pytest.mark.slow
@pytest.mark.acceptance(5, "generated case corpus matches the training corpus after 2000 iterations")
class TestFidelity:
    @pytest.mark.parametrize("key, bound, above", [
        ("length_tv", 0.15, False),
        ("freq_spearman", 0.8, True),
        ("cooc_correlation", 0.7, True),
    ])
    def test_median_over_three_seeds(self, fidelity_reports, record_property, key, bound, above):
        values = [r[key] for r in fidelity_reports]
        med = float(np.median(values))
        record_property("measured", f"{key} median {med:.3f} (seeds {', '.join(f'{v:.3f}' for v in values)})")
        assert (med > bound) if above else (med < bound)


# ===========================================================================
# 6 to 8. semi-supervised suite


@pytest.fixture(scope="module")
def suite():
    runs = ssl_suite(desk(), range(5), SuitePlan())
    _log("ssl_suite", runs)
    return medians(runs)


def fmt(values: dict[str, float]) -> str:
    return ", ".join(f"{k} {v:.4f}" for k, v in values.items())


@pytest.mark.slow
@pytest.mark.acceptance(6, "SSL-GAN beats BASIC and RAND does not at 50% labels")
class TestSslBoost:
    def test_ssl_above_basic(self, suite, record_property):
        got = {"SSL": suite["SSL rho=0.1 mu=0.6"], "BASIC": suite["BASIC"]}
        record_property("measured", fmt(got))
        assert got["SSL"] > got["BASIC"]

    def test_rand_not_above_basic(self, suite, record_property):
        got = {"RAND": suite["RAND"], "BASIC": suite["BASIC"]}
        record_property("measured", fmt(got))
        assert got["RAND"] <= got["BASIC"]


@pytest.mark.slow
@pytest.mark.acceptance(7, "rho=0.1 is at least as good as rho=0 and rho=1, and rho=1 is worst")
def test_rho_ordering(suite, record_property):
    got = {f"rho={r}": suite[f"SSL rho={r} mu=0.6"] for r in (0.0, 0.1, 1.0)}
    record_property("measured", fmt(got))
    assert got["rho=0.1"] >= got["rho=0.0"] and got["rho=0.1"] >= got["rho=1.0"]
    assert got["rho=1.0"] < got["rho=0.0"] and got["rho=1.0"] < got["rho=0.1"]


@pytest.mark.slow
@pytest.mark.acceptance(8, "mu curve peaks before 1.4 and FULL grows with added real data")
class TestMuCurve:
    def test_ssl_peak_before_largest_mu(self, suite, record_property):
        grid = SuitePlan().mu_grid
        curve = {f"mu={m}": suite[f"SSL rho=0.1 mu={m}"] for m in grid}
        record_property("measured", "SSL " + fmt(curve))
        best = max(curve.values())
        assert any(curve[f"mu={m}"] == best for m in grid if m < max(grid))

    def test_full_non_decreasing(self, suite, record_property):
        curve = {"mu=0": suite["BASIC"], **{f"mu={m}": suite[f"FULL mu={m}"] for m in SuitePlan().mu_grid}}
        record_property("measured", "FULL " + fmt(curve))
        values = list(curve.values())
        assert all(b >= a for a, b in zip(values, values[1:]))


# ===========================================================================
# 9. determinism and round trips


def pipeline(spec: CohortSpec, seed: int):
    """Every stage once, from one root seed; returns the artifacts of each stage."""
    cohort, stats = generate_cohort(replace(spec, seed=seed))
    table = train_embedding(cohort, EmbeddingConfig(dim=6, epochs=2, seed=seed))
    train = cohort.split("train")
    gans = {label: train_gan([r for r in train if r.label == label], table, tiny_gan_cfg(seed=seed + label))
            for label in (0, 1)}
    corpus, _ = generate_corpus(gans[CASE][0], table, train[:20], cohort.vocabulary, stream(seed, "generate"))
    model = PredictorModel(table.dim, widths=(2, 3), maps=4, seed=seed)
    hist = train_predictor(model, train[:60], cohort.split("val"), table,
                           SslConfig(mode=Mode.SSL_GAN, mu=0.6, seed=seed),
                           TrainConfig(batch_size=16, max_epochs=3, patience=3, seq_len=16, maps=4),
                           gan={k: g for k, (g, _) in gans.items()})
    score = evaluate(model, cohort.split("test"), table, 16)
    return {"cohort": cohort, "stats": stats, "table": table, "gans": gans, "corpus": corpus, "model": model,
            "history": hist, "score": score}


def fingerprint(art) -> dict[str, bytes]:
    return {
        "cohort": repr((art["cohort"].records, art["cohort"].splits)).encode(),
        "embedding": art["table"].vectors.tobytes(),
        "gan": b"".join(v.tobytes() for g, _ in art["gans"].values() for v in g.state().values()),
        "gan_history": repr([h.rows for _, h in art["gans"].values()]).encode(),
        "corpus": repr(art["corpus"].records).encode(),
        "predictor": b"".join(v.tobytes() for v in art["model"].params.state_dict().values()),
        "predictor_history": repr(art["history"].to_lines()).encode(),
        "score": repr(art["score"]).encode(),
    }


@pytest.fixture(scope="module")
def runs():
    spec = CohortSpec(vocab_size=100, n_clusters=5, cluster_size=10, n_case=40, n_control=80, n_signature=2)
    return [fingerprint(pipeline(spec, 7)) for _ in range(2)], fingerprint(pipeline(spec, 8))


@pytest.mark.acceptance(9, "every stage is bitwise reproducible and round trips are identity")
class TestDeterminism:
    @pytest.mark.parametrize("stage", ["cohort", "embedding", "gan", "gan_history", "corpus", "predictor",
                                       "predictor_history", "score"])
    def test_same_seed_same_bytes(self, runs, stage):
        (a, b), _ = runs
        assert a[stage] == b[stage]

    def test_other_seed_differs(self, runs):
        (a, _), c = runs
        assert all(a[k] != c[k] for k in ("cohort", "embedding", "gan", "predictor"))

    def test_corpus_round_trip(self, small_world, tmp_path):
        _, cohort, stats, _ = small_world
        save_corpus(cohort, tmp_path / "c.tsv", stats)
        back = load_corpus(tmp_path / "c.tsv")
        assert back.records == cohort.records and back.splits == cohort.splits
        assert back.vocabulary == cohort.vocabulary
        save_corpus(back, tmp_path / "d.tsv", stats)
        assert (tmp_path / "d.tsv").read_bytes() == (tmp_path / "c.tsv").read_bytes()

    def test_generated_corpus_round_trip(self, small_world, tmp_path):
        _, cohort, _, table = small_world
        gan = GanModel.create(tiny_gan_cfg(), table)
        corpus, _ = generate_corpus(gan, table, cohort.records[:15], cohort.vocabulary, stream(9, "g"))
        save_corpus(corpus, tmp_path / "g.tsv")
        assert load_corpus(tmp_path / "g.tsv").records == corpus.records

    def test_embedding_round_trip(self, small_world, tmp_path):
        table = small_world[3]
        save_embedding(table, tmp_path / "e.ehre")
        back = load_embedding(tmp_path / "e.ehre")
        assert back.vectors.tobytes() == table.vectors.tobytes() and back.meta == table.meta

    def test_gan_round_trip(self, small_world, tmp_path):
        _, cohort, _, table = small_world
        gan, _ = train_gan(cohort.records[:24], table, tiny_gan_cfg())
        gan.save(tmp_path / "g.ehrt")
        back = GanModel.load(tmp_path / "g.ehrt")
        a, b = gan.state(), back.state()
        assert a.keys() == b.keys() and all(a[k].tobytes() == b[k].tobytes() for k in a)
        x = embed_batch(cohort.records[:5], table, 16, dtype=np.float32)
        assert sample_transition(gan, x, stream(1, "s"))[0].tobytes() == \
            sample_transition(back, x, stream(1, "s"))[0].tobytes()

    def test_predictor_round_trip(self, small_world, tmp_path):
        table = small_world[3]
        model = PredictorModel(table.dim, widths=(2, 3), maps=4, seed=5)
        model.save(tmp_path / "p.ehrt", {"note": "x"})
        back, meta = PredictorModel.load(tmp_path / "p.ehrt")
        a, b = model.params.state_dict(), back.params.state_dict()
        assert all(a[k].tobytes() == b[k].tobytes() for k in a) and meta["note"] == "x"
