"""Command-line pipeline: ``ehrgan <command> [--config PATH] [--seed N] [--out DIR] ...``.

Every artifact gets a ``<file>.prov.json`` sidecar holding the code version,
the hash of the configuration sections that produced it, and the hashes of
its input files. Commands that consume artifacts check those records and
refuse inputs produced by a different pipeline.

Exit codes: 0 success, 1 runtime failure, 2 bad configuration or usage,
3 missing input, 4 provenance mismatch.
"""

from __future__ import annotations

import os

_threads = os.environ.get("EHRGAN_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from dataclasses import replace  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import __version__  # noqa: E402
from . import rng as rngs  # noqa: E402
from .config import ConfigError, RunConfig, hash_file  # noqa: E402
from .embedding import load_embedding, save_embedding, train_embedding  # noqa: E402
from .experiments import build_world, run_predictor, train_class_gans  # noqa: E402
from .gan import GanModel, generate_corpus, train_gan  # noqa: E402
from .metrics import compare_runs, fidelity, format_table, table_records  # noqa: E402
from .predictor import Mode, PredictorModel, evaluate, train_predictor  # noqa: E402
from .synth import CASE, CONTROL, CorpusFormatError, generate_cohort, load_corpus, save_corpus  # noqa: E402

log = logging.getLogger("ehrgan")

EXIT_RUNTIME, EXIT_CONFIG, EXIT_MISSING, EXIT_MISMATCH = 1, 2, 3, 4
LABELS = {"case": CASE, "control": CONTROL}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# provenance


def _prov_path(path: Path) -> Path:
    return path.with_name(path.name + ".prov.json")


def write_provenance(path: Path, cfg: RunConfig, sections: tuple[str, ...], inputs: dict[str, Path]) -> dict:
    record = {
        "artifact": path.name,
        "code_version": __version__,
        "config_hash": cfg.section_hash(*sections),
        "sections": list(sections),
        "file_hash": hash_file(path),
        "inputs": {name: hash_file(p) for name, p in inputs.items()},
    }
    _prov_path(path).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return record


def read_provenance(path: Path) -> dict:
    prov = _prov_path(path)
    if not prov.exists():
        raise CliError(f"{path}: no provenance record ({prov.name}); regenerate it with this pipeline",
                       EXIT_MISMATCH)
    record = json.loads(prov.read_text())
    if record.get("code_version") != __version__:
        raise CliError(f"{path} was produced by code version {record.get('code_version')}, "
                       f"this is {__version__}; regenerate it", EXIT_MISMATCH)
    if record.get("file_hash") != hash_file(path):
        raise CliError(f"{path} changed after it was written (hash mismatch); regenerate it", EXIT_MISMATCH)
    return record


def require(path: str | None, what: str) -> Path:
    if path is None:
        raise CliError(f"missing required input: --{what}", EXIT_CONFIG)
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} file {p} does not exist", EXIT_MISSING)
    read_provenance(p)
    return p


def check_link(artifact: Path, input_name: str, given: Path) -> None:
    """``artifact`` must have been built from exactly the file ``given``."""
    rec = read_provenance(artifact)
    expected = rec["inputs"].get(input_name)
    if expected is None:
        raise CliError(f"{artifact} records no {input_name} input", EXIT_MISMATCH)
    if expected != hash_file(given):
        raise CliError(f"{artifact} was built from a different {input_name} than {given}; "
                       "pass the matching file or rebuild", EXIT_MISMATCH)


# ---------------------------------------------------------------------------
# commands


def _out(args, name: str) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out / name


def cmd_gen_cohort(args, cfg: RunConfig) -> None:
    cohort, stats = generate_cohort(cfg.cohort)
    path = _out(args, "cohort.tsv")
    save_corpus(cohort, path, stats)
    write_provenance(path, cfg, ("cohort",), {})
    print(f"wrote {path}: {len(cohort)} records ({stats.dropped_short} dropped as too short)")


def cmd_train_embedding(args, cfg: RunConfig) -> None:
    cohort_path = require(args.cohort, "cohort")
    cohort = load_corpus(cohort_path)
    table = train_embedding(cohort, cfg.embedding)
    path = _out(args, "embedding.ehre")
    save_embedding(table, path)
    write_provenance(path, cfg, ("embedding",), {"cohort": cohort_path})
    print(f"wrote {path}: {table.vocab_size} codes + END, dim {table.dim}")


def _load_inputs(args):
    cohort_path = require(args.cohort, "cohort")
    emb_path = require(args.embedding, "embedding")
    check_link(emb_path, "cohort", cohort_path)
    return cohort_path, load_corpus(cohort_path), emb_path, load_embedding(emb_path)


def cmd_train_gan(args, cfg: RunConfig) -> None:
    cohort_path, cohort, emb_path, table = _load_inputs(args)
    records = cohort.split(args.split)
    if args.label != "all":
        records = [r for r in records if r.label == LABELS[args.label]]
    if not records:
        raise CliError(f"no {args.label} records in split {args.split!r}", EXIT_CONFIG)

    def progress(it, row):
        if it % 100 == 0:
            log.info("gan %d %s", it, json.dumps(row))

    gan, hist = train_gan(records, table, cfg.gan, callback=progress)
    path = _out(args, f"gan_{args.label}.ehrt")
    gan.save(path, {"label": args.label, "split": args.split})
    _out(args, f"gan_{args.label}.history.jsonl").write_text("\n".join(hist.to_lines()) + "\n")
    write_provenance(path, cfg, ("gan",), {"cohort": cohort_path, "embedding": emb_path})
    print(f"wrote {path}: {len(hist)} iterations" + (f", converged at {hist.converged_at}"
                                                     if hist.converged_at is not None else ""))


def cmd_sample(args, cfg: RunConfig) -> None:
    cohort_path, cohort, emb_path, table = _load_inputs(args)
    gan_path = require(args.gan, "gan")
    check_link(gan_path, "embedding", emb_path)
    gan = GanModel.load(gan_path)
    records = cohort.split(args.split)
    label = gan.meta.get("label", "all")
    if label != "all":
        records = [r for r in records if r.label == LABELS[label]]
    gen, rep = generate_corpus(gan, table, records, cohort.vocabulary, rngs.stream(cfg.gan.seed, "sample"),
                               n_per_source=cfg.eval.n_per_source)
    path = _out(args, "generated.tsv")
    save_corpus(gen, path)
    write_provenance(path, cfg, ("gan", "eval"), {"cohort": cohort_path, "embedding": emb_path, "gan": gan_path})
    print(f"wrote {path}: {rep.generated} records from {rep.sources} sources "
          f"({rep.dropped_empty} empty dropped, {rep.no_end_mark} without END)")


def cmd_train_predictor(args, cfg: RunConfig) -> None:
    cohort_path, cohort, emb_path, table = _load_inputs(args)
    mode = Mode(cfg.ssl.mode)
    inputs = {"cohort": cohort_path, "embedding": emb_path}
    gans = None
    if mode is Mode.SSL_GAN and cfg.ssl.mu > 0:
        gans = {}
        for name, label in LABELS.items():
            p = require(getattr(args, f"gan_{name}"), f"gan-{name}")
            check_link(p, "embedding", emb_path)
            gans[label] = GanModel.load(p)
            inputs[f"gan_{name}"] = p
    from .experiments import split_labeled
    labeled, unlabeled = split_labeled(cohort.split("train"), cfg.ssl.labeled_fraction,
                                       rngs.stream(cfg.ssl.seed, "labeled-split"))
    pool = unlabeled if mode in (Mode.RAND, Mode.FULL) else None
    model = cfg.train.build(table.dim, cfg.ssl.seed)
    hist = train_predictor(model, labeled, cohort.split("val"), table, cfg.ssl, cfg.train, gan=gans, pool=pool)
    path = _out(args, "predictor.ehrt")
    model.save(path, {"mode": mode.value, "mu": cfg.ssl.mu, "seq_len": cfg.train.seq_len})
    _out(args, "predictor.history.jsonl").write_text("\n".join(hist.to_lines()) + "\n")
    write_provenance(path, cfg, ("ssl", "train"), inputs)
    print(f"wrote {path}: best validation AUROC {hist.best_val_auroc:.4f} at epoch {hist.best_epoch}")


def cmd_evaluate(args, cfg: RunConfig) -> None:
    cohort_path, cohort, emb_path, table = _load_inputs(args)
    report = {}
    if args.predictor:
        pred_path = require(args.predictor, "predictor")
        check_link(pred_path, "embedding", emb_path)
        check_link(pred_path, "cohort", cohort_path)
        model, meta = PredictorModel.load(pred_path)
        report["predictor"] = evaluate(model, cohort.split(args.split), table, int(meta.get("seq_len", 150)))
        report["predictor"]["split"] = args.split
    if args.generated:
        gen_path = require(args.generated, "generated")
        check_link(gen_path, "cohort", cohort_path)
        generated = load_corpus(gen_path)
        src_ids = {r.patient_id.split("-", 1)[1] for r in generated.records}
        keep = cfg.gan.seq_len - 1
        from .synth import PatientRecord
        reference = cohort.subset([PatientRecord(r.patient_id, r.label, r.events[-keep:])
                                   for r in cohort.records if r.patient_id in src_ids], "reference")
        fr = fidelity(reference, generated, cfg.eval.top_k_freq, cfg.eval.top_k_cooc)
        report["fidelity"] = fr.summary()
        fr.dump_grids(_out(args, "fidelity"))
    if not report:
        raise CliError("evaluate needs --predictor and/or --generated", EXIT_CONFIG)
    path = _out(args, "evaluation.json")
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report, indent=2, sort_keys=True))


def cmd_sweep(args, cfg: RunConfig) -> None:
    sw = cfg.sweep
    runs = []
    out_lines = _out(args, "runs.jsonl")
    with open(out_lines, "w") as fh:
        def emit(row):
            runs.append(row)
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            fh.flush()

        for seed in sw.seeds:
            scfg = cfg.with_seed(seed)
            world = build_world(scfg, max(sw.mu_grid) if sw.kind != "rho" else 1.0)
            if sw.kind == "rho":
                for rho in sw.rho_grid:
                    gans = train_class_gans(world.labeled, world.table, replace(scfg.gan, rho=rho))
                    emit(run_predictor(world, scfg, Mode.SSL_GAN, sw.mu, gans, {"group": f"rho={rho}", "rho": rho}))
            elif sw.kind == "mu":
                gans = train_class_gans(world.labeled, world.table, replace(scfg.gan, rho=sw.rho))
                for mu in sw.mu_grid:
                    emit(run_predictor(world, scfg, Mode.SSL_GAN, mu, gans, {"group": f"SSL mu={mu}", "rho": sw.rho}))
                    emit(run_predictor(world, scfg, Mode.FULL, mu, None, {"group": f"FULL mu={mu}"}))
            else:
                emit(run_predictor(world, scfg, Mode.BASIC, 0.0, None, {"group": "BASIC"}))
                emit(run_predictor(world, scfg, Mode.RAND, sw.mu, None, {"group": "RAND"}))
                gans = train_class_gans(world.labeled, world.table, replace(scfg.gan, rho=sw.rho))
                emit(run_predictor(world, scfg, Mode.SSL_GAN, sw.mu, gans, {"group": "SSL_GAN", "rho": sw.rho}))
                emit(run_predictor(world, scfg, Mode.FULL, sw.mu, None, {"group": "FULL"}))
    rows = compare_runs(runs, group_by="group")
    table = format_table(rows, title=f"sweep over {sw.kind}, seeds {list(sw.seeds)}")
    _out(args, "table.txt").write_text(table + "\n")
    _out(args, "table.jsonl").write_text("\n".join(table_records(rows)) + "\n")
    print(table)


COMMANDS = {
    "gen-cohort": cmd_gen_cohort,
    "train-embedding": cmd_train_embedding,
    "train-gan": cmd_train_gan,
    "sample": cmd_sample,
    "train-predictor": cmd_train_predictor,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ehrgan", description="Synthetic EHR GAN pipeline")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="root seed (overrides the config)")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("train-embedding", "train-gan", "sample", "train-predictor", "evaluate"):
            p.add_argument("--cohort", help="corpus file from gen-cohort")
        if name in ("train-gan", "sample", "train-predictor", "evaluate"):
            p.add_argument("--embedding", help="embedding file from train-embedding")
        if name in ("train-gan", "sample"):
            p.add_argument("--split", default="train", choices=("train", "val", "test"))
        if name == "train-gan":
            p.add_argument("--label", default="case", choices=("case", "control", "all"))
        if name == "sample":
            p.add_argument("--gan", help="checkpoint from train-gan")
        if name == "train-predictor":
            p.add_argument("--gan-case", help="case-class generator (SSL_GAN mode)")
            p.add_argument("--gan-control", help="control-class generator (SSL_GAN mode)")
        if name == "evaluate":
            p.add_argument("--predictor", help="checkpoint from train-predictor")
            p.add_argument("--generated", help="corpus from sample (fidelity report)")
            p.add_argument("--split", default="test", choices=("train", "val", "test"))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        overrides = {}
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            overrides[k.strip()] = v.strip()
        cfg = RunConfig.load(args.config, args.seed, overrides)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{args.command}.resolved.cfg").write_text(cfg.echo())
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"ehrgan: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"ehrgan: {exc}", file=sys.stderr)
        return exc.code
    except CorpusFormatError as exc:
        print(f"ehrgan: bad corpus file: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, ValueError, KeyError) as exc:
        print(f"ehrgan: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
