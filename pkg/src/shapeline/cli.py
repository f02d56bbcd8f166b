"""Command-line entry point: ``shapeline <command> [flags]``.

Results go to stdout, progress to stderr as JSON lines. Exit codes:
0 success, 2 config error, 3 I/O error, 4 numerical abort, 5 protocol error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import aca, config as C, evaluation as E, model as M, synth
from .audio import read_wav
from .errors import ConfigError, DataIOError, ShapelineError
from .pipeline import PairPreprocessor

log = logging.getLogger("shapeline")


class JsonLinesFormatter(logging.Formatter):
    def format(self, record):
        payload = {"level": record.levelname.lower(), "event": record.getMessage()}
        payload.update(getattr(record, "fields", {}))
        return json.dumps(payload, sort_keys=True, default=str)


def _setup_logging(quiet: bool):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLinesFormatter())
    log.handlers[:] = [handler]
    log.setLevel(logging.WARNING if quiet else logging.INFO)
    log.propagate = False


def emit(event: str, **fields):
    log.info(event, extra={"fields": fields})


def _seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("SHAPELINE_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"SHAPELINE_SEED must be an integer, got {env!r}") from None


def _rates(text: str) -> tuple[float, ...]:
    """``0.1:0.7:0.1`` (inclusive range) or a comma list ``0.3,0.7``."""
    try:
        if ":" in text:
            lo, hi, step = (float(p) for p in text.split(":"))
            n = int(round((hi - lo) / step)) + 1
            return tuple(round(lo + i * step, 10) for i in range(n))
        return tuple(float(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad rate list {text!r}") from None


def _load_manifest(path) -> synth.Manifest:
    return synth.Manifest.read(path)


def _write(path: Path, text: str):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def _print(obj):
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = C.load(args.config).override("dataset", pieces=args.pieces, corpus=args.corpus,
                                       labels=args.labels, sample_rate=args.sample_rate)
    ds = cfg.dataset
    labels = synth.resolve_label_set(ds.labels)
    t0 = time.perf_counter()
    manifest = synth.build_dataset(ds.pieces, labels, args.out_dir, seed=_seed(args), corpus=ds.corpus,
                                   sample_rate=ds.sample_rate, duration_s=ds.duration_s, jobs=args.jobs)
    path = Path(args.out_dir) / "manifest.csv"
    emit("synth_done", rows=len(manifest), seconds=round(time.perf_counter() - t0, 2))
    sys.stdout.write(f"{path}\n")
    return 0


def cmd_train(args) -> int:
    cfg = C.load(args.config).override("train", epochs=args.epochs, lr=args.lr, batch_size=args.batch_size)
    seed = _seed(args)
    manifest = _load_manifest(args.manifest)
    if args.train_rate is not None:
        rows = E.stratified_split(manifest.labels, args.train_rate, seed).train
    else:
        rows = np.arange(len(manifest))
    train_manifest = manifest.subset(rows)
    pre = PairPreprocessor(cfg.cqt.cqt_config(), cfg.cqt.height, cfg.cqt.width, args.jobs)
    net = M.build(cfg.model_config(), seed=seed)
    emit("train_start", rows=len(train_manifest), params=M.count_params(net.config), seed=seed)
    report = M.fit(net, train_manifest, pre, cfg.train.train_config(), seed,
                   on_epoch=lambda e, loss, acc: emit("epoch", epoch=e, loss=round(loss, 6),
                                                      accuracy=round(acc, 6)))
    metadata = {
        "run_config": cfg.to_dict(), "config_hash": cfg.digest(), "seed": seed,
        "train_rate": args.train_rate, "manifest_hash": E.manifest_digest(manifest),
        "train_labels": sorted(set(train_manifest.labels.tolist())),
        "epochs": cfg.train.epochs, "final_loss": report.final_loss if report.epoch_loss else None,
        "final_accuracy": report.final_accuracy if report.epoch_accuracy else None,
    }
    M.save(net, args.out, metadata)
    _print({"checkpoint": str(args.out), "final_loss": metadata["final_loss"],
            "final_accuracy": metadata["final_accuracy"], "steps": report.steps})
    return 0


def _checkpoint_preprocessor(net, jobs) -> PairPreprocessor:
    run = net.metadata.get("run_config")
    cfg = C.from_dict(run) if run else C.RunConfig()
    _, h, w = net.config.input
    return PairPreprocessor(cfg.cqt.cqt_config(), h, w, jobs)


def cmd_eval(args) -> int:
    net = M.load(args.checkpoint)
    meta = net.metadata
    pre = _checkpoint_preprocessor(net, args.jobs)
    train_labels = meta.get("train_labels", list(range(net.config.n_classes)))
    if args.generalization:
        target = _load_manifest(args.generalization)
        if args.shuffle_labels:
            rng = np.random.default_rng(_seed(args))
            labels = rng.permutation(target.labels)
            names = {lab.id: lab.name for lab in synth.LABELS}
            rows = [replace(r, label_id=int(y), label_name=names[int(y)]) for r, y in zip(target.rows, labels)]
            target = synth.Manifest(rows, target.root)
        report = E.generalization_eval(net, target, pre, train_labels)
        stem = "generalization_shuffled" if args.shuffle_labels else "generalization"
    else:
        if not args.manifest:
            raise ConfigError("eval needs --manifest or --generalization")
        manifest = _load_manifest(args.manifest)
        rate = args.train_rate if args.train_rate is not None else meta.get("train_rate")
        seed = args.split_seed if args.split_seed is not None else meta.get("seed", 0)
        if rate is None:
            raise ConfigError("the checkpoint was trained on every row; pass --train-rate to define a split")
        if meta.get("manifest_hash") and meta["manifest_hash"] != E.manifest_digest(manifest):
            emit("warning", message="manifest differs from the one used for training")
        test = manifest.subset(E.stratified_split(manifest.labels, rate, seed).test)
        report = E.generalization_eval(net, test, pre, train_labels)
        report.meta.update({"train_rate": rate, "split_seed": seed})
        stem = "eval"
    report.meta.update({"checkpoint": str(args.checkpoint), "config_hash": meta.get("config_hash"),
                        "seed": meta.get("seed")})
    names = {lab.id: lab.name for lab in synth.LABELS}
    if args.out_dir:
        E.write_report(report, args.out_dir, stem, names)
    _print({"macro_precision": report.macro_precision, "macro_recall": report.macro_recall,
            "macro_f1": report.macro_f1, "n_test": report.n_test})
    return 0


_POOL_EXPERIMENT = None


def _pool_run(task):
    method, rate, seed = task
    return _POOL_EXPERIMENT.run(method, rate, seed)


def cmd_sweep(args) -> int:
    global _POOL_EXPERIMENT
    cfg = C.load(args.config)
    if args.methods:
        cfg = cfg.override("eval", methods=tuple(args.methods.split(",")))
    cfg = cfg.override("eval", rates=args.rates, repetitions=args.reps)
    manifest = _load_manifest(args.manifest)
    exp = E.Experiment(manifest, cfg, jobs=args.jobs, log=emit)
    base = _seed(args)
    ev = cfg.eval
    if "sresnn" in ev.methods:
        exp.pairs()
    cached = {}
    if args.jobs > 1:
        import multiprocessing as mp

        for m in ev.methods:
            if m != "sresnn":
                exp.features(m)
        tasks = [(m, r, base + i) for m in ev.methods for r in ev.rates for i in range(ev.repetitions)]
        _POOL_EXPERIMENT = exp
        with mp.get_context("fork").Pool(args.jobs) as pool:
            cached = dict(zip(tasks, pool.map(_pool_run, tasks, chunksize=1)))

    def run(method, rate, seed):
        return cached.get((method, rate, seed)) or exp.run(method, rate, seed)

    report = E.sweep(run, ev.methods, ev.rates, ev.repetitions, base)
    report.meta = {"run_config": cfg.to_dict(), "config_hash": cfg.digest(),
                   "manifest_hash": exp.manifest_hash, "base_seed": base}
    out = Path(args.out_dir)
    _write(out / "sweep.json", report.to_json())
    _write(out / "sweep.txt", report.table() + "\n" + report.per_rate_table())
    if args.plot_data:
        for metric in E.METRICS:
            _write(out / f"plot_{metric}.csv", report.plot_data_csv(metric))
    sys.stdout.write(report.table())
    return 0


def cmd_classify(args) -> int:
    net = M.load(args.checkpoint)
    pre = _checkpoint_preprocessor(net, 1)
    ref, query = pre.pair(args.reference, args.query)
    proba = M.predict_proba(net, ref[None], query[None])[0]
    top = int(np.argmax(proba))
    names = {lab.id: lab.name for lab in synth.LABELS}
    _print({"label": names.get(top, str(top)), "label_id": top,
            "probabilities": [float(p) for p in proba]})
    return 0


def cmd_gradcheck(args) -> int:
    cfg = C.load(args.config)
    t0 = time.perf_counter()
    rep = M.gradient_report(cfg.model_config(), seed=_seed(args), max_entries=args.max_entries)
    rep["seconds"] = round(time.perf_counter() - t0, 2)
    rep["layer_tolerance"], rep["model_tolerance"] = M.LAYER_TOLERANCE, M.MODEL_TOLERANCE
    _print(rep)
    return 0 if rep["ok"] else 4


def cmd_features(args) -> int:
    manifest = _load_manifest(args.manifest)
    vectors = [aca.extract(read_wav(manifest.resolve(r.clip_path)), args.feature).pooled
               for r in manifest.rows]
    text = aca.features_csv([r.clip_path for r in manifest.rows], vectors, args.feature)
    if args.out:
        _write(Path(args.out), text)
        sys.stdout.write(f"{args.out}\n")
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="shapeline", formatter_class=fmt,
                                description="Synthesize, train and evaluate musical-shape classifiers.")
    p.add_argument("--quiet", action="store_true", help="suppress progress logs on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True, jobs=True):
        sp.add_argument("--config", help="JSON run config; flags override its values", default=None)
        if seed:
            sp.add_argument("--seed", type=int, default=None,
                            help="random seed (falls back to $SHAPELINE_SEED, then 0)")
        if jobs:
            sp.add_argument("--jobs", type=int, default=1, help="worker processes")

    s = sub.add_parser("synth", formatter_class=fmt, help="render a synthetic corpus")
    common(s)
    s.add_argument("--out-dir", required=True, help="output directory")
    s.add_argument("--pieces", type=int, default=None, help="number of pieces (config default 20)")
    s.add_argument("--corpus", default=None, help="corpus name written to the manifest (config default A)")
    s.add_argument("--labels", choices=sorted(synth.LABEL_SETS), default=None,
                   help="label set (config default all)")
    s.add_argument("--sample-rate", type=int, default=None, help="Hz (config default 16000)")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", formatter_class=fmt, help="train a model and write a checkpoint")
    common(t)
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True, type=Path, help="checkpoint path")
    t.add_argument("--train-rate", type=float, default=None,
                   help="train on a stratified split of this rate (default: every row)")
    t.add_argument("--epochs", type=int, default=None, help="config default 200")
    t.add_argument("--lr", type=float, default=None, help="config default 0.001")
    t.add_argument("--batch-size", type=int, default=None, help="config default 16")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", formatter_class=fmt, help="score a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", default=None, help="manifest whose held-out split is scored")
    e.add_argument("--split-seed", type=int, default=None, help="split seed (default: training seed)")
    e.add_argument("--train-rate", type=float, default=None, help="split rate (default: training rate)")
    e.add_argument("--generalization", default=None, help="score every row of another corpus")
    e.add_argument("--shuffle-labels", action="store_true", help="chance-level control for --generalization")
    e.add_argument("--seed", type=int, default=None, help="shuffle seed")
    e.add_argument("--out-dir", default=None, help="write JSON, text and confusion CSV reports here")
    e.add_argument("--jobs", type=int, default=1, help="worker processes")
    e.set_defaults(func=cmd_eval)

    w = sub.add_parser("sweep", formatter_class=fmt, help="repeated training-rate sweep")
    common(w)
    w.add_argument("--manifest", required=True)
    w.add_argument("--methods", default=None,
                   help=f"comma list from sresnn,{','.join(aca.FEATURES)} (default: all)")
    w.add_argument("--rates", type=_rates, default=E.DEFAULT_RATES, help="lo:hi:step or comma list")
    w.add_argument("--reps", type=int, default=E.DEFAULT_REPETITIONS, help="repetitions per rate")
    w.add_argument("--out-dir", required=True)
    w.add_argument("--plot-data", action="store_true", help="also write per-metric (rate, mean, std) CSVs")
    w.set_defaults(func=cmd_sweep)

    c = sub.add_parser("classify", formatter_class=fmt, help="classify one reference/query pair")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--reference", required=True)
    c.add_argument("--query", required=True)
    c.set_defaults(func=cmd_classify)

    g = sub.add_parser("gradcheck", formatter_class=fmt, help="finite-difference gradient check")
    common(g, jobs=False)
    g.add_argument("--max-entries", type=int, default=16, help="probed coordinates per tensor")
    g.set_defaults(func=cmd_gradcheck)

    f = sub.add_parser("features", formatter_class=fmt, help="dump pooled descriptor CSV")
    f.add_argument("--manifest", required=True)
    f.add_argument("--feature", choices=aca.FEATURES, required=True)
    f.add_argument("--out", default=None, help="CSV path (default: stdout)")
    f.set_defaults(func=cmd_features)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.quiet)
    try:
        return args.func(args)
    except ShapelineError as exc:
        log.error(type(exc).__name__, extra={"fields": {"message": str(exc)}})
        return exc.exit_code
    except OSError as exc:
        log.error("DataIOError", extra={"fields": {"message": str(exc)}})
        return DataIOError.exit_code
    except ValueError as exc:
        log.error("ConfigError", extra={"fields": {"message": str(exc)}})
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
