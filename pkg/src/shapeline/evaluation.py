"""Evaluation protocol: stratified splits, macro metrics, repeated sweeps."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ProtocolError

DEFAULT_RATES = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
DEFAULT_REPETITIONS = 10
METRICS = ("precision", "recall", "f1")


@dataclass
class Split:
    train: np.ndarray
    test: np.ndarray
    train_rate: float
    seed: int


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def stratified_split(labels, train_rate: float, seed: int, groups=None) -> Split:
    """Per-class random selection of round(rate * class size) training rows.

    With ``groups`` (e.g. piece ids) the selection unit is the group: whole
    groups go to training, so no piece appears on both sides.
    """
    labels = np.asarray(labels)
    if not 0 < train_rate < 1:
        raise ConfigError(f"train_rate must lie in (0, 1), got {train_rate}")
    rng = np.random.default_rng(seed)
    train = []
    if groups is None:
        for cls in np.unique(labels):
            rows = np.flatnonzero(labels == cls)
            if rows.size < 2:
                raise ProtocolError(f"class {cls} has {rows.size} row(s); at least 2 are needed")
            k = min(max(_round_half_up(train_rate * rows.size), 1), rows.size - 1)
            train.extend(rng.choice(rows, size=k, replace=False))
    else:
        groups = np.asarray(groups)
        uniq = np.unique(groups)
        if uniq.size < 2:
            raise ProtocolError("piece-level splitting needs at least 2 pieces")
        k = min(max(_round_half_up(train_rate * uniq.size), 1), uniq.size - 1)
        chosen = set(rng.choice(uniq, size=k, replace=False).tolist())
        train = [i for i, g in enumerate(groups) if g in chosen]
    train = np.sort(np.asarray(train, dtype=int))
    test = np.setdiff1d(np.arange(labels.size), train)
    return Split(train, test, float(train_rate), int(seed))


@dataclass
class MetricsReport:
    classes: list[int]
    precision: list[float]
    recall: list[float]
    f1: list[float]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion: list[list[int]]  # rows: true class id, columns: predicted class id
    n_test: int
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_text(self, names=None) -> str:
        names = names or {}
        lines = [f"n_test={self.n_test}  macro P={self.macro_precision:.4f}  "
                 f"R={self.macro_recall:.4f}  F1={self.macro_f1:.4f}",
                 f"{'class':<18}{'precision':>10}{'recall':>10}{'f1':>10}{'support':>9}"]
        for c, p, r, f in zip(self.classes, self.precision, self.recall, self.f1):
            support = sum(self.confusion[c])
            lines.append(f"{names.get(c, str(c)):<18}{p:>10.4f}{r:>10.4f}{f:>10.4f}{support:>9d}")
        return "\n".join(lines) + "\n"

    def confusion_csv(self) -> str:
        n = len(self.confusion)
        rows = ["true\\pred," + ",".join(str(i) for i in range(n))]
        rows += [f"{i}," + ",".join(str(v) for v in row) for i, row in enumerate(self.confusion)]
        return "\n".join(rows) + "\n"


def _safe_div(a, b):
    return np.divide(a, b, out=np.zeros_like(a, dtype=np.float64), where=b > 0)


def precision_recall_f1(predictions, labels, n_classes: int | None = None) -> MetricsReport:
    """Per-class and macro precision/recall/F1; 0/0 counts as 0.

    The macro mean runs over the classes present in ``labels``.
    """
    preds = np.asarray(predictions, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if preds.shape != labels.shape:
        raise ValueError("predictions and labels differ in length")
    if labels.size == 0:
        raise ValueError("cannot score an empty prediction set")
    n = int(n_classes if n_classes is not None else max(preds.max(), labels.max()) + 1)
    conf = np.zeros((n, n), dtype=np.int64)
    np.add.at(conf, (labels, preds), 1)
    tp = np.diag(conf).astype(np.float64)
    precision = _safe_div(tp, conf.sum(axis=0).astype(np.float64))
    recall = _safe_div(tp, conf.sum(axis=1).astype(np.float64))
    f1 = _safe_div(2 * precision * recall, precision + recall)
    present = sorted(set(labels.tolist()))
    macro = [math.fsum(m[c] for c in present) / len(present) for m in (precision, recall, f1)]
    return MetricsReport(
        classes=present,
        precision=[float(precision[c]) for c in present],
        recall=[float(recall[c]) for c in present],
        f1=[float(f1[c]) for c in present],
        macro_precision=macro[0], macro_recall=macro[1], macro_f1=macro[2],
        confusion=conf.tolist(), n_test=int(labels.size))


def manifest_digest(manifest) -> str:
    return hashlib.sha256(manifest.to_csv_text().encode("utf-8")).hexdigest()[:16]


def config_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# repeated sweeps
# ---------------------------------------------------------------------------

@dataclass
class SweepReport:
    # results[method][rate] = {"precision": (mean, std), ...}
    results: dict
    repetitions: int
    seeds: list[int]
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        res = {m: {f"{r:.2f}": {k: list(v) for k, v in by.items()} for r, by in rates.items()}
               for m, rates in self.results.items()}
        return {"results": res, "repetitions": self.repetitions, "seeds": self.seeds, "meta": self.meta}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def table(self) -> str:
        """Per-method mean +- std over rates and repetitions, in percent."""
        lines = [f"{'method':<12}{'precision (%)':>18}{'recall (%)':>18}{'f1 (%)':>18}"]
        for method, rates in self.results.items():
            cells = []
            for metric in METRICS:
                vals = [v for by in rates.values() for v in by[metric][2]]
                cells.append(format_mean_std(np.mean(vals), np.std(vals)))
            lines.append(f"{method:<12}" + "".join(f"{c:>18}" for c in cells))
        return "\n".join(lines) + "\n"

    def per_rate_table(self) -> str:
        lines = [f"{'method':<12}{'rate':>6}{'precision':>16}{'recall':>16}{'f1':>16}"]
        for method, rates in self.results.items():
            for rate, by in rates.items():
                lines.append(f"{method:<12}{rate:>6.2f}" + "".join(
                    f"{format_mean_std(*by[m][:2]):>16}" for m in METRICS))
        return "\n".join(lines) + "\n"

    def plot_data_csv(self, metric="f1") -> str:
        rows = ["method,rate,mean,std"]
        for method, rates in self.results.items():
            for rate, by in rates.items():
                mean, std = by[metric][:2]
                rows.append(f"{method},{rate:.2f},{mean:.6f},{std:.6f}")
        return "\n".join(rows) + "\n"


def format_mean_std(mean: float, std: float) -> str:
    return f"{100 * mean:.2f}± {100 * std:.2f}"


def summarize(values) -> tuple[float, float]:
    """Mean and population standard deviation."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def sweep(run, methods, rates=DEFAULT_RATES, repetitions: int = DEFAULT_REPETITIONS,
          base_seed: int = 0, on_result=None) -> SweepReport:
    """Repeat ``run(method, rate, seed) -> MetricsReport`` and aggregate.

    Repetition ``i`` uses seed ``base_seed + i``. A failing repetition aborts
    the sweep with the seed in the error message.
    """
    seeds = [base_seed + i for i in range(repetitions)]
    results = {}
    for method in methods:
        results[method] = {}
        for rate in rates:
            vals = {m: [] for m in METRICS}
            for seed in seeds:
                try:
                    rep = run(method, rate, seed)
                except Exception as exc:
                    raise type(exc)(f"sweep aborted: method={method} rate={rate} seed={seed}: {exc}") from exc
                vals["precision"].append(rep.macro_precision)
                vals["recall"].append(rep.macro_recall)
                vals["f1"].append(rep.macro_f1)
                if on_result is not None:
                    on_result(method, rate, seed, rep)
            results[method][float(rate)] = {m: (*summarize(v), v) for m, v in vals.items()}
    return SweepReport(results, repetitions, seeds)


def check_label_subset(eval_labels, train_labels):
    extra = sorted(set(np.asarray(eval_labels).tolist()) - set(np.asarray(train_labels).tolist()))
    if extra:
        raise ProtocolError(f"evaluation labels {extra} were never seen in training")


def write_report(report, out_dir, stem: str, names=None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f"{stem}.json", out / f"{stem}.txt", out / f"{stem}_confusion.csv"]
    paths[0].write_text(report.to_json(), encoding="utf-8")
    paths[1].write_text(report.to_text(names), encoding="utf-8")
    paths[2].write_text(report.confusion_csv(), encoding="utf-8")
    return paths


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

class Experiment:
    """One manifest plus the cached inputs every method needs.

    ``run(method, rate, seed)`` splits, trains from scratch and scores the
    held-out rows. Pair images and pooled features are computed once.
    """

    def __init__(self, manifest, run_config=None, jobs: int = 1, log=None):
        from .config import RunConfig
        from .pipeline import PairPreprocessor

        self.manifest = manifest
        self.config = run_config or RunConfig()
        self.labels = manifest.labels
        self.groups = np.array([r.piece_id for r in manifest.rows])
        self.log = log
        self.preprocess = PairPreprocessor(self.config.cqt.cqt_config(), self.config.cqt.height,
                                           self.config.cqt.width, jobs)
        self._pairs = None
        self._features = {}
        self.manifest_hash = manifest_digest(manifest)

    def pairs(self):
        if self._pairs is None:
            self._pairs = self.preprocess(self.manifest)
        return self._pairs

    def features(self, name: str) -> np.ndarray:
        from . import aca
        from .audio import read_wav

        if name not in self._features:
            self._features[name] = np.stack([
                aca.extract(read_wav(self.manifest.resolve(r.clip_path)), name).pooled
                for r in self.manifest.rows])
        return self._features[name]

    def split(self, rate: float, seed: int) -> Split:
        groups = self.groups if self.config.eval.piece_level else None
        return stratified_split(self.labels, rate, seed, groups)

    def train_sresnn(self, rows, seed: int, n_classes: int = 28):
        from . import model as M

        refs, queries = self.pairs()
        net = M.build(self.config.model_config(n_classes), seed=seed)
        on_epoch = None
        if self.log is not None:
            on_epoch = lambda e, loss, acc: self.log("epoch", seed=seed, epoch=e, loss=loss, accuracy=acc)
        report = M.fit_arrays(net, refs[rows], queries[rows], self.labels[rows],
                              self.config.train.train_config(), seed, on_epoch)
        return net, report

    def predict_sresnn(self, net, rows) -> np.ndarray:
        from . import model as M

        refs, queries = self.pairs()
        return M.predict_proba(net, refs[rows], queries[rows]).argmax(axis=1)

    def run(self, method: str, rate: float, seed: int, n_classes: int = 28) -> MetricsReport:
        from . import aca

        sp = self.split(rate, seed)
        if method == "sresnn":
            net, _ = self.train_sresnn(sp.train, seed, n_classes)
            preds = self.predict_sresnn(net, sp.test)
        elif method in aca.FEATURES:
            X = self.features(method)
            clf = aca.train_linear_classifier(X[sp.train], self.labels[sp.train],
                                              self.config.eval.baseline_epochs,
                                              self.config.eval.baseline_lr, n_classes)
            preds = clf.predict(X[sp.test])
        else:
            raise ConfigError(f"unknown method {method!r}")
        report = precision_recall_f1(preds, self.labels[sp.test], n_classes)
        report.meta = {"method": method, "train_rate": float(rate), "seed": int(seed),
                       "n_train": int(sp.train.size), "config_hash": self.config.digest(),
                       "manifest_hash": self.manifest_hash}
        if self.log is not None:
            self.log("result", method=method, rate=rate, seed=seed, macro_f1=report.macro_f1)
        return report


def generalization_eval(net, manifest, preprocess, train_labels, n_classes: int | None = None) -> MetricsReport:
    """Score a trained model on another corpus without retraining."""
    from . import model as M

    labels = manifest.labels
    check_label_subset(labels, train_labels)
    refs, queries = preprocess(manifest)
    preds = M.predict_proba(net, refs, queries).argmax(axis=1)
    report = precision_recall_f1(preds, labels, n_classes or net.config.n_classes)
    report.meta = {"manifest_hash": manifest_digest(manifest)}
    return report
