"""Robustness, task-metric and calibration measurements."""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .model import NUM_SPECIAL, encode_batch, forward_ids

REPORT_VERSION = 1
NUM_BINS = 8
DEFAULT_CORRUPTION_RATES = (0.10, 0.15, 0.20)


class EvalError(ValueError):
    pass


class DegenerateMetricWarning(UserWarning):
    """A metric was undefined for the inputs and has been set to 0."""


# ------------------------------------------------------------------ noise channels


def perturb_embeddings(x, delta, rng):
    """x + delta * v with v i.i.d. standard normal per coordinate."""
    if delta < 0:
        raise EvalError(f"delta must be >= 0, got {delta}")
    x = np.asarray(x, dtype=np.float64)
    if delta == 0:
        return x.copy()
    return x + delta * rng.standard_normal(x.shape)


def corrupt_tokens(tokens, rate, rng, vocab_size):
    """Replace each non-special token with probability ``rate`` by a uniform non-special token.

    The replacement is drawn from all non-special ids, so it can coincide with
    the original token.
    """
    if not 0 <= rate <= 1:
        raise EvalError(f"corruption rate must be in [0, 1], got {rate}")
    if vocab_size <= NUM_SPECIAL:
        raise EvalError("vocabulary has no non-special tokens")
    t = np.asarray(tokens, dtype=np.int64)
    hit = (rng.random(t.shape) < rate) & (t >= NUM_SPECIAL)
    repl = rng.integers(NUM_SPECIAL, vocab_size, size=t.shape)
    return np.where(hit, repl, t).tolist()


# ------------------------------------------------------------------ metrics


def _check_pair(pred, labels):
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if pred.shape != labels.shape:
        raise EvalError(f"predictions {pred.shape} and labels {labels.shape} differ in length")
    if pred.size == 0:
        raise EvalError("no instances to score")
    return pred, labels


def accuracy(pred, labels):
    pred, labels = _check_pair(pred, labels)
    return float((pred == labels).mean())


def f1(pred, labels, positive=1):
    pred, labels = _check_pair(pred, labels)
    tp = int(((pred == positive) & (labels == positive)).sum())
    fp = int(((pred == positive) & (labels != positive)).sum())
    fn = int(((pred != positive) & (labels == positive)).sum())
    denom = 2 * tp + fp + fn
    if denom == 0:
        warnings.warn("F1 undefined (no positives predicted or present); reported as 0",
                      DegenerateMetricWarning, stacklevel=2)
        return 0.0
    return 2 * tp / denom


def matthews(pred, labels):
    """Matthews correlation from the confusion matrix (any number of classes)."""
    pred, labels = _check_pair(pred, labels)
    classes = np.union1d(pred, labels)
    p_idx = np.searchsorted(classes, pred)
    t_idx = np.searchsorted(classes, labels)
    C = np.zeros((classes.size, classes.size))
    np.add.at(C, (t_idx, p_idx), 1)
    s = C.sum()
    c = np.trace(C)
    t_k = C.sum(axis=1)
    p_k = C.sum(axis=0)
    denom = np.sqrt((s * s - p_k @ p_k) * (s * s - t_k @ t_k))
    if denom == 0:
        warnings.warn("Matthews correlation undefined for constant predictions or labels; "
                      "reported as 0", DegenerateMetricWarning, stacklevel=2)
        return 0.0
    return float((c * s - t_k @ p_k) / denom)


def spearman(pred, labels):
    pred, labels = _check_pair(pred, labels)
    if np.all(pred == pred.flat[0]) or np.all(labels == labels.flat[0]):
        warnings.warn("Spearman correlation undefined for constant input; reported as 0",
                      DegenerateMetricWarning, stacklevel=2)
        return 0.0
    return float(stats.spearmanr(pred, labels).statistic)


METRIC_FNS = {"accuracy": accuracy, "f1": f1, "matthews": matthews, "spearman": spearman}


def task_score(predictions, labels, metric):
    try:
        fn = METRIC_FNS[metric]
    except KeyError:
        raise EvalError(f"unknown metric {metric!r}; expected one of {sorted(METRIC_FNS)}") from None
    if metric != "spearman":
        labels = np.asarray(labels)
        if labels.dtype.kind == "f" and not np.all(labels == np.round(labels)):
            raise EvalError(f"metric {metric!r} needs class labels, got real-valued targets")
    return fn(predictions, labels)


def predictions_from_logits(logits, regression=False):
    logits = np.asarray(logits)
    return logits[:, 0] if regression else logits.argmax(axis=1)


def positive_probs(logits):
    """Softmax probability of class 1 for a two-class head."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[1] != 2:
        raise EvalError(f"positive-class probabilities need two logits, got shape {logits.shape}")
    return 1.0 / (1.0 + np.exp(logits[:, 0] - logits[:, 1]))


def brier(probs, labels):
    p, y = _check_pair(np.asarray(probs, dtype=np.float64), np.asarray(labels, dtype=np.float64))
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise EvalError("probabilities must lie in [0, 1]")
    return float(((p - y) ** 2).mean())


@dataclass
class CalibrationReport:
    edges: np.ndarray
    mean_p: np.ndarray
    freq: np.ndarray
    counts: np.ndarray
    empty: np.ndarray
    ece: float
    brier: float

    def reliability_rows(self):
        centers = (self.edges[:-1] + self.edges[1:]) / 2
        return [
            {"bin_center": float(c), "mean_p": None if e else float(m),
             "freq": None if e else float(f), "count": int(n)}
            for c, m, f, n, e in zip(centers, self.mean_p, self.freq, self.counts, self.empty)
        ]

    def to_dict(self):
        return {"edges": self.edges.tolist(), "ece": self.ece, "brier": self.brier,
                "bins": self.reliability_rows()}


def bin_index(probs, n_bins=NUM_BINS):
    """Uniform bins on [0, 1]; the last bin is closed so p = 1 lands in it."""
    return np.minimum((np.asarray(probs) * n_bins).astype(np.int64), n_bins - 1)


def calibration_report(probs, labels, n_bins=NUM_BINS) -> CalibrationReport:
    p, y = _check_pair(np.asarray(probs, dtype=np.float64), np.asarray(labels, dtype=np.float64))
    b = brier(p, y)
    idx = bin_index(p, n_bins)
    counts = np.bincount(idx, minlength=n_bins)
    sum_p = np.bincount(idx, weights=p, minlength=n_bins)
    sum_y = np.bincount(idx, weights=y, minlength=n_bins)
    empty = counts == 0
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_p = np.where(empty, np.nan, sum_p / counts)
        freq = np.where(empty, np.nan, sum_y / counts)
    gaps = np.where(empty, 0.0, np.abs(np.nan_to_num(freq) - np.nan_to_num(mean_p)))
    ece = float((counts / p.size * gaps).sum())
    return CalibrationReport(np.linspace(0, 1, n_bins + 1), mean_p, freq, counts, empty, ece, b)


# ------------------------------------------------------------------ sweeps


@dataclass
class RobustnessCurve:
    kind: str
    axis: list
    mean: list
    per_seed: list  # per_seed[i][s]: score at level i for noise seed s
    seeds: list
    metric: str

    def __post_init__(self):
        if len(self.axis) != len(self.mean) or len(self.axis) != len(self.per_seed):
            raise EvalError("score count does not match the axis")
        if any(b <= a for a, b in zip(self.axis, self.axis[1:])):
            raise EvalError("axis values must be strictly increasing")

    def to_dict(self):
        return {"kind": self.kind, "axis": list(self.axis), "mean": list(self.mean),
                "per_seed": [list(r) for r in self.per_seed], "seeds": list(self.seeds),
                "metric": self.metric}


def _logits(checkpoint, sequences, noise_delta=0.0, rng=None):
    ids, lengths = encode_batch(list(sequences), checkpoint.config)
    emb = None
    if noise_delta > 0:
        emb = perturb_embeddings(checkpoint.params["tok_emb"][ids], noise_delta, rng)
    return forward_ids(checkpoint, ids, lengths, embeddings=emb).logits.data


def score_logits(logits, examples, metric, regression):
    labels = np.array([ex.target for ex in examples])
    return task_score(predictions_from_logits(logits, regression), labels, metric)


def clean_score(checkpoint, examples, metric):
    logits = _logits(checkpoint, [ex.tokens() for ex in examples])
    return score_logits(logits, examples, metric, checkpoint.config.regression)


def _level_rng(seed, kind, level_index):
    return np.random.default_rng(np.random.SeedSequence([seed, kind, level_index]))


def perturbation_sweep(checkpoint, examples, deltas, seeds=(0,), metric="accuracy"):
    deltas = [float(d) for d in deltas]
    if not deltas:
        raise EvalError("delta list is empty")
    seqs = [ex.tokens() for ex in examples]
    reg = checkpoint.config.regression
    per = []
    for i, d in enumerate(deltas):
        row = []
        for s in seeds:
            lg = _logits(checkpoint, seqs, d, _level_rng(s, 1, i))
            row.append(score_logits(lg, examples, metric, reg))
        per.append(row)
    return RobustnessCurve("perturbation", deltas, [float(np.mean(r)) for r in per], per,
                           list(seeds), metric)


def corruption_sweep(checkpoint, examples, rates=DEFAULT_CORRUPTION_RATES, seeds=(0,),
                     metric="accuracy"):
    rates = [float(r) for r in rates]
    if not rates:
        raise EvalError("rate list is empty")
    V = checkpoint.config.vocab_size
    reg = checkpoint.config.regression
    per = []
    for i, r in enumerate(rates):
        row = []
        for s in seeds:
            rng = _level_rng(s, 2, i)
            seqs = [corrupt_tokens(ex.tokens(), r, rng, V) for ex in examples]
            row.append(score_logits(_logits(checkpoint, seqs), examples, metric, reg))
        per.append(row)
    return RobustnessCurve("corruption", rates, [float(np.mean(r)) for r in per], per,
                           list(seeds), metric)


# ------------------------------------------------------------------ reports

CSV_FIELDS = ("task", "method", "seed", "kind", "level", "metric", "score")


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    calibration: list = field(default_factory=list)
    version: int = REPORT_VERSION

    def add_curve(self, task, method, seed, curve: RobustnessCurve):
        for level, score in zip(curve.axis, curve.mean):
            self.rows.append({"task": task, "method": method, "seed": seed, "kind": curve.kind,
                              "level": level, "metric": curve.metric, "score": score})

    def add_calibration(self, task, method, seed, report: CalibrationReport):
        self.calibration.append({"task": task, "method": method, "seed": seed, **report.to_dict()})

    def to_json(self):
        return json.dumps({"version": self.version, "rows": self.rows,
                           "calibration": self.calibration}, indent=1, sort_keys=True)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in CSV_FIELDS})
        return buf.getvalue()

    def mean(self, task, method, kind, level):
        vals = [r["score"] for r in self.rows if r["task"] == task and r["method"] == method
                and r["kind"] == kind and r["level"] == level]
        if not vals:
            raise KeyError((task, method, kind, level))
        return float(np.mean(vals))

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        if d.get("version") != REPORT_VERSION:
            raise EvalError(f"unsupported report version {d.get('version')!r}")
        return cls(d["rows"], d["calibration"], d["version"])


def evaluate_run(checkpoint, examples, metric, *, task="", method="", seed=0,
                 deltas=(0.0,), rates=DEFAULT_CORRUPTION_RATES, noise_seeds=(0,), report=None):
    """Clean score, perturbation and corruption curves, plus Brier/calibration for binary heads."""
    report = report or EvalReport()
    clean = clean_score(checkpoint, examples, metric)
    report.rows.append({"task": task, "method": method, "seed": seed, "kind": "clean",
                        "level": 0.0, "metric": metric, "score": clean})
    if len(deltas):
        report.add_curve(task, method, seed,
                         perturbation_sweep(checkpoint, examples, deltas, noise_seeds, metric))
    if len(rates):
        report.add_curve(task, method, seed,
                         corruption_sweep(checkpoint, examples, rates, noise_seeds, metric))
    cfg = checkpoint.config
    if not cfg.regression and cfg.num_classes == 2:
        probs = positive_probs(_logits(checkpoint, [ex.tokens() for ex in examples]))
        labels = np.array([ex.target for ex in examples])
        report.add_calibration(task, method, seed, calibration_report(probs, labels))
    return report
