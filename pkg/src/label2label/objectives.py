"""Weighted binary cross-entropy objectives and attribute-recognition metrics."""

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DegenerateAttribute, GammaOutOfRange, NonFiniteLoss, ShapeMismatch

PROB_EPS = 1e-12


def attribute_weights(gamma):
    """Return ``w(y)`` for the exponential scheme w = y*e^(1-gamma) + (1-y)*e^gamma."""
    gamma = np.asarray(gamma, dtype=np.float64)
    if np.any(gamma < 0) or np.any(gamma > 1):
        raise GammaOutOfRange("positive ratios must lie in [0, 1]")
    pos = np.exp(1.0 - gamma)
    neg = np.exp(gamma)

    def weights(y):
        y = np.asarray(y, dtype=np.float64)
        return y * pos + (1.0 - y) * neg

    return weights


@dataclass
class WeightScheme:
    kind: str = "uniform"
    gamma: np.ndarray = None

    def __post_init__(self):
        if self.kind not in ("uniform", "exponential"):
            raise ValueError(f"unknown weighting {self.kind!r}")
        if self.kind == "exponential":
            if self.gamma is None:
                raise ValueError("exponential weighting needs per-attribute positive ratios")
            self._fn = attribute_weights(self.gamma)

    def __call__(self, y):
        y = np.asarray(y, dtype=np.float64)
        if self.kind == "uniform":
            return np.ones_like(y)
        return self._fn(y)


def bce_loss(probs, y, w=None, clamp=True):
    """-sum_j w_j (y_j log p_j + (1-y_j) log(1-p_j)).

    ``probs`` is a Tensor of shape (M,) or (B, M). For a batch the per-sample
    sums are averaged over B. Probabilities are clamped to
    [1e-12, 1 - 1e-12] before the log unless ``clamp`` is False.
    """
    y = np.asarray(y, dtype=np.float64)
    if probs.shape != y.shape:
        raise ShapeMismatch(f"probs {probs.shape} vs labels {y.shape}")
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=np.float64)
    if clamp:
        p = T.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    else:
        if np.any(probs.data <= 0) or np.any(probs.data >= 1):
            raise NonFiniteLoss("saturated probabilities without clamping")
        p = probs
    pos = T.Tensor(w * y)
    neg = T.Tensor(w * (1.0 - y))
    ll = T.log(p) * pos + T.log(1.0 - p) * neg
    total = T.reduce_sum(ll)
    if probs.ndim == 2:
        total = total * (1.0 / probs.shape[0])
    return -total


def total_loss(l, p, y, lam, scheme=None):
    """L_aqn + lam * L_mlm; returns (total, l_aqn, l_mlm)."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    scheme = scheme or WeightScheme()
    w = scheme(y)
    l_aqn = bce_loss(l, y, w)
    if p is None:
        return l_aqn, l_aqn, None
    l_mlm = bce_loss(p, y, w)
    return l_aqn + l_mlm * float(lam), l_aqn, l_mlm


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _as_binary(a):
    a = np.asarray(a)
    if a.ndim != 2:
        raise ShapeMismatch(f"expected an (N, M) matrix, got {a.shape}")
    return a.astype(bool)


def attribute_counts(preds, labels):
    pr, lb = _as_binary(preds), _as_binary(labels)
    if pr.shape != lb.shape:
        raise ShapeMismatch(f"preds {pr.shape} vs labels {lb.shape}")
    tp = (pr & lb).sum(axis=0)
    tn = (~pr & ~lb).sum(axis=0)
    p = lb.sum(axis=0)
    n = (~lb).sum(axis=0)
    return tp, tn, p, n


def compute_mA(preds, labels):
    tp, tn, p, n = attribute_counts(preds, labels)
    bad = np.flatnonzero((p == 0) | (n == 0))
    if bad.size:
        raise DegenerateAttribute(f"attributes {bad.tolist()} lack positives or negatives")
    m = tp.size
    return math.fsum((tp / p + tn / n).tolist()) / (2 * m)


def compute_instance_metrics(preds, labels):
    """Example-based (accuracy, precision, recall, F1).

    Empty sets: accuracy term is 1 when both sets are empty; precision term
    is 0 for an empty prediction unless the label set is empty too (then 1);
    recall mirrors this for an empty label set. F1 is the harmonic mean of
    the averaged precision and recall.
    """
    pr, lb = _as_binary(preds), _as_binary(labels)
    if pr.shape != lb.shape:
        raise ShapeMismatch(f"preds {pr.shape} vs labels {lb.shape}")
    inter = (pr & lb).sum(axis=1).astype(np.float64)
    union = (pr | lb).sum(axis=1).astype(np.float64)
    n_pred = pr.sum(axis=1).astype(np.float64)
    n_true = lb.sum(axis=1).astype(np.float64)
    both_empty = (n_pred == 0) & (n_true == 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        acc = np.where(union > 0, inter / union, 1.0)
        prec = np.where(n_pred > 0, inter / n_pred, np.where(both_empty, 1.0, 0.0))
        rec = np.where(n_true > 0, inter / n_true, np.where(both_empty, 1.0, 0.0))
    # correctly rounded sums keep results independent of summation order
    n = len(acc)
    a, p, r = (math.fsum(v.tolist()) / n for v in (acc, prec, rec))
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return a, p, r, f1


def per_attribute_error(preds, labels):
    tp, tn, p, n = attribute_counts(preds, labels)
    total = p + n
    err = (total - tp - tn) / total
    return err, math.fsum(err.tolist()) / err.size


@dataclass
class MetricReport:
    mA: float
    accuracy: float
    precision: float
    recall: float
    f1: float
    mean_error: float
    per_attribute_error: list
    tp: list
    tn: list
    positives: list
    negatives: list
    n_samples: int
    attribute_names: list = field(default_factory=list)

    KEYS = ("mA", "accuracy", "precision", "recall", "f1", "mean_error", "per_attribute_error",
            "tp", "tn", "positives", "negatives", "n_samples", "attribute_names")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.KEYS}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d):
        validate_report_dict(d)
        return cls(**{k: d[k] for k in cls.KEYS})

    def write_error_csv(self, path):
        names = self.attribute_names or [f"attr_{j}" for j in range(len(self.per_attribute_error))]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["attribute_name", "error"])
            for name, e in zip(names, self.per_attribute_error):
                wr.writerow([name, repr(float(e))])


def validate_report_dict(d):
    """Check key order, types and ranges of a serialized report."""
    if list(d) != list(MetricReport.KEYS):
        raise ValueError(f"report keys {list(d)} do not match {list(MetricReport.KEYS)}")
    for k in ("mA", "accuracy", "precision", "recall", "f1", "mean_error"):
        v = d[k]
        if v is not None and not (isinstance(v, float) and 0.0 <= v <= 1.0):
            raise ValueError(f"{k}={v!r} is not a rate in [0, 1]")
    m = len(d["per_attribute_error"])
    for k in ("tp", "tn", "positives", "negatives"):
        if len(d[k]) != m or not all(isinstance(x, int) and x >= 0 for x in d[k]):
            raise ValueError(f"{k} must be {m} non-negative ints")
    if not isinstance(d["n_samples"], int) or d["n_samples"] < 1:
        raise ValueError("n_samples must be a positive int")
    return True


def metric_report(preds, labels, attribute_names=None):
    preds = np.asarray(preds).astype(np.int64)
    labels = np.asarray(labels).astype(np.int64)
    tp, tn, p, n = attribute_counts(preds, labels)
    try:
        ma = compute_mA(preds, labels)
    except DegenerateAttribute:
        ma = None
    acc, prec, rec, f1 = compute_instance_metrics(preds, labels)
    err, mean_err = per_attribute_error(preds, labels)
    return MetricReport(
        mA=ma, accuracy=acc, precision=prec, recall=rec, f1=f1, mean_error=mean_err,
        per_attribute_error=[float(e) for e in err],
        tp=[int(x) for x in tp], tn=[int(x) for x in tn],
        positives=[int(x) for x in p], negatives=[int(x) for x in n],
        n_samples=int(labels.shape[0]),
        attribute_names=list(attribute_names or [f"attr_{j}" for j in range(labels.shape[1])]),
    )
