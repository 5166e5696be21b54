"""Latent-space analysis: LDA, classification metrics, Fisher scores, traversals."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.linalg

from .phantom import METADATA_KEYS


# ---------------------------------------------------------------- LDA

@dataclass
class LdaModel:
    classes: list
    means: np.ndarray          # (C, d) class means
    priors: np.ndarray         # (C,)
    within: np.ndarray         # S_w (d, d)
    between: np.ndarray        # S_b (d, d)
    reg: float
    eigenvalues: np.ndarray    # (k,) decreasing
    basis: np.ndarray          # W (d, k), k <= C-1
    projected_means: np.ndarray
    pooled_cov: np.ndarray     # within-class covariance in projected space
    train_projection: np.ndarray = field(repr=False, default=None)

    @property
    def n_components(self) -> int:
        return self.basis.shape[1]


def _scatter(x: np.ndarray, y: np.ndarray, classes):
    d = x.shape[1]
    overall = x.mean(axis=0)
    means = np.empty((len(classes), d))
    counts = np.empty(len(classes))
    sw = np.zeros((d, d))
    sb = np.zeros((d, d))
    for i, c in enumerate(classes):
        xc = x[y == c]
        counts[i] = len(xc)
        means[i] = xc.mean(axis=0)
        dc = xc - means[i]
        sw += dc.T @ dc
        dm = (means[i] - overall)[:, None]
        sb += counts[i] * (dm @ dm.T)
    return means, counts, (sw + sw.T) / 2, (sb + sb.T) / 2


def lda_fit(latents, labels, classes: Sequence | None = None, reg: float | None = None) -> LdaModel:
    """Fit LDA by solving ``S_b w = lambda (S_w + reg I) w``.

    ``reg=None`` uses ``1e-6 * trace(S_w) / d``. At most ``C - 1`` directions are
    kept, ordered by decreasing eigenvalue, each normalized so that
    ``w^T (S_w + reg I) w = 1`` and signed so its largest-magnitude entry is
    positive.
    """
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(labels)
    if x.ndim != 2 or x.shape[1] < 1 or len(x) != len(y):
        raise ValueError(f"latents must be (n, d) matching labels, got {x.shape} and {y.shape}")
    classes = list(classes) if classes is not None else sorted(set(y.tolist()))
    classes = [c for c in classes if np.any(y == c)]
    if len(classes) < 2:
        raise ValueError("LDA needs at least two classes")
    for c in classes:
        if np.sum(y == c) < 2:
            raise ValueError(f"class {c!r} has fewer than two samples")
    means, counts, sw, sb = _scatter(x, y, classes)
    d = x.shape[1]
    if reg is None:
        reg = 1e-6 * np.trace(sw) / d
    a = sw + reg * np.eye(d)
    if reg == 0 and np.linalg.matrix_rank(sw) < d:
        raise ValueError("within-class scatter is singular; pass reg > 0 (shrinkage) to regularize")
    try:
        evals, evecs = scipy.linalg.eigh(sb, a)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"generalized eigenproblem failed ({exc}); increase reg") from exc
    k = min(len(classes) - 1, d)
    order = np.argsort(evals)[::-1][:k]
    evals, w = evals[order], evecs[:, order]
    signs = np.sign(w[np.argmax(np.abs(w), axis=0), np.arange(k)])
    w = w * np.where(signs == 0, 1.0, signs)
    proj = x @ w
    pmeans = means @ w
    resid = proj - pmeans[[classes.index(v) for v in y.tolist()]]
    dof = max(len(x) - len(classes), 1)
    pooled = resid.T @ resid / dof
    return LdaModel(classes, means, counts / counts.sum(), sw, sb, float(reg), evals, w, pmeans, pooled, proj)


def lda_project(model: LdaModel, latents) -> np.ndarray:
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :] if model.basis.shape[0] > 1 else x[:, None]
    if x.shape[1] != model.basis.shape[0]:
        raise ValueError(f"latent dimension {x.shape[1]} != model dimension {model.basis.shape[0]}")
    return x @ model.basis


def lda_classify(model: LdaModel, latents) -> list:
    """Nearest projected class mean under the pooled projected covariance.

    Ties go to the class listed first in ``model.classes``.
    """
    p = lda_project(model, latents)
    inv = np.linalg.pinv(model.pooled_cov)
    diff = p[:, None, :] - model.projected_means[None, :, :]
    dist = np.einsum("nck,kl,ncl->nc", diff, inv, diff)
    return [model.classes[i] for i in np.argmin(dist, axis=1)]


def eigen_residuals(model: LdaModel) -> np.ndarray:
    """``||S_b w - lambda (S_w + reg I) w|| / ||w||`` per retained direction."""
    a = model.within + model.reg * np.eye(model.within.shape[0])
    out = []
    for lam, w in zip(model.eigenvalues, model.basis.T):
        out.append(np.linalg.norm(model.between @ w - lam * (a @ w)) / np.linalg.norm(w))
    return np.array(out)


# ---------------------------------------------------------------- metrics

@dataclass
class ClassCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class ConfusionStats:
    classes: list
    counts: dict
    matrix: np.ndarray | None = None   # rows actual, columns predicted

    @classmethod
    def from_counts(cls, counts: Mapping) -> "ConfusionStats":
        """Build from per-class ``(TP, FP, FN, TN)`` tuples or mappings."""
        out = {}
        for c, v in counts.items():
            if isinstance(v, Mapping):
                v = (v["tp"], v["fp"], v["fn"], v["tn"])
            tp, fp, fn, tn = (int(a) for a in v)
            if min(tp, fp, fn, tn) < 0:
                raise ValueError(f"negative count for class {c!r}")
            out[c] = ClassCounts(tp, fp, fn, tn)
        return cls(list(counts), out)

    def totals(self) -> dict:
        return {c: k.total for c, k in self.counts.items()}

    def to_dict(self) -> dict:
        pr = precision_recall(self)
        return {str(c): {"tp": k.tp, "fp": k.fp, "fn": k.fn, "tn": k.tn,
                         "precision": pr[c][0], "recall": pr[c][1]}
                for c, k in self.counts.items()}


def confusion_stats(predicted: Sequence, actual: Sequence, classes: Sequence) -> ConfusionStats:
    """One-vs-rest TP/FP/FN/TN per class plus the full confusion matrix."""
    classes = list(classes)
    if len(predicted) != len(actual):
        raise ValueError(f"length mismatch: {len(predicted)} predictions vs {len(actual)} labels")
    index = {c: i for i, c in enumerate(classes)}
    mat = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for p, a in zip(predicted, actual):
        if p not in index or a not in index:
            bad = p if p not in index else a
            raise ValueError(f"label {bad!r} is not in the class list")
        mat[index[a], index[p]] += 1
    n = int(mat.sum())
    counts = {}
    for c, i in index.items():
        tp = int(mat[i, i])
        fn = int(mat[i].sum()) - tp
        fp = int(mat[:, i].sum()) - tp
        counts[c] = ClassCounts(tp, fp, fn, n - tp - fp - fn)
    return ConfusionStats(classes, counts, mat)


def precision_recall(stats: ConfusionStats) -> dict:
    """Per class ``(precision, recall)``; ``None`` where the denominator is zero."""
    out = {}
    for c, k in stats.counts.items():
        prec = k.tp / (k.tp + k.fp) if k.tp + k.fp > 0 else None
        rec = k.tp / (k.tp + k.fn) if k.tp + k.fn > 0 else None
        out[c] = (prec, rec)
    return out


def accuracy(predicted: Sequence, actual: Sequence) -> float:
    if not len(actual):
        raise ValueError("accuracy of an empty set")
    return float(np.mean([p == a for p, a in zip(predicted, actual)]))


# ---------------------------------------------------------------- per-dimension scores

def fisher_score_per_dim(latents, labels) -> np.ndarray:
    """Variance of class means over mean within-class variance, per dimension.

    Both variances are population (ddof=0) and unweighted across classes. A
    dimension with zero within-class variance scores ``inf`` (``nan`` is never
    returned: identical means with zero spread score 0).
    """
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(labels)
    classes = sorted(set(y.tolist()))
    if len(classes) < 2:
        raise ValueError("fisher scores need at least two classes")
    means = np.stack([x[y == c].mean(axis=0) for c in classes])
    within = np.stack([x[y == c].var(axis=0) for c in classes]).mean(axis=0)
    between = means.var(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        score = between / within
    score = np.where(within == 0, np.where(between == 0, 0.0, np.inf), score)
    return score


def latent_traversal(model, dim: int, values: Iterable[float]) -> list[np.ndarray]:
    """Decode ``value * e_dim`` for each value, all other coordinates zero."""
    from .models.inference import decode

    lat = model.latent_dim
    if not 0 <= dim < lat:
        raise ValueError(f"dimension {dim} out of range for latent_dim {lat}")
    values = list(values)
    z = np.zeros((len(values), lat), dtype=np.float32)
    z[:, dim] = values
    vols = decode(z, model)
    return [vols[i] for i in range(len(values))]


# ---------------------------------------------------------------- metadata bias

def metadata_bias_report(records, attributes: Sequence[str] = METADATA_KEYS, gap_sd: float = 1.0,
                         bins: int = 10) -> dict:
    """Per-attribute, per-class mean/sd/histogram and flags for large mean gaps.

    A pair of classes is flagged on an attribute when their means differ by more
    than ``gap_sd`` pooled standard deviations. Attributes missing from any
    record are skipped with a warning.
    """
    records = list(records)
    classes = sorted({r.class_label for r in records}, key=str)
    report: dict = {"gap_sd": gap_sd, "attributes": {}}
    for attr in attributes:
        if any(attr not in r.metadata for r in records):
            warnings.warn(f"metadata attribute {attr!r} missing from some records; skipped")
            continue
        values = np.array([r.metadata[attr] for r in records], dtype=np.float64)
        edges = np.histogram_bin_edges(values, bins=bins)
        per_class = {}
        stats = {}
        for c in classes:
            v = np.array([r.metadata[attr] for r in records if r.class_label == c], dtype=np.float64)
            sd = float(v.std(ddof=1)) if len(v) > 1 else 0.0
            stats[c] = (float(v.mean()), sd, len(v))
            per_class[c] = {"n": len(v), "mean": stats[c][0], "sd": sd,
                            "histogram": np.histogram(v, bins=edges)[0].tolist()}
        flags = []
        for i, a in enumerate(classes):
            for b in classes[i + 1:]:
                ma, sa, na = stats[a]
                mb, sb, nb = stats[b]
                dof = na + nb - 2
                pooled = math.sqrt(((na - 1) * sa ** 2 + (nb - 1) * sb ** 2) / dof) if dof > 0 else 0.0
                gap = abs(ma - mb)
                if gap > gap_sd * pooled:
                    flags.append({"classes": [a, b], "gap": gap, "pooled_sd": pooled})
        report["attributes"][attr] = {"bin_edges": edges.tolist(), "classes": per_class,
                                      "flags": flags, "flagged": bool(flags)}
    return report


# ---------------------------------------------------------------- exports

def projections_csv(image_ids: Sequence[str], labels: Sequence, coords: np.ndarray, max_dims: int = 3) -> str:
    k = min(max_dims, coords.shape[1])
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["image_id", "class_label"] + [f"ld{i + 1}" for i in range(k)])
    for iid, lab, row in zip(image_ids, labels, coords):
        w.writerow([iid, lab] + [repr(float(v)) for v in row[:k]])
    return out.getvalue()
