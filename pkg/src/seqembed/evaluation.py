"""Feature-quality measurements: embeddings, cosine verification with a
k-fold threshold scan, cluster separation statistics, classification
accuracy, and 2-D scatter export.

Verification ground truth always compares underlying true classes, never
sequence labels, so datasets that went through the identity/sequence
split are scored against what the samples actually are.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

from .datasets import Dataset
from .errors import DimensionError, NumericError, ParameterError
from .network import EmbeddingModel
from .numerics import Rng, as_tensor

# Fixed class palette for scatter plots (10 distinguishable hex colors).
PALETTE = (
    "#e6194b", "#3cb44b", "#ffe119", "#4363d8", "#f58231",
    "#911eb4", "#46f0f0", "#f032e6", "#bcf60c", "#008080",
)


@dataclass(frozen=True)
class VerificationPair:
    index_a: int
    index_b: int
    same: bool

    def __post_init__(self):
        if self.index_a == self.index_b:
            raise ParameterError("a verification pair needs two distinct samples")


@dataclass
class ClusterReport:
    class_means: np.ndarray
    mean_intra_variance: float
    min_inter_centroid_distance: float
    fisher_ratio: float  # min inter distance^2 / mean intra variance


def embed_dataset(model: EmbeddingModel, dataset: Dataset,
                  batch_size: int = 256) -> np.ndarray:
    """One embedding row per sample, computed without augmentation."""
    if len(dataset) == 0:
        return np.empty((0, model.embedding_dim))
    rows = []
    for start in range(0, len(dataset), batch_size):
        feats, _ = model.forward(dataset.images[start:start + batch_size])
        rows.append(feats)
    return np.concatenate(rows, axis=0)


def cosine_similarity(a, b) -> float:
    a = as_tensor(a).reshape(-1)
    b = as_tensor(b).reshape(-1)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise NumericError("cosine similarity of a zero vector")
    return float(a @ b / (na * nb))


def make_verification_pairs(true_labels, rng: Rng, num_pairs: int,
                            same_fraction: float = 0.5) -> list[VerificationPair]:
    """Balanced same/different pairs drawn uniformly from the label array."""
    labels = np.asarray(true_labels)
    by_class = {c: np.flatnonzero(labels == c)
                for c in np.unique(labels)}
    multi = [c for c, idx in by_class.items() if idx.size >= 2]
    classes = sorted(by_class)
    if len(classes) < 2 or not multi:
        raise ParameterError("need at least two classes and one class "
                             "with two samples")
    n_same = int(round(num_pairs * same_fraction))
    pairs = []
    for _ in range(n_same):
        c = multi[rng.randint(len(multi))]
        idx = by_class[c]
        i = int(idx[rng.randint(idx.size)])
        j = int(idx[rng.randint(idx.size)])
        while j == i:
            j = int(idx[rng.randint(idx.size)])
        pairs.append(VerificationPair(i, j, True))
    while len(pairs) < num_pairs:
        ca = classes[rng.randint(len(classes))]
        cb = classes[rng.randint(len(classes))]
        if ca == cb:
            continue
        pairs.append(VerificationPair(int(by_class[ca][rng.randint(by_class[ca].size)]),
                                      int(by_class[cb][rng.randint(by_class[cb].size)]),
                                      False))
    return pairs


def _scan_best_threshold(sims, truth):
    """Threshold (predict same iff sim >= t) maximizing accuracy, scanned
    over all midpoints of the sorted similarities plus both extremes;
    ties resolve to the lowest threshold."""
    values = np.unique(sims)
    cands = np.concatenate([[values[0] - 1.0],
                            (values[:-1] + values[1:]) / 2.0,
                            [values[-1] + 1.0]])
    best_t, best_acc = None, -1.0
    for t in cands:
        acc = float(((sims >= t) == truth).mean())
        if acc > best_acc:
            best_t, best_acc = float(t), acc
    return best_t, best_acc


def verification_accuracy(features, pairs, folds: int,
                          shuffle_seed: int = 0) -> tuple[float, float]:
    """k-fold protocol: per fold, pick the accuracy-maximizing threshold
    on the other folds and score it on the held-out fold. Returns the mean
    held-out accuracy and the mean chosen threshold."""
    if folds < 2:
        raise ParameterError("folds must be >= 2")
    if len(pairs) < folds:
        raise ParameterError(f"{len(pairs)} pairs cannot fill {folds} folds")
    feats = as_tensor(features)
    sims = np.array([cosine_similarity(feats[p.index_a], feats[p.index_b])
                     for p in pairs])
    truth = np.array([p.same for p in pairs])
    order = Rng(shuffle_seed).permutation(len(pairs))
    sims, truth = sims[order], truth[order]
    fold_ids = np.arange(len(pairs)) % folds
    accs, thresholds = [], []
    for f in range(folds):
        hold = fold_ids == f
        t, _ = _scan_best_threshold(sims[~hold], truth[~hold])
        accs.append(float(((sims[hold] >= t) == truth[hold]).mean()))
        thresholds.append(t)
    return float(np.mean(accs)), float(np.mean(thresholds))


def classification_accuracy(head, features, labels) -> float:
    """Fraction of samples whose highest chief-head score matches the
    label (margin heads are scored margin-free; ranking is unaffected)."""
    feats = as_tensor(features)
    z = np.ones(len(feats), dtype=np.int64)  # no margin on any row
    logits, _ = head.forward(feats, np.zeros(len(feats), dtype=np.int64), z)
    return float((logits.argmax(axis=1) == np.asarray(labels)).mean())


def cluster_report(features, true_labels) -> ClusterReport:
    feats = as_tensor(features)
    labels = np.asarray(true_labels)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ParameterError("cluster report needs at least two classes")
    means = np.stack([feats[labels == c].mean(axis=0) for c in classes])
    variances = []
    for i, c in enumerate(classes):
        block = feats[labels == c]
        if len(block) < 2:
            variances.append(0.0)  # single sample: no spread to measure
        else:
            variances.append(float(((block - means[i]) ** 2).sum(axis=1).mean()))
    mean_var = float(np.mean(variances))
    dists = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=2)
    min_inter = float(dists[np.triu_indices(classes.size, k=1)].min())
    fisher = math.inf if mean_var == 0.0 else min_inter ** 2 / mean_var
    return ClusterReport(means, mean_var, min_inter, fisher)


def export_scatter(features, labels, path, width: int = 640,
                   height: int = 480) -> None:
    """Standalone SVG: one dot per sample, one fixed color per class,
    5% data margin, legend listing class ids."""
    feats = as_tensor(features)
    if feats.ndim != 2 or feats.shape[1] != 2:
        raise DimensionError("scatter export needs (n, 2) features")
    labels = np.asarray(labels)
    classes = [int(c) for c in np.unique(labels)]
    lo = feats.min(axis=0)
    hi = feats.max(axis=0)
    span = np.where(hi - lo == 0.0, 1.0, hi - lo)
    lo = lo - 0.05 * span
    hi = hi + 0.05 * span

    def to_px(p):
        x = (p[0] - lo[0]) / (hi[0] - lo[0]) * width
        y = height - (p[1] - lo[1]) / (hi[1] - lo[1]) * height
        return x, y

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for p, lab in zip(feats, labels):
        x, y = to_px(p)
        color = PALETTE[int(lab) % len(PALETTE)]
        parts.append(f'<circle class="sample" cx="{x!r}" cy="{y!r}" r="2" '
                     f'fill="{color}" data-label="{int(lab)}"/>')
    for i, c in enumerate(classes):
        y = 14 + 14 * i
        color = PALETTE[c % len(PALETTE)]
        parts.append(f'<rect class="legend-swatch" x="6" y="{y - 8}" '
                     f'width="10" height="10" fill="{color}"/>')
        parts.append(f'<text class="legend-label" x="20" y="{y}" '
                     f'font-size="11">{escape(str(c))}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))


def write_cluster_csv(report: ClusterReport, path) -> None:
    with open(path, "w") as fh:
        fh.write("metric,value\n")
        fh.write(f"mean_intra_variance,{report.mean_intra_variance!r}\n")
        fh.write(f"min_inter_centroid_distance,"
                 f"{report.min_inter_centroid_distance!r}\n")
        fh.write(f"fisher_ratio,{report.fisher_ratio!r}\n")


def summarize_cluster_report(report: ClusterReport) -> str:
    return ("cluster separation: "
            f"min inter-centroid distance {report.min_inter_centroid_distance:.6g}, "
            f"mean intra-class variance {report.mean_intra_variance:.6g}, "
            f"fisher ratio {report.fisher_ratio:.6g}")
