"""Classification metrics, confusion matrices, PCA projections, and report output.

The report surface mirrors the comparative-evaluation layout: one CSV with a
row per metric (accuracy, F1, recall, precision) and a column per condition
(synthetic-eval vs sim-to-real, each for the raw-synthetic and converted
training arms), plus rendered confusion-matrix and PCA scatter figures.
"""

import csv
import io
import json
import os
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from .data import ArrayDataset, resize_batch
from .synthgen import LABEL_DEFORMED
from .trainers import CheckpointState, load_checkpoint

REPORT_CONDITIONS = ("synthetic_raw", "synthetic_converted", "sim_to_real_raw", "sim_to_real_converted")
REPORT_METRICS = ("accuracy", "f1", "recall", "precision")


@dataclass
class MetricsReport:
    """Confusion counts plus the derived metrics for one evaluation run.

    Metrics with a zero denominator are reported as 0.0 and named in
    ``degenerate``.
    """

    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    f1: float
    recall: float
    precision: float
    threshold: float
    dataset_id: str
    degenerate: list = field(default_factory=list)

    def to_dict(self):
        return {
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
            "accuracy": self.accuracy, "f1": self.f1, "recall": self.recall,
            "precision": self.precision, "threshold": self.threshold,
            "dataset_id": self.dataset_id, "degenerate": list(self.degenerate),
        }

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls(**json.load(fh))


def metrics_from_counts(tp, fp, tn, fn, threshold=0.5, dataset_id=""):
    """Derive accuracy/F1/recall/precision from confusion counts (0 on zero division)."""
    degenerate = []
    total = tp + fp + tn + fn
    if total == 0:
        raise ValueError("empty evaluation: no counts")
    accuracy = (tp + tn) / total
    if tp + fp > 0:
        precision = tp / (tp + fp)
    else:
        precision = 0.0
        degenerate.append("precision")
    if tp + fn > 0:
        recall = tp / (tp + fn)
    else:
        recall = 0.0
        degenerate.append("recall")
    if precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
        degenerate.append("f1")
    return MetricsReport(tp=int(tp), fp=int(fp), tn=int(tn), fn=int(fn), accuracy=accuracy,
                         f1=f1, recall=recall, precision=precision, threshold=threshold,
                         dataset_id=dataset_id, degenerate=degenerate)


def predict_probs(ckpt, manifest, batch_size=64):
    """Eval-mode deformation probabilities for every manifest entry, in entry order."""
    state = ckpt if isinstance(ckpt, CheckpointState) else load_checkpoint(ckpt)
    clf = state.nets["classifier"]
    clf.eval()
    data = ArrayDataset.from_manifest(manifest)
    images = resize_batch(data.images, int(state.extra.get("input_size", data.images.shape[-1])))
    probs = []
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            probs.append(clf(images[start : start + batch_size]))
    return torch.cat(probs).numpy(), data


def evaluate(ckpt, manifest, threshold=0.5, batch_size=64):
    """Evaluate a classifier checkpoint on a manifest at the given decision threshold."""
    if not manifest.entries:
        raise ValueError("evaluation manifest is empty")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    state = ckpt if isinstance(ckpt, CheckpointState) else load_checkpoint(ckpt)
    train_ids = set(state.extra.get("train_ids", ()))
    overlap = train_ids & {e.id for e in manifest.entries}
    if overlap:
        raise ValueError(f"evaluation ids overlap training ids: {sorted(overlap)[:5]} ...")
    probs, data = predict_probs(state, manifest, batch_size)
    truth = data.labels.numpy() > 0.5
    pred = probs >= threshold
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    tn = int(np.sum(~pred & ~truth))
    fn = int(np.sum(~pred & truth))
    dataset_id = f"{manifest.generator_seed:08x}-n{len(manifest.entries)}"
    return metrics_from_counts(tp, fp, tn, fn, threshold=threshold, dataset_id=dataset_id)


def confusion_matrix(report):
    """2x2 counts [[tp, fn], [fp, tn]] (rows: true class, cols: predicted)."""
    return np.array([[report.tp, report.fn], [report.fp, report.tn]], dtype=np.int64)


def render_confusion_text(matrix):
    """Plain-text confusion table; parseable back to the counts."""
    lines = [
        "confusion counts (rows=true, cols=predicted)",
        "              pred_deformed  pred_nondeformed",
        f"deformed      {int(matrix[0, 0]):>13d}  {int(matrix[0, 1]):>16d}",
        f"nondeformed   {int(matrix[1, 0]):>13d}  {int(matrix[1, 1]):>16d}",
    ]
    return "\n".join(lines)


def plot_confusion(matrix, path, title="confusion"):
    fig, ax = plt.subplots(figsize=(3.2, 3.0))
    ax.imshow(matrix, cmap="Blues")
    for (i, j), v in np.ndenumerate(matrix):
        ax.text(j, i, str(int(v)), ha="center", va="center",
                color="black" if v < matrix.max() * 0.6 else "white")
    ax.set_xticks([0, 1], ["deformed", "nondeformed"])
    ax.set_yticks([0, 1], ["deformed", "nondeformed"])
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


@dataclass
class PcaProjection:
    """Top-k principal axes of a feature matrix plus the projected points."""

    components: np.ndarray         # k x D, rows orthonormal
    explained_variance: np.ndarray  # k, non-increasing
    projected: np.ndarray          # n x k
    domains: list
    total_variance: float


def pca_fit(matrix, k):
    """PCA via SVD of the centered data; component signs are fixed for determinism."""
    n, d = matrix.shape
    if not 1 <= k <= min(n, d):
        raise ValueError(f"k={k} must lie in [1, min(n={n}, D={d})]")
    x = matrix - matrix.mean(axis=0, keepdims=True)
    _, svals, vt = np.linalg.svd(x, full_matrices=False)
    components = vt[:k]
    for row in components:  # orient: largest-magnitude coefficient positive
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    explained = (svals[:k] ** 2) / max(n - 1, 1)
    total = float(np.sum(svals**2) / max(n - 1, 1))
    return components, explained, x @ components.T, total


def pca_features(manifests, k, mode="features", ckpt=None, batch_size=64):
    """Project images from several domains onto the top-k principal axes.

    ``mode='features'`` uses the classifier's 64-d penultimate activations
    (requires ``ckpt``); ``mode='pixels'`` flattens raw images.  Points keep
    their manifest domain tags.
    """
    if len(manifests) < 2:
        raise ValueError("need manifests from at least 2 domains")
    rows, domains = [], []
    for manifest in manifests:
        data = ArrayDataset.from_manifest(manifest)
        if mode == "pixels":
            rows.append(data.images.reshape(len(data), -1).numpy())
        elif mode == "features":
            if ckpt is None:
                raise ValueError("mode='features' requires a classifier checkpoint")
            state = ckpt if isinstance(ckpt, CheckpointState) else load_checkpoint(ckpt)
            clf = state.nets["classifier"]
            clf.eval()
            images = resize_batch(data.images, int(state.extra.get("input_size", data.images.shape[-1])))
            with torch.no_grad():
                feats = [clf.penultimate(images[s : s + batch_size]) for s in range(0, len(data), batch_size)]
            rows.append(torch.cat(feats).numpy())
        else:
            raise ValueError(f"mode must be 'pixels' or 'features', got {mode!r}")
        domains.extend(data.domains)
    matrix = np.concatenate(rows).astype(np.float64)
    components, explained, projected, total = pca_fit(matrix, k)
    return PcaProjection(components=components, explained_variance=explained,
                         projected=projected, domains=domains, total_variance=total)


def domain_gap_score(proj, domain_a=None, domain_b=None):
    """Centroid distance between two domains in projected space, in pooled-std units."""
    tags = sorted(set(proj.domains))
    if len(tags) < 2:
        raise ValueError(f"need >= 2 domains, got {tags}")
    if domain_a is None and domain_b is None:
        if len(tags) != 2:
            raise ValueError(f"ambiguous domains {tags}; name two explicitly")
        domain_a, domain_b = tags
    labels = np.array(proj.domains)
    pts_a = proj.projected[labels == domain_a]
    pts_b = proj.projected[labels == domain_b]
    if len(pts_a) == 0 or len(pts_b) == 0:
        raise ValueError(f"domains {domain_a!r}/{domain_b!r} not both present in {tags}")
    mu_a, mu_b = pts_a.mean(axis=0), pts_b.mean(axis=0)
    dev = np.concatenate([pts_a - mu_a, pts_b - mu_b])
    pooled = np.sqrt(np.mean(dev**2))  # per-dimension pooled std
    return float(np.linalg.norm(mu_a - mu_b) / max(pooled, 1e-12))


def plot_pca(proj, path, title="feature embedding by domain"):
    fig, ax = plt.subplots(figsize=(4.5, 4.0))
    labels = np.array(proj.domains)
    for tag in sorted(set(proj.domains)):
        pts = proj.projected[labels == tag]
        ax.scatter(pts[:, 0], pts[:, 1] if proj.projected.shape[1] > 1 else np.zeros(len(pts)),
                   s=8, alpha=0.6, label=tag)
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2" if proj.projected.shape[1] > 1 else "")
    ax.legend(fontsize=8)
    ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def report_table(reports):
    """CSV text: metric rows x condition columns, mirroring the comparative table."""
    missing = [c for c in REPORT_CONDITIONS if c not in reports]
    if missing:
        raise ValueError(f"missing conditions: {missing}")
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["metric"] + list(REPORT_CONDITIONS))
    for metric in REPORT_METRICS:
        writer.writerow([metric] + [f"{getattr(reports[c], metric):.4f}" for c in REPORT_CONDITIONS])
    return buf.getvalue()


def save_image_grid(batches, path, max_cols=8):
    """One row per image batch (e.g. source vs converted), PNG on disk."""
    from .synthgen import encode_png

    rows = []
    for batch in batches:
        arr = batch.detach().clamp(-1, 1).cpu().numpy().transpose(0, 2, 3, 1)[:max_cols]
        rows.append(np.concatenate(list(arr), axis=1))
    grid = np.concatenate(rows, axis=0)
    encode_png(grid).save(path)
    return path
