"""Fidelity, diversity, memorization, mIoU, and image-level confusion metrics.

The feature space is a fixed, seeded, randomly initialized strided conv
encoder (a standard small-scale stand-in for a pretrained embedding). That
makes absolute Frechet-distance and perceptual-distance values incomparable
to published numbers; only orderings between runs sharing one extractor are
meaningful, and that is how the acceptance suite uses them. A pretrained
extractor can be plugged in through the same interface.

All metrics operate on image channels only; mask planes never enter them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import torch
from torch import nn


class FeatureExtractor:
    """Seeded 4-layer strided conv encoder exposing per-layer features."""

    def __init__(self, seed: int = 0, channels=(16, 32, 64, 64)):
        self.seed = seed
        self.channels = tuple(channels)
        gen = torch.Generator().manual_seed(seed)
        layers = []
        prev = 3
        for c in self.channels:
            conv = nn.Conv2d(prev, c, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen)
                                  / np.sqrt(prev * 9))
                conv.bias.zero_()
            layers.append(conv)
            prev = c
        self.layers = layers
        for conv in self.layers:
            conv.eval()
            for p in conv.parameters():
                p.requires_grad_(False)

    @property
    def name(self) -> str:
        return f"seeded-random-conv(seed={self.seed})"

    @property
    def dim(self) -> int:
        return self.channels[-1]

    def _to_tensor(self, images) -> torch.Tensor:
        arr = np.asarray([np.asarray(im, dtype=np.float32)[..., :3] for im in images])
        return torch.from_numpy(arr.transpose(0, 3, 1, 2))

    @torch.no_grad()
    def layer_features(self, images) -> list[np.ndarray]:
        """Per-layer activations flattened to (n, d_layer)."""
        x = self._to_tensor(images)
        out = []
        for conv in self.layers:
            x = torch.nn.functional.leaky_relu(conv(x), 0.2)
            out.append(x.reshape(x.shape[0], -1).numpy().astype(np.float64))
        return out

    def features(self, images) -> np.ndarray:
        """Final-layer globally pooled embedding, (n, dim)."""
        x = self._to_tensor(images)
        with torch.no_grad():
            for conv in self.layers:
                x = torch.nn.functional.leaky_relu(conv(x), 0.2)
            return x.mean(dim=(2, 3)).numpy().astype(np.float64)


@dataclass
class MetricReport:
    fid: float
    diversity: float
    memorization: dict
    n_generated: int
    n_reference: int
    extractor: str
    extra: dict = field(default_factory=dict)

    def flat(self) -> dict:
        d = {"fid": self.fid, "diversity": self.diversity,
             "mean_nn_distance": self.memorization["mean_nn_distance"],
             "duplicate_fraction": self.memorization["duplicate_fraction"],
             "n_generated": self.n_generated, "n_reference": self.n_reference,
             "extractor": self.extractor}
        d.update(self.extra)
        return d


def _stats(feats: np.ndarray, reg: float):
    mu = feats.mean(axis=0)
    if feats.shape[0] < 2:
        cov = np.zeros((feats.shape[1], feats.shape[1]))
    else:
        cov = np.cov(feats, rowvar=False)
    return mu, cov + reg * np.eye(feats.shape[1])


def fid(set_a, set_b, f: FeatureExtractor, reg: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits of the two feature clouds."""
    if len(set_a) == 0 or len(set_b) == 0:
        raise ValueError("fid requires non-empty sets")
    mu_a, cov_a = _stats(f.features(set_a), reg)
    mu_b, cov_b = _stats(f.features(set_b), reg)
    diff = mu_a - mu_b
    covmean, _ = scipy.linalg.sqrtm(cov_a @ cov_b, disp=False)
    covmean = np.real(covmean)
    val = float(diff @ diff + np.trace(cov_a + cov_b - 2.0 * covmean))
    return max(val, 0.0)


def perceptual_distance(feats_a: list[np.ndarray], feats_b: list[np.ndarray],
                        i: int, j: int) -> float:
    """Multi-layer L2 between samples i and j, each layer unit-normalized."""
    total = 0.0
    for la, lb in zip(feats_a, feats_b):
        va = la[i] / (np.linalg.norm(la[i]) + 1e-12)
        vb = lb[j] / (np.linalg.norm(lb[j]) + 1e-12)
        total += float(np.linalg.norm(va - vb))
    return total / len(feats_a)


def diversity(images, f: FeatureExtractor) -> float:
    """Mean pairwise perceptual distance over all unordered pairs."""
    n = len(images)
    if n < 2:
        raise ValueError("diversity requires at least 2 images")
    feats = f.layer_features(images)
    total, pairs = 0.0, 0
    for i in range(n):
        for j in range(i + 1, n):
            total += perceptual_distance(feats, feats, i, j)
            pairs += 1
    return total / pairs


def memorization(generated, train, f: FeatureExtractor,
                 dup_fraction_of_train_spread: float = 0.01) -> dict:
    """Nearest-training-neighbor distance statistics of generated samples.

    duplicate threshold = 1% of the mean intra-train pairwise distance, so the
    score is scale-free in feature space.
    """
    if len(generated) == 0 or len(train) == 0:
        raise ValueError("memorization requires non-empty sets")
    fg = f.layer_features(generated)
    ft = f.layer_features(train)
    nn_dist = np.array([
        min(perceptual_distance(fg, ft, i, j) for j in range(len(train)))
        for i in range(len(generated))])
    if len(train) >= 2:
        spread = np.mean([perceptual_distance(ft, ft, i, j)
                          for i in range(len(train)) for j in range(i + 1, len(train))])
    else:
        spread = 0.0
    tau = dup_fraction_of_train_spread * spread
    return {"mean_nn_distance": float(nn_dist.mean()),
            "duplicate_fraction": float((nn_dist <= tau).mean()),
            "tau_dup": float(tau)}


def metric_report(generated, reference, f: FeatureExtractor, **extra) -> MetricReport:
    return MetricReport(
        fid=fid(generated, reference, f),
        diversity=diversity(generated, f),
        memorization=memorization(generated, reference, f),
        n_generated=len(generated), n_reference=len(reference),
        extractor=f.name, extra=extra)


# ---------------------------------------------------------------------------
# segmentation / decision metrics


def miou(preds, gts, n_classes: int, include_background: bool = False) -> dict:
    """Dataset-level (micro) IoU per class, averaged over defect classes that
    appear in at least one prediction or ground truth."""
    inter = np.zeros(n_classes, dtype=np.int64)
    union = np.zeros(n_classes, dtype=np.int64)
    for p, g in zip(preds, gts, strict=True):
        p, g = np.asarray(p), np.asarray(g)
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
        if p.max() >= n_classes or g.max() >= n_classes:
            raise ValueError("class index >= n_classes")
        for k in range(n_classes):
            pk, gk = p == k, g == k
            inter[k] += np.count_nonzero(pk & gk)
            union[k] += np.count_nonzero(pk | gk)
    per_class = {}
    start = 0 if include_background else 1
    vals = []
    for k in range(start, n_classes):
        if union[k] == 0:
            continue  # class absent everywhere, excluded from the mean
        iou = inter[k] / union[k]
        per_class[k] = float(iou)
        vals.append(iou)
    return {"per_class_iou": per_class,
            "mean": float(np.mean(vals)) if vals else 0.0}


def image_confusion(pred_labels, gt_labels) -> dict:
    """Image-level confusion with 'defective' as the positive class.

    recall = TP/(TP+FN), fpr = FP/(FP+TN); each reported as None when its
    denominator is zero.
    """
    if len(pred_labels) != len(gt_labels):
        raise ValueError("label list length mismatch")
    tp = fp = tn = fn = 0
    for p, g in zip(pred_labels, gt_labels):
        p, g = _as_positive(p), _as_positive(g)
        if g and p:
            tp += 1
        elif g and not p:
            fn += 1
        elif not g and p:
            fp += 1
        else:
            tn += 1
    recall = tp / (tp + fn) if (tp + fn) else None
    fpr = fp / (fp + tn) if (fp + tn) else None
    return {"TP": tp, "FP": fp, "TN": tn, "FN": fn, "recall": recall, "fpr": fpr}


def _as_positive(label) -> bool:
    if isinstance(label, str):
        return {"defective": True, "benign": False}[label]
    return bool(label)


def write_report(report: MetricReport, path) -> None:
    from pathlib import Path

    lines = [f"{k}={v}" for k, v in sorted(report.flat().items())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
