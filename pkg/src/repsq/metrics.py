"""Evaluation metrics for abstractions (CD, EMD) and segmentations (mIoU, NMI, DBI)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.special import logsumexp

EXACT_EMD_LIMIT = 512


@dataclass
class LabeledCloud:
    points: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.size == 0 or self.labels.min() < 0:
            raise ValueError("labels must be nonempty and nonnegative")


def _labels(x) -> np.ndarray:
    return np.asarray(x.labels if isinstance(x, LabeledCloud) else x).ravel()


def _points(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("expected a nonempty (n, d) point array")
    return x


def chamfer(a, b) -> float:
    """Squared-distance chamfer: mean of the two directional mean squared NN distances."""
    a, b = _points(a), _points(b)
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return 0.5 * (np.mean(da**2) + np.mean(db**2))


def _sinkhorn_cost(cost: np.ndarray, reg: float, n_iter: int, tol: float) -> float:
    """Transport cost of the entropic plan between uniform marginals (log-domain Sinkhorn)."""
    n, m = cost.shape
    log_a, log_b = np.full(n, -np.log(n)), np.full(m, -np.log(m))
    f, g = np.zeros(n), np.zeros(m)
    k = -cost / reg
    for _ in range(n_iter):
        f = reg * (log_a - logsumexp(k + g[None, :] / reg, axis=1))
        g_new = reg * (log_b - logsumexp(k + f[:, None] / reg, axis=0))
        if np.max(np.abs(g_new - g)) < tol:
            g = g_new
            break
        g = g_new
    plan = np.exp(k + f[:, None] / reg + g[None, :] / reg)
    return float((plan * cost).sum())


def emd(a, b, method: str = "auto", reg: float = None, n_iter: int = 5000) -> float:
    """Earth mover's distance between equal-size point sets as the mean matched distance.

    ``method="auto"`` solves the assignment exactly up to 512 points and
    switches to entropic optimal transport beyond; ``reg`` defaults to 0.2% of
    the median pairwise distance.
    """
    a, b = _points(a), _points(b)
    if len(a) != len(b):
        raise ValueError(f"emd needs equal sizes, got {len(a)} and {len(b)}")
    cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    if method == "auto":
        method = "exact" if len(a) <= EXACT_EMD_LIMIT else "sinkhorn"
    if method == "exact":
        rows, cols = linear_sum_assignment(cost)
        return float(cost[rows, cols].mean())
    if method != "sinkhorn":
        raise ValueError(f"unknown emd method {method!r}")
    if reg is None:
        reg = 2e-3 * max(float(np.median(cost)), 1e-12)
    return _sinkhorn_cost(cost, reg, n_iter, tol=1e-9 * reg)


def iou_matrix(pred, gt):
    pred, gt = _labels(pred), _labels(gt)
    if pred.shape != gt.shape:
        raise ValueError("label arrays must have the same length")
    p_ids, p_inv = np.unique(pred, return_inverse=True)
    g_ids, g_inv = np.unique(gt, return_inverse=True)
    inter = np.zeros((len(g_ids), len(p_ids)))
    np.add.at(inter, (g_inv, p_inv), 1)
    union = inter.sum(axis=1, keepdims=True) + inter.sum(axis=0, keepdims=True) - inter
    return inter / union


def miou(pred, gt) -> float:
    """Mean IoU over ground-truth segments under the IoU-maximizing one-to-one matching."""
    iou = iou_matrix(pred, gt)
    rows, cols = linear_sum_assignment(iou, maximize=True)
    return float(iou[rows, cols].sum() / iou.shape[0])


def nmi(pred, gt) -> float:
    """Mutual information normalized by the arithmetic mean of the two entropies."""
    pred, gt = _labels(pred), _labels(gt)
    if pred.shape != gt.shape:
        raise ValueError("label arrays must have the same length")
    _, p_inv = np.unique(pred, return_inverse=True)
    _, g_inv = np.unique(gt, return_inverse=True)
    n = len(pred)
    joint = np.zeros((p_inv.max() + 1, g_inv.max() + 1))
    np.add.at(joint, (p_inv, g_inv), 1)
    joint /= n
    pp, pg = joint.sum(axis=1), joint.sum(axis=0)
    h_p = -np.sum(pp * np.log(pp))
    h_g = -np.sum(pg * np.log(pg))
    if h_p == 0 and h_g == 0:
        return 1.0
    nz = joint > 0
    mi = np.sum(joint[nz] * np.log(joint[nz] / np.outer(pp, pg)[nz]))
    return float(np.clip(mi / (0.5 * (h_p + h_g)), 0.0, 1.0))


def dbi(points, labels, min_separation: float = 1e-12) -> float:
    """Davies-Bouldin index; centroid distances are floored at ``min_separation``."""
    points = _points(points)
    labels = _labels(labels)
    ids = np.unique(labels)
    if len(ids) < 2:
        raise ValueError("dbi needs at least two non-empty clusters")
    centroids = np.stack([points[labels == k].mean(axis=0) for k in ids])
    scatter = np.array([np.linalg.norm(points[labels == k] - c, axis=1).mean() for k, c in zip(ids, centroids)])
    sep = np.linalg.norm(centroids[:, None] - centroids[None], axis=-1)
    ratio = (scatter[:, None] + scatter[None, :]) / np.maximum(sep, min_separation)
    np.fill_diagonal(ratio, -np.inf)
    return float(ratio.max(axis=1).mean())
