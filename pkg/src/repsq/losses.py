"""Loss terms of the fit and their scheduled weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial import cKDTree

from .decoders import UnfreezeStage


@dataclass
class LossConfig:
    lambda1: float = 1.0  # Hausdorff (anti-anchor)
    lambda2: float = 0.3  # anti-collapse
    lambda3: float = 0.1  # compactness
    lambda4: float = 0.01  # alignment
    delta_wd: float = 0.05
    delta_c: float = 0.01
    cuboid_multipliers: tuple = (2.0, 3.0)  # (lambda2, lambda3) during the cuboid-like stage
    hd_cutoff: float = 0.1  # fraction of steps after which lambda1 is 0

    def __post_init__(self):
        self.cuboid_multipliers = tuple(self.cuboid_multipliers)
        if min(self.lambda1, self.lambda2, self.lambda3, self.lambda4) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.delta_wd < 0 or self.delta_c < 0:
            raise ValueError("deltas must be nonnegative")

    def weights(self, step=None, total=None, stage=None) -> tuple:
        """Effective (lambda1..lambda4) at ``step``; base weights when ``step`` is None."""
        l1, l2, l3, l4 = self.lambda1, self.lambda2, self.lambda3, self.lambda4
        if step is None:
            return l1, l2, l3, l4
        if step >= self.hd_cutoff * total:
            l1 = 0.0
        if stage == UnfreezeStage.CUBOID_LIKE:
            l2 *= self.cuboid_multipliers[0]
            l3 *= self.cuboid_multipliers[1]
        return l1, l2, l3, l4


@dataclass
class LossBreakdown:
    recon: torch.Tensor
    hd: torch.Tensor
    wd: torch.Tensor
    compact: torch.Tensor
    align: torch.Tensor
    total: torch.Tensor
    weights: tuple

    def as_dict(self) -> dict:
        out = {k: float(torch.as_tensor(getattr(self, k)).detach()) for k in ("recon", "hd", "wd", "compact", "align", "total")}
        out["weights"] = list(self.weights)
        return out


def safe_norm(diff: torch.Tensor) -> torch.Tensor:
    """Euclidean norm over the last axis whose gradient at 0 is 0 instead of NaN."""
    sq = (diff**2).sum(-1)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def point_to_primitive(x, samples) -> torch.Tensor:
    """Distance from point ``x`` (3,) to the nearest of ``samples`` (I, 3)."""
    samples = torch.as_tensor(samples)
    x = torch.as_tensor(x, dtype=samples.dtype)
    d = safe_norm(samples - x)
    return d.min()


def coverage(samples, cloud) -> torch.Tensor:
    """Mean over samples of the distance to the nearest cloud point."""
    samples = torch.as_tensor(samples)
    cloud = torch.as_tensor(cloud, dtype=samples.dtype)
    idx = torch.as_tensor(cKDTree(cloud.detach().numpy()).query(samples.detach().numpy())[1])
    return safe_norm(samples - cloud[idx]).mean()


def primitive_distances(cloud: torch.Tensor, samples: torch.Tensor, return_index: bool = False):
    """Point-to-primitive distances d (N×M) and per-sample coverage distances (M×I).

    ``samples`` is M×I×3. Nearest neighbours come from k-d tree queries (no
    gradient) and the distance is recomputed on the winning pair, so the
    gradient flows to the minimizing sample only.
    """
    m, i, _ = samples.shape
    pts = cloud.detach().cpu().numpy()
    smp = samples.detach().cpu().numpy()
    idx_pc = np.stack([cKDTree(smp[k]).query(pts)[1] for k in range(m)], axis=1)  # N×M
    idx_cov = cKDTree(pts).query(smp.reshape(-1, 3))[1].reshape(m, i)  # M×I
    idx_pc, idx_cov = torch.as_tensor(idx_pc), torch.as_tensor(idx_cov)
    nearest = samples[torch.arange(m)[None, :], idx_pc]  # N×M×3
    d = safe_norm(cloud[:, None, :] - nearest)
    cov = safe_norm(samples - cloud[idx_cov])
    if return_index:
        return d, cov, (idx_pc, idx_cov)
    return d, cov


def hausdorff(d: torch.Tensor) -> torch.Tensor:
    return torch.maximum(d.min(dim=1).values.max(), d.min(dim=0).values.max())


def hausdorff_loss(d_ins: torch.Tensor, d_sem: torch.Tensor) -> torch.Tensor:
    return 0.5 * hausdorff(d_ins) + 0.5 * hausdorff(d_sem)


def reconstruction(d: torch.Tensor, cov: torch.Tensor) -> torch.Tensor:
    n, m = d.shape
    return d.min(dim=1).values.sum() / (2 * n) + cov.mean(dim=1).sum() / (2 * m)


def recon_loss(d_ins, cov_ins, d_sem, cov_sem) -> torch.Tensor:
    return 0.5 * reconstruction(d_ins, cov_ins) + 0.5 * reconstruction(d_sem, cov_sem)


def gate_masks(d_ins, d_sem, delta_wd: float):
    return (d_ins.detach() > delta_wd).to(d_ins.dtype), (d_sem.detach() > delta_wd).to(d_sem.dtype)


def anti_collapse_loss(p_ins, d_ins, d_sem, delta_wd: float, gates=None) -> torch.Tensor:
    """``p_ins`` is M×N; distances are N×M. ``gates`` replays precomputed indicator masks."""
    g_ins, g_sem = gates if gates is not None else gate_masks(d_ins, d_sem, delta_wd)
    cost = 0.5 * (d_ins * g_ins + d_sem * g_sem)
    return (p_ins * cost.T).sum() / p_ins.shape[1]


def compactness_loss(p_ins, delta_c: float) -> torch.Tensor:
    p_ins = torch.as_tensor(p_ins)
    return torch.sqrt(p_ins.mean(dim=1) + delta_c).mean() ** 2


def alignment_loss(p_sem, p_sem_pseudo) -> torch.Tensor:
    p_sem = torch.as_tensor(p_sem)
    target = torch.as_tensor(p_sem_pseudo, dtype=p_sem.dtype).detach()
    return ((p_sem - target) ** 2).mean()


def total_loss(recon, hd, wd, compact, align, cfg: LossConfig, step=None, total=None, stage=None) -> LossBreakdown:
    l1, l2, l3, l4 = cfg.weights(step, total, stage)
    value = recon + l1 * hd + l2 * wd + l3 * compact + l4 * align
    return LossBreakdown(recon, hd, wd, compact, align, value, (l1, l2, l3, l4))
