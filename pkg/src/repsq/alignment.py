"""Instance-semantic feature alignment with an adaptive attention temperature."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .activations import softmax

TAU_FLOOR = 1e-4


@dataclass
class AlignmentSet:
    tau: torch.Tensor
    w_a: torch.Tensor  # S×M
    f_geo_is: torch.Tensor  # D×M
    w_a_hard: torch.Tensor  # S×M
    p_sem_pseudo: torch.Tensor  # S×N


def adaptive_tau(f_geo_s, floor: float = TAU_FLOOR) -> torch.Tensor:
    """Mean squared deviation of the cosine Gram matrix of semantic features from identity."""
    f = torch.as_tensor(f_geo_s)
    norms = f.norm(dim=0, keepdim=True)
    f = torch.where(norms > 0, f, f + 1e-12)
    f_hat = f / f.norm(dim=0, keepdim=True)
    gram = f_hat.T @ f_hat
    eye = torch.eye(gram.shape[0], dtype=gram.dtype)
    return torch.clamp(((gram - eye) ** 2).mean(), min=floor)


def align(f_geo_s, f_geo_i, tau):
    """Attention of each instance column over semantic columns; returns (f_geo_is, w_a)."""
    f_geo_s = torch.as_tensor(f_geo_s)
    f_geo_i = torch.as_tensor(f_geo_i)
    tau = torch.as_tensor(tau, dtype=f_geo_s.dtype)
    if torch.any(tau <= 0):
        raise ValueError("tau must be positive")
    d = f_geo_s.shape[0]
    w_a = softmax(f_geo_s.T @ f_geo_i / (tau * math.sqrt(d)), dim=0)
    return f_geo_s @ w_a, w_a


def repeat_assignment(w_a) -> torch.Tensor:
    """One-hot column matrix selecting the top semantic per instance (lowest index on ties)."""
    w_a = torch.as_tensor(w_a).detach()
    idx = w_a.argmax(dim=0, keepdim=True)
    return torch.zeros_like(w_a).scatter_(0, idx, 1.0)


def pseudo_semantic(p_ins, w_a):
    """Hard attention and the semantic pseudo-labels it induces; both carry no gradient."""
    hard = repeat_assignment(w_a)
    return hard, hard @ torch.as_tensor(p_ins).detach()


def compute_alignment(f_geo_s, f_geo_i, p_ins, floor: float = TAU_FLOOR) -> AlignmentSet:
    tau = adaptive_tau(f_geo_s, floor)
    f_geo_is, w_a = align(f_geo_s, f_geo_i, tau)
    hard, pseudo = pseudo_semantic(p_ins, w_a)
    return AlignmentSet(tau, w_a, f_geo_is, hard, pseudo)
