"""Sparse latent membership pursuit.

A fit owns point features and membership logits (``FitState``). Sparsemax over
points turns the logits into part-feature weights, softmax over parts turns
them into point-to-part assignments.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
from torch import nn

from .activations import softmax, sparsemax
from .decoders import DecoderWeights

N_FOURIER = 16


class DirectBackend(nn.Module):
    """Point features and membership logits as free per-shape parameters."""

    def __init__(self, n_points, n_parts, n_semantics, feature_dim, generator: torch.Generator):
        super().__init__()

        def gauss(*shape, std):
            return nn.Parameter(torch.randn(*shape, generator=generator) * std)

        self.f_ins = gauss(feature_dim, n_points, std=0.1)
        self.f_sem = gauss(feature_dim, n_points, std=0.1)
        self.j_ins = gauss(n_parts, n_points, std=0.01)
        self.j_sem = gauss(n_semantics, n_points, std=0.01)

    def forward(self, points):
        return self.f_ins, self.f_sem, self.j_ins, self.j_sem


def _mlp(sizes, generator):
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        lin = nn.Linear(a, b)
        with torch.no_grad():
            lin.weight.copy_(torch.randn(b, a, generator=generator) / np.sqrt(a))
            lin.bias.zero_()
        layers.append(lin)
        if i < len(sizes) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class PointwiseMLPBackend(nn.Module):
    """Features from per-point coordinates plus fixed random Fourier features.

    The 2D feature channels are split contiguously into instance / semantic
    halves; two independent 3-layer pointwise heads produce the logits.
    """

    def __init__(self, n_parts, n_semantics, feature_dim, generator: torch.Generator, hidden: int = 64):
        super().__init__()
        self.register_buffer("freqs", torch.randn(3, N_FOURIER // 2, generator=generator) * 2.0)
        self.encoder = _mlp([3 + N_FOURIER, hidden, hidden, 2 * feature_dim], generator)
        self.head_ins = _mlp([feature_dim, hidden, hidden, n_parts], generator)
        self.head_sem = _mlp([feature_dim, hidden, hidden, n_semantics], generator)
        self.feature_dim = feature_dim

    def forward(self, points):
        proj = 2 * np.pi * points @ self.freqs.to(points.dtype)
        x = torch.cat([points, torch.sin(proj), torch.cos(proj)], dim=1)
        feats = self.encoder(x)
        f_ins, f_sem = feats[:, : self.feature_dim], feats[:, self.feature_dim :]
        return f_ins.T, f_sem.T, self.head_ins(f_ins).T, self.head_sem(f_sem).T


class FitState(nn.Module):
    """All free quantities of one fit, plus the (fixed) cloud they are fitted to."""

    def __init__(self, points, n_parts=16, n_semantics=6, feature_dim=32, backend="direct", seed=0, dtype=torch.float32):
        super().__init__()
        points = torch.as_tensor(np.asarray(points), dtype=dtype)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ValueError("points must be an (N, 3) array")
        if not n_parts >= n_semantics >= 1:
            raise ValueError("need n_parts >= n_semantics >= 1")
        gen = torch.Generator().manual_seed(int(seed))
        self.register_buffer("points", points)
        self.backend_name = backend
        self.n_parts, self.n_semantics, self.feature_dim = n_parts, n_semantics, feature_dim
        if backend == "direct":
            self.backend = DirectBackend(points.shape[0], n_parts, n_semantics, feature_dim, gen)
        elif backend == "pointwise-mlp":
            self.backend = PointwiseMLPBackend(n_parts, n_semantics, feature_dim, gen)
        else:
            raise ValueError(f"unknown backend {backend!r}")
        self.decoder = DecoderWeights(feature_dim, gen)
        self.to(dtype)

    @property
    def n_points(self):
        return self.points.shape[0]

    def features(self):
        """(F_ins, F_sem, J_ins, J_sem) with shapes D×N, D×N, M×N, S×N."""
        return self.backend(self.points)


@dataclass
class MembershipSet:
    w_ins: torch.Tensor  # N×M
    w_sem: torch.Tensor  # N×S
    p_ins: torch.Tensor  # M×N
    p_sem: torch.Tensor  # S×N
    f_pos: torch.Tensor = None  # D×M
    f_geo_i: torch.Tensor = None  # D×M
    f_geo_s: torch.Tensor = None  # D×S


def memberships_from_logits(j_ins, j_sem) -> MembershipSet:
    return MembershipSet(
        w_ins=sparsemax(j_ins.T, dim=0),
        w_sem=sparsemax(j_sem.T, dim=0),
        p_ins=softmax(j_ins, dim=0),
        p_sem=softmax(j_sem, dim=0),
    )


def build_memberships(state: FitState, features=None) -> MembershipSet:
    _, _, j_ins, j_sem = features if features is not None else state.features()
    return memberships_from_logits(j_ins, j_sem)


def aggregate(f_ins, f_sem, ms: MembershipSet) -> MembershipSet:
    return replace(ms, f_pos=f_ins @ ms.w_ins, f_geo_i=f_sem @ ms.w_ins, f_geo_s=f_sem @ ms.w_sem)


def aggregate_features(state: FitState, ms: MembershipSet, features=None) -> MembershipSet:
    f_ins, f_sem, _, _ = features if features is not None else state.features()
    return aggregate(f_ins, f_sem, ms)
