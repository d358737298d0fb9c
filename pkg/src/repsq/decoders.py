"""Linear decoders from part features to DSQ parameters.

Geometry heads are single linear maps per parameter type, shared by the
Geo-i, Geo-is and Geo-s inputs. The pose head adds a membership-weighted
centroid as translation bias and picks a mirror plane with a Gumbel sample.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import geometry as geo
from .activations import gumbel_onehot

GEOMETRY_HEADS = {"size": 3, "shape": 2, "taper": 2, "bend": 2}
POSE_HEADS = {"translation": 3, "rotation": 4, "mirror": 4}

# initial raw biases; small primitives, near-box shape, and almost no bend so
# that unfreezing a head does not make the abstraction jump
SIZE_BIAS = math.log(0.125 / 0.875)  # a ~ 0.12
SHAPE_BIAS = math.log(0.0625 / 0.9375)  # eps ~ 0.25
BEND_BIAS = -5.0  # b ~ 0.015
TRANSLATION_KNEE = 0.9


class UnfreezeStage(enum.IntEnum):
    CUBOID_LIKE = 0
    SUPERQUADRIC = 1
    DEFORMABLE = 2


# heads that receive no gradient (and no update) in each stage
FROZEN_HEADS = {
    UnfreezeStage.CUBOID_LIKE: ("shape", "taper", "bend"),
    UnfreezeStage.SUPERQUADRIC: ("taper", "bend"),
    UnfreezeStage.DEFORMABLE: (),
}


def unfreeze_schedule(step: int, total: int, boundaries=(0.2, 0.4)) -> UnfreezeStage:
    if not 0 <= step < total:
        raise ValueError(f"step {step} outside [0, {total})")
    frac = step / total
    if frac < boundaries[0]:
        return UnfreezeStage.CUBOID_LIKE
    if frac < boundaries[1]:
        return UnfreezeStage.SUPERQUADRIC
    return UnfreezeStage.DEFORMABLE


class DecoderWeights(nn.Module):
    def __init__(self, feature_dim: int, generator: torch.Generator = None, weight_std: float = None):
        super().__init__()
        std = 1.0 / math.sqrt(feature_dim) if weight_std is None else weight_std
        heads = {**GEOMETRY_HEADS, **POSE_HEADS}
        self.heads = nn.ModuleDict({name: nn.Linear(feature_dim, out) for name, out in heads.items()})
        with torch.no_grad():
            for name, lin in self.heads.items():
                scale = 0.01 * std if name == "rotation" else std
                lin.weight.copy_(torch.randn(lin.weight.shape, generator=generator) * scale)
                lin.bias.zero_()
            self.heads["size"].bias.fill_(SIZE_BIAS)
            self.heads["shape"].bias.fill_(SHAPE_BIAS)
            self.heads["bend"].bias[0] = BEND_BIAS
            self.heads["rotation"].bias.copy_(torch.tensor(geo.IDENTITY_QUATERNION))

    def raw(self, name: str, features: torch.Tensor) -> torch.Tensor:
        """Head output for D×K features, returned as K×out."""
        return self.heads[name](features.T)

    def head_parameters(self, names):
        for name in names:
            yield from self.heads[name].parameters()


@dataclass
class GeometryParams:
    size: torch.Tensor
    shape: torch.Tensor
    taper: torch.Tensor
    bend: torch.Tensor
    bend_angle: torch.Tensor

    def select(self, index) -> "GeometryParams":
        return GeometryParams(*(getattr(self, f)[index] for f in ("size", "shape", "taper", "bend", "bend_angle")))


@dataclass
class PoseParams:
    translation: torch.Tensor
    rotation: torch.Tensor
    mirror: torch.Tensor  # K×4 selection over MirrorPlane


def geometry_raw(features, weights: DecoderWeights) -> dict:
    return {name: weights.raw(name, features) for name in GEOMETRY_HEADS}


def decode_geometry(features, weights: DecoderWeights, stage: UnfreezeStage) -> GeometryParams:
    raw = geometry_raw(features, weights)
    k = features.shape[1]
    zeros = raw["size"].new_zeros(k)
    size = geo.box_squash(raw["size"], *geo.SIZE_RANGE)
    if stage >= UnfreezeStage.SUPERQUADRIC:
        shape = geo.box_squash(raw["shape"], *geo.SHAPE_RANGE)
    else:
        shape = torch.full_like(raw["shape"], geo.SHAPE_RANGE[0])
    if stage >= UnfreezeStage.DEFORMABLE:
        taper = geo.box_squash(raw["taper"], *geo.TAPER_RANGE)
        bend = geo.box_squash(raw["bend"][:, 0], *geo.BEND_RANGE)
        angle = geo.box_squash(raw["bend"][:, 1], *geo.BEND_ANGLE_RANGE)
    else:
        taper = torch.zeros_like(raw["taper"])
        bend, angle = zeros, zeros
    return GeometryParams(size, shape, taper, bend, angle)


def smooth_clamp(z: torch.Tensor, knee: float = TRANSLATION_KNEE, bound: float = 1.0) -> torch.Tensor:
    """Identity on [-knee, knee], tanh roll-off to +-bound outside (C1 at the knee)."""
    width = bound - knee
    excess = (z.abs() - knee).clamp_min(0)
    return torch.where(z.abs() <= knee, z, torch.sign(z) * (knee + width * torch.tanh(excess / width)))


def decode_pose(
    f_pos,
    points,
    w_ins,
    weights: DecoderWeights,
    rng: np.random.Generator = None,
    temperature: float = 1.0,
    hard: bool = True,
    noise=None,
    deterministic: bool = False,
) -> PoseParams:
    bias = w_ins.T @ points  # M×3 membership-weighted point averages
    translation = smooth_clamp(bias + weights.raw("translation", f_pos))
    rotation = geo.normalize_quaternion(weights.raw("rotation", f_pos))
    logits = weights.raw("mirror", f_pos)
    if deterministic:
        selection = torch.zeros_like(logits).scatter_(1, logits.argmax(dim=1, keepdim=True), 1.0)
    else:
        selection = gumbel_onehot(logits, temperature, rng, dim=1, hard=hard, noise=noise)
    return PoseParams(translation, geo.mirror_rotation_soft(rotation, selection), selection)


def assemble(geometry: GeometryParams, pose: PoseParams) -> geo.DsqParams:
    return geo.DsqParams(
        size=geometry.size,
        shape=geometry.shape,
        taper=geometry.taper,
        bend=geometry.bend,
        bend_angle=geometry.bend_angle,
        translation=pose.translation,
        rotation=pose.rotation,
    )
