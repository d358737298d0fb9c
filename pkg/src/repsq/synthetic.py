"""Synthetic target shapes with ground-truth part labels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def sample_box_surface(center, extent, n: int, rng: np.random.Generator, skip_faces=()) -> np.ndarray:
    """Area-uniform samples on the faces of an axis-aligned box.

    Faces are indexed (axis, side) as ``2 * axis + (side > 0)``; ``skip_faces``
    drops hidden faces.
    """
    center = np.asarray(center, dtype=np.float64)
    half = 0.5 * np.asarray(extent, dtype=np.float64)
    faces, areas = [], []
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        for side in (-1, 1):
            if 2 * axis + (side > 0) in skip_faces:
                continue
            faces.append((axis, side, u, v))
            areas.append(4 * half[u] * half[v])
    areas = np.asarray(areas)
    choice = rng.choice(len(faces), size=n, p=areas / areas.sum())
    pts = np.empty((n, 3))
    for k, (axis, side, u, v) in enumerate(faces):
        sel = choice == k
        m = int(sel.sum())
        p = np.empty((m, 3))
        p[:, axis] = side * half[axis]
        p[:, u] = rng.uniform(-half[u], half[u], m)
        p[:, v] = rng.uniform(-half[v], half[v], m)
        pts[sel] = p
    return pts + center


@dataclass
class SyntheticShape:
    points: np.ndarray
    semantic_labels: np.ndarray
    instance_labels: np.ndarray


def make_table(
    n_points: int = 2048,
    seed: int = 0,
    top=(1.0, 0.6, 0.06),
    leg_width: float = 0.06,
    leg_height: float = 0.6,
    inset: float = 0.06,
) -> SyntheticShape:
    """Four-legged table: one top slab (semantic 0, instance 0) and four identical legs (semantic 1, instances 1-4).

    Points are allocated by surface area and the result is centered with its
    longest extent scaled to 1.
    """
    rng = np.random.default_rng(seed)
    top = np.asarray(top, dtype=np.float64)
    top_center = np.array([0.0, 0.0, leg_height + top[2] / 2])
    leg_extent = np.array([leg_width, leg_width, leg_height])
    hx = top[0] / 2 - inset - leg_width / 2
    hy = top[1] / 2 - inset - leg_width / 2
    leg_centers = [np.array([sx * hx, sy * hy, leg_height / 2]) for sx in (-1, 1) for sy in (-1, 1)]

    top_area = 2 * (top[0] * top[1] + top[0] * top[2] + top[1] * top[2])
    leg_area = 4 * leg_width * leg_height + leg_width**2  # upper face is hidden by the slab
    areas = np.array([top_area] + [leg_area] * 4)
    counts = rng.multinomial(n_points, areas / areas.sum())

    chunks = [sample_box_surface(top_center, top, counts[0], rng)]
    chunks += [sample_box_surface(c, leg_extent, k, rng, skip_faces=(5,)) for c, k in zip(leg_centers, counts[1:])]
    inst = np.concatenate([np.full(k, i) for i, k in enumerate(counts)])
    pts = np.vstack(chunks)
    pts -= pts.mean(axis=0)
    pts /= (pts.max(axis=0) - pts.min(axis=0)).max()
    return SyntheticShape(pts, (inst > 0).astype(np.int64), inst.astype(np.int64))
