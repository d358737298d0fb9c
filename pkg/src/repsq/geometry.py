"""Deformable superquadric (DSQ) geometry.

Parameter boxes, the taper -> bend -> rotate -> translate chain, surface
sampling and mesh export. Everything operates on torch tensors so the fitter
can differentiate through it; leading batch dimensions broadcast.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch

SIZE_RANGE = (0.02, 0.82)
SHAPE_RANGE = (0.2, 1.0)
TAPER_RANGE = (-0.9, 0.9)
BEND_RANGE = (0.01, 0.75)
BEND_ANGLE_RANGE = (-math.pi / 2, math.pi / 2)
TRANSLATION_RANGE = (-1.0, 1.0)

# curvature below this is treated as "no bend" (analytic limit of the bend map)
BEND_GUARD = 1e-6
MESH_RESOLUTION = 32
PARAM_DIM = 16

IDENTITY_QUATERNION = (1.0, 0.0, 0.0, 0.0)


def box_squash(raw: torch.Tensor, low: float, high: float) -> torch.Tensor:
    return low + (high - low) * torch.sigmoid(raw)


def normalize_quaternion(q: torch.Tensor) -> torch.Tensor:
    return q / q.norm(dim=-1, keepdim=True).clamp_min(1e-12)


@dataclass
class DsqParams:
    """Parameters of one or more DSQs; every field carries the same leading batch shape."""

    size: torch.Tensor  # (..., 3)
    shape: torch.Tensor  # (..., 2) epsilon_1, epsilon_2
    taper: torch.Tensor  # (..., 2)
    bend: torch.Tensor  # (...,) curvature, 0 means bending off
    bend_angle: torch.Tensor  # (...,)
    translation: torch.Tensor  # (..., 3)
    rotation: torch.Tensor  # (..., 4) unit quaternion (w, x, y, z)

    def to_vector(self) -> torch.Tensor:
        return torch.cat(
            [
                self.size,
                self.shape,
                self.taper,
                self.bend[..., None],
                self.bend_angle[..., None],
                self.translation,
                self.rotation,
            ],
            dim=-1,
        )

    @classmethod
    def from_vector(cls, vec) -> "DsqParams":
        vec = torch.as_tensor(vec)
        return cls(
            size=vec[..., 0:3],
            shape=vec[..., 3:5],
            taper=vec[..., 5:7],
            bend=vec[..., 7],
            bend_angle=vec[..., 8],
            translation=vec[..., 9:12],
            rotation=vec[..., 12:16],
        )

    def __getitem__(self, index) -> "DsqParams":
        return DsqParams(
            self.size[index],
            self.shape[index],
            self.taper[index],
            self.bend[index],
            self.bend_angle[index],
            self.translation[index],
            self.rotation[index],
        )

    def in_ranges(self, atol: float = 1e-9) -> bool:
        """True if every field sits in its admissible box (bend may also be exactly off)."""

        def inside(x, lo, hi):
            return bool(torch.all((x >= lo - atol) & (x <= hi + atol)))

        bend_ok = bool(torch.all((self.bend == 0) | ((self.bend >= BEND_RANGE[0] - atol) & (self.bend <= BEND_RANGE[1] + atol))))
        unit = torch.allclose(self.rotation.norm(dim=-1), torch.ones((), dtype=self.rotation.dtype), atol=1e-9)
        return (
            inside(self.size, *SIZE_RANGE)
            and inside(self.shape, *SHAPE_RANGE)
            and inside(self.taper, *TAPER_RANGE)
            and bend_ok
            and inside(self.bend_angle, *BEND_ANGLE_RANGE)
            and inside(self.translation, *TRANSLATION_RANGE)
            and unit
        )


def squash_params(raw) -> DsqParams:
    """Map an unconstrained 16-vector (or a batch of them) into the admissible parameter boxes.

    Box-constrained fields use an affine-rescaled sigmoid; the quaternion is the
    normalization of ``raw_r + (1, 0, 0, 0)`` so a zero input gives the identity.
    """
    raw = torch.as_tensor(raw)
    if raw.shape[-1] != PARAM_DIM:
        raise ValueError(f"expected trailing dimension {PARAM_DIM}, got {tuple(raw.shape)}")
    if not torch.isfinite(raw).all():
        raise ValueError("squash_params: raw parameters contain non-finite values")
    offset = raw.new_tensor(IDENTITY_QUATERNION)
    return DsqParams(
        size=box_squash(raw[..., 0:3], *SIZE_RANGE),
        shape=box_squash(raw[..., 3:5], *SHAPE_RANGE),
        taper=box_squash(raw[..., 5:7], *TAPER_RANGE),
        bend=box_squash(raw[..., 7], *BEND_RANGE),
        bend_angle=box_squash(raw[..., 8], *BEND_ANGLE_RANGE),
        translation=box_squash(raw[..., 9:12], *TRANSLATION_RANGE),
        rotation=normalize_quaternion(raw[..., 12:16] + offset),
    )


def signed_power(x: torch.Tensor, exponent: torch.Tensor) -> torch.Tensor:
    """sign(x) * |x|**exponent with a finite gradient at x == 0."""
    ax = x.abs()
    nonzero = ax > 0
    safe = torch.where(nonzero, ax, torch.ones_like(ax))
    return torch.where(nonzero, torch.sign(x) * safe**exponent, torch.zeros_like(ax))


def superellipsoid_point(size, shape, eta, omega) -> torch.Tensor:
    """Canonical superellipsoid surface point(s) for angles ``eta`` (latitude) and ``omega``.

    ``size`` is (..., 3), ``shape`` is (..., 2); ``eta``/``omega`` broadcast against
    the batch dimensions. Returns (..., 3).
    """
    size = torch.as_tensor(size)
    shape = torch.as_tensor(shape, dtype=size.dtype)
    eta = torch.as_tensor(eta, dtype=size.dtype)
    omega = torch.as_tensor(omega, dtype=size.dtype)
    if torch.any(shape < SHAPE_RANGE[0] - 1e-9) or torch.any(shape > SHAPE_RANGE[1] + 1e-9):
        raise ValueError("shape exponents must lie in [0.2, 1]")
    e1 = shape[..., 0]
    e2 = shape[..., 1]
    ce = signed_power(torch.cos(eta), e1)
    x = size[..., 0] * ce * signed_power(torch.cos(omega), e2)
    y = size[..., 1] * ce * signed_power(torch.sin(omega), e2)
    z = size[..., 2] * signed_power(torch.sin(eta), e1)
    return torch.stack([x, y, z], dim=-1)


def implicit_residual(points, size, shape) -> torch.Tensor:
    """|F(p) - 1| of the canonical superellipsoid inside-outside function."""
    points = torch.as_tensor(points)
    size = torch.as_tensor(size, dtype=points.dtype)
    shape = torch.as_tensor(shape, dtype=points.dtype)
    e1, e2 = shape[..., 0:1], shape[..., 1:2]
    ax = (points[..., 0] / size[..., 0:1]).abs()
    ay = (points[..., 1] / size[..., 1:2]).abs()
    az = (points[..., 2] / size[..., 2:3]).abs()
    f = (ax ** (2 / e2) + ay ** (2 / e2)) ** (e2 / e1) + az ** (2 / e1)
    return (f - 1).abs()


def taper(p: torch.Tensor, size: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    x, y, z = p.unbind(-1)
    zn = z / size[..., 2:3]
    return torch.stack([(k[..., 0:1] * zn + 1) * x, (k[..., 1:2] * zn + 1) * y, z], dim=-1)


def bend(p: torch.Tensor, curvature: torch.Tensor, angle: torch.Tensor) -> torch.Tensor:
    """Circular bend in the direction ``angle`` about the z axis; identity for curvature below the guard."""
    active = (curvature >= BEND_GUARD)[..., None]
    b = torch.where(curvature >= BEND_GUARD, curvature, torch.ones_like(curvature))[..., None]
    ca, sa = torch.cos(angle)[..., None], torch.sin(angle)[..., None]
    x, y, z = p.unbind(-1)
    rproj = ca * x + sa * y
    gamma = z * b
    # R - rproj = (1/b - rproj)(1 - cos(gamma)), written without the 1/b cancellation
    versine = 2 * torch.sin(gamma / 2) ** 2
    shift = versine / b - rproj * versine
    sg = torch.sin(gamma)
    bent = torch.stack([x + shift * ca, y + shift * sa, sg / b - rproj * sg], dim=-1)
    return torch.where(active[..., None], bent, p)


def quaternion_to_matrix(q: torch.Tensor) -> torch.Tensor:
    w, x, y, z = normalize_quaternion(q).unbind(-1)
    return torch.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    ).reshape(*q.shape[:-1], 3, 3)


def rotate(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    rot = quaternion_to_matrix(q)
    return torch.einsum("...ij,...nj->...ni", rot, p)


def deform_and_pose(p: torch.Tensor, theta: DsqParams) -> torch.Tensor:
    """Apply taper, bend, rotation and translation to canonical points ``p`` of shape (..., n, 3)."""
    out = taper(p, theta.size, theta.taper)
    out = bend(out, theta.bend, theta.bend_angle)
    out = rotate(out, theta.rotation)
    return out + theta.translation[..., None, :]


class MirrorPlane(enum.IntEnum):
    NONE = 0
    XY = 1
    XZ = 2
    YZ = 3


# sign pattern on (w, x, y, z): reflecting through a plane flips the two
# quaternion vector components orthogonal to the plane normal
MIRROR_SIGNS = torch.tensor(
    [
        [1.0, 1.0, 1.0, 1.0],
        [1.0, -1.0, -1.0, 1.0],
        [1.0, -1.0, 1.0, -1.0],
        [1.0, 1.0, -1.0, -1.0],
    ]
)


def mirror_rotation(r, plane: MirrorPlane) -> torch.Tensor:
    r = torch.as_tensor(r)
    signs = MIRROR_SIGNS[int(plane)].to(r.dtype)
    return normalize_quaternion(r * signs)


def mirror_rotation_soft(r: torch.Tensor, selection: torch.Tensor) -> torch.Tensor:
    """Mirror with a (possibly relaxed) one-hot ``selection`` of shape (..., 4) over MirrorPlane."""
    signs = selection @ MIRROR_SIGNS.to(selection.dtype)
    return normalize_quaternion(r * signs)


@dataclass(frozen=True)
class SurfaceGrid:
    """Canonical (eta, omega) mesh of a superellipsoid: ring nodes offset by half a cell plus two poles."""

    node_params: np.ndarray  # (V, 2)
    faces: np.ndarray  # (F, 3)
    corner_params: np.ndarray  # (F, 3, 2) unwrapped per-face corner angles


@lru_cache(maxsize=8)
def surface_grid(resolution: int = MESH_RESOLUTION) -> SurfaceGrid:
    n_eta = n_omega = resolution
    etas = -math.pi / 2 + (np.arange(n_eta) + 0.5) * math.pi / n_eta
    omegas = -math.pi + (np.arange(n_omega) + 0.5) * 2 * math.pi / n_omega
    ee, oo = np.meshgrid(etas, omegas, indexing="ij")
    nodes = np.stack([ee.ravel(), oo.ravel()], axis=1)
    south, north = n_eta * n_omega, n_eta * n_omega + 1
    nodes = np.vstack([nodes, [[-math.pi / 2, 0.0], [math.pi / 2, 0.0]]])

    def vid(i, j):
        return i * n_omega + (j % n_omega)

    faces, corners = [], []
    step = 2 * math.pi / n_omega
    for j in range(n_omega):
        w0, w1 = omegas[j], omegas[j] + step  # unwrapped, so the seam quad interpolates correctly
        for i in range(n_eta - 1):
            e0, e1 = etas[i], etas[i + 1]
            faces.append((vid(i, j), vid(i, j + 1), vid(i + 1, j + 1)))
            corners.append(((e0, w0), (e0, w1), (e1, w1)))
            faces.append((vid(i, j), vid(i + 1, j + 1), vid(i + 1, j)))
            corners.append(((e0, w0), (e1, w1), (e1, w0)))
        wm = 0.5 * (w0 + w1)
        faces.append((south, vid(0, j + 1), vid(0, j)))
        corners.append(((-math.pi / 2, wm), (etas[0], w1), (etas[0], w0)))
        faces.append((north, vid(n_eta - 1, j), vid(n_eta - 1, j + 1)))
        corners.append(((math.pi / 2, wm), (etas[-1], w0), (etas[-1], w1)))
    return SurfaceGrid(nodes, np.asarray(faces, dtype=np.int64), np.asarray(corners))


def mesh_vertices(theta: DsqParams, resolution: int = MESH_RESOLUTION) -> torch.Tensor:
    """Deformed and posed vertices of the canonical mesh, shape (..., V, 3)."""
    grid = surface_grid(resolution)
    dtype = theta.size.dtype
    eta = torch.as_tensor(grid.node_params[:, 0], dtype=dtype)
    omega = torch.as_tensor(grid.node_params[:, 1], dtype=dtype)
    canon = superellipsoid_point(theta.size[..., None, :], theta.shape[..., None, :], eta, omega)
    return deform_and_pose(canon, theta)


def triangle_areas(vertices: torch.Tensor, faces: np.ndarray) -> torch.Tensor:
    f = torch.as_tensor(faces)
    a, b, c = vertices[..., f[:, 0], :], vertices[..., f[:, 1], :], vertices[..., f[:, 2], :]
    return 0.5 * torch.linalg.cross(b - a, c - a).norm(dim=-1)


@dataclass
class SurfaceDraw:
    """Sampled surface parameters; constant with respect to the DSQ parameters."""

    eta: torch.Tensor  # (..., count)
    omega: torch.Tensor  # (..., count)


def draw_surface(theta: DsqParams, count: int, rng: np.random.Generator, resolution: int = MESH_RESOLUTION) -> SurfaceDraw:
    """Area-weighted triangle choice + uniform barycentric coordinates, mapped to (eta, omega)."""
    if count < 4:
        raise ValueError("count must be at least 4")
    grid = surface_grid(resolution)
    with torch.no_grad():
        areas = triangle_areas(mesh_vertices(theta, resolution), grid.faces).cpu().numpy().astype(np.float64)
    batch = areas.shape[:-1]
    areas = areas.reshape(-1, areas.shape[-1])
    totals = areas.sum(axis=1)
    if np.any(totals <= 0) or not np.all(np.isfinite(totals)):
        raise ValueError("degenerate primitive mesh: zero total area")
    cdf = np.cumsum(areas, axis=1) / totals[:, None]
    u = rng.random((areas.shape[0], count))
    tri = np.stack([np.searchsorted(c, uu, side="right") for c, uu in zip(cdf, u)])
    tri = np.minimum(tri, areas.shape[1] - 1)
    r1 = np.sqrt(rng.random((areas.shape[0], count)))
    r2 = rng.random((areas.shape[0], count))
    bary = np.stack([1 - r1, r1 * (1 - r2), r1 * r2], axis=-1)
    params = np.einsum("pck,pckd->pcd", bary, grid.corner_params[tri])
    dtype = theta.size.dtype
    eta = torch.as_tensor(params[..., 0].reshape(*batch, count), dtype=dtype)
    omega = torch.as_tensor(params[..., 1].reshape(*batch, count), dtype=dtype)
    return SurfaceDraw(eta, omega)


def surface_points(theta: DsqParams, draw: SurfaceDraw) -> torch.Tensor:
    """Evaluate posed surface points for a fixed draw; differentiable in ``theta``."""
    canon = superellipsoid_point(theta.size[..., None, :], theta.shape[..., None, :], draw.eta, draw.omega)
    return deform_and_pose(canon, theta)


@dataclass
class SampledPrimitive:
    points: torch.Tensor  # (I, 3)
    source: int


def sample_surface(theta: DsqParams, count: int, rng: np.random.Generator, source: int = 0) -> SampledPrimitive:
    draw = draw_surface(theta, count, rng)
    return SampledPrimitive(points=surface_points(theta, draw), source=source)


def write_obj(path, vertex_sets, faces: np.ndarray, names=None) -> None:
    """Write one OBJ object per primitive (vertex and face records only)."""
    lines = []
    offset = 1
    for k, verts in enumerate(vertex_sets):
        verts = np.asarray(verts, dtype=np.float64)
        lines.append(f"o {names[k] if names else f'primitive_{k}'}")
        lines.extend(f"v {x:.9f} {y:.9f} {z:.9f}" for x, y, z in verts)
        lines.extend(f"f {a + offset} {b + offset} {c + offset}" for a, b, c in faces)
        offset += len(verts)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_obj_objects(path) -> dict[str, np.ndarray]:
    """Vertices grouped by OBJ object name."""
    objects: dict[str, list] = {}
    current = None
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "o":
                current = parts[1]
                objects[current] = []
            elif parts[0] == "v":
                objects.setdefault(current, []).append([float(v) for v in parts[1:4]])
    return {k: np.asarray(v) for k, v in objects.items()}
