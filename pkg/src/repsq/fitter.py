"""Per-shape optimization: forward evaluation, the training loop, output extraction."""

from __future__ import annotations

import copy
import hashlib
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import torch

from . import geometry as geo
from .activations import gumbel_noise
from .alignment import TAU_FLOOR, compute_alignment, repeat_assignment
from .decoders import (
    FROZEN_HEADS,
    TRANSLATION_KNEE,
    UnfreezeStage,
    assemble,
    decode_geometry,
    decode_pose,
    unfreeze_schedule,
)
from .losses import (
    LossBreakdown,
    LossConfig,
    alignment_loss,
    anti_collapse_loss,
    compactness_loss,
    gate_masks,
    hausdorff_loss,
    primitive_distances,
    recon_loss,
    total_loss,
)
from .membership import FitState, aggregate, memberships_from_logits

log = logging.getLogger(__name__)

THREADS_ENV = "REPSQ_NUM_THREADS"


@dataclass
class FitConfig:
    n_points: int = 2048
    max_primitives: int = 16
    max_semantics: int = 6
    feature_dim: int = 32
    samples_per_primitive: int = 256
    total_steps: int = 600
    lr_start: float = 1e-2
    lr_end: float = 3e-3
    weight_decay: float = 1e-3
    logit_lr_scale: float = 30.0  # lr multiplier for the per-point parameters of the direct backend
    seed: int = 0
    backend: str = "direct"
    loss: LossConfig = field(default_factory=LossConfig)
    existence_threshold: int = 20
    gumbel_temperature: float = 1.0
    stage_boundaries: tuple = (0.2, 0.4)
    mesh_resolution: int = geo.MESH_RESOLUTION
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        self.stage_boundaries = tuple(self.stage_boundaries)
        if not self.max_primitives >= self.max_semantics >= 1:
            raise ValueError("need max_primitives >= max_semantics >= 1")
        if self.samples_per_primitive < 4:
            raise ValueError("samples_per_primitive must be at least 4")
        if self.total_steps < 1 or self.feature_dim < 1 or self.n_points < 32:
            raise ValueError("total_steps, feature_dim must be positive and n_points >= 32")
        if self.backend not in ("direct", "pointwise-mlp"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["stage_boundaries"] = list(self.stage_boundaries)
        out["loss"]["cuboid_multipliers"] = list(self.loss.cuboid_multipliers)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "FitConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class Draws:
    """Every random quantity of one forward pass, so a pass can be replayed exactly."""

    surface_ins: geo.SurfaceDraw
    surface_sem: geo.SurfaceDraw
    gumbel: np.ndarray


@dataclass
class Forward:
    memberships: object
    alignment: object
    stage: UnfreezeStage
    theta_ins: geo.DsqParams
    theta_sem: geo.DsqParams
    mirror: torch.Tensor
    breakdown: LossBreakdown
    draws: Draws
    gates: tuple
    pseudo: torch.Tensor
    signature: str


def forward(
    state: FitState,
    cfg: FitConfig,
    step: int = None,
    rng: np.random.Generator = None,
    draws: Draws = None,
    gates=None,
    pseudo=None,
    hard_mirror: bool = True,
) -> Forward:
    """One evaluation of the full objective.

    ``step=None`` evaluates the deformable stage with the base loss weights. The
    stop-gradient quantities (draws, gate masks, pseudo-label target) can be
    passed in to replay an earlier evaluation.
    """
    f_ins, f_sem, j_ins, j_sem = state.features()
    ms = aggregate(f_ins, f_sem, memberships_from_logits(j_ins, j_sem))
    al = compute_alignment(ms.f_geo_s, ms.f_geo_i, ms.p_ins)
    total = cfg.total_steps
    stage = UnfreezeStage.DEFORMABLE if step is None else unfreeze_schedule(step, total, cfg.stage_boundaries)
    dec = state.decoder

    geo_ins = decode_geometry(ms.f_geo_i, dec, stage)
    geo_sem = decode_geometry(al.f_geo_is, dec, stage)
    noise = draws.gumbel if draws is not None else None
    if noise is None:
        noise = gumbel_noise((state.n_parts, 4), rng)
    pose = decode_pose(ms.f_pos, state.points, ms.w_ins, dec, temperature=cfg.gumbel_temperature, hard=hard_mirror, noise=noise)
    theta_ins = assemble(geo_ins, pose)
    theta_sem = assemble(geo_sem, pose)

    if draws is None:
        count, res = cfg.samples_per_primitive, cfg.mesh_resolution
        draws = Draws(geo.draw_surface(theta_ins, count, rng, res), geo.draw_surface(theta_sem, count, rng, res), noise)
    samples_ins = geo.surface_points(theta_ins, draws.surface_ins)
    samples_sem = geo.surface_points(theta_sem, draws.surface_sem)
    cloud = state.points
    d_ins, cov_ins, idx_ins = primitive_distances(cloud, samples_ins, return_index=True)
    d_sem, cov_sem, idx_sem = primitive_distances(cloud, samples_sem, return_index=True)

    if gates is None:
        gates = gate_masks(d_ins, d_sem, cfg.loss.delta_wd)
    if pseudo is None:
        pseudo = al.p_sem_pseudo
    terms = dict(
        recon=recon_loss(d_ins, cov_ins, d_sem, cov_sem),
        hd=hausdorff_loss(d_ins, d_sem),
        wd=anti_collapse_loss(ms.p_ins, d_ins, d_sem, cfg.loss.delta_wd, gates=gates),
        compact=compactness_loss(ms.p_ins, cfg.loss.delta_c),
        align=alignment_loss(ms.p_sem, pseudo),
    )
    breakdown = total_loss(**terms, cfg=cfg.loss, step=step, total=total, stage=stage)
    signature = _signature(ms, al, pose, d_ins, d_sem, idx_ins + idx_sem)
    return Forward(ms, al, stage, theta_ins, theta_sem, pose.mirror, breakdown, draws, gates, pseudo, signature)


def _signature(ms, al, pose, d_ins, d_sem, indices) -> str:
    """Hash of every discrete choice the objective makes (argmins, supports, maxima, clamp regimes)."""
    h = hashlib.sha1()
    with torch.no_grad():
        parts = [*indices, ms.w_ins > 0, ms.w_sem > 0]
        for d in (d_ins, d_sem):
            row, col = d.min(dim=1).values, d.min(dim=0).values
            parts += [d.argmin(dim=1), d.argmin(dim=0), row.argmax(), col.argmax(), row.max() > col.max()]
        parts.append(pose.translation.abs() >= TRANSLATION_KNEE)
        parts.append(al.tau <= TAU_FLOOR)
        for p in parts:
            h.update(p.cpu().numpy().tobytes())
    return h.hexdigest()


@dataclass
class FitResult:
    instance_labels: np.ndarray
    semantic_labels: np.ndarray
    p_ins: np.ndarray
    p_sem: np.ndarray
    theta_ins: np.ndarray  # M×16
    theta_sem: np.ndarray
    theta_rep: np.ndarray
    repeat_assignment: np.ndarray  # S×M one-hot columns
    mirror_planes: np.ndarray
    existence_mask: np.ndarray
    point_counts: np.ndarray
    loss_history: list
    final_loss: dict
    config: FitConfig
    status: str = "ok"
    diagnostic: str = ""
    timings: dict = field(default_factory=dict)
    fit_indices: np.ndarray = None

    @property
    def semantic_of_instance(self) -> np.ndarray:
        return self.repeat_assignment.argmax(axis=0)

    @property
    def kept(self) -> np.ndarray:
        return np.flatnonzero(self.existence_mask)

    def params(self, kind: str = "ins") -> geo.DsqParams:
        table = {"ins": self.theta_ins, "sem": self.theta_sem, "rep": self.theta_rep}[kind]
        return geo.DsqParams.from_vector(torch.as_tensor(table, dtype=torch.float64))

    def sample(self, kind: str = "rep", count: int = None, seed: int = 0, masked: bool = True) -> np.ndarray:
        """Surface samples of the (kept) primitives of one abstraction, stacked to (K·count, 3)."""
        count = count or self.config.samples_per_primitive
        theta = self.params(kind)
        if masked:
            theta = theta[torch.as_tensor(self.kept)]
        if theta.size.shape[0] == 0:
            return np.zeros((0, 3))
        draw = geo.draw_surface(theta, count, np.random.default_rng(seed), self.config.mesh_resolution)
        return geo.surface_points(theta, draw).reshape(-1, 3).numpy()

    def mesh_vertices(self, kind: str = "ins") -> np.ndarray:
        with torch.no_grad():
            return geo.mesh_vertices(self.params(kind), self.config.mesh_resolution).numpy()


def extract_outputs(state: FitState, cloud, cfg: FitConfig, stage: UnfreezeStage = UnfreezeStage.DEFORMABLE, **extra) -> FitResult:
    """Labels, the three abstractions and the shared existence mask of a fitted state."""
    with torch.no_grad():
        f_ins, f_sem, j_ins, j_sem = state.features()
        ms = aggregate(f_ins, f_sem, memberships_from_logits(j_ins, j_sem))
        al = compute_alignment(ms.f_geo_s, ms.f_geo_i, ms.p_ins)
        dec = state.decoder
        pose = decode_pose(ms.f_pos, state.points, ms.w_ins, dec, deterministic=True)
        theta_ins = assemble(decode_geometry(ms.f_geo_i, dec, stage), pose)
        theta_sem = assemble(decode_geometry(al.f_geo_is, dec, stage), pose)
        hard = repeat_assignment(al.w_a)
        geo_rep = decode_geometry(ms.f_geo_s, dec, stage).select(hard.argmax(dim=0))
        theta_rep = assemble(geo_rep, pose)

    ins_labels = ms.p_ins.argmax(dim=0).numpy()
    counts = np.bincount(ins_labels, minlength=state.n_parts)
    mask = counts > cfg.existence_threshold
    as_np = lambda t: t.to_vector().double().numpy()  # noqa: E731
    return FitResult(
        instance_labels=ins_labels,
        semantic_labels=ms.p_sem.argmax(dim=0).numpy(),
        p_ins=ms.p_ins.double().numpy(),
        p_sem=ms.p_sem.double().numpy(),
        theta_ins=as_np(theta_ins),
        theta_sem=as_np(theta_sem),
        theta_rep=as_np(theta_rep),
        repeat_assignment=hard.double().numpy(),
        mirror_planes=pose.mirror.argmax(dim=1).numpy(),
        existence_mask=mask,
        point_counts=counts,
        loss_history=extra.pop("loss_history", []),
        final_loss=extra.pop("final_loss", {}),
        config=cfg,
        **extra,
    )


def _snapshot(state: FitState) -> dict:
    return {k: v.detach().clone() for k, v in state.state_dict().items()}


def make_state(cloud, cfg: FitConfig) -> FitState:
    return FitState(
        cloud,
        n_parts=cfg.max_primitives,
        n_semantics=cfg.max_semantics,
        feature_dim=cfg.feature_dim,
        backend=cfg.backend,
        seed=cfg.seed,
        dtype=cfg.torch_dtype,
    )


def make_optimizer(state: FitState, cfg: FitConfig) -> torch.optim.Optimizer:
    scaled, base = [], []
    for name, p in state.named_parameters():
        (scaled if name.startswith("backend.j_") else base).append(p)
    groups = [{"params": base}]
    if scaled:
        groups.append({"params": scaled, "lr": cfg.lr_start * cfg.logit_lr_scale})
    return torch.optim.AdamW(groups, lr=cfg.lr_start, weight_decay=cfg.weight_decay)


def make_scheduler(opt, cfg: FitConfig):
    """Cosine decay of every group's lr by the factor lr_end / lr_start."""
    floor = cfg.lr_end / cfg.lr_start
    span = max(cfg.total_steps - 1, 1)

    def factor(step):
        return floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * min(step, span) / span))

    return torch.optim.lr_scheduler.LambdaLR(opt, factor)


def subsample(cloud: np.ndarray, n: int, seed: int) -> np.ndarray:
    """Indices of ``n`` points chosen without replacement (all points if the cloud is smaller)."""
    if len(cloud) <= n:
        return np.arange(len(cloud))
    return np.sort(np.random.default_rng(seed).choice(len(cloud), n, replace=False))


def fit_shape(cloud, cfg: FitConfig = None, callback=None) -> FitResult:
    """Fit the abstraction to one normalized (N, 3) cloud.

    Clouds larger than ``cfg.n_points`` are subsampled for the fit; labels are
    transferred back to every input point through its nearest fitted point.
    """
    cfg = cfg or FitConfig()
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.ndim != 2 or cloud.shape[1] != 3 or len(cloud) < 32:
        raise ValueError("cloud must be an (N, 3) array with N >= 32")
    if not np.all(np.isfinite(cloud)):
        raise ValueError("cloud contains non-finite coordinates")
    t0 = time.perf_counter()
    idx = subsample(cloud, cfg.n_points, cfg.seed)
    state = make_state(cloud[idx], cfg)
    opt = make_optimizer(state, cfg)
    sched = make_scheduler(opt, cfg)
    rng = np.random.default_rng(cfg.seed)

    history, status, diagnostic = [], "ok", ""
    stage = UnfreezeStage.CUBOID_LIKE
    last_good = _snapshot(state)
    for step in range(cfg.total_steps):
        fw = forward(state, cfg, step, rng)
        loss = fw.breakdown.total
        if not torch.isfinite(loss):
            status, diagnostic = "aborted", f"non-finite loss at step {step}"
            break
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if any(p.grad is not None and not torch.isfinite(p.grad).all() for p in state.parameters()):
            status, diagnostic = "aborted", f"non-finite gradient at step {step}"
            break
        stage = fw.stage
        for p in state.decoder.head_parameters(FROZEN_HEADS[stage]):
            p.grad = None
        last_good = _snapshot(state)
        entry = {"step": step, "stage": stage.name, "lr": opt.param_groups[0]["lr"], "tau": float(fw.alignment.tau.detach())}
        entry.update(fw.breakdown.as_dict())
        history.append(entry)
        if callback is not None:
            callback(step, fw)
        opt.step()
        sched.step()

    if status != "ok":
        log.warning("fit aborted: %s; returning last finite state", diagnostic)
        state.load_state_dict(last_good)
    else:
        last_good = None
    fit_time = time.perf_counter() - t0
    result = extract_outputs(
        state,
        cloud[idx],
        cfg,
        stage=stage,
        loss_history=history,
        final_loss=history[-1] if history else {},
        status=status,
        diagnostic=diagnostic,
        timings={"fit_seconds": fit_time},
        fit_indices=idx,
    )
    if len(idx) < len(cloud):
        result = transfer_labels(result, cloud, cloud[idx])
    return result


def transfer_labels(result: FitResult, cloud: np.ndarray, fitted: np.ndarray) -> FitResult:
    from scipy.spatial import cKDTree

    _, nn = cKDTree(fitted).query(cloud)
    return replace(result, instance_labels=result.instance_labels[nn], semantic_labels=result.semantic_labels[nn])


def shape_seed(global_seed: int, key) -> int:
    """Per-shape seed derived from the global seed and a shape key."""
    digest = hashlib.sha256(f"{global_seed}:{key}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def cloud_key(cloud) -> str:
    return hashlib.sha256(np.ascontiguousarray(cloud, dtype=np.float64).tobytes()).hexdigest()[:16]


@dataclass
class FitFailure:
    index: int
    error: str


def _fit_one(i, cloud, cfg):
    try:
        return fit_shape(cloud, cfg)
    except Exception as exc:  # isolate per-shape failures
        log.error("shape %d failed: %s", i, exc)
        return FitFailure(i, f"{type(exc).__name__}: {exc}")


def default_jobs() -> int:
    return int(os.environ.get(THREADS_ENV, "1"))


def fit_batch(clouds, cfg: FitConfig = None, keys=None, n_jobs: int = None) -> list:
    """Independent fits of several clouds.

    Each shape's seed is derived from ``(cfg.seed, key)``; keys default to a
    content hash of the cloud, so reordering the batch reorders the results.
    """
    from joblib import Parallel, delayed

    cfg = cfg or FitConfig()
    clouds = list(clouds)
    keys = [cloud_key(c) for c in clouds] if keys is None else list(keys)
    cfgs = [replace(cfg, seed=shape_seed(cfg.seed, k)) for k in keys]
    n_jobs = default_jobs() if n_jobs is None else n_jobs
    if n_jobs == 1:
        return [_fit_one(i, c, k) for i, (c, k) in enumerate(zip(clouds, cfgs))]
    return Parallel(n_jobs=n_jobs)(delayed(_fit_one)(i, c, k) for i, (c, k) in enumerate(zip(clouds, cfgs)))


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    n_skipped: int
    tolerance: float
    loss: float
    worst: list

    @property
    def passed(self) -> bool:
        return self.n_checked > 0 and self.max_rel_error < self.tolerance

    def to_dict(self) -> dict:
        out = asdict(self)
        out["passed"] = self.passed
        return out


def toy_config(**overrides) -> FitConfig:
    base = dict(
        n_points=64,
        max_primitives=4,
        max_semantics=2,
        feature_dim=8,
        samples_per_primitive=32,
        total_steps=10,
        dtype="float64",
    )
    base.update(overrides)
    return FitConfig(**base)


def toy_cloud(n: int = 64, seed: int = 0) -> np.ndarray:
    """Points on two offset boxes, normalized; a small fixed target for checks."""
    from .synthetic import sample_box_surface

    rng = np.random.default_rng(seed)
    a = sample_box_surface((0.0, 0.0, 0.15), (0.8, 0.5, 0.1), n // 2, rng)
    b = sample_box_surface((0.0, 0.0, -0.2), (0.15, 0.15, 0.5), n - n // 2, rng)
    pts = np.vstack([a, b])
    pts -= pts.mean(axis=0)
    return pts / (pts.max(axis=0) - pts.min(axis=0)).max()


def gradient_check(
    state: FitState,
    cfg: FitConfig,
    tolerance: float = 1e-4,
    n_coords: int = 300,
    seed: int = 0,
    step_size: float = 1e-5,
    abs_floor: float = 1e-6,
) -> GradCheckReport:
    """Compare autodiff gradients of the total loss with central differences.

    The check runs in float64 on a copy of ``state`` with every stop-gradient
    quantity frozen at the base point: surface draws, Gumbel noise, gate masks
    and the pseudo-label target. The mirror selection uses the relaxed Gumbel
    sample (the straight-through estimator is biased by design). Coordinates
    whose +-h evaluations straddle a discrete switch are skipped.
    """
    state = copy.deepcopy(state).double()
    rng = np.random.default_rng(seed)
    base = forward(state, cfg, None, rng, hard_mirror=False)
    state.zero_grad(set_to_none=True)
    base.breakdown.total.backward()

    params = [p for p in state.parameters() if p.requires_grad]
    sizes = np.array([p.numel() for p in params])
    chosen = set()
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    for k in range(len(params)):  # at least two coordinates per tensor
        chosen.update(offsets[k] + rng.choice(sizes[k], min(2, sizes[k]), replace=False))
    remaining = max(n_coords - len(chosen), 0)
    chosen.update(rng.choice(offsets[-1], min(remaining, offsets[-1]), replace=False))
    chosen = sorted(int(c) for c in chosen)

    def evaluate():
        with torch.no_grad():
            fw = forward(state, cfg, None, draws=base.draws, gates=base.gates, pseudo=base.pseudo, hard_mirror=False)
        return float(fw.breakdown.total), fw.signature

    worst, max_err, checked, skipped = [], 0.0, 0, 0
    for flat in chosen:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        p, local = params[k], flat - offsets[k]
        view = p.data.view(-1)
        g = float(p.grad.view(-1)[local]) if p.grad is not None else 0.0
        orig = float(view[local])
        view[local] = orig + step_size
        f_plus, sig_plus = evaluate()
        view[local] = orig - step_size
        f_minus, sig_minus = evaluate()
        view[local] = orig
        if sig_plus != sig_minus:
            skipped += 1
            continue
        fd = (f_plus - f_minus) / (2 * step_size)
        err = abs(g - fd) / max(abs(g), abs(fd), abs_floor)
        checked += 1
        if err > max_err:
            max_err = err
        worst.append((err, k, int(local), g, fd))
    names = [n for n, p in state.named_parameters() if p.requires_grad]
    worst.sort(reverse=True)
    top = [{"param": names[k], "index": i, "rel_error": e, "autodiff": g, "finite_diff": f} for e, k, i, g, f in worst[:5]]
    return GradCheckReport(max_err, checked, skipped, tolerance, float(base.breakdown.total.detach()), top)


def run_gradient_check(seed: int = 0, tolerance: float = 1e-4, warm_steps: int = 0, **overrides) -> GradCheckReport:
    """Gradient check on the toy instance (N=64, M=4, S=2, D=8, I=32)."""
    cfg = toy_config(seed=seed, **overrides)
    cloud = toy_cloud(cfg.n_points, seed)
    state = make_state(cloud, cfg)
    if warm_steps:
        opt = torch.optim.AdamW(state.parameters(), lr=cfg.lr_start)
        rng = np.random.default_rng(seed)
        for _ in range(warm_steps):
            opt.zero_grad()
            forward(state, cfg, None, rng).breakdown.total.backward()
            opt.step()
    return gradient_check(state, cfg, tolerance=tolerance, seed=seed)
