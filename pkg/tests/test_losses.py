import math

import numpy as np
import pytest
import torch

from repsq.decoders import UnfreezeStage
from repsq.losses import (
    LossConfig,
    alignment_loss,
    anti_collapse_loss,
    compactness_loss,
    coverage,
    hausdorff,
    hausdorff_loss,
    point_to_primitive,
    primitive_distances,
    reconstruction,
    total_loss,
)


@pytest.fixture
def problem(rng):
    cloud = rng.uniform(-0.5, 0.5, size=(40, 3))
    samples = rng.uniform(-0.5, 0.5, size=(3, 25, 3))
    return cloud, samples


def brute_distances(cloud, samples):
    n, m = len(cloud), len(samples)
    d = np.zeros((n, m))
    for a in range(n):
        for k in range(m):
            d[a, k] = min(np.linalg.norm(cloud[a] - s) for s in samples[k])
    cov = np.zeros(samples.shape[:2])
    for k in range(m):
        for i in range(samples.shape[1]):
            cov[k, i] = min(np.linalg.norm(samples[k, i] - x) for x in cloud)
    return d, cov


def test_distances_match_double_loops(problem):
    cloud, samples = problem
    d, cov = primitive_distances(torch.as_tensor(cloud), torch.as_tensor(samples))
    d_ref, cov_ref = brute_distances(cloud, samples)
    assert np.allclose(d.numpy(), d_ref, atol=1e-12)
    assert np.allclose(cov.numpy(), cov_ref, atol=1e-12)
    assert math.isclose(float(point_to_primitive(cloud[5], samples[1])), d_ref[5, 1], rel_tol=1e-12)
    assert math.isclose(float(coverage(samples[2], cloud)), cov_ref[2].mean(), rel_tol=1e-12)


def test_distance_gradient_reaches_only_the_nearest_sample():
    cloud = torch.tensor([[0.0, 0.0, 0.0]], dtype=torch.float64)
    samples = torch.tensor([[[0.3, 0.0, 0.0], [1.0, 0.0, 0.0]]], dtype=torch.float64, requires_grad=True)
    d, _ = primitive_distances(cloud, samples)
    d.sum().backward()
    assert torch.allclose(samples.grad[0, 0], torch.tensor([1.0, 0, 0], dtype=torch.float64))
    assert torch.all(samples.grad[0, 1] == 0)


def test_reconstruction_and_hausdorff_match_definitions(problem):
    cloud, samples = problem
    d_ref, cov_ref = brute_distances(cloud, samples)
    n, m = d_ref.shape
    rec_ref = sum(d_ref[a].min() for a in range(n)) / (2 * n) + sum(cov_ref[k].mean() for k in range(m)) / (2 * m)
    assert math.isclose(float(reconstruction(torch.as_tensor(d_ref), torch.as_tensor(cov_ref))), rec_ref, rel_tol=1e-12)
    hd_ref = max(max(d_ref[a].min() for a in range(n)), max(d_ref[:, k].min() for k in range(m)))
    assert math.isclose(float(hausdorff(torch.as_tensor(d_ref))), hd_ref, rel_tol=1e-12)
    d = torch.as_tensor(d_ref)
    assert math.isclose(float(hausdorff_loss(d, 2 * d)), 1.5 * hd_ref, rel_tol=1e-12)


def test_zero_loss_when_primitives_are_the_cloud(rng):
    samples = rng.uniform(-0.5, 0.5, size=(1, 30, 3))
    d, cov = primitive_distances(torch.as_tensor(samples[0]), torch.as_tensor(samples))
    assert float(reconstruction(d, cov)) == 0
    assert float(hausdorff(d)) == 0


def test_anti_collapse_matches_loops(rng):
    n, m = 12, 3
    p = rng.dirichlet(np.ones(m), size=n).T
    d_ins = rng.uniform(0, 0.1, size=(n, m))
    d_sem = rng.uniform(0, 0.1, size=(n, m))
    delta = 0.05
    ref = 0.0
    for a in range(n):
        for k in range(m):
            c = 0.5 * (d_ins[a, k] * (d_ins[a, k] > delta) + d_sem[a, k] * (d_sem[a, k] > delta))
            ref += p[k, a] * c
    ref /= n
    val = anti_collapse_loss(*(torch.as_tensor(x) for x in (p, d_ins, d_sem)), delta)
    assert math.isclose(float(val), ref, rel_tol=1e-12)


def test_anti_collapse_gate_carries_no_gradient():
    p = torch.tensor([[1.0]], dtype=torch.float64)
    d = torch.tensor([[0.2]], dtype=torch.float64, requires_grad=True)
    anti_collapse_loss(p, d, d, 0.05).backward()
    assert math.isclose(float(d.grad), 1.0)


@pytest.mark.parametrize("m", [2, 4, 16])
def test_compactness_uniform_closed_form(m):
    p = torch.full((m, 50), 1.0 / m, dtype=torch.float64)
    assert abs(float(compactness_loss(p, 0.01)) - (1 / m + 0.01)) < 1e-12


def test_compactness_prefers_fewer_parts():
    spread = torch.full((4, 20), 0.25, dtype=torch.float64)
    peaked = torch.zeros(4, 20, dtype=torch.float64)
    peaked[0] = 1
    assert compactness_loss(peaked, 0.01) < compactness_loss(spread, 0.01)


def test_alignment_loss_is_mse_with_fixed_target(rng):
    p = torch.as_tensor(rng.random((2, 5))).requires_grad_()
    target = torch.as_tensor(rng.random((2, 5)))
    val = alignment_loss(p, target)
    assert math.isclose(float(val.detach()), float(((p.detach() - target) ** 2).mean()))
    val.backward()
    assert torch.allclose(p.grad, 2 * (p.detach() - target) / 10)


def test_weight_schedule():
    cfg = LossConfig()
    assert cfg.weights() == (1.0, 0.3, 0.1, 0.01)
    l1, l2, l3, l4 = cfg.weights(5, 100, UnfreezeStage.CUBOID_LIKE)
    assert (l1, l2, l3, l4) == (1.0, 0.6, pytest.approx(0.3), 0.01)
    assert cfg.weights(10, 100, UnfreezeStage.CUBOID_LIKE)[0] == 0.0
    assert cfg.weights(50, 100, UnfreezeStage.DEFORMABLE) == (0.0, 0.3, 0.1, 0.01)
    with pytest.raises(ValueError):
        LossConfig(lambda2=-1)


def test_total_is_weighted_sum():
    terms = [torch.tensor(v, dtype=torch.float64) for v in (0.5, 0.2, 0.1, 0.3, 0.4)]
    b = total_loss(*terms, LossConfig())
    assert math.isclose(float(b.total), 0.5 + 0.2 + 0.3 * 0.1 + 0.1 * 0.3 + 0.01 * 0.4)
    assert set(b.as_dict()) == {"recon", "hd", "wd", "compact", "align", "total", "weights"}
