import itertools
import math

import numpy as np
import pytest
from sklearn.metrics import davies_bouldin_score, normalized_mutual_info_score

from repsq.metrics import LabeledCloud, chamfer, dbi, emd, iou_matrix, miou, nmi


def brute_miou(pred, gt):
    g_ids, p_ids = sorted(set(gt)), sorted(set(pred))

    def iou(g, p):
        a, b = gt == g, pred == p
        return (a & b).sum() / (a | b).sum()

    best = 0.0
    # every injective assignment of GT segments to predicted segments (or to nothing)
    slots = p_ids + [None] * len(g_ids)
    for perm in itertools.permutations(slots, len(g_ids)):
        used = [p for p in perm if p is not None]
        if len(used) != len(set(used)):
            continue
        total = sum(iou(g, p) for g, p in zip(g_ids, perm) if p is not None)
        best = max(best, total)
    return best / len(g_ids)


def brute_nmi(pred, gt):
    n = len(pred)
    def entropy(lab):
        return -sum((c / n) * math.log(c / n) for c in np.unique(lab, return_counts=True)[1])
    mi = 0.0
    for a in set(pred):
        for b in set(gt):
            nab = np.sum((pred == a) & (gt == b))
            if nab:
                mi += nab / n * math.log(n * nab / (np.sum(pred == a) * np.sum(gt == b)))
    h = 0.5 * (entropy(pred) + entropy(gt))
    return 1.0 if h == 0 else mi / h


def brute_dbi(x, lab):
    ids = sorted(set(lab))
    cents = {k: x[lab == k].mean(0) for k in ids}
    scat = {k: np.mean([np.linalg.norm(p - cents[k]) for p in x[lab == k]]) for k in ids}
    worst = []
    for i in ids:
        worst.append(max((scat[i] + scat[j]) / np.linalg.norm(cents[i] - cents[j]) for j in ids if j != i))
    return float(np.mean(worst))


def random_labels(rng, n, k):
    return rng.integers(0, k, size=n)


def test_miou_matches_brute_force(rng):
    for _ in range(30):
        n = int(rng.integers(5, 60))
        gt, pred = random_labels(rng, n, rng.integers(1, 4)), random_labels(rng, n, rng.integers(1, 5))
        assert abs(miou(pred, gt) - brute_miou(pred, gt)) < 1e-12


def test_miou_perfect_and_permuted(rng):
    gt = random_labels(rng, 100, 4)
    perm = np.array([2, 0, 3, 1])
    assert miou(perm[gt], gt) == 1.0
    assert miou(LabeledCloud(np.zeros((100, 3)), perm[gt]), gt) == 1.0


def test_iou_matrix_values():
    gt = np.array([0, 0, 1, 1])
    pred = np.array([0, 1, 1, 1])
    m = iou_matrix(pred, gt)
    assert np.allclose(m, [[0.5, 0.25], [0.0, 2 / 3]])


def test_nmi_matches_loops_and_sklearn(rng):
    for _ in range(30):
        n = int(rng.integers(5, 200))
        a, b = random_labels(rng, n, rng.integers(1, 6)), random_labels(rng, n, rng.integers(1, 6))
        ref = brute_nmi(a, b)
        assert abs(nmi(a, b) - ref) < 1e-12
        assert abs(nmi(a, b) - normalized_mutual_info_score(b, a, average_method="arithmetic")) < 1e-9


def test_nmi_edge_cases():
    assert nmi([0, 0, 0], [1, 1, 1]) == 1.0
    assert nmi([0, 1, 0, 1], [5, 7, 5, 7]) == pytest.approx(1.0)
    assert nmi([0, 0, 0, 0], [0, 1, 0, 1]) == 0.0


def test_dbi_matches_loops_and_sklearn(rng):
    for _ in range(20):
        n = int(rng.integers(10, 150))
        x = rng.normal(size=(n, 3))
        lab = random_labels(rng, n, rng.integers(2, 6))
        if len(set(lab)) < 2:
            continue
        assert abs(dbi(x, lab) - brute_dbi(x, lab)) < 1e-12
        assert abs(dbi(x, lab) - davies_bouldin_score(x, lab)) < 1e-9


def test_dbi_guards():
    with pytest.raises(ValueError):
        dbi(np.zeros((4, 3)), [0, 0, 0, 0])
    # coincident centroids stay finite
    x = np.array([[0.0, 0, 0], [1, 0, 0], [0.5, 0.5, 0], [0.5, -0.5, 0]])
    assert np.isfinite(dbi(x, [0, 0, 1, 1]))


def test_chamfer_matches_brute_force(rng):
    a, b = rng.normal(size=(30, 3)), rng.normal(size=(45, 3))
    da = [min(np.sum((p - q) ** 2) for q in b) for p in a]
    db = [min(np.sum((p - q) ** 2) for q in a) for p in b]
    assert abs(chamfer(a, b) - 0.5 * (np.mean(da) + np.mean(db))) < 1e-12
    assert chamfer(a, a) == 0


def test_emd_exact_matches_permutations(rng):
    a, b = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    best = min(np.mean([np.linalg.norm(a[i] - b[p]) for i, p in enumerate(perm)]) for perm in itertools.permutations(range(6)))
    assert abs(emd(a, b) - best) < 1e-12


def test_emd_sinkhorn_close_to_exact(rng):
    a, b = rng.uniform(-0.5, 0.5, size=(128, 3)), rng.uniform(-0.5, 0.5, size=(128, 3))
    exact = emd(a, b, method="exact")
    approx = emd(a, b, method="sinkhorn")
    assert abs(approx - exact) / exact < 0.05


def test_emd_validation(rng):
    with pytest.raises(ValueError):
        emd(np.zeros((3, 3)), np.zeros((4, 3)))
    with pytest.raises(ValueError):
        emd(np.zeros((3, 3)), np.zeros((3, 3)), method="magic")


def test_label_validation():
    with pytest.raises(ValueError):
        miou([0, 1], [0, 1, 2])
    with pytest.raises(ValueError):
        LabeledCloud(np.zeros((2, 3)), [-1, 0])
