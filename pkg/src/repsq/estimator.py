"""scikit-learn style wrapper around :func:`repsq.fitter.fit_shape`."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import io
from .fitter import FitConfig, fit_shape
from .losses import LossConfig
from .metrics import chamfer


class SuperquadricAbstraction(ClusterMixin, BaseEstimator):
    """Per-shape abstraction of a point cloud by deformable superquadrics.

    ``fit`` normalizes the cloud, optimizes, and stores primitives in the
    input frame. ``labels_`` are instance labels; ``semantic_labels_`` the
    semantic ones. ``predict`` labels new points by their nearest kept
    instance primitive and ``transform`` returns the distances to them
    (all primitives stand in when none passes the existence threshold).
    """

    def __init__(
        self,
        max_primitives=16,
        max_semantics=6,
        total_steps=600,
        feature_dim=32,
        samples_per_primitive=256,
        n_points=2048,
        lr_start=1e-2,
        lr_end=3e-3,
        weight_decay=1e-3,
        logit_lr_scale=30.0,
        backend="direct",
        existence_threshold=20,
        lambdas=(1.0, 0.3, 0.1, 0.01),
        dtype="float32",
        random_state=0,
    ):
        self.max_primitives = max_primitives
        self.max_semantics = max_semantics
        self.total_steps = total_steps
        self.feature_dim = feature_dim
        self.samples_per_primitive = samples_per_primitive
        self.n_points = n_points
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.weight_decay = weight_decay
        self.logit_lr_scale = logit_lr_scale
        self.backend = backend
        self.existence_threshold = existence_threshold
        self.lambdas = lambdas
        self.dtype = dtype
        self.random_state = random_state

    def _config(self) -> FitConfig:
        l1, l2, l3, l4 = self.lambdas
        seed = self.random_state
        if seed is None:
            seed = int(np.random.default_rng().integers(2**31))
        elif isinstance(seed, np.random.RandomState):
            seed = int(seed.randint(2**31))
        return FitConfig(
            n_points=self.n_points,
            max_primitives=self.max_primitives,
            max_semantics=self.max_semantics,
            feature_dim=self.feature_dim,
            samples_per_primitive=self.samples_per_primitive,
            total_steps=self.total_steps,
            lr_start=self.lr_start,
            lr_end=self.lr_end,
            weight_decay=self.weight_decay,
            logit_lr_scale=self.logit_lr_scale,
            seed=int(seed),
            backend=self.backend,
            loss=LossConfig(lambda1=l1, lambda2=l2, lambda3=l3, lambda4=l4),
            existence_threshold=self.existence_threshold,
            dtype=self.dtype,
        )

    def _check_points(self, X, reset: bool):
        X = check_array(X, dtype=np.float64, ensure_min_samples=io.MIN_POINTS if reset else 1)
        if X.shape[1] != 3:
            raise ValueError(f"expected 3 coordinates per point, got {X.shape[1]}")
        if reset:
            self.n_features_in_ = 3
        return X

    def fit(self, X, y=None):
        X = self._check_points(X, reset=True)
        cloud = io.normalize(X)
        result = fit_shape(cloud.points, self._config())
        self.result_ = result
        self.normalization_ = {"centroid": cloud.centroid, "scale": cloud.scale}
        self.labels_ = result.instance_labels
        self.semantic_labels_ = result.semantic_labels
        self.existence_mask_ = result.existence_mask
        self.semantic_of_instance_ = result.semantic_of_instance
        for kind in ("ins", "sem", "rep"):
            setattr(self, f"params_{kind}_", io.denormalized_params(getattr(result, f"theta_{kind}"), cloud))
        self._cloud = cloud
        return self

    def sample(self, kind: str = "rep", count: int = None, seed: int = 0) -> np.ndarray:
        """Surface samples of the kept primitives, in the input frame."""
        check_is_fitted(self, "result_")
        return self._cloud.denormalize(self.result_.sample(kind, count, seed))

    @property
    def primitive_slots_(self) -> np.ndarray:
        """Instance slots used by ``transform`` and ``predict``."""
        check_is_fitted(self, "result_")
        kept = self.result_.kept
        return kept if len(kept) else np.arange(len(self.existence_mask_))

    def _primitive_distances(self, X) -> np.ndarray:
        res = self.result_
        slots = self.primitive_slots_
        count = res.config.samples_per_primitive * 4
        samples = res.sample("ins", count, seed=0, masked=False).reshape(-1, count, 3)[slots]
        samples = self._cloud.denormalize(samples)
        return np.stack([cKDTree(s).query(X)[0] for s in samples], axis=1)

    def transform(self, X) -> np.ndarray:
        """Distance from each point to every primitive in ``primitive_slots_`` (N×K)."""
        check_is_fitted(self, "result_")
        return self._primitive_distances(self._check_points(X, reset=False))

    def predict(self, X) -> np.ndarray:
        """Instance slot of the nearest primitive."""
        d = self.transform(X)
        return self.primitive_slots_[d.argmin(axis=1)]

    def fit_predict(self, X, y=None, **kwargs) -> np.ndarray:
        return self.fit(X).labels_

    def score(self, X, y=None) -> float:
        """Negative chamfer distance between ``X`` and the repeatable abstraction (normalized frame)."""
        check_is_fitted(self, "result_")
        X = self._check_points(X, reset=False)
        normed = (X - self._cloud.centroid) / self._cloud.scale
        return -chamfer(self.result_.sample("rep"), normed)
