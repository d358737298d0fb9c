import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from repsq import SuperquadricAbstraction
from repsq.fitter import toy_cloud


def small(**kw):
    params = dict(max_primitives=4, max_semantics=2, feature_dim=8, samples_per_primitive=32, total_steps=10, n_points=64, dtype="float64")
    params.update(kw)
    return SuperquadricAbstraction(**params)


@pytest.fixture(scope="module")
def fitted():
    X = toy_cloud(64, 0) * 3.0 + 5.0
    return small(existence_threshold=5).fit(X), X


def test_params_and_clone():
    est = small(random_state=3)
    params = est.get_params()
    assert params["max_primitives"] == 4 and params["random_state"] == 3
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(total_steps=99)
    assert est.total_steps == 99


def test_not_fitted():
    with pytest.raises(NotFittedError):
        small().predict(np.zeros((40, 3)))


def test_input_validation():
    with pytest.raises(ValueError):
        small().fit(np.zeros((40, 2)))
    with pytest.raises(ValueError):
        small().fit(np.zeros((5, 3)))
    bad = toy_cloud(64, 0)
    bad[0, 0] = np.inf
    with pytest.raises(ValueError):
        small().fit(bad)


def test_fitted_attributes(fitted):
    est, X = fitted
    assert est.labels_.shape == (64,)
    assert est.semantic_labels_.shape == (64,)
    assert est.params_rep_.shape == (4, 16)
    assert est.n_features_in_ == 3
    # parameters live in the input frame
    assert np.allclose(est.normalization_["centroid"], X.mean(0))
    kept = est.result_.kept
    assert np.all(np.abs(est.params_ins_[kept, 9:12] - 5.0) < 3.0)


def test_predict_transform_score(fitted):
    est, X = fitted
    d = est.transform(X)
    assert len(est.result_.kept) > 0
    assert d.shape == (64, len(est.result_.kept))
    assert np.all(d >= 0)
    pred = est.predict(X)
    assert set(pred) <= set(est.result_.kept)
    assert np.array_equal(pred, est.result_.kept[d.argmin(1)])
    s = est.score(X)
    assert s <= 0
    assert est.score(X) > est.score(X + 0.5)


def test_fit_predict_matches_labels():
    X = toy_cloud(64, 1)
    est = small(random_state=2)
    labels = est.fit_predict(X)
    assert np.array_equal(labels, est.labels_)
    again = small(random_state=2).fit(X)
    assert np.array_equal(again.labels_, labels)


def test_predict_falls_back_to_all_slots_when_none_kept():
    X = toy_cloud(64, 0)
    est = small(existence_threshold=10_000).fit(X)
    assert len(est.result_.kept) == 0
    assert np.array_equal(est.primitive_slots_, np.arange(4))
    assert est.transform(X).shape == (64, 4)
