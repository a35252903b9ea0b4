"""Estimator facade: sklearn protocol compliance and end-to-end behavior."""

import numpy as np
import pytest
from sklearn.base import clone

from uggfuse.dataio import SyntheticSpec, generate, split_instances
from uggfuse.errors import ContractViolationError
from uggfuse.estimator import UggReid, check_labels, check_tokens


def easy_splits(seed=0):
    spec = SyntheticSpec(num_ids=5, per_id=6, dim=8, n_local=4, signal=1.5,
                         noise_std=0.1, hetero_frac=0.0, occl_prob=0.0,
                         conflict_prob=0.0, seed=seed)
    return split_instances(generate(spec))


def small_estimator(**kw):
    base = dict(variant="e", c=2, k=1, epochs=4, seed=0)
    base.update(kw)
    return UggReid(**base)


def test_get_params_round_trip_and_clone():
    est = small_estimator(lr=1e-3, pooling="max")
    params = est.get_params()
    assert params["lr"] == 1e-3 and params["pooling"] == "max"
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(epochs=2)
    assert est.get_params()["epochs"] == 2
    assert twin.get_params()["epochs"] == 4  # clone is independent


def test_fit_transform_predict_on_easy_data():
    train, query, gallery = easy_splits()
    est = small_estimator().fit(train.tokens, train.labels)
    emb = est.transform(query.tokens)
    assert emb.shape == (query.num_samples, 3 * query.dim)
    assert np.isfinite(emb).all()
    # clean, well-separated identities: nearest neighbor should be reliable
    acc = est.score(query.tokens, query.labels)
    assert acc >= 0.8
    pred = est.predict(gallery.tokens)
    assert pred.shape == (gallery.num_samples,)
    assert set(pred) <= set(train.labels)


def test_labels_are_returned_in_caller_vocabulary():
    train, query, _ = easy_splits()
    offset_labels = train.labels * 10 + 100  # non-contiguous identity codes
    est = small_estimator(variant="a", epochs=2).fit(train.tokens, offset_labels)
    pred = est.predict(query.tokens)
    assert set(pred) <= set(offset_labels)
    assert np.array_equal(np.sort(est.classes_), np.unique(offset_labels))


def test_unfitted_estimator_is_rejected():
    est = small_estimator()
    with pytest.raises(ContractViolationError, match="not fitted"):
        est.transform(np.zeros((2, 3, 5, 8)))


def test_input_validation():
    with pytest.raises(ContractViolationError, match="ndim"):
        check_tokens(np.zeros((4, 3, 5)))
    with pytest.raises(ContractViolationError, match="modalities"):
        check_tokens(np.zeros((4, 2, 5, 8)))
    bad = np.zeros((4, 3, 5, 8))
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ContractViolationError, match="finite"):
        check_tokens(bad)
    with pytest.raises(ContractViolationError, match="labels"):
        check_labels([0, 1, 0.5], 3)
    with pytest.raises(ContractViolationError, match="shape"):
        check_labels([0, 1], 3)


def test_transform_enforces_training_geometry():
    train, _, _ = easy_splits()
    est = small_estimator(variant="a", epochs=1).fit(train.tokens, train.labels)
    with pytest.raises(ContractViolationError, match="D="):
        est.transform(np.zeros((2, 3, train.n_local + 1, train.dim + 1)))
    with pytest.raises(ContractViolationError, match="n\\+1"):
        est.transform(np.zeros((2, 3, train.n_local + 2, train.dim)))


def test_clone_refit_reproduces_embeddings():
    train, query, _ = easy_splits()
    est = small_estimator(epochs=2)
    a = est.fit(train.tokens, train.labels).transform(query.tokens)
    b = clone(est).fit(train.tokens, train.labels).transform(query.tokens)
    np.testing.assert_array_equal(a, b)


def test_seed_parameter_changes_the_model():
    train, query, _ = easy_splits()
    a = small_estimator(epochs=2).fit(train.tokens, train.labels)
    b = small_estimator(epochs=2, seed=1).fit(train.tokens, train.labels)
    assert not np.array_equal(a.transform(query.tokens), b.transform(query.tokens))


def test_invalid_variant_rejected_at_fit_time():
    train, _, _ = easy_splits()
    with pytest.raises(ContractViolationError, match="variant"):
        small_estimator(variant="f").fit(train.tokens, train.labels)
