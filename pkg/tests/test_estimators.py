import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from clearct.contrastive import AugmentationSpec
from clearct.estimators import ABMILClassifier, LeCLPretrainer
from clearct.validation import check_bag_targets, check_bags, check_slices

HEAD = dict(attention_dim=8, head_hidden=16, batch_size=8, lr=1e-2, max_epochs=6)


def bags_and_labels(rng, n=40, d=6):
    X, y = [], []
    for i in range(n):
        b = rng.normal(size=(int(rng.integers(2, 7)), d))
        lab = [i % 2, (i // 2) % 2]
        b[0, :2] += 3.0 * np.array(lab)
        X.append(b)
        y.append(lab)
    return X, np.array(y)


def test_get_params_and_clone():
    est = ABMILClassifier(lr=3e-4, patience=2)
    params = est.get_params()
    assert params["lr"] == 3e-4 and params["patience"] == 2 and params["task_kind"] == "multilabel"
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    assert LeCLPretrainer(lam=3.0).set_params(tau=0.1).get_params()["tau"] == 0.1


def test_unfitted_estimators_raise():
    with pytest.raises(NotFittedError):
        ABMILClassifier().predict([np.zeros((2, 3))])
    with pytest.raises(NotFittedError):
        LeCLPretrainer().transform(np.zeros((1, 64, 64)))


def test_fit_predict_multilabel(rng):
    X, y = bags_and_labels(rng)
    model = ABMILClassifier(**HEAD).fit(X, y)
    proba = model.predict_proba(X)
    assert proba.shape == (40, 2) and np.all((proba >= 0) & (proba <= 1))
    assert set(np.unique(model.predict(X))) <= {0, 1}
    assert model.score(X, y) > 0.9
    att = model.attention(X[:3])
    assert [len(a) for a in att] == [len(b) for b in X[:3]]


def test_fit_predict_multiclass(rng):
    X, y2 = bags_and_labels(rng)
    y = y2[:, 0] + 2 * y2[:, 1]
    model = ABMILClassifier(task_kind="multiclass", **HEAD).fit(X, y)
    proba = model.predict_proba(X)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, rtol=1e-12)
    assert model.predict(X).shape == (40,)
    assert model.n_classes_ == 4


def test_persistence_round_trip(rng):
    X, y = bags_and_labels(rng)
    model = ABMILClassifier(**HEAD).fit(X, y)
    back = ABMILClassifier.from_arrays(model.to_arrays())
    np.testing.assert_array_equal(back.predict_proba(X), model.predict_proba(X))


def test_input_validation(rng):
    X, y = bags_and_labels(rng, n=6)
    with pytest.raises(ValueError, match="targets"):
        ABMILClassifier(**HEAD).fit(X, y[:5])
    with pytest.raises(ValueError, match="binary"):
        ABMILClassifier(**HEAD).fit(X, y * 2)
    model = ABMILClassifier(**HEAD).fit(X, y)
    with pytest.raises(ValueError, match="fitted with 6"):
        model.predict([np.zeros((2, 5))])
    with pytest.raises(ValueError, match="NaN"):
        check_bags([np.array([[np.nan, 1.0]])])
    with pytest.raises(ValueError, match="inconsistent"):
        check_bags([np.zeros((2, 3)), np.zeros((2, 4))])
    with pytest.raises(ValueError, match="at least one"):
        check_bags([])
    with pytest.raises(ValueError, match="multiclass"):
        check_bag_targets([0.5, 1.0], 2, "multiclass")
    with pytest.raises(ValueError, match="shape"):
        check_slices(np.zeros((2, 8, 8)), (16, 16))


def test_pretrainer_fit_transform(rng):
    X = rng.random((32, 16, 16))
    boxes = [(4, 4, 9, 9) if i % 4 == 0 else None for i in range(32)]
    est = LeCLPretrainer(input_size=(16, 16), embed_dim=8, depth=1, channels=4, projection_hidden=16, lam=1.0,
                         batch_size=8, key_queue_size=16, lesion_queue_size=8, epochs=2, warmup_epochs=1,
                         lr=1e-3, random_state=0)
    est.fit(X, bboxes=boxes)
    assert len(est.loss_curve_) == 8 and np.all(np.isfinite(est.loss_curve_))
    Z = est.transform(X[:5])
    assert Z.shape == (5, 8)
    again = clone(est).fit(X, bboxes=boxes)
    np.testing.assert_array_equal(again.transform(X[:5]), Z)
    with pytest.raises(ValueError, match="bboxes"):
        clone(est).fit(X, bboxes=boxes[:3])


def test_pretrainer_configs_follow_params():
    est = LeCLPretrainer(method="moco", lam=5.0, augmentation=AugmentationSpec.identity())
    assert est.contrastive_config().effective_lambda == 0.0
    with pytest.raises(ValueError):
        LeCLPretrainer(kind="vmamba").encoder_config()
