import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from physgan.estimator import PhysicsGANRestorer
from physgan.presets import toy_synth_config
from physgan.synth import make_sample


@pytest.fixture(scope="module")
def corpus():
    cfg = toy_synth_config(count=6, seed=21)
    samples = [make_sample(cfg, i) for i in range(6)]
    X = np.stack([s.degraded for s in samples])
    y = np.stack([s.clean for s in samples])
    return X, y, [s.model for s in samples]


def small(**kw):
    return PhysicsGANRestorer(**{"epochs": 2, "decay_start_epoch": 1, "batch_size": 3, **kw})


def test_fit_transform_score(corpus):
    X, y, models = corpus
    est = small().fit(X, y, physics_models=models)
    out = est.transform(X[:2])
    assert out.shape == (2, *X.shape[1:3], 3)
    assert out.min() >= 0 and out.max() <= 1
    assert np.array_equal(est.predict(X[:2]), out)
    assert np.isfinite(est.score(X, y))
    assert len(est.loss_history_) == 4 and est.n_features_in_ == int(np.prod(X.shape[1:]))


def test_refit_is_deterministic(corpus):
    X, y, models = corpus
    a = small(seed=4).fit(X, y, physics_models=models).transform(X[:1])
    b = small(seed=4).fit(X, y, physics_models=models).transform(X[:1])
    assert np.array_equal(a, b)


def test_params_roundtrip_and_clone():
    est = small(lam=40.0, ablation=("no_lp",))
    assert est.get_params()["lam"] == 40.0
    c = clone(est)
    assert c.get_params() == est.get_params() and c is not est
    est.set_params(n_resblocks=2)
    assert est.n_resblocks == 2


def test_validation(corpus):
    X, y, models = corpus
    with pytest.raises(NotFittedError):
        small().transform(X)
    with pytest.raises(ValueError, match="physics_models"):
        small().fit(X, y)
    with pytest.raises(ValueError):
        small().fit(X, y[:3], physics_models=models)
    with pytest.raises(ValueError, match="one physics model"):
        small().fit(X, y, physics_models=models[:2])
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        small().fit(X * 2, y, physics_models=models)
    with pytest.raises(ValueError):
        small(epochs=0).fit(X, y, physics_models=models)


def test_basegan_needs_no_physics_models(corpus):
    X, y, _ = corpus
    est = small(ablation=("no_dh", "no_lp", "no_lg_tilde")).fit(X, y)
    assert est.transform(X[:1]).shape[0] == 1
