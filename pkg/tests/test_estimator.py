import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from gascn import ShapeCompleter
from gascn.estimator import chamfer_scores, check_clouds
from gascn.geometry import chamfer_distance

from conftest import random_cloud


@pytest.fixture(scope="module")
def pairs():
    rng = np.random.default_rng(2)
    gts = [random_cloud(rng, 60) * rng.uniform(0.5, 2.0) + rng.normal(size=3) for _ in range(4)]
    partials = [g[g[:, 0] > np.median(g[:, 0])] for g in gts]
    return partials, gts


@pytest.fixture(scope="module")
def fitted(pairs):
    X, y = pairs
    est = ShapeCompleter(n_coarse=8, grid_n=2, latent_dim=16, input_k=4, epochs=3, batch_size=2, random_state=1)
    return est.fit(X, y)


def test_params_and_clone():
    est = ShapeCompleter(variant="model_b", epochs=5)
    assert est.get_params()["variant"] == "model_b"
    twin = clone(est)
    assert twin.get_params() == est.get_params() and not hasattr(twin, "params_")
    assert est.set_params(lr=0.01).lr == 0.01


def test_unfitted_raises(pairs):
    with pytest.raises(NotFittedError):
        ShapeCompleter().predict(pairs[0])


def test_fit_predict_shapes(fitted, pairs):
    X, _ = pairs
    fine = fitted.predict(X)
    assert len(fine) == len(X) and all(f.shape == (8 * 4, 3) for f in fine)
    assert all(c.shape == (8, 3) for c in fitted.predict_coarse(X))
    assert fitted.transform(X).shape == (len(X), 16)
    assert len(fitted.history_) == 3 and fitted.n_features_in_ == 3
    # Completions come back in each input's own frame.
    for f, x in zip(fine, X):
        assert np.linalg.norm(f.mean(axis=0) - x.mean(axis=0)) < np.ptp(x, axis=0).max()


def test_fit_is_deterministic(pairs):
    X, y = pairs
    kw = dict(n_coarse=8, grid_n=2, latent_dim=16, input_k=4, epochs=2, batch_size=2, random_state=3)
    a = ShapeCompleter(**kw).fit(X, y).predict(X)
    b = ShapeCompleter(**kw).fit(X, y).predict(X)
    assert all(np.array_equal(p, q) for p, q in zip(a, b))


def test_score_is_negative_mean_chamfer(fitted, pairs):
    X, y = pairs
    expected = np.mean([chamfer_distance(p, g)[0] for p, g in zip(fitted.predict(X), y)])
    assert fitted.score(X, y) == pytest.approx(-expected, rel=1e-10)


def test_input_validation(fitted, pairs):
    X, y = pairs
    with pytest.raises(ValueError):
        ShapeCompleter(input_k=4).fit(X, y[:2])
    with pytest.raises(ValueError):
        fitted.predict([np.zeros((3, 3))])
    with pytest.raises(ValueError):
        check_clouds([np.zeros((5, 2))])
    with pytest.raises(ValueError):
        check_clouds([])
    with pytest.raises(TypeError):
        check_clouds("cloud.ply")
    single = fitted.predict(X[0])
    assert len(single) == 1


def test_chamfer_scores(pairs):
    _, y = pairs
    assert np.array_equal(chamfer_scores(y, y), np.zeros(len(y)))
    with pytest.raises(ValueError):
        chamfer_scores(y, y[:1])
