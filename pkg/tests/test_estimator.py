import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from multialign.data import SyntheticSpec, generate_synthetic
from multialign.encoders import ImageInstance
from multialign.estimator import CrossMediaRetriever, shuffled_batches

SMALL = dict(conv_layers=((4, 3), (4, 3), (4, 3)), hidden_dim=8, attn_dim=8, common_dim=8, seq_len=40, batch_size=4)


@pytest.fixture(scope="module")
def data():
    ds = generate_synthetic(SyntheticSpec(num_pairs=16, seed=3, split=(0.75, 0, 0.25)))
    tr, te = ds.subset("train"), ds.subset("test")
    return [r.image for r in tr], [r.caption for r in tr], [r.image for r in te], [r.caption for r in te]


@pytest.fixture(scope="module")
def fitted(data):
    Xi, Xc, _, _ = data
    return CrossMediaRetriever(epochs=2, optimizer="adam", lr=0.01, **SMALL).fit(Xi, Xc)


def test_sklearn_params_round_trip():
    est = CrossMediaRetriever(margin=2.0, mode="local")
    params = est.get_params()
    assert params["margin"] == 2.0 and params["mode"] == "local"
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(k=5)
    assert est.k == 5


def test_unfitted_use_raises(data):
    with pytest.raises(NotFittedError):
        CrossMediaRetriever().transform(data[0])


def test_fit_records_history(fitted, data):
    assert fitted.n_steps_ == len(fitted.history_) > 0
    rec = fitted.history_[0]
    assert {"step", "total", "global", "local", "relation", "lr", "epoch"} <= set(rec)


def test_transform_predict_score_shapes(fitted, data):
    _, _, Ti, Tc = data
    assert fitted.transform(Ti).shape == (len(Ti), 8)
    pred = fitted.predict(Ti, Tc)
    assert pred.shape == (len(Ti),) and pred.max() < len(Tc)
    assert 0.0 <= fitted.score(Ti, Tc) <= 1.0
    sim = fitted.similarity(Ti, Tc)
    np.testing.assert_array_equal(pred, sim.argmax(axis=1))


def test_parallel_similarity_equals_serial(fitted, data):
    _, _, Ti, Tc = data
    serial = fitted.similarity(Ti, Tc)
    fitted.set_params(workers=3)
    try:
        np.testing.assert_array_equal(serial, fitted.similarity(Ti, Tc))
    finally:
        fitted.set_params(workers=1)


def test_evaluate_modes_report(fitted, data):
    _, _, Ti, Tc = data
    for mode in ("baseline", "full"):
        i2t, t2i = fitted.evaluate(Ti, Tc, mode=mode)
        assert i2t.mode == mode and i2t.num_queries == len(Ti)


def test_fit_is_deterministic(data):
    Xi, Xc, _, _ = data
    a = CrossMediaRetriever(epochs=1, random_state=4, **SMALL).fit(Xi, Xc)
    b = CrossMediaRetriever(epochs=1, random_state=4, **SMALL).fit(Xi, Xc)
    assert all(np.array_equal(a.params_[n].data, b.params_[n].data) for n in a.params_)
    assert a.history_ == b.history_


def test_zero_epochs_keeps_initialisation(data):
    Xi, Xc, _, _ = data
    est = CrossMediaRetriever(epochs=0, **SMALL).fit(Xi, Xc)
    init = CrossMediaRetriever(**SMALL).initialize(32).params_
    assert all(np.array_equal(est.params_[n].data, init[n].data) for n in init)


def test_eval_set_tracks_best(data):
    Xi, Xc, Ti, Tc = data
    est = CrossMediaRetriever(epochs=2, **SMALL).fit(Xi, Xc, eval_set=(Ti, Tc))
    assert est.best_params_ is not None and 0 <= est.best_score_ <= 1


def test_save_load_round_trip(fitted, data, tmp_path):
    _, _, Ti, Tc = data
    fitted.save(tmp_path / "m.json")
    back = CrossMediaRetriever.load(tmp_path / "m.json")
    assert back.get_params() == fitted.get_params()
    np.testing.assert_array_equal(back.similarity(Ti, Tc), fitted.similarity(Ti, Tc))


def test_input_validation(data):
    Xi, Xc, _, _ = data
    est = CrossMediaRetriever(**SMALL)
    with pytest.raises(ValueError):
        est.fit(Xi, Xc[:-1])
    with pytest.raises(TypeError):
        est.fit(Xi, "one caption")
    with pytest.raises(ValueError):
        est.fit([ImageInstance(np.zeros(4), np.zeros((2, 4))), ImageInstance(np.zeros(5), np.zeros((2, 5)))], ["a", "b"])
    with pytest.raises(ValueError):
        CrossMediaRetriever(batch_size=1, **{k: v for k, v in SMALL.items() if k != "batch_size"}).fit(Xi, Xc)
    with pytest.raises(ValueError):
        CrossMediaRetriever(mode="everything", **SMALL).fit(Xi, Xc)


def test_accepts_tuple_and_dict_images(fitted):
    r = np.random.default_rng(0)
    g, regions = r.standard_normal(32), r.standard_normal((5, 32))
    a = fitted.transform([(g, regions)])
    b = fitted.transform([{"global": g, "regions": regions}])
    np.testing.assert_array_equal(a, b)


def test_shuffled_batches_cover_and_drop_singletons():
    rng = np.random.default_rng(0)
    batches = shuffled_batches(list(range(9)), 4, rng)
    assert [len(b) for b in batches] == [4, 4]
    with pytest.raises(ValueError):
        shuffled_batches([0, 0, 0], 2, rng)
