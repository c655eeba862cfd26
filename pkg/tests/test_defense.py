import math

import numpy as np
import pytest

from kshield.defense import (DefenseConfig, combine, combine_hard, combine_soft, defend_batch, defend_classify,
                             neighbor_weights, weight_cbw_d, weight_cbw_e, weight_uniform)
from kshield.diffnet import Checkpoint, ModelConfig, Network, init_params
from kshield.features import FeaturePipeline, default_pool_spec
from kshield.index import FlatIndex, PredictionStore


def random_softmaxes(rng, k, c, temp=3.0):
    z = rng.standard_normal((k, c)) * temp
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def test_uniform_weights():
    assert weight_uniform(1).tolist() == [1.0]
    assert weight_uniform(4).tolist() == [0.25] * 4
    for k in (3, 7, 50, 999):
        assert abs(weight_uniform(k).sum() - 1) < 1e-9


def test_cbw_e_examples():
    assert weight_cbw_e(np.full(7, 1 / 7)) == pytest.approx(0, abs=1e-12)
    assert weight_cbw_e(np.eye(10)[3]) == pytest.approx(2.302585, abs=1e-6)
    assert weight_cbw_e([0.5, 0.5, 0, 0]) == pytest.approx(0.693147, abs=1e-6)
    with pytest.raises(ValueError):
        weight_cbw_e([0.5, 0.6])


def test_cbw_d_examples():
    assert weight_cbw_d(np.full(5, 0.2)) == pytest.approx(0, abs=1e-12)
    assert weight_cbw_d(np.eye(4)[0], m=20, p=3) == pytest.approx(3.0)
    assert weight_cbw_d([0.6, 0.3, 0.1], m=2, p=3) == pytest.approx(0.152, abs=1e-9)
    assert weight_cbw_d([0.6, 0.3, 0.1], m=20, p=3) == pytest.approx(0.152, abs=1e-9)   # M clipped to C-1
    with pytest.raises(ValueError):
        weight_cbw_d([0.3, 0.3])


def test_weight_ranges():
    rng = np.random.default_rng(0)
    for s in random_softmaxes(rng, 200, 10):
        e, d = weight_cbw_e(s), weight_cbw_d(s, 20, 3)
        assert 0 <= e <= math.log(10) + 1e-9
        assert 0 <= d <= 9 + 1e-9


def test_soft_examples():
    label, combined = combine_soft([[0.8, 0.2], [0.2, 0.8]], [1, 1])
    assert label == 0 and np.allclose(combined, [0.5, 0.5])
    rng = np.random.default_rng(1)
    s = random_softmaxes(rng, 12, 6)
    w = rng.random(12)
    a, va = combine_soft(s, w)
    b, vb = combine_soft(s, 7 * w)
    assert a == b and np.allclose(va, vb, atol=1e-12)
    assert abs(va.sum() - 1) < 1e-5 and va.min() >= 0


def test_hard_examples():
    assert combine_hard([2, 2, 7], [0.2, 0.2, 0.5])[0] == 7
    assert combine_hard([1, 1, 3], [1, 1, 1])[0] == 1
    assert combine_hard([4, 0], [1, 1])[0] == 0


def test_zero_weights_fall_back_to_uniform():
    uniform = np.full((3, 4), 0.25)
    uniform_label, v = combine_soft(uniform, [0, 0, 0])
    assert uniform_label == 0 and np.allclose(v, 0.25)
    label, scores, weights = combine(uniform, DefenseConfig(k=3, weighting="cbw-d"))
    assert not weights.any() and np.allclose(scores, 0.25)
    with pytest.raises(ValueError):
        combine_soft(uniform, [1, -1, 1])


def test_k1_same_class_under_every_scheme():
    rng = np.random.default_rng(2)
    for s in random_softmaxes(rng, 30, 10):
        labels = {combine(s[None], DefenseConfig(k=1, weighting=w, combination=c))[0]
                  for w in ("uw", "cbw-e", "cbw-d") for c in ("soft", "hard")}
        assert labels == {int(np.argmax(s))}


def test_log_base_invariance():
    # rescaling CBW-E (e.g. log2 instead of ln) multiplies every weight by the same constant
    rng = np.random.default_rng(3)
    s = random_softmaxes(rng, 20, 10)
    w = neighbor_weights(s, DefenseConfig(k=20, weighting="cbw-e"))
    assert combine_soft(s, w)[0] == combine_soft(s, w / math.log(2))[0]


def test_config_validation():
    with pytest.raises(ValueError):
        DefenseConfig(k=0)
    with pytest.raises(ValueError):
        DefenseConfig(p=0)
    with pytest.raises(ValueError):
        DefenseConfig(weighting="cbw-x")
    assert DefenseConfig(weighting="CBW-E").weighting == "cbw-e"


@pytest.fixture(scope="module")
def small_defense():
    config = ModelConfig(num_classes=4, height=8, width=8, channels=(4, 8))
    ck = Checkpoint(config, init_params(config, 0))
    images = np.random.default_rng(4).random((40, 8, 8, 3)).astype(np.float32)
    pipe = FeaturePipeline(ck, default_pool_spec(config, 1)).fit(images, 8)
    index = FlatIndex(pipe.descriptors(images), np.arange(40))
    probs = Network(ck).predict_proba(images)
    store = PredictionStore(4).put_many(np.arange(40), probs)
    return pipe, index, store, images, probs


def test_self_retrieval_returns_stored_prediction(small_defense):
    pipe, index, store, images, probs = small_defense
    for i in (0, 11, 39):
        pred = defend_classify(images[i:i + 1], pipe, index, store, DefenseConfig(k=1))
        assert pred.neighbors.ids.tolist() == [i]
        assert pred.label == int(np.argmax(probs[i]))


def test_k_larger_than_database(small_defense):
    pipe, index, store, images, _ = small_defense
    pred = defend_classify(images[:1], pipe, index, store, DefenseConfig(k=500))
    assert len(pred.neighbors) == 40 and len(pred.weights) == 40
    assert abs(pred.scores.sum() - 1) < 1e-5 and pred.weights.min() >= 0


def test_batch_is_deterministic_and_matches_single(small_defense):
    pipe, index, store, images, _ = small_defense
    cfg = DefenseConfig(k=5, weighting="cbw-e", combination="hard")
    a, _ = defend_batch(images[:10], pipe, index, store, cfg)
    b, _ = defend_batch(images[:10], pipe, index, store, cfg)
    assert np.array_equal(a, b)
    assert a.tolist() == [defend_classify(images[i:i + 1], pipe, index, store, cfg).label for i in range(10)]


def test_store_miss_and_empty_index(small_defense):
    pipe, index, _, images, probs = small_defense
    partial = PredictionStore(4).put_many(np.arange(20), probs[:20])
    with pytest.raises(KeyError):
        defend_classify(images[30:31], pipe, index, partial, DefenseConfig(k=1))
    empty = FlatIndex(np.zeros((0, index.dim), np.float32), [])
    with pytest.raises(ValueError):
        defend_classify(images[:1], pipe, empty, partial, DefenseConfig())
