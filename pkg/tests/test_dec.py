import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regdec.dec import (AutoencoderOptions, DecError, DecModel, DecOptions, build_dec, hard_assign,
                        init_centroids_kmeans, kl_loss_and_grads, map_clusters_to_classes, pack_dec,
                        pretrain_autoencoder, soft_assign, target_distribution, train_dec, unpack_dec)
from regdec.nnet import Affine, NetStack


def identity_encoder(d=2):
    a = Affine(d, d)
    a.params["W"] = np.eye(d)
    return NetStack([a])


def test_soft_assign_two_centroids():
    q = soft_assign(np.zeros((1, 2)), np.array([[0.0, 0.0], [1.0, 0.0]]))
    np.testing.assert_allclose(q, [[2 / 3, 1 / 3]], atol=1e-15)


def test_soft_assign_alpha():
    # alpha = 2: (1 + d^2/2)^(-3/2) at d^2 = 2 gives 2^(-3/2)
    q = soft_assign(np.zeros((1, 1)), np.array([[0.0], [np.sqrt(2.0)]]), alpha=2.0)
    w = 2 ** -1.5
    np.testing.assert_allclose(q, [[1 / (1 + w), w / (1 + w)]], atol=1e-15)
    with pytest.raises(DecError):
        soft_assign(np.zeros((1, 1)), np.zeros((2, 1)), alpha=0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 10), st.integers(2, 6))
def test_soft_assign_rows_sum_to_one(seed, n, k):
    r = np.random.default_rng(seed)
    q = soft_assign(r.normal(size=(n, 3)), r.normal(size=(k, 3)))
    np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(q > 0)


def test_target_single_sample_equals_q():
    q = np.array([[0.2, 0.5, 0.3]])
    np.testing.assert_allclose(target_distribution(q), q, atol=1e-15)


def test_target_distribution_reference():
    q = np.array([[0.9, 0.1], [0.5, 0.5]])
    f = (1.4, 0.6)
    rows = []
    for a, b in q:
        wa, wb = a * a / f[0], b * b / f[1]
        rows.append([wa / (wa + wb), wb / (wa + wb)])
    np.testing.assert_allclose(target_distribution(q), rows, atol=1e-15)
    # the confident row sharpens
    assert target_distribution(q)[0, 0] > 0.9


def test_kl_gradients_match_fd():
    r = np.random.default_rng(1)
    z, c = r.normal(size=(5, 3)), r.normal(size=(4, 3))
    p = target_distribution(soft_assign(r.normal(size=(5, 3)), c))
    _, gz, gc = kl_loss_and_grads(z, c, p, alpha=1.5)
    h = 1e-6
    for arr, grad in ((z, gz), (c, gc)):
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            lp = kl_loss_and_grads(z, c, p, 1.5)[0]
            arr[idx] = orig - h
            lm = kl_loss_and_grads(z, c, p, 1.5)[0]
            arr[idx] = orig
            num[idx] = (lp - lm) / (2 * h)
        np.testing.assert_allclose(grad, num, rtol=1e-6, atol=1e-9)


def test_kl_zero_when_p_equals_q():
    r = np.random.default_rng(2)
    z, c = r.normal(size=(4, 2)), r.normal(size=(3, 2))
    loss, gz, gc = kl_loss_and_grads(z, c, soft_assign(z, c))
    assert abs(loss) <= 1e-14
    np.testing.assert_allclose(gz, 0, atol=1e-14)
    np.testing.assert_allclose(gc, 0, atol=1e-14)


def blobs(seed=0, per=30, dim=10, sep=6.0):
    r = np.random.default_rng(seed)
    centers = r.normal(size=(3, dim)) * sep
    x = np.concatenate([centers[i] + r.normal(size=(per, dim)) for i in range(3)])
    y = np.repeat(["ClassA", "ClassB", "ClassC"], per)
    return x, y


def test_kmeans_separated_blobs():
    x, y = blobs()
    _, labels, trace = init_centroids_kmeans(x, 3, seed=0)
    for cls in ("ClassA", "ClassB", "ClassC"):
        assert len(set(labels[y == cls].tolist())) == 1
    assert len(set(labels.tolist())) == 3
    assert all(b <= a + 1e-9 for a, b in zip(trace, trace[1:]))


def test_kmeans_errors_and_duplicates():
    with pytest.raises(DecError):
        init_centroids_kmeans(np.zeros((2, 2)), 3)
    # five copies of one point: seeding retries on jittered data
    c, labels, _ = init_centroids_kmeans(np.ones((5, 2)), 2, seed=0)
    assert c.shape == (2, 2) and np.allclose(c, 1.0, atol=1e-4)


def test_kmeans_deterministic():
    x, _ = blobs(3)
    a = init_centroids_kmeans(x, 4, seed=5)[0]
    b = init_centroids_kmeans(x, 4, seed=5)[0]
    assert np.array_equal(a, b)


def test_autoencoder_loss_falls():
    x, _ = blobs(1)
    enc, losses = pretrain_autoencoder(x, 3, AutoencoderOptions(hidden=(16,), epochs=60, lr=1e-2))
    assert losses[-1] < 0.5 * losses[0]
    assert enc(x).shape == (90, 3)
    with pytest.raises(DecError):
        pretrain_autoencoder(x[:1], 2)


def test_dec_clusters_blobs():
    x, y = blobs(2)
    model, _ = build_dec(x, 3, 3, AutoencoderOptions(hidden=(16,), epochs=100, lr=1e-2), seed=0)
    model, hist = train_dec(model, x, DecOptions(max_epochs=50))
    cm = map_clusters_to_classes(model, x, y, ("ClassA", "ClassB", "ClassC"))
    pred = np.array([cm.class_of(j) for j in hard_assign(model, x)])
    assert np.mean(pred == y) >= 0.95
    assert all(np.isfinite(hist.losses))


def test_dec_stop_tol_one_stops_at_second_update():
    x, _ = blobs(4)
    model, _ = build_dec(x, 3, 2, AutoencoderOptions(hidden=(8,), epochs=10), seed=0)
    _, hist = train_dec(model, x, DecOptions(max_epochs=20, stop_tol=1.0))
    assert hist.stopped_early
    assert len(hist.updates) == 1


def test_dec_k_above_n():
    model = DecModel(identity_encoder(), np.zeros((4, 2)) + np.arange(4)[:, None])
    with pytest.raises(DecError):
        train_dec(model, np.zeros((3, 2)))


def test_model_rejects_bad_centroids():
    with pytest.raises(DecError):
        DecModel(identity_encoder(), np.zeros((1, 2)))
    with pytest.raises(DecError):
        DecModel(identity_encoder(), np.array([[0.0, np.nan], [1.0, 1.0]]))


def mapping_model():
    return DecModel(identity_encoder(), np.array([[0.0, 0.0], [10.0, 10.0], [30.0, 30.0]]))


def test_majority_mapping_and_purity():
    model = mapping_model()
    x = np.array([[0.0, 0.1 * i] for i in range(10)] + [[10.0, 10.0 + 0.1 * i] for i in range(5)])
    y = ["ClassA"] * 7 + ["ClassB"] * 3 + ["ClassC"] * 5
    cm = map_clusters_to_classes(model, x, y, ("ClassA", "ClassB", "ClassC"))
    assert cm.class_of(0) == "ClassA" and abs(cm.purity[0] - 0.7) <= 1e-15
    assert cm.class_of(1) == "ClassC" and cm.purity[1] == 1.0
    # nobody sits near (30, 30): flagged empty, takes the class of the nearest centroid
    assert cm.empty.tolist() == [False, False, True]
    assert cm.class_of(2) == "ClassC"
    assert cm.band("ClassC") == [1, 2] and cm.band("ClassB") == []


def test_mapping_tie_goes_to_first_class():
    model = mapping_model()
    x = np.zeros((4, 2))
    cm = map_clusters_to_classes(model, x, ["ClassB", "ClassC", "ClassB", "ClassC"], ("ClassA", "ClassB", "ClassC"))
    assert cm.class_of(0) == "ClassB"


def test_mapping_unknown_label():
    with pytest.raises(DecError):
        map_clusters_to_classes(mapping_model(), np.zeros((1, 2)), ["Normal"], ("ClassA",))


def test_pack_roundtrip():
    x, y = blobs(5, per=10, dim=4)
    model, _ = build_dec(x, 3, 2, AutoencoderOptions(hidden=(8,), epochs=5), seed=1)
    model.cluster_map = map_clusters_to_classes(model, x, y, ("ClassA", "ClassB", "ClassC"))
    model.cluster_map.severity_order = np.array([2, 3, 1])
    back = unpack_dec(pack_dec(model), model.encoder)
    assert np.array_equal(back.centroids, model.centroids)
    assert np.array_equal(back.feature_mean, model.feature_mean)
    assert back.cluster_map.classes == model.cluster_map.classes
    assert np.array_equal(back.cluster_map.counts, model.cluster_map.counts)
    assert back.cluster_map.severity_order.tolist() == [2, 3, 1]
    assert np.array_equal(hard_assign(back, x), hard_assign(model, x))
