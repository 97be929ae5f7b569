import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from lahreg.estimators import DescriptorNet, LSHPartitioner, RansacRegistrar
from lahreg.hashwin import HashConfig, lsh_partition
from lahreg.net import NetworkConfig
from lahreg.scenes import SceneConfig, synth_pair

from test_net import TOY


class TestLSHPartitioner:
    def test_matches_function(self):
        P = np.random.default_rng(0).normal(size=(100, 3))
        est = LSHPartitioner(window_size=16, seed=4).fit(P)
        ref = lsh_partition(P, HashConfig(64, 4, 4), 16)
        np.testing.assert_array_equal(est.labels_, ref.window_ids())
        np.testing.assert_array_equal(est.fit_predict(P), est.labels_)

    def test_params_and_clone(self):
        est = LSHPartitioner(window_size=8, bins=32, rounds=2, seed=1)
        assert est.get_params() == {"window_size": 8, "bins": 32, "rounds": 2, "seed": 1}
        c = clone(est.set_params(rounds=5))
        assert c.rounds == 5 and not hasattr(c, "labels_")

    def test_predict_requires_fit(self):
        with pytest.raises(NotFittedError):
            LSHPartitioner().predict(np.zeros((3, 3)))

    def test_window_sizes(self):
        labels = LSHPartitioner(window_size=4).fit(np.random.default_rng(1).normal(size=(10, 3))).labels_
        assert np.bincount(labels).tolist() == [4, 4, 2]


class TestDescriptorNet:
    def test_fit_transform(self):
        P, Q, T, _ = synth_pair(SceneConfig(points=150, overlap=1.0, seed=3))
        net = DescriptorNet(network=NetworkConfig(**TOY), steps=3, n_pos=16, n_neg=8)
        net.fit([(P, Q, T)])
        assert len(net.loss_curve_) == 3
        F_p, F_q = net.transform((P, Q))
        assert F_p.shape == (150, 8) and F_q.shape == (150, 8)
        np.testing.assert_allclose(np.linalg.norm(F_p, axis=1), 1.0, atol=1e-12)

    def test_deterministic(self):
        P, Q, T, _ = synth_pair(SceneConfig(points=120, overlap=1.0, seed=4))
        make = lambda: DescriptorNet(network=NetworkConfig(**TOY), steps=2, n_pos=8, n_neg=4, seed=2)  # noqa: E731
        a = make().fit([(P, Q, T)]).transform((P, Q))[0]
        b = clone(make()).fit([(P, Q, T)]).transform((P, Q))[0]
        np.testing.assert_array_equal(a, b)

    def test_empty_fit(self):
        with pytest.raises(ValueError):
            DescriptorNet().fit([])


class TestRansacRegistrar:
    def test_recovers_identity_matched_descriptors(self):
        rng = np.random.default_rng(5)
        P2, Q, T, _ = synth_pair(SceneConfig(points=200, overlap=1.0, seed=6))
        F = rng.normal(size=(len(P2), 8))
        F /= np.linalg.norm(F, axis=1, keepdims=True)
        reg = RansacRegistrar(iterations=200, sample_count=200, seed=0).fit((F, F, P2, Q))
        assert reg.success_
        np.testing.assert_allclose(reg.predict(P2), Q, atol=1e-9)
        np.testing.assert_allclose(reg.transform_.as_matrix(), T.as_matrix(), atol=1e-9)
        assert reg.inliers_.sum() == 200

    def test_failure_reported(self):
        rng = np.random.default_rng(0)
        P = rng.normal(size=(20, 3))
        F = rng.normal(size=(20, 4))
        reg = RansacRegistrar(iterations=10, inlier_threshold=1e-6, min_inliers=10).fit(
            (F, F[::-1].copy(), P, rng.normal(size=(20, 3))))  # fmt: skip
        assert not reg.success_
        with pytest.raises(RuntimeError):
            reg.predict(P)

    def test_clone(self):
        reg = RansacRegistrar(iterations=7, mutual=True)
        assert clone(reg).get_params()["iterations"] == 7
