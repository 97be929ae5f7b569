"""scikit-learn style wrappers around the library.

``LSHPartitioner`` behaves like a clusterer whose labels are window ids,
``DescriptorNet`` trains and applies the descriptor network on cloud
pairs, and ``RansacRegistrar`` fits a rigid transform to matched
descriptors. All follow the usual ``fit`` / ``predict`` / ``transform``
conventions and expose their hyperparameters through ``get_params``.
"""

from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from lahreg import autodiff as ad
from lahreg.geom import apply_transform
from lahreg.hashwin import HashConfig, lsh_partition, sample_projection
from lahreg.net import NetworkConfig, TrainConfig, forward, init_params, train_loop
from lahreg.reg import nn_match, ransac
from lahreg.validation import check_cloud, check_features


class LSHPartitioner(ClusterMixin, BaseEstimator):
    """Window partition of a point cloud by cross-polytope LSH.

    Parameters
    ----------
    window_size : int
        Points per window; the last window holds the remainder.
    bins : int
        Hash bins (even).
    rounds : int
        Voting rounds.
    seed : int
        Projection seed.

    Attributes
    ----------
    projection_ : ndarray of shape (3, rounds, bins // 2)
    partition_ : WindowPartition
        Partition of the cloud passed to ``fit``.
    labels_ : ndarray of int64, shape (N,)
        Window id of each fitted point.
    """

    def __init__(self, window_size=64, bins=64, rounds=4, seed=0):
        self.window_size = window_size
        self.bins = bins
        self.rounds = rounds
        self.seed = seed

    def _config(self):
        return HashConfig(self.bins, self.rounds, self.seed)

    def fit(self, X, y=None):
        P = check_cloud(X, "X", allow_empty=False)
        cfg = self._config()
        self.projection_ = sample_projection(cfg)
        self.partition_ = lsh_partition(P, cfg, self.window_size, self.projection_)
        self.labels_ = self.partition_.window_ids()
        self.n_features_in_ = 3
        return self

    def predict(self, X):
        """Window ids of a new cloud under the fitted projection."""
        check_is_fitted(self, "projection_")
        P = check_cloud(X, "X", allow_empty=False)
        return lsh_partition(P, self._config(), self.window_size, self.projection_).window_ids()


class DescriptorNet(TransformerMixin, BaseEstimator):
    """Descriptor network trained with the hardest-contrastive loss.

    ``fit`` takes a list of ``(P, Q, T_gt)`` training pairs and
    ``transform`` maps one ``(P, Q)`` pair to a pair of descriptor arrays.

    Parameters
    ----------
    network : NetworkConfig or None
        Architecture; None uses the defaults.
    steps, lr, n_pos, n_neg, tau_pos, seed
        Training settings, see :class:`lahreg.net.TrainConfig`.
    """

    def __init__(self, network=None, steps=500, lr=1e-3, n_pos=256, n_neg=64, tau_pos=0.05, seed=0):
        self.network = network
        self.steps = steps
        self.lr = lr
        self.n_pos = n_pos
        self.n_neg = n_neg
        self.tau_pos = tau_pos
        self.seed = seed

    def fit(self, X, y=None):
        if not X:
            raise ValueError("fit needs at least one (P, Q, T_gt) pair")
        pairs = [(check_cloud(P, "P"), check_cloud(Q, "Q"), T) for P, Q, T in X]
        self.network_ = self.network if self.network is not None else NetworkConfig()
        cfg = TrainConfig(self.steps, self.lr, self.n_pos, self.n_neg, self.tau_pos, self.seed)
        self.params_, self.loss_curve_ = train_loop(pairs, self.network_, cfg, init_params(self.network_))
        return self

    def transform(self, X):
        """Unit-norm descriptors ``(F_p, F_q)`` of the pair ``X = (P, Q)``."""
        check_is_fitted(self, "params_")
        P, Q = X
        frozen = {k: ad.Tensor(v.data) for k, v in self.params_.items()}
        F_p, F_q = forward(P, Q, frozen, self.network_)
        return F_p.data, F_q.data


class RansacRegistrar(BaseEstimator):
    """Rigid registration from descriptor matches with RANSAC.

    ``fit`` takes ``X = (F_p, F_q, P, Q)``; afterwards ``transform_`` maps
    ``P`` onto ``Q`` and ``predict`` applies it to any points.

    Parameters
    ----------
    iterations : int
    inlier_threshold : float
        Residual bound in meters.
    min_inliers : int
    sample_count : int
        Number of source descriptors matched.
    mutual : bool
        Keep only mutual nearest neighbors.
    seed : int
    """

    def __init__(self, iterations=50000, inlier_threshold=0.05, min_inliers=5, sample_count=5000,
                 mutual=False, seed=0):  # fmt: skip
        self.iterations = iterations
        self.inlier_threshold = inlier_threshold
        self.min_inliers = min_inliers
        self.sample_count = sample_count
        self.mutual = mutual
        self.seed = seed

    def fit(self, X, y=None):
        F_p, F_q, P, Q = X
        P = check_cloud(P, "P", allow_empty=False)
        Q = check_cloud(Q, "Q", allow_empty=False)
        F_p = check_features(F_p, len(P), "F_p")
        F_q = check_features(F_q, len(Q), "F_q")
        self.correspondences_ = nn_match(F_p, F_q, self.sample_count, self.seed, mutual=self.mutual)
        res = ransac(self.correspondences_, P, Q, self.iterations, self.inlier_threshold, self.seed,
                     self.min_inliers)  # fmt: skip
        self.result_ = res
        self.transform_ = res.transform
        self.inliers_ = res.inliers
        return self

    def predict(self, X):
        """Apply the fitted transform to points ``X``."""
        check_is_fitted(self, "result_")
        if self.transform_ is None:
            raise RuntimeError(f"registration failed: {self.result_.message}")
        return apply_transform(self.transform_, check_cloud(X, "X"))

    @property
    def success_(self):
        check_is_fitted(self, "result_")
        return bool(self.result_.success)


__all__ = ["DescriptorNet", "LSHPartitioner", "RansacRegistrar"]
