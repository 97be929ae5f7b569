"""Desk-scale descriptor network, hardest-contrastive loss and training loop.

Layout of one forward pass over a cloud pair::

    enc1 (voxel set abstraction) -> GT(M=128)
    enc2                         -> GT(M=64)
    enc3 (bottleneck)            -> IT(M=32) across the pair
    dec3 -> dec2 -> dec1 (nearest-coarse propagation + skip) -> linear head -> L2

The encoder stages stand in for sparse strided convolutions: points are
merged per voxel (centroid), member features together with their offsets
to the centroid go through a two-layer MLP and are max-pooled, and a
projected max-pool of the raw member features is added as a residual.
"""

import csv
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from lahreg import autodiff as ad
from lahreg.attn import (
    AttentionConfig,
    group_transformer,
    init_block_params,
    interaction_transformer,
)
from lahreg.geom import RigidTransform, apply_transform
from lahreg.hashwin import HashConfig, lsh_partition, voxel_keys
from lahreg.validation import check_cloud, check_positive_int, check_seed

log = logging.getLogger(__name__)

POS_MARGIN = 0.1
NEG_MARGIN = 1.4
NEG_WEIGHT = 0.5
TAU_POS = 0.05


class NoOverlapError(ValueError):
    """Raised when a pair has too few ground-truth matches to sample from."""


def derive_seed(root, *tags):
    """Independent 64-bit seed for a named component of the network."""
    ss = np.random.SeedSequence([int(root), *[int(t) for t in tags]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


_TAG_PARAMS, _TAG_HASH, _TAG_CROSS = 0, 1, 2


@dataclass(frozen=True)
class NetworkConfig:
    stage_widths: tuple = (64, 256, 512)
    gt_window_points: tuple = (128, 64)
    gt_heads: tuple = (2, 4)
    gt_head_dims: tuple = (32, 64)
    it_window_points: int = 32
    it_heads: int = 4
    it_head_dim: int = 128
    cross_window_count: int = 2
    descriptor_dim: int = 32
    voxel_edges: tuple = (0.05, 0.1, 0.2)
    feature_radii: tuple = (0.1, 0.2, 0.4)
    hash_bins: int = 64
    hash_rounds: int = 4
    seed: int = 0

    def __post_init__(self):
        for name in ("stage_widths", "gt_window_points", "gt_heads", "gt_head_dims", "voxel_edges", "feature_radii"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        for name in ("stage_widths", "gt_window_points", "gt_heads", "gt_head_dims"):
            for v in getattr(self, name):
                check_positive_int(v, name)
        for name in ("it_window_points", "it_heads", "it_head_dim"):
            check_positive_int(getattr(self, name), name)
        if len(self.stage_widths) != 3 or len(self.voxel_edges) != 3:
            raise ValueError("need exactly three encoder stages (two GT stages + bottleneck)")
        if not (len(self.gt_window_points) == len(self.gt_heads) == len(self.gt_head_dims) == 2):
            raise ValueError("need exactly two group-transformer stage configs")
        for s in range(2):
            if self.stage_widths[s] != self.gt_heads[s] * self.gt_head_dims[s]:
                raise ValueError(
                    f"stage {s + 1} width {self.stage_widths[s]} != heads*head_dim "
                    f"{self.gt_heads[s] * self.gt_head_dims[s]}"
                )
        if self.stage_widths[2] != self.it_heads * self.it_head_dim:
            raise ValueError("bottleneck width must equal IT heads*head_dim")
        check_positive_int(self.descriptor_dim, "descriptor_dim")
        check_positive_int(self.cross_window_count, "cross_window_count", minimum=0)
        if any(not e > 0 for e in self.voxel_edges):
            raise ValueError("voxel edges must be positive")
        if any(not r > 0 for r in self.feature_radii):
            raise ValueError("feature_radii must be positive")
        HashConfig(self.hash_bins, self.hash_rounds, 0)
        check_seed(self.seed)

    @property
    def input_width(self):
        return 1 + SHAPE_FEATURES_PER_RADIUS * len(self.feature_radii)

    def hash_config(self, layer):
        return HashConfig(self.hash_bins, self.hash_rounds, derive_seed(self.seed, _TAG_HASH, layer))

    def gt_config(self, stage):
        return AttentionConfig(
            self.gt_heads[stage],
            self.gt_head_dims[stage],
            self.gt_window_points[stage],
            self.cross_window_count,
            derive_seed(self.seed, _TAG_CROSS, stage),
        )

    def it_config(self):
        return AttentionConfig(
            self.it_heads, self.it_head_dim, self.it_window_points, 0,
            derive_seed(self.seed, _TAG_CROSS, 2),
        )  # fmt: skip

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def _dense(rng, n_in, n_out):
    return ad.Tensor(rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in), True)


def _zeros(n):
    return ad.Tensor(np.zeros(n), True)


def init_params(config):
    """All network parameters as a flat ``name -> Tensor`` dict."""
    rng = np.random.default_rng(derive_seed(config.seed, _TAG_PARAMS))
    w = config.stage_widths
    params = {}
    c_in = config.input_width
    for s, c_out in enumerate(w, start=1):
        params[f"enc{s}.w1"] = _dense(rng, c_in + 3, c_out)
        params[f"enc{s}.b1"] = _zeros(c_out)
        params[f"enc{s}.w2"] = _dense(rng, c_out, c_out)
        params[f"enc{s}.b2"] = _zeros(c_out)
        params[f"enc{s}.ws"] = _dense(rng, c_in, c_out)
        c_in = c_out
    for s in range(2):
        for k, v in init_block_params(w[s], rng).items():
            params[f"gt{s + 1}.{k}"] = v
    for k, v in init_block_params(w[2], rng).items():
        params[f"it.{k}"] = v
    # decoders: dec3 maps bottleneck -> level 2, dec2 -> level 1, dec1 -> input points
    skips = (config.input_width, w[0], w[1])
    outs = (w[0], w[0], w[1])
    coarse = (w[0], w[1], w[2])
    for s in (3, 2, 1):
        n_in = coarse[s - 1] + skips[s - 1] + 3
        params[f"dec{s}.w1"] = _dense(rng, n_in, outs[s - 1])
        params[f"dec{s}.b1"] = _zeros(outs[s - 1])
        params[f"dec{s}.w2"] = _dense(rng, outs[s - 1], outs[s - 1])
        params[f"dec{s}.b2"] = _zeros(outs[s - 1])
    params["head.w"] = _dense(rng, w[0], config.descriptor_dim)
    params["head.b"] = _zeros(config.descriptor_dim)
    for k, v in params.items():
        v.name = k
    return params


def sub_params(params, prefix):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def local_shape_features(points, radius):
    """Rotation- and translation-invariant shape statistics of each point's ball.

    For the neighbors within ``radius`` (the point included) returns the
    sorted covariance eigenvalues divided by ``radius**2`` and the distance
    from the point to the neighbors' mean divided by ``radius``.

    Returns
    -------
    ndarray of shape (N, 4)
    """
    P = check_cloud(points)
    if not radius > 0:
        raise ValueError("radius must be positive")
    lists = cKDTree(P).query_ball_point(P, radius)
    counts = np.fromiter((len(x) for x in lists), dtype=np.int64, count=len(P))
    src = np.repeat(np.arange(len(P)), counts)
    dst = np.concatenate([np.asarray(x, dtype=np.int64) for x in lists])
    d = (P[dst] - P[src]) / radius
    mean = np.stack([np.bincount(src, d[:, a], len(P)) for a in range(3)], axis=1) / counts[:, None]
    second = np.empty((len(P), 3, 3))
    for a in range(3):
        for b in range(a, 3):
            second[:, a, b] = second[:, b, a] = np.bincount(src, d[:, a] * d[:, b], len(P)) / counts
    cov = second - mean[:, :, None] * mean[:, None, :]
    eig = np.clip(np.linalg.eigvalsh(cov)[:, ::-1], 0.0, None)
    return np.column_stack([eig, np.linalg.norm(mean, axis=1)])


SHAPE_FEATURES_PER_RADIUS = 4


def input_features(points, radii):
    """Per-point network input: a constant one followed by shape statistics per radius.

    The shape columns are standardized over the cloud (zero mean, unit
    standard deviation; constant columns become zero) so that their small
    raw spread is not drowned by the coordinate offsets added in the
    encoder. Standardization keeps the features rigid-motion invariant.
    """
    P = check_cloud(points)
    if len(radii) == 0:
        return np.ones((len(P), 1))
    S = np.hstack([local_shape_features(P, r) for r in radii])
    std = S.std(axis=0)
    S = (S - S.mean(axis=0)) / np.where(std > 1e-12, std, 1.0)
    return np.hstack([np.ones((len(P), 1)), S])


def voxel_downsample(points, voxel_edge):
    """Group points by a voxel grid centred on the cloud centroid.

    The centroid sits in the middle of a cell, so a cloud narrower than one
    voxel collapses to a single point.

    Returns
    -------
    (ndarray, ndarray)
        Centroids of occupied voxels, ordered by voxel key, and the voxel
        index of every input point.
    """
    P = check_cloud(points, allow_empty=False)
    keys = voxel_keys(P, voxel_edge, origin=P.mean(axis=0) - 0.5 * voxel_edge)
    _, assign = np.unique(keys, axis=0, return_inverse=True)
    assign = assign.reshape(-1)
    n = int(assign.max()) + 1
    counts = np.bincount(assign, minlength=n).astype(np.float64)
    centroids = np.stack(
        [np.bincount(assign, weights=P[:, a], minlength=n) for a in range(3)], axis=1
    ) / counts[:, None]
    return centroids, assign


def encoder_stage(points, features, voxel_edge, params):
    """Voxel set abstraction: merge points per voxel and pool member features.

    Returns ``(coarse_points, coarse_features, assignment)`` where
    ``assignment[i]`` is the coarse point that fine point ``i`` merged into.
    """
    P = check_cloud(points)
    if len(P) == 0:
        raise ValueError("encoder_stage got an empty cloud")
    F = ad.as_tensor(features)
    if F.shape[0] != len(P):
        raise ValueError(f"{F.shape[0]} feature rows for {len(P)} points")
    centroids, assign = voxel_downsample(P, voxel_edge)
    offsets = ad.Tensor((P - centroids[assign]) / voxel_edge)
    h = ad.relu(ad.linear(ad.concat_cols([F, offsets]), params["w1"], params["b1"]))
    h = ad.linear(h, params["w2"], params["b2"])
    n = len(centroids)
    pooled = ad.segment_max(h, assign, n)
    residual = ad.matmul(ad.segment_max(F, assign, n), params["ws"])
    return centroids, ad.add(pooled, residual), assign


def nearest_coarse(coarse_points, fine_points):
    tree = cKDTree(coarse_points)
    _, idx = tree.query(fine_points, k=1)
    return np.asarray(idx, dtype=np.int64)


def decoder_stage(coarse_points, coarse_features, fine_points, skip_features, params, scale=1.0):
    """Nearest-coarse feature propagation with skip concatenation and a 2-layer MLP.

    The fine point's offset from its nearest coarse point (divided by
    ``scale``) is appended to the concatenated features.
    """
    Pc = check_cloud(coarse_points)
    if len(Pc) == 0:
        raise ValueError("decoder_stage got an empty coarse cloud")
    Pf = check_cloud(fine_points)
    idx = nearest_coarse(Pc, Pf)
    offsets = ad.Tensor((Pf - Pc[idx]) / scale)
    x = ad.concat_cols([ad.gather_rows(ad.as_tensor(coarse_features), idx), ad.as_tensor(skip_features), offsets])
    h = ad.relu(ad.linear(x, params["w1"], params["b1"]))
    return ad.linear(h, params["w2"], params["b2"])


def _encode(P, params, config):
    """Encoder path of one cloud up to (excluding) the interaction block."""
    levels = [(P, ad.Tensor(input_features(P, config.feature_radii)))]
    pts, feats = levels[0]
    for s in range(3):
        pts, feats, _ = encoder_stage(pts, feats, config.voxel_edges[s], sub_params(params, f"enc{s + 1}"))
        if s < 2:
            gcfg = config.gt_config(s)
            part = lsh_partition(pts, config.hash_config(s), gcfg.window_points)
            feats = group_transformer(feats, part, gcfg, sub_params(params, f"gt{s + 1}"))
        levels.append((pts, feats))
    return levels


def _decode(levels, bottleneck, params, config):
    feats = bottleneck
    for s in (3, 2, 1):
        coarse_pts = levels[s][0]
        fine_pts, skip = levels[s - 1]
        feats = decoder_stage(
            coarse_pts, feats, fine_pts, skip, sub_params(params, f"dec{s}"), config.voxel_edges[s - 1]
        )
    out = ad.linear(feats, params["head.w"], params["head.b"])
    return ad.l2_normalize_rows(out)


def forward(P, Q, params, config, return_info=False):
    """Unit-norm descriptors for both clouds of a pair.

    Returns ``(F_p, F_q)`` with shapes ``(N_p, descriptor_dim)`` and
    ``(N_q, descriptor_dim)``.
    """
    P = check_cloud(P, "P", allow_empty=False)
    Q = check_cloud(Q, "Q", allow_empty=False)
    lp = _encode(P, params, config)
    lq = _encode(Q, params, config)
    icfg = config.it_config()
    hc = config.hash_config(2)
    part_p = lsh_partition(lp[3][0], hc, icfg.window_points)
    part_q = lsh_partition(lq[3][0], hc, icfg.window_points)
    bp, bq, info = interaction_transformer(
        lp[3][1], part_p, lq[3][1], part_q, icfg, sub_params(params, "it"), return_info=True
    )
    F_p = _decode(lp, bp, params, config)
    F_q = _decode(lq, bq, params, config)
    if return_info:
        info["level_sizes"] = ([len(x[0]) for x in lp], [len(x[0]) for x in lq])
        return F_p, F_q, info
    return F_p, F_q


# loss ------------------------------------------------------------------------


@dataclass
class PairBatch:
    """Positive matches and negative candidates for one cloud pair.

    ``positives[k] = (i, j)`` pairs P point ``i`` with Q point ``j``.
    ``neg_q[k]`` holds Q indices that are negatives for anchor ``i`` and
    ``neg_p[k]`` holds P indices that are negatives for anchor ``j``.
    """

    P: np.ndarray
    Q: np.ndarray
    T_gt: RigidTransform
    positives: np.ndarray
    neg_q: np.ndarray
    neg_p: np.ndarray
    tau_pos: float = TAU_POS
    neg_q_mask: np.ndarray | None = field(default=None)
    neg_p_mask: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.positives = np.asarray(self.positives, dtype=np.int64).reshape(-1, 2)
        self.neg_q = np.asarray(self.neg_q, dtype=np.int64).reshape(len(self.positives), -1)
        self.neg_p = np.asarray(self.neg_p, dtype=np.int64).reshape(len(self.positives), -1)
        if self.neg_q_mask is None:
            self.neg_q_mask = np.ones(self.neg_q.shape, dtype=bool)
        if self.neg_p_mask is None:
            self.neg_p_mask = np.ones(self.neg_p.shape, dtype=bool)


def _row_distances(A, B):
    diff = ad.sub(A, B)
    return ad.sqrt(ad.sum(ad.square(diff), axis=1))


def hardest_contrastive_loss(F_p, F_q, batch, pos_margin=POS_MARGIN, neg_margin=NEG_MARGIN,
                             neg_weight=NEG_WEIGHT):
    """Hardest-contrastive loss over the batch's positives.

    ``mean [D(f_i, f_j) - pos_margin]_+^2`` over positive pairs, plus for
    each side ``neg_weight * mean I * [neg_margin - min_k D(f, f_k)]_+^2``
    over the anchors, where the minimum runs over that anchor's negative
    candidates and ``I`` is 1 when the hardest candidate is a true negative.
    """
    pos = batch.positives
    if len(pos) == 0:
        raise ValueError("hardest_contrastive_loss needs at least one positive pair")
    if batch.neg_q.shape[1] == 0 or batch.neg_p.shape[1] == 0:
        raise ValueError("hardest_contrastive_loss needs negative candidates")
    F_p, F_q = ad.as_tensor(F_p), ad.as_tensor(F_q)
    n_pos = len(pos)
    fi = ad.gather_rows(F_p, pos[:, 0])
    fj = ad.gather_rows(F_q, pos[:, 1])
    pos_term = ad.mean(ad.square(ad.relu(ad.add(_row_distances(fi, fj), -pos_margin))))

    def neg_term(anchor, anchor_idx, others, cand, mask):
        k = cand.shape[1]
        a = ad.gather_rows(anchor, np.repeat(anchor_idx, k))
        c = ad.gather_rows(others, cand.reshape(-1))
        d = ad.reshape(_row_distances(a, c), (n_pos, k))
        hardest = ad.min_cols(d)
        indicator = mask[np.arange(n_pos), d.data.argmin(axis=1)].astype(np.float64)
        hinge = ad.square(ad.relu(ad.sub(neg_margin, hardest)))
        return ad.scale(ad.mean(ad.mul(hinge, indicator)), neg_weight)

    neg_i = neg_term(F_p, pos[:, 0], F_q, batch.neg_q, batch.neg_q_mask)
    neg_j = neg_term(F_q, pos[:, 1], F_p, batch.neg_p, batch.neg_p_mask)
    return ad.add(ad.add(pos_term, neg_i), neg_j)


def ground_truth_matches(P, Q, T_gt, tau):
    """All ``(i, j)`` with ``||T_gt(p_i) - q_j|| <= tau``, sorted."""
    TP = apply_transform(T_gt, P)
    tree = cKDTree(Q)
    lists = tree.query_ball_point(TP, r=tau)
    pairs = [(i, j) for i, js in enumerate(lists) for j in sorted(js)]
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def _sample_far(rng, points, center, tau, k):
    """``k`` indices drawn uniformly among points farther than ``tau`` from ``center``."""
    d = np.linalg.norm(points - center, axis=1)
    valid = np.flatnonzero(d > tau)
    if valid.size == 0:
        raise NoOverlapError("no negative candidates farther than tau_pos")
    return valid[rng.integers(0, valid.size, k)]


def sample_pairs(P, Q, T_gt, tau_pos=TAU_POS, n_pos=256, n_neg=64, seed=0):
    """Sample positives within ``tau_pos`` under ``T_gt`` plus per-anchor negatives.

    Raises
    ------
    NoOverlapError
        When fewer than ``n_pos`` ground-truth matches exist.
    """
    P = check_cloud(P, "P", allow_empty=False)
    Q = check_cloud(Q, "Q", allow_empty=False)
    rng = np.random.default_rng(seed)
    matches = ground_truth_matches(P, Q, T_gt, tau_pos)
    if len(matches) < n_pos:
        raise NoOverlapError(
            f"only {len(matches)} matches within {tau_pos} m, need {n_pos}"
        )
    pos = matches[np.sort(rng.choice(len(matches), size=n_pos, replace=False))]
    TP = apply_transform(T_gt, P)
    neg_q = np.stack([_sample_far(rng, Q, TP[i], tau_pos, n_neg) for i in pos[:, 0]])
    neg_p = np.stack([_sample_far(rng, TP, Q[j], tau_pos, n_neg) for j in pos[:, 1]])
    return PairBatch(P, Q, T_gt, pos, neg_q, neg_p, tau_pos)


# training --------------------------------------------------------------------


def train_step(params, batch, optimizer, config):
    """One forward/backward/update; returns the loss before the update."""
    optimizer.zero_grad()
    F_p, F_q = forward(batch.P, batch.Q, params, config)
    loss = hardest_contrastive_loss(F_p, F_q, batch)
    value = float(loss.data)
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite loss {value}")
    ad.backward(loss)
    optimizer.step()
    return value


@dataclass
class TrainConfig:
    steps: int = 500
    lr: float = 1e-3
    n_pos: int = 256
    n_neg: int = 64
    tau_pos: float = TAU_POS
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        check_positive_int(self.steps, "steps", minimum=0)
        check_positive_int(self.n_pos, "n_pos")
        check_positive_int(self.n_neg, "n_neg")
        check_positive_int(self.log_every, "log_every", minimum=0)
        for name in ("lr", "tau_pos"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not np.isfinite(value):
                raise ValueError(f"{name} must be a finite number, got {value!r}")
        if self.lr < 0 or self.tau_pos <= 0:
            raise ValueError("lr must be nonnegative and tau_pos positive")
        check_seed(self.seed)

    def to_dict(self):
        return asdict(self)


def train_loop(pairs, net_config, train_config, params=None, checkpoint=None, log_csv=None):
    """Cycle through ``pairs`` (tuples ``(P, Q, T_gt)``) taking one Adam step each.

    Positives and negatives are resampled every step from a seed derived from
    the training seed and the step index.

    Returns
    -------
    (dict, list of float)
        Trained parameters and the per-step loss curve.
    """
    if params is None:
        params = init_params(net_config)
    opt = ad.Adam(params, lr=train_config.lr)
    losses = []
    rows = []
    t0 = time.perf_counter()
    for step in range(train_config.steps):
        P, Q, T = pairs[step % len(pairs)]
        batch = sample_pairs(
            P, Q, T, train_config.tau_pos, train_config.n_pos, train_config.n_neg,
            derive_seed(train_config.seed, step),
        )  # fmt: skip
        loss = train_step(params, batch, opt, net_config)
        losses.append(loss)
        rows.append((step, loss, time.perf_counter() - t0))
        if train_config.log_every and step % train_config.log_every == 0:
            log.info("step %d loss %.6f", step, loss)
    if checkpoint is not None:
        save_checkpoint(checkpoint, params, net_config)
    if log_csv is not None:
        with open(log_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "wall_time_s"])
            w.writerows(rows)
    return params, losses


def save_checkpoint(path, params, net_config):
    arrays = {k: v.data for k, v in params.items()}
    ad.save_params(path, arrays, metadata={"network": net_config.to_dict()})


def load_checkpoint(path):
    """Return ``(params, NetworkConfig)`` from a file written by :func:`save_checkpoint`."""
    arrays, meta = ad.load_params(path, with_metadata=True)
    config = NetworkConfig(**(meta or {}).get("network", {}))
    params = {k: ad.Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
    return params, config
