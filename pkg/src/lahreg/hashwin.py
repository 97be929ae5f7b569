"""Window partitioning of point clouds.

The main path hashes points with a cross-polytope LSH (argmax over the
positive and negative projections onto Gaussian directions), takes a
majority vote over several hashing rounds, sorts points by the voted hash and
cuts the sorted order into equal windows. Voxel, greedy KNN and octree
z-order partitioners are kept as benchmark baselines.
"""

from dataclasses import dataclass

import numpy as np

from lahreg import autodiff as ad
from lahreg.validation import check_cloud, check_positive_int, check_seed

_HASH_CHUNK = 8192
_MAX_EXACT_PAIRS = 1_000_000


@dataclass(frozen=True)
class HashConfig:
    """LSH settings: ``bins`` hash buckets, ``rounds`` voting rounds."""

    bins: int = 64
    rounds: int = 4
    seed: int = 0

    def __post_init__(self):
        check_positive_int(self.bins, "bins", minimum=2)
        if self.bins % 2:
            raise ValueError(f"bins must be even, got {self.bins}")
        check_positive_int(self.rounds, "rounds")
        check_seed(self.seed)


@dataclass(frozen=True)
class WindowPartition:
    """Points grouped into contiguous windows of a permuted order.

    Attributes
    ----------
    permutation : ndarray of int64, shape (N,)
        Original point indices in window order.
    offsets : ndarray of int64, shape (n + 1,)
        Window ``i`` spans ``permutation[offsets[i]:offsets[i + 1]]``. The
        final entry equals N.
    window_size : int or None
        Nominal window point count for uniform partitions, None for
        variable-size ones (voxel, KNN).
    """

    permutation: np.ndarray
    offsets: np.ndarray
    window_size: int | None = None

    def __post_init__(self):
        perm = np.asarray(self.permutation, dtype=np.int64).reshape(-1)
        offs = np.asarray(self.offsets, dtype=np.int64).reshape(-1)
        perm.setflags(write=False)
        offs.setflags(write=False)
        object.__setattr__(self, "permutation", perm)
        object.__setattr__(self, "offsets", offs)

    @property
    def n_points(self):
        return int(self.permutation.shape[0])

    @property
    def window_count(self):
        return int(self.offsets.shape[0] - 1)

    @property
    def sizes(self):
        return np.diff(self.offsets)

    def window(self, i):
        return self.permutation[self.offsets[i] : self.offsets[i + 1]]

    def windows(self):
        return [self.window(i) for i in range(self.window_count)]

    def window_ids(self):
        """Window index of every point, in original point order."""
        ids = np.empty(self.n_points, dtype=np.int64)
        ids[self.permutation] = np.repeat(np.arange(self.window_count), self.sizes)
        return ids

    def inverse_permutation(self):
        inv = np.empty_like(self.permutation)
        inv[self.permutation] = np.arange(self.n_points)
        return inv

    def validate(self):
        """Raise ValueError unless this is a well-formed partition."""
        n = self.n_points
        if n == 0:
            raise ValueError("empty partition")
        if not np.array_equal(np.sort(self.permutation), np.arange(n)):
            raise ValueError("permutation is not a bijection on [0, N)")
        offs = self.offsets
        if offs[0] != 0 or offs[-1] != n or np.any(np.diff(offs) < 1):
            raise ValueError("offsets must start at 0, end at N and be increasing")
        if self.window_size is not None:
            sizes = self.sizes
            if np.any(sizes[:-1] != self.window_size) or sizes[-1] > self.window_size:
                raise ValueError("uniform partition has irregular window sizes")
        return self


def uniform_offsets(n_points, window_size):
    starts = np.arange(0, n_points, window_size, dtype=np.int64)
    return np.append(starts, n_points)


def sample_projection(config):
    """Gaussian projection tensor of shape ``(3, rounds, bins // 2)``."""
    rng = np.random.default_rng(config.seed)
    return rng.standard_normal((3, config.rounds, config.bins // 2))


def hash_points(points, projection):
    """Per-round cross-polytope bin index of every point.

    For each round the point is projected onto the ``m/2`` directions; the
    scores are the projections followed by their negations, and the bin is
    the argmax over those ``m`` scores (lowest index on ties).

    Returns
    -------
    ndarray of int64, shape (N, rounds)
    """
    P = check_cloud(points, allow_empty=False)
    S = np.asarray(projection, dtype=np.float64)
    if S.ndim != 3 or S.shape[0] != 3:
        raise ValueError(f"projection must have shape (3, l, m/2), got {S.shape}")
    _, rounds, half = S.shape
    flat = S.reshape(3, rounds * half)
    out = np.empty((len(P), rounds), dtype=np.int64)
    for start in range(0, len(P), _HASH_CHUNK):
        proj = (P[start : start + _HASH_CHUNK] @ flat).reshape(-1, rounds, half)
        hi = proj.max(axis=2)
        lo = proj.min(axis=2)
        # the positive half wins ties because its indices come first
        out[start : start + _HASH_CHUNK] = np.where(
            hi >= -lo, proj.argmax(axis=2), half + proj.argmin(axis=2)
        )
    return out


def vote(round_hashes, bins=None):
    """Most frequent bin across rounds for every point, lowest bin on ties."""
    H = np.asarray(round_hashes, dtype=np.int64)
    if H.ndim == 1:
        H = H[:, None]
    n, rounds = H.shape
    if rounds < 1:
        raise ValueError("need at least one hashing round")
    if rounds == 1:
        return H[:, 0].copy()
    if bins is None:
        bins = int(H.max()) + 1 if n else 1
    counts = np.zeros((n, bins), dtype=np.int32)
    rows = np.arange(n)
    for r in range(rounds):
        counts[rows, H[:, r]] += 1
    return counts.argmax(axis=1).astype(np.int64)


def partition(hash_values, window_size):
    """Stable sort of points by hash value, cut into windows of ``window_size``.

    The last window keeps the remainder (between 1 and ``window_size``
    points); nothing is padded.
    """
    H = np.asarray(hash_values).reshape(-1)
    M = check_positive_int(window_size, "window_size")
    if H.size == 0:
        raise ValueError("cannot partition an empty set of hash values")
    perm = np.argsort(H, kind="stable")
    return WindowPartition(perm, uniform_offsets(H.size, M), M)


def lsh_hash(points, config, projection=None):
    """Voted LSH value per point, hashing centroid-relative coordinates."""
    P = check_cloud(points, allow_empty=False)
    if projection is None:
        projection = sample_projection(config)
    centered = P - P.mean(axis=0)
    return vote(hash_points(centered, projection), config.bins)


def lsh_partition(points, config, window_size, projection=None):
    return partition(lsh_hash(points, config, projection), window_size)


def gather_windows(features, part):
    """Split rows of ``features`` into the partition's windows.

    Works on numpy arrays and on autodiff tensors; the latter stay on the
    gradient tape.
    """
    n_rows = features.shape[0]
    if n_rows != part.n_points:
        raise ValueError(
            f"features have {n_rows} rows but partition covers {part.n_points}"
        )
    if isinstance(features, ad.Tensor):
        return [ad.gather_rows(features, idx) for idx in part.windows()]
    F = np.asarray(features)
    return [F[idx] for idx in part.windows()]


def unpartition(windows, part):
    """Scatter window blocks back to the original point order."""
    if len(windows) != part.window_count:
        raise ValueError(
            f"got {len(windows)} windows, partition has {part.window_count}"
        )
    for i, (w, size) in enumerate(zip(windows, part.sizes)):
        if w.shape[0] != size:
            raise ValueError(f"window {i} has {w.shape[0]} rows, expected {size}")
    inv = part.inverse_permutation()
    if any(isinstance(w, ad.Tensor) for w in windows):
        return ad.gather_rows(ad.concat_rows(list(windows)), inv)
    return np.concatenate([np.asarray(w) for w in windows], axis=0)[inv]


def _groups_to_partition(keys, window_size=None):
    perm = np.argsort(keys, kind="stable")
    _, counts = np.unique(keys[perm], return_counts=True)
    return WindowPartition(perm, np.concatenate([[0], np.cumsum(counts)]), window_size)


def voxel_keys(points, voxel_edge, origin=None):
    """Integer voxel coordinates ``floor((p - origin) / edge)``."""
    P = check_cloud(points)
    if not voxel_edge > 0:
        raise ValueError("voxel_edge must be positive")
    if origin is not None:
        P = P - np.asarray(origin, dtype=np.float64)
    return np.floor(P / voxel_edge).astype(np.int64)


def voxel_partition(points, voxel_edge):
    """One window per occupied voxel of an axis-aligned grid at the origin."""
    keys = voxel_keys(check_cloud(points, allow_empty=False), voxel_edge)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    return _groups_to_partition(inverse.reshape(-1))


def knn_partition(points, window_size):
    """Greedy KNN windows: seed plus its nearest unassigned neighbors.

    The seed is the lowest-index unassigned point. Each step costs a scan of
    all remaining points, so the whole pass is quadratic, and the final
    window collects whatever is left regardless of adjacency. This is a
    benchmark baseline only.
    """
    P = check_cloud(points, allow_empty=False)
    M = check_positive_int(window_size, "window_size")
    remaining = np.arange(len(P))
    order = []
    while remaining.size:
        if remaining.size <= M:
            order.append(remaining)
            break
        seed = P[remaining[0]]
        d = np.einsum("ij,ij->i", P[remaining] - seed, P[remaining] - seed)
        d[0] = -1.0
        nearest = np.argpartition(d, M - 1)[:M]
        nearest = nearest[np.lexsort((remaining[nearest], d[nearest]))]
        order.append(remaining[nearest])
        keep = np.ones(remaining.size, dtype=bool)
        keep[nearest] = False
        remaining = remaining[keep]
    return WindowPartition(np.concatenate(order), uniform_offsets(len(P), M), M)


def morton_codes(points, depth):
    """Z-order codes of points quantized in their bounding cube.

    Bit ``b`` of the x, y and z cell coordinates lands at code bits
    ``3b``, ``3b + 1`` and ``3b + 2`` respectively.
    """
    P = check_cloud(points, allow_empty=False)
    depth = check_positive_int(depth, "depth")
    if depth > 21:
        raise ValueError("depth above 21 overflows a 64-bit Morton code")
    lo = P.min(axis=0)
    extent = float((P.max(axis=0) - lo).max())
    if extent <= 0:
        extent = 1.0
    cells = 1 << depth
    q = np.floor((P - lo) / extent * cells).astype(np.int64)
    q = np.clip(q, 0, cells - 1).astype(np.uint64)
    codes = np.zeros(len(P), dtype=np.uint64)
    for b in range(depth):
        for axis in range(3):
            bit = (q[:, axis] >> np.uint64(b)) & np.uint64(1)
            codes |= bit << np.uint64(3 * b + axis)
    return codes


def octree_zorder_partition(points, window_size, depth=10):
    """Sort by Morton code at ``depth``, then cut uniform windows."""
    return partition(morton_codes(points, depth), window_size)


def _pair_distance_sum(P, i, j):
    diff = P[i] - P[j]
    return float(np.sqrt(np.einsum("ij,ij->i", diff, diff)).sum())


def _sample_pairs(rng, n_points, want, accept, batch=1 << 18):
    """Uniform ordered pairs i != j satisfying ``accept(i, j)``."""
    got_i, got_j, total = [], [], 0
    while total < want:
        i = rng.integers(0, n_points, batch)
        j = rng.integers(0, n_points, batch)
        ok = (i != j) & accept(i, j)
        got_i.append(i[ok])
        got_j.append(j[ok])
        total += int(ok.sum())
    return np.concatenate(got_i)[:want], np.concatenate(got_j)[:want]


def locality_score(points, part, seed=0, max_pairs=_MAX_EXACT_PAIRS):
    """Mean Euclidean distance of intra-window and of inter-window pairs.

    Means are exact while a pair set holds at most ``max_pairs`` pairs;
    larger sets are estimated from ``max_pairs`` uniformly drawn pairs.

    Returns
    -------
    (float, float)
        ``(intra_mean, inter_mean)``.
    """
    P = check_cloud(points, allow_empty=False)
    if part.n_points != len(P):
        raise ValueError("partition does not match the cloud size")
    if part.window_count < 2:
        raise ValueError("locality_score needs at least two windows")
    rng = np.random.default_rng(seed)
    ids = part.window_ids()
    sizes = part.sizes.astype(np.int64)
    n = len(P)
    n_all = n * (n - 1) // 2
    n_intra = int((sizes * (sizes - 1) // 2).sum())
    n_inter = n_all - n_intra

    if n_all <= max_pairs:
        a, b = np.triu_indices(n, k=1)
        same = ids[a] == ids[b]
        diff = P[a] - P[b]
        d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        intra = float(d[same].mean()) if n_intra else 0.0
        return intra, float(d[~same].mean())

    if n_intra == 0:
        intra = 0.0
    elif n_intra <= max_pairs:
        total = 0.0
        for idx in part.windows():
            if idx.size > 1:
                a, b = np.triu_indices(idx.size, k=1)
                total += _pair_distance_sum(P, idx[a], idx[b])
        intra = total / n_intra
    else:
        i, j = _sample_pairs(rng, n, max_pairs, lambda i, j: ids[i] == ids[j])
        intra = _pair_distance_sum(P, i, j) / max_pairs

    if n_inter <= max_pairs:
        a, b = np.triu_indices(n, k=1)
        keep = ids[a] != ids[b]
        inter = _pair_distance_sum(P, a[keep], b[keep]) / n_inter
    else:
        i, j = _sample_pairs(rng, n, max_pairs, lambda i, j: ids[i] != ids[j])
        inter = _pair_distance_sum(P, i, j) / max_pairs
    return intra, inter
