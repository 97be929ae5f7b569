"""Timing and locality benchmark of the window partitioners.

Each row records one partitioner run on a Gaussian-mixture cloud: the wall
time, the per-point time, and the mean intra- and inter-window distances.
Optionally one group-transformer layer is timed on the resulting windows
for each requested cross-window count.
"""

import csv
import time

import numpy as np

from lahreg.attn import AttentionConfig, group_transformer, init_block_params
from lahreg.hashwin import (
    HashConfig,
    knn_partition,
    locality_score,
    lsh_partition,
    octree_zorder_partition,
    sample_projection,
    voxel_partition,
)
from lahreg.scenes import gaussian_mixture_cloud
from lahreg.validation import check_positive_int

METHODS = ("lsh", "knn", "voxel", "octree")
COLUMNS = (
    "partitioner",
    "N",
    "M_or_voxel_edge",
    "rounds",
    "cwn",
    "wall_seconds",
    "seconds_per_point",
    "intra_mean",
    "inter_mean",
    "attention_seconds",
)


def _runner(method, window_size, voxel_edge, hash_config):
    if method == "lsh":
        # Sampling the projection is part of the per-run cost.
        return lambda P: lsh_partition(P, hash_config, window_size, sample_projection(hash_config))
    if method == "knn":
        return lambda P: knn_partition(P, window_size)
    if method == "voxel":
        return lambda P: voxel_partition(P, voxel_edge)
    if method == "octree":
        return lambda P: octree_zorder_partition(P, window_size)
    raise ValueError(f"unknown partitioner {method!r}; choose from {METHODS}")


def time_call(fn, repeats=3):
    """Return ``(result, seconds)`` with the minimum wall time over ``repeats`` calls."""
    best, out = np.inf, None
    for _ in range(check_positive_int(repeats, "repeats")):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return out, best


def _time_attention(part, cwn, width_heads, seed):
    heads, head_dim = width_heads
    window = part.window_size if part.window_size is not None else int(part.sizes.max())
    cfg = AttentionConfig(heads, head_dim, window, cwn, seed)
    params = init_block_params(cfg.width, np.random.default_rng(seed))
    F = np.random.default_rng(seed + 1).standard_normal((part.n_points, cfg.width))
    _, seconds = time_call(lambda: group_transformer(F, part, cfg, params), repeats=1)
    return seconds


def bench_partition(sizes, methods=("lsh", "knn"), window_size=64, voxel_edge=0.1,
                    rounds=(4,), bins=64, cross_window_counts=(), repeats=3, seed=0,
                    attention_shape=(2, 32), locality=True):  # fmt: skip
    """Benchmark partitioners over cloud sizes and hashing/attention settings.

    Parameters
    ----------
    sizes : sequence of int
        Cloud sizes; one Gaussian-mixture cloud is drawn per size.
    methods : sequence of str
        Any of ``"lsh"``, ``"knn"``, ``"voxel"`` and ``"octree"``.
    rounds : sequence of int
        Voting rounds for the LSH partitioner; other methods ignore it.
    cross_window_counts : sequence of int
        For each value, one group-transformer layer with that many sampled
        windows is timed on the partition. Empty skips attention timing.
    repeats : int
        Partition timings are the minimum over this many calls.

    Returns
    -------
    list of dict
        One row per (method, size, rounds, cross-window count) keyed by
        :data:`COLUMNS`.
    """
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown partitioner {m!r}; choose from {METHODS}")
    rows = []
    for n in sizes:
        n = check_positive_int(n, "size", minimum=2)
        P = gaussian_mixture_cloud(n, seed)
        for method in methods:
            for l in rounds if method == "lsh" else (None,):
                hc = HashConfig(bins, l if l is not None else 4, seed)
                part, wall = time_call(lambda: _runner(method, window_size, voxel_edge, hc)(P), repeats)
                if locality and part.window_count >= 2:
                    intra, inter = locality_score(P, part, seed=seed)
                else:
                    intra = inter = float("nan")
                base = {
                    "partitioner": method,
                    "N": n,
                    "M_or_voxel_edge": voxel_edge if method == "voxel" else window_size,
                    "rounds": l if l is not None else "",
                    "wall_seconds": wall,
                    "seconds_per_point": wall / n,
                    "intra_mean": intra,
                    "inter_mean": inter,
                }
                for cwn in cross_window_counts or (None,):
                    row = dict(base, cwn="" if cwn is None else cwn, attention_seconds="")
                    if cwn is not None:
                        row["attention_seconds"] = _time_attention(part, cwn, attention_shape, seed)
                    rows.append({k: row[k] for k in COLUMNS})
    return rows


def write_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS)
        w.writeheader()
        w.writerows(rows)
