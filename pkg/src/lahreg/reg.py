"""Descriptor matching, RANSAC registration and evaluation metrics."""

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from lahreg.geom import CorrespondenceSet, RigidTransform, apply_transform, kabsch
from lahreg.validation import check_cloud, check_features, check_positive_int

_NN_CHUNK = 256
_RANSAC_FLOATS = 3_000_000


@dataclass(frozen=True)
class MetricThresholds:
    """``inlier_distance`` is tau1 (m), ``inlier_ratio`` is tau2 (fraction)."""

    inlier_distance: float = 0.10
    inlier_ratio: float = 0.05
    rr_rre_max: float = 5.0
    rr_rte_max: float = 0.10

    def __post_init__(self):
        for name in ("inlier_distance", "inlier_ratio", "rr_rre_max", "rr_rte_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.inlier_ratio > 1:
            raise ValueError("inlier_ratio must be in (0, 1]")


def _nearest(A, B):
    """Index of the nearest row of ``B`` for every row of ``A`` (first on ties)."""
    out = np.empty(len(A), dtype=np.int64)
    dist = np.empty(len(A))
    for s in range(0, len(A), _NN_CHUNK):
        a = A[s : s + _NN_CHUNK]
        diff = a[:, None, :] - B[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        idx = d2.argmin(axis=1)
        out[s : s + _NN_CHUNK] = idx
        dist[s : s + _NN_CHUNK] = np.sqrt(d2[np.arange(len(a)), idx])
    return out, dist


def nn_match(F_p, F_q, sample_count=5000, seed=0, mutual=False):
    """Match sampled source descriptors to their nearest target descriptors.

    ``min(sample_count, N_p)`` source rows are drawn uniformly without
    replacement. With ``mutual`` only pairs that are also nearest in the
    reverse direction are kept.
    """
    A = check_features(getattr(F_p, "data", F_p), name="F_p")
    B = check_features(getattr(F_q, "data", F_q), name="F_q")
    if len(A) == 0 or len(B) == 0:
        raise ValueError("nn_match needs non-empty descriptor sets")
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"descriptor widths differ: {A.shape[1]} vs {B.shape[1]}")
    check_positive_int(sample_count, "sample_count")
    rng = np.random.default_rng(seed)
    if sample_count >= len(A):
        src = np.arange(len(A))
    else:
        src = np.sort(rng.choice(len(A), size=sample_count, replace=False))
    dst, dist = _nearest(A[src], B)
    if mutual:
        back, _ = _nearest(B[dst], A)
        keep = back == src
        src, dst, dist = src[keep], dst[keep], dist[keep]
    return CorrespondenceSet(src, dst, dist)


@dataclass
class RansacResult:
    """Outcome of :func:`ransac`; ``transform`` is None when it failed."""

    transform: RigidTransform | None
    inliers: np.ndarray
    success: bool
    iterations: int
    message: str = ""

    @property
    def inlier_count(self):
        return int(self.inliers.sum())


def _batched_kabsch(A, B):
    """Unweighted Kabsch for stacks of equally sized point sets (k, n, 3)."""
    ca = A.mean(axis=1, keepdims=True)
    cb = B.mean(axis=1, keepdims=True)
    H = np.einsum("kni,knj->kij", A - ca, B - cb)
    U, _, Vt = np.linalg.svd(H)
    V = np.swapaxes(Vt, 1, 2)
    d = np.sign(np.linalg.det(V @ np.swapaxes(U, 1, 2)))
    d[d == 0] = 1.0
    V[:, :, 2] *= d[:, None]
    R = V @ np.swapaxes(U, 1, 2)
    t = cb[:, 0, :] - np.einsum("kij,kj->ki", R, ca[:, 0, :])
    return R, t


def ransac(corr, P, Q, iterations=1000, inlier_threshold=0.05, seed=0, min_inliers=5):
    """Hypothesize-and-verify rigid registration from putative correspondences.

    Every iteration fits Kabsch to three distinct random pairs and counts
    pairs whose residual is within ``inlier_threshold``. The best hypothesis
    (earliest on ties) is refit once on its inliers. Sample indices are
    drawn up front from one stream, so a longer run extends a shorter one.

    A run whose best hypothesis has fewer than ``min_inliers`` inliers is
    reported as failed rather than returning a transform.
    """
    P = check_cloud(P, "P")
    Q = check_cloud(Q, "Q")
    corr.check_bounds(len(P), len(Q))
    n = len(corr)
    if n < 3:
        raise ValueError(f"ransac needs at least 3 correspondences, got {n}")
    check_positive_int(iterations, "iterations")
    src = P[corr.source]
    dst = Q[corr.target]
    rng = np.random.default_rng(seed)
    samples = rng.integers(0, n, size=(iterations, 3))
    thr2 = inlier_threshold**2

    chunk = max(1, _RANSAC_FLOATS // (3 * n))
    best_count, best_iter, best_mask = -1, -1, None
    for s in range(0, iterations, chunk):
        idx = samples[s : s + chunk]
        ok = (idx[:, 0] != idx[:, 1]) & (idx[:, 0] != idx[:, 2]) & (idx[:, 1] != idx[:, 2])
        if not ok.any():
            continue
        rows = np.flatnonzero(ok)
        R, t = _batched_kabsch(src[idx[rows]], dst[idx[rows]])
        pred = np.einsum("kij,nj->kni", R, src) + t[:, None, :]
        res = np.sum((pred - dst[None]) ** 2, axis=2)
        counts = (res <= thr2).sum(axis=1)
        k = int(counts.argmax())
        if counts[k] > best_count:
            best_count, best_iter = int(counts[k]), s + int(rows[k])
            best_mask = res[k] <= thr2

    if best_mask is None or best_count < max(min_inliers, 3):
        mask = np.zeros(n, dtype=bool) if best_mask is None else best_mask
        return RansacResult(
            None, mask, False, iterations,
            f"best hypothesis has {max(best_count, 0)} inliers (< {max(min_inliers, 3)})",
        )  # fmt: skip
    T = kabsch(src[best_mask], dst[best_mask])
    return RansacResult(T, best_mask, True, iterations, f"best at iteration {best_iter}")


def inlier_ratio(corr, P, Q, T_gt, tau1=0.10):
    """Fraction of correspondences with ``||T_gt(p_i) - q_j|| <= tau1``."""
    if len(corr) == 0:
        raise ValueError("inlier_ratio needs at least one correspondence")
    P = check_cloud(P, "P")
    Q = check_cloud(Q, "Q")
    d = np.linalg.norm(apply_transform(T_gt, P[corr.source]) - Q[corr.target], axis=1)
    return float(np.count_nonzero(d <= tau1) / len(corr))


def fmr(inlier_ratios, tau2=0.05):
    """Fraction of pairs whose inlier ratio is at least ``tau2``."""
    irs = np.asarray(inlier_ratios, dtype=np.float64)
    if irs.size == 0:
        raise ValueError("fmr needs at least one pair")
    return float(np.count_nonzero(irs >= tau2) / irs.size)


def rre(R_est, R_gt):
    """Geodesic angle between two rotations, in degrees.

    This is ``arccos((trace(R_est^T R_gt) - 1) / 2)`` evaluated as
    ``atan2(sin, cos)`` of the relative rotation, which keeps full precision
    near 0 where the arccos form loses about half the digits.
    """
    R_est = np.asarray(R_est, dtype=np.float64)
    R_gt = np.asarray(R_gt, dtype=np.float64)
    rel = R_est.T @ R_gt
    c = np.clip((np.trace(rel) - 1.0) / 2.0, -1.0, 1.0)
    skew = rel - rel.T
    s = 0.5 * np.sqrt(skew[2, 1] ** 2 + skew[0, 2] ** 2 + skew[1, 0] ** 2)
    return float(np.degrees(np.arctan2(s, c)))


def rte(t_est, t_gt):
    return float(np.linalg.norm(np.asarray(t_est, dtype=np.float64) - np.asarray(t_gt, dtype=np.float64)))


@dataclass
class PairResult:
    pair_id: str
    inlier_ratio: float
    rre: float
    rte: float
    success: bool
    n_correspondences: int = 0
    ransac_inliers: int = 0


def registration_recall(results, thresholds):
    """Fraction of pairs with RRE and RTE both within the recall thresholds."""
    if not results:
        raise ValueError("registration_recall needs at least one pair")
    ok = [r.rre <= thresholds.rr_rre_max and r.rte <= thresholds.rr_rte_max for r in results]
    return float(np.mean(ok))


def evaluate_pair(pair_id, F_p, F_q, P, Q, T_gt, thresholds, sample_count=5000,
                  ransac_iterations=50000, ransac_threshold=0.05, seed=0, mutual=False, min_inliers=5):
    """Match, register and score one pair."""
    corr = nn_match(F_p, F_q, sample_count, seed, mutual=mutual)
    ir = inlier_ratio(corr, P, Q, T_gt, thresholds.inlier_distance) if len(corr) else 0.0
    if len(corr) >= 3:
        res = ransac(corr, P, Q, ransac_iterations, ransac_threshold, seed, min_inliers)
    else:
        res = RansacResult(None, np.zeros(len(corr), dtype=bool), False, 0, "too few matches")
    if res.success:
        e_r = rre(res.transform.rotation, T_gt.rotation)
        e_t = rte(res.transform.translation, T_gt.translation)
    else:
        e_r, e_t = 180.0, float("inf")
    ok = e_r <= thresholds.rr_rre_max and e_t <= thresholds.rr_rte_max
    pr = PairResult(pair_id, ir, e_r, e_t, bool(ok), len(corr), res.inlier_count)
    return pr, res


@dataclass
class EvalReport:
    thresholds: MetricThresholds
    pairs: list = field(default_factory=list)
    settings: dict = field(default_factory=dict)

    def aggregate(self):
        irs = [p.inlier_ratio for p in self.pairs]
        ok = [p for p in self.pairs if np.isfinite(p.rte)]
        rres = np.array([p.rre for p in ok]) if ok else np.array([np.nan])
        rtes = np.array([p.rte for p in ok]) if ok else np.array([np.nan])
        return {
            "n_pairs": len(self.pairs),
            "fmr": fmr(irs, self.thresholds.inlier_ratio),
            "rr": registration_recall(self.pairs, self.thresholds),
            "mean_ir": float(np.mean(irs)),
            "rre_mean": float(np.mean(rres)),
            "rre_std": float(np.std(rres)),
            "rte_mean": float(np.mean(rtes)),
            "rte_std": float(np.std(rtes)),
        }

    def to_dict(self):
        return {
            "thresholds": asdict(self.thresholds),
            "settings": self.settings,
            "pairs": [_json_safe(asdict(p)) for p in self.pairs],
            "aggregate": _json_safe(self.aggregate()),
        }

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True, allow_nan=False)

    def write_csv(self, path):
        cols = ["pair_id", "inlier_ratio", "rre", "rte", "success", "n_correspondences", "ransac_inliers"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for p in self.pairs:
                w.writerow([getattr(p, c) for c in cols])
            agg = self.aggregate()
            w.writerow(["# aggregate", *[f"{k}={v}" for k, v in agg.items()]])


def _json_safe(d):
    return {k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in d.items()}
