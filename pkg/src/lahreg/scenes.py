"""Synthetic fragment pairs with exact ground-truth transforms."""

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from lahreg.geom import RigidTransform, apply_transform, axis_angle_matrix, invert
from lahreg.validation import check_positive_int, check_seed

SURFACES = ("room-corner", "polyhedral", "gaussian-mixture")
OVERLAP_TAU = 0.05


class OverlapTargetError(RuntimeError):
    """The requested overlap could not be reached within the retry budget."""


@dataclass(frozen=True)
class SceneConfig:
    surface: str = "room-corner"
    points: int = 2000
    overlap: float = 0.6
    noise: float = 0.0
    max_rotation_deg: float = 30.0
    max_translation: float = 0.5
    seed: int = 0
    surface_seed: int | None = None

    def __post_init__(self):
        if self.surface not in SURFACES:
            raise ValueError(f"surface must be one of {SURFACES}, got {self.surface!r}")
        check_positive_int(self.points, "points", minimum=3)
        if not 0.0 < self.overlap <= 1.0:
            raise ValueError(f"overlap must be in (0, 1], got {self.overlap}")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")
        if self.max_rotation_deg < 0 or self.max_translation < 0:
            raise ValueError("transform magnitudes must be nonnegative")
        check_seed(self.seed)
        if self.surface_seed is not None:
            check_seed(self.surface_seed)

    def to_dict(self):
        return asdict(self)


def _sample_box(rng, n, center, half, rotation, faces=range(6)):
    """Area-uniform samples on the given faces of an oriented box."""
    faces = list(faces)
    areas = []
    for f in faces:
        a = f // 2
        u, v = [k for k in range(3) if k != a]
        areas.append(4 * half[u] * half[v])
    areas = np.asarray(areas)
    which = rng.choice(len(faces), size=n, p=areas / areas.sum())
    pts = rng.uniform(-1, 1, (n, 3)) * half
    for k, f in enumerate(faces):
        sel = which == k
        a, sign = f // 2, 1.0 if f % 2 else -1.0
        pts[sel, a] = sign * half[a]
    return pts @ rotation.T + center


def _room_corner(rng, n):
    L, H = 1.2, 0.8
    parts = [("floor", L * L), ("wall_x", L * H), ("wall_y", L * H)]
    n_boxes = 4
    boxes = []
    for _ in range(n_boxes):
        half = rng.uniform(0.06, 0.2, 3)
        c = np.array([rng.uniform(0.25, L - 0.1), rng.uniform(0.25, L - 0.1), half[2]])
        R = axis_angle_matrix([0, 0, 1], rng.uniform(0, np.pi))
        area = 4 * (half[0] * half[1] + half[0] * half[2] + half[1] * half[2])
        boxes.append((c, half, R, area))
    areas = np.array([a for _, a in parts] + [b[3] for b in boxes])
    counts = rng.multinomial(n, areas / areas.sum())
    pts = []
    # gentle relief on the floor so flat regions are not all alike
    bumps = rng.uniform(0, L, (6, 2)), rng.uniform(-0.04, 0.04, 6), rng.uniform(0.08, 0.2, 6)
    xy = rng.uniform(0, L, (counts[0], 2))
    z = np.zeros(len(xy))
    for (bx, by), h, s in zip(bumps[0], bumps[1], bumps[2]):
        z += h * np.exp(-((xy[:, 0] - bx) ** 2 + (xy[:, 1] - by) ** 2) / (2 * s * s))
    pts.append(np.column_stack([xy, z]))
    yz = rng.uniform([0, 0], [L, H], (counts[1], 2))
    pts.append(np.column_stack([np.zeros(len(yz)), yz]))
    xz = rng.uniform([0, 0], [L, H], (counts[2], 2))
    pts.append(np.column_stack([xz[:, 0], np.zeros(len(xz)), xz[:, 1]]))
    for (c, half, R, _), k in zip(boxes, counts[3:]):
        pts.append(_sample_box(rng, k, c, half, R, faces=range(1, 6)))
    return np.concatenate(pts)


def _polyhedral(rng, n):
    boxes = []
    for _ in range(6):
        half = rng.uniform(0.08, 0.35, 3)
        c = rng.uniform(-0.5, 0.5, 3)
        R = axis_angle_matrix(rng.standard_normal(3), rng.uniform(0, np.pi))
        area = 8 * (half[0] * half[1] + half[0] * half[2] + half[1] * half[2])
        boxes.append((c, half, R, area))
    areas = np.array([b[3] for b in boxes])
    counts = rng.multinomial(n, areas / areas.sum())
    return np.concatenate([_sample_box(rng, k, c, h, R) for (c, h, R, _), k in zip(boxes, counts)])


def _gaussian_mixture(rng, n, clusters=8, sigma=0.05, separation=1.0):
    centers = gaussian_mixture_centers(rng, clusters, separation)
    labels = rng.integers(0, clusters, n)
    return centers[labels] + sigma * rng.standard_normal((n, 3))


def gaussian_mixture_centers(rng, clusters, separation):
    """Cluster centers on a jittered cube lattice, pairwise >= ``separation`` apart."""
    side = int(np.ceil(clusters ** (1 / 3)))
    grid = np.stack(np.meshgrid(*[np.arange(side)] * 3, indexing="ij"), -1).reshape(-1, 3)
    pick = rng.choice(len(grid), size=clusters, replace=False)
    spacing = 1.5 * separation
    jitter = rng.uniform(-0.2, 0.2, (clusters, 3)) * separation
    return grid[pick] * spacing + jitter


def gaussian_mixture_cloud(n, seed, clusters=8, sigma=0.05, separation=1.0):
    rng = np.random.default_rng(seed)
    return _gaussian_mixture(rng, n, clusters, sigma, separation)


def sample_surface(kind, n, rng):
    if kind == "room-corner":
        return _room_corner(rng, n)
    if kind == "polyhedral":
        return _polyhedral(rng, n)
    if kind == "gaussian-mixture":
        return _gaussian_mixture(rng, n)
    raise ValueError(f"unknown surface {kind!r}")


def random_transform(rng, max_rotation_deg, max_translation):
    axis = rng.standard_normal(3)
    angle = np.deg2rad(rng.uniform(0, max_rotation_deg))
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    t = direction * rng.uniform(0, max_translation)
    return RigidTransform(axis_angle_matrix(axis, angle), t)


def measure_overlap(P, Q, T_gt, tau=OVERLAP_TAU):
    """Mutual-proximity overlap of a pair.

    Fraction of all points (of both clouds) whose nearest counterpart in the
    other cloud, after aligning with ``T_gt``, lies within ``tau``.
    """
    TP = apply_transform(T_gt, P)
    dq, _ = cKDTree(Q).query(TP, k=1)
    dp, _ = cKDTree(TP).query(Q, k=1)
    return float(((dq <= tau).sum() + (dp <= tau).sum()) / (len(P) + len(Q)))


def _slab(rng, base_s, lo, width, n):
    idx = np.flatnonzero((base_s >= lo) & (base_s < lo + width))
    if idx.size < n:
        return None
    return np.sort(rng.choice(idx, size=n, replace=False))


def synth_pair(cfg, max_retries=10):
    """Two overlapping fragments of one synthetic surface.

    Both fragments are slabs of a dense base surface along a random
    direction; the shift between the slabs is tuned until the measured
    overlap is within 0.05 of the target. The second fragment is moved by a
    random rigid transform and perturbed with Gaussian noise.

    Returns
    -------
    (ndarray, ndarray, RigidTransform, float)
        ``P``, ``Q``, the transform mapping ``P`` onto ``Q`` and the achieved
        overlap.
    """
    surface_seed = cfg.seed if cfg.surface_seed is None else cfg.surface_seed
    base = sample_surface(cfg.surface, 6 * cfg.points, np.random.default_rng(surface_seed))
    rng = np.random.default_rng([cfg.seed, 1])
    T_gt = random_transform(rng, cfg.max_rotation_deg, cfg.max_translation)

    def finish(P, Qsrc):
        Q = apply_transform(T_gt, Qsrc)
        if cfg.noise > 0:
            Q = Q + cfg.noise * rng.standard_normal(Q.shape)
        return P, Q

    for _ in range(max_retries):
        u = rng.standard_normal(3)
        u /= np.linalg.norm(u)
        s = base @ u
        lo, hi = np.quantile(s, [0.0, 1.0])
        width = 0.55 * (hi - lo)
        start = rng.uniform(lo, hi - width)
        P_idx = _slab(rng, s, start, width, cfg.points)
        if P_idx is None:
            continue
        P = base[P_idx]
        if cfg.overlap >= 1.0:
            P, Q = finish(P, P.copy())
            return P, Q, T_gt, measure_overlap(P, Q, T_gt)
        best = None
        for k, shift in enumerate(np.linspace(0.0, width, 41)):
            for side, sign in enumerate((1.0, -1.0)):
                q_lo = start + sign * shift
                sub = np.random.default_rng([cfg.seed, 2, k, side])
                Q_idx = _slab(sub, s, q_lo, width, cfg.points)
                if Q_idx is None:
                    continue
                Qsrc = base[Q_idx]
                got = measure_overlap(P, Qsrc, RigidTransform.identity())
                if best is None or abs(got - cfg.overlap) < abs(best[0] - cfg.overlap):
                    best = (got, Qsrc)
        if best is not None and abs(best[0] - cfg.overlap) <= 0.05:
            P, Q = finish(P, best[1])
            return P, Q, T_gt, measure_overlap(P, Q, T_gt)
    raise OverlapTargetError(
        f"could not reach overlap {cfg.overlap} +/- 0.05 in {max_retries} attempts"
    )


def fragment_back(Q, T_gt):
    """Express ``Q`` in the source frame."""
    return apply_transform(invert(T_gt), Q)
