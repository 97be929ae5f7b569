"""Rigid transforms and closed-form alignment from correspondences."""

from dataclasses import dataclass, field

import numpy as np

from lahreg.validation import check_cloud


@dataclass(frozen=True)
class RigidTransform:
    """Rotation in SO(3) plus translation, acting as ``R @ p + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("transform contains non-finite values")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix):
        M = np.asarray(matrix, dtype=np.float64)
        if M.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got {M.shape}")
        return cls(M[:3, :3], M[:3, 3])

    def as_matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def is_proper(self, atol=1e-9):
        R = self.rotation
        return bool(
            np.allclose(R.T @ R, np.eye(3), atol=atol)
            and abs(np.linalg.det(R) - 1.0) <= atol
        )

    def to_dict(self):
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["rotation"], d["translation"])


@dataclass(frozen=True)
class CorrespondenceSet:
    """Index pairs ``(source, target)`` with optional feature distances."""

    source: np.ndarray
    target: np.ndarray
    distances: np.ndarray | None = None

    def __post_init__(self):
        src = np.asarray(self.source, dtype=np.int64).reshape(-1)
        dst = np.asarray(self.target, dtype=np.int64).reshape(-1)
        if src.shape != dst.shape:
            raise ValueError("source and target index arrays differ in length")
        object.__setattr__(self, "source", src)
        object.__setattr__(self, "target", dst)
        if self.distances is not None:
            d = np.asarray(self.distances, dtype=np.float64).reshape(-1)
            if d.shape != src.shape:
                raise ValueError("distances must have one entry per pair")
            object.__setattr__(self, "distances", d)

    def __len__(self):
        return int(self.source.shape[0])

    def check_bounds(self, n_source, n_target):
        if len(self) == 0:
            return
        if self.source.min() < 0 or self.source.max() >= n_source:
            raise ValueError("source index out of bounds")
        if self.target.min() < 0 or self.target.max() >= n_target:
            raise ValueError("target index out of bounds")


def apply_transform(T, points):
    """Map every point ``p`` to ``T.rotation @ p + T.translation``."""
    P = check_cloud(points)
    return P @ T.rotation.T + T.translation


def compose(T1, T2):
    """Return the transform applying ``T2`` first, then ``T1``."""
    return RigidTransform(
        T1.rotation @ T2.rotation,
        T1.rotation @ T2.translation + T1.translation,
    )


def invert(T):
    Rt = T.rotation.T
    return RigidTransform(Rt, -Rt @ T.translation)


def kabsch(src, dst, weights=None):
    """Weighted least-squares rigid alignment of ``src`` onto ``dst``.

    Minimizes ``sum_i w_i * ||R @ src_i + t - dst_i||^2`` over proper
    rotations. A reflection in the SVD solution is corrected by flipping the
    singular direction with the smallest singular value. With a single pair
    the rotation is fixed to identity.

    Parameters
    ----------
    src, dst : array_like, shape (N, 3)
        Corresponding points, row ``i`` of ``src`` matched to row ``i`` of
        ``dst``.
    weights : array_like, shape (N,), optional
        Nonnegative per-pair weights. Uniform when omitted.

    Returns
    -------
    RigidTransform
    """
    A = check_cloud(src, "src", allow_empty=False)
    B = check_cloud(dst, "dst", allow_empty=False)
    if A.shape != B.shape:
        raise ValueError(f"src and dst lengths differ: {len(A)} vs {len(B)}")
    if weights is None:
        w = np.full(len(A), 1.0 / len(A))
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        if w.shape != (len(A),):
            raise ValueError("weights must have one entry per correspondence")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        total = w.sum()
        if total <= 0:
            raise ValueError("weights sum to zero")
        w = w / total

    ca = w @ A
    cb = w @ B
    if len(A) == 1:
        return RigidTransform(np.eye(3), cb - ca)

    H = (A - ca).T @ ((B - cb) * w[:, None])
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    if d == 0:
        d = 1.0
    D = np.diag([1.0, 1.0, d])
    R = Vt.T @ D @ U.T
    return RigidTransform(R, cb - R @ ca)


def random_rotation(seed):
    """Uniformly distributed rotation matrix, deterministic per ``seed``.

    Draws a normalized 4-D Gaussian quaternion, which is Haar-uniform on
    SO(3).
    """
    rng = np.random.default_rng(seed)
    q = rng.standard_normal(4)
    while np.linalg.norm(q) < 1e-12:
        q = rng.standard_normal(4)
    return quaternion_to_matrix(q / np.linalg.norm(q))


def quaternion_to_matrix(q):
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def axis_angle_matrix(axis, angle):
    """Rodrigues rotation about ``axis`` by ``angle`` radians."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)
