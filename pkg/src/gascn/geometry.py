"""Non-learned geometric kernels over 3D point sets."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

# Slack used when widening a KD-tree query to resolve distance ties exactly.
_TIE_PAD = 4


class DegenerateGeometryError(ValueError):
    """Input is geometrically degenerate (coincident, collinear, rank deficient)."""


@dataclass
class PointCloud:
    """An ordered set of 3D points with optional unit normals and a scalar field."""

    points: np.ndarray
    normals: np.ndarray | None = None
    scalar_field: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.points.shape[0] < 1:
            raise ValueError("a point cloud needs at least one point")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")
        if self.normals is not None:
            self.normals = np.ascontiguousarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if self.normals.shape != self.points.shape:
                raise ValueError("normals must have one row per point")
            if not np.allclose(np.linalg.norm(self.normals, axis=1), 1.0, atol=1e-6, rtol=0):
                raise ValueError("normals must be unit length within 1e-6")
        if self.scalar_field is not None:
            self.scalar_field = np.ascontiguousarray(self.scalar_field, dtype=np.float64).reshape(-1)
            if self.scalar_field.shape[0] != self.points.shape[0]:
                raise ValueError("scalar_field must have one value per point")

    def __len__(self) -> int:
        return self.points.shape[0]

    def subset(self, index) -> "PointCloud":
        pick = lambda a: None if a is None else a[index]  # noqa: E731
        return PointCloud(self.points[index], pick(self.normals), pick(self.scalar_field))


def as_points(cloud) -> np.ndarray:
    """Return an ``m x 3`` float64 array from a :class:`PointCloud` or array-like."""
    if isinstance(cloud, PointCloud):
        return cloud.points
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected an (m, 3) array of points, got shape {pts.shape}")
    if pts.shape[0] == 0:
        raise ValueError("point set is empty")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point coordinates must be finite")
    return pts


@dataclass
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        r = self.rotation
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthogonal with determinant +1")

    def apply(self, points) -> np.ndarray:
        return as_points(points) @ self.rotation.T + self.translation

    def compose(self, first: "RigidTransform") -> "RigidTransform":
        """Transform equivalent to applying ``first`` then ``self``."""
        return RigidTransform(
            self.rotation @ first.rotation, self.rotation @ first.translation + self.translation
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}


# ------------------------------------------------------------------- search


def _sorted_rows(dist: np.ndarray, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = np.lexsort((idx, dist), axis=-1)
    return np.take_along_axis(dist, order, -1), np.take_along_axis(idx, order, -1)


def _row_distances(q: np.ndarray, pts: np.ndarray, idx: np.ndarray) -> np.ndarray:
    diff = q[:, None, :] - pts[idx]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def knn_search(cloud, query, k: int, tree: cKDTree | None = None) -> np.ndarray:
    """Exact k nearest cloud points for each query point, nearest first.

    Equal distances are ordered by ascending point index, including ties that
    straddle the k-th position.
    """
    pts, q = as_points(cloud), as_points(query)
    m = pts.shape[0]
    if not 1 <= k <= m:
        raise ValueError(f"k={k} must lie in [1, {m}] for a cloud of {m} points")
    tree = tree if tree is not None else cKDTree(pts)
    kk = min(m, k + _TIE_PAD)
    _, idx = tree.query(q, k=kk)
    idx = np.asarray(idx, dtype=np.intp).reshape(q.shape[0], kk)
    dist, idx = _sorted_rows(_row_distances(q, pts, idx), idx)
    if kk < m:
        # Ties with the last returned neighbour may continue past the query window.
        suspect = np.flatnonzero(dist[:, k - 1] >= dist[:, kk - 1])
        if suspect.size:
            full = np.broadcast_to(np.arange(m), (suspect.size, m))
            fd, fi = _sorted_rows(_row_distances(q[suspect], pts, full), full.copy())
            idx[suspect, :k] = fi[:, :k]
    return np.ascontiguousarray(idx[:, :k])


def nearest(cloud, query, tree: cKDTree | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Distance and index of the nearest cloud point for each query point."""
    pts, q = as_points(cloud), as_points(query)
    tree = tree if tree is not None else cKDTree(pts)
    _, idx = tree.query(q, k=1)
    idx = np.asarray(idx, dtype=np.intp)
    diff = q - pts[idx]
    return np.sqrt(np.einsum("ij,ij->i", diff, diff)), idx


# ------------------------------------------------------------------ patches


def meshgrid_square(grid_n: int, l: float) -> np.ndarray:
    """``grid_n**2`` vertices of a planar square of side ``l`` centred at the origin.

    X varies fastest.  Z is zero everywhere.
    """
    if grid_n < 1 or l <= 0:
        raise ValueError("grid_n must be >= 1 and l must be positive")
    ticks = np.zeros(1) if grid_n == 1 else np.linspace(-l / 2, l / 2, grid_n)
    gx, gy = np.meshgrid(ticks, ticks, indexing="xy")
    return np.stack([gx.ravel(), gy.ravel(), np.zeros(grid_n * grid_n)], axis=1)


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def rodrigues(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rotation matrix for a unit ``axis`` and ``angle`` in radians."""
    k = _skew(np.asarray(axis, dtype=np.float64))
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def rotation_from_normal(n) -> RigidTransform:
    """Rotation taking the +z axis onto the unit vector ``n``.

    When ``n`` is (anti)parallel to z the cross-product axis vanishes: +z needs
    no rotation, -z is reached by a half turn about x.
    """
    n = np.asarray(n, dtype=np.float64).reshape(3)
    norm = np.linalg.norm(n)
    if abs(norm - 1.0) > 1e-6:
        raise ValueError(f"normal must be unit length within 1e-6, got norm {norm}")
    n = n / norm
    axis = np.cross([0.0, 0.0, 1.0], n)
    s = np.linalg.norm(axis)
    if s < 1e-8:
        if n[2] > 0:
            return RigidTransform()
        return RigidTransform(np.diag([1.0, -1.0, -1.0]))
    # atan2 keeps the angle accurate where arccos(n_z) is ill-conditioned.
    theta = np.arctan2(s, n[2])
    return RigidTransform(rodrigues(axis / s, theta))


# -------------------------------------------------------------------- metrics


def chamfer_distance(s1, s2, squared: bool = False) -> tuple[float, np.ndarray, np.ndarray]:
    """Symmetric average nearest-neighbour distance and its gradients.

    Returns ``(cd, grad_s1, grad_s2)``.  With ``squared=True`` each
    nearest-neighbour distance is squared before averaging.
    """
    a, b = as_points(s1), as_points(s2)
    d_ab, i_ab = nearest(b, a)
    d_ba, i_ba = nearest(a, b)
    ga, gb = np.zeros_like(a), np.zeros_like(b)
    diff_ab = a - b[i_ab]
    diff_ba = b - a[i_ba]
    if squared:
        cd = float(np.mean(d_ab**2) + np.mean(d_ba**2))
        w_ab = 2.0 / a.shape[0] * diff_ab
        w_ba = 2.0 / b.shape[0] * diff_ba
    else:
        cd = float(np.mean(d_ab) + np.mean(d_ba))
        with np.errstate(invalid="ignore", divide="ignore"):
            w_ab = np.where(d_ab[:, None] > 0, diff_ab / d_ab[:, None], 0.0) / a.shape[0]
            w_ba = np.where(d_ba[:, None] > 0, diff_ba / d_ba[:, None], 0.0) / b.shape[0]
    ga += w_ab
    np.add.at(gb, i_ab, -w_ab)
    gb += w_ba
    np.add.at(ga, i_ba, -w_ba)
    return cd, ga, gb


def nn_distance_field(pred, gt) -> PointCloud:
    """Copy of ``pred`` whose scalar field is each point's distance to ``gt``."""
    dist, _ = nearest(gt, pred)
    if isinstance(pred, PointCloud):
        return replace(pred, scalar_field=dist)
    return PointCloud(as_points(pred), scalar_field=dist)


# -------------------------------------------------------------- registration


def _check_registrable(pts: np.ndarray, label: str) -> None:
    if pts.shape[0] < 3:
        raise DegenerateGeometryError(f"{label} needs at least 3 points")
    sv = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
    if sv[1] <= 1e-12 * max(sv[0], 1e-300):
        raise DegenerateGeometryError(f"{label} points are collinear or coincident")


def kabsch(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform mapping ``src`` rows onto ``dst`` rows."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, sv, vt = np.linalg.svd(h)
    if sv[1] <= 1e-12 * max(sv[0], 1e-300):
        raise DegenerateGeometryError("correspondence covariance is rank deficient")
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    # Re-orthonormalise to keep RigidTransform's 1e-9 invariant after many compositions.
    uu, _, vv = np.linalg.svd(r)
    r = uu @ vv
    return RigidTransform(r, cd - r @ cs)


def icp_register(
    source, target, max_iters: int = 50, tol: float = 1e-10
) -> tuple[RigidTransform, list[float]]:
    """Point-to-point ICP from the identity.

    Returns the transform mapping ``source`` onto ``target`` and the mean squared
    correspondence distance after each alignment (first entry at the identity).
    """
    src, tgt = as_points(source), as_points(target)
    _check_registrable(src, "source")
    _check_registrable(tgt, "target")
    tree = cKDTree(tgt)
    transform = RigidTransform()
    current = src
    dist, idx = nearest(tgt, current, tree)
    mse = float(np.mean(dist**2))
    trace = [mse]
    for _ in range(max_iters):
        if mse == 0.0:
            break
        step = kabsch(current, tgt[idx])
        candidate = step.compose(transform)
        moved = candidate.apply(src)
        dist, new_idx = nearest(tgt, moved, tree)
        new_mse = float(np.mean(dist**2))
        if new_mse > mse:
            break
        transform, current, idx = candidate, moved, new_idx
        trace.append(new_mse)
        improved, mse = mse - new_mse, new_mse
        if improved < tol:
            break
    return transform, trace


def normalize_cloud(cloud) -> tuple[PointCloud, np.ndarray, float]:
    """Centre on the centroid and scale so the farthest point sits at radius 0.5.

    Returns ``(normalized, centroid, scale)``; invert with :func:`denormalize`.
    """
    pc = cloud if isinstance(cloud, PointCloud) else PointCloud(as_points(cloud))
    centroid = pc.points.mean(axis=0)
    centred = pc.points - centroid
    radius = np.sqrt(np.einsum("ij,ij->i", centred, centred)).max()
    if radius <= 1e-12:
        raise DegenerateGeometryError("all points coincide; cannot normalise")
    scale = 0.5 / radius
    return replace(pc, points=centred * scale), centroid, float(scale)


def denormalize(points, centroid: np.ndarray, scale: float) -> np.ndarray:
    return as_points(points) / scale + centroid
