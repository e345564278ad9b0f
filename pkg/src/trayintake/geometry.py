"""Depth-to-3D geometry: unprojection, robust tray-plane fitting, Delaunay food
surfaces, parametric plate surfaces and height-difference volume integration.

Coordinate convention: camera frame with x right, y down, z along the optical
axis, all in millimetres.  Plane normals are oriented toward the camera, and
``Plane.height_above`` is positive on the camera side of the plane, so food
sitting on the tray has positive height.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
import json

import numpy as np
from scipy.spatial import ConvexHull, Delaunay, QhullError

from .core import CameraIntrinsics, DepthImage, ValidationError


class GeometryError(ValueError):
    """Degenerate or empty geometric input."""


# ---------------------------------------------------------------------------
# point clouds


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray  # (N, 3) float64, mm
    pixels: np.ndarray  # (N, 2) int, (row, col) of the originating pixel

    def __post_init__(self):
        if len(self.points) != len(self.pixels):
            raise ValidationError("point/pixel count mismatch")
        if not np.isfinite(self.points).all():
            raise ValidationError("non-finite point coordinates")

    def __len__(self):
        return len(self.points)


def unproject(
    depth: DepthImage,
    intrinsics: CameraIntrinsics,
    region: np.ndarray,
    depths_mm: np.ndarray | None = None,
) -> PointCloud:
    """Pinhole unprojection of the region pixels into the camera frame.

    ``depths_mm`` overrides the raster values (used after invalid-pixel fill).
    """
    region = np.asarray(region, dtype=np.int64)
    if region.size == 0:
        raise GeometryError("empty region")
    rows, cols = region[:, 0], region[:, 1]
    h, w = depth.shape
    if rows.min() < 0 or cols.min() < 0 or rows.max() >= h or cols.max() >= w:
        raise GeometryError("region pixel outside raster")
    z = depth.values_mm[rows, cols] if depths_mm is None else np.asarray(depths_mm, float)
    if (z == 0).all():
        raise GeometryError("all depths invalid in region")
    x = (cols - intrinsics.cx) * z / intrinsics.fx
    y = (rows - intrinsics.cy) * z / intrinsics.fy
    return PointCloud(points=np.column_stack([x, y, z]), pixels=region)


def reproject(points: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Inverse of :func:`unproject`; returns (row, col) pixel coordinates."""
    pts = np.asarray(points, float)
    u = pts[:, 0] * intrinsics.fx / pts[:, 2] + intrinsics.cx
    v = pts[:, 1] * intrinsics.fy / pts[:, 2] + intrinsics.cy
    return np.column_stack([v, u])


# ---------------------------------------------------------------------------
# planes


@dataclass(frozen=True)
class Plane:
    """Plane n.p + d = 0 with |n| = 1 and n oriented toward the camera origin."""

    normal: np.ndarray  # (3,)
    d: float

    def __post_init__(self):
        n = np.asarray(self.normal, float)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValidationError(f"plane normal not unit length: |n|={np.linalg.norm(n)}")
        n.setflags(write=False)
        object.__setattr__(self, "normal", n)

    @classmethod
    def from_normal_point(cls, normal, point) -> "Plane":
        n = np.asarray(normal, float)
        n = n / np.linalg.norm(n)
        point = np.asarray(point, float)
        # orient toward the camera origin: height of the origin must be positive
        if -n @ point < 0:
            n = -n
        return cls(normal=n, d=float(-n @ point))

    def height_above(self, points) -> np.ndarray:
        """Signed height of points above the plane (positive toward camera)."""
        pts = np.atleast_2d(np.asarray(points, float))
        return pts @ self.normal + self.d

    def basis(self):
        """Deterministic in-plane orthonormal basis (e1, e2)."""
        n = self.normal
        helper = np.array([1.0, 0.0, 0.0])
        if abs(n @ helper) > 0.9:
            helper = np.array([0.0, 1.0, 0.0])
        e1 = np.cross(n, helper)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(n, e1)
        return e1, e2

    def origin(self) -> np.ndarray:
        return -self.d * self.normal

    def to_plane_coords(self, points) -> np.ndarray:
        """Project points into (x, y, height) coordinates of the plane frame."""
        pts = np.atleast_2d(np.asarray(points, float))
        e1, e2 = self.basis()
        rel = pts - self.origin()
        return np.column_stack([rel @ e1, rel @ e2, self.height_above(pts)])

    def from_plane_coords(self, xyh) -> np.ndarray:
        xyh = np.atleast_2d(np.asarray(xyh, float))
        e1, e2 = self.basis()
        return (
            self.origin()
            + xyh[:, :1] * e1
            + xyh[:, 1:2] * e2
            + xyh[:, 2:3] * self.normal
        )


def _tls_plane(points: np.ndarray) -> Plane:
    """Total-least-squares plane through a point set (SVD of centred points)."""
    centroid = points.mean(axis=0)
    centered = points - centroid
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    if len(s) < 3 or s[1] < 1e-9 * max(s[0], 1.0):
        raise GeometryError("degenerate point set: points are collinear")
    return Plane.from_normal_point(vt[2], centroid)


def fit_tray_plane(
    cloud: PointCloud,
    seed: int,
    iterations: int = 1000,
    inlier_threshold_mm: float = 3.0,
    min_inlier_fraction: float = 0.3,
    max_points: int = 4000,
) -> Plane:
    """RANSAC plane fit with 3-point minimal samples and a TLS refit on inliers.

    Deterministic for a fixed seed.  Raises GeometryError on degenerate clouds
    or when the best inlier fraction falls below ``min_inlier_fraction``.
    """
    pts = cloud.points
    if len(pts) < 3:
        raise GeometryError(f"need at least 3 points, got {len(pts)}")
    rng = np.random.default_rng(seed)
    if len(pts) > max_points:
        idx = rng.choice(len(pts), size=max_points, replace=False)
        pts = pts[idx]
    n = len(pts)

    triples = rng.integers(0, n, size=(iterations, 3))
    a = pts[triples[:, 0]]
    b = pts[triples[:, 1]]
    c = pts[triples[:, 2]]
    normals = np.cross(b - a, c - a)
    norms = np.linalg.norm(normals, axis=1)
    ok = norms > 1e-9
    if not ok.any():
        raise GeometryError("degenerate point set: points are collinear")
    normals[ok] /= norms[ok, None]
    offsets = -np.einsum("ij,ij->i", normals, a)

    # distance of every point to every hypothesis plane
    dist = np.abs(pts @ normals.T + offsets[None, :])
    counts = (dist <= inlier_threshold_mm).sum(axis=0)
    counts[~ok] = 0
    best = int(counts.argmax())
    frac = counts[best] / n
    if frac < min_inlier_fraction:
        raise GeometryError(
            f"RANSAC inlier fraction {frac:.3f} below floor {min_inlier_fraction}"
        )
    inliers = dist[:, best] <= inlier_threshold_mm
    return _tls_plane(pts[inliers])


def _cross2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """z-component of the cross product of batched 2D vectors."""
    return a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]


# ---------------------------------------------------------------------------
# triangulated food surfaces


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray  # (N, 3) mm
    triangles: np.ndarray  # (M, 3) int indices

    def __post_init__(self):
        if len(self.triangles) and self.triangles.max() >= len(self.vertices):
            raise ValidationError("triangle index out of range")


def triangulate_surface(cloud: PointCloud, plane: Plane) -> TriangleMesh:
    """Delaunay-triangulate the cloud in the tray-plane projection.

    The triangulation is computed on the 2D plane coordinates and lifted back
    to the original 3D vertices.  Zero-area triangles are dropped.
    """
    if len(cloud) < 3:
        raise GeometryError(f"need at least 3 points, got {len(cloud)}")
    xyh = plane.to_plane_coords(cloud.points)
    xy = xyh[:, :2]
    try:
        tri = Delaunay(xy)
    except QhullError as exc:
        raise GeometryError(f"triangulation failed (collinear input?): {exc}") from exc
    simplices = tri.simplices
    p0 = xy[simplices[:, 0]]
    p1 = xy[simplices[:, 1]]
    p2 = xy[simplices[:, 2]]
    areas = 0.5 * np.abs(_cross2(p1 - p0, p2 - p0))
    simplices = simplices[areas > 1e-12]
    if len(simplices) == 0:
        raise GeometryError("all points collinear in the plane projection")
    return TriangleMesh(vertices=cloud.points.copy(), triangles=simplices.copy())


# ---------------------------------------------------------------------------
# plate models and placement


@dataclass(frozen=True)
class PlateModel:
    """Radial plate interior profile: depth below the rim plane vs radius.

    ``profile`` is a list of (radius_mm, depth_mm) knots, linearly
    interpolated; depth must be non-increasing in radius (deepest at the
    centre) and reach 0 at the rim.  Bowls are assumed to sit on the tray, so
    the rim sits at height ``depth(0)`` above the tray plane.
    """

    plate_type: int
    rim_radius_mm: float
    profile: np.ndarray  # (K, 2) knots

    def __post_init__(self):
        prof = np.asarray(self.profile, float)
        if self.rim_radius_mm <= 0:
            raise ValidationError(f"rim radius must be positive, got {self.rim_radius_mm}")
        if np.any(np.diff(prof[:, 0]) <= 0):
            raise ValidationError("profile radii must be strictly increasing")
        if np.any(np.diff(prof[:, 1]) > 1e-9):
            raise ValidationError("profile depth must be non-increasing toward the rim")
        prof.setflags(write=False)
        object.__setattr__(self, "profile", prof)

    def depth_below_rim(self, r) -> np.ndarray:
        r = np.asarray(r, float)
        return np.interp(r, self.profile[:, 0], self.profile[:, 1])

    @property
    def rim_height_mm(self) -> float:
        """Height of the rim plane above the tray (sit-on-tray convention)."""
        return float(self.depth_below_rim(0.0))

    @classmethod
    def flat(cls, plate_type: int, rim_radius_mm: float) -> "PlateModel":
        prof = np.array([[0.0, 0.0], [rim_radius_mm, 0.0]])
        return cls(plate_type, rim_radius_mm, prof)

    @classmethod
    def spherical_bowl(
        cls, plate_type: int, rim_radius_mm: float, depth_mm: float, knots: int = 129
    ) -> "PlateModel":
        """Spherical-cap bowl of the given rim radius and centre depth."""
        R, D = rim_radius_mm, depth_mm
        sphere_r = (R * R + D * D) / (2.0 * D)
        r = np.linspace(0.0, R, knots)
        depth = D - sphere_r + np.sqrt(sphere_r * sphere_r - r * r)
        depth[-1] = 0.0
        return cls(plate_type, rim_radius_mm, np.column_stack([r, depth]))


def load_plate_models(path) -> dict:
    data = json.loads(Path(path).read_text())
    models = {}
    for entry in data:
        model = PlateModel(
            plate_type=int(entry["plate_type"]),
            rim_radius_mm=float(entry["rim_radius_mm"]),
            profile=np.asarray(entry["profile"], float),
        )
        models[model.plate_type] = model
    return models


def save_plate_models(models: dict, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = [
        {
            "plate_type": m.plate_type,
            "rim_radius_mm": m.rim_radius_mm,
            "profile": [[float(r), float(h)] for r, h in m.profile],
        }
        for _, m in sorted(models.items())
    ]
    path.write_text(json.dumps(payload, sort_keys=True) + "\n")


@dataclass(frozen=True)
class PlateSurface:
    """Positioned plate interior surface over the tray plane."""

    model: PlateModel
    center_xy: np.ndarray  # tray-plane coordinates of the plate centre
    tray: Plane

    def height_above_tray(self, xy) -> np.ndarray:
        """Plate surface height at tray-plane coordinates, clamped to the rim
        plane outside the rim radius."""
        xy = np.atleast_2d(np.asarray(xy, float))
        r = np.linalg.norm(xy - self.center_xy, axis=1)
        r_clamped = np.minimum(r, self.model.rim_radius_mm)
        return self.model.rim_height_mm - self.model.depth_below_rim(r_clamped)

    def inside_rim(self, xy) -> np.ndarray:
        xy = np.atleast_2d(np.asarray(xy, float))
        return np.linalg.norm(xy - self.center_xy, axis=1) <= self.model.rim_radius_mm


def _fit_circle(xy: np.ndarray):
    """Algebraic (Kasa) circle fit; returns (center, radius)."""
    a = np.column_stack([2.0 * xy[:, 0], 2.0 * xy[:, 1], np.ones(len(xy))])
    b = (xy * xy).sum(axis=1)
    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    center = sol[:2]
    radius = np.sqrt(max(sol[2] + center @ center, 0.0))
    return center, radius


def place_plate(
    model: PlateModel,
    plate_region: np.ndarray,
    depth: DepthImage,
    intrinsics: CameraIntrinsics,
    tray: Plane,
    min_pixels: int = 50,
    depths_mm: np.ndarray | None = None,
) -> PlateSurface:
    """Locate the plate on the tray plane and return its interior surface.

    The centre comes from a circle fit to the convex hull of the plate-region
    points projected onto the tray plane (the hull traces the rim); the plate
    orientation is the tray normal.
    """
    plate_region = np.asarray(plate_region, dtype=np.int64)
    if len(plate_region) < min_pixels:
        raise GeometryError(
            f"plate region has {len(plate_region)} pixels, below minimum {min_pixels}"
        )
    cloud = unproject(depth, intrinsics, plate_region, depths_mm=depths_mm)
    xy = tray.to_plane_coords(cloud.points)[:, :2]
    try:
        hull = ConvexHull(xy)
        center, radius = _fit_circle(xy[hull.vertices])
    except QhullError as exc:
        raise GeometryError(f"plate region degenerate: {exc}") from exc
    if abs(radius - model.rim_radius_mm) > 0.2 * model.rim_radius_mm:
        # a truncated region (e.g. a plate cut off at the image border)
        # yields a badly biased circle; better to fail than to mis-centre
        raise GeometryError(
            f"fitted rim radius {radius:.1f} mm inconsistent with plate model "
            f"({model.rim_radius_mm:.1f} mm)"
        )
    return PlateSurface(model=model, center_xy=center, tray=tray)


# ---------------------------------------------------------------------------
# volume integration


def food_volume(food_mesh: TriangleMesh, plate_surface: PlateSurface, tray: Plane) -> float:
    """Integrate food height above the plate surface over the tray plane.

    Per triangle: projected area on the tray plane times the mean of the three
    vertex heights above the plate surface (negative heights clamped to 0).
    Returns millilitres.
    """
    if len(food_mesh.triangles) == 0:
        raise GeometryError("empty mesh")
    xyh = tray.to_plane_coords(food_mesh.vertices)
    if not plate_surface.inside_rim(xyh[:, :2]).any():
        raise GeometryError("food mesh footprint entirely outside the plate surface")
    heights = xyh[:, 2] - plate_surface.height_above_tray(xyh[:, :2])
    heights = np.maximum(heights, 0.0)
    tri = food_mesh.triangles
    p0 = xyh[tri[:, 0], :2]
    p1 = xyh[tri[:, 1], :2]
    p2 = xyh[tri[:, 2], :2]
    areas = 0.5 * np.abs(_cross2(p1 - p0, p2 - p0))
    mean_heights = heights[tri].mean(axis=1)
    volume_mm3 = float((areas * mean_heights).sum())
    return volume_mm3 / 1000.0


@dataclass(frozen=True)
class ConsumedVolume:
    volume_ml: float  # clamped at zero
    raw_ml: float  # signed before-minus-after, kept for diagnostics


def consumed_volume(before_ml: float, after_ml: float) -> ConsumedVolume:
    """Before-minus-after volume, clamped at zero (raw value retained)."""
    if before_ml < 0 or after_ml < 0:
        raise ValidationError("volumes must be non-negative")
    raw = before_ml - after_ml
    return ConsumedVolume(volume_ml=max(raw, 0.0), raw_ml=raw)
