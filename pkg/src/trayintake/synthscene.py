"""Synthetic tray-scene generator with analytic ground truth.

Renders depth rasters plus food/plate label maps for trays carrying plates,
bowls with liquid fills, solid food primitives (boxes, spherical caps, smooth
cosine bumps) and packaged containers.  Depth is computed by exact ray-surface
intersection per pixel, so every unprojected point lies on the true surface
and the remaining pipeline error is pure discretisation.  All primitive
volumes have closed forms, which makes the generator a numeric oracle for the
volume and intake pipeline.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .core import (
    HYPER_CATEGORIES,
    PACKAGED_CONTAINER,
    CameraIntrinsics,
    DailyMenu,
    DepthImage,
    LabelMap,
    NutrientVector,
    Recipe,
    Taxonomy,
    ValidationError,
    item_extraction,
    assign_plate_types,
    save_recipes,
)
from .geometry import Plane, PlateModel, save_plate_models


class SceneSpecError(ValueError):
    """Invalid scene geometry or consumption fractions."""


# ---------------------------------------------------------------------------
# scene description


@dataclass(frozen=True)
class FoodBlob:
    """One food primitive on a plate, in tray-plane coordinates."""

    category_id: str
    shape: str  # box | cap | bump | fill
    params: dict
    offset_xy: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.shape not in ("box", "cap", "bump", "fill"):
            raise SceneSpecError(f"unknown food shape {self.shape!r}")


@dataclass(frozen=True)
class PlatePlacement:
    plate_type: int
    center_xy: tuple
    model: PlateModel
    food: FoodBlob | None = None
    container_category: str | None = None  # contents of a packaged container
    container_height_mm: float = 25.0


@dataclass(frozen=True)
class SceneSpec:
    intrinsics: CameraIntrinsics
    tray_distance_mm: float
    tray_tilt_deg: tuple  # rotation about camera x and y axes
    plates: tuple
    noise_sigma_mm: float = 0.0
    dropout_rate: float = 0.0

    def __post_init__(self):
        if not 100.0 < self.tray_distance_mm < 2000.0:
            raise SceneSpecError(f"tray distance {self.tray_distance_mm} mm out of range")
        for i, a in enumerate(self.plates):
            for b in self.plates[i + 1 :]:
                gap = np.hypot(
                    a.center_xy[0] - b.center_xy[0], a.center_xy[1] - b.center_xy[1]
                )
                if gap < a.model.rim_radius_mm + b.model.rim_radius_mm:
                    raise SceneSpecError(
                        f"plates of type {a.plate_type} and {b.plate_type} overlap"
                    )

    def tray_plane(self) -> Plane:
        rx, ry = np.radians(self.tray_tilt_deg)
        n = np.array([0.0, 0.0, -1.0])
        rot_x = np.array(
            [[1, 0, 0], [0, np.cos(rx), -np.sin(rx)], [0, np.sin(rx), np.cos(rx)]]
        )
        rot_y = np.array(
            [[np.cos(ry), 0, np.sin(ry)], [0, 1, 0], [-np.sin(ry), 0, np.cos(ry)]]
        )
        n = rot_x @ rot_y @ n
        return Plane.from_normal_point(n, np.array([0.0, 0.0, self.tray_distance_mm]))


# ---------------------------------------------------------------------------
# analytic volumes


def box_volume_ml(length_mm, width_mm, height_mm) -> float:
    return length_mm * width_mm * height_mm / 1000.0


def cap_volume_ml(base_radius_mm, height_mm) -> float:
    a, h = base_radius_mm, height_mm
    return np.pi * h * (3 * a * a + h * h) / 6.0 / 1000.0


def bump_volume_ml(radius_mm, amplitude_mm) -> float:
    # integral of A cos^2(pi r / 2R) over the disk of radius R
    return amplitude_mm * radius_mm**2 * (np.pi / 2.0 - 2.0 / np.pi) / 1000.0


def bowl_sphere_radius(model: PlateModel) -> float:
    R, D = model.rim_radius_mm, model.rim_height_mm
    if D <= 0:
        raise SceneSpecError("fill requires a bowl with positive depth")
    return (R * R + D * D) / (2.0 * D)


def fill_volume_ml(model: PlateModel, level_mm: float) -> float:
    """Liquid volume in a spherical bowl filled to ``level_mm`` above the bottom."""
    rs = bowl_sphere_radius(model)
    L = level_mm
    if not 0.0 <= L <= model.rim_height_mm + 1e-9:
        raise SceneSpecError(f"fill level {L} outside bowl depth {model.rim_height_mm}")
    return np.pi * L * L * (rs - L / 3.0) / 1000.0


def blob_volume_ml(blob: FoodBlob, model: PlateModel) -> float:
    p = blob.params
    if blob.shape == "box":
        return box_volume_ml(p["length_mm"], p["width_mm"], p["height_mm"])
    if blob.shape == "cap":
        return cap_volume_ml(p["base_radius_mm"], p["height_mm"])
    if blob.shape == "bump":
        return bump_volume_ml(p["radius_mm"], p["amplitude_mm"])
    return fill_volume_ml(model, p["level_mm"])


def scale_blob_to_volume(blob: FoodBlob, model: PlateModel, target_ml: float) -> FoodBlob:
    """Shrink a blob's height parameter so its analytic volume hits the target."""
    p = dict(blob.params)
    if blob.shape == "box":
        v0 = box_volume_ml(p["length_mm"], p["width_mm"], p["height_mm"])
        p["height_mm"] = p["height_mm"] * target_ml / v0
    elif blob.shape == "bump":
        v0 = bump_volume_ml(p["radius_mm"], p["amplitude_mm"])
        p["amplitude_mm"] = p["amplitude_mm"] * target_ml / v0
    elif blob.shape == "cap":
        a = p["base_radius_mm"]
        h0 = p["height_mm"]
        p["height_mm"] = brentq(
            lambda h: cap_volume_ml(a, h) - target_ml, 1e-9, h0, xtol=1e-12
        )
    else:  # fill
        l0 = p["level_mm"]
        p["level_mm"] = brentq(
            lambda L: fill_volume_ml(model, L) - target_ml, 1e-9, l0, xtol=1e-12
        )
    return replace(blob, params=p)


# ---------------------------------------------------------------------------
# rendering


_SRC_TRAY = 0
_SRC_BOWL = 1
_SRC_FOOD = 2
_SRC_CONTAINER = 3


def _plate_bbox(spec: SceneSpec, plane: Plane, placement: PlatePlacement):
    """Padded pixel bounding box of a plate (including any food on it)."""
    e1, e2 = plane.basis()
    origin = plane.origin()
    cx, cy = placement.center_xy
    R = placement.model.rim_radius_mm
    top = placement.container_height_mm if placement.plate_type == PACKAGED_CONTAINER else 0.0
    if placement.food is not None:
        p = placement.food.params
        top = max(
            top,
            p.get("height_mm", 0.0),
            p.get("amplitude_mm", 0.0),
            p.get("level_mm", 0.0),
        )
    theta = np.linspace(0.0, 2 * np.pi, 65)
    pts = []
    for eta in (0.0, top + placement.model.rim_height_mm):
        ring = (
            origin
            + np.outer(cx + R * np.cos(theta), e1)
            + np.outer(cy + R * np.sin(theta), e2)
            + eta * plane.normal
        )
        pts.append(ring)
    pts = np.concatenate(pts)
    intr = spec.intrinsics
    us = pts[:, 0] * intr.fx / pts[:, 2] + intr.cx
    vs = pts[:, 1] * intr.fy / pts[:, 2] + intr.cy
    pad = 3
    c0 = max(int(np.floor(us.min())) - pad, 0)
    c1 = min(int(np.ceil(us.max())) + pad, intr.width - 1)
    r0 = max(int(np.floor(vs.min())) - pad, 0)
    r1 = min(int(np.ceil(vs.max())) + pad, intr.height - 1)
    if c0 > c1 or r0 > r1:
        raise SceneSpecError(f"plate type {placement.plate_type} projects outside the raster")
    return r0, r1, c0, c1


def _render_plate(spec, plane, placement, dirs, t_tray, ndot):
    """Candidate first-hit distances for one plate's surfaces on a subgrid.

    ``dirs`` is (H', W', 3) ray directions, ``t_tray`` the tray hit distance
    and ``ndot`` = normal . dir.  Returns (t, src) arrays; src uses the _SRC_*
    codes with invalid pixels marked by t = +inf.
    """
    e1, e2 = plane.basis()
    origin = plane.origin()
    n = plane.normal
    d = plane.d
    cx, cy = placement.center_xy
    model = placement.model
    R = model.rim_radius_mm
    cand_t = [np.full(t_tray.shape, np.inf)]
    cand_src = [np.full(t_tray.shape, _SRC_TRAY, dtype=np.int8)]
    cand_t[0][:] = t_tray  # tray is always a valid fallback

    center3 = origin + cx * e1 + cy * e2

    def footprint(t):
        pts = dirs * t[..., None]
        rel = pts - origin
        return rel @ e1, rel @ e2

    def horizontal_plane_t(eta):
        # plane of constant height eta above the tray: n.p + d = eta
        return (eta - d) / ndot

    if placement.plate_type == PACKAGED_CONTAINER:
        t = horizontal_plane_t(placement.container_height_mm)
        x, y = footprint(t)
        r = np.hypot(x - cx, y - cy)
        valid = (r <= R) & (t > 0)
        t = np.where(valid, t, np.inf)
        cand_t.append(t)
        cand_src.append(np.full(t.shape, _SRC_CONTAINER, dtype=np.int8))
    elif model.rim_height_mm > 0:  # bowl interior: lower cap of a sphere
        rs = bowl_sphere_radius(model)
        sc = center3 + rs * n
        b = -2.0 * (dirs @ sc)
        a = np.einsum("...i,...i->...", dirs, dirs)
        c = sc @ sc - rs * rs
        disc = b * b - 4 * a * c
        with np.errstate(invalid="ignore"):
            sqrt_disc = np.sqrt(np.maximum(disc, 0.0))
            t = (-b + sqrt_disc) / (2 * a)  # far root = interior surface
        pts = dirs * t[..., None]
        eta = pts @ n + d
        x, y = footprint(t)
        r = np.hypot(x - cx, y - cy)
        valid = (disc >= 0) & (r <= R + 1e-9) & (eta <= model.rim_height_mm + 1e-9) & (t > 0)
        cand_t.append(np.where(valid, t, np.inf))
        cand_src.append(np.full(t.shape, _SRC_BOWL, dtype=np.int8))

    blob = placement.food
    if blob is not None:
        bx = cx + blob.offset_xy[0]
        by = cy + blob.offset_xy[1]
        p = blob.params
        if blob.shape == "box":
            t = horizontal_plane_t(p["height_mm"])
            x, y = footprint(t)
            ang = np.radians(p.get("angle_deg", 0.0))
            u = (x - bx) * np.cos(ang) + (y - by) * np.sin(ang)
            v = (y - by) * np.cos(ang) - (x - bx) * np.sin(ang)
            valid = (
                (np.abs(u) <= p["length_mm"] / 2.0)
                & (np.abs(v) <= p["width_mm"] / 2.0)
                & (t > 0)
            )
            cand_t.append(np.where(valid, t, np.inf))
            cand_src.append(np.full(t.shape, _SRC_FOOD, dtype=np.int8))
        elif blob.shape == "cap":
            a_r, h = p["base_radius_mm"], p["height_mm"]
            rc = (a_r * a_r + h * h) / (2.0 * h)
            sc = origin + bx * e1 + by * e2 + (h - rc) * n
            b2 = -2.0 * (dirs @ sc)
            a2 = np.einsum("...i,...i->...", dirs, dirs)
            c2 = sc @ sc - rc * rc
            disc = b2 * b2 - 4 * a2 * c2
            with np.errstate(invalid="ignore"):
                sqrt_disc = np.sqrt(np.maximum(disc, 0.0))
                t = (-b2 - sqrt_disc) / (2 * a2)  # near root = upper cap
            pts = dirs * t[..., None]
            eta = pts @ n + d
            valid = (disc >= 0) & (eta >= -1e-9) & (t > 0)
            cand_t.append(np.where(valid, t, np.inf))
            cand_src.append(np.full(t.shape, _SRC_FOOD, dtype=np.int8))
        elif blob.shape == "bump":
            Rb, A = p["radius_mm"], p["amplitude_mm"]

            def height_at(t):
                x, y = footprint(t)
                r = np.hypot(x - bx, y - by)
                h = A * np.cos(np.pi * np.minimum(r, Rb) / (2.0 * Rb)) ** 2
                return np.where(r < Rb, h, 0.0)

            lo = np.full(t_tray.shape, horizontal_plane_t(A + 1.0))
            hi = np.full(t_tray.shape, horizontal_plane_t(-1.0))
            for _ in range(52):
                mid = 0.5 * (lo + hi)
                eta = mid * ndot + d
                above = eta > height_at(mid)
                lo = np.where(above, mid, lo)
                hi = np.where(above, hi, mid)
            t = 0.5 * (lo + hi)
            valid = height_at(t) > 1e-9
            cand_t.append(np.where(valid, t, np.inf))
            cand_src.append(np.full(t.shape, _SRC_FOOD, dtype=np.int8))
        else:  # fill
            L = p["level_mm"]
            rs = bowl_sphere_radius(model)
            r_level = np.sqrt(max(2.0 * rs * L - L * L, 0.0))
            t = horizontal_plane_t(L)
            x, y = footprint(t)
            r = np.hypot(x - cx, y - cy)
            valid = (r <= r_level) & (t > 0)
            cand_t.append(np.where(valid, t, np.inf))
            cand_src.append(np.full(t.shape, _SRC_FOOD, dtype=np.int8))

    stack_t = np.stack(cand_t)
    stack_src = np.stack(cand_src)
    winner = stack_t.argmin(axis=0)
    take = np.indices(t_tray.shape)
    t_best = stack_t[winner, take[0], take[1]]
    src_best = stack_src[winner, take[0], take[1]]
    return t_best, src_best


@dataclass(frozen=True)
class ItemTruth:
    category_id: str
    hyper: int
    plate_type: int
    volume_ml: float | None  # None for packaged containers
    weight_g: float
    nutrients: NutrientVector


@dataclass(frozen=True)
class GroundTruth:
    items: tuple
    totals: NutrientVector


def _truth_for_scene(spec: SceneSpec, taxonomy: Taxonomy, recipes: dict) -> GroundTruth:
    items = []
    totals = NutrientVector()
    for placement in spec.plates:
        if placement.plate_type == PACKAGED_CONTAINER:
            cat = placement.container_category
            recipe = recipes[cat]
            weight = recipe.portion_g
            volume = None
        elif placement.food is not None:
            cat = placement.food.category_id
            recipe = recipes[cat]
            volume = blob_volume_ml(placement.food, placement.model)
            weight = recipe.density_g_per_ml * volume
        else:
            continue
        nutrients = recipe.per_100g.scaled(weight / 100.0)
        items.append(
            ItemTruth(
                category_id=cat,
                hyper=taxonomy.hyper_of(cat),
                plate_type=placement.plate_type,
                volume_ml=volume,
                weight_g=weight,
                nutrients=nutrients,
            )
        )
        totals = totals + nutrients
    return GroundTruth(items=tuple(items), totals=totals)


def generate(spec: SceneSpec, seed: int, taxonomy: Taxonomy | None = None,
             recipes: dict | None = None):
    """Render one scene.

    Returns (DepthImage, food LabelMap, plate LabelMap, GroundTruth); the
    ground truth carries analytic per-item volumes (and weights/nutrients when
    recipes are supplied).  Deterministic per (spec, seed).
    """
    intr = spec.intrinsics
    plane = spec.tray_plane()
    n, d = plane.normal, plane.d
    h, w = intr.height, intr.width

    cols, rows = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    dirs_full = np.stack(
        [(cols - intr.cx) / intr.fx, (rows - intr.cy) / intr.fy, np.ones_like(cols)],
        axis=-1,
    )
    ndot_full = dirs_full @ n
    t_full = -d / ndot_full
    src_full = np.zeros((h, w), dtype=np.int8)
    plate_idx_full = np.full((h, w), -1, dtype=np.int16)

    for idx, placement in enumerate(spec.plates):
        r0, r1, c0, c1 = _plate_bbox(spec, plane, placement)
        sub = (slice(r0, r1 + 1), slice(c0, c1 + 1))
        t_best, src_best = _render_plate(
            spec, plane, placement, dirs_full[sub], t_full[sub], ndot_full[sub]
        )
        closer = t_best < t_full[sub] - 1e-12
        hit = closer | (src_best != _SRC_TRAY)
        t_full[sub] = np.where(hit, t_best, t_full[sub])
        src_full[sub] = np.where(hit, src_best, src_full[sub])
        plate_idx_full[sub] = np.where(hit & (src_best != _SRC_TRAY), idx, plate_idx_full[sub])

    # label maps: food from winning surface, plates from full rim footprints
    food = np.zeros((h, w), dtype=np.uint8)
    plate = np.zeros((h, w), dtype=np.uint8)
    e1, e2 = plane.basis()
    origin = plane.origin()
    hits = dirs_full * t_full[..., None]
    x = (hits - origin) @ e1
    y = (hits - origin) @ e2
    tax = taxonomy
    for idx, placement in enumerate(spec.plates):
        r = np.hypot(x - placement.center_xy[0], y - placement.center_xy[1])
        plate[r <= placement.model.rim_radius_mm] = placement.plate_type
        owned = plate_idx_full == idx
        if placement.plate_type == PACKAGED_CONTAINER and placement.container_category:
            hyper = (
                tax.hyper_of(placement.container_category)
                if tax
                else HYPER_CATEGORIES.index("sauce") + 1
            )
            food[owned & (src_full == _SRC_CONTAINER)] = hyper
        if placement.food is not None:
            hyper = (
                tax.hyper_of(placement.food.category_id)
                if tax
                else HYPER_CATEGORIES.index("main_course") + 1
            )
            food[owned & (src_full == _SRC_FOOD)] = hyper

    depth = t_full.copy()  # ray parameterised by z, so depth = t
    rng = np.random.default_rng(seed)
    if spec.noise_sigma_mm > 0:
        depth = depth + rng.normal(0.0, spec.noise_sigma_mm, size=depth.shape)
    depth = np.round(depth)
    if spec.dropout_rate > 0:
        drop = rng.random(size=depth.shape) < spec.dropout_rate
        depth[drop] = 0.0
    depth = np.clip(depth, 0.0, 65535.0)

    truth = (
        _truth_for_scene(spec, taxonomy, recipes)
        if taxonomy is not None and recipes is not None
        else _truth_for_scene_volumes_only(spec)
    )
    return (
        DepthImage(depth),
        LabelMap(food, "food"),
        LabelMap(plate, "plate"),
        truth,
    )


def _truth_for_scene_volumes_only(spec: SceneSpec) -> GroundTruth:
    items = []
    for placement in spec.plates:
        if placement.plate_type == PACKAGED_CONTAINER:
            items.append(
                ItemTruth(
                    category_id=placement.container_category or "",
                    hyper=HYPER_CATEGORIES.index("sauce") + 1,
                    plate_type=placement.plate_type,
                    volume_ml=None,
                    weight_g=0.0,
                    nutrients=NutrientVector(),
                )
            )
        elif placement.food is not None:
            items.append(
                ItemTruth(
                    category_id=placement.food.category_id,
                    hyper=HYPER_CATEGORIES.index("main_course") + 1,
                    plate_type=placement.plate_type,
                    volume_ml=blob_volume_ml(placement.food, placement.model),
                    weight_g=0.0,
                    nutrients=NutrientVector(),
                )
            )
    return GroundTruth(items=tuple(items), totals=NutrientVector())


# ---------------------------------------------------------------------------
# meal pairs


def after_spec(spec: SceneSpec, fractions: dict) -> SceneSpec:
    """Scale each plate's food so the after volume is (1-f) of the before one.

    ``fractions`` maps plate index -> consumed fraction in [0, 1]; a fraction
    of 1 removes the item entirely.  Containers are left unchanged (their
    contents are invisible to the depth sensor).
    """
    plates = []
    for idx, placement in enumerate(spec.plates):
        f = fractions.get(idx, 0.0)
        if not 0.0 <= f <= 1.0:
            raise SceneSpecError(f"fraction {f} for plate {idx} outside [0, 1]")
        if placement.food is None or f == 0.0:
            plates.append(placement)
            continue
        if f == 1.0:
            plates.append(replace(placement, food=None))
            continue
        v0 = blob_volume_ml(placement.food, placement.model)
        blob = scale_blob_to_volume(placement.food, placement.model, (1.0 - f) * v0)
        plates.append(replace(placement, food=blob))
    return replace(spec, plates=tuple(plates))


def consumed_truth(
    spec: SceneSpec,
    fractions: dict,
    taxonomy: Taxonomy,
    recipes: dict,
    container_links: dict | None = None,
) -> GroundTruth:
    """Analytic consumed volumes/weights/nutrients for a before/after pair.

    Containers consume ``linked fraction x portion weight``; the linked hyper
    category defaults to the salad-drives-sauce rule.
    """
    from .nutrition import DEFAULT_CONTAINER_LINKS

    links = DEFAULT_CONTAINER_LINKS if container_links is None else container_links
    fraction_by_hyper = {}
    for idx, placement in enumerate(spec.plates):
        if placement.food is not None and placement.plate_type != PACKAGED_CONTAINER:
            hyper = taxonomy.hyper_of(placement.food.category_id)
            fraction_by_hyper[hyper] = fractions.get(idx, 0.0)

    items = []
    totals = NutrientVector()
    for idx, placement in enumerate(spec.plates):
        if placement.plate_type == PACKAGED_CONTAINER:
            cat = placement.container_category
            recipe = recipes[cat]
            linked = links.get(taxonomy.hyper_of(cat))
            frac = fraction_by_hyper.get(linked, 0.5)
            weight = frac * recipe.portion_g
            volume = None
        elif placement.food is not None:
            cat = placement.food.category_id
            recipe = recipes[cat]
            volume = fractions.get(idx, 0.0) * blob_volume_ml(placement.food, placement.model)
            weight = recipe.density_g_per_ml * volume
        else:
            continue
        nutrients = recipe.per_100g.scaled(weight / 100.0)
        items.append(
            ItemTruth(
                category_id=cat,
                hyper=taxonomy.hyper_of(cat),
                plate_type=placement.plate_type,
                volume_ml=volume,
                weight_g=weight,
                nutrients=nutrients,
            )
        )
        totals = totals + nutrients
    return GroundTruth(items=tuple(items), totals=totals)


def generate_meal_pair(spec: SceneSpec, fractions: dict, seed: int,
                       taxonomy: Taxonomy, recipes: dict):
    """Render the before/after pair plus the analytic consumed ground truth."""
    before = generate(spec, (seed, 0), taxonomy, recipes)
    spec_after = after_spec(spec, fractions)
    after = generate(spec_after, (seed, 1), taxonomy, recipes)
    truth = consumed_truth(spec, fractions, taxonomy, recipes)
    return before, after, truth


# ---------------------------------------------------------------------------
# dataset generation


@dataclass(frozen=True)
class DatasetConfig:
    """Knobs for synthetic dataset generation."""

    n_meals: int = 10
    categories_per_hyper: int = 12
    menu_size: int = 7
    feature_dim: int = 27
    feature_sigma: float = 0.15  # raw-feature noise around each category centre
    noise_sigma_mm: float = 0.0
    dropout_rate: float = 0.0
    tilt_range_deg: float = 4.0
    distance_range_mm: tuple = (360.0, 480.0)
    # long-tail sample counts per category rank (most categories get few)
    long_tail_base: float = 24.0
    long_tail_exponent: float = 1.3
    min_samples: int = 2
    max_samples: int = 24


def default_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(fx=580.0, fy=580.0, cx=320.0, cy=240.0, width=640, height=480)


def default_plate_models() -> dict:
    return {
        1: PlateModel.flat(1, 60.0),
        2: PlateModel.spherical_bowl(2, 50.0, 22.0),
        3: PlateModel.spherical_bowl(3, 45.0, 28.0),
        4: PlateModel.spherical_bowl(4, 35.0, 18.0),
        5: PlateModel.flat(5, 24.0),
    }


def build_taxonomy(categories_per_hyper: int) -> Taxonomy:
    mapping = {}
    for h, name in enumerate(HYPER_CATEGORIES, start=1):
        for i in range(categories_per_hyper):
            mapping[f"{name}_{i:02d}"] = h
    return Taxonomy(mapping)


def build_recipes(taxonomy: Taxonomy, seed) -> dict:
    rng = np.random.default_rng(seed)
    recipes = {}
    for cat in taxonomy.categories:
        hyper = taxonomy.hyper_of(cat)
        recipes[cat] = Recipe(
            category_id=cat,
            hyper=hyper,
            per_100g=NutrientVector(
                kcal=float(rng.uniform(50.0, 250.0)),
                cho_g=float(rng.uniform(2.0, 30.0)),
                fat_g=float(rng.uniform(1.0, 15.0)),
                protein_g=float(rng.uniform(2.0, 20.0)),
                salt_g=float(rng.uniform(0.1, 2.0)),
                fiber_g=float(rng.uniform(0.2, 5.0)),
            ),
            density_g_per_ml=float(rng.uniform(0.4, 1.2)),
            portion_g=float(rng.uniform(20.0, 40.0)),
        )
    return recipes


class FeatureModel:
    """Raw feature synthesiser: one Gaussian cluster per category.

    Category centres are derived from the dataset seed, so the training set
    and meal-item features share the same geometry.
    """

    def __init__(self, categories, feature_dim: int, seed):
        self.categories = list(categories)
        rng = np.random.default_rng(seed)
        self.centers = {
            cat: rng.normal(0.0, 1.0, size=feature_dim) / np.sqrt(feature_dim)
            for cat in self.categories
        }
        self.feature_dim = feature_dim

    def sample(self, category, sigma: float, rng) -> np.ndarray:
        return self.centers[category] + rng.normal(0.0, sigma, size=self.feature_dim)


def long_tail_counts(n_categories: int, config: DatasetConfig, rng) -> np.ndarray:
    """Per-category sample counts following the configured power-law target.

    Ranks are shuffled so the tail is not correlated with category ids.
    """
    ranks = rng.permutation(n_categories)
    target = config.long_tail_base / (1.0 + ranks.astype(float)) ** config.long_tail_exponent
    return np.clip(np.round(target), config.min_samples, config.max_samples).astype(int)


def build_training_features(
    taxonomy: Taxonomy, model: FeatureModel, config: DatasetConfig, seed
):
    """Long-tailed per-category raw feature samples for episodic training.

    Returns (dataset dict category -> (N, F) array, per-category counts).
    """
    rng = np.random.default_rng(seed)
    cats = taxonomy.categories
    counts = long_tail_counts(len(cats), config, rng)
    dataset = {}
    for cat, count in zip(cats, counts):
        dataset[cat] = np.stack(
            [model.sample(cat, config.feature_sigma, rng) for _ in range(count)]
        )
    return dataset, dict(zip(cats, (int(c) for c in counts)))


def _main_course_blob(rng, category: str) -> FoodBlob:
    shape = rng.choice(["box", "cap", "bump"])
    if shape == "box":
        params = {
            "length_mm": float(rng.uniform(55.0, 70.0)),
            "width_mm": float(rng.uniform(55.0, 70.0)),
            "height_mm": float(rng.uniform(15.0, 28.0)),
            "angle_deg": float(rng.uniform(0.0, 90.0)),
        }
    elif shape == "cap":
        params = {
            "base_radius_mm": float(rng.uniform(35.0, 48.0)),
            "height_mm": float(rng.uniform(15.0, 28.0)),
        }
    else:
        params = {
            "radius_mm": float(rng.uniform(40.0, 55.0)),
            "amplitude_mm": float(rng.uniform(15.0, 28.0)),
        }
    return FoodBlob(category_id=category, shape=str(shape), params=params)


def build_meal_spec(
    taxonomy: Taxonomy,
    menu_categories: dict,
    plate_models: dict,
    config: DatasetConfig,
    rng,
    intrinsics: CameraIntrinsics | None = None,
):
    """One tray: main course, soup, salad and a sauce container, with jittered
    plate positions and randomized food dimensions.

    ``menu_categories`` maps hyper index -> the category actually served.
    Returns (SceneSpec, fractions dict).
    """
    intr = intrinsics or default_intrinsics()

    def jitter():
        return rng.uniform(-5.0, 5.0)

    hyper = {name: i + 1 for i, name in enumerate(HYPER_CATEGORIES)}
    plates = [
        PlatePlacement(
            plate_type=1,
            center_xy=(-50.0 + jitter(), -90.0 + jitter()),
            model=plate_models[1],
            food=_main_course_blob(rng, menu_categories[hyper["main_course"]]),
        ),
        PlatePlacement(
            plate_type=3,
            center_xy=(-70.0 + jitter(), 30.0 + jitter()),
            model=plate_models[3],
            food=FoodBlob(
                category_id=menu_categories[hyper["soup"]],
                shape="fill",
                params={
                    "level_mm": float(
                        rng.uniform(0.45, 0.85) * plate_models[3].rim_height_mm
                    )
                },
            ),
        ),
        PlatePlacement(
            plate_type=2,
            center_xy=(42.0 + jitter(), 35.0 + jitter()),
            model=plate_models[2],
            food=FoodBlob(
                category_id=menu_categories[hyper["salad"]],
                shape="fill",
                params={
                    "level_mm": float(
                        rng.uniform(0.45, 0.85) * plate_models[2].rim_height_mm
                    )
                },
            ),
        ),
        PlatePlacement(
            plate_type=5,
            center_xy=(45.0 + jitter(), 128.0 + jitter()),
            model=plate_models[5],
            container_category=menu_categories[hyper["sauce"]],
        ),
    ]
    if hyper["dessert"] in menu_categories:
        plates.append(
            PlatePlacement(
                plate_type=4,
                center_xy=(-45.0 + jitter(), 125.0 + jitter()),
                model=plate_models[4],
                food=FoodBlob(
                    category_id=menu_categories[hyper["dessert"]],
                    shape="fill",
                    params={
                        "level_mm": float(
                            rng.uniform(0.45, 0.85) * plate_models[4].rim_height_mm
                        )
                    },
                ),
            )
        )

    spec = SceneSpec(
        intrinsics=intr,
        tray_distance_mm=float(rng.uniform(*config.distance_range_mm)),
        tray_tilt_deg=(
            float(rng.uniform(-config.tilt_range_deg, config.tilt_range_deg)),
            float(rng.uniform(-config.tilt_range_deg, config.tilt_range_deg)),
        ),
        plates=tuple(plates),
        noise_sigma_mm=config.noise_sigma_mm,
        dropout_rate=config.dropout_rate,
    )
    fractions = {}
    salad_fraction = None
    for idx, placement in enumerate(spec.plates):
        if placement.plate_type == PACKAGED_CONTAINER:
            continue
        f = float(rng.uniform(0.25, 1.0))
        if f > 0.93:
            f = 1.0  # occasionally eaten completely
        fractions[idx] = f
        if placement.food is not None and taxonomy.hyper_of(placement.food.category_id) == hyper["salad"]:
            salad_fraction = f
    return spec, fractions, salad_fraction


def _write_features_csv(path, rows):
    import csv

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        for row in rows:
            writer.writerow(row)


def _truth_to_json(truth: GroundTruth) -> dict:
    return {
        "items": [
            {
                "category_id": it.category_id,
                "hyper": it.hyper,
                "plate_type": it.plate_type,
                "volume_ml": it.volume_ml,
                "weight_g": it.weight_g,
                "nutrients": it.nutrients.as_dict(),
            }
            for it in truth.items
        ],
        "totals": truth.totals.as_dict(),
    }


def truth_from_json(data: dict) -> GroundTruth:
    items = tuple(
        ItemTruth(
            category_id=d["category_id"],
            hyper=d["hyper"],
            plate_type=d["plate_type"],
            volume_ml=d["volume_ml"],
            weight_g=d["weight_g"],
            nutrients=NutrientVector(**d["nutrients"]),
        )
        for d in data["items"]
    )
    return GroundTruth(items=items, totals=NutrientVector(**data["totals"]))


def generate_dataset(
    out_dir,
    seed: int,
    config: DatasetConfig = DatasetConfig(),
) -> dict:
    """Write a full synthetic dataset and return its manifest.

    Layout under ``out_dir``: intrinsics/recipes/plate-model files, training
    feature CSV, per-meal menu JSON, before/after rasters, per-meal ground
    truth and per-item raw feature CSV, plus manifest.json indexing it all.
    Byte-identical for identical (seed, config).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    taxonomy = build_taxonomy(config.categories_per_hyper)
    recipes = build_recipes(taxonomy, (seed, 100))
    plate_models = default_plate_models()
    intrinsics = default_intrinsics()
    feature_model = FeatureModel(taxonomy.categories, config.feature_dim, (seed, 101))
    train_set, counts = build_training_features(taxonomy, feature_model, config, (seed, 102))

    intrinsics.save(out_dir / "intrinsics.json")
    save_recipes(recipes, out_dir / "recipes.csv")
    save_plate_models(plate_models, out_dir / "plate_models.json")
    (out_dir / "taxonomy.json").write_text(
        json.dumps(taxonomy.fine_to_hyper, sort_keys=True, indent=2) + "\n"
    )

    train_rows = []
    for cat in taxonomy.categories:
        for k, vec in enumerate(train_set[cat]):
            train_rows.append([f"train/{cat}/{k}", cat] + [repr(float(v)) for v in vec])
    _write_features_csv(out_dir / "features_train.csv", train_rows)

    hyper_count = len(HYPER_CATEGORIES)
    meals = []
    item_rows = []
    rng = np.random.default_rng((seed, 103))
    for meal_idx in range(config.n_meals):
        meal_id = f"meal_{meal_idx:03d}"
        meal_dir = out_dir / meal_id

        # choose the served category per hyper and a menu around it
        served = {}
        menu = {}
        for h in range(1, hyper_count + 1):
            pool = taxonomy.categories_of(h)
            served[h] = pool[int(rng.integers(len(pool)))]
            distractors = [c for c in pool if c != served[h]]
            pick = rng.permutation(len(distractors))[: config.menu_size - 1]
            menu[h] = tuple(sorted([served[h]] + [distractors[i] for i in pick]))
        DailyMenu(menu).save(meal_dir / "menu.json")

        spec, fractions, _ = build_meal_spec(
            taxonomy, served, plate_models, config, rng, intrinsics
        )
        before, after, truth = generate_meal_pair(
            spec, fractions, seed=int(rng.integers(2**31)), taxonomy=taxonomy, recipes=recipes
        )

        stages = {}
        for stage, (depth, food, plate, scene_truth) in (
            ("before", before),
            ("after", after),
        ):
            depth.save(meal_dir / f"{stage}_depth.png")
            food.save(meal_dir / f"{stage}_food.png")
            plate.save(meal_dir / f"{stage}_plate.png")
            stages[stage] = {
                "depth": f"{meal_id}/{stage}_depth.png",
                "food": f"{meal_id}/{stage}_food.png",
                "plate": f"{meal_id}/{stage}_plate.png",
            }
            # per-item raw features, aligned with item_extraction ordering
            items = item_extraction(food)
            assign_plate_types(items, plate)
            truth_by_key = {(t.hyper, t.plate_type): t for t in scene_truth.items}
            for k, item in enumerate(items):
                t = truth_by_key.get((item.hyper, item.plate_type))
                if t is None:
                    continue
                vec = feature_model.sample(t.category_id, config.feature_sigma, rng)
                item_rows.append(
                    [f"{meal_id}/{stage}/{k}", t.category_id] + [repr(float(v)) for v in vec]
                )

        (meal_dir / "truth.json").write_text(
            json.dumps(_truth_to_json(truth), sort_keys=True, indent=2) + "\n"
        )
        (meal_dir / "scene_truth_before.json").write_text(
            json.dumps(_truth_to_json(before[3]), sort_keys=True, indent=2) + "\n"
        )
        meals.append(
            {
                "meal_id": meal_id,
                "stages": stages,
                "menu": f"{meal_id}/menu.json",
                "truth": f"{meal_id}/truth.json",
            }
        )

    _write_features_csv(out_dir / "features_items.csv", item_rows)

    manifest = {
        "seed": seed,
        "config": {
            "n_meals": config.n_meals,
            "categories_per_hyper": config.categories_per_hyper,
            "menu_size": config.menu_size,
            "feature_dim": config.feature_dim,
            "feature_sigma": config.feature_sigma,
            "noise_sigma_mm": config.noise_sigma_mm,
            "dropout_rate": config.dropout_rate,
        },
        "intrinsics": "intrinsics.json",
        "recipes": "recipes.csv",
        "plate_models": "plate_models.json",
        "taxonomy": "taxonomy.json",
        "features_train": "features_train.csv",
        "features_items": "features_items.csv",
        "category_counts": counts,
        "meals": meals,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    )
    return manifest


def load_manifest(path) -> tuple:
    """Read a dataset manifest; returns (manifest dict, base directory)."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    return json.loads(path.read_text()), path.parent


def read_labeled_features(path):
    """Read a feature CSV with rows sample_id, category_id, v_0...

    Returns (dict sample_id -> vector, dict sample_id -> category).
    """
    import csv

    vectors, labels = {}, {}
    with Path(path).open(newline="") as fh:
        for row in csv.reader(fh):
            vectors[row[0]] = np.array([float(v) for v in row[2:]])
            labels[row[0]] = row[1]
    return vectors, labels


def training_dataset_from_features(vectors: dict, labels: dict) -> dict:
    """Group labelled feature vectors into the episodic training layout."""
    grouped = {}
    for sample_id in sorted(vectors):
        grouped.setdefault(labels[sample_id], []).append(vectors[sample_id])
    return {cat: np.stack(vecs) for cat, vecs in grouped.items()}
