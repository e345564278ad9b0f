"""End-to-end meal processing: tray-plane fit, per-item volume estimation,
few-shot recognition, before/after matching and nutrient intake reports.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import geometry, nutrition, protonet, synthscene
from .core import (
    EIGHT_CONNECTED,
    MAX_INVALID_FRACTION,
    PACKAGED_CONTAINER,
    CameraIntrinsics,
    DailyMenu,
    MealRecord,
    Taxonomy,
    fill_region_depth,
    load_scene,
)


class PipelineError(RuntimeError):
    """A meal could not be processed; the message names the failing stage."""


@dataclass
class PipelineConfig:
    ransac_seed: int = 1234
    ransac_iterations: int = 1000
    ransac_threshold_mm: float = 3.0
    ransac_max_points: int = 3000
    use_menu: bool = True
    oracle_recognition: bool = False
    min_item_area: int = 200


def _plate_components(record: MealRecord):
    """Connected components of the plate label map.

    Returns (component-id raster, dict id -> (plate type, pixel region)).
    """
    vals = record.plate_labels.values
    comp_map = np.zeros(vals.shape, dtype=np.int32)
    regions = {}
    next_id = 1
    for plate_type in range(1, 6):
        labeled, n = ndimage.label(vals == plate_type, structure=EIGHT_CONNECTED)
        for comp in range(1, n + 1):
            mask = labeled == comp
            comp_map[mask] = next_id
            rows, cols = np.nonzero(mask)
            regions[next_id] = (plate_type, np.column_stack([rows, cols]))
            next_id += 1
    return comp_map, regions


def _item_plate_region(item, comp_map, regions):
    """Pixel region of the plate component underneath an item."""
    ids = comp_map[item.region[:, 0], item.region[:, 1]]
    ids = ids[ids > 0]
    if ids.size == 0:
        return None
    comp_id = int(np.bincount(ids).argmax())
    return regions[comp_id][1]


def _edge_strip_ml(record, item, depths, plane, surface, mesh) -> float:
    """Volume of the footprint strip the triangulation misses at the boundary.

    The mesh covers the hull of the pixel centres, while the pixel count times
    the per-pixel footprint (z^2 / (fx fy |n.d|) on a plane with normal n for
    the ray direction d) is an unbiased estimate of the true footprint area.
    The area deficit times the mean boundary height recovers the rim strip a
    wall-sided item (a cube of bread, say) loses there -- a systematic ~2%
    underestimate -- and vanishes for foods that taper to zero at the edge.
    """
    intr = record.intrinsics
    rays = np.column_stack([
        (item.region[:, 1] - intr.cx) / intr.fx,
        (item.region[:, 0] - intr.cy) / intr.fy,
        np.ones(len(item.region)),
    ])
    footprints = depths**2 / (intr.fx * intr.fy * np.abs(rays @ plane.normal))
    xyh = plane.to_plane_coords(mesh.vertices)
    tri = mesh.triangles
    edges1 = xyh[tri[:, 1], :2] - xyh[tri[:, 0], :2]
    edges2 = xyh[tri[:, 2], :2] - xyh[tri[:, 0], :2]
    cross = edges1[:, 0] * edges2[:, 1] - edges1[:, 1] * edges2[:, 0]
    mesh_area = 0.5 * np.abs(cross).sum()
    missing = float(footprints.sum() - mesh_area)
    if missing <= 0.0:
        return 0.0
    mask = np.zeros(record.food_labels.shape, dtype=bool)
    mask[item.region[:, 0], item.region[:, 1]] = True
    interior = ndimage.binary_erosion(mask, structure=EIGHT_CONNECTED)
    on_edge = ~interior[item.region[:, 0], item.region[:, 1]]
    if not on_edge.any():
        return 0.0
    heights = np.maximum(
        xyh[on_edge, 2] - surface.height_above_tray(xyh[on_edge, :2]), 0.0
    )
    return missing * float(heights.mean()) / 1000.0


def fit_record_plane(record: MealRecord, config: PipelineConfig) -> geometry.Plane:
    """RANSAC tray plane from the background (non-food, non-plate) pixels."""
    rows, cols = np.nonzero(record.background_mask & record.depth.valid_mask)
    region = np.column_stack([rows, cols])
    cloud = geometry.unproject(record.depth, record.intrinsics, region)
    return geometry.fit_tray_plane(
        cloud,
        seed=config.ransac_seed,
        iterations=config.ransac_iterations,
        inlier_threshold_mm=config.ransac_threshold_mm,
        max_points=config.ransac_max_points,
    )


def estimate_item_volumes(
    record: MealRecord,
    plate_models: dict,
    config: PipelineConfig,
    plane: geometry.Plane | None = None,
):
    """Fill in volume_ml/usable for every non-container item of a record.

    Returns the tray plane (fitted here unless supplied) so before/after runs
    can share centroid projections.
    """
    if plane is None:
        plane = fit_record_plane(record, config)
    comp_map, regions = _plate_components(record)
    for item in record.items:
        if item.plate_type == PACKAGED_CONTAINER:
            continue
        depths, invalid_frac = fill_region_depth(record.depth, item.region)
        if invalid_frac > MAX_INVALID_FRACTION:
            item.usable = False
            continue
        cloud = geometry.unproject(record.depth, record.intrinsics, item.region, depths_mm=depths)
        mesh = geometry.triangulate_surface(cloud, plane)
        plate_region = _item_plate_region(item, comp_map, regions)
        if plate_region is None or item.plate_type not in plate_models:
            item.usable = False
            continue
        plate_depths, plate_invalid = fill_region_depth(record.depth, plate_region)
        try:
            surface = geometry.place_plate(
                plate_models[item.plate_type],
                plate_region,
                record.depth,
                record.intrinsics,
                plane,
                depths_mm=plate_depths,
            )
            item.volume_ml = geometry.food_volume(mesh, surface, plane)
            item.volume_ml += _edge_strip_ml(record, item, depths, plane, surface, mesh)
        except geometry.GeometryError:
            item.usable = False
    return plane


def recognize_items(
    record: MealRecord,
    meal_id: str,
    stage: str,
    features: dict,
    provider,
    prototypes: protonet.PrototypeSet,
    taxonomy: Taxonomy,
    menu: DailyMenu | None,
):
    """Assign fine-grained categories via nearest-prototype prediction.

    Features are looked up by the deterministic sample id
    ``meal_id/stage/item_index`` (items in extraction order).
    """
    for k, item in enumerate(record.items):
        sample_id = f"{meal_id}/{stage}/{k}"
        raw = features.get(sample_id)
        if raw is None:
            item.category_id = None
            continue
        emb = provider.embed(raw)
        item.category_id = protonet.predict(emb, prototypes, item.hyper, taxonomy, menu)


def _tray_centroids(record: MealRecord, plane: geometry.Plane, intrinsics: CameraIntrinsics):
    """Tray-plane centroid per item (keyed by id) for before/after matching."""
    centroids = {}
    for item in record.items:
        depths, _ = fill_region_depth(record.depth, item.region)
        valid = depths > 0
        if not valid.any():
            continue
        cloud = geometry.unproject(
            record.depth, intrinsics, item.region[valid], depths_mm=depths[valid]
        )
        xy = plane.to_plane_coords(cloud.points)[:, :2]
        centroids[id(item)] = xy.mean(axis=0)
    return centroids


@dataclass
class MealAssets:
    """Everything loaded once per dataset run."""

    taxonomy: Taxonomy
    recipes: dict
    densities: nutrition.DensityModel
    plate_models: dict
    features: dict  # sample id -> raw feature vector
    feature_labels: dict  # sample id -> true category (oracle recognition)
    provider: object
    prototypes: protonet.PrototypeSet


def load_assets(manifest: dict, base: Path, provider=None) -> MealAssets:
    from .core import load_recipes

    taxonomy = Taxonomy(
        {k: int(v) for k, v in json.loads((base / manifest["taxonomy"]).read_text()).items()}
    )
    recipes = load_recipes(base / manifest["recipes"])
    plate_models = geometry.load_plate_models(base / manifest["plate_models"])
    features, feature_labels = synthscene.read_labeled_features(base / manifest["features_items"])
    train_vecs, train_labels = synthscene.read_labeled_features(base / manifest["features_train"])
    if provider is None:
        provider = protonet.AffineEmbeddingProvider.identity(manifest["config"]["feature_dim"])
    # prototypes over the full training store, in embedding space
    grouped = synthscene.training_dataset_from_features(train_vecs, train_labels)
    protos = {
        cat: provider.embed(vecs).mean(axis=0) for cat, vecs in grouped.items()
    }
    prototypes = protonet.PrototypeSet(protos)
    return MealAssets(
        taxonomy=taxonomy,
        recipes=recipes,
        densities=nutrition.DensityModel.from_recipes(recipes),
        plate_models=plate_models,
        features=features,
        feature_labels=feature_labels,
        provider=provider,
        prototypes=prototypes,
    )


def load_meal_records(meal_entry: dict, base: Path, min_item_area: int):
    records = {}
    for stage in ("before", "after"):
        paths = meal_entry["stages"][stage]
        records[stage] = load_scene(
            base / paths["depth"],
            base / paths["food"],
            base / paths["plate"],
            base / "intrinsics.json",
            stage=stage,
            min_area=min_item_area,
        )
    return records["before"], records["after"]


def estimate_meal_pair(
    meal_entry: dict,
    base: Path,
    assets: MealAssets,
    config: PipelineConfig,
) -> nutrition.IntakeReport:
    """Run matching -> recognition -> volume -> nutrients for one meal pair."""
    meal_id = meal_entry["meal_id"]
    before, after = load_meal_records(meal_entry, base, config.min_item_area)
    menu = (
        DailyMenu.load(base / meal_entry["menu"], assets.taxonomy) if config.use_menu else None
    )

    plane = estimate_item_volumes(before, assets.plate_models, config)
    estimate_item_volumes(after, assets.plate_models, config, plane=plane)

    for stage, record in (("before", before), ("after", after)):
        if config.oracle_recognition:
            for k, item in enumerate(record.items):
                item.category_id = assets.feature_labels.get(f"{meal_id}/{stage}/{k}")
        else:
            recognize_items(
                record,
                meal_id,
                stage,
                assets.features,
                assets.provider,
                assets.prototypes,
                assets.taxonomy,
                menu,
            )

    centroids = _tray_centroids(before, plane, before.intrinsics)
    centroids.update(_tray_centroids(after, plane, after.intrinsics))
    match = nutrition.match_items(before, after, centroids=centroids)
    return nutrition.compute_intake(
        meal_id, match, assets.recipes, assets.densities
    )
