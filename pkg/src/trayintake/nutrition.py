"""Volume-to-nutrient conversion: per-category density regression, before/after
item matching, intake computation and the packaged-container heuristic.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    NUTRIENT_FIELDS,
    PACKAGED_CONTAINER,
    FoodItem,
    MealRecord,
    NutrientVector,
    Recipe,
    ValidationError,
)


class NutritionError(ValueError):
    """Missing recipe/density data or invalid regression input."""


# Which hyper category's consumption fraction drives a packaged container's
# intake, keyed by the container item's hyper category.  The classic case is
# dressing: sauce consumption tracks salad consumption.
DEFAULT_CONTAINER_LINKS = {4: 6}  # sauce -> salad
DEFAULT_CONTAINER_FRACTION = 0.5


# ---------------------------------------------------------------------------
# density regression


def fit_density(samples) -> float:
    """Least-squares slope of weight = rho * volume through the origin.

    ``samples`` is a sequence of (volume_ml, weight_g) pairs; the closed form
    is sum(v*w) / sum(v^2).
    """
    arr = np.asarray(samples, float)
    if arr.ndim != 2 or arr.shape[1] != 2 or len(arr) == 0:
        raise NutritionError("need a nonempty list of (volume, weight) pairs")
    v, w = arr[:, 0], arr[:, 1]
    denom = float(v @ v)
    if denom == 0.0:
        raise NutritionError("all volumes are zero; density is undefined")
    rho = float(v @ w) / denom
    if rho <= 0:
        raise NutritionError(f"fitted density {rho} is not positive")
    return rho


@dataclass(frozen=True)
class DensityModel:
    """Per-category densities (g/ml) with fit diagnostics."""

    rho: dict  # category id -> density
    diagnostics: dict = field(default_factory=dict)  # category -> (n, residual norm)

    def __post_init__(self):
        for cat, r in self.rho.items():
            if r <= 0:
                raise ValidationError(f"density for {cat!r} must be positive, got {r}")

    @classmethod
    def fit(cls, samples_by_category: dict) -> "DensityModel":
        rho, diag = {}, {}
        for cat, samples in samples_by_category.items():
            r = fit_density(samples)
            arr = np.asarray(samples, float)
            resid = float(np.linalg.norm(arr[:, 1] - r * arr[:, 0]))
            rho[cat] = r
            diag[cat] = (len(arr), resid)
        return cls(rho=rho, diagnostics=diag)

    @classmethod
    def from_recipes(cls, recipes: dict) -> "DensityModel":
        return cls(rho={c: r.density_g_per_ml for c, r in recipes.items()})

    def density_for(self, category, recipes: dict | None = None) -> float:
        if category in self.rho:
            return self.rho[category]
        if recipes and category in recipes:
            return recipes[category].density_g_per_ml
        raise NutritionError(f"no density for category {category!r} and no recipe default")


def volume_to_weight(volume_ml: float, category, densities: DensityModel,
                     recipes: dict | None = None) -> float:
    return densities.density_for(category, recipes) * volume_ml


def nutrient_content(weight_g: float, recipe: Recipe) -> NutrientVector:
    """Scale the per-100g recipe row to the given weight."""
    if recipe is None:
        raise NutritionError("missing recipe")
    if weight_g < 0:
        raise ValidationError(f"weight must be non-negative, got {weight_g}")
    return recipe.per_100g.scaled(weight_g / 100.0)


# ---------------------------------------------------------------------------
# before/after item matching


@dataclass
class ItemMatch:
    """Pairing of before items with after items (or None when fully consumed)."""

    pairs: list  # list of (before FoodItem, after FoodItem | None)
    unmatched_after: list  # after items with no before counterpart


def match_items(before: MealRecord, after: MealRecord, centroids=None) -> ItemMatch:
    """Greedy matching within (hyper category, plate type) buckets.

    Candidate pairs are consumed in order of increasing centroid distance.
    ``centroids`` optionally maps id(item) to a 2D tray-plane coordinate;
    pixel centroids are used otherwise (a monotone proxy for a camera looking
    down at the tray).  Before-items without an after counterpart are treated
    as fully consumed.
    """

    def centroid(item: FoodItem) -> np.ndarray:
        if centroids is not None and id(item) in centroids:
            return np.asarray(centroids[id(item)], float)
        return item.centroid_px

    pairs = []
    matched_after = set()
    buckets = {}
    for j, item in enumerate(after.items):
        buckets.setdefault((item.hyper, item.plate_type), []).append(j)

    remaining_before = list(enumerate(before.items))
    assigned_before = set()
    candidates = []
    for i, b_item in remaining_before:
        for j in buckets.get((b_item.hyper, b_item.plate_type), []):
            dist = float(np.linalg.norm(centroid(b_item) - centroid(after.items[j])))
            candidates.append((dist, i, j))
    for dist, i, j in sorted(candidates):
        if i in assigned_before or j in matched_after:
            continue
        assigned_before.add(i)
        matched_after.add(j)
        pairs.append((before.items[i], after.items[j]))
    for i, b_item in remaining_before:
        if i not in assigned_before:
            pairs.append((b_item, None))
    # keep deterministic report order: follow the before-item ordering
    order = {id(it): k for k, it in enumerate(before.items)}
    pairs.sort(key=lambda p: order[id(p[0])])
    unmatched = [it for j, it in enumerate(after.items) if j not in matched_after]
    return ItemMatch(pairs=pairs, unmatched_after=unmatched)


# ---------------------------------------------------------------------------
# intake reports


@dataclass
class ItemIntake:
    category_id: str
    hyper: int
    plate_type: int
    consumed_volume_ml: float | None  # None for packaged containers
    consumed_weight_g: float
    nutrients: NutrientVector
    flags: tuple = ()
    raw_volume_ml: float | None = None  # signed before-minus-after diagnostic


@dataclass
class IntakeReport:
    meal_id: str
    items: list
    totals: NutrientVector
    diagnostics: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "meal_id": self.meal_id,
            "items": [
                {
                    "category_id": it.category_id,
                    "hyper": it.hyper,
                    "plate_type": it.plate_type,
                    "consumed_volume_ml": it.consumed_volume_ml,
                    "consumed_weight_g": it.consumed_weight_g,
                    "nutrients": it.nutrients.as_dict(),
                    "flags": list(it.flags),
                    "raw_volume_ml": it.raw_volume_ml,
                }
                for it in self.items
            ],
            "totals": self.totals.as_dict(),
            "diagnostics": self.diagnostics,
        }

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json_dict(), sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "IntakeReport":
        data = json.loads(Path(path).read_text())
        items = [
            ItemIntake(
                category_id=d["category_id"],
                hyper=d["hyper"],
                plate_type=d["plate_type"],
                consumed_volume_ml=d["consumed_volume_ml"],
                consumed_weight_g=d["consumed_weight_g"],
                nutrients=NutrientVector(**d["nutrients"]),
                flags=tuple(d["flags"]),
                raw_volume_ml=d.get("raw_volume_ml"),
            )
            for d in data["items"]
        ]
        return cls(
            meal_id=data["meal_id"],
            items=items,
            totals=NutrientVector(**data["totals"]),
            diagnostics=data.get("diagnostics", {}),
        )

    def csv_row(self) -> list:
        t = self.totals
        return [self.meal_id, t.kcal, t.cho_g, t.fat_g, t.protein_g, t.salt_g, t.fiber_g]


SUMMARY_CSV_HEADER = ["meal_id", "kcal", "cho_g", "fat_g", "protein_g", "salt_g", "fiber_g"]


def packaged_container_intake(
    portion_g: float,
    linked_fraction: float | None,
    default_fraction: float = DEFAULT_CONTAINER_FRACTION,
):
    """Heuristic container intake: fraction of the initial portion weight.

    Uses the linked item's consumption fraction when available, otherwise the
    configured default (flagged).  Returns (weight_g, flags).
    """
    if linked_fraction is None:
        return portion_g * default_fraction, ("heuristic-default",)
    if not 0.0 <= linked_fraction <= 1.0:
        raise ValidationError(f"consumption fraction {linked_fraction} outside [0, 1]")
    return portion_g * linked_fraction, ("heuristic-linked",)


def compute_intake(
    meal_id: str,
    match: ItemMatch,
    recipes: dict,
    densities: DensityModel,
    container_links: dict = DEFAULT_CONTAINER_LINKS,
    default_container_fraction: float = DEFAULT_CONTAINER_FRACTION,
) -> IntakeReport:
    """Turn matched items (with volumes and categories filled in) into intake.

    Consumed weight is rho * (v_before - v_after), clamped at zero; packaged
    containers use the linked-item heuristic.  Report totals are the exact sum
    of the per-item vectors.
    """
    # consumption fraction per hyper category, for the container heuristic
    fraction_by_hyper = {}
    for b_item, a_item in match.pairs:
        if b_item.plate_type == PACKAGED_CONTAINER or not b_item.usable:
            continue
        if b_item.volume_ml is None or b_item.volume_ml <= 0:
            continue
        after_vol = 0.0 if a_item is None else (a_item.volume_ml or 0.0)
        frac = max(b_item.volume_ml - after_vol, 0.0) / b_item.volume_ml
        fraction_by_hyper.setdefault(b_item.hyper, []).append(min(frac, 1.0))

    items = []
    for b_item, a_item in match.pairs:
        flags = []
        category = b_item.category_id
        if a_item is not None and a_item.category_id not in (None, category):
            # trust the unoccluded before-meal recognition
            flags.append("category-mismatch")
        if category is None:
            flags.append("unrecognized")
            items.append(
                ItemIntake(
                    category_id="",
                    hyper=b_item.hyper,
                    plate_type=b_item.plate_type,
                    consumed_volume_ml=None,
                    consumed_weight_g=0.0,
                    nutrients=NutrientVector(),
                    flags=tuple(flags),
                )
            )
            continue
        recipe = recipes.get(category)
        if recipe is None:
            raise NutritionError(f"no recipe for recognized category {category!r}")

        if b_item.plate_type == PACKAGED_CONTAINER:
            linked_hyper = container_links.get(b_item.hyper)
            fractions = fraction_by_hyper.get(linked_hyper, [])
            linked = float(np.mean(fractions)) if fractions else None
            if recipe.portion_g <= 0:
                raise NutritionError(
                    f"container category {category!r} has no portion weight in the recipe"
                )
            weight, heur_flags = packaged_container_intake(
                recipe.portion_g, linked, default_container_fraction
            )
            flags.extend(heur_flags)
            items.append(
                ItemIntake(
                    category_id=category,
                    hyper=b_item.hyper,
                    plate_type=b_item.plate_type,
                    consumed_volume_ml=None,
                    consumed_weight_g=weight,
                    nutrients=nutrient_content(weight, recipe),
                    flags=tuple(flags),
                )
            )
            continue

        if not b_item.usable or b_item.volume_ml is None:
            flags.append("unusable-depth")
            items.append(
                ItemIntake(
                    category_id=category,
                    hyper=b_item.hyper,
                    plate_type=b_item.plate_type,
                    consumed_volume_ml=None,
                    consumed_weight_g=0.0,
                    nutrients=NutrientVector(),
                    flags=tuple(flags),
                )
            )
            continue

        after_vol = 0.0 if a_item is None else (a_item.volume_ml or 0.0)
        if a_item is None:
            flags.append("fully-consumed")
        raw = b_item.volume_ml - after_vol
        consumed_ml = max(raw, 0.0)
        rho = densities.density_for(category, recipes)
        weight = rho * consumed_ml
        items.append(
            ItemIntake(
                category_id=category,
                hyper=b_item.hyper,
                plate_type=b_item.plate_type,
                consumed_volume_ml=consumed_ml,
                consumed_weight_g=weight,
                nutrients=nutrient_content(weight, recipe),
                flags=tuple(flags),
                raw_volume_ml=raw,
            )
        )

    totals = NutrientVector()
    for it in items:
        totals = totals + it.nutrients
    diagnostics = {
        "unmatched_after_items": len(match.unmatched_after),
        "fraction_by_hyper": {str(h): v for h, v in sorted(fraction_by_hyper.items())},
    }
    return IntakeReport(meal_id=meal_id, items=items, totals=totals, diagnostics=diagnostics)


def write_summary_csv(reports, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_CSV_HEADER)
        for report in reports:
            writer.writerow(report.csv_row())
