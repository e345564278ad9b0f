"""Shared domain types: camera model, rasters, taxonomy, recipes, menus, meal records.

Rasters are registered 480x640 pairs of depth (millimetres, uint16 on disk,
0 = no return) and category-index label maps (uint8 on disk).  Everything here
is immutable after construction and safe to share across workers.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

HYPER_CATEGORIES = (
    "main_course",
    "side_dish",
    "vegetable",
    "sauce",
    "soup",
    "salad",
    "dessert",
)

PLATE_TYPES = (
    "main_plate",
    "salad_bowl",
    "soup_bowl",
    "dessert_bowl",
    "packaged_container",
)

NUTRIENT_FIELDS = ("kcal", "cho_g", "fat_g", "protein_g", "salt_g", "fiber_g")

PACKAGED_CONTAINER = 5

DEFAULT_MIN_ITEM_AREA = 200
DEFAULT_DEPTH_RANGE_MM = (100.0, 2000.0)

# Fraction of invalid depth pixels above which an item is flagged unusable.
MAX_INVALID_FRACTION = 0.5

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


class LoadError(ValueError):
    """A file failed validation; the message names the file and offending value."""


class ValidationError(ValueError):
    """An in-memory object violates a domain invariant."""


# ---------------------------------------------------------------------------
# camera + rasters


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ValidationError(
                f"principal point ({self.cx}, {self.cy}) outside raster {self.width}x{self.height}"
            )

    @classmethod
    def load(cls, path) -> "CameraIntrinsics":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise LoadError(f"{path}: cannot read intrinsics: {exc}") from exc
        try:
            return cls(
                fx=float(data["fx"]),
                fy=float(data["fy"]),
                cx=float(data["cx"]),
                cy=float(data["cy"]),
                width=int(data.get("width", 640)),
                height=int(data.get("height", 480)),
            )
        except KeyError as exc:
            raise LoadError(f"{path}: missing intrinsics field {exc}") from exc

    def save(self, path):
        payload = {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _read_pgm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    fields = []
    pos = 0
    # header: magic, width, height, maxval, separated by whitespace/comments
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    magic, width, height, maxval = fields
    if magic != b"P5":
        raise LoadError(f"{path}: not a binary PGM (magic {magic!r})")
    width, height, maxval = int(width), int(height), int(maxval)
    dtype = np.dtype(">u2") if maxval > 255 else np.uint8
    data = np.frombuffer(raw, dtype=dtype, count=width * height, offset=pos)
    return data.reshape(height, width).astype(np.uint16 if maxval > 255 else np.uint8)


def _write_pgm(path: Path, arr: np.ndarray):
    maxval = 65535 if arr.dtype == np.uint16 else 255
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n".encode()
    body = arr.astype(">u2" if maxval > 255 else np.uint8).tobytes()
    path.write_bytes(header + body)


def _read_raster(path, dtype) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"{path}: file not found")
    if path.suffix.lower() == ".pgm":
        arr = _read_pgm(path)
    else:
        try:
            arr = np.asarray(Image.open(path))
        except OSError as exc:
            raise LoadError(f"{path}: unreadable image: {exc}") from exc
    if arr.ndim != 2:
        raise LoadError(f"{path}: expected single-channel raster, got shape {arr.shape}")
    return arr.astype(dtype)


def _write_raster(path, arr: np.ndarray):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".pgm":
        _write_pgm(path, arr)
    else:
        Image.fromarray(arr).save(path)  # uint16 -> I;16, uint8 -> L


@dataclass(frozen=True)
class DepthImage:
    """Depth raster in millimetres; zero marks an invalid pixel (no return)."""

    values_mm: np.ndarray  # float64, HxW
    depth_range_mm: tuple = DEFAULT_DEPTH_RANGE_MM

    def __post_init__(self):
        vals = np.ascontiguousarray(np.asarray(self.values_mm, dtype=np.float64))
        vals.setflags(write=False)
        object.__setattr__(self, "values_mm", vals)
        lo, hi = self.depth_range_mm
        bad = (vals != 0) & ((vals < lo) | (vals > hi))
        if bad.any():
            v = vals[bad].flat[0]
            raise ValidationError(f"depth value {v} mm outside valid range [{lo}, {hi}]")

    @property
    def shape(self):
        return self.values_mm.shape

    @property
    def valid_mask(self) -> np.ndarray:
        return self.values_mm != 0

    @classmethod
    def load(cls, path, depth_range_mm=DEFAULT_DEPTH_RANGE_MM) -> "DepthImage":
        arr = _read_raster(path, np.uint16)
        lo, hi = depth_range_mm
        bad = (arr != 0) & ((arr < lo) | (arr > hi))
        if bad.any():
            raise LoadError(f"{path}: depth value {arr[bad].flat[0]} outside [{lo}, {hi}] mm")
        return cls(arr.astype(np.float64), depth_range_mm)

    def save(self, path):
        _write_raster(path, np.round(self.values_mm).astype(np.uint16))


# ---------------------------------------------------------------------------
# taxonomy


@dataclass(frozen=True)
class Taxonomy:
    """Seven fixed hyper categories, five plate types, and the fine->hyper map."""

    fine_to_hyper: dict  # fine-grained id -> hyper index 1..7

    def __post_init__(self):
        for cat, hyper in self.fine_to_hyper.items():
            if not 1 <= hyper <= len(HYPER_CATEGORIES):
                raise ValidationError(f"category {cat!r} has invalid hyper index {hyper}")

    def hyper_index(self, name: str) -> int:
        return HYPER_CATEGORIES.index(name) + 1

    def hyper_name(self, index: int) -> str:
        return HYPER_CATEGORIES[index - 1]

    def hyper_of(self, category_id: str) -> int:
        try:
            return self.fine_to_hyper[category_id]
        except KeyError:
            raise ValidationError(f"unknown fine-grained category {category_id!r}") from None

    def categories_of(self, hyper: int) -> list:
        return sorted(c for c, h in self.fine_to_hyper.items() if h == hyper)

    @property
    def categories(self) -> list:
        return sorted(self.fine_to_hyper)


@dataclass(frozen=True)
class LabelMap:
    """Raster of category indices; kind selects the food or plate index space."""

    values: np.ndarray  # uint8, HxW
    kind: str  # "food" | "plate"

    def __post_init__(self):
        vals = np.ascontiguousarray(np.asarray(self.values, dtype=np.uint8))
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        if self.kind not in ("food", "plate"):
            raise ValidationError(f"label map kind must be 'food' or 'plate', got {self.kind!r}")
        nmax = len(HYPER_CATEGORIES) if self.kind == "food" else len(PLATE_TYPES)
        if vals.max(initial=0) > nmax:
            raise ValidationError(
                f"{self.kind} label {vals.max()} exceeds maximum index {nmax}"
            )

    @property
    def shape(self):
        return self.values.shape

    @classmethod
    def load(cls, path, kind: str) -> "LabelMap":
        arr = _read_raster(path, np.uint8)
        nmax = len(HYPER_CATEGORIES) if kind == "food" else len(PLATE_TYPES)
        if arr.max(initial=0) > nmax:
            raise LoadError(f"{path}: label index {arr.max()} exceeds maximum {nmax}")
        return cls(arr, kind)

    def save(self, path):
        _write_raster(path, self.values)


# ---------------------------------------------------------------------------
# recipes + menus


@dataclass(frozen=True)
class NutrientVector:
    kcal: float = 0.0
    cho_g: float = 0.0
    fat_g: float = 0.0
    protein_g: float = 0.0
    salt_g: float = 0.0
    fiber_g: float = 0.0

    def __post_init__(self):
        for name in NUTRIENT_FIELDS:
            if not np.isfinite(getattr(self, name)):
                raise ValidationError(f"nutrient {name} is not finite")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in NUTRIENT_FIELDS], dtype=np.float64)

    def as_dict(self) -> dict:
        return {f: getattr(self, f) for f in NUTRIENT_FIELDS}

    @classmethod
    def from_array(cls, arr) -> "NutrientVector":
        return cls(**dict(zip(NUTRIENT_FIELDS, map(float, arr))))

    def __add__(self, other):
        return NutrientVector.from_array(self.as_array() + other.as_array())

    def scaled(self, factor: float) -> "NutrientVector":
        return NutrientVector.from_array(self.as_array() * factor)

    def clamped(self) -> "NutrientVector":
        return NutrientVector.from_array(np.maximum(self.as_array(), 0.0))


@dataclass(frozen=True)
class Recipe:
    category_id: str
    hyper: int
    per_100g: NutrientVector
    density_g_per_ml: float
    portion_g: float = 0.0  # initial serving weight; used for packaged containers

    def __post_init__(self):
        if self.density_g_per_ml <= 0:
            raise ValidationError(
                f"recipe {self.category_id}: density must be positive, got {self.density_g_per_ml}"
            )
        if (self.per_100g.as_array() < 0).any():
            raise ValidationError(f"recipe {self.category_id}: negative nutrient density")


RECIPE_COLUMNS = (
    "category_id",
    "hyper",
    "kcal_100g",
    "cho_100g",
    "fat_100g",
    "protein_100g",
    "salt_100g",
    "fiber_100g",
    "density_g_per_ml",
)


def load_recipes(path) -> dict:
    """Read the recipe CSV into a dict keyed by fine-grained category id."""
    path = Path(path)
    recipes = {}
    try:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(RECIPE_COLUMNS) - set(reader.fieldnames or ())
            if missing:
                raise LoadError(f"{path}: missing recipe columns {sorted(missing)}")
            for row in reader:
                cat = row["category_id"]
                recipes[cat] = Recipe(
                    category_id=cat,
                    hyper=int(row["hyper"]),
                    per_100g=NutrientVector(
                        kcal=float(row["kcal_100g"]),
                        cho_g=float(row["cho_100g"]),
                        fat_g=float(row["fat_100g"]),
                        protein_g=float(row["protein_100g"]),
                        salt_g=float(row["salt_100g"]),
                        fiber_g=float(row["fiber_100g"]),
                    ),
                    density_g_per_ml=float(row["density_g_per_ml"]),
                    portion_g=float(row.get("portion_g") or 0.0),
                )
    except OSError as exc:
        raise LoadError(f"{path}: cannot read recipes: {exc}") from exc
    except (ValueError, ValidationError) as exc:
        raise LoadError(f"{path}: bad recipe row: {exc}") from exc
    return recipes


def save_recipes(recipes: dict, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RECIPE_COLUMNS + ("portion_g",))
        for cat in sorted(recipes):
            r = recipes[cat]
            n = r.per_100g
            writer.writerow(
                [
                    r.category_id,
                    r.hyper,
                    n.kcal,
                    n.cho_g,
                    n.fat_g,
                    n.protein_g,
                    n.salt_g,
                    n.fiber_g,
                    r.density_g_per_ml,
                    r.portion_g,
                ]
            )


@dataclass(frozen=True)
class DailyMenu:
    """Candidate fine-grained categories served on one day, keyed by hyper index."""

    candidates: dict  # hyper index -> tuple of category ids

    def candidates_for(self, hyper: int) -> tuple:
        return self.candidates.get(hyper, ())

    @classmethod
    def load(cls, path, taxonomy: Taxonomy) -> "DailyMenu":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise LoadError(f"{path}: cannot read menu: {exc}") from exc
        candidates = {}
        for hyper_name, cats in data.items():
            if hyper_name not in HYPER_CATEGORIES:
                raise LoadError(f"{path}: unknown hyper category {hyper_name!r}")
            hyper = HYPER_CATEGORIES.index(hyper_name) + 1
            for cat in cats:
                if taxonomy.hyper_of(cat) != hyper:
                    raise LoadError(
                        f"{path}: category {cat!r} listed under {hyper_name!r} "
                        f"but belongs to {taxonomy.hyper_name(taxonomy.hyper_of(cat))!r}"
                    )
            candidates[hyper] = tuple(cats)
        return cls(candidates)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            HYPER_CATEGORIES[h - 1]: list(cats) for h, cats in sorted(self.candidates.items())
        }
        path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# items + meal records


@dataclass
class FoodItem:
    """One connected food region on a tray."""

    hyper: int
    region: np.ndarray  # (N, 2) int array of (row, col) pixel coordinates
    plate_type: int = 0  # 0 = unknown
    category_id: str | None = None
    volume_ml: float | None = None
    weight_g: float | None = None
    usable: bool = True

    @property
    def area(self) -> int:
        return len(self.region)

    @property
    def centroid_px(self) -> np.ndarray:
        return self.region.mean(axis=0)

    def mask(self, shape) -> np.ndarray:
        m = np.zeros(shape, dtype=bool)
        m[self.region[:, 0], self.region[:, 1]] = True
        return m


def item_extraction(food_map: LabelMap, min_area: int = DEFAULT_MIN_ITEM_AREA) -> list:
    """Split the food label map into 8-connected components per hyper label.

    Components smaller than ``min_area`` pixels are dropped.  Items are
    returned in scanline order of each region's first pixel, which makes the
    ordering deterministic and stable across runs.
    """
    vals = food_map.values
    items = []
    for hyper in range(1, len(HYPER_CATEGORIES) + 1):
        labeled, n = ndimage.label(vals == hyper, structure=EIGHT_CONNECTED)
        for comp in range(1, n + 1):
            rows, cols = np.nonzero(labeled == comp)
            if len(rows) < min_area:
                continue
            region = np.column_stack([rows, cols]).astype(np.int64)
            items.append(FoodItem(hyper=hyper, region=region))
    width = vals.shape[1]
    items.sort(key=lambda it: int(it.region[0, 0]) * width + int(it.region[0, 1]))
    return items


@dataclass
class MealRecord:
    """One tray capture: depth + label rasters plus the extracted items."""

    stage: str  # before | during | after
    depth: DepthImage
    food_labels: LabelMap
    plate_labels: LabelMap
    items: list
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        if self.stage not in ("before", "during", "after"):
            raise ValidationError(f"stage must be before/during/after, got {self.stage!r}")
        shapes = {self.depth.shape, self.food_labels.shape, self.plate_labels.shape}
        if len(shapes) != 1:
            raise ValidationError(f"raster dimension mismatch: {shapes}")
        h, w = self.depth.shape
        if (h, w) != (self.intrinsics.height, self.intrinsics.width):
            raise ValidationError(
                f"raster {h}x{w} does not match intrinsics "
                f"{self.intrinsics.height}x{self.intrinsics.width}"
            )

    @property
    def background_mask(self) -> np.ndarray:
        return (self.food_labels.values == 0) & (self.plate_labels.values == 0)


def assign_plate_types(items: list, plate_labels: LabelMap):
    """Set each item's plate type to the dominant plate label under its region."""
    vals = plate_labels.values
    for item in items:
        under = vals[item.region[:, 0], item.region[:, 1]]
        under = under[under > 0]
        if under.size:
            item.plate_type = int(np.bincount(under).argmax())


def load_scene(
    depth_path,
    food_label_path,
    plate_label_path,
    intrinsics_path,
    stage: str = "before",
    min_area: int = DEFAULT_MIN_ITEM_AREA,
) -> MealRecord:
    """Load one capture from disk, validate it and extract the food items."""
    intrinsics = CameraIntrinsics.load(intrinsics_path)
    depth = DepthImage.load(depth_path)
    food = LabelMap.load(food_label_path, "food")
    plate = LabelMap.load(plate_label_path, "plate")
    shapes = {depth.shape, food.shape, plate.shape}
    if len(shapes) != 1:
        raise LoadError(
            f"dimension mismatch between {depth_path} {food_label_path} {plate_label_path}: "
            f"{sorted(shapes)}"
        )
    items = item_extraction(food, min_area=min_area)
    assign_plate_types(items, plate)
    return MealRecord(
        stage=stage,
        depth=depth,
        food_labels=food,
        plate_labels=plate,
        items=items,
        intrinsics=intrinsics,
    )


def fill_region_depth(depth: DepthImage, region: np.ndarray):
    """Fill invalid depths inside a region from the nearest valid region pixel.

    Returns (depths_mm, invalid_fraction).  Callers flag items unusable when
    the invalid fraction exceeds MAX_INVALID_FRACTION.
    """
    rows, cols = region[:, 0], region[:, 1]
    vals = depth.values_mm[rows, cols]
    invalid = vals == 0
    frac = float(invalid.mean()) if len(vals) else 1.0
    if not invalid.any():
        return vals.copy(), frac
    if invalid.all():
        return vals.copy(), frac
    # Nearest-valid-neighbour restricted to the region: build a tight local
    # window so the distance transform never leaves the region.
    r0, c0 = rows.min(), cols.min()
    shape = (rows.max() - r0 + 1, cols.max() - c0 + 1)
    local = np.zeros(shape, dtype=np.float64)
    inside = np.zeros(shape, dtype=bool)
    local[rows - r0, cols - c0] = vals
    inside[rows - r0, cols - c0] = True
    missing = inside & (local == 0)
    _, (ir, ic) = ndimage.distance_transform_edt(
        ~(inside & (local != 0)), return_indices=True
    )
    filled = local[ir, ic]
    local[missing] = filled[missing]
    return local[rows - r0, cols - c0], frac
