"""Raster I/O, taxonomy/recipe/menu round trips and item extraction."""
import numpy as np
import pytest

from trayintake.core import (
    HYPER_CATEGORIES,
    CameraIntrinsics,
    DailyMenu,
    DepthImage,
    LabelMap,
    LoadError,
    MealRecord,
    NutrientVector,
    Recipe,
    Taxonomy,
    ValidationError,
    assign_plate_types,
    fill_region_depth,
    item_extraction,
    load_recipes,
    save_recipes,
)


# ---------------------------------------------------------------------------
# rasters


def random_depth(rng, shape=(48, 64)):
    vals = rng.integers(150, 1500, size=shape).astype(np.float64)
    vals[rng.random(shape) < 0.05] = 0.0  # dropout pixels
    return DepthImage(vals)


@pytest.mark.parametrize("suffix", [".png", ".pgm"])
def test_depth_round_trip_bit_exact(tmp_path, suffix):
    rng = np.random.default_rng(0)
    depth = random_depth(rng)
    path = tmp_path / f"depth{suffix}"
    depth.save(path)
    loaded = DepthImage.load(path)
    np.testing.assert_array_equal(loaded.values_mm, depth.values_mm)


def test_depth_range_validation():
    with pytest.raises(ValidationError):
        DepthImage(np.full((4, 4), 50.0))  # below the 100 mm floor
    with pytest.raises(ValidationError):
        DepthImage(np.full((4, 4), 3000.0))
    DepthImage(np.zeros((4, 4)))  # all-invalid is allowed


def test_depth_load_rejects_out_of_range(tmp_path):
    from PIL import Image

    arr = np.full((8, 8), 9000, dtype=np.uint16)
    Image.fromarray(arr).save(tmp_path / "bad.png")
    with pytest.raises(LoadError):
        DepthImage.load(tmp_path / "bad.png")


def test_depth_valid_mask():
    depth = DepthImage(np.array([[0.0, 200.0], [300.0, 0.0]]))
    np.testing.assert_array_equal(depth.valid_mask, [[False, True], [True, False]])


@pytest.mark.parametrize("suffix", [".png", ".pgm"])
def test_label_map_round_trip(tmp_path, suffix):
    rng = np.random.default_rng(1)
    vals = rng.integers(0, 8, size=(32, 40)).astype(np.uint8)
    lm = LabelMap(vals, "food")
    path = tmp_path / f"labels{suffix}"
    lm.save(path)
    loaded = LabelMap.load(path, "food")
    np.testing.assert_array_equal(loaded.values, vals)


def test_label_map_rejects_out_of_range_index():
    with pytest.raises(ValidationError):
        LabelMap(np.full((4, 4), 8, dtype=np.uint8), "food")  # food max is 7
    with pytest.raises(ValidationError):
        LabelMap(np.full((4, 4), 6, dtype=np.uint8), "plate")  # plate max is 5
    with pytest.raises(ValidationError):
        LabelMap(np.zeros((4, 4), dtype=np.uint8), "other")


def test_intrinsics_round_trip(tmp_path):
    intr = CameraIntrinsics(fx=580.0, fy=575.0, cx=321.5, cy=239.5)
    intr.save(tmp_path / "intr.json")
    assert CameraIntrinsics.load(tmp_path / "intr.json") == intr


def test_intrinsics_validation():
    with pytest.raises(ValidationError):
        CameraIntrinsics(fx=-1.0, fy=1.0, cx=320, cy=240)
    with pytest.raises(ValidationError):
        CameraIntrinsics(fx=580.0, fy=580.0, cx=900.0, cy=240.0)


def test_intrinsics_load_missing_field(tmp_path):
    (tmp_path / "intr.json").write_text('{"fx": 580.0}')
    with pytest.raises(LoadError):
        CameraIntrinsics.load(tmp_path / "intr.json")


# ---------------------------------------------------------------------------
# nutrient vectors + recipes


def test_nutrient_vector_arithmetic():
    a = NutrientVector(kcal=100.0, cho_g=10.0)
    b = NutrientVector(kcal=50.0, fat_g=5.0)
    total = a + b
    assert total.kcal == 150.0 and total.cho_g == 10.0 and total.fat_g == 5.0
    half = a.scaled(0.5)
    assert half.kcal == 50.0 and half.cho_g == 5.0
    np.testing.assert_array_equal(
        NutrientVector.from_array(a.as_array()).as_array(), a.as_array()
    )


def test_nutrient_vector_rejects_non_finite():
    with pytest.raises(ValidationError):
        NutrientVector(kcal=float("nan"))


def test_recipe_validation():
    with pytest.raises(ValidationError):
        Recipe("x", 1, NutrientVector(), density_g_per_ml=0.0)


def test_recipes_round_trip(tmp_path):
    recipes = {
        "soup_01": Recipe(
            "soup_01", 5, NutrientVector(kcal=45.0, salt_g=0.9), 1.02, portion_g=250.0
        ),
        "salad_00": Recipe("salad_00", 6, NutrientVector(fiber_g=2.1), 0.35),
    }
    save_recipes(recipes, tmp_path / "recipes.csv")
    loaded = load_recipes(tmp_path / "recipes.csv")
    assert loaded == recipes


def test_recipes_missing_column(tmp_path):
    (tmp_path / "bad.csv").write_text("category_id,hyper\nx,1\n")
    with pytest.raises(LoadError):
        load_recipes(tmp_path / "bad.csv")


# ---------------------------------------------------------------------------
# taxonomy + menus


def taxonomy_fixture():
    return Taxonomy(
        {"rice": 1, "bread": 1, "miso_soup": 5, "green_salad": 6, "dressing": 4}
    )


def test_taxonomy_lookups():
    tax = taxonomy_fixture()
    assert tax.hyper_of("rice") == 1
    assert tax.categories_of(1) == ["bread", "rice"]
    assert tax.hyper_name(5) == "soup"
    assert tax.hyper_index("soup") == 5
    with pytest.raises(ValidationError):
        tax.hyper_of("unknown")


def test_taxonomy_rejects_bad_hyper():
    with pytest.raises(ValidationError):
        Taxonomy({"x": 9})


def test_menu_round_trip(tmp_path):
    tax = taxonomy_fixture()
    menu = DailyMenu({1: ("bread", "rice"), 5: ("miso_soup",)})
    menu.save(tmp_path / "menu.json")
    loaded = DailyMenu.load(tmp_path / "menu.json", tax)
    assert loaded.candidates_for(1) == ("bread", "rice")
    assert loaded.candidates_for(5) == ("miso_soup",)
    assert loaded.candidates_for(2) == ()


def test_menu_rejects_miscategorised_entry(tmp_path):
    tax = taxonomy_fixture()
    (tmp_path / "menu.json").write_text('{"soup": ["rice"]}')
    with pytest.raises(LoadError):
        DailyMenu.load(tmp_path / "menu.json", tax)


# ---------------------------------------------------------------------------
# item extraction


def flood_fill_components(vals, label):
    """Independent oracle: 8-connected components by breadth-first search."""
    mask = vals == label
    seen = np.zeros_like(mask)
    comps = []
    h, w = vals.shape
    for r0 in range(h):
        for c0 in range(w):
            if not mask[r0, c0] or seen[r0, c0]:
                continue
            stack = [(r0, c0)]
            seen[r0, c0] = True
            comp = []
            while stack:
                r, c = stack.pop()
                comp.append((r, c))
                for dr in (-1, 0, 1):
                    for dc in (-1, 0, 1):
                        rr, cc = r + dr, c + dc
                        if 0 <= rr < h and 0 <= cc < w and mask[rr, cc] and not seen[rr, cc]:
                            seen[rr, cc] = True
                            stack.append((rr, cc))
            comps.append(frozenset(comp))
    return comps


def test_item_extraction_matches_flood_fill_oracle():
    rng = np.random.default_rng(7)
    for _ in range(20):
        vals = rng.integers(0, 4, size=(24, 30)).astype(np.uint8)
        items = item_extraction(LabelMap(vals, "food"), min_area=1)
        got = {}
        for item in items:
            got.setdefault(item.hyper, []).append(
                frozenset(map(tuple, item.region.tolist()))
            )
        for hyper in range(1, 4):
            expected = flood_fill_components(vals, hyper)
            assert sorted(got.get(hyper, []), key=sorted) == sorted(
                expected, key=sorted
            )


def test_item_extraction_partitions_food_pixels():
    rng = np.random.default_rng(8)
    vals = rng.integers(0, 8, size=(32, 32)).astype(np.uint8)
    items = item_extraction(LabelMap(vals, "food"), min_area=1)
    covered = np.zeros(vals.shape, dtype=int)
    for item in items:
        covered[item.region[:, 0], item.region[:, 1]] += 1
        assert (vals[item.region[:, 0], item.region[:, 1]] == item.hyper).all()
    np.testing.assert_array_equal(covered, (vals > 0).astype(int))


def test_item_extraction_min_area_filter():
    vals = np.zeros((20, 20), dtype=np.uint8)
    vals[0:2, 0:2] = 1  # 4 pixels
    vals[10:14, 10:14] = 1  # 16 pixels
    items = item_extraction(LabelMap(vals, "food"), min_area=5)
    assert len(items) == 1 and items[0].area == 16


def test_item_extraction_scanline_order():
    vals = np.zeros((20, 20), dtype=np.uint8)
    vals[12:15, 1:4] = 2
    vals[2:5, 5:8] = 1
    vals[2:5, 12:15] = 3
    items = item_extraction(LabelMap(vals, "food"), min_area=1)
    firsts = [tuple(item.region[0]) for item in items]
    keys = [r * 20 + c for r, c in firsts]
    assert keys == sorted(keys)


def test_assign_plate_types_uses_majority_label():
    vals = np.zeros((10, 10), dtype=np.uint8)
    vals[2:6, 2:6] = 1
    items = item_extraction(LabelMap(vals, "food"), min_area=1)
    plate = np.zeros((10, 10), dtype=np.uint8)
    plate[2:6, 2:5] = 3  # 12 pixels of type 3
    plate[2:6, 5:6] = 2  # 4 pixels of type 2
    assign_plate_types(items, LabelMap(plate, "plate"))
    assert items[0].plate_type == 3


# ---------------------------------------------------------------------------
# depth filling + meal records


def test_fill_region_depth_nearest_neighbour():
    vals = np.zeros((6, 6))
    vals[2, 2] = 400.0
    vals[2, 5] = 700.0
    region = np.array([[2, 2], [2, 3], [2, 4], [2, 5]])
    filled, frac = fill_region_depth(DepthImage(vals), region)
    assert frac == 0.5
    np.testing.assert_array_equal(filled, [400.0, 400.0, 700.0, 700.0])


def test_fill_region_depth_all_valid_passthrough():
    vals = np.full((4, 4), 500.0)
    region = np.array([[1, 1], [1, 2]])
    filled, frac = fill_region_depth(DepthImage(vals), region)
    assert frac == 0.0
    np.testing.assert_array_equal(filled, [500.0, 500.0])


def test_fill_region_depth_all_invalid():
    vals = np.zeros((4, 4))
    region = np.array([[1, 1], [1, 2]])
    filled, frac = fill_region_depth(DepthImage(vals), region)
    assert frac == 1.0
    np.testing.assert_array_equal(filled, [0.0, 0.0])


def test_meal_record_validation():
    intr = CameraIntrinsics(fx=580.0, fy=580.0, cx=320.0, cy=240.0)
    depth = DepthImage(np.full((480, 640), 500.0))
    food = LabelMap(np.zeros((480, 640), dtype=np.uint8), "food")
    plate = LabelMap(np.zeros((480, 640), dtype=np.uint8), "plate")
    record = MealRecord("before", depth, food, plate, [], intr)
    assert record.background_mask.all()
    with pytest.raises(ValidationError):
        MealRecord("midway", depth, food, plate, [], intr)
    small = LabelMap(np.zeros((10, 10), dtype=np.uint8), "food")
    with pytest.raises(ValidationError):
        MealRecord("before", depth, small, plate, [], intr)
