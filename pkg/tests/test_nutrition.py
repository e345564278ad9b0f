"""Density regression, item matching, container heuristic and intake reports."""
from itertools import permutations

import numpy as np
import pytest

from trayintake.core import (
    CameraIntrinsics,
    DepthImage,
    FoodItem,
    LabelMap,
    MealRecord,
    NutrientVector,
    Recipe,
    ValidationError,
)
from trayintake.nutrition import (
    DensityModel,
    IntakeReport,
    ItemIntake,
    ItemMatch,
    NutritionError,
    SUMMARY_CSV_HEADER,
    compute_intake,
    fit_density,
    match_items,
    nutrient_content,
    packaged_container_intake,
    volume_to_weight,
    write_summary_csv,
)


# ---------------------------------------------------------------------------
# density regression


def test_fit_density_matches_least_squares_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 20))
        v = rng.uniform(1.0, 300.0, size=n)
        w = 0.8 * v + rng.normal(scale=3.0, size=n)
        samples = np.column_stack([v, w])
        rho = fit_density(samples)
        oracle, *_ = np.linalg.lstsq(v[:, None], w, rcond=None)
        assert abs(rho - oracle[0]) < 1e-12


def test_fit_density_exact_on_noise_free_data():
    samples = [(100.0, 85.0), (200.0, 170.0), (50.0, 42.5)]
    assert abs(fit_density(samples) - 0.85) < 1e-12


def test_fit_density_error_cases():
    with pytest.raises(NutritionError):
        fit_density([])
    with pytest.raises(NutritionError):
        fit_density([(0.0, 10.0)])
    with pytest.raises(NutritionError):
        fit_density([(100.0, -5.0)])


def recipe(cat, hyper, density=1.0, portion=0.0, kcal=100.0):
    return Recipe(
        cat,
        hyper,
        NutrientVector(kcal=kcal, cho_g=10.0, fat_g=5.0, protein_g=8.0,
                       salt_g=0.5, fiber_g=1.5),
        density_g_per_ml=density,
        portion_g=portion,
    )


def test_density_model_fallback_to_recipe():
    recipes = {"a": recipe("a", 1, density=0.7)}
    model = DensityModel(rho={"b": 1.1})
    assert model.density_for("b") == 1.1
    assert model.density_for("a", recipes) == 0.7
    with pytest.raises(NutritionError):
        model.density_for("missing")
    assert volume_to_weight(100.0, "a", model, recipes) == pytest.approx(70.0)


def test_density_model_fit_diagnostics():
    model = DensityModel.fit({"a": [(10.0, 9.0), (20.0, 18.0)]})
    assert model.rho["a"] == pytest.approx(0.9)
    n, resid = model.diagnostics["a"]
    assert n == 2 and resid < 1e-12


def test_nutrient_content_scales_per_100g():
    r = recipe("a", 1, kcal=250.0)
    content = nutrient_content(50.0, r)
    assert content.kcal == pytest.approx(125.0)
    assert content.cho_g == pytest.approx(5.0)
    with pytest.raises(ValidationError):
        nutrient_content(-1.0, r)


# ---------------------------------------------------------------------------
# matching


def make_record(stage, specs):
    """Build a MealRecord whose items have given (hyper, plate_type, centroid)."""
    intr = CameraIntrinsics(fx=580.0, fy=580.0, cx=320.0, cy=240.0)
    depth = DepthImage(np.full((480, 640), 500.0))
    food = LabelMap(np.zeros((480, 640), dtype=np.uint8), "food")
    plate = LabelMap(np.zeros((480, 640), dtype=np.uint8), "plate")
    items = []
    for hyper, plate_type, (r, c) in specs:
        region = np.array([[r, c], [r, c + 1], [r + 1, c], [r + 1, c + 1]])
        items.append(FoodItem(hyper=hyper, region=region, plate_type=plate_type))
    return MealRecord(stage, depth, food, plate, items, intr)


def brute_force_best_matching(before_items, after_items):
    """Minimum-total-distance assignment within (hyper, plate) buckets."""
    best = None
    after_idx = list(range(len(after_items)))
    for perm in permutations(after_idx):
        total = 0.0
        pairs = []
        used = set()
        ok = True
        for b in before_items:
            match = None
            for j in perm:
                a = after_items[j]
                if j in used or (a.hyper, a.plate_type) != (b.hyper, b.plate_type):
                    continue
                match = j
                break
            if match is not None:
                used.add(match)
                total += float(np.linalg.norm(b.centroid_px - after_items[match].centroid_px))
            pairs.append((b, None if match is None else after_items[match]))
        if ok and (best is None or total < best[0]):
            best = (total, pairs)
    return best[1]


def test_match_items_pairs_by_bucket_and_distance():
    before = make_record(
        "before",
        [(1, 1, (100, 100)), (5, 3, (200, 300)), (6, 2, (300, 500))],
    )
    after = make_record(
        "after",
        [(5, 3, (205, 303)), (1, 1, (98, 104))],  # salad fully consumed
    )
    match = match_items(before, after)
    assert len(match.pairs) == 3
    by_hyper = {b.hyper: a for b, a in match.pairs}
    assert by_hyper[1] is after.items[1]
    assert by_hyper[5] is after.items[0]
    assert by_hyper[6] is None
    assert match.unmatched_after == []


def test_match_items_never_crosses_buckets():
    before = make_record("before", [(1, 1, (100, 100))])
    after = make_record("after", [(1, 3, (100, 100)), (5, 1, (100, 100))])
    match = match_items(before, after)
    assert match.pairs == [(before.items[0], None)]
    assert len(match.unmatched_after) == 2


def test_match_items_on_separated_items_equals_exhaustive_assignment():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = int(rng.integers(1, 6))
        centers = rng.uniform(40, 400, size=(n, 2)).astype(int)
        specs_b = [(1, 1, tuple(c)) for c in centers]
        jitter = rng.integers(-4, 5, size=(n, 2))
        specs_a = [(1, 1, tuple(c + j)) for c, j in zip(centers, jitter)]
        before = make_record("before", specs_b)
        after = make_record("after", specs_a)
        got = match_items(before, after).pairs
        expected = brute_force_best_matching(before.items, after.items)
        assert [(id(b), id(a) if a else None) for b, a in got] == [
            (id(b), id(a) if a else None) for b, a in expected
        ]


def test_match_items_prefers_supplied_centroids():
    before = make_record("before", [(1, 1, (100, 100))])
    after = make_record("after", [(1, 1, (400, 400)), (1, 1, (102, 101))])
    # flip the geometry via explicit centroids: the far item becomes near
    centroids = {
        id(before.items[0]): (0.0, 0.0),
        id(after.items[0]): (1.0, 0.0),
        id(after.items[1]): (50.0, 50.0),
    }
    match = match_items(before, after, centroids=centroids)
    assert match.pairs[0][1] is after.items[0]


# ---------------------------------------------------------------------------
# container heuristic


def test_packaged_container_intake_linked_and_default():
    weight, flags = packaged_container_intake(40.0, 0.75)
    assert weight == pytest.approx(30.0) and flags == ("heuristic-linked",)
    weight, flags = packaged_container_intake(40.0, None)
    assert weight == pytest.approx(20.0) and flags == ("heuristic-default",)
    weight, _ = packaged_container_intake(40.0, None, default_fraction=0.25)
    assert weight == pytest.approx(10.0)
    with pytest.raises(ValidationError):
        packaged_container_intake(40.0, 1.5)


# ---------------------------------------------------------------------------
# intake computation


def test_compute_intake_end_to_end():
    recipes = {
        "main": recipe("main", 1, density=0.9, kcal=200.0),
        "salad": recipe("salad", 6, density=0.4, kcal=30.0),
        "dressing": recipe("dressing", 4, density=1.1, portion=40.0, kcal=400.0),
    }
    densities = DensityModel.from_recipes(recipes)
    b_main = FoodItem(1, np.zeros((4, 2), int), plate_type=1, category_id="main",
                      volume_ml=200.0)
    a_main = FoodItem(1, np.zeros((4, 2), int), plate_type=1, category_id="main",
                      volume_ml=80.0)
    b_salad = FoodItem(6, np.zeros((4, 2), int), plate_type=2, category_id="salad",
                       volume_ml=100.0)
    a_salad = FoodItem(6, np.zeros((4, 2), int), plate_type=2, category_id="salad",
                       volume_ml=50.0)
    b_sauce = FoodItem(4, np.zeros((4, 2), int), plate_type=5, category_id="dressing")
    match = ItemMatch(
        pairs=[(b_main, a_main), (b_salad, a_salad), (b_sauce, b_sauce)],
        unmatched_after=[],
    )
    report = compute_intake("meal_x", match, recipes, densities)
    by_cat = {it.category_id: it for it in report.items}
    # main: 120 ml * 0.9 g/ml = 108 g -> 216 kcal
    assert by_cat["main"].consumed_weight_g == pytest.approx(108.0)
    assert by_cat["main"].nutrients.kcal == pytest.approx(216.0)
    # salad: half consumed; sauce follows the salad fraction: 0.5 * 40 g
    assert by_cat["salad"].consumed_volume_ml == pytest.approx(50.0)
    assert by_cat["dressing"].consumed_weight_g == pytest.approx(20.0)
    assert by_cat["dressing"].flags == ("heuristic-linked",)
    expected_total = sum((it.nutrients.kcal for it in report.items))
    assert report.totals.kcal == pytest.approx(expected_total)


def test_compute_intake_flags_and_clamps():
    recipes = {"main": recipe("main", 1, density=1.0)}
    densities = DensityModel.from_recipes(recipes)
    grown = FoodItem(1, np.zeros((4, 2), int), 1, "main", volume_ml=50.0)
    grown_after = FoodItem(1, np.zeros((4, 2), int), 1, "main", volume_ml=70.0)
    unknown = FoodItem(2, np.zeros((4, 2), int), 1, None, volume_ml=30.0)
    broken = FoodItem(3, np.zeros((4, 2), int), 1, "main", volume_ml=None, usable=False)
    gone = FoodItem(1, np.zeros((4, 2), int), 1, "main", volume_ml=25.0)
    match = ItemMatch(
        pairs=[(grown, grown_after), (unknown, None), (broken, None), (gone, None)],
        unmatched_after=[],
    )
    report = compute_intake("meal_y", match, recipes, densities)
    assert report.items[0].consumed_volume_ml == 0.0
    assert report.items[0].raw_volume_ml == pytest.approx(-20.0)
    assert report.items[1].flags == ("unrecognized",)
    assert report.items[1].nutrients.kcal == 0.0
    assert "unusable-depth" in report.items[2].flags
    assert "fully-consumed" in report.items[3].flags
    assert report.items[3].consumed_volume_ml == pytest.approx(25.0)


def test_compute_intake_container_without_linked_item_uses_default():
    recipes = {"dressing": recipe("dressing", 4, portion=40.0)}
    densities = DensityModel.from_recipes(recipes)
    sauce = FoodItem(4, np.zeros((4, 2), int), 5, "dressing")
    report = compute_intake(
        "meal_z", ItemMatch(pairs=[(sauce, sauce)], unmatched_after=[]),
        recipes, densities,
    )
    assert report.items[0].consumed_weight_g == pytest.approx(20.0)
    assert report.items[0].flags == ("heuristic-default",)


def test_compute_intake_missing_recipe_raises():
    densities = DensityModel(rho={"x": 1.0})
    item = FoodItem(1, np.zeros((4, 2), int), 1, "x", volume_ml=10.0)
    with pytest.raises(NutritionError):
        compute_intake("m", ItemMatch([(item, None)], []), {}, densities)


# ---------------------------------------------------------------------------
# reports


def sample_report():
    return IntakeReport(
        meal_id="meal_7",
        items=[
            ItemIntake("main", 1, 1, 120.0, 108.0,
                       NutrientVector(kcal=216.0), ("fully-consumed",), 120.0),
            ItemIntake("dressing", 4, 5, None, 20.0,
                       NutrientVector(kcal=80.0), ("heuristic-linked",)),
        ],
        totals=NutrientVector(kcal=296.0),
        diagnostics={"unmatched_after_items": 0},
    )


def test_report_json_round_trip(tmp_path):
    report = sample_report()
    report.save(tmp_path / "r.json")
    loaded = IntakeReport.load(tmp_path / "r.json")
    assert loaded.meal_id == report.meal_id
    assert loaded.totals == report.totals
    assert loaded.items[1].flags == ("heuristic-linked",)
    assert loaded.items[1].consumed_volume_ml is None


def test_summary_csv_layout(tmp_path):
    write_summary_csv([sample_report()], tmp_path / "summary.csv")
    lines = (tmp_path / "summary.csv").read_text().strip().splitlines()
    assert lines[0] == ",".join(SUMMARY_CSV_HEADER)
    row = lines[1].split(",")
    assert row[0] == "meal_7" and float(row[1]) == pytest.approx(296.0)
