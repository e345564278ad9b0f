"""Estimate food volumes from a single synthetic tray capture.

Renders a noiseless depth image of a tray holding a box of food on a flat
plate and a part-filled bowl, then runs the geometric pipeline (tray plane
fit, surface triangulation, plate placement, height-field integration) and
compares the recovered volumes against the analytic ground truth.

Run with:  python demos/volume_from_depth.py
"""
import numpy as np

from trayintake.core import (
    PLATE_TYPES,
    MealRecord,
    assign_plate_types,
    item_extraction,
)
from trayintake.pipeline import PipelineConfig, estimate_item_volumes
from trayintake.synthscene import (
    FoodBlob,
    PlatePlacement,
    SceneSpec,
    default_intrinsics,
    default_plate_models,
    generate,
)


def main():
    models = default_plate_models()
    spec = SceneSpec(
        intrinsics=default_intrinsics(),
        tray_distance_mm=430.0,
        tray_tilt_deg=(2.5, -1.5),
        plates=(
            PlatePlacement(1, (-50.0, -65.0), models[1],
                           food=FoodBlob("main_course_00", "box", {
                               "length_mm": 60.0, "width_mm": 45.0,
                               "height_mm": 25.0, "angle_deg": 30.0,
                           })),
            PlatePlacement(3, (-55.0, 48.0), models[3],
                           food=FoodBlob("soup_00", "fill",
                                         {"level_mm": 22.0})),
        ),
    )
    depth, food, plate, truth = generate(spec, seed=0)

    items = item_extraction(food)
    assign_plate_types(items, plate)
    record = MealRecord("before", depth, food, plate, items, spec.intrinsics)
    estimate_item_volumes(record, models, PipelineConfig())

    truth_ml = {(t.hyper, t.plate_type): t.volume_ml for t in truth.items}
    print(f"{'on plate':<14} {'true ml':>9} {'est ml':>9} {'error':>7}")
    for item in record.items:
        gt = truth_ml[(item.hyper, item.plate_type)]
        err = abs(item.volume_ml - gt) / gt
        name = PLATE_TYPES[item.plate_type - 1]
        print(f"{name:<14} {gt:>9.1f} {item.volume_ml:>9.1f} {err:>6.2%}")


if __name__ == "__main__":
    main()
