"""Per-meal nutrient intake estimation from before/after RGB-D tray captures.

The library covers the full pipeline: scene I/O and item extraction
(:mod:`trayintake.core`), tray-plane fitting and plate-aware volume
integration (:mod:`trayintake.geometry`), few-shot category recognition
(:mod:`trayintake.protonet`), density-based nutrient conversion and
before/after matching (:mod:`trayintake.nutrition`), evaluation statistics
(:mod:`trayintake.metrics`), a synthetic benchmark generator with analytic
ground truth (:mod:`trayintake.synthscene`) and the end-to-end pipeline plus
CLI (:mod:`trayintake.pipeline`, :mod:`trayintake.cli`).
"""

__version__ = "0.1.0"

from .core import (
    CameraIntrinsics,
    DailyMenu,
    DepthImage,
    FoodItem,
    LabelMap,
    LoadError,
    MealRecord,
    NutrientVector,
    Recipe,
    Taxonomy,
    ValidationError,
    item_extraction,
    load_scene,
)
from .geometry import (
    Plane,
    PlateModel,
    PointCloud,
    fit_tray_plane,
    food_volume,
    triangulate_surface,
    unproject,
)
from .nutrition import DensityModel, IntakeReport, compute_intake, match_items
from .protonet import (
    AffineEmbeddingProvider,
    Episode,
    PrototypeSet,
    class_probabilities,
    compute_prototypes,
    episode_loss,
    predict,
    sample_episode,
    train,
)
from .metrics import AgreementStats, agreement, iou, pixel_accuracy, segmentation_score
from .pipeline import PipelineConfig, estimate_meal_pair, load_assets
