"""Command-line entry point with four subcommands:

* ``simulate``  -- generate a synthetic tray dataset (scenes + ground truth)
* ``train``     -- fit the embedding on few-shot episodes, save a checkpoint
* ``estimate``  -- run the intake pipeline over meal pairs, write reports
* ``eval``      -- score reports against ground truth (agreement statistics)

Options can come from a JSON config file (``--config``) with command-line
flags taking precedence.  Human-facing output goes to standard error; files
are the only machine-readable output.  Every run drops a ``run_manifest.json``
recording the resolved configuration, its hash and the package version so the
run can be reproduced byte-for-byte.

Exit codes: 0 success, 1 validation error, 2 partial failure (some meals
failed but the run finished), 3 internal error.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import json
import os
import sys
from pathlib import Path

from . import __version__, metrics, nutrition, protonet, synthscene
from .core import LoadError, ValidationError, NUTRIENT_FIELDS
from .pipeline import MealAssets, PipelineConfig, PipelineError, estimate_meal_pair, load_assets

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_PARTIAL = 2
EXIT_INTERNAL = 3


def _log(msg: str):
    print(msg, file=sys.stderr)


def _merge_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> dict:
    """Resolve options: parser defaults < JSON config file < explicit flags."""
    ns = vars(args)
    resolved = {
        k: v for k, v in ns.items() if k not in ("config", "command", "func", "subparser")
    }
    if ns.get("config"):
        try:
            file_cfg = json.loads(Path(ns["config"]).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config file {ns['config']}: {exc}")
        if not isinstance(file_cfg, dict):
            raise ValidationError("config file must contain a JSON object")
        unknown = set(file_cfg) - set(resolved)
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        # flags given explicitly on the command line win over the file
        defaults = {k: parser.get_default(k) for k in resolved}
        for key, value in file_cfg.items():
            if resolved[key] == defaults.get(key):
                resolved[key] = value
    return resolved


def _write_run_manifest(out_dir: Path, command: str, config: dict):
    payload = {k: v for k, v in sorted(config.items())}
    blob = json.dumps(payload, sort_keys=True)
    manifest = {
        "command": command,
        "config": payload,
        "config_sha256": hashlib.sha256(blob.encode()).hexdigest(),
        "version": __version__,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    )


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(cfg: dict) -> int:
    out = Path(cfg["out"])
    dataset_cfg = synthscene.DatasetConfig(
        n_meals=cfg["meals"],
        categories_per_hyper=cfg["categories_per_hyper"],
        menu_size=cfg["menu_size"],
        feature_dim=cfg["feature_dim"],
        feature_sigma=cfg["feature_sigma"],
        noise_sigma_mm=cfg["noise_sigma_mm"],
        dropout_rate=cfg["dropout_rate"],
    )
    _log(f"simulate: {cfg['meals']} meals, seed {cfg['seed']} -> {out}")
    synthscene.generate_dataset(out, cfg["seed"], dataset_cfg)
    _write_run_manifest(out, "simulate", cfg)
    _log("simulate: done")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def cmd_train(cfg: dict) -> int:
    manifest, base = synthscene.load_manifest(cfg["dataset"])
    vectors, labels = synthscene.read_labeled_features(base / manifest["features_train"])
    dataset = synthscene.training_dataset_from_features(vectors, labels)
    dim = manifest["config"]["feature_dim"]
    provider = protonet.AffineEmbeddingProvider.initialize(
        cfg["embed_dim"] or dim, dim, seed=cfg["seed"]
    )
    _log(
        f"train: {cfg['iterations']} iterations of {cfg['way']}-way "
        f"{cfg['shot']}-shot episodes, seed {cfg['seed']}"
    )
    result = protonet.train(
        dataset,
        provider,
        iterations=cfg["iterations"],
        learning_rate=cfg["learning_rate"],
        seed=cfg["seed"],
        way=cfg["way"],
        shot=cfg["shot"],
        n_query=cfg["queries"],
    )
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    result.provider.save(out, seed=cfg["seed"], iterations=cfg["iterations"])
    trace_path = out.with_name(out.stem + "_loss.csv")
    with trace_path.open("w") as fh:
        fh.write("iteration,loss\n")
        for it, loss in enumerate(result.loss_trace):
            fh.write(f"{it},{float(loss)!r}\n")
    _write_run_manifest(out.parent, "train", cfg)
    _log(f"train: checkpoint {out}, loss trace {trace_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# estimate


def _pipeline_config(cfg: dict) -> PipelineConfig:
    return PipelineConfig(
        ransac_seed=cfg["ransac_seed"],
        ransac_iterations=cfg["ransac_iterations"],
        ransac_threshold_mm=cfg["ransac_threshold_mm"],
        use_menu=cfg["menu"],
        oracle_recognition=cfg["oracle_recognition"],
        min_item_area=cfg["min_item_area"],
    )


def _select_meals(manifest: dict, wanted) -> list:
    meals = manifest["meals"]
    if not wanted:
        return meals
    by_id = {m["meal_id"]: m for m in meals}
    missing = [mid for mid in wanted if mid not in by_id]
    if missing:
        raise ValidationError(f"unknown meal ids: {missing}")
    return [by_id[mid] for mid in wanted]


def _estimate_one(meal_entry, base, assets, pconfig, report_dir):
    report = estimate_meal_pair(meal_entry, base, assets, pconfig)
    tmp = report_dir / f".{meal_entry['meal_id']}.json.tmp"
    final = report_dir / f"{meal_entry['meal_id']}.json"
    report.save(tmp)
    os.replace(tmp, final)
    return report


def _run_estimates(cfg: dict, out: Path) -> tuple:
    """Shared by estimate and the eval ablation rerun.

    Returns (reports sorted by meal id, assets, failure dict).
    """
    manifest, base = synthscene.load_manifest(cfg["dataset"])
    provider = None
    if cfg.get("checkpoint"):
        provider = protonet.AffineEmbeddingProvider.load(cfg["checkpoint"])
    assets = load_assets(manifest, base, provider=provider)
    pconfig = _pipeline_config(cfg)
    meals = _select_meals(manifest, cfg.get("meal_ids"))
    report_dir = out / "reports"
    report_dir.mkdir(parents=True, exist_ok=True)

    reports, failures = {}, {}
    workers = cfg["workers"] or os.cpu_count() or 1
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {
            pool.submit(_estimate_one, m, base, assets, pconfig, report_dir): m["meal_id"]
            for m in meals
        }
        for future in concurrent.futures.as_completed(futures):
            meal_id = futures[future]
            try:
                reports[meal_id] = future.result()
            except (PipelineError, LoadError, ValidationError, ValueError) as exc:
                failures[meal_id] = str(exc)
                _log(f"estimate: meal {meal_id} failed: {exc}")
    ordered = [reports[mid] for mid in sorted(reports)]
    nutrition.write_summary_csv(ordered, out / "summary.csv")
    return ordered, assets, failures


def cmd_estimate(cfg: dict) -> int:
    out = Path(cfg["out"])
    _log(f"estimate: dataset {cfg['dataset']} -> {out} (menu={'on' if cfg['menu'] else 'off'})")
    reports, _, failures = _run_estimates(cfg, out)
    run_cfg = dict(cfg)
    run_cfg["failed_meals"] = {k: failures[k] for k in sorted(failures)}
    _write_run_manifest(out, "estimate", run_cfg)
    _log(f"estimate: {len(reports)} meals done, {len(failures)} failed")
    return EXIT_PARTIAL if failures else EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _load_truth_totals(manifest: dict, base: Path) -> dict:
    totals = {}
    for meal in manifest["meals"]:
        truth = synthscene.truth_from_json(json.loads((base / meal["truth"]).read_text()))
        totals[meal["meal_id"]] = truth.totals
    return totals


def cmd_eval(cfg: dict) -> int:
    out = Path(cfg["out"])
    manifest, base = synthscene.load_manifest(cfg["dataset"])
    truth_totals = _load_truth_totals(manifest, base)

    if cfg["oracle_recognition"] or cfg["oracle_segmentation"]:
        # ablation: rerun the pipeline with the requested oracles; the label
        # rasters are the segmentation input, so the segmentation oracle is
        # always in effect and the flag only switches recognition.
        _log("eval: ablation rerun with oracle stages")
        rerun_cfg = dict(cfg)
        rerun_cfg["out"] = str(out / "ablation")
        reports, _, failures = _run_estimates(rerun_cfg, out / "ablation")
        if failures:
            _log(f"eval: {len(failures)} meals failed during ablation rerun")
    else:
        report_dir = Path(cfg["reports"]) if cfg["reports"] else out / "reports"
        paths = sorted(report_dir.glob("*.json"))
        if not paths:
            raise ValidationError(f"no reports found in {report_dir}")
        reports = [nutrition.IntakeReport.load(p) for p in paths]
        failures = {}

    orphans = sorted({r.meal_id for r in reports} - set(truth_totals))
    if orphans:
        _log(f"eval: reports without ground truth: {orphans}")
        return EXIT_VALIDATION
    if not reports:
        _log("eval: no reports to score")
        return EXIT_VALIDATION

    reports = sorted(reports, key=lambda r: r.meal_id)
    stats = {}
    for field in NUTRIENT_FIELDS:
        preds = [getattr(r.totals, field) for r in reports]
        gts = [getattr(truth_totals[r.meal_id], field) for r in reports]
        stats[field] = metrics.agreement(preds, gts)
        metrics.write_bland_altman_data(preds, gts, out / f"bland_altman_{field}.csv")
    metrics.write_agreement_csv(stats, out / "agreement.csv")
    _write_run_manifest(out, "eval", cfg)
    for field, s in stats.items():
        _log(
            f"eval: {field}: MAE {s.mae:.2f} ({s.mae_sd:.2f}), "
            f"MRE {s.mre_percent:.1f}%, r {s.pearson_r:.3f}"
        )
    return EXIT_PARTIAL if failures else EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _add_pipeline_flags(p: argparse.ArgumentParser):
    p.add_argument("--checkpoint", help="embedding checkpoint CSV (identity if omitted)")
    p.add_argument("--menu", dest="menu", action="store_true", default=True,
                   help="restrict recognition to the daily menu (default)")
    p.add_argument("--no-menu", dest="menu", action="store_false",
                   help="disable the daily-menu candidate filter")
    p.add_argument("--oracle-recognition", action="store_true",
                   help="use ground-truth categories instead of the classifier")
    p.add_argument("--ransac-seed", type=int, default=1234)
    p.add_argument("--ransac-iterations", type=int, default=1000)
    p.add_argument("--ransac-threshold-mm", type=float, default=3.0)
    p.add_argument("--min-item-area", type=int, default=200)
    p.add_argument("--workers", type=int, default=0,
                   help="worker pool size (0 = number of cores)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trayintake",
        description="Estimate per-meal nutrient intake from before/after tray depth captures.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--out", required=True, help="dataset output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--meals", type=int, default=10)
    p.add_argument("--categories-per-hyper", type=int, default=12)
    p.add_argument("--menu-size", type=int, default=7)
    p.add_argument("--feature-dim", type=int, default=27)
    p.add_argument("--feature-sigma", type=float, default=0.15)
    p.add_argument("--noise-sigma-mm", type=float, default=0.0)
    p.add_argument("--dropout-rate", type=float, default=0.0)
    p.set_defaults(func=cmd_simulate, subparser=p)

    p = sub.add_parser("train", help="train the embedding on few-shot episodes")
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--dataset", required=True, help="dataset directory or manifest path")
    p.add_argument("--out", required=True, help="checkpoint CSV path")
    p.add_argument("--iterations", type=int, default=500)
    p.add_argument("--learning-rate", type=float, default=1e-2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--way", type=int, default=10)
    p.add_argument("--shot", type=int, default=1)
    p.add_argument("--queries", type=int, default=1)
    p.add_argument("--embed-dim", type=int, default=0,
                   help="embedding dimension (0 = same as the feature dimension)")
    p.set_defaults(func=cmd_train, subparser=p)

    p = sub.add_parser("estimate", help="estimate intake for meal pairs")
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--dataset", required=True, help="dataset directory or manifest path")
    p.add_argument("--out", required=True, help="output directory for reports")
    p.add_argument("--meal-ids", nargs="*", default=None,
                   help="subset of meal ids (default: all)")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_estimate, subparser=p)

    p = sub.add_parser("eval", help="score intake reports against ground truth")
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--dataset", required=True, help="dataset directory or manifest path")
    p.add_argument("--out", required=True, help="output directory for metric CSVs")
    p.add_argument("--reports", help="directory of report JSONs (default: OUT/reports)")
    p.add_argument("--oracle-segmentation", action="store_true",
                   help="rerun the pipeline with ground-truth segmentation")
    p.add_argument("--meal-ids", nargs="*", default=None)
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_eval, subparser=p)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _merge_config(args, args.subparser)
        return args.func(cfg)
    except (ValidationError, LoadError, FileNotFoundError) as exc:
        _log(f"error: {exc}")
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostic
        _log(f"internal error: {type(exc).__name__}: {exc}")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
