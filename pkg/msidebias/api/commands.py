"""Command bodies behind the ``msidebias`` entry point.

Each command takes a validated RunConfig, does its work, writes its
artifacts atomically and returns the directory it wrote to. Errors
propagate as MsiDebiasError subclasses; msidebias.main maps them to
exit codes.
"""
import json
import logging
import math
import platform
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from PIL import Image
from pydantic import ValidationError

from msidebias.core import settings
from msidebias.core.debias_trainer import (Fold, audit_biases, audit_frame, extract_features, fold_indices,
                                           predict_tiles, run_cross_validation, tile_mask)
from msidebias.core.depstats import pca_project, subsample_rows
from msidebias.core.errors import (ConfigError, EmptyCohortError, ManifestParseError, MissingArtifactError,
                                   StainEstimationError)
from msidebias.db.artifacts import load_checkpoint, read_csv, read_json, write_csv, write_json
from msidebias.models.models import Cohort, TileRecord
from msidebias.schemas.schemas import CLASS_LABELS, RunConfig
from msidebias.services import clinmetrics, stainprep, synthcohort

# Set up logging
logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


# Configuration

def _set_path(tree: Dict[str, Any], dotted: str, value: Any) -> None:
    node = tree
    *parents, leaf = dotted.split(".")
    for key in parents:
        node = node.setdefault(key, {})
    node[leaf] = value


def load_run_config(path: Optional[PathLike] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Read a JSON run configuration, apply dotted-path overrides and validate it.

    Validation failures become a ConfigError naming the offending field path.
    """
    raw: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(f"missing config file {path}", path=str(path))
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path.name} is not valid JSON: {e}")
        if not isinstance(raw, dict):
            raise ConfigError(f"{path.name} must hold a JSON object")
    for dotted, value in (overrides or {}).items():
        if value is not None:
            _set_path(raw, dotted, value)
    return validate_run_config(raw)


def validate_run_config(raw: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(part) for part in first["loc"]) or "config"
        raise ConfigError(f"{field}: {first['msg']}", field=field)


def _output_dir(out: Optional[PathLike], config: RunConfig, command: str) -> Path:
    target = out or config.out or Path(settings.OUTPUT_DIR) / command
    path = Path(target)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_config(out: Path, config: RunConfig) -> None:
    """The effective configuration, without the output directory it was written to"""
    write_json(out / "config.json", config.model_dump(mode="json", by_alias=True, exclude={"out"}))


def _write_run_meta(out: Path, command: str, started: datetime) -> None:
    """Timestamps and host of every command that wrote into ``out``"""
    path = out / "run_meta.json"
    meta = read_json(path) if path.exists() else {}
    meta[command] = {
        "started": started.isoformat(),
        "finished": _now().isoformat(),
        "host": platform.node(),
        "python": platform.python_version(),
    }
    write_json(path, meta)


def _now() -> datetime:
    return datetime.now(timezone.utc)


# synth

def cmd_synth(config: RunConfig, out: Optional[PathLike] = None, write_spots: bool = False) -> Path:
    """Generate a cohort, save it and print its summary"""
    started = _now()
    out = _output_dir(out, config, "synth")
    cohort = synthcohort.generate_cohort(config.cohort, config.preprocess)
    synthcohort.save_cohort(cohort, out)
    summary = synthcohort.summarize_cohort(cohort)
    write_json(out / "cohort_summary.json", summary)
    if write_spots and config.cohort.mode == "spot-image":
        synthcohort.save_spot_images(config.cohort, out / "spots")
    _write_config(out, config)
    _write_run_meta(out, "synth", started)
    print(json.dumps({k: summary[k] for k in ("n_tiles", "n_patients", "patients_per_class",
                                              "patients_per_project")}, sort_keys=True))
    for glass_id, g in summary["glasses"].items():
        print(f"{glass_id}: project={g['project_id']} MSS={g['spots']['MSS']} "
              f"MSI-H={g['spots']['MSI-H']} purity={g['purity']:.2f}")
    return out


# preprocess

def _read_png(path: Path, mode: str) -> np.ndarray:
    if not path.exists():
        raise MissingArtifactError(f"missing spot image {path}", path=str(path))
    with Image.open(path) as img:
        return np.asarray(img.convert(mode), dtype=np.uint8).copy()


def cmd_preprocess(spot_dir: PathLike, config: RunConfig, out: Optional[PathLike] = None) -> Path:
    """Normalize, tile and ROI-filter every spot listed in spots.csv into a cohort directory"""
    started = _now()
    spot_dir = Path(spot_dir)
    out = _output_dir(out, config, "preprocess")
    frame = read_csv(spot_dir / "spots.csv")
    missing = [c for c in synthcohort.SPOT_COLUMNS if c not in frame.columns]
    if missing:
        raise ManifestParseError(f"spots.csv lacks columns {missing}", line=1, column=missing[0])
    spots = frame.to_dict("records")
    for line, row in enumerate(spots, start=2):
        if row["label"] not in CLASS_LABELS:
            raise ManifestParseError(f"unknown label '{row['label']}'", line=line, column="label")

    prep = config.preprocess

    def load(row) -> tuple:
        stem = f"{row['patient_id']}_{row['spot_id']}"
        return _read_png(spot_dir / f"{stem}.png", "RGB"), _read_png(spot_dir / f"{stem}_mask.png", "L")

    cohort_profile = None
    if prep.macenko and prep.cohort_normalization:
        normalizer = stainprep.StainNormalizer(prep.od_threshold, prep.angle_percentile)
        first_pass = []
        for row in spots:
            try:
                first_pass.append(normalizer.transform(load(row)[0]))
            except StainEstimationError as e:
                logger.warning(f"Spot {row['patient_id']}/{row['spot_id']} left out of the cohort profile: {e}")
        cohort_profile = normalizer.fit_cohort(first_pass).target

    tiles: List[TileRecord] = []
    for row in spots:
        image, mask = load(row)
        meta = stainprep.SpotMeta(row["patient_id"], row["spot_id"])
        for t in stainprep.preprocess_spot(image, mask, meta, prep, cohort_profile):
            tiles.append(TileRecord(t.name, row["patient_id"], row["spot_id"], row["glass_id"], row["project_id"],
                                    row["label"], t.tissue, t.magnification, t.image))
    if not tiles:
        raise EmptyCohortError(f"no tile survived preprocessing of {len(spots)} spots")
    synthcohort.save_cohort(Cohort(None, tiles, {}), out)
    _write_config(out, config)
    _write_run_meta(out, "preprocess", started)
    logger.info(f"Preprocessed {len(spots)} spots into {len(tiles)} tiles")
    return out


# audit

def cmd_audit(cohort_dir: PathLike, checkpoint: PathLike, config: RunConfig,
              out: Optional[PathLike] = None) -> Path:
    """Squared distance correlation audit of one checkpoint over a cohort"""
    started = _now()
    bundle = load_checkpoint(checkpoint)
    cohort = synthcohort.load_cohort(cohort_dir)
    out = _output_dir(out, config, "audit")
    tag = Path(checkpoint).name.rsplit(".", 1)[0]
    indices = np.flatnonzero(tile_mask(cohort, config.train))
    report = audit_biases(bundle, cohort, config.train.bias_names, tag, indices, config=config.train)
    write_csv(out / "audit.csv", audit_frame(report))
    _write_config(out, config)
    _write_run_meta(out, "audit", started)
    return out


# train

def cmd_train(cohort_dir: PathLike, config: RunConfig, ablate: bool = False,
              out: Optional[PathLike] = None) -> Path:
    """Cross-validated baseline or bias-ablated training into a run directory"""
    if ablate and not config.train.bias_names:
        raise ConfigError("--ablate needs at least one entry in train.bias_names", field="train.bias_names")
    started = _now()
    cohort = synthcohort.load_cohort(cohort_dir)
    out = _output_dir(out, config, "train")
    _write_config(out, config)
    result = run_cross_validation(cohort, config.train, ablate, out)
    logger.info(f"Training finished: {len(result.folds)} folds in {out}")
    _write_run_meta(out, "train", started)
    return out


# eval

def _clean(value):
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


def _curves(run_dir: Path, n_folds: int) -> Dict[str, Dict[str, list]]:
    curves = {}
    for i in range(n_folds):
        frame = read_csv(run_dir / f"history_fold{i}.csv")
        fold = {}
        for column in frame.columns:
            if column == "skipped":
                fold[column] = list(frame[column])
                continue
            values = pd.to_numeric(frame[column], errors="coerce")
            fold[column] = [_clean(float(v)) for v in values]
        curves[f"fold{i}"] = fold
    return curves


def _pca_scatter(bundle, cohort: Cohort, indices: np.ndarray, config: RunConfig) -> Dict[str, Any]:
    keep = subsample_rows(indices.size, config.metrics.pca_max_points, config.train.seed)
    indices = indices[keep]
    F = extract_features(bundle, cohort, indices, config.train.input_px)
    k = min(2, F.shape[0], F.shape[1])
    if F.shape[0] < 2:
        return {"explained_variance_ratio": [], "points": []}
    pca = pca_project(F, k)
    names = ["label"] + list(config.train.bias_names)
    values = {n: cohort.attribute(n) for n in config.train.bias_names}
    points = []
    for row, i in enumerate(indices):
        t = cohort.tiles[int(i)]
        point = {"tile_id": t.tile_id, "x": float(pca.scores[row, 0]),
                 "y": float(pca.scores[row, 1]) if k > 1 else 0.0, "label": t.label}
        point.update({n: values[n][int(i)] for n in names[1:]})
        points.append(point)
    return {"explained_variance_ratio": [float(v) for v in pca.explained_variance_ratio], "points": points}


def cmd_eval(run_dir: PathLike, cohort_dir: PathLike, prevalence: Optional[float] = None,
             out: Optional[PathLike] = None) -> Path:
    """Validation predictions, clinical metrics, error strata, PCA scatters and learning curves of a run"""
    started = _now()
    run_dir = Path(run_dir)
    folds_meta = read_json(run_dir / "folds.json")
    config = RunConfig.model_validate(read_json(run_dir / "config.json"))
    if prevalence is not None:
        raw = config.model_dump(mode="json", by_alias=True)
        raw["metrics"]["prevalence"] = prevalence
        config = validate_run_config(raw)
    cohort = synthcohort.load_cohort(cohort_dir)
    out = Path(out) if out is not None else run_dir
    out.mkdir(parents=True, exist_ok=True)
    metrics_cfg = config.metrics

    predictions, per_fold, pca = [], [], {}
    for meta in folds_meta["folds"]:
        i = meta["fold"]
        bundle = load_checkpoint(run_dir / "checkpoints" / f"fold{i}_final.ckpt")
        fold = Fold(i, tuple(meta["train"]), tuple(meta["validation"]))
        _, val_idx = fold_indices(cohort, fold, config.train)
        fold_preds = predict_tiles(bundle, cohort, val_idx, config.train.input_px, i)
        predictions += fold_preds
        reports = clinmetrics.build_metrics_report(fold_preds, metrics_cfg.prevalence, metrics_cfg.confidence,
                                                   metrics_cfg.threshold)
        per_fold.append({"fold": i, **{level: r.model_dump(mode="json") for level, r in reports.items()}})
        pca[f"fold{i}"] = _pca_scatter(bundle, cohort, val_idx, config)

    reports = clinmetrics.build_metrics_report(predictions, metrics_cfg.prevalence, metrics_cfg.confidence,
                                               metrics_cfg.threshold)
    per_project = clinmetrics.per_group_metrics(predictions, "project_id", metrics_cfg.threshold)
    write_json(out / "metrics.json", {
        "regime": folds_meta["regime"],
        "prevalence": metrics_cfg.prevalence,
        **{level: r.model_dump(mode="json") for level, r in reports.items()},
        "per_fold": per_fold,
        "per_project": [g.model_dump(mode="json") for g in per_project],
    })
    strata = [{"by": by, **r.model_dump()} for by, rows in (("tissue", reports["tile"].per_tissue),
                                                            ("magnification", reports["tile"].per_magnification))
              for r in rows]
    write_csv(out / "strata.csv", pd.DataFrame(strata, columns=["by", "stratum", "fpr", "fnr", "n_pos", "n_neg"]))
    write_json(out / "pca.json", pca)
    write_json(out / "curves.json", _curves(run_dir, len(folds_meta["folds"])))
    clinmetrics.write_predictions_csv(out / "predictions.csv", predictions)
    _write_run_meta(out, "eval", started)
    logger.info(f"Evaluated {len(predictions)} validation tiles from {run_dir}")
    return out


# report

def _dc_summary(run_dir: Path, conditioning_class: str) -> Dict[str, Dict[str, Dict[str, Optional[float]]]]:
    frame = read_csv(run_dir / "audit.csv")
    frame["dc"] = pd.to_numeric(frame["dc"], errors="coerce")
    summary = {}
    for key, subgroup in (("overall", "All"), ("conditioned", f"label={conditioning_class}")):
        rows = frame[frame["subgroup"] == subgroup]
        stats = {}
        for variable, group in rows.groupby("variable"):
            values = group["dc"].dropna()
            stats[variable] = {"mean": _clean(float(values.mean())) if len(values) else None,
                               "sd": _clean(float(values.std(ddof=0))) if len(values) else None,
                               "n_models": int(len(values))}
        summary[key] = stats
    return summary


_FOLD_METRICS = ("auc", "balanced_accuracy", "sensitivity", "specificity", "accuracy", "ppv", "npv")


def _delta(a: Optional[float], b: Optional[float]) -> Optional[float]:
    return None if a is None or b is None else b - a


def _fold_deltas(reference: Dict, other: Dict) -> List[Dict]:
    ref_folds = {f["fold"]: f for f in reference["per_fold"]}
    rows = []
    for fold in other["per_fold"]:
        base = ref_folds.get(fold["fold"])
        if base is None:
            continue
        row = {"fold": fold["fold"]}
        for level in ("tile", "patient"):
            for metric in _FOLD_METRICS:
                row[f"{level}_{metric}"] = _delta(base[level][metric]["value"], fold[level][metric]["value"])
        rows.append(row)
    return rows


def _project_deltas(reference: Dict, other: Dict) -> List[Dict]:
    ref = {g["group"]: g for g in reference["per_project"]}
    rows = []
    for g in other["per_project"]:
        base = ref.get(g["group"])
        if base is None:
            continue
        rows.append({"project_id": g["group"],
                     "reference_auc": base["auc"], "auc": g["auc"], "delta_auc": _delta(base["auc"], g["auc"]),
                     "reference_balanced_accuracy": base["balanced_accuracy"],
                     "balanced_accuracy": g["balanced_accuracy"],
                     "delta_balanced_accuracy": _delta(base["balanced_accuracy"], g["balanced_accuracy"])})
    return rows


def cmd_report(run_dirs: Sequence[PathLike], out: Optional[PathLike] = None) -> Path:
    """Pair every evaluated run against the first one"""
    if len(run_dirs) < 2:
        raise ConfigError(f"report needs at least 2 run directories, got {len(run_dirs)}", field="run_dirs")
    started = _now()
    runs = []
    for path in map(Path, run_dirs):
        config = RunConfig.model_validate(read_json(path / "config.json"))
        runs.append({"run": str(path), "metrics": read_json(path / "metrics.json"),
                     "dc": _dc_summary(path, config.train.conditioning_class)})
    reference = runs[0]
    comparisons = []
    for run in runs[1:]:
        dc_delta = {}
        for key in ("overall", "conditioned"):
            dc_delta[key] = {v: _delta(s["mean"], run["dc"][key].get(v, {}).get("mean"))
                             for v, s in reference["dc"][key].items()}
        comparisons.append({"run": run["run"], "folds": _fold_deltas(reference["metrics"], run["metrics"]),
                            "projects": _project_deltas(reference["metrics"], run["metrics"]),
                            "dc_delta": dc_delta})
    target = Path(out) if out is not None else Path(settings.OUTPUT_DIR) / "report"
    target.mkdir(parents=True, exist_ok=True)
    write_json(target / "comparison.json", {
        "reference": reference["run"],
        "runs": [{"run": r["run"], "regime": r["metrics"].get("regime"), "dc": r["dc"]} for r in runs],
        "comparisons": comparisons,
    })
    _write_run_meta(target, "report", started)
    return target
