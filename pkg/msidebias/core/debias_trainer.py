"""Cross-validated baseline and bias-ablated training.

The bias-ablated regime runs three phases on every batch:

1. update the feature extractor and MSI head on the task loss;
2. for each protected variable, in ``bias_names`` order, fit its BE head
   on the conditioning-class rows with the feature extractor frozen;
3. for each protected variable, push the feature extractor up the BE loss
   (towards zero correlation) with the BE head frozen.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.model_selection import StratifiedKFold

from msidebias.core.depstats import distance_correlation_sq_many, one_hot, subsample_rows
from msidebias.core.errors import (EmptyInputError, MsiDebiasError, NumericError, StratificationError,
                                   TrainingError)
from msidebias.core.neuralcore import (Optimizer, backward, corr_loss_grad, forward_features, forward_head,
                                       init_bundle, opt_step, softmax, xent_loss_grad)
from msidebias.db.artifacts import save_checkpoint, write_csv, write_json
from msidebias.models.models import Batch, Cohort, ModelBundle, TileRecord
from msidebias.schemas.schemas import (CLASS_LABELS, AuditReport, AuditRow, TilePrediction, TrainConfig,
                                       label_index)
from msidebias.services.stainprep import augment, tile_to_vector

# Set up logging
logger = logging.getLogger(__name__)

# Seed sub-stream kinds
_INIT, _SAMPLING, _AUGMENT = 21, 22, 23


# Partitions

@dataclass(frozen=True)
class Fold:
    index: int
    train_patients: Tuple[str, ...]
    val_patients: Tuple[str, ...]


@dataclass(frozen=True)
class FoldPlan:
    folds: List[Fold]

    def to_json(self) -> List[Dict]:
        return [{"fold": f.index, "train": list(f.train_patients), "validation": list(f.val_patients)}
                for f in self.folds]


def split_folds(cohort: Cohort, folds: int, seed: int) -> FoldPlan:
    """Patient-grouped, class-stratified k-fold plan"""
    labels = cohort.patient_labels()
    patients = sorted(labels)
    y = np.array([label_index(labels[p]) for p in patients])
    counts = {c: int((y == i).sum()) for i, c in enumerate(CLASS_LABELS)}
    if min(counts.values()) < folds:
        raise StratificationError(f"every class needs at least {folds} patients, got {counts}", counts=counts)

    splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    plan = []
    for i, (train_idx, val_idx) in enumerate(splitter.split(np.zeros(len(patients)), y)):
        train = tuple(patients[j] for j in train_idx)
        val = tuple(patients[j] for j in val_idx)
        assert not set(train) & set(val), "patient leakage between train and validation"
        plan.append(Fold(i, train, val))
    return FoldPlan(plan)


def tile_mask(cohort: Cohort, config: Optional[TrainConfig] = None) -> np.ndarray:
    """Tiles whose tissue type and magnification pass the config's subset filters"""
    keep = np.ones(len(cohort), dtype=bool)
    if config is None:
        return keep
    if config.tissues is not None:
        keep &= np.array([v in config.tissues for v in cohort.attribute("tissue")], dtype=bool)
    if config.magnifications is not None:
        keep &= np.array([v in config.magnifications for v in cohort.attribute("magnification")], dtype=bool)
    return keep


def fold_indices(cohort: Cohort, fold: Fold, config: Optional[TrainConfig] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Tile indices of the training and validation patients of a fold"""
    train = set(fold.train_patients)
    val = set(fold.val_patients)
    keep = tile_mask(cohort, config)
    train_idx = [i for i, t in enumerate(cohort.tiles) if keep[i] and t.patient_id in train]
    val_idx = [i for i, t in enumerate(cohort.tiles) if keep[i] and t.patient_id in val]
    return np.array(train_idx, dtype=np.int64), np.array(val_idx, dtype=np.int64)


# Sampling

def composite_weights(tiles: Sequence[TileRecord]) -> np.ndarray:
    """w_i = 1 / (tiles of the patient * patients of the class), normalised to sum 1"""
    if not tiles:
        raise EmptyInputError("composite weights of an empty tile list")
    tile_counts: Dict[str, int] = {}
    class_patients: Dict[str, set] = {}
    for t in tiles:
        tile_counts[t.patient_id] = tile_counts.get(t.patient_id, 0) + 1
        class_patients.setdefault(t.label, set()).add(t.patient_id)
    w = np.array([1.0 / (tile_counts[t.patient_id] * len(class_patients[t.label])) for t in tiles])
    return w / w.sum()


def make_batches(tiles: Sequence, weights: np.ndarray, batch_size: int, seed,
                 n_batches: Optional[int] = None) -> Iterator[np.ndarray]:
    """Weighted sampling with replacement; one epoch is ceil(len(tiles) / batch_size) batches by default"""
    rng = np.random.default_rng(seed)
    if n_batches is None:
        n_batches = math.ceil(len(tiles) / batch_size)
    p = np.asarray(weights, dtype=np.float64)
    p = p / p.sum()
    for _ in range(n_batches):
        yield rng.choice(len(tiles), size=batch_size, replace=True, p=p)


# Inputs

class TileEncoder:
    """Turns tile payloads into FE input rows.

    Feature vectors are used as they are. RGB tiles are optionally
    augmented, area-downsampled to ``input_px`` and flattened.
    """

    def __init__(self, cohort: Cohort, input_px: int = 16, augment_config=None):
        self.cohort = cohort
        self.input_px = input_px
        self.augment_config = augment_config
        self._matrix = None if cohort.is_image else cohort.payload_matrix()

    @property
    def input_dim(self) -> int:
        if self._matrix is not None:
            return self._matrix.shape[1]
        return self.input_px * self.input_px * 3

    def encode(self, indices: np.ndarray, augment_seed: Optional[Sequence[int]] = None) -> np.ndarray:
        if self._matrix is not None:
            return self._matrix[indices]
        use_augment = augment_seed is not None and self.augment_config is not None and self.augment_config.enabled
        rows = []
        for j, i in enumerate(indices):
            tile = self.cohort.tiles[int(i)].payload
            if use_augment:
                tile = augment(tile, self.augment_config, [*augment_seed, j])
            rows.append(tile_to_vector(tile, self.input_px))
        return np.stack(rows)


def bias_level_table(cohort: Cohort, names: Sequence[str], indices: np.ndarray) -> Dict[str, List[str]]:
    """Categories of every protected variable among the given tiles"""
    levels = {}
    for name in names:
        values = cohort.attribute(name)
        levels[name] = sorted({values[i] for i in indices})
    return levels


def build_batch(cohort: Cohort, indices: np.ndarray, encoder: TileEncoder, bias_codes: Dict[str, np.ndarray],
                augment_seed: Optional[Sequence[int]] = None) -> Batch:
    return Batch(encoder.encode(indices, augment_seed), cohort.labels[indices],
                 {name: codes[indices] for name, codes in bias_codes.items()},
                 [cohort.tiles[int(i)].tile_id for i in indices])


# History

@dataclass
class TrainHistory:
    """Monitored batches (loss and dc curves), epoch summaries and skipped adversarial phases.

    Batch rows measure dc on the batch itself; ``initial`` and the dc
    entries of ``epochs`` measure it on one fixed monitoring sample of the
    fold, so they are comparable across epochs.
    """
    bias_names: List[str]
    rows: List[Dict] = field(default_factory=list)
    epochs: List[Dict] = field(default_factory=list)
    skipped: List[Tuple[int, str]] = field(default_factory=list)
    # dc of the untrained features on the monitoring sample
    initial: Dict[str, float] = field(default_factory=dict)

    @property
    def bias_order(self) -> List[str]:
        return list(self.bias_names)

    def record(self, row: Dict) -> None:
        if self.rows and row["iter"] <= self.rows[-1]["iter"]:
            raise TrainingError(f"history iteration {row['iter']} is not increasing", iteration=row["iter"])
        self.rows.append(row)

    def columns(self) -> List[str]:
        return (["iter", "loss_msi"] + [f"loss_be_{n}" for n in self.bias_names] + ["dc_task"]
                + [f"dc_{n}" for n in self.bias_names] + ["epoch", "skipped"])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=self.columns())

    def epoch_end(self, column: str) -> List[float]:
        """Value of a column at the last monitored batch of every epoch"""
        last: Dict[int, float] = {}
        for row in self.rows:
            last[row["epoch"]] = row[column]
        return [last[e] for e in sorted(last)]

    def sample_curve(self, column: str) -> List[float]:
        """Monitoring-sample value of a dc column before training and after every epoch"""
        return [self.initial[column]] + [e[column] for e in self.epochs]


@dataclass
class TrainerState:
    """Optimizer state of one fold: task, per-bias BE heads and per-bias adversarial FE updates"""
    fe: Optimizer
    msi: Optimizer
    be: Dict[str, Optimizer]
    adv: Dict[str, Optimizer]
    iteration: int = 0

    @classmethod
    def create(cls, config: TrainConfig, bias_names: Sequence[str]) -> "TrainerState":
        def make() -> Optimizer:
            return Optimizer(kind=config.optimizer, momentum=config.momentum)
        return cls(make(), make(), {n: make() for n in bias_names}, {n: make() for n in bias_names})


@dataclass
class StepLosses:
    loss_msi: float
    loss_be: Dict[str, Optional[float]]
    skipped: List[str]
    # features of the whole batch right after the task phase
    features: Optional[np.ndarray] = None


# One iteration

def _task_phase(batch: Batch, bundle: ModelBundle, config: TrainConfig, state: TrainerState) -> float:
    n = len(batch)
    F, fe_cache = forward_features(bundle.fe, batch.inputs)
    logits, head_cache = forward_head(bundle.msi_head, F)
    loss, grad = xent_loss_grad(logits, batch.labels)
    if not math.isfinite(loss):
        raise NumericError(f"non-finite task loss {loss}")
    grads_msi, grad_f = backward(bundle.msi_head, head_cache, grad / n)
    grads_fe, _ = backward(bundle.fe, fe_cache, grad_f)
    opt_step(bundle.msi_head, grads_msi, state.msi, +1, config.lr_task)
    opt_step(bundle.fe, grads_fe, state.fe, +1, config.lr_task)
    return loss / n


def _bias_targets(batch: Batch, name: str, rows: np.ndarray, n_levels: int) -> np.ndarray:
    codes = batch.bias_values[name][rows]
    return one_hot(codes, n_levels)


def adversarial_step(batch: Batch, bundle: ModelBundle, config: TrainConfig, state: TrainerState) -> StepLosses:
    """Task phase, then BE-head phase and adversarial FE phase per protected variable"""
    loss_msi = _task_phase(batch, bundle, config, state)
    rho = batch.labels == label_index(config.conditioning_class)
    phase3 = rho if config.phase3_rows == "conditioned" else np.ones(len(batch), dtype=bool)
    losses: Dict[str, Optional[float]] = {}
    skipped = []

    # the feature extractor is frozen during this phase
    F_task, _ = forward_features(bundle.fe, batch.inputs)
    F_rho = F_task[rho] if rho.sum() >= 2 else None
    for name in bundle.bias_names:
        head = bundle.head(name)
        if F_rho is None:
            losses[name] = None
            skipped.append(name)
            continue
        b_hat, head_cache = forward_head(head, F_rho)
        loss, grad = corr_loss_grad(_bias_targets(batch, name, rho, head.out_dim), b_hat)
        grads_be, _ = backward(head, head_cache, grad)
        opt_step(head, grads_be, state.be[name], +1, config.lr_be)
        losses[name] = loss

    if config.lambda_ > 0:
        for name in bundle.bias_names:
            if name in skipped or phase3.sum() < 2:
                continue
            head = bundle.head(name)
            F, fe_cache = forward_features(bundle.fe, batch.inputs[phase3])
            b_hat, head_cache = forward_head(head, F)
            _, grad = corr_loss_grad(_bias_targets(batch, name, phase3, head.out_dim), b_hat)
            _, grad_f = backward(head, head_cache, grad)
            grads_fe, _ = backward(bundle.fe, fe_cache, grad_f)
            # adaptive steps ignore gradient scale, so lambda scales the step size
            opt_step(bundle.fe, grads_fe, state.adv[name], -1, config.lambda_ * config.lr_adv)
    return StepLosses(loss_msi, losses, skipped, F_task)


# Monitoring, features and predictions

def encode_categories(values: Sequence) -> np.ndarray:
    """One-hot rows of arbitrary category values, levels in sorted order"""
    _, codes = np.unique(np.asarray(values, dtype=object).astype(str), return_inverse=True)
    codes = codes.ravel()
    return one_hot(codes, int(codes.max()) + 1 if codes.size else 1)


def _dc_row(F: np.ndarray, labels: np.ndarray, targets: Dict[str, np.ndarray], seed: int) -> Dict[str, float]:
    names = list(targets)
    if F.shape[0] < 2:
        return {"dc_task": float("nan"), **{f"dc_{n}": float("nan") for n in names}}
    ys = [one_hot(labels, len(CLASS_LABELS))] + [targets[n] for n in names]
    values = distance_correlation_sq_many(F, ys, seed=seed)
    out = {"dc_task": values[0].value}
    out.update({f"dc_{n}": v.value for n, v in zip(names, values[1:])})
    return out


def _monitor(F: np.ndarray, batch: Batch, bias_names: Sequence[str], levels: Dict[str, List[str]],
             seed: int) -> Dict[str, float]:
    """dc of one batch's post-task-phase features against the label and every bias"""
    targets = {n: one_hot(batch.bias_values[n], len(levels[n])) for n in bias_names}
    return _dc_row(F, batch.labels, targets, seed)


@dataclass
class MonitorSample:
    """A fixed set of tiles the per-epoch dc values are measured on"""
    indices: np.ndarray
    inputs: np.ndarray
    labels: np.ndarray
    targets: Dict[str, np.ndarray]

    @classmethod
    def draw(cls, cohort: Cohort, indices: np.ndarray, encoder: TileEncoder, bias_names: Sequence[str],
             cap: int, seed: int) -> "MonitorSample":
        indices = indices[subsample_rows(indices.size, cap, seed)]
        targets = {}
        for name in bias_names:
            attr = cohort.attribute(name)
            targets[name] = encode_categories([attr[i] for i in indices])
        return cls(indices, encoder.encode(indices), cohort.labels[indices], targets)

    def measure(self, bundle: ModelBundle, seed: int = 0) -> Dict[str, float]:
        F, _ = forward_features(bundle.fe, self.inputs)
        return _dc_row(F, self.labels, self.targets, seed)


def extract_features(bundle: ModelBundle, cohort: Cohort, indices: Optional[np.ndarray] = None,
                     input_px: int = 16, chunk: int = 4096) -> np.ndarray:
    """Learned features of the given tiles (all tiles by default), without augmentation"""
    encoder = TileEncoder(cohort, input_px)
    indices = np.arange(len(cohort)) if indices is None else np.asarray(indices)
    parts = [forward_features(bundle.fe, encoder.encode(indices[s:s + chunk]))[0]
             for s in range(0, len(indices), chunk)]
    return np.concatenate(parts) if parts else np.empty((0, bundle.fe.out_dim))


def _probabilities(bundle: ModelBundle, encoder: TileEncoder, indices: np.ndarray, chunk: int = 4096) -> np.ndarray:
    out = []
    for s in range(0, len(indices), chunk):
        F, _ = forward_features(bundle.fe, encoder.encode(indices[s:s + chunk]))
        logits, _ = forward_head(bundle.msi_head, F)
        out.append(softmax(logits))
    return np.concatenate(out) if out else np.empty((0, 2))


def predict_tiles(bundle: ModelBundle, cohort: Cohort, indices: Optional[np.ndarray] = None,
                  input_px: int = 16, fold: int = -1) -> List[TilePrediction]:
    """MSI-H probability of every selected tile"""
    indices = np.arange(len(cohort)) if indices is None else np.asarray(indices)
    probs = _probabilities(bundle, TileEncoder(cohort, input_px), indices)[:, 1]
    preds = []
    for i, score in zip(indices, probs):
        t = cohort.tiles[int(i)]
        preds.append(TilePrediction(t.tile_id, t.patient_id, t.tissue_type, t.magnification,
                                    float(np.clip(score, 0.0, 1.0)), t.y, t.project_id, fold))
    return preds


def _validation_loss(bundle: ModelBundle, encoder: TileEncoder, cohort: Cohort, indices: np.ndarray) -> float:
    if indices.size == 0:
        return float("nan")
    probs = _probabilities(bundle, encoder, indices)
    y = cohort.labels[indices]
    return float(-np.log(np.maximum(probs[np.arange(y.size), y], 1e-12)).mean())


# Training regimes

@dataclass
class FoldResult:
    fold: Fold
    regime: str
    bundle: ModelBundle
    history: TrainHistory
    predictions: List[TilePrediction]
    epochs_trained: int
    best_epoch: int


def _train(cohort: Cohort, fold: Fold, config: TrainConfig, ablate: bool,
           run_dir: Optional[Path] = None) -> FoldResult:
    regime = "ablated" if ablate else "baseline"
    train_idx, val_idx = fold_indices(cohort, fold, config)
    if train_idx.size == 0:
        raise EmptyInputError(f"fold {fold.index} has no training tiles")
    names = list(config.bias_names)
    levels = bias_level_table(cohort, names, train_idx)
    bias_codes = {n: cohort.bias_codes(n, levels[n])[0] for n in names}

    encoder = TileEncoder(cohort, config.input_px, config.augment)
    plain = TileEncoder(cohort, config.input_px)
    head_levels = levels if ablate else {}
    bundle = init_bundle(encoder.input_dim, config.fe_hidden, config.feature_dim, config.head_hidden,
                         head_levels, [config.seed, _INIT, fold.index])
    state = TrainerState.create(config, bundle.bias_names)
    history = TrainHistory(names)
    monitor = MonitorSample.draw(cohort, val_idx if val_idx.size else train_idx, plain, names,
                                 config.audit_max_samples, config.seed)
    history.initial = monitor.measure(bundle, config.seed)
    weights = composite_weights([cohort.tiles[i] for i in train_idx])
    train_tiles = list(train_idx)

    best_loss, best_epoch, best_bundle, stale = math.inf, 0, bundle.copy(), 0
    epochs_trained = 0
    n_batches = math.ceil(train_idx.size / config.batch_size)
    logger.info(f"Fold {fold.index} ({regime}): {train_idx.size} train / {val_idx.size} validation tiles, "
                f"biases={names}")
    for epoch in range(config.epochs):
        stream = make_batches(train_tiles, weights, config.batch_size,
                              [config.seed, _SAMPLING, fold.index, epoch], n_batches)
        for b, positions in enumerate(stream):
            state.iteration += 1
            it = state.iteration
            batch = build_batch(cohort, train_idx[positions], encoder, bias_codes,
                                [config.seed, _AUGMENT, fold.index, it])
            try:
                if ablate:
                    step = adversarial_step(batch, bundle, config, state)
                else:
                    step = StepLosses(_task_phase(batch, bundle, config, state), {}, [])
            except NumericError as e:
                raise TrainingError(f"training diverged at iteration {it}: {e.message}", iteration=it)
            for name in step.skipped:
                history.skipped.append((it, name))
            if step.skipped:
                logger.debug(f"Iteration {it}: adversarial phases skipped for {step.skipped}")
            if it % config.monitor_every == 0 or b == n_batches - 1:
                row = {"iter": it, "epoch": epoch, "loss_msi": step.loss_msi, "skipped": ";".join(step.skipped)}
                row.update({f"loss_be_{n}": step.loss_be.get(n) for n in names})
                F = step.features if step.features is not None else forward_features(bundle.fe, batch.inputs)[0]
                row.update(_monitor(F, batch, names, levels, seed=it))
                history.record(row)

        epochs_trained = epoch + 1
        val_loss = _validation_loss(bundle, plain, cohort, val_idx)
        history.epochs.append({"epoch": epoch, "val_loss_msi": val_loss, **monitor.measure(bundle, config.seed)})
        logger.info(f"Fold {fold.index} ({regime}) epoch {epoch}: validation loss {val_loss:.4f}")
        if run_dir is not None:
            save_checkpoint(run_dir / "checkpoints" / f"fold{fold.index}_epoch{epoch}.ckpt", bundle,
                            config.model_dump(mode="json", by_alias=True))
        if config.early_stopping_patience is None:
            continue
        if val_loss < best_loss:
            best_loss, best_epoch, best_bundle, stale = val_loss, epoch, bundle.copy(), 0
        else:
            stale += 1
            if stale >= config.early_stopping_patience:
                logger.info(f"Fold {fold.index} ({regime}): early stop after epoch {epoch}, best epoch {best_epoch}")
                bundle = best_bundle
                break
    if config.early_stopping_patience is None:
        best_epoch = epochs_trained - 1

    predictions = predict_tiles(bundle, cohort, val_idx, config.input_px, fold.index)
    return FoldResult(fold, regime, bundle, history, predictions, epochs_trained, best_epoch)


def train_baseline(cohort: Cohort, fold: Fold, config: TrainConfig,
                   run_dir: Optional[Path] = None) -> Tuple[ModelBundle, TrainHistory]:
    """Task loss only; the bundle carries no BE heads"""
    result = _train(cohort, fold, config, ablate=False, run_dir=run_dir)
    return result.bundle, result.history


def train_bias_ablated(cohort: Cohort, fold: Fold, config: TrainConfig,
                       run_dir: Optional[Path] = None) -> Tuple[ModelBundle, TrainHistory]:
    """Three-phase adversarial training against every protected variable"""
    if not config.bias_names:
        raise TrainingError("bias-ablated training needs at least one bias name", iteration=0)
    result = _train(cohort, fold, config, ablate=True, run_dir=run_dir)
    return result.bundle, result.history


# Audit

def audit_feature_matrix(F: np.ndarray, labels: np.ndarray, variables: Dict[str, List[str]], model: str,
                         conditioning_class: str = "MSS", max_subgroup_levels: int = 50,
                         seed: int = 0) -> List[AuditRow]:
    """dc of features against the task and every variable, overall, per subgroup and within one class.

    ``variables`` maps a candidate name to its per-row category. Subgroups
    are the categories of every candidate with at most
    ``max_subgroup_levels`` categories; a subgroup with fewer than two
    rows yields rows whose dc is None.
    """
    values = {name: np.asarray(v, dtype=object) for name, v in variables.items()}
    names = list(values)
    labels = np.asarray(labels, dtype=np.int64)

    def measure(subgroup: str, mask: np.ndarray, targets: List[str]) -> List[AuditRow]:
        n = int(mask.sum())
        if n < 2:
            return [AuditRow(model=model, subgroup=subgroup, variable=t, dc=None, n=n) for t in targets]
        ys = [one_hot(labels[mask], len(CLASS_LABELS)) if t == "task" else encode_categories(values[t][mask])
              for t in targets]
        dcs = distance_correlation_sq_many(F[mask], ys, seed=seed)
        return [AuditRow(model=model, subgroup=subgroup, variable=t, dc=d.value, n=d.n)
                for t, d in zip(targets, dcs)]

    everything = np.ones(labels.size, dtype=bool)
    rows = measure("All", everything, ["task"] + names)
    for name in names:
        categories = sorted(set(values[name].astype(str)))
        if len(categories) > max_subgroup_levels:
            logger.info(f"Audit: not subgrouping by {name} ({len(categories)} categories)")
            continue
        others = [o for o in names if o != name]
        for category in categories:
            rows += measure(f"{name}={category}", values[name].astype(str) == category, ["task"] + others)
    rho = label_index(conditioning_class)
    rows += measure(f"label={conditioning_class}", labels == rho, names)
    return rows


def audit_biases(bundle: ModelBundle, cohort: Cohort, candidate_biases: Sequence[str], model: str = "model",
                 indices: Optional[np.ndarray] = None, config: Optional[TrainConfig] = None) -> AuditReport:
    """Squared distance correlation audit of a trained bundle's features"""
    config = config or TrainConfig()
    indices = np.arange(len(cohort)) if indices is None else np.asarray(indices)
    keep = subsample_rows(indices.size, config.audit_max_samples, config.seed)
    if keep.size < indices.size:
        logger.info(f"Audit of {model}: using {keep.size} of {indices.size} tiles")
    indices = indices[keep]
    F = extract_features(bundle, cohort, indices, config.input_px)
    variables = {}
    for name in candidate_biases:
        attr = cohort.attribute(name)
        variables[name] = [attr[i] for i in indices]
    rows = audit_feature_matrix(F, cohort.labels[indices], variables, model, config.conditioning_class,
                                config.max_subgroup_levels, seed=config.seed)
    return AuditReport(rows=rows)


def audit_frame(report: AuditReport) -> pd.DataFrame:
    return pd.DataFrame([r.model_dump() for r in report.rows], columns=["model", "subgroup", "variable", "dc", "n"])


# Cross-validation

@dataclass
class CrossValidationResult:
    plan: FoldPlan
    folds: List[FoldResult]
    audit: AuditReport

    @property
    def predictions(self) -> List[TilePrediction]:
        return [p for f in self.folds for p in f.predictions]


def _number(value: float) -> Optional[float]:
    return None if value is None or math.isnan(value) else float(value)


def run_cross_validation(cohort: Cohort, config: TrainConfig, ablate: bool,
                         run_dir: Optional[Union[str, Path]] = None) -> CrossValidationResult:
    """Train every fold, audit its validation tiles and write history, checkpoints and audit rows"""
    run_dir = Path(run_dir) if run_dir is not None else None
    plan = split_folds(cohort, config.folds, config.seed)
    regime = "ablated" if ablate else "baseline"
    results, audit_rows, fold_meta = [], [], []
    for fold in plan.folds:
        try:
            result = _train(cohort, fold, config, ablate, run_dir)
        except MsiDebiasError:
            logger.error(f"Fold {fold.index} ({regime}) failed")
            raise
        _, val_idx = fold_indices(cohort, fold, config)
        report = audit_biases(result.bundle, cohort, config.bias_names, f"{regime}:fold{fold.index}",
                              val_idx, config)
        audit_rows += report.rows
        results.append(result)
        fold_meta.append({"fold": fold.index, "train": list(fold.train_patients),
                          "validation": list(fold.val_patients), "bias_order": result.history.bias_order,
                          "epochs_trained": result.epochs_trained, "best_epoch": result.best_epoch,
                          "validation_loss": [_number(e["val_loss_msi"]) for e in result.history.epochs],
                          "monitor_dc": {"initial": {k: _number(v) for k, v in result.history.initial.items()},
                                         "epochs": [{k: _number(v) for k, v in e.items() if k.startswith("dc_")}
                                                    for e in result.history.epochs]},
                          "skipped_adversarial": len(result.history.skipped)})
        if run_dir is not None:
            write_csv(run_dir / f"history_fold{fold.index}.csv", result.history.to_frame())
            save_checkpoint(run_dir / "checkpoints" / f"fold{fold.index}_final.ckpt", result.bundle,
                            config.model_dump(mode="json", by_alias=True))
    audit = AuditReport(rows=audit_rows)
    if run_dir is not None:
        write_json(run_dir / "folds.json", {"regime": regime, "folds": fold_meta})
        write_csv(run_dir / "audit.csv", audit_frame(audit))
    return CrossValidationResult(plan, results, audit)
