"""Clinical evaluation of tile and patient predictions.

Rates that cannot be computed (a class is missing, a denominator is zero)
are reported as None rather than raised, except where noted.
"""
import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import beta, norm, rankdata

from msidebias.core.errors import (DegenerateVarianceError, DomainError, ManifestParseError,
                                   UndefinedMetricError)
from msidebias.db.artifacts import read_csv, write_csv
from msidebias.schemas.schemas import (CLASS_LABELS, ErrorRates, Estimate, GroupMetrics, Interval,
                                       MetricsReport, PatientPrediction, TilePrediction)

# Set up logging
logger = logging.getLogger(__name__)

PREDICTION_COLUMNS = ["tile_id", "patient_id", "tissue", "magnification", "score", "label"]


def _scores_labels(predictions: Sequence) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.array([p.score for p in predictions], dtype=np.float64)
    labels = np.array([p.true_label for p in predictions], dtype=np.int64)
    return scores, labels


def _auc(scores: np.ndarray, labels: np.ndarray) -> float:
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AUC needs both classes (positives={n_pos}, negatives={n_neg})")
    # Mann-Whitney U from mid-ranks: ties count one half
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_auc(predictions: Sequence[TilePrediction]) -> float:
    """Probability that a random MSI-H prediction outscores a random MSS one"""
    return _auc(*_scores_labels(predictions))


def auc_ci(auc: float, n_pos: int, n_neg: int, confidence: float = 0.95) -> Tuple[float, float]:
    """Normal interval with the Hanley-McNeil standard error, clipped to [0, 1]"""
    q1 = auc / (2.0 - auc)
    q2 = 2.0 * auc ** 2 / (1.0 + auc)
    var = (auc * (1 - auc) + (n_pos - 1) * (q1 - auc ** 2) + (n_neg - 1) * (q2 - auc ** 2)) / (n_pos * n_neg)
    half = norm.ppf(0.5 + confidence / 2.0) * np.sqrt(max(var, 0.0))
    return float(max(0.0, auc - half)), float(min(1.0, auc + half))


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int
    sensitivity: Optional[float]
    specificity: Optional[float]
    balanced_accuracy: Optional[float]

    @property
    def fpr(self) -> Optional[float]:
        return None if self.specificity is None else 1.0 - self.specificity

    @property
    def fnr(self) -> Optional[float]:
        return None if self.sensitivity is None else 1.0 - self.sensitivity


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den else None


def _confusion(decisions: np.ndarray, labels: np.ndarray) -> Confusion:
    tp = int(np.sum(decisions & (labels == 1)))
    fp = int(np.sum(decisions & (labels == 0)))
    tn = int(np.sum(~decisions & (labels == 0)))
    fn = int(np.sum(~decisions & (labels == 1)))
    s = _ratio(tp, tp + fn)
    e = _ratio(tn, tn + fp)
    ba = (s + e) / 2.0 if s is not None and e is not None else None
    return Confusion(tp, fp, tn, fn, s, e, ba)


def confusion(predictions: Sequence[TilePrediction], threshold: float = 0.5) -> Confusion:
    """Counts and rates at ``score >= threshold``; a rate without its class is None"""
    scores, labels = _scores_labels(predictions)
    return _confusion(scores >= threshold, labels)


@dataclass(frozen=True)
class AdjustedRates:
    accuracy: Optional[float]
    ppv: Optional[float]
    npv: Optional[float]


def prevalence_adjusted(s: float, e: float, p: float) -> AdjustedRates:
    """Accuracy, PPV and NPV at an assumed prevalence ``p``"""
    for name, value in (("sensitivity", s), ("specificity", e), ("prevalence", p)):
        if not 0.0 <= value <= 1.0:
            raise DomainError(f"{name}={value} outside [0, 1]")
    accuracy = s * p + e * (1.0 - p)
    ppv_den = s * p + (1.0 - e) * (1.0 - p)
    npv_den = e * (1.0 - p) + (1.0 - s) * p
    ppv = s * p / ppv_den if ppv_den > 0 else None
    npv = e * (1.0 - p) / npv_den if npv_den > 0 else None
    return AdjustedRates(accuracy, ppv, npv)


def clopper_pearson(k: int, n: int, confidence: float = 0.95) -> Tuple[float, float]:
    """Exact binomial interval from Beta quantiles"""
    if n < 1 or k < 0 or k > n:
        raise DomainError(f"need 0 <= k <= n and n >= 1, got k={k}, n={n}")
    if not 0.0 < confidence < 1.0:
        raise DomainError(f"confidence={confidence} outside (0, 1)")
    alpha = 1.0 - confidence
    lo = 0.0 if k == 0 else float(beta.ppf(alpha / 2.0, k, n - k + 1))
    hi = 1.0 if k == n else float(beta.ppf(1.0 - alpha / 2.0, k + 1, n - k))
    return lo, hi


def _expit(x: float) -> float:
    return float(1.0 / (1.0 + np.exp(-x)))


def logit_ci_predictive(s: float, e: float, p: float, n_pos: int, n_neg: int,
                        confidence: float = 0.95) -> Tuple[Tuple[float, float], Tuple[float, float]]:
    """Logit intervals of the prevalence-adjusted PPV and NPV"""
    if not (0.0 < s < 1.0 and 0.0 < e < 1.0):
        raise DegenerateVarianceError(f"logit interval undefined at S={s}, E={e}")
    if not 0.0 < p < 1.0:
        raise DomainError(f"prevalence={p} outside (0, 1)")
    if n_pos < 1 or n_neg < 1:
        raise DomainError(f"need n_pos, n_neg >= 1, got {n_pos}, {n_neg}")
    z = norm.ppf(0.5 + confidence / 2.0)
    odds = np.log(p / (1.0 - p))
    logit_ppv = odds + np.log(s / (1.0 - e))
    sd_ppv = np.sqrt((1.0 - s) / (s * n_pos) + e / ((1.0 - e) * n_neg))
    logit_npv = -odds + np.log(e / (1.0 - s))
    sd_npv = np.sqrt(s / ((1.0 - s) * n_pos) + (1.0 - e) / (e * n_neg))
    ppv = (_expit(logit_ppv - z * sd_ppv), _expit(logit_ppv + z * sd_ppv))
    npv = (_expit(logit_npv - z * sd_npv), _expit(logit_npv + z * sd_npv))
    return ppv, npv


def aggregate_patient(predictions: Iterable[TilePrediction], threshold: float = 0.5) -> List[PatientPrediction]:
    """Majority vote of tile decisions per patient; ties go to MSI-H"""
    votes: Dict[str, List[int]] = defaultdict(list)
    truth: Dict[str, int] = {}
    projects: Dict[str, str] = {}
    for p in predictions:
        votes[p.patient_id].append(int(p.score >= threshold))
        truth.setdefault(p.patient_id, p.true_label)
        projects.setdefault(p.patient_id, p.project_id)
    out = []
    for patient_id in sorted(votes):
        v = votes[patient_id]
        if not v:
            logger.warning(f"Patient {patient_id} has no tiles and is excluded")
            continue
        fraction = sum(v) / len(v)
        out.append(PatientPrediction(patient_id, int(fraction >= 0.5), fraction, truth[patient_id], len(v),
                                     projects[patient_id]))
    return out


def stratified_error_rates(predictions: Sequence[TilePrediction], by: str = "tissue",
                           threshold: float = 0.5) -> List[ErrorRates]:
    """FPR and FNR per tissue type or magnification"""
    attr = {"tissue": "tissue_type", "magnification": "magnification"}.get(by)
    if attr is None:
        raise DomainError(f"cannot stratify by '{by}'")
    groups: Dict[str, List[TilePrediction]] = defaultdict(list)
    for p in predictions:
        groups[getattr(p, attr)].append(p)
    rows = []
    for stratum in sorted(groups):
        c = confusion(groups[stratum], threshold)
        rows.append(ErrorRates(stratum=stratum, fpr=c.fpr, fnr=c.fnr, n_pos=c.tp + c.fn, n_neg=c.tn + c.fp))
    return rows


def _report(level: str, scores: np.ndarray, labels: np.ndarray, decisions: np.ndarray,
            prevalence: float, confidence: float) -> MetricsReport:
    c = _confusion(decisions, labels)
    n_pos, n_neg = c.tp + c.fn, c.tn + c.fp

    auc = Estimate()
    if n_pos and n_neg:
        value = _auc(scores, labels)
        lo, hi = auc_ci(value, n_pos, n_neg, confidence)
        auc = Estimate(value=value, ci=Interval(lo=lo, hi=hi))

    def exact(k: int, n: int, value: Optional[float]) -> Estimate:
        if value is None:
            return Estimate()
        lo, hi = clopper_pearson(k, n, confidence)
        return Estimate(value=value, ci=Interval(lo=lo, hi=hi))

    sens = exact(c.tp, n_pos, c.sensitivity)
    spec = exact(c.tn, n_neg, c.specificity)
    balanced = accuracy = ppv = npv = Estimate()
    if sens.value is not None and spec.value is not None:
        balanced = Estimate(value=c.balanced_accuracy,
                            ci=Interval(lo=(sens.ci.lo + spec.ci.lo) / 2, hi=(sens.ci.hi + spec.ci.hi) / 2))
        adjusted = prevalence_adjusted(sens.value, spec.value, prevalence)
        accuracy = Estimate(value=adjusted.accuracy, ci=Interval(
            lo=sens.ci.lo * prevalence + spec.ci.lo * (1 - prevalence),
            hi=sens.ci.hi * prevalence + spec.ci.hi * (1 - prevalence)))
        try:
            ppv_ci, npv_ci = logit_ci_predictive(sens.value, spec.value, prevalence, n_pos, n_neg, confidence)
            ppv = Estimate(value=adjusted.ppv, ci=Interval(lo=ppv_ci[0], hi=ppv_ci[1]))
            npv = Estimate(value=adjusted.npv, ci=Interval(lo=npv_ci[0], hi=npv_ci[1]))
        except (DegenerateVarianceError, DomainError) as e:
            logger.warning(f"No logit interval for {level}-level predictive values: {e}")
            ppv, npv = Estimate(value=adjusted.ppv), Estimate(value=adjusted.npv)
    return MetricsReport(level=level, n=int(labels.size), prevalence=prevalence, tp=c.tp, fp=c.fp, tn=c.tn,
                         fn=c.fn, auc=auc, sensitivity=sens, specificity=spec, balanced_accuracy=balanced,
                         accuracy=accuracy, ppv=ppv, npv=npv)


def build_metrics_report(predictions: Sequence[TilePrediction], prevalence: float = 0.15,
                         confidence: float = 0.95, threshold: float = 0.5) -> Dict[str, MetricsReport]:
    """Tile-level and patient-level (majority vote, vote-fraction AUC) reports"""
    scores, labels = _scores_labels(predictions)
    tile = _report("tile", scores, labels, scores >= threshold, prevalence, confidence)
    tile.per_tissue = stratified_error_rates(predictions, "tissue", threshold)
    tile.per_magnification = stratified_error_rates(predictions, "magnification", threshold)

    patients = aggregate_patient(predictions, threshold)
    p_scores = np.array([p.vote_fraction for p in patients])
    p_labels = np.array([p.true_label for p in patients], dtype=np.int64)
    p_decisions = np.array([p.label == 1 for p in patients], dtype=bool)
    patient = _report("patient", p_scores, p_labels, p_decisions, prevalence, confidence)
    return {"tile": tile, "patient": patient}


def per_group_metrics(predictions: Sequence[TilePrediction], key: str = "project_id",
                      threshold: float = 0.5) -> List[GroupMetrics]:
    """AUC and balanced accuracy inside each group (e.g. per project of origin)"""
    groups: Dict[str, List[TilePrediction]] = defaultdict(list)
    for p in predictions:
        groups[str(getattr(p, key))].append(p)
    rows = []
    for group in sorted(groups):
        scores, labels = _scores_labels(groups[group])
        c = _confusion(scores >= threshold, labels)
        try:
            auc = _auc(scores, labels)
        except UndefinedMetricError:
            auc = None
        rows.append(GroupMetrics(group=group, n=int(labels.size), n_pos=c.tp + c.fn, n_neg=c.tn + c.fp,
                                 auc=auc, balanced_accuracy=c.balanced_accuracy))
    return rows


# Predictions CSV

def write_predictions_csv(path: Union[str, Path], predictions: Sequence[TilePrediction]) -> Path:
    frame = pd.DataFrame({
        "tile_id": [p.tile_id for p in predictions],
        "patient_id": [p.patient_id for p in predictions],
        "tissue": [p.tissue_type for p in predictions],
        "magnification": [p.magnification for p in predictions],
        "score": [repr(float(p.score)) for p in predictions],
        "label": [CLASS_LABELS[p.true_label] for p in predictions],
        "project_id": [p.project_id for p in predictions],
        "fold": [p.fold for p in predictions],
    })
    return write_csv(path, frame)


def _parse_label(token: str, line: int) -> int:
    if token in CLASS_LABELS:
        return CLASS_LABELS.index(token)
    if token in ("0", "1"):
        return int(token)
    raise ManifestParseError(f"unknown label '{token}'", line=line, column="label")


def read_predictions_csv(path: Union[str, Path]) -> List[TilePrediction]:
    """Read ``tile_id,patient_id,tissue,magnification,score,label[,project_id,fold]``"""
    frame = read_csv(path)
    missing = [c for c in PREDICTION_COLUMNS if c not in frame.columns]
    if missing:
        raise ManifestParseError(f"missing columns {missing}", line=1, column=missing[0])
    out = []
    for offset, row in enumerate(frame.to_dict("records")):
        line = offset + 2
        try:
            score = float(row["score"])
        except ValueError:
            raise ManifestParseError(f"score '{row['score']}' is not a number", line=line, column="score")
        if not 0.0 <= score <= 1.0:
            raise ManifestParseError(f"score {score} outside [0, 1]", line=line, column="score")
        out.append(TilePrediction(row["tile_id"], row["patient_id"], row["tissue"], row["magnification"], score,
                                  _parse_label(row["label"], line), row.get("project_id", ""),
                                  int(row["fold"]) if row.get("fold") else -1))
    return out
