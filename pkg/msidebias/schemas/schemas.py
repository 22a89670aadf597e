from dataclasses import dataclass
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, Field, field_validator, model_validator

CLASS_LABELS = ("MSS", "MSI-H")
TISSUE_TYPES = ("TUM", "LYM", "MUC", "other")
MAGNIFICATIONS = ("x40", "x20", "x10", "x5", "x0")

# Protected-variable names accepted in configs, mapped to TileRecord attributes
BIAS_ATTRIBUTES = {
    "project": "project_id",
    "patient": "patient_id",
    "glass": "glass_id",
    "spot": "spot_key",
    "tissue": "tissue_type",
    "magnification": "magnification",
}


def label_index(label: str) -> int:
    """Map a class label to its integer code (MSS=0, MSI-H=1)"""
    return CLASS_LABELS.index(label)


# Cohort generation

class Amplitudes(BaseModel):
    """Planted signal strengths of the synthetic generator"""
    model_config = {"extra": "forbid"}

    alpha_class: float = Field(default=1.0, ge=0, description="Amplitude of the class direction")
    alpha_project: float = Field(default=1.0, ge=0, description="Amplitude of the project batch effect")
    alpha_patient: float = Field(default=0.5, ge=0, description="Amplitude of the per-patient shortcut")
    alpha_glass: float = Field(default=0.5, ge=0, description="Amplitude of the TMA-glass batch effect")
    sigma_noise: float = Field(default=1.0, gt=0, description="Standard deviation of the isotropic noise")
    tissue_class_scale: Dict[str, float] = Field(
        default_factory=lambda: {"TUM": 1.0, "LYM": 0.7, "MUC": 0.7, "other": 0.3},
        description="Multiplier of alpha_class per tissue type in feature-vector mode (missing = 1)",
    )
    magnification_class_scale: Dict[str, float] = Field(
        default_factory=lambda: {"x40": 0.95, "x20": 1.0, "x10": 0.95, "x5": 0.8, "x0": 0.6},
        description="Multiplier of alpha_class per magnification in feature-vector mode (missing = 1)",
    )

    @field_validator("tissue_class_scale")
    @classmethod
    def check_tissue_scale(cls, value: Dict[str, float]) -> Dict[str, float]:
        return _check_scale(value, TISSUE_TYPES, "tissue types")

    @field_validator("magnification_class_scale")
    @classmethod
    def check_magnification_scale(cls, value: Dict[str, float]) -> Dict[str, float]:
        return _check_scale(value, MAGNIFICATIONS, "magnifications")

    def class_scale(self, tissue: str, magnification: str) -> float:
        return self.tissue_class_scale.get(tissue, 1.0) * self.magnification_class_scale.get(magnification, 1.0)


def _check_scale(value: Dict[str, float], allowed, what: str) -> Dict[str, float]:
    unknown = sorted(set(value) - set(allowed))
    if unknown:
        raise ValueError(f"unknown {what} {unknown}")
    if any(v < 0 for v in value.values()):
        raise ValueError("class scales must be non-negative")
    return value


class ProjectSpec(BaseModel):
    """A contributing project and its per-class assignment probabilities"""
    model_config = {"extra": "forbid"}

    project_id: str = Field(min_length=1, description="Project identifier")
    pi_mss: float = Field(ge=0, le=1, description="Probability that an MSS patient belongs to this project")
    pi_msi: float = Field(ge=0, le=1, description="Probability that an MSI-H patient belongs to this project")


def _default_projects() -> List[ProjectSpec]:
    return [
        ProjectSpec(project_id="A", pi_mss=0.8, pi_msi=0.2),
        ProjectSpec(project_id="B", pi_mss=0.2, pi_msi=0.8),
    ]


class CohortSpec(BaseModel):
    """Structure, planted effects and seed of a synthetic cohort"""
    model_config = {"extra": "forbid"}

    n_patients: int = Field(default=200, ge=2, description="Number of patients")
    msi_rate: float = Field(default=0.074, gt=0, lt=1, description="Probability that a patient is MSI-H")
    projects: List[ProjectSpec] = Field(default_factory=_default_projects, min_length=1,
                                        description="Projects with per-class assignment probabilities")
    glasses_per_project: int = Field(default=4, ge=1, description="TMA glasses per project")
    single_class_glasses: bool = Field(default=False,
                                       description="Fill glasses class-by-class so every glass holds one class")
    single_class_projects: List[str] = Field(default_factory=list,
                                             description="Projects the single-class packing applies to (empty = all)")
    spots_per_patient: int = Field(default=2, ge=1, description="Spots per patient")
    tiles_per_spot: int = Field(default=8, ge=0, description="Tiles per spot in feature-vector mode")
    feature_dim: int = Field(default=32, ge=1, description="Payload length in feature-vector mode")
    amplitudes: Amplitudes = Field(default_factory=Amplitudes, description="Planted amplitudes")
    mode: Literal["feature-vector", "spot-image"] = Field(default="feature-vector", description="Payload kind")
    seed: int = Field(default=0, ge=0, description="Master seed")
    tissue_weights: Dict[str, float] = Field(
        default_factory=lambda: {"TUM": 0.5, "LYM": 0.25, "MUC": 0.25, "other": 0.0},
        description="Tissue sampling weights in feature-vector mode",
    )
    magnifications: List[str] = Field(default_factory=lambda: ["x40", "x20", "x10", "x5"],
                                      description="Magnifications drawn in feature-vector mode")
    blob_density: float = Field(default=4e-4, ge=0, description="Texture blobs per tissue pixel in spot images")
    image_px: int = Field(default=512, ge=32, description="Spot image edge length")
    disk_radius_px: int = Field(default=240, ge=4, description="Radius of the tissue disk")

    @field_validator("tissue_weights")
    @classmethod
    def check_tissue_weights(cls, value: Dict[str, float]) -> Dict[str, float]:
        unknown = sorted(set(value) - set(TISSUE_TYPES))
        if unknown:
            raise ValueError(f"unknown tissue types {unknown}")
        if any(w < 0 for w in value.values()) or sum(value.values()) <= 0:
            raise ValueError("tissue weights must be non-negative with a positive sum")
        return value

    @field_validator("magnifications")
    @classmethod
    def check_magnifications(cls, value: List[str]) -> List[str]:
        unknown = sorted(set(value) - set(MAGNIFICATIONS))
        if unknown:
            raise ValueError(f"unknown magnifications {unknown}")
        if not value:
            raise ValueError("at least one magnification is required")
        return value

    @model_validator(mode="after")
    def check_structure(self) -> "CohortSpec":
        ids = [p.project_id for p in self.projects]
        if len(set(ids)) != len(ids):
            raise ValueError("project ids must be unique")
        for attr in ("pi_mss", "pi_msi"):
            total = sum(getattr(p, attr) for p in self.projects)
            if abs(total - 1.0) > 1e-6:
                raise ValueError(f"{attr} over projects must sum to 1 (got {total:.6f})")
        unknown = sorted(set(self.single_class_projects) - set(ids))
        if unknown:
            raise ValueError(f"single_class_projects references unknown projects {unknown}")
        if 2 * self.disk_radius_px > self.image_px:
            raise ValueError("disk_radius_px must fit inside image_px")
        return self


# Training

class AugmentConfig(BaseModel):
    """Stochastic augmentation applied to RGB tiles at training time"""
    model_config = {"extra": "forbid"}

    enabled: bool = Field(default=True, description="Apply augmentation in spot-image mode")
    rotation_max_deg: float = Field(default=90.0, ge=0, le=90, description="Maximum rotation angle")
    flip_p: float = Field(default=0.5, ge=0, le=1, description="Probability of each dihedral flip")
    warp_max: float = Field(default=0.2, ge=0, le=0.5, description="Maximum perspective corner displacement")
    hue_max: float = Field(default=0.15, ge=0, le=0.5, description="Maximum hue shift in hue units")


class TrainConfig(BaseModel):
    """Training regime for the baseline and bias-ablated models"""
    model_config = {"extra": "forbid", "populate_by_name": True}

    lambda_: float = Field(default=1.0, ge=0, alias="lambda", description="Adversarial weight")
    batch_size: int = Field(default=128, gt=0, description="Tiles per batch")
    epochs: int = Field(default=3, ge=1, description="Training epochs")
    lr_task: float = Field(default=1e-3, ge=0, description="Learning rate of the FE + MSI update")
    lr_be: float = Field(default=1e-2, ge=0, description="Learning rate of the BE-head update")
    lr_adv: float = Field(default=5e-3, ge=0, description="Learning rate of the adversarial FE update")
    optimizer: Literal["sgd", "momentum", "adam"] = Field(default="adam", description="Update rule")
    momentum: float = Field(default=0.9, ge=0, lt=1, description="Momentum coefficient")
    folds: int = Field(default=5, ge=2, description="Cross-validation folds")
    conditioning_class: Literal["MSS", "MSI-H"] = Field(default="MSS",
                                                       description="Class the BE heads are trained on")
    bias_names: List[str] = Field(default_factory=lambda: ["project", "patient", "glass"],
                                  description="Protected variables, in update order")
    monitor_every: int = Field(default=10, ge=1, description="Batches between history records")
    seed: int = Field(default=0, ge=0, description="Training seed")
    fe_hidden: List[int] = Field(default_factory=lambda: [64], description="Hidden widths of the FE")
    feature_dim: int = Field(default=64, ge=1, description="Width of the learned features")
    head_hidden: List[int] = Field(default_factory=lambda: [64, 64], description="Hidden widths of every head")
    phase3_rows: Literal["conditioned", "all"] = Field(default="conditioned",
                                                       description="Rows used by the adversarial FE update")
    early_stopping_patience: Optional[int] = Field(default=None, ge=1,
                                                   description="Stop after this many epochs without improvement")
    input_px: int = Field(default=16, ge=2, description="Tile edge fed to the FE in spot-image mode")
    augment: AugmentConfig = Field(default_factory=AugmentConfig, description="Augmentation parameters")
    audit_max_samples: int = Field(default=2048, ge=2, description="Tiles used by the bias audit")
    max_subgroup_levels: int = Field(default=50, ge=1, description="Largest variable the audit subgroups by")
    tissues: Optional[List[str]] = Field(default=None, description="Train and validate on these tissue types only")
    magnifications: Optional[List[str]] = Field(default=None,
                                                description="Train and validate on these magnifications only")

    @field_validator("tissues")
    @classmethod
    def check_tissues(cls, value: Optional[List[str]]) -> Optional[List[str]]:
        if value is None:
            return value
        unknown = sorted(set(value) - set(TISSUE_TYPES))
        if unknown or not value:
            raise ValueError(f"tissues must be a non-empty subset of {list(TISSUE_TYPES)}")
        return value

    @field_validator("magnifications")
    @classmethod
    def check_magnifications(cls, value: Optional[List[str]]) -> Optional[List[str]]:
        if value is None:
            return value
        unknown = sorted(set(value) - set(MAGNIFICATIONS))
        if unknown or not value:
            raise ValueError(f"magnifications must be a non-empty subset of {list(MAGNIFICATIONS)}")
        return value

    @field_validator("bias_names")
    @classmethod
    def check_bias_names(cls, value: List[str]) -> List[str]:
        unknown = sorted(set(value) - set(BIAS_ATTRIBUTES))
        if unknown:
            raise ValueError(f"unknown bias names {unknown}; expected a subset of {sorted(BIAS_ATTRIBUTES)}")
        if len(set(value)) != len(value):
            raise ValueError("bias names must be unique")
        return value


# Evaluation and preprocessing

class MetricConfig(BaseModel):
    """Clinical metric settings"""
    model_config = {"extra": "forbid"}

    prevalence: float = Field(default=0.15, ge=0, le=1, description="Reporting MSI-H prevalence")
    confidence: float = Field(default=0.95, gt=0, lt=1, description="Confidence level of every interval")
    threshold: float = Field(default=0.5, ge=0, le=1, description="Tile decision threshold")
    pca_max_points: int = Field(default=4096, ge=2, description="Largest PCA scatter written by eval")


class PreprocessConfig(BaseModel):
    """Spot-to-tile preprocessing"""
    model_config = {"extra": "forbid"}

    tile_px: int = Field(default=64, ge=16, description="Tile edge length")
    resize_px: Optional[int] = Field(default=None, ge=1, description="Resize tiles to this edge (None keeps tile_px)")
    keep_tissues: List[str] = Field(default_factory=lambda: ["TUM", "LYM", "MUC"],
                                    description="Tissue types kept by ROI filtering")
    magnifications: List[str] = Field(default_factory=lambda: list(MAGNIFICATIONS),
                                      description="Pyramid levels tiled")
    macenko: bool = Field(default=True, description="Apply Macenko normalization per spot")
    cohort_normalization: bool = Field(default=False,
                                       description="Second normalization pass against a cohort-level profile")
    od_threshold: float = Field(default=0.15, gt=0, description="OD norm above which a pixel is tissue")
    angle_percentile: float = Field(default=1.0, gt=0, lt=50, description="Extreme-angle percentile")

    @field_validator("keep_tissues")
    @classmethod
    def check_keep(cls, value: List[str]) -> List[str]:
        unknown = sorted(set(value) - set(TISSUE_TYPES))
        if unknown:
            raise ValueError(f"unknown tissue types {unknown}")
        return value

    @field_validator("magnifications")
    @classmethod
    def check_levels(cls, value: List[str]) -> List[str]:
        unknown = sorted(set(value) - set(MAGNIFICATIONS))
        if unknown:
            raise ValueError(f"unknown magnifications {unknown}")
        return value


class RunConfig(BaseModel):
    """A single JSON document describing one command run"""
    model_config = {"extra": "forbid"}

    seed: Optional[int] = Field(default=None, ge=0, description="Global seed overriding every section seed")
    out: Optional[str] = Field(default=None, description="Output directory")
    cohort: CohortSpec = Field(default_factory=CohortSpec, description="Cohort generation")
    train: TrainConfig = Field(default_factory=TrainConfig, description="Training regime")
    metrics: MetricConfig = Field(default_factory=MetricConfig, description="Evaluation")
    preprocess: PreprocessConfig = Field(default_factory=PreprocessConfig, description="Preprocessing")

    @model_validator(mode="after")
    def propagate_seed(self) -> "RunConfig":
        if self.seed is not None:
            self.cohort.seed = self.seed
            self.train.seed = self.seed
        return self


# Reports

class AuditRow(BaseModel):
    """One dependence measurement of the bias audit"""
    model: str = Field(description="Model tag")
    subgroup: str = Field(description="'All', '<variable>=<category>' or 'label=<class>'")
    variable: str = Field(description="'task' or a bias name")
    dc: Optional[float] = Field(default=None, description="Squared distance correlation; None when not computable")
    n: int = Field(description="Samples used")


class AuditReport(BaseModel):
    """Dependence between learned features and the task and bias variables"""
    rows: List[AuditRow] = Field(default_factory=list)

    def value(self, model: str, subgroup: str, variable: str) -> Optional[float]:
        """dc of one cell, or None if absent / not computable"""
        for row in self.rows:
            if row.model == model and row.subgroup == subgroup and row.variable == variable:
                return row.dc
        return None


class Interval(BaseModel):
    lo: float
    hi: float


class Estimate(BaseModel):
    """A point estimate with an optional confidence interval (None = undefined)"""
    value: Optional[float] = None
    ci: Optional[Interval] = None


class ErrorRates(BaseModel):
    """False positive and false negative rates of one stratum"""
    stratum: str
    fpr: Optional[float] = None
    fnr: Optional[float] = None
    n_pos: int = 0
    n_neg: int = 0


class MetricsReport(BaseModel):
    """Tile- or patient-level evaluation"""
    level: Literal["tile", "patient"]
    n: int
    prevalence: float = Field(description="Prevalence used by the adjusted metrics")
    tp: int
    fp: int
    tn: int
    fn: int
    auc: Estimate
    sensitivity: Estimate
    specificity: Estimate
    balanced_accuracy: Estimate
    accuracy: Estimate = Field(description="Prevalence-adjusted accuracy")
    ppv: Estimate = Field(description="Prevalence-adjusted positive predictive value")
    npv: Estimate = Field(description="Prevalence-adjusted negative predictive value")
    per_tissue: List[ErrorRates] = Field(default_factory=list)
    per_magnification: List[ErrorRates] = Field(default_factory=list)


@dataclass(frozen=True)
class TilePrediction:
    """MSI-H probability of one tile"""
    tile_id: str
    patient_id: str
    tissue_type: str
    magnification: str
    score: float
    true_label: int
    project_id: str = ""
    fold: int = -1


@dataclass(frozen=True)
class PatientPrediction:
    """Majority-vote decision of one patient"""
    patient_id: str
    label: int
    vote_fraction: float
    true_label: int
    n_tiles: int
    project_id: str = ""


class GroupMetrics(BaseModel):
    """Discrimination within one group of predictions (e.g. one project)"""
    group: str
    n: int
    n_pos: int
    n_neg: int
    auc: Optional[float] = None
    balanced_accuracy: Optional[float] = None
