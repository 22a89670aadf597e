"""Synthetic cohorts with a planted class signal and planted project, patient and glass effects.

Every entity (class, project, patient, glass, spot) draws from its own
sub-stream of the master seed, so adding patients never reshuffles the
entities that already exist.
"""
import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from PIL import Image
from scipy.spatial import cKDTree

from msidebias.core.errors import (ConfigError, DegenerateCohortError, EmptyCohortError, ManifestParseError,
                                   MissingArtifactError, StainEstimationError)
from msidebias.db.artifacts import (atomic_write_bytes, read_csv, read_json, read_matrix, write_csv,
                                    write_json, write_matrix)
from msidebias.models.models import Cohort, TileRecord
from msidebias.schemas.schemas import (CLASS_LABELS, MAGNIFICATIONS, TISSUE_TYPES, CohortSpec,
                                       PreprocessConfig)
from msidebias.services import stainprep

# Set up logging
logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ["tile_id", "patient_id", "spot_id", "glass_id", "project_id", "label", "tissue",
                    "magnification", "payload_ref"]
PAYLOAD_FILE = "payloads.bin"
SPOT_COLUMNS = ["patient_id", "spot_id", "glass_id", "project_id", "label"]

# Seed sub-stream kinds
_PATIENT, _CLASS_DIR, _PROJECT_DIR, _PATIENT_DIR, _GLASS_DIR, _TILES, _SPOT = range(1, 8)

# Spot-image rendering constants
BACKGROUND = 230.0
SHIFT_SCALE = 8.0
VORONOI_SEEDS = 128
BLOB_RADIUS = 3
BLOB_HEMATOXYLIN = 0.5
CONCENTRATION_NOISE = 0.04
HEMATOXYLIN = np.array([0.65, 0.70, 0.29])
EOSIN = np.array([0.07, 0.99, 0.11])
# (hematoxylin, eosin) concentration of each tissue type
TISSUE_STAINS = {"TUM": (0.75, 0.45), "LYM": (1.0, 0.25), "MUC": (0.25, 0.35), "other": (0.35, 0.75)}


@dataclass(frozen=True)
class PatientAssignment:
    patient_id: str
    index: int
    label: str
    project_id: str
    glass_ids: Tuple[str, ...]


@dataclass(frozen=True)
class Population:
    patients: List[PatientAssignment]

    def get(self, patient_id: str) -> PatientAssignment:
        for p in self.patients:
            if p.patient_id == patient_id:
                return p
        raise KeyError(patient_id)


def patient_name(index: int) -> str:
    return f"P{index:05d}"


def spot_name(index: int) -> str:
    return f"S{index}"


def glass_name(project_id: str, index: int) -> str:
    return f"{project_id}-G{index:02d}"


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def _single_class(spec: CohortSpec, project_id: str) -> bool:
    if not spec.single_class_glasses:
        return False
    return not spec.single_class_projects or project_id in spec.single_class_projects


def _class_glass_split(n_glasses: int, n_spots: Dict[str, int], project_id: str) -> Dict[str, List[int]]:
    """Partition glass indices between the classes present, proportionally to their spot counts"""
    present = [c for c in CLASS_LABELS if n_spots.get(c, 0) > 0]
    if len(present) > n_glasses:
        raise DegenerateCohortError(
            f"project {project_id} needs {len(present)} single-class glasses but has {n_glasses}")
    if not present:
        return {}
    if len(present) == 1:
        return {present[0]: list(range(n_glasses))}
    total = sum(n_spots[c] for c in present)
    first = int(round(n_glasses * n_spots[present[0]] / total))
    first = min(max(first, 1), n_glasses - 1)
    return {present[0]: list(range(first)), present[1]: list(range(first, n_glasses))}


def assign_population(spec: CohortSpec) -> Population:
    """Class and project of every patient, then the glass of every spot"""
    project_ids = [p.project_id for p in spec.projects]
    pi = {"MSS": np.array([p.pi_mss for p in spec.projects]),
          "MSI-H": np.array([p.pi_msi for p in spec.projects])}
    drawn = []
    for i in range(spec.n_patients):
        rng = np.random.default_rng([spec.seed, _PATIENT, i])
        label = CLASS_LABELS[1] if rng.random() < spec.msi_rate else CLASS_LABELS[0]
        project = project_ids[int(rng.choice(len(project_ids), p=pi[label] / pi[label].sum()))]
        drawn.append((label, project))

    glasses: Dict[int, List[str]] = {i: [] for i in range(spec.n_patients)}
    for project in project_ids:
        members = [i for i, (_, p) in enumerate(drawn) if p == project]
        if _single_class(spec, project):
            counts = {c: spec.spots_per_patient * sum(drawn[i][0] == c for i in members) for c in CLASS_LABELS}
            split = _class_glass_split(spec.glasses_per_project, counts, project)
            cursor = {c: 0 for c in split}
            for i in members:
                label = drawn[i][0]
                for _ in range(spec.spots_per_patient):
                    pool = split[label]
                    glasses[i].append(glass_name(project, pool[cursor[label] % len(pool)]))
                    cursor[label] += 1
        else:
            cursor = 0
            for i in members:
                for _ in range(spec.spots_per_patient):
                    glasses[i].append(glass_name(project, cursor % spec.glasses_per_project))
                    cursor += 1

    patients = [PatientAssignment(patient_name(i), i, label, project, tuple(glasses[i]))
                for i, (label, project) in enumerate(drawn)]
    return Population(patients)


def draw_directions(spec: CohortSpec, population: Population, dim: Optional[int] = None) -> Dict[str, np.ndarray]:
    """Fixed unit vector per class, project, patient and glass.

    Feature-vector cohorts use ``feature_dim`` dimensions; spot images use
    3 (one global RGB shift per entity).
    """
    if dim is None:
        dim = spec.feature_dim if spec.mode == "feature-vector" else 3
    dirs: Dict[str, np.ndarray] = {}
    for c, label in enumerate(CLASS_LABELS):
        dirs[f"class:{label}"] = _unit(np.random.default_rng([spec.seed, _CLASS_DIR, c]), dim)
    for j, project in enumerate(spec.projects):
        dirs[f"project:{project.project_id}"] = _unit(np.random.default_rng([spec.seed, _PROJECT_DIR, j]), dim)
        for g in range(spec.glasses_per_project):
            rng = np.random.default_rng([spec.seed, _GLASS_DIR, j, g])
            dirs[f"glass:{glass_name(project.project_id, g)}"] = _unit(rng, dim)
    for p in population.patients:
        dirs[f"patient:{p.patient_id}"] = _unit(np.random.default_rng([spec.seed, _PATIENT_DIR, p.index]), dim)
    return dirs


def _check_population(population: Population) -> None:
    counts = {c: sum(p.label == c for p in population.patients) for c in CLASS_LABELS}
    if min(counts.values()) == 0:
        raise DegenerateCohortError(f"drawn cohort has no patient in one class: {counts}", counts=counts)


def _feature_tiles(spec: CohortSpec, population: Population, dirs: Dict[str, np.ndarray]) -> List[TileRecord]:
    amp = spec.amplitudes
    tissues = [t for t in TISSUE_TYPES if spec.tissue_weights.get(t, 0.0) > 0]
    weights = np.array([spec.tissue_weights[t] for t in tissues])
    weights = weights / weights.sum()
    tiles = []
    for p in population.patients:
        signal = amp.alpha_class * dirs[f"class:{p.label}"]
        nuisance = (amp.alpha_project * dirs[f"project:{p.project_id}"]
                    + amp.alpha_patient * dirs[f"patient:{p.patient_id}"])
        for s, glass in enumerate(p.glass_ids):
            rng = np.random.default_rng([spec.seed, _TILES, p.index, s])
            spot_mean = nuisance + amp.alpha_glass * dirs[f"glass:{glass}"]
            for k in range(spec.tiles_per_spot):
                tissue = tissues[int(rng.choice(len(tissues), p=weights))]
                mag = spec.magnifications[int(rng.integers(len(spec.magnifications)))]
                # the class signal is strongest in tumour tiles at intermediate magnification
                mean = spot_mean + amp.class_scale(tissue, mag) * signal
                x = mean + amp.sigma_noise * rng.standard_normal(spec.feature_dim)
                tiles.append(TileRecord(f"{p.patient_id}_{spot_name(s)}_t{k:03d}", p.patient_id, spot_name(s),
                                        glass, p.project_id, p.label, tissue, mag, x.astype(np.float32)))
    return tiles


def _render(spec: CohortSpec, patient: PatientAssignment, spot_index: int,
            dirs: Dict[str, np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    amp = spec.amplitudes
    size, radius = spec.image_px, spec.disk_radius_px
    rng = np.random.default_rng([spec.seed, _SPOT, patient.index, spot_index])
    yy, xx = np.mgrid[0:size, 0:size]
    center = (size - 1) / 2.0
    inside = (yy - center) ** 2 + (xx - center) ** 2 <= radius ** 2

    # Voronoi tissue regions
    tissues = [t for t in TISSUE_TYPES if spec.tissue_weights.get(t, 0.0) > 0]
    weights = np.array([spec.tissue_weights[t] for t in tissues])
    seeds = center + rng.uniform(-radius, radius, size=(VORONOI_SEEDS, 2))
    seed_types = rng.choice(len(tissues), size=VORONOI_SEEDS, p=weights / weights.sum())
    _, nearest = cKDTree(seeds).query(np.column_stack([yy[inside], xx[inside]]))
    codes = np.array([stainprep.TISSUE_CODE_OF[t] for t in tissues], dtype=np.uint8)
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[inside] = codes[seed_types[nearest]]

    conc = np.zeros((size, size, 2))
    for t in tissues:
        conc[mask == stainprep.TISSUE_CODE_OF[t]] = TISSUE_STAINS[t]
    conc[inside] += CONCENTRATION_NOISE * rng.standard_normal((int(inside.sum()), 2))

    # MSI-H spots carry denser hematoxylin blobs
    density = spec.blob_density * (1.0 + amp.alpha_class * CLASS_LABELS.index(patient.label))
    n_blobs = int(rng.poisson(density * inside.sum()))
    ys, xs = np.nonzero(inside)
    picks = rng.integers(len(ys), size=n_blobs) if len(ys) else np.empty(0, dtype=np.int64)
    for cy, cx in zip(ys[picks], xs[picks]):
        y0, y1 = max(cy - BLOB_RADIUS, 0), min(cy + BLOB_RADIUS + 1, size)
        x0, x1 = max(cx - BLOB_RADIUS, 0), min(cx + BLOB_RADIUS + 1, size)
        disk = (yy[y0:y1, x0:x1] - cy) ** 2 + (xx[y0:y1, x0:x1] - cx) ** 2 <= BLOB_RADIUS ** 2
        conc[y0:y1, x0:x1, 0] += BLOB_HEMATOXYLIN * (disk & inside[y0:y1, x0:x1])

    od = np.clip(conc, 0.0, None) @ np.stack([HEMATOXYLIN, EOSIN])
    image = np.full((size, size, 3), BACKGROUND)
    image[inside] = 256.0 * np.power(10.0, -od[inside]) - 1.0
    shift = SHIFT_SCALE * (amp.alpha_project * dirs[f"project:{patient.project_id}"]
                           + amp.alpha_glass * dirs[f"glass:{patient.glass_ids[spot_index]}"]
                           + amp.alpha_patient * dirs[f"patient:{patient.patient_id}"])
    image += shift
    return np.clip(np.round(image), 0, 255).astype(np.uint8), mask


def render_spot_image(spec: CohortSpec, patient_id: str, spot_id: str) -> Tuple[np.ndarray, np.ndarray]:
    """RGB spot image and its tissue mask (palette codes of stainprep.TISSUE_CODES)"""
    if spec.mode != "spot-image":
        raise ConfigError(f"spot images need cohort.mode 'spot-image', got '{spec.mode}'", field="cohort.mode")
    population = assign_population(spec)
    patient = population.get(patient_id)
    spot_index = int(spot_id.lstrip("S"))
    if not 0 <= spot_index < len(patient.glass_ids):
        raise KeyError(f"{patient_id} has no spot {spot_id}")
    return _render(spec, patient, spot_index, draw_directions(spec, population, 3))


def _image_tiles(spec: CohortSpec, population: Population, dirs: Dict[str, np.ndarray],
                 preprocess: PreprocessConfig) -> List[TileRecord]:
    spots = [(p, s) for p in population.patients for s in range(len(p.glass_ids))]
    cohort_profile = None
    if preprocess.macenko and preprocess.cohort_normalization:
        normalizer = stainprep.StainNormalizer(preprocess.od_threshold, preprocess.angle_percentile)
        first_pass = []
        for p, s in spots:
            image, _ = _render(spec, p, s, dirs)
            try:
                first_pass.append(normalizer.transform(image))
            except StainEstimationError:
                continue
        cohort_profile = normalizer.fit_cohort(first_pass).target

    tiles = []
    for p, s in spots:
        image, mask = _render(spec, p, s, dirs)
        meta = stainprep.SpotMeta(p.patient_id, spot_name(s))
        for t in stainprep.preprocess_spot(image, mask, meta, preprocess, cohort_profile):
            tiles.append(TileRecord(t.name, p.patient_id, spot_name(s), p.glass_ids[s], p.project_id,
                                    p.label, t.tissue, t.magnification, t.image))
    return tiles


def generate_cohort(spec: CohortSpec, preprocess: Optional[PreprocessConfig] = None) -> Cohort:
    """Draw a cohort; spot-image cohorts are tiled through the stainprep pipeline"""
    population = assign_population(spec)
    _check_population(population)
    dirs = draw_directions(spec, population)
    if spec.mode == "feature-vector":
        tiles = _feature_tiles(spec, population, dirs)
    else:
        tiles = _image_tiles(spec, population, dirs, preprocess or PreprocessConfig())
    if not tiles:
        raise EmptyCohortError("generated cohort holds no tiles")
    n_msi = sum(p.label == "MSI-H" for p in population.patients)
    logger.info(f"Generated {spec.mode} cohort: {len(population.patients)} patients "
                f"({n_msi} MSI-H), {len(tiles)} tiles, seed={spec.seed}")
    return Cohort(spec, tiles, dirs)


def summarize_cohort(cohort: Cohort) -> Dict:
    """Patients per class and per project, and the class make-up of every glass"""
    frame = pd.DataFrame([t.metadata() for t in cohort.tiles], columns=MANIFEST_COLUMNS[:-1])
    patients = frame.drop_duplicates("patient_id")
    spots = frame.drop_duplicates(["patient_id", "spot_id"])
    glasses = {}
    for glass_id, group in spots.groupby("glass_id"):
        counts = group["label"].value_counts().to_dict()
        glasses[glass_id] = {
            "project_id": group["project_id"].iloc[0],
            "spots": {c: int(counts.get(c, 0)) for c in CLASS_LABELS},
            "purity": float(max(counts.values()) / len(group)),
        }
    return {
        "n_tiles": int(len(frame)),
        "n_patients": int(len(patients)),
        "patients_per_class": {c: int((patients["label"] == c).sum()) for c in CLASS_LABELS},
        "patients_per_project": {k: int(v) for k, v in patients["project_id"].value_counts().sort_index().items()},
        "tiles_per_tissue": {k: int(v) for k, v in frame["tissue"].value_counts().sort_index().items()},
        "glasses": glasses,
    }


# Persistence

def _png_bytes(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(image).save(buf, format="PNG")
    return buf.getvalue()


def save_cohort(cohort: Cohort, path: Union[str, Path]) -> Path:
    """Write cohort.json, manifest.csv and the payloads (binary matrix or PNG tiles)"""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    rows = []
    if cohort.is_image:
        for t in cohort.tiles:
            ref = f"tiles/{t.tile_id}.png"
            atomic_write_bytes(path / ref, _png_bytes(t.payload))
            rows.append(t.metadata() + (ref,))
        write_json(path / "palette.json", {str(k): v for k, v in stainprep.TISSUE_CODES.items()})
    else:
        write_matrix(path / PAYLOAD_FILE, np.stack([t.payload for t in cohort.tiles]))
        rows = [t.metadata() + (f"{PAYLOAD_FILE}#{i}",) for i, t in enumerate(cohort.tiles)]
    write_csv(path / "manifest.csv", pd.DataFrame(rows, columns=MANIFEST_COLUMNS))
    write_json(path / "cohort.json", {
        "spec": cohort.spec.model_dump(mode="json", by_alias=True) if cohort.spec else None,
        "directions": {k: v.tolist() for k, v in sorted(cohort.directions.items())},
    })
    logger.info(f"Saved cohort with {len(cohort)} tiles to {path}")
    return path


def _check_token(value: str, allowed, line: int, column: str) -> None:
    if value not in allowed:
        raise ManifestParseError(f"unknown {column} '{value}'", line=line, column=column)


def _load_payload(root: Path, ref: str, matrix: Optional[np.ndarray], line: int) -> np.ndarray:
    if ref.startswith(f"{PAYLOAD_FILE}#"):
        token = ref.split("#", 1)[1]
        if matrix is None or not token.isdigit() or int(token) >= matrix.shape[0]:
            raise ManifestParseError(f"bad payload reference '{ref}'", line=line, column="payload_ref")
        return matrix[int(token)].copy()
    file = root / ref
    if not ref.endswith(".png"):
        raise ManifestParseError(f"bad payload reference '{ref}'", line=line, column="payload_ref")
    if not file.exists():
        raise MissingArtifactError(f"missing tile image {file}", path=str(file))
    with Image.open(file) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()


def load_cohort(path: Union[str, Path]) -> Cohort:
    """Read a cohort directory; malformed manifests raise ManifestParseError with line and column"""
    path = Path(path)
    meta = read_json(path / "cohort.json")
    spec = CohortSpec.model_validate(meta["spec"]) if meta.get("spec") else None
    directions = {k: np.asarray(v, dtype=np.float64) for k, v in meta.get("directions", {}).items()}

    frame = read_csv(path / "manifest.csv")
    columns = list(frame.columns)
    if columns != MANIFEST_COLUMNS:
        bad = next((c for c, e in zip(columns + [""] * 9, MANIFEST_COLUMNS) if c != e), None)
        raise ManifestParseError(f"header must be {','.join(MANIFEST_COLUMNS)}", line=1, column=bad)

    matrix = None
    if any(ref.startswith(f"{PAYLOAD_FILE}#") for ref in frame["payload_ref"]):
        matrix = read_matrix(path / PAYLOAD_FILE)

    tiles: List[TileRecord] = []
    seen: Dict[str, int] = {}
    patients: Dict[str, Tuple[str, str]] = {}
    for offset, row in enumerate(frame.itertuples(index=False)):
        line = offset + 2
        for column in ("tile_id", "patient_id", "spot_id", "glass_id", "project_id"):
            if not getattr(row, column):
                raise ManifestParseError("empty value", line=line, column=column)
        if row.tile_id in seen:
            raise ManifestParseError(f"duplicate tile_id '{row.tile_id}' (first on line {seen[row.tile_id]})",
                                     line=line, column="tile_id")
        seen[row.tile_id] = line
        _check_token(row.label, CLASS_LABELS, line, "label")
        _check_token(row.tissue, TISSUE_TYPES, line, "tissue")
        _check_token(row.magnification, MAGNIFICATIONS, line, "magnification")
        expected = patients.setdefault(row.patient_id, (row.label, row.project_id))
        if expected != (row.label, row.project_id):
            raise ManifestParseError(f"patient {row.patient_id} changes label or project",
                                     line=line, column="label" if expected[0] != row.label else "project_id")
        payload = _load_payload(path, row.payload_ref, matrix, line)
        tiles.append(TileRecord(row.tile_id, row.patient_id, row.spot_id, row.glass_id, row.project_id,
                                row.label, row.tissue, row.magnification, payload))
    if not tiles:
        raise EmptyCohortError(f"manifest {path / 'manifest.csv'} lists no tiles")
    logger.info(f"Loaded cohort with {len(tiles)} tiles from {path}")
    return Cohort(spec, tiles, directions)


def save_spot_images(spec: CohortSpec, path: Union[str, Path]) -> Path:
    """Write every rendered spot, its mask and a spots.csv sidecar (the cmd_preprocess input)"""
    path = Path(path)
    population = assign_population(spec)
    dirs = draw_directions(spec, population, 3)
    rows = []
    for p in population.patients:
        for s, glass in enumerate(p.glass_ids):
            image, mask = _render(spec, p, s, dirs)
            stem = f"{p.patient_id}_{spot_name(s)}"
            atomic_write_bytes(path / f"{stem}.png", _png_bytes(image))
            atomic_write_bytes(path / f"{stem}_mask.png", _png_bytes(mask))
            rows.append((p.patient_id, spot_name(s), glass, p.project_id, p.label))
    write_csv(path / "spots.csv", pd.DataFrame(rows, columns=SPOT_COLUMNS))
    write_json(path / "palette.json", {str(k): v for k, v in stainprep.TISSUE_CODES.items()})
    logger.info(f"Wrote {len(rows)} spot images to {path}")
    return path
