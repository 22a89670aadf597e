"""Spot preprocessing: optical density, Macenko normalization, pyramid, tiling, ROI filtering, augmentation.

Optical density uses base-10 logs with a +1 offset: OD = -log10((I + 1) / 256).
"""
import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
from skimage.color import hsv2rgb, rgb2hsv
from skimage.transform import ProjectiveTransform, downscale_local_mean, resize, rotate, warp

from msidebias.core.errors import (DegenerateStainError, MetadataError, SizeError,
                                   StainEstimationError)
from msidebias.schemas.schemas import AugmentConfig, MAGNIFICATIONS, PreprocessConfig

# Set up logging
logger = logging.getLogger(__name__)

# Palette of the label masks (documented in palette.json next to mask files)
TISSUE_CODES = {0: "background", 1: "TUM", 2: "LYM", 3: "MUC", 4: "other"}
TISSUE_CODE_OF = {name: code for code, name in TISSUE_CODES.items()}

MIN_TILE_PX = 16
MIN_TISSUE_PIXELS = 100


def rgb_to_od(image: np.ndarray) -> np.ndarray:
    """Per-channel optical density of an 8-bit RGB image"""
    return -np.log10((np.asarray(image, dtype=np.float64) + 1.0) / 256.0)


def od_to_rgb(od: np.ndarray) -> np.ndarray:
    """Inverse of rgb_to_od, rounded and clamped to 8 bits"""
    intensity = 256.0 * np.power(10.0, -np.asarray(od, dtype=np.float64)) - 1.0
    return np.clip(np.round(intensity), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class StainProfile:
    """Unit stain directions (columns: hematoxylin, eosin) and 99th-percentile concentrations"""
    stain_matrix: np.ndarray
    concentration_percentiles: np.ndarray


# Reference H&E profile in base-10 OD units
DEFAULT_TARGET = StainProfile(
    stain_matrix=np.array([[0.5626, 0.2159], [0.7201, 0.8012], [0.4062, 0.5581]]),
    concentration_percentiles=np.array([1.9705, 1.0308]) / np.log(10.0),
)


def _unit_nonnegative(v: np.ndarray) -> np.ndarray:
    if v.sum() < 0:
        v = -v
    v = np.clip(v, 0.0, None)
    return v / np.linalg.norm(v)


def _tissue_od(image: np.ndarray, od_threshold: float) -> np.ndarray:
    od = rgb_to_od(image).reshape(-1, 3)
    return od[np.linalg.norm(od, axis=1) > od_threshold]


def stain_concentrations(od_pixels: np.ndarray, stain_matrix: np.ndarray) -> np.ndarray:
    """Least-squares concentrations (pixels x 2) of OD pixels against a 3 x 2 stain matrix"""
    return np.linalg.lstsq(stain_matrix, od_pixels.T, rcond=None)[0].T


def _stain_directions(tissue: np.ndarray, angle_percentile: float) -> np.ndarray:
    eigvals, eigvecs = np.linalg.eigh(np.cov(tissue, rowvar=False))
    if eigvals[1] <= 1e-6 * max(eigvals[2], 1e-300):
        raise DegenerateStainError("optical densities are rank-deficient (grayscale input?)")
    plane = eigvecs[:, [2, 1]]
    for j in range(2):
        if plane[:, j].sum() < 0:
            plane[:, j] *= -1
    proj = tissue @ plane
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo = np.percentile(phi, angle_percentile)
    hi = np.percentile(phi, 100.0 - angle_percentile)
    v1 = _unit_nonnegative(plane @ np.array([np.cos(lo), np.sin(lo)]))
    v2 = _unit_nonnegative(plane @ np.array([np.cos(hi), np.sin(hi)]))
    # hematoxylin first: larger blue-channel OD
    return np.stack([v1, v2], axis=1) if v1[2] >= v2[2] else np.stack([v2, v1], axis=1)


def estimate_stain_matrix(image: np.ndarray, od_threshold: float = 0.15,
                          angle_percentile: float = 1.0) -> StainProfile:
    """Macenko stain estimate from the tissue pixels (OD norm above the threshold) of an RGB image"""
    tissue = _tissue_od(image, od_threshold)
    if tissue.shape[0] < MIN_TISSUE_PIXELS:
        raise StainEstimationError(f"only {tissue.shape[0]} tissue pixels (need {MIN_TISSUE_PIXELS})")
    return _profile_from_tissue(tissue, angle_percentile)


def _profile_from_tissue(tissue: np.ndarray, angle_percentile: float) -> StainProfile:
    stain_matrix = _stain_directions(tissue, angle_percentile)
    conc = stain_concentrations(tissue, stain_matrix)
    maxc = np.percentile(conc, 99, axis=0)
    if np.any(maxc <= 0):
        raise StainEstimationError(f"non-positive concentration percentiles {maxc}")
    return StainProfile(stain_matrix, maxc)


def normalize_macenko(image: np.ndarray, target: StainProfile, od_threshold: float = 0.15,
                      angle_percentile: float = 1.0, source: Optional[StainProfile] = None) -> np.ndarray:
    """Re-express an RGB image with the target stain matrix and concentration scale"""
    if source is None:
        source = estimate_stain_matrix(image, od_threshold, angle_percentile)
    h, w, _ = image.shape
    conc = stain_concentrations(rgb_to_od(image).reshape(-1, 3), source.stain_matrix)
    conc *= target.concentration_percentiles / source.concentration_percentiles
    od = conc @ target.stain_matrix.T
    return od_to_rgb(od).reshape(h, w, 3)


class StainNormalizer:
    """Macenko normalizer fitted to a reference image or to a whole cohort"""

    def __init__(self, od_threshold: float = 0.15, angle_percentile: float = 1.0,
                 target: StainProfile = DEFAULT_TARGET):
        self.od_threshold = od_threshold
        self.angle_percentile = angle_percentile
        self.target = target

    def fit(self, reference: np.ndarray) -> "StainNormalizer":
        self.target = estimate_stain_matrix(reference, self.od_threshold, self.angle_percentile)
        return self

    def fit_cohort(self, images: Sequence[np.ndarray]) -> "StainNormalizer":
        """Single profile estimated from the pooled tissue pixels of many images"""
        pooled = [_tissue_od(img, self.od_threshold) for img in images]
        tissue = np.concatenate(pooled) if pooled else np.empty((0, 3))
        if tissue.shape[0] < MIN_TISSUE_PIXELS:
            raise StainEstimationError(f"cohort holds only {tissue.shape[0]} tissue pixels")
        self.target = _profile_from_tissue(tissue, self.angle_percentile)
        logger.info(f"Cohort stain profile fitted on {tissue.shape[0]} pixels from {len(images)} images")
        return self

    def transform(self, image: np.ndarray) -> np.ndarray:
        return normalize_macenko(image, self.target, self.od_threshold, self.angle_percentile)


# Pyramid and tiling

@dataclass
class TilePyramid:
    """Spot image at each magnification; scale is relative to the x40 base"""
    levels: Dict[str, np.ndarray]
    scales: Dict[str, float]


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(image), 0, 255).astype(np.uint8)


def _area_halve(image: np.ndarray) -> np.ndarray:
    h, w = image.shape[0] // 2 * 2, image.shape[1] // 2 * 2
    return downscale_local_mean(image[:h, :w].astype(np.float64), (2, 2, 1))


def _thumbnail(image: np.ndarray, out_px: int) -> np.ndarray:
    h, w = image.shape[:2]
    if h == w and h % out_px == 0:
        f = h // out_px
        return downscale_local_mean(image.astype(np.float64), (f, f, 1))
    return resize(image.astype(np.float64), (out_px, out_px, image.shape[2]), order=1,
                  anti_aliasing=True, preserve_range=True)


def build_pyramid(image: np.ndarray, tile_px: int) -> TilePyramid:
    """x40 = base, x20/x10/x5 by successive 2x2 area averaging, x0 = whole spot at tile size"""
    h, w = image.shape[:2]
    if h < tile_px or w < tile_px:
        raise SizeError(f"spot {h}x{w} is smaller than one {tile_px}px tile")
    levels = {"x40": np.asarray(image, dtype=np.uint8)}
    scales = {"x40": 1.0}
    current = levels["x40"].astype(np.float64)
    for mag in ("x20", "x10", "x5"):
        current = _area_halve(current)
        levels[mag] = _to_uint8(current)
        scales[mag] = scales[list(scales)[-1]] / 2.0
    levels["x0"] = _to_uint8(_thumbnail(np.asarray(image), tile_px))
    scales["x0"] = tile_px / max(h, w)
    return TilePyramid(levels, scales)


@dataclass
class Tile:
    """A tile cut from one pyramid level; box = (top, left, bottom, right) in level pixels"""
    image: np.ndarray
    row: int
    col: int
    box: tuple
    magnification: str = "x40"
    tissue: Optional[str] = None


def extract_tiles(level: np.ndarray, tile_px: int, magnification: str = "x40") -> List[Tile]:
    """Non-overlapping grid from the origin; partial edge tiles are dropped"""
    if tile_px < MIN_TILE_PX:
        raise SizeError(f"tile_px={tile_px} is below the minimum {MIN_TILE_PX}")
    rows, cols = level.shape[0] // tile_px, level.shape[1] // tile_px
    if rows == 0 or cols == 0:
        logger.warning(f"Level {magnification} ({level.shape[0]}x{level.shape[1]}) holds no {tile_px}px tile")
        return []
    tiles = []
    for r in range(rows):
        for c in range(cols):
            top, left = r * tile_px, c * tile_px
            tiles.append(Tile(level[top:top + tile_px, left:left + tile_px], r, c,
                              (top, left, top + tile_px, left + tile_px), magnification))
    return tiles


def majority_label(mask_region: np.ndarray) -> str:
    """Most frequent palette code of a mask region (ties go to the lower code)"""
    counts = np.bincount(np.asarray(mask_region, dtype=np.int64).ravel(), minlength=len(TISSUE_CODES))
    return TISSUE_CODES.get(int(np.argmax(counts)), "other")


def _base_region(mask: np.ndarray, tile: Tile, scale: float) -> np.ndarray:
    top, left, bottom, right = (int(round(v / scale)) for v in tile.box)
    return mask[top:bottom, left:right]


def filter_roi(tiles: List[Tile], mask: Optional[np.ndarray] = None,
               scales: Optional[Dict[str, float]] = None,
               keep: Sequence[str] = ("TUM", "LYM", "MUC")) -> List[Tile]:
    """Keep tiles whose tissue label is in ``keep``.

    Unlabelled tiles take the majority label of the base-resolution mask
    region they cover; background tiles are always dropped.
    """
    kept = []
    keep = set(keep)
    for tile in tiles:
        label = tile.tissue
        if label is None:
            if mask is None:
                raise MetadataError(f"tile ({tile.row},{tile.col}) has neither a tissue label nor a mask")
            scale = (scales or {}).get(tile.magnification, 1.0)
            label = majority_label(_base_region(mask, tile, scale))
            tile = replace(tile, tissue=label)
        if label == "background":
            continue
        if label in keep:
            kept.append(tile)
    return kept


def resize_tile(tile: np.ndarray, out_px: int = 224) -> np.ndarray:
    """Bilinear resize of a square tile; dtype is preserved"""
    h, w = tile.shape[:2]
    if h != w:
        raise SizeError(f"tile must be square, got {h}x{w}")
    if h == out_px:
        return tile.copy()
    out = resize(tile.astype(np.float64), (out_px, out_px) + tile.shape[2:], order=1, mode="edge",
                 anti_aliasing=False, preserve_range=True)
    return _to_uint8(out) if tile.dtype == np.uint8 else out.astype(tile.dtype)


def tile_to_vector(tile: np.ndarray, input_px: int) -> np.ndarray:
    """Area-downsampled, flattened tile scaled to [0, 1]"""
    img = tile.astype(np.float64)
    if tile.dtype == np.uint8:
        img /= 255.0
    if img.shape[0] != input_px:
        img = _thumbnail(img, input_px)
    return img.reshape(-1)


def augment(tile: np.ndarray, config: AugmentConfig, seed) -> np.ndarray:
    """Random rotation, dihedral flips, perspective warp and hue shift from a seeded stream.

    Every draw is made whether or not its magnitude is zero, so a given
    seed always consumes the same random numbers.
    """
    rng = np.random.default_rng(seed)
    angle = rng.uniform(0.0, config.rotation_max_deg)
    flip_h, flip_v = rng.random() < config.flip_p, rng.random() < config.flip_p
    jitter = rng.uniform(-1.0, 1.0, size=(4, 2)) * config.warp_max
    hue = rng.uniform(-config.hue_max, config.hue_max)
    if not config.enabled:
        return tile.copy()

    is_uint8 = tile.dtype == np.uint8
    img = tile.astype(np.float64) / 255.0 if is_uint8 else tile.astype(np.float64)
    if angle > 0:
        img = rotate(img, angle, resize=False, mode="reflect", order=1, preserve_range=True)
    if flip_h:
        img = img[:, ::-1]
    if flip_v:
        img = img[::-1, :]
    if config.warp_max > 0:
        h, w = img.shape[:2]
        src = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
        dst = src + jitter * np.array([w, h])
        tform = ProjectiveTransform()
        tform.estimate(src, dst)
        img = warp(img, tform, mode="reflect", order=1, preserve_range=True)
    if config.hue_max > 0:
        hsv = rgb2hsv(np.clip(img, 0.0, 1.0))
        hsv[..., 0] = np.mod(hsv[..., 0] + hue, 1.0)
        img = hsv2rgb(hsv)
    img = np.ascontiguousarray(img)
    return _to_uint8(img * 255.0) if is_uint8 else img.astype(tile.dtype)


# Spot pipeline

@dataclass
class SpotMeta:
    patient_id: str
    spot_id: str


@dataclass
class ProcessedTile:
    name: str
    image: np.ndarray
    magnification: str
    row: int
    col: int
    tissue: str


def preprocess_spot(image: np.ndarray, mask: np.ndarray, meta: SpotMeta, config: PreprocessConfig,
                    cohort_profile: Optional[StainProfile] = None) -> List[ProcessedTile]:
    """Normalize, tile and ROI-filter one spot; an unnormalizable spot yields no tiles"""
    if config.macenko:
        try:
            image = normalize_macenko(image, DEFAULT_TARGET, config.od_threshold, config.angle_percentile)
            if config.cohort_normalization and cohort_profile is not None:
                image = normalize_macenko(image, cohort_profile, config.od_threshold, config.angle_percentile)
        except StainEstimationError as e:
            logger.warning(f"Skipping spot {meta.patient_id}/{meta.spot_id}: {e}")
            return []
    pyramid = build_pyramid(image, config.tile_px)
    out: List[ProcessedTile] = []
    for mag in MAGNIFICATIONS:
        if mag not in config.magnifications:
            continue
        tiles = extract_tiles(pyramid.levels[mag], config.tile_px, mag)
        for tile in filter_roi(tiles, mask, pyramid.scales, config.keep_tissues):
            pixels = tile.image if config.resize_px is None else resize_tile(tile.image, config.resize_px)
            name = f"{meta.patient_id}_{meta.spot_id}_{mag}_{tile.row}_{tile.col}"
            out.append(ProcessedTile(name, pixels, mag, tile.row, tile.col, tile.tissue))
    return out
