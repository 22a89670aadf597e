from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Optional, Tuple

import numpy as np

from msidebias.core.errors import ContractError, DimensionError
from msidebias.schemas.schemas import BIAS_ATTRIBUTES, CLASS_LABELS, CohortSpec


@dataclass(frozen=True, eq=False)
class TileRecord:
    """One tile of a cohort together with the metadata the biases are read from"""
    tile_id: str
    patient_id: str
    spot_id: str
    glass_id: str
    project_id: str
    label: str
    tissue_type: str
    magnification: str
    payload: np.ndarray

    @property
    def y(self) -> int:
        return CLASS_LABELS.index(self.label)

    @property
    def spot_key(self) -> str:
        return f"{self.patient_id}/{self.spot_id}"

    def metadata(self) -> Tuple[str, ...]:
        return (self.tile_id, self.patient_id, self.spot_id, self.glass_id,
                self.project_id, self.label, self.tissue_type, self.magnification)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TileRecord):
            return NotImplemented
        return (self.metadata() == other.metadata()
                and self.payload.shape == other.payload.shape
                and np.array_equal(self.payload, other.payload))

    def __repr__(self):
        return f"<TileRecord(id={self.tile_id}, patient={self.patient_id}, label={self.label})>"


@dataclass(frozen=True, eq=False)
class Cohort:
    """An immutable set of tiles plus the generator state that produced them"""
    spec: Optional[CohortSpec]
    tiles: List[TileRecord]
    directions: Dict[str, np.ndarray] = field(default_factory=dict)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Cohort):
            return NotImplemented
        if self.spec != other.spec or len(self.tiles) != len(other.tiles):
            return False
        if set(self.directions) != set(other.directions):
            return False
        if any(not np.array_equal(v, other.directions[k]) for k, v in self.directions.items()):
            return False
        return all(a == b for a, b in zip(self.tiles, other.tiles))

    def __len__(self) -> int:
        return len(self.tiles)

    @cached_property
    def labels(self) -> np.ndarray:
        return np.array([t.y for t in self.tiles], dtype=np.int64)

    @cached_property
    def is_image(self) -> bool:
        return bool(self.tiles) and self.tiles[0].payload.ndim == 3

    def payload_matrix(self, indices: Optional[np.ndarray] = None) -> np.ndarray:
        """Stack feature-vector payloads into an (n, p) float64 matrix"""
        if self.is_image:
            raise ContractError("payload_matrix requires feature-vector payloads")
        rows = self.tiles if indices is None else [self.tiles[i] for i in indices]
        return np.stack([t.payload for t in rows]).astype(np.float64)

    def attribute(self, name: str) -> List[str]:
        """Per-tile values of a bias name or TileRecord attribute"""
        attr = BIAS_ATTRIBUTES.get(name, name)
        return [getattr(t, attr) for t in self.tiles]

    def bias_codes(self, name: str, levels: Optional[List[str]] = None) -> Tuple[np.ndarray, List[str]]:
        """Integer-code a categorical variable; unknown values get code -1 when levels are given"""
        values = self.attribute(name)
        if levels is None:
            levels = sorted(set(values))
        lookup = {v: i for i, v in enumerate(levels)}
        return np.array([lookup.get(v, -1) for v in values], dtype=np.int64), list(levels)

    def patient_labels(self) -> Dict[str, str]:
        return {t.patient_id: t.label for t in self.tiles}

    def __repr__(self):
        return f"<Cohort(tiles={len(self.tiles)}, patients={len(self.patient_labels())})>"


@dataclass
class MlpParams:
    """Weights (in x out) and biases of a rectifier feed-forward network.

    ``version`` is bumped by every optimizer update so that cached
    activations can be checked against the parameters they came from.
    """
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    version: int = 0

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionError("an MLP needs one bias vector per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DimensionError(f"layer {i}: weight {w.shape} and bias {b.shape} do not match")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise DimensionError(f"layer {i}: input dim {w.shape[0]} does not chain "
                                     f"with previous output {self.weights[i - 1].shape[1]}")

    @property
    def dims(self) -> List[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self) -> List[np.ndarray]:
        """Parameter arrays in checkpoint order (W0, b0, W1, b1, ...)"""
        out: List[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.version)


@dataclass
class ModelBundle:
    """Feature extractor, MSI head and one batch-effect head per protected variable"""
    fe: MlpParams
    msi_head: MlpParams
    be_heads: List[MlpParams] = field(default_factory=list)
    bias_names: List[str] = field(default_factory=list)
    bias_levels: Dict[str, List[str]] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.be_heads) != len(self.bias_names):
            raise DimensionError(f"{len(self.be_heads)} BE heads for {len(self.bias_names)} bias names")
        for name, head in [("msi", self.msi_head)] + list(zip(self.bias_names, self.be_heads)):
            if head.in_dim != self.fe.out_dim:
                raise DimensionError(f"head '{name}' expects {head.in_dim} features, FE emits {self.fe.out_dim}")

    @property
    def input_dim(self) -> int:
        return self.fe.in_dim

    def head(self, bias_name: str) -> MlpParams:
        return self.be_heads[self.bias_names.index(bias_name)]

    def copy(self) -> "ModelBundle":
        return ModelBundle(self.fe.copy(), self.msi_head.copy(), [h.copy() for h in self.be_heads],
                           list(self.bias_names), {k: list(v) for k, v in self.bias_levels.items()})

    def __repr__(self):
        return (f"<ModelBundle(fe={self.fe.dims}, msi={self.msi_head.dims}, "
                f"biases={self.bias_names})>")


@dataclass
class Batch:
    """Inputs, labels and protected-variable codes of one training batch"""
    inputs: np.ndarray
    labels: np.ndarray
    bias_values: Dict[str, np.ndarray]
    tile_ids: List[str]

    def __post_init__(self):
        n = self.inputs.shape[0]
        sizes = [self.labels.shape[0], len(self.tile_ids)] + [v.shape[0] for v in self.bias_values.values()]
        if any(s != n for s in sizes):
            raise DimensionError(f"batch components disagree on the sample count: {[n] + sizes}")

    def __len__(self) -> int:
        return self.inputs.shape[0]
