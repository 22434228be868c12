"""Shared-dictionary parameterization of attention projections.

A projection kind (query/key/value/output) stores S matrix atoms of
shape d x h plus an S x L coefficient matrix; layer l's weight is the
linear combination sum_s c[s, l] * atom_s.  Vectorization order is
column-major everywhere, so stacking the vectorized per-layer weights
side by side and multiplying the stacked atom matrix by the coefficient
matrix reproduces the per-layer combinations exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.special import erf

from .errors import ValidationError
from .linalg import as_matrix

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ProjectionKind(Enum):
    QUERY = "q"
    KEY = "k"
    VALUE = "v"
    OUTPUT = "o"

    @property
    def tag(self) -> str:
        return self.value


PROJECTION_ORDER = (
    ProjectionKind.QUERY,
    ProjectionKind.KEY,
    ProjectionKind.VALUE,
    ProjectionKind.OUTPUT,
)


class SharingMode(Enum):
    DENSE = "dense"
    QKV = "qkv"
    QKVO = "qkvo"


def shared_kinds(mode: SharingMode) -> tuple[ProjectionKind, ...]:
    if mode is SharingMode.DENSE:
        return ()
    if mode is SharingMode.QKV:
        return PROJECTION_ORDER[:3]
    return PROJECTION_ORDER


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact (erf-based) GeLU."""
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def vec(m) -> np.ndarray:
    """Column-major vectorization, fixed project-wide."""
    return np.asarray(m, dtype=np.float64).reshape(-1, order="F")


def unvec(v, shape: tuple[int, int]) -> np.ndarray:
    return np.asarray(v, dtype=np.float64).reshape(shape, order="F")


def stack_vectorized(weights) -> np.ndarray:
    """Stack vec(W_l) as columns, one per layer, in layer order."""
    if len(weights) == 0:
        raise ValidationError("cannot stack an empty weight list")
    mats = [as_matrix(w, f"weight {i}") for i, w in enumerate(weights)]
    shape = mats[0].shape
    for i, m in enumerate(mats):
        if m.shape != shape:
            raise ValidationError(f"weight {i} has shape {m.shape}, expected {shape}")
    return np.column_stack([vec(m) for m in mats])


def unstack_vectorized(stacked, shape: tuple[int, int]) -> list[np.ndarray]:
    s = as_matrix(stacked, "stacked weights")
    if s.shape[0] != shape[0] * shape[1]:
        raise ValidationError(f"stacked rows {s.shape[0]} do not match shape {shape}")
    return [unvec(s[:, j], shape) for j in range(s.shape[1])]


def combine_atoms(atoms: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """sum_s coeffs[s] * atoms[s] for a (S, d, h) atom stack.

    Single summation routine shared by the inference and training paths,
    so baked coefficients reproduce training-time forwards bit for bit.
    The copy to contiguous layout matters: BLAS picks different kernels
    for strided inputs and the last bit would wobble without it.
    """
    return np.tensordot(np.ascontiguousarray(coeffs), np.ascontiguousarray(atoms), axes=1)


@dataclass
class AtomDictionary:
    """Ordered matrix atoms for one projection kind."""

    atoms: list[np.ndarray]
    projection: ProjectionKind | None = None
    orthonormal: bool = False

    def __post_init__(self):
        if len(self.atoms) < 1:
            raise ValidationError("dictionary needs at least one atom")
        self.atoms = [as_matrix(a, f"atom {i}") for i, a in enumerate(self.atoms)]
        shape = self.atoms[0].shape
        for i, a in enumerate(self.atoms):
            if a.shape != shape:
                raise ValidationError(f"atom {i} has shape {a.shape}, expected {shape}")
        if self.orthonormal:
            g = self.gram()
            if np.max(np.abs(g - np.eye(len(self.atoms)))) > 1e-8:
                raise ValidationError("atoms flagged orthonormal violate trace orthonormality")

    @property
    def num_atoms(self) -> int:
        return len(self.atoms)

    @property
    def atom_shape(self) -> tuple[int, int]:
        return self.atoms[0].shape

    def as_array(self) -> np.ndarray:
        return np.stack(self.atoms)

    def stacked(self) -> np.ndarray:
        """(d*h, S) matrix of vectorized atoms."""
        return np.column_stack([vec(a) for a in self.atoms])

    def gram(self) -> np.ndarray:
        d = self.stacked()
        return d.T @ d


@dataclass
class CoefficientMatrix:
    """S x L mixing coefficients; column l mixes the atoms for layer l."""

    values: np.ndarray

    def __post_init__(self):
        self.values = as_matrix(self.values, "coefficients")

    @property
    def num_atoms(self) -> int:
        return self.values.shape[0]

    @property
    def num_layers(self) -> int:
        return self.values.shape[1]


@dataclass
class BlockEmbeddingTable:
    """One trainable embedding vector per transformer block."""

    embeddings: np.ndarray

    def __post_init__(self):
        self.embeddings = as_matrix(self.embeddings, "block embeddings")

    @property
    def num_layers(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


def mlp_hidden_width(num_atoms: int) -> int:
    return max(4 * num_atoms, 32)


@dataclass
class CoefficientMlp:
    """Three affine layers E -> H -> H -> S with GeLU on the two hidden layers."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    def __post_init__(self):
        self.w1 = as_matrix(self.w1, "mlp w1")
        self.w2 = as_matrix(self.w2, "mlp w2")
        self.w3 = as_matrix(self.w3, "mlp w3")
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64)
        self.b3 = np.asarray(self.b3, dtype=np.float64)
        if self.w1.shape[1] != self.w2.shape[0] or self.w2.shape[1] != self.w3.shape[0]:
            raise ValidationError("mlp layer widths do not chain")

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def output_dim(self) -> int:
        return self.w3.shape[1]


def coeff_from_mlp(table: BlockEmbeddingTable, mlp: CoefficientMlp, layer: int) -> np.ndarray:
    """Coefficient vector for one block: mlp(embedding[layer]).

    Evaluated on a (1, E) row so the arithmetic matches the training
    path shape for shape; bit-identical baking depends on it.
    """
    if not 0 <= layer < table.num_layers:
        raise ValidationError(f"layer {layer} out of range [0, {table.num_layers})")
    if table.dim != mlp.input_dim:
        raise ValidationError(
            f"embedding dim {table.dim} does not match mlp input dim {mlp.input_dim}"
        )
    e = table.embeddings[layer : layer + 1]
    h1 = gelu(e @ mlp.w1 + mlp.b1)
    h2 = gelu(h1 @ mlp.w2 + mlp.b2)
    return (h2 @ mlp.w3 + mlp.b3)[0]


def bake_coefficients(table: BlockEmbeddingTable, mlp: CoefficientMlp) -> CoefficientMatrix:
    """Materialize the full S x L coefficient matrix, one MLP pass per block."""
    cols = [coeff_from_mlp(table, mlp, l) for l in range(table.num_layers)]
    return CoefficientMatrix(np.column_stack(cols))


def reconstruct_weight(
    dictionary: AtomDictionary, coeffs: CoefficientMatrix, layer: int
) -> np.ndarray:
    """Layer weight as the coefficient-weighted atom combination."""
    if dictionary.num_atoms != coeffs.num_atoms:
        raise ValidationError(
            f"dictionary has {dictionary.num_atoms} atoms, coefficients expect {coeffs.num_atoms}"
        )
    if not 0 <= layer < coeffs.num_layers:
        raise ValidationError(f"layer {layer} out of range [0, {coeffs.num_layers})")
    return combine_atoms(dictionary.as_array(), coeffs.values[:, layer])


def projection_compression_ratio(s: int, l: int, d: int, h: int) -> float:
    """Fraction of one projection's parameters removed by sharing S atoms.

    Counts the dictionary (S * d * h) plus the coefficients (S * L)
    against the dense L * d * h baseline.  Negative when the sharing
    overhead exceeds the savings (S close to or above L).
    """
    for name, v in (("s", s), ("l", l), ("d", d), ("h", h)):
        if v < 1:
            raise ValidationError(f"{name} must be >= 1, got {v}")
    return 1.0 - s * (d * h + l) / (l * d * h)


def attention_module_cr(mode: SharingMode, per_projection_r: float) -> float:
    """Whole-attention-module ratio; with a dense output projection only 3 of 4 shrink."""
    if not 0.0 <= per_projection_r <= 1.0:
        raise ValidationError(f"per-projection ratio {per_projection_r} outside [0, 1]")
    if mode is SharingMode.QKVO:
        return per_projection_r
    if mode is SharingMode.QKV:
        return 0.75 * per_projection_r
    return 0.0


def atom_cosine_similarity(d_i, d_j) -> float:
    """Frobenius cosine similarity between two atoms."""
    a = as_matrix(d_i, "atom i")
    b = as_matrix(d_j, "atom j")
    if a.shape != b.shape:
        raise ValidationError(f"atom shapes differ: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValidationError("cosine similarity undefined for a zero-norm atom")
    return float(np.sum(a * b) / (na * nb))


def similarity_matrix(dictionary: AtomDictionary) -> np.ndarray:
    """S x S matrix of pairwise atom cosine similarities."""
    s = dictionary.num_atoms
    out = np.empty((s, s))
    for i in range(s):
        for j in range(s):
            out[i, j] = atom_cosine_similarity(dictionary.atoms[i], dictionary.atoms[j])
    return out


@dataclass
class SharedProjection:
    """Storage for one projection kind: either a dictionary pair or dense per-layer weights."""

    dictionary: AtomDictionary | None = None
    coefficients: CoefficientMatrix | None = None
    dense: list[np.ndarray] | None = None

    def __post_init__(self):
        has_shared = self.dictionary is not None or self.coefficients is not None
        if has_shared and self.dense is not None:
            raise ValidationError("projection cannot be both shared and dense")
        if has_shared:
            if self.dictionary is None or self.coefficients is None:
                raise ValidationError("shared projection needs a dictionary and coefficients")
            if self.dictionary.num_atoms != self.coefficients.num_atoms:
                raise ValidationError("dictionary and coefficients disagree on atom count")
        elif self.dense is None:
            raise ValidationError("projection needs exactly one storage form")

    @property
    def is_shared(self) -> bool:
        return self.dictionary is not None

    def num_layers(self) -> int:
        if self.is_shared:
            return self.coefficients.num_layers
        return len(self.dense)

    def weight(self, layer: int) -> np.ndarray:
        if self.is_shared:
            return reconstruct_weight(self.dictionary, self.coefficients, layer)
        if not 0 <= layer < len(self.dense):
            raise ValidationError(f"layer {layer} out of range")
        return self.dense[layer]


@dataclass
class SharedProjectionSet:
    """All four attention projections under one sharing mode."""

    mode: SharingMode
    entries: dict[ProjectionKind, SharedProjection] = field(default_factory=dict)

    def __post_init__(self):
        missing = [k.tag for k in PROJECTION_ORDER if k not in self.entries]
        if missing:
            raise ValidationError(f"missing projections: {missing}")
        shared = set(shared_kinds(self.mode))
        layer_counts = set()
        for kind in PROJECTION_ORDER:
            entry = self.entries[kind]
            if (kind in shared) != entry.is_shared:
                want = "shared" if kind in shared else "dense"
                raise ValidationError(f"projection {kind.tag} must be {want} in {self.mode.value} mode")
            layer_counts.add(entry.num_layers())
        if len(layer_counts) != 1:
            raise ValidationError(f"projections disagree on layer count: {sorted(layer_counts)}")

    def weight(self, kind: ProjectionKind, layer: int) -> np.ndarray:
        return self.entries[kind].weight(layer)
