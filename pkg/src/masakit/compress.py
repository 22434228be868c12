"""Training-free checkpoint compression.

Pipeline: materialize per-layer projection weights, partition blocks
into contiguous groups (by hand, uniformly, or from the KL divergence
between consecutive block output distributions), extract a shared
orthonormal atom basis per group via the closed-form stacked-SVD
solution, then spend the leftover parameter budget on per-layer
low-rank corrections of the residuals in a whitened metric.  Residual
ranks for the (query, key) and (value, output) pairs are rebalanced by
a greedy trade along a fixed trajectory, run in both directions.

Whitening uses the Cholesky factor of each projection's calibration
input autocorrelation; the correction stored is the factored low-rank
approximation of L @ dW, applied at load time through a triangular
solve.
"""

from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from .autodiff import GradientTape
from .errors import ValidationError
from .linalg import CholeskyFactor, as_matrix, cholesky, solve_lower_triangular, svd
from .masa import (
    PROJECTION_ORDER,
    AtomDictionary,
    CoefficientMatrix,
    ProjectionKind,
    combine_atoms,
    stack_vectorized,
    unvec,
)
from .model import (
    BlockParams,
    ModelParams,
    ProjectionParams,
    build_projection_weights,
    config_from_meta,
    corpus_windows,
    forward_tokens,
    output_matrix,
)

PMF_FLOOR = 1e-12
DEFAULT_CALIB_SEQUENCES = 1024


@dataclass
class GroupSpec:
    """Contiguous half-open layer ranges covering [0, L) plus a basis count each."""

    ranges: list[tuple[int, int]]
    basis_counts: list[int]

    def __post_init__(self):
        self.ranges = [(int(a), int(b)) for a, b in self.ranges]
        self.basis_counts = [int(b) for b in self.basis_counts]
        if len(self.ranges) != len(self.basis_counts):
            raise ValidationError("one basis count per range required")
        if not self.ranges:
            raise ValidationError("group spec needs at least one range")
        prev_end = None
        for i, ((a, b), basis) in enumerate(zip(self.ranges, self.basis_counts)):
            if b <= a:
                raise ValidationError(f"range {i} is empty: [{a}, {b})")
            if prev_end is None:
                if a != 0:
                    raise ValidationError("ranges must start at layer 0")
            elif a != prev_end:
                raise ValidationError(f"range {i} does not continue at layer {prev_end}")
            if not 1 <= basis <= b - a:
                raise ValidationError(
                    f"basis count {basis} invalid for range [{a}, {b}) of length {b - a}"
                )
            prev_end = b

    @property
    def num_layers(self) -> int:
        return self.ranges[-1][1]

    @property
    def num_groups(self) -> int:
        return len(self.ranges)

    def group_of(self, layer: int) -> int:
        for g, (a, b) in enumerate(self.ranges):
            if a <= layer < b:
                return g
        raise ValidationError(f"layer {layer} outside grouped range")

    def with_basis(self, basis) -> "GroupSpec":
        if isinstance(basis, int):
            counts = [basis] * self.num_groups
        else:
            counts = [int(b) for b in basis]
            if len(counts) != self.num_groups:
                raise ValidationError(
                    f"{len(counts)} basis counts given for {self.num_groups} groups"
                )
        return GroupSpec(list(self.ranges), counts)


def uniform_groups(num_layers: int, k: int) -> GroupSpec:
    """k contiguous groups of near-equal size; earlier groups take the remainder."""
    if not 1 <= k <= num_layers:
        raise ValidationError(f"group count {k} out of range [1, {num_layers}]")
    base, rem = divmod(num_layers, k)
    ranges = []
    start = 0
    for g in range(k):
        size = base + (1 if g < rem else 0)
        ranges.append((start, start + size))
        start += size
    return GroupSpec(ranges, [1] * k)


@dataclass
class LayerPmfSequence:
    """One output-vocabulary pmf per block, averaged over calibration samples."""

    pmfs: np.ndarray  # (L, vocab)

    def __post_init__(self):
        self.pmfs = as_matrix(self.pmfs, "layer pmfs")
        if np.any(self.pmfs < 0):
            raise ValidationError("pmfs must be nonnegative")
        sums = self.pmfs.sum(axis=1)
        if np.max(np.abs(sums - 1.0)) > 1e-9:
            raise ValidationError("pmfs must each sum to 1")

    @property
    def num_layers(self) -> int:
        return self.pmfs.shape[0]


@dataclass
class WhiteningContext:
    """Per-layer Cholesky factors of one projection input's autocorrelation."""

    factors: list[CholeskyFactor]
    token_count: int

    def ridge(self, layer: int) -> float:
        return self.factors[layer].ridge_used


@dataclass
class ResidualEntry:
    """Factored whitened correction: solve(L, left @ right) fixes one layer."""

    left: np.ndarray   # (d, r)
    right: np.ndarray  # (r, h)
    rank: int


@dataclass
class ResidualFactorization:
    entries: list[ResidualEntry | None] = field(default_factory=list)


@dataclass
class RankAllocation:
    r_a: int
    r_b: int
    e_min: float


# ------------------------------------------------------------- matrix pca


def matrix_pca(weights, s: int):
    """Closed-form shared basis: top-s left singular vectors of the stacked weights.

    Returns (AtomDictionary, CoefficientMatrix, error) where the
    coefficients are the trace inner products of each atom with each
    layer weight and the error is the squared singular value tail.
    """
    n_layers = len(weights)
    if not 1 <= s <= n_layers:
        raise ValidationError(f"basis count {s} out of range [1, {n_layers}]")
    stacked = stack_vectorized(weights)
    shape = as_matrix(weights[0]).shape
    res = svd(stacked)
    if s > res.left_vectors.shape[1]:
        raise ValidationError(
            f"basis count {s} exceeds the {res.left_vectors.shape[1]}-dimensional atom space"
        )
    basis = res.left_vectors[:, :s]
    coeffs = basis.T @ stacked
    error = float(np.sum(res.singular_values[s:] ** 2))
    atoms = [unvec(basis[:, j], shape) for j in range(s)]
    return (
        AtomDictionary(atoms, orthonormal=True),
        CoefficientMatrix(coeffs),
        error,
    )


def pca_reconstruction_error(weights, dictionary: AtomDictionary) -> float:
    """Total squared error of projecting each weight onto the atom span."""
    gram = dictionary.gram()
    if np.max(np.abs(gram - np.eye(dictionary.num_atoms))) > 1e-8:
        raise ValidationError("reconstruction error requires an orthonormal dictionary")
    stacked = stack_vectorized(weights)
    basis = dictionary.stacked()
    resid = stacked - basis @ (basis.T @ stacked)
    return float(np.sum(resid * resid))


# ------------------------------------------------------- grouping by drift


def kl_divergence(p, q, floor: float = PMF_FLOOR) -> float:
    """KL(p || q) with both pmfs floored and renormalized to dodge underflow."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValidationError(f"pmf shapes differ: {p.shape} vs {q.shape}")
    pf = np.maximum(p, floor)
    pf = pf / pf.sum()
    qf = np.maximum(q, floor)
    qf = qf / qf.sum()
    return float(np.sum(pf * np.log(pf / qf)))


def consecutive_kl(pmfs: LayerPmfSequence) -> np.ndarray:
    return np.array(
        [
            kl_divergence(pmfs.pmfs[l], pmfs.pmfs[l + 1])
            for l in range(pmfs.num_layers - 1)
        ]
    )


def group_blocks(pmfs: LayerPmfSequence, k: int) -> GroupSpec:
    """Split at the k-1 largest consecutive KL drifts, ties toward earlier layers."""
    n = pmfs.num_layers
    if not 1 <= k <= n:
        raise ValidationError(f"group count {k} out of range [1, {n}]")
    if k == 1:
        return GroupSpec([(0, n)], [1])
    drift = consecutive_kl(pmfs)
    order = sorted(range(len(drift)), key=lambda i: (-drift[i], i))
    splits = sorted(order[: k - 1])
    bounds = [0] + [s + 1 for s in splits] + [n]
    ranges = list(zip(bounds[:-1], bounds[1:]))
    return GroupSpec(ranges, [1] * k)


def layer_pmfs(params: ModelParams, calibration_windows) -> LayerPmfSequence:
    """Block output distributions through the model's own output projection.

    For every sample the per-block hidden states are averaged over
    tokens, projected to vocabulary logits and softmaxed; the resulting
    pmfs are then averaged across samples.
    """
    windows = list(calibration_windows)
    if not windows:
        raise ValidationError("calibration set is empty")
    out_w = output_matrix(params)
    acc = None
    for seq in windows:
        tape = GradientTape()
        weights = build_projection_weights(tape, params)
        _, caps = forward_tokens(tape, params, weights, seq, collect=True)
        stacked = np.stack([h.mean(axis=0) for h in caps["block_out"]])  # (L, d)
        logits = stacked @ out_w
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        pmfs = e / e.sum(axis=1, keepdims=True)
        acc = pmfs if acc is None else acc + pmfs
    return LayerPmfSequence(acc / len(windows))


# --------------------------------------------------- residual refinement


def residual_budget(alpha: float, num_layers: int, basis: int) -> float:
    """Per-layer residual capacity implied by the target ratio and basis count.

    Evaluates (alpha * L - B) / (L - B) verbatim and clamps to [0, 1]
    with a warning; alpha is the fraction of per-projection parameters
    the compressed form may keep, which is what the arithmetic conserves.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValidationError(f"alpha {alpha} outside (0, 1]")
    if not 1 <= basis < num_layers:
        raise ValidationError(
            f"basis count {basis} must lie in [1, {num_layers}) for the budget formula"
        )
    beta = (alpha * num_layers - basis) / (num_layers - basis)
    if beta < 0.0 or beta > 1.0:
        warnings.warn(
            f"residual budget {beta:.4f} outside [0, 1]; clamping", RuntimeWarning
        )
        beta = min(max(beta, 0.0), 1.0)
    return beta


def autocorrelation(layer_inputs) -> np.ndarray:
    """H^T H over token-major activations, symmetrized."""
    h = as_matrix(layer_inputs, "layer inputs")
    if h.shape[0] < h.shape[1]:
        warnings.warn(
            f"autocorrelation from {h.shape[0]} tokens for dim {h.shape[1]}; "
            "expect a rank-deficient estimate",
            RuntimeWarning,
        )
    a = h.T @ h
    return 0.5 * (a + a.T)


def refine_residual(delta_w, whitening: CholeskyFactor, r: int) -> ResidualEntry:
    """Best rank-r correction of delta_w in the whitened metric."""
    dw = as_matrix(delta_w, "residual")
    if whitening.dim != dw.shape[0]:
        raise ValidationError(
            f"whitening dim {whitening.dim} does not match residual rows {dw.shape[0]}"
        )
    kmax = min(dw.shape)
    if not 1 <= r <= kmax:
        raise ValidationError(f"residual rank {r} out of range [1, {kmax}]")
    res = svd(whitening.lower @ dw)
    left = res.left_vectors[:, :r] * res.singular_values[:r]
    right = res.right_vectors_t[:r]
    return ResidualEntry(left=left, right=right, rank=r)


def residual_correction(entry: ResidualEntry, whitening: CholeskyFactor) -> np.ndarray:
    return solve_lower_triangular(whitening, entry.left @ entry.right)


# -------------------------------------------------- balanced rank trading


def _tail_sums(sigma: np.ndarray) -> np.ndarray:
    """tails[r] = sum of squared singular values strictly after rank r.

    Computed flip/cumsum/flip so tails accumulate from the smallest
    value upward; an extra trailing zero makes tails[n] well defined.
    """
    sq = sigma * sigma
    return np.concatenate([np.flip(np.cumsum(np.flip(sq))), [0.0]])


def _validate_sigma(sigma, label: str) -> np.ndarray:
    s = np.asarray(sigma, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValidationError(f"{label} singular values must be a non-empty 1-D list")
    if np.any(s < 0):
        raise ValidationError(f"{label} singular values must be nonnegative")
    if np.any(np.diff(s) > 1e-12):
        raise ValidationError(f"{label} singular values must be sorted descending")
    return s


def _initial_rank(beta: float, m: int, n: int) -> tuple[int, int]:
    limit = min(m, n)
    r = int((1.0 - beta) * m * n / (m + n))
    if not 1 <= r <= limit:
        clamped = min(max(r, 1), limit)
        warnings.warn(
            f"initial rank {r} outside [1, {limit}]; clamped to {clamped}", RuntimeWarning
        )
        r = clamped
    return r, limit


def _allocate_one_direction(sigma_a, sigma_b, m, n, k, beta, max_moves):
    """The published trajectory: shrink A's rank, grow B's, keep the best seen."""
    tails_a = _tail_sums(sigma_a)
    tails_b = _tail_sums(sigma_b)

    def tail(tails, r):
        return float(tails[min(r, len(tails) - 1)])

    ra, lim_a = _initial_rank(beta, m, n)
    rb, lim_b = _initial_rank(beta, m, k)
    best = RankAllocation(ra, rb, tail(tails_a, ra) + tail(tails_b, rb))
    moves = 0
    while max_moves is None or moves < max_moves:
        ra -= 1
        rb += 1
        moves += 1
        if ra < 1 or rb > lim_b:
            break
        e = tail(tails_a, ra) + tail(tails_b, rb)
        if e < best.e_min:
            best = RankAllocation(ra, rb, e)
    return best


def balanced_rank_allocation(
    sigma_a, sigma_b, m: int, n: int, k: int, beta: float, max_moves: int | None = None
) -> RankAllocation:
    """Trade rank between paired residual matrices A (m x n) and B (m x k).

    Initial ranks spend a (1 - beta) share of each matrix's parameter
    count on its factors.  The single-direction trajectory only ever
    shifts capacity from A to B, so the trade is run a second time with
    the roles swapped and the lower-error result wins (ties keep the
    published direction).  max_moves caps the trajectory length; the
    default walks it fully.
    """
    sa = _validate_sigma(sigma_a, "A")
    sb = _validate_sigma(sigma_b, "B")
    if not 0.0 < beta < 1.0:
        raise ValidationError(f"beta {beta} outside (0, 1)")
    for name, v in (("m", m), ("n", n), ("k", k)):
        if v < 1:
            raise ValidationError(f"dimension {name} must be >= 1")
    forward = _allocate_one_direction(sa, sb, m, n, k, beta, max_moves)
    swapped = _allocate_one_direction(sb, sa, m, k, n, beta, max_moves)
    if swapped.e_min < forward.e_min:
        return RankAllocation(swapped.r_b, swapped.r_a, swapped.e_min)
    return forward


# ----------------------------------------------------------- orchestrator


@dataclass
class ReportRow:
    projection: str
    group: int
    layer: int
    pca_error: float
    residual_rank: int
    whitening_ridge: float
    cr_achieved: float


REPORT_COLUMNS = (
    "projection",
    "group",
    "layer",
    "pca_error",
    "residual_rank",
    "whitening_ridge",
    "cr_achieved",
)


@dataclass
class CompressionResult:
    tensors: dict[str, np.ndarray]
    meta: dict
    rows: list[ReportRow]
    groups: GroupSpec


def materialize_weights(params: ModelParams) -> dict[ProjectionKind, list[np.ndarray]]:
    """Per-layer dense projection weights, synthesizing shared storage as needed."""
    out = {}
    L = params.config.num_layers
    for kind in PROJECTION_ORDER:
        pp = params.proj[kind]
        if pp.dense is not None:
            out[kind] = [w.value.copy() for w in pp.dense]
        else:
            if pp.coeff is None:
                raise ValidationError("bake the coefficient MLP before compressing")
            out[kind] = [
                combine_atoms(pp.atoms.value, pp.coeff.value[:, l]) for l in range(L)
            ]
    return out


def _worker_count() -> int:
    raw = os.environ.get("MASAKIT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _parallel_map(fn, items):
    workers = _worker_count()
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))  # map preserves submission order


@dataclass
class _CalibStats:
    pmfs: LayerPmfSequence | None
    attn_in_corr: list[np.ndarray] | None
    o_in_corr: list[np.ndarray] | None
    tokens: int


def _run_calibration(params, windows, need_pmfs, need_autocorr) -> _CalibStats:
    windows = list(windows)
    if not windows:
        raise ValidationError("calibration set is empty")
    L = params.config.num_layers
    d = params.config.model_dim
    pmf_acc = None
    attn_acc = [np.zeros((d, d)) for _ in range(L)] if need_autocorr else None
    o_acc = [np.zeros((d, d)) for _ in range(L)] if need_autocorr else None
    out_w = output_matrix(params) if need_pmfs else None
    tokens = 0
    for seq in windows:
        tape = GradientTape()
        weights = build_projection_weights(tape, params)
        _, caps = forward_tokens(tape, params, weights, seq, collect=True)
        tokens += len(seq)
        if need_autocorr:
            for l in range(L):
                a = caps["attn_in"][l]
                o = caps["o_in"][l]
                attn_acc[l] += a.T @ a
                o_acc[l] += o.T @ o
        if need_pmfs:
            stacked = np.stack([h.mean(axis=0) for h in caps["block_out"]])
            logits = stacked @ out_w
            logits -= logits.max(axis=1, keepdims=True)
            e = np.exp(logits)
            pmf_acc = (e / e.sum(axis=1, keepdims=True)) + (
                0.0 if pmf_acc is None else pmf_acc
            )
    pmfs = LayerPmfSequence(pmf_acc / len(windows)) if need_pmfs else None
    if need_autocorr and tokens < d:
        warnings.warn(
            f"only {tokens} calibration tokens for dim {d}; autocorrelations may be "
            "rank-deficient",
            RuntimeWarning,
        )
    sym = lambda a: 0.5 * (a + a.T)
    return _CalibStats(
        pmfs=pmfs,
        attn_in_corr=[sym(a) for a in attn_acc] if need_autocorr else None,
        o_in_corr=[sym(a) for a in o_acc] if need_autocorr else None,
        tokens=tokens,
    )


def resolve_groups(params, groups, basis, calibration_windows=None) -> GroupSpec:
    L = params.config.num_layers
    if isinstance(groups, GroupSpec):
        spec = groups
    elif isinstance(groups, tuple) and groups[0] == "uniform":
        spec = uniform_groups(L, groups[1])
    elif isinstance(groups, tuple) and groups[0] == "auto":
        if calibration_windows is None:
            raise ValidationError("auto grouping needs calibration data")
        pmfs = layer_pmfs(params, calibration_windows)
        spec = group_blocks(pmfs, groups[1])
    else:
        raise ValidationError(f"unrecognized grouping request: {groups!r}")
    if spec.num_layers != L:
        raise ValidationError(
            f"group spec covers {spec.num_layers} layers, model has {L}"
        )
    return spec.with_basis(basis) if basis is not None else spec


PAIRINGS = {"qk-vo", "none"}


def compress_model(
    params: ModelParams,
    alpha: float | None = None,
    groups=("uniform", 1),
    basis=1,
    calibration: bytes | None = None,
    pairing: str = "qk-vo",
    window: int = 128,
    max_calib_sequences: int = DEFAULT_CALIB_SEQUENCES,
) -> CompressionResult:
    """Compress attention projections; alpha=None keeps the pure basis reconstruction."""
    if pairing not in PAIRINGS:
        raise ValidationError(f"pairing must be one of {sorted(PAIRINGS)}")
    cfg = params.config
    L, d = cfg.num_layers, cfg.model_dim
    h = d

    windows = None
    if calibration is not None:
        windows = corpus_windows(calibration, min(window, cfg.max_seq), extra=0)
        windows = windows[:max_calib_sequences]

    auto = isinstance(groups, tuple) and groups[0] == "auto"
    refine = alpha is not None
    if refine and windows is None:
        raise ValidationError("refinement (alpha set) requires calibration data")
    if auto and windows is None:
        raise ValidationError("auto grouping requires calibration data")

    stats = None
    spec_groups = groups
    if auto or refine:
        stats = _run_calibration(params, windows, need_pmfs=auto, need_autocorr=refine)
        if auto:
            spec_groups = group_blocks(stats.pmfs, groups[1])
    spec = resolve_groups(params, spec_groups, basis)

    weights = materialize_weights(params)
    whitening: dict[ProjectionKind, WhiteningContext] = {}
    if refine:
        attn_factors = [cholesky(stats.attn_in_corr[l]) for l in range(L)]
        o_factors = [cholesky(stats.o_in_corr[l]) for l in range(L)]
        for kind in PROJECTION_ORDER:
            factors = o_factors if kind is ProjectionKind.OUTPUT else attn_factors
            whitening[kind] = WhiteningContext(factors, stats.tokens)

    # Stage 1: shared basis per (kind, group), fanned out when MASAKIT_THREADS allows.
    tasks = [(kind, g) for kind in PROJECTION_ORDER for g in range(spec.num_groups)]

    def run_pca(task):
        kind, g = task
        a, b = spec.ranges[g]
        return matrix_pca(weights[kind][a:b], spec.basis_counts[g])

    pca_out = dict(zip(tasks, _parallel_map(run_pca, tasks)))

    recon: dict[ProjectionKind, list[np.ndarray]] = {k: [None] * L for k in PROJECTION_ORDER}
    pca_err: dict[ProjectionKind, list[float]] = {k: [0.0] * L for k in PROJECTION_ORDER}
    for (kind, g), (dictionary, coeffs, _err) in pca_out.items():
        a, b = spec.ranges[g]
        atoms = dictionary.as_array()
        for li, l in enumerate(range(a, b)):
            w_hat = combine_atoms(atoms, coeffs.values[:, li])
            recon[kind][l] = w_hat
            delta = weights[kind][l] - w_hat
            pca_err[kind][l] = float(np.sum(delta * delta))

    # Stage 2: whitened residual corrections with paired rank trading.
    residuals: dict[ProjectionKind, ResidualFactorization] = {
        k: ResidualFactorization([None] * L) for k in PROJECTION_ORDER
    }
    if pairing == "qk-vo":
        pairs = [
            (ProjectionKind.QUERY, ProjectionKind.KEY),
            (ProjectionKind.VALUE, ProjectionKind.OUTPUT),
        ]
    else:
        pairs = [(kind, None) for kind in PROJECTION_ORDER]

    for g in range(spec.num_groups):
        a, b = spec.ranges[g]
        group_len = b - a
        basis_g = spec.basis_counts[g]
        if not refine or group_len == 1 or basis_g >= group_len:
            continue  # singleton groups reconstruct exactly; full basis has no residual
        raw_beta = (alpha * group_len - basis_g) / (group_len - basis_g)
        if raw_beta < 0.0:
            warnings.warn(
                f"group {g}: residual budget {raw_beta:.4f} infeasible; refinement disabled",
                RuntimeWarning,
            )
            continue
        beta = residual_budget(alpha, group_len, basis_g)
        if beta == 0.0:
            continue
        # The trading algorithm consumes a compression ratio, the share removed,
        # which is the complement of the kept share computed above.
        beta_alg = min(max(1.0 - beta, 1e-9), 1.0 - 1e-9)
        for l in range(a, b):
            for ka, kb in pairs:
                dwa = weights[ka][l] - recon[ka][l]
                fa = whitening[ka].factors[l]
                if kb is None:
                    r, _ = _initial_rank(beta_alg, d, h)
                    residuals[ka].entries[l] = refine_residual(dwa, fa, r)
                    continue
                dwb = weights[kb][l] - recon[kb][l]
                fb = whitening[kb].factors[l]
                sig_a = svd(fa.lower @ dwa).singular_values
                sig_b = svd(fb.lower @ dwb).singular_values
                alloc = balanced_rank_allocation(sig_a, sig_b, d, h, h, beta_alg)
                residuals[ka].entries[l] = refine_residual(dwa, fa, alloc.r_a)
                residuals[kb].entries[l] = refine_residual(dwb, fb, alloc.r_b)

    # Assemble tensors, report rows and metadata.
    tensors: dict[str, np.ndarray] = {}
    for name, t in params.named_parameters():
        if name.startswith("attn."):
            continue
        tensors[name] = t.value
    rows: list[ReportRow] = []
    dense_per_layer = d * h
    for kind in PROJECTION_ORDER:
        tag = kind.tag
        for g in range(spec.num_groups):
            a, b = spec.ranges[g]
            dictionary, coeffs, _ = pca_out[(kind, g)]
            for s, atom in enumerate(dictionary.atoms):
                tensors[ckpt.group_dict_atom_name(tag, g, s)] = atom
            tensors[ckpt.group_coeff_name(tag, g)] = coeffs.values
            for li, l in enumerate(range(a, b)):
                entry = residuals[kind].entries[l]
                rank = entry.rank if entry is not None else 0
                ridge = whitening[kind].ridge(l) if entry is not None else 0.0
                if entry is not None:
                    tensors[ckpt.resid_factor_name(tag, l, "left")] = entry.left
                    tensors[ckpt.resid_factor_name(tag, l, "right")] = entry.right
                    tensors[ckpt.whitening_name(tag, l)] = whitening[kind].factors[l].lower
                basis_g = spec.basis_counts[g]
                kept = basis_g * dense_per_layer / (b - a) + basis_g + rank * (d + h)
                rows.append(
                    ReportRow(
                        projection=tag,
                        group=g,
                        layer=l,
                        pca_error=pca_err[kind][l],
                        residual_rank=rank,
                        whitening_ridge=ridge,
                        cr_achieved=1.0 - kept / dense_per_layer,
                    )
                )

    meta = {
        "L": L,
        "d": d,
        "heads": cfg.num_heads,
        "mode": "dense",  # materializes to per-layer dense weights
        "S": None,
        "groups": {
            "ranges": [list(r) for r in spec.ranges],
            "basis": list(spec.basis_counts),
        },
        "format_version": ckpt.FORMAT_VERSION,
        "vocab_size": cfg.vocab_size,
        "ffn_mult": cfg.ffn_mult,
        "max_seq": cfg.max_seq,
        "tie_embeddings": cfg.tie_embeddings,
        "alpha": alpha,
        "pairing": pairing,
    }
    return CompressionResult(tensors=tensors, meta=meta, rows=rows, groups=spec)


def materialize_compressed(tensors: dict[str, np.ndarray], meta: dict) -> ModelParams:
    """Rebuild dense per-layer weights from a grouped compressed checkpoint."""
    from .autodiff import leaf

    if not meta.get("groups"):
        raise ValidationError("checkpoint is not a grouped compressed artifact")
    spec = GroupSpec(
        [tuple(r) for r in meta["groups"]["ranges"]], meta["groups"]["basis"]
    )
    cfg = config_from_meta({**meta, "mode": "dense", "S": None})
    L = cfg.num_layers

    def take(name):
        if name not in tensors:
            raise ValidationError(f"checkpoint missing tensor {name!r}")
        return np.asarray(tensors[name], dtype=np.float64)

    proj = {}
    for kind in PROJECTION_ORDER:
        tag = kind.tag
        dense = []
        for l in range(L):
            g = spec.group_of(l)
            a, _b = spec.ranges[g]
            coeffs = take(ckpt.group_coeff_name(tag, g))
            atoms = np.stack(
                [take(ckpt.group_dict_atom_name(tag, g, s)) for s in range(coeffs.shape[0])]
            )
            w = combine_atoms(atoms, coeffs[:, l - a])
            left_name = ckpt.resid_factor_name(tag, l, "left")
            if left_name in tensors:
                left = take(left_name)
                right = take(ckpt.resid_factor_name(tag, l, "right"))
                factor = CholeskyFactor(take(ckpt.whitening_name(tag, l)), 0.0)
                w = w + solve_lower_triangular(factor, left @ right)
            dense.append(leaf(w))
        proj[kind] = ProjectionParams(kind, dense=dense)

    blocks = []
    for l in range(L):
        blocks.append(
            BlockParams(
                ln1_gain=leaf(take(f"block{l}.ln1.gain")),
                ln1_bias=leaf(take(f"block{l}.ln1.bias")),
                ln2_gain=leaf(take(f"block{l}.ln2.gain")),
                ln2_bias=leaf(take(f"block{l}.ln2.bias")),
                ffn_w1=leaf(take(f"block{l}.ffn.w1")),
                ffn_b1=leaf(take(f"block{l}.ffn.b1")),
                ffn_w2=leaf(take(f"block{l}.ffn.w2")),
                ffn_b2=leaf(take(f"block{l}.ffn.b2")),
            )
        )
    return ModelParams(
        config=cfg,
        tok_emb=leaf(take("tok_emb")),
        pos_emb=leaf(take("pos_emb")),
        blocks=blocks,
        proj=proj,
        final_gain=leaf(take("ln_f.gain")),
        final_bias=leaf(take("ln_f.bias")),
        out_proj=None if cfg.tie_embeddings else leaf(take("out_proj")),
    )
