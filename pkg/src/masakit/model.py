"""Minimal decoder-only byte transformer with swappable attention storage.

Pre-norm residual blocks, learned absolute positions, GeLU FFN, causal
multi-head attention.  Attention projections are stored dense, or as
shared atom dictionaries mixed per block by a direct coefficient matrix
or by a per-block embedding fed through a 3-layer MLP.  All forwards run
through the gradient tape so there is exactly one implementation of the
math; inference just ignores the recorded graph.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .autodiff import GradientTape, Tensor, leaf
from .errors import NumericalError, ValidationError
from .masa import (
    PROJECTION_ORDER,
    AtomDictionary,
    BlockEmbeddingTable,
    CoefficientMatrix,
    CoefficientMlp,
    ProjectionKind,
    SharingMode,
    bake_coefficients,
    mlp_hidden_width,
    shared_kinds,
)

LN_EPS = 1e-5


@dataclass
class ToyConfig:
    num_layers: int
    model_dim: int
    num_heads: int
    head_dim: int | None = None
    ffn_mult: int = 4
    vocab_size: int = 256
    mode: SharingMode = SharingMode.DENSE
    num_atoms: int = 0
    embed_dim: int | None = None  # block-embedding width, defaults to num_atoms
    max_seq: int = 256
    tie_embeddings: bool = False
    direct_coeff: bool = False  # train C directly instead of the MLP path
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.mode, str):
            self.mode = SharingMode(self.mode)
        if self.num_layers < 1 or self.model_dim < 1 or self.num_heads < 1:
            raise ValidationError("layers, dim and heads must all be >= 1")
        if self.head_dim is None:
            if self.model_dim % self.num_heads != 0:
                raise ValidationError(
                    f"model_dim {self.model_dim} not divisible by {self.num_heads} heads"
                )
            self.head_dim = self.model_dim // self.num_heads
        if self.num_heads * self.head_dim != self.model_dim:
            raise ValidationError("model_dim must equal num_heads * head_dim")
        if self.mode is not SharingMode.DENSE:
            if self.num_atoms < 1:
                raise ValidationError("shared modes need num_atoms >= 1")
            if self.num_atoms > self.num_layers:
                warnings.warn(
                    f"num_atoms {self.num_atoms} exceeds num_layers {self.num_layers}; "
                    "sharing stores more than it saves",
                    RuntimeWarning,
                )
            if self.embed_dim is None:
                self.embed_dim = self.num_atoms
        if self.vocab_size < 2:
            raise ValidationError("vocab_size must be >= 2")


@dataclass
class MlpParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor

    def as_coefficient_mlp(self) -> CoefficientMlp:
        return CoefficientMlp(
            self.w1.value, self.b1.value, self.w2.value,
            self.b2.value, self.w3.value, self.b3.value,
        )


@dataclass
class ProjectionParams:
    kind: ProjectionKind
    dense: list[Tensor] | None = None
    atoms: Tensor | None = None          # (S, d, h)
    coeff: Tensor | None = None          # (S, L), direct mode or baked
    embeddings: Tensor | None = None     # (L, E), MLP mode
    mlp: MlpParams | None = None

    @property
    def is_shared(self) -> bool:
        return self.atoms is not None

    @property
    def uses_mlp(self) -> bool:
        return self.mlp is not None


@dataclass
class BlockParams:
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor


@dataclass
class ModelParams:
    config: ToyConfig
    tok_emb: Tensor
    pos_emb: Tensor
    blocks: list[BlockParams]
    proj: dict[ProjectionKind, ProjectionParams]
    final_gain: Tensor
    final_bias: Tensor
    out_proj: Tensor | None  # None when tied to tok_emb

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """Stable (name, tensor) listing used by the optimizer and serializer."""
        out = [("tok_emb", self.tok_emb), ("pos_emb", self.pos_emb)]
        for l, bp in enumerate(self.blocks):
            out += [
                (f"block{l}.ln1.gain", bp.ln1_gain),
                (f"block{l}.ln1.bias", bp.ln1_bias),
                (f"block{l}.ln2.gain", bp.ln2_gain),
                (f"block{l}.ln2.bias", bp.ln2_bias),
                (f"block{l}.ffn.w1", bp.ffn_w1),
                (f"block{l}.ffn.b1", bp.ffn_b1),
                (f"block{l}.ffn.w2", bp.ffn_w2),
                (f"block{l}.ffn.b2", bp.ffn_b2),
            ]
        for kind in PROJECTION_ORDER:
            pp = self.proj[kind]
            t = kind.tag
            if pp.dense is not None:
                out += [(ckpt.dense_weight_name(t, l), w) for l, w in enumerate(pp.dense)]
                continue
            out.append((f"attn.{t}.atoms", pp.atoms))
            if pp.coeff is not None:
                out.append((ckpt.coeff_name(t), pp.coeff))
            if pp.embeddings is not None:
                out.append((f"attn.{t}.block_emb", pp.embeddings))
            if pp.mlp is not None:
                for i, part in enumerate(("w1", "b1", "w2", "b2", "w3", "b3")):
                    out.append((f"attn.{t}.mlp.{part}", getattr(pp.mlp, part)))
        out += [("ln_f.gain", self.final_gain), ("ln_f.bias", self.final_bias)]
        if self.out_proj is not None:
            out.append(("out_proj", self.out_proj))
        return out


def init_params(config: ToyConfig) -> ModelParams:
    """Deterministic initialization from config.seed.

    Dense projections and atoms start at std 1/sqrt(d) and coefficients
    at std 1/sqrt(S), so a mixed weight matches the dense init scale at
    step 0.  The coefficient MLP's last layer is rescaled after a dry
    bake so the produced coefficients start at that same 1/sqrt(S).
    """
    rng = np.random.default_rng(config.seed)
    d = config.model_dim
    f = config.ffn_mult * d
    L = config.num_layers
    w_std = 1.0 / math.sqrt(d)

    tok_emb = leaf(rng.normal(0.0, 0.02, (config.vocab_size, d)), "tok_emb")
    pos_emb = leaf(rng.normal(0.0, 0.02, (config.max_seq, d)), "pos_emb")

    blocks = []
    for l in range(L):
        blocks.append(
            BlockParams(
                ln1_gain=leaf(np.ones(d)),
                ln1_bias=leaf(np.zeros(d)),
                ln2_gain=leaf(np.ones(d)),
                ln2_bias=leaf(np.zeros(d)),
                ffn_w1=leaf(rng.normal(0.0, w_std, (d, f))),
                ffn_b1=leaf(np.zeros(f)),
                ffn_w2=leaf(rng.normal(0.0, 1.0 / math.sqrt(f), (f, d))),
                ffn_b2=leaf(np.zeros(d)),
            )
        )

    shared = set(shared_kinds(config.mode))
    proj: dict[ProjectionKind, ProjectionParams] = {}
    for kind in PROJECTION_ORDER:
        if kind not in shared:
            dense = [leaf(rng.normal(0.0, w_std, (d, d))) for _ in range(L)]
            proj[kind] = ProjectionParams(kind, dense=dense)
            continue
        S = config.num_atoms
        atoms = leaf(rng.normal(0.0, w_std, (S, d, d)))
        c_std = 1.0 / math.sqrt(S)
        if config.direct_coeff:
            coeff = leaf(rng.normal(0.0, c_std, (S, L)))
            proj[kind] = ProjectionParams(kind, atoms=atoms, coeff=coeff)
            continue
        E = config.embed_dim
        H = mlp_hidden_width(S)
        embeddings = leaf(rng.normal(0.0, 1.0, (L, E)))
        mlp = MlpParams(
            w1=leaf(rng.normal(0.0, 1.0 / math.sqrt(E), (E, H))),
            b1=leaf(np.zeros(H)),
            w2=leaf(rng.normal(0.0, 1.0 / math.sqrt(H), (H, H))),
            b2=leaf(np.zeros(H)),
            w3=leaf(rng.normal(0.0, 1.0 / math.sqrt(H), (H, S))),
            b3=leaf(np.zeros(S)),
        )
        baked = bake_coefficients(
            BlockEmbeddingTable(embeddings.value), mlp.as_coefficient_mlp()
        )
        spread = float(np.std(baked.values))
        if spread > 1e-12:
            mlp.w3.value *= c_std / spread
        proj[kind] = ProjectionParams(kind, atoms=atoms, embeddings=embeddings, mlp=mlp)

    out_proj = None if config.tie_embeddings else leaf(
        rng.normal(0.0, w_std, (d, config.vocab_size)), "out_proj"
    )
    return ModelParams(
        config=config,
        tok_emb=tok_emb,
        pos_emb=pos_emb,
        blocks=blocks,
        proj=proj,
        final_gain=leaf(np.ones(d)),
        final_bias=leaf(np.zeros(d)),
        out_proj=out_proj,
    )


# ------------------------------------------------------------------ forward

_MASK_CACHE: dict[int, np.ndarray] = {}


def causal_mask(t: int) -> np.ndarray:
    m = _MASK_CACHE.get(t)
    if m is None:
        m = np.triu(np.ones((t, t), dtype=bool), k=1)
        _MASK_CACHE[t] = m
    return m


def _mlp_coeff(tape, pp: ProjectionParams, layer: int) -> Tensor:
    e = ad.rows(tape, pp.embeddings, layer, layer + 1)
    h1 = ad.gelu(tape, ad.add(tape, ad.matmul(tape, e, pp.mlp.w1), pp.mlp.b1))
    h2 = ad.gelu(tape, ad.add(tape, ad.matmul(tape, h1, pp.mlp.w2), pp.mlp.b2))
    c = ad.add(tape, ad.matmul(tape, h2, pp.mlp.w3), pp.mlp.b3)
    return ad.flatten(tape, c)


def build_projection_weights(tape, params: ModelParams) -> dict:
    """Per-(kind, layer) weight tensors; shared kinds synthesize from atoms once per tape."""
    weights = {}
    for kind in PROJECTION_ORDER:
        pp = params.proj[kind]
        for l in range(params.config.num_layers):
            if pp.dense is not None:
                weights[(kind, l)] = pp.dense[l]
            elif pp.coeff is not None:
                weights[(kind, l)] = ad.dict_combine(
                    tape, pp.atoms, ad.column(tape, pp.coeff, l)
                )
            else:
                weights[(kind, l)] = ad.dict_combine(
                    tape, pp.atoms, _mlp_coeff(tape, pp, l)
                )
    return weights


def _attention(tape, x, wq, wk, wv, wo, heads: int, causal: bool, label: str):
    q = ad.matmul(tape, x, wq)
    k = ad.matmul(tape, x, wk)
    v = ad.matmul(tape, x, wv)
    hd = q.value.shape[1] // heads
    t = x.value.shape[0]
    mask = causal_mask(t) if causal else None
    inv = 1.0 / math.sqrt(hd)
    outs = []
    for i in range(heads):
        j0, j1 = i * hd, (i + 1) * hd
        qi = ad.cols(tape, q, j0, j1)
        ki = ad.cols(tape, k, j0, j1)
        vi = ad.cols(tape, v, j0, j1)
        logits = ad.scale(tape, ad.matmul(tape, qi, ad.transpose(tape, ki)), inv)
        if np.isnan(logits.value).any():
            raise NumericalError(f"attention logits contain NaN in {label}, head {i}")
        probs = ad.softmax_rows(tape, logits, mask)
        outs.append(ad.matmul(tape, probs, vi))
    merged = ad.hstack(tape, outs)
    return ad.matmul(tape, merged, wo), merged


def attention_forward(h, wq, wk, wv, wo, causal: bool = True, heads: int = 1) -> np.ndarray:
    """Standalone attention evaluation on plain arrays (throwaway tape)."""
    h = np.asarray(h, dtype=np.float64)
    wq = np.asarray(wq, dtype=np.float64)
    wk = np.asarray(wk, dtype=np.float64)
    wv = np.asarray(wv, dtype=np.float64)
    wo = np.asarray(wo, dtype=np.float64)
    if h.ndim != 2 or wq.shape[0] != h.shape[1] or wq.shape != wk.shape or wq.shape != wv.shape:
        raise ValidationError("attention input/projection shapes do not conform")
    if wq.shape[1] % heads != 0:
        raise ValidationError(f"projection width {wq.shape[1]} not divisible by {heads} heads")
    if wo.shape[0] != wv.shape[1]:
        raise ValidationError("output projection rows must match value width")
    tape = GradientTape()
    out, _ = _attention(
        tape, leaf(h), leaf(wq), leaf(wk), leaf(wv), leaf(wo), heads, causal, "standalone"
    )
    return out.value


def forward_tokens(tape, params: ModelParams, weights, ids, collect: bool = False):
    """Logits for a token id sequence; optionally capture per-block internals."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size < 1:
        raise ValidationError("token sequence must be a non-empty 1-D array")
    if ids.min() < 0 or ids.max() >= params.config.vocab_size:
        raise ValidationError(
            f"token id out of range [0, {params.config.vocab_size}) in sequence"
        )
    t = ids.size
    if t > params.config.max_seq:
        raise ValidationError(f"sequence length {t} exceeds max_seq {params.config.max_seq}")

    x = ad.add(
        tape,
        ad.embed(tape, params.tok_emb, ids),
        ad.embed(tape, params.pos_emb, np.arange(t)),
    )
    caps = {"attn_in": [], "o_in": [], "block_out": []} if collect else None
    heads = params.config.num_heads
    for l, bp in enumerate(params.blocks):
        a = ad.layernorm(tape, x, bp.ln1_gain, bp.ln1_bias, LN_EPS)
        attn_out, o_in = _attention(
            tape,
            a,
            weights[(ProjectionKind.QUERY, l)],
            weights[(ProjectionKind.KEY, l)],
            weights[(ProjectionKind.VALUE, l)],
            weights[(ProjectionKind.OUTPUT, l)],
            heads,
            True,
            f"block {l}",
        )
        x = ad.add(tape, x, attn_out)
        ff_in = ad.layernorm(tape, x, bp.ln2_gain, bp.ln2_bias, LN_EPS)
        h1 = ad.gelu(tape, ad.add(tape, ad.matmul(tape, ff_in, bp.ffn_w1), bp.ffn_b1))
        ffn = ad.add(tape, ad.matmul(tape, h1, bp.ffn_w2), bp.ffn_b2)
        x = ad.add(tape, x, ffn)
        if collect:
            caps["attn_in"].append(a.value)
            caps["o_in"].append(o_in.value)
            caps["block_out"].append(x.value)

    hfin = ad.layernorm(tape, x, params.final_gain, params.final_bias, LN_EPS)
    out_w = ad.transpose(tape, params.tok_emb) if params.out_proj is None else params.out_proj
    logits = ad.matmul(tape, hfin, out_w)
    return logits, caps


def sequence_loss(tape, params: ModelParams, weights, seq) -> Tensor:
    """Mean next-token NLL: feed seq[:-1], predict seq[1:]."""
    seq = np.asarray(seq, dtype=np.int64)
    if seq.size < 2:
        raise ValidationError("loss needs a sequence of length >= 2")
    if seq.min() < 0 or seq.max() >= params.config.vocab_size:
        raise ValidationError(
            f"token id out of range [0, {params.config.vocab_size}) in sequence"
        )
    logits, _ = forward_tokens(tape, params, weights, seq[:-1])
    return ad.cross_entropy_mean(tape, logits, seq[1:])


def forward_loss(params: ModelParams, seq) -> float:
    tape = GradientTape()
    weights = build_projection_weights(tape, params)
    return float(sequence_loss(tape, params, weights, seq).value)


def output_matrix(params: ModelParams) -> np.ndarray:
    """Effective d x vocab output projection (handles tying)."""
    if params.out_proj is None:
        return params.tok_emb.value.T
    return params.out_proj.value


def corpus_windows(corpus: bytes | np.ndarray, window: int, extra: int = 1) -> list[np.ndarray]:
    """Split a byte corpus into non-overlapping windows of window + extra tokens.

    extra=1 leaves room for the shifted target; a shorter tail window is
    kept when it still holds at least two tokens.
    """
    data = np.frombuffer(bytes(corpus), dtype=np.uint8) if isinstance(
        corpus, (bytes, bytearray)
    ) else np.asarray(corpus, dtype=np.int64)
    if window < 2:
        raise ValidationError("window must be >= 2")
    out = []
    step = window + extra
    for start in range(0, len(data), window):
        seq = np.asarray(data[start : start + step], dtype=np.int64)
        if seq.size >= 2:
            out.append(seq)
    return out


def perplexity(params: ModelParams, corpus, window: int = 128) -> float:
    """exp(mean next-token NLL) over the whole corpus, token-weighted."""
    seqs = corpus_windows(corpus, min(window, params.config.max_seq))
    if not seqs:
        raise ValidationError("corpus too short to evaluate")
    total_nll = 0.0
    total_tokens = 0
    for seq in seqs:
        n = seq.size - 1
        total_nll += forward_loss(params, seq) * n
        total_tokens += n
    return float(np.exp(total_nll / total_tokens))


def attention_param_count(params: ModelParams) -> int:
    """Inference-time attention parameter count (baked storage for shared kinds)."""
    total = 0
    L = params.config.num_layers
    for kind in PROJECTION_ORDER:
        pp = params.proj[kind]
        if pp.dense is not None:
            total += sum(w.value.size for w in pp.dense)
        else:
            total += pp.atoms.value.size + pp.atoms.value.shape[0] * L
    return total


def bake_params(params: ModelParams) -> ModelParams:
    """Replace every MLP coefficient path with its materialized matrix.

    The MLP and block embeddings are dropped; forwards with the baked
    matrix are bit-identical because baking reuses the same row-shaped
    arithmetic the tape executes.
    """
    new_proj = {}
    for kind, pp in params.proj.items():
        if pp.uses_mlp:
            baked = bake_coefficients(
                BlockEmbeddingTable(pp.embeddings.value), pp.mlp.as_coefficient_mlp()
            )
            new_proj[kind] = ProjectionParams(
                kind, atoms=pp.atoms, coeff=leaf(baked.values)
            )
        else:
            new_proj[kind] = pp
    return replace(params, proj=new_proj)


# -------------------------------------------------------- checkpoint glue


def params_to_tensors(params: ModelParams) -> tuple[dict[str, np.ndarray], dict]:
    """Serializable tensor map plus metadata.  MLP paths must be baked first."""
    cfg = params.config
    tensors: dict[str, np.ndarray] = {}
    for name, t in params.named_parameters():
        if ".mlp." in name or name.endswith(".block_emb"):
            raise ValidationError("bake coefficient MLPs before serializing")
        tensors[name] = t.value
    for kind in PROJECTION_ORDER:
        pp = params.proj[kind]
        if pp.is_shared:
            # atoms serialize as one tensor per atom under the dictionary contract
            del tensors[f"attn.{kind.tag}.atoms"]
            for s in range(pp.atoms.value.shape[0]):
                tensors[ckpt.dict_atom_name(kind.tag, s)] = pp.atoms.value[s]
    meta = {
        "L": cfg.num_layers,
        "d": cfg.model_dim,
        "heads": cfg.num_heads,
        "mode": cfg.mode.value,
        "S": cfg.num_atoms if cfg.mode is not SharingMode.DENSE else None,
        "groups": None,
        "format_version": ckpt.FORMAT_VERSION,
        "vocab_size": cfg.vocab_size,
        "ffn_mult": cfg.ffn_mult,
        "max_seq": cfg.max_seq,
        "tie_embeddings": cfg.tie_embeddings,
    }
    return tensors, meta


def config_from_meta(meta: dict) -> ToyConfig:
    mode = SharingMode(meta["mode"])
    return ToyConfig(
        num_layers=meta["L"],
        model_dim=meta["d"],
        num_heads=meta["heads"],
        vocab_size=meta.get("vocab_size", 256),
        ffn_mult=meta.get("ffn_mult", 4),
        max_seq=meta.get("max_seq", 256),
        mode=mode,
        num_atoms=meta["S"] or 0,
        tie_embeddings=meta.get("tie_embeddings", False),
        direct_coeff=mode is not SharingMode.DENSE,
    )


def tensors_to_params(tensors: dict[str, np.ndarray], meta: dict) -> ModelParams:
    """Rebuild a (baked) model from checkpoint tensors."""
    cfg = config_from_meta(meta)
    if meta.get("groups"):
        raise ValidationError("grouped checkpoints must be materialized by the compressor")

    def take(name):
        if name not in tensors:
            raise ValidationError(f"checkpoint missing tensor {name!r}")
        return leaf(np.asarray(tensors[name], dtype=np.float64))

    blocks = []
    for l in range(cfg.num_layers):
        blocks.append(
            BlockParams(
                ln1_gain=take(f"block{l}.ln1.gain"),
                ln1_bias=take(f"block{l}.ln1.bias"),
                ln2_gain=take(f"block{l}.ln2.gain"),
                ln2_bias=take(f"block{l}.ln2.bias"),
                ffn_w1=take(f"block{l}.ffn.w1"),
                ffn_b1=take(f"block{l}.ffn.b1"),
                ffn_w2=take(f"block{l}.ffn.w2"),
                ffn_b2=take(f"block{l}.ffn.b2"),
            )
        )
    shared = set(shared_kinds(cfg.mode))
    proj = {}
    for kind in PROJECTION_ORDER:
        if kind in shared:
            atoms = np.stack(
                [take(ckpt.dict_atom_name(kind.tag, s)).value for s in range(cfg.num_atoms)]
            )
            proj[kind] = ProjectionParams(
                kind, atoms=leaf(atoms), coeff=take(ckpt.coeff_name(kind.tag))
            )
        else:
            dense = [take(ckpt.dense_weight_name(kind.tag, l)) for l in range(cfg.num_layers)]
            proj[kind] = ProjectionParams(kind, dense=dense)
    return ModelParams(
        config=cfg,
        tok_emb=take("tok_emb"),
        pos_emb=take("pos_emb"),
        blocks=blocks,
        proj=proj,
        final_gain=take("ln_f.gain"),
        final_bias=take("ln_f.bias"),
        out_proj=None if cfg.tie_embeddings else take("out_proj"),
    )


def shared_projection_set(params: ModelParams):
    """Inference-level view of the attention storage (baked models only)."""
    from .masa import SharedProjection, SharedProjectionSet

    entries = {}
    for kind in PROJECTION_ORDER:
        pp = params.proj[kind]
        if pp.is_shared:
            if pp.coeff is None:
                raise ValidationError("bake the MLP path before building a projection set")
            entries[kind] = SharedProjection(
                dictionary=AtomDictionary(list(pp.atoms.value), projection=kind),
                coefficients=CoefficientMatrix(pp.coeff.value),
            )
        else:
            entries[kind] = SharedProjection(dense=[w.value for w in pp.dense])
    return SharedProjectionSet(params.config.mode, entries)
