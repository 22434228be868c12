"""Shared test helpers: deterministic corpora and tiny model builders."""

import numpy as np

from masakit.autodiff import leaf
from masakit.model import ModelParams, ProjectionParams, ToyConfig, init_params
from masakit.masa import PROJECTION_ORDER, SharingMode

WORDS = (
    "the of and to in a is that for it as was with be by on not he i this "
    "are or his from at which but have an had they you were their one all "
    "we can her has there been if more when will would who so no"
).split()


def synthetic_corpus(n_bytes: int, seed: int) -> bytes:
    """Zipf-weighted word soup with sentence breaks; low entropy, fixed seed."""
    rng = np.random.default_rng(seed)
    ranks = np.arange(1, len(WORDS) + 1, dtype=np.float64)
    probs = 1.0 / ranks
    probs /= probs.sum()
    parts, total, since_dot = [], 0, 0
    while total < n_bytes:
        w = WORDS[rng.choice(len(WORDS), p=probs)]
        since_dot += 1
        if since_dot >= int(rng.integers(6, 14)):
            w = w + "."
            since_dot = 0
        parts.append(w)
        total += len(w) + 1
    return (" ".join(parts)).encode("ascii")[:n_bytes]


def tiny_dense_params(seed: int = 0, layers: int = 2, dim: int = 16, heads: int = 2) -> ModelParams:
    return init_params(ToyConfig(num_layers=layers, model_dim=dim, num_heads=heads, seed=seed))


def masa_identity_of(dense: ModelParams) -> ModelParams:
    """Wrap a dense model as shared storage with S = L atoms and one-hot coefficients."""
    cfg = dense.config
    L = cfg.num_layers
    proj = {}
    for kind in PROJECTION_ORDER:
        stack = np.stack([w.value for w in dense.proj[kind].dense])
        proj[kind] = ProjectionParams(kind, atoms=leaf(stack), coeff=leaf(np.eye(L)))
    cfg2 = ToyConfig(
        num_layers=L,
        model_dim=cfg.model_dim,
        num_heads=cfg.num_heads,
        vocab_size=cfg.vocab_size,
        max_seq=cfg.max_seq,
        mode=SharingMode.QKVO,
        num_atoms=L,
        direct_coeff=True,
        seed=cfg.seed,
    )
    return ModelParams(
        config=cfg2,
        tok_emb=dense.tok_emb,
        pos_emb=dense.pos_emb,
        blocks=dense.blocks,
        proj=proj,
        final_gain=dense.final_gain,
        final_bias=dense.final_bias,
        out_proj=dense.out_proj,
    )
