"""Deterministic single-core training loop for the toy transformer.

AdamW with decoupled weight decay on matrix-shaped tensors only, linear
warmup over the first 10% of steps, cosine decay to zero afterwards,
global gradient-norm clipping at 1.0.  One tape per step: projection
weights are synthesized once, every sequence in the batch reuses them,
and the batch loss is their mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import GradientTape
from .errors import NumericalError, ValidationError
from .model import (
    ModelParams,
    ToyConfig,
    build_projection_weights,
    init_params,
    sequence_loss,
)


@dataclass
class OptimizerSettings:
    lr: float = 1e-3
    batch_size: int = 8
    window: int = 128
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    warmup_frac: float = 0.1
    log_every: int = 10


def lr_at(step: int, total_steps: int, settings: OptimizerSettings) -> float:
    warmup = max(1, int(round(settings.warmup_frac * total_steps)))
    if step < warmup:
        return settings.lr * (step + 1) / warmup
    span = max(1, total_steps - warmup)
    progress = (step - warmup) / span
    return settings.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    def __init__(self, named_params, settings: OptimizerSettings):
        self.params = named_params
        self.s = settings
        self.t = 0
        self.m = {name: np.zeros_like(p.value) for name, p in named_params}
        self.v = {name: np.zeros_like(p.value) for name, p in named_params}

    def step(self, lr: float) -> None:
        s = self.s
        self.t += 1
        bc1 = 1.0 - s.beta1 ** self.t
        bc2 = 1.0 - s.beta2 ** self.t
        for name, p in self.params:
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * g * g
            if p.value.ndim >= 2 and s.weight_decay:
                p.value -= lr * s.weight_decay * p.value
            p.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + s.eps)


def _zero_grads(named_params) -> None:
    for _, p in named_params:
        p.grad = np.zeros_like(p.value)


def _clip_grads(named_params, clip: float) -> float:
    total = 0.0
    for _, p in named_params:
        total += float(np.sum(p.grad * p.grad))
    norm = math.sqrt(total)
    if clip and norm > clip:
        factor = clip / norm
        for _, p in named_params:
            p.grad *= factor
    return norm


def train(
    config: ToyConfig,
    corpus: bytes,
    steps: int,
    settings: OptimizerSettings | None = None,
):
    """Train from scratch; returns (params, metrics) with metrics rows (step, loss, lr)."""
    settings = settings or OptimizerSettings()
    data = np.frombuffer(bytes(corpus), dtype=np.uint8).astype(np.int64)
    span = settings.window + 1
    if data.size < span:
        raise ValidationError(
            f"corpus has {data.size} bytes, need at least {span} for one window"
        )
    params = init_params(config)
    named = params.named_parameters()
    opt = AdamW(named, settings)
    batch_rng = np.random.default_rng(config.seed + 1)
    metrics: list[tuple[int, float, float]] = []

    for step in range(steps):
        lr = lr_at(step, steps, settings)
        starts = batch_rng.integers(0, data.size - span + 1, size=settings.batch_size)
        tape = GradientTape()
        weights = build_projection_weights(tape, params)
        _zero_grads(named)
        try:
            losses = [
                sequence_loss(tape, params, weights, data[s : s + span]) for s in starts
            ]
        except NumericalError as e:
            raise NumericalError(f"training diverged at step {step}: {e}") from e
        loss = ad.mean_stack(tape, losses)
        loss_value = float(loss.value)
        if not math.isfinite(loss_value):
            raise NumericalError(f"training diverged (non-finite loss) at step {step}")
        ad.backward(tape, loss)
        _clip_grads(named, settings.clip_norm)
        opt.step(lr)
        if step % settings.log_every == 0 or step == steps - 1:
            metrics.append((step, loss_value, lr))
    return params, metrics


# ------------------------------------------------------------- grad check

GRAD_CHECK_CONFIG = dict(num_layers=3, model_dim=16, num_heads=2, num_atoms=2)


def gradient_check(
    config: ToyConfig | None = None,
    samples: int = 200,
    eps: float = 1e-4,
    seed: int = 0,
    seq_len: int = 12,
):
    """Compare tape gradients against central finite differences.

    Coordinates are sampled round-robin across every trainable tensor so
    atoms, coefficients or MLP weights, block embeddings, FFN weights,
    norms and token/position embeddings all get probed.  Returns
    (max_relative_deviation, per_tensor list).
    """
    if config is None:
        config = ToyConfig(mode="qkvo", seed=seed, **GRAD_CHECK_CONFIG)
    params = init_params(config)
    named = params.named_parameters()
    rng = np.random.default_rng(seed + 7919)
    seq = rng.integers(0, config.vocab_size, size=seq_len)

    def loss_value() -> float:
        tape = GradientTape()
        weights = build_projection_weights(tape, params)
        return float(sequence_loss(tape, params, weights, seq).value)

    tape = GradientTape()
    weights = build_projection_weights(tape, params)
    _zero_grads(named)
    loss = sequence_loss(tape, params, weights, seq)
    ad.backward(tape, loss)
    analytic = {name: p.grad.copy() for name, p in named}

    coords = []
    i = 0
    while len(coords) < samples:
        name, p = named[i % len(named)]
        idx = int(rng.integers(0, p.value.size))
        coords.append((name, p, idx))
        i += 1

    worst = 0.0
    per_tensor: dict[str, float] = {}
    for name, p, idx in coords:
        orig = p.value.flat[idx]
        p.value.flat[idx] = orig + eps
        up = loss_value()
        p.value.flat[idx] = orig - eps
        down = loss_value()
        p.value.flat[idx] = orig
        numeric = (up - down) / (2.0 * eps)
        a = analytic[name].flat[idx]
        dev = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
        worst = max(worst, dev)
        per_tensor[name] = max(per_tensor.get(name, 0.0), dev)
    return worst, sorted(per_tensor.items())
