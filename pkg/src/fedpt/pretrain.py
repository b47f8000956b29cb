"""From-scratch training of the small and large base models on general text."""

from __future__ import annotations

import logging
from collections.abc import Sequence

import numpy as np

from .data import encode_document
from .errors import InputError
from .model import ModelConfig, ModelParams, backward, batch_loss, cosine_lr, init_params
from .optim import Adam

log = logging.getLogger(__name__)


def pretrain(config: ModelConfig, docs: Sequence[tuple[str, str]], token_budget: int, seed: int,
             batch_size: int = 16, lr: float = 3e-3, weight_decay: float = 0.0,
             warmup: float = 0.1, clip: float = 1.0) -> ModelParams:
    """Adam on (context, text) documents until about ``token_budget`` tokens are consumed.

    The step size warms up linearly over the first ``warmup`` fraction of steps
    and then follows a cosine decay; gradients are clipped to global norm ``clip``.
    """
    if token_budget <= 0:
        raise InputError("pretraining token budget must be positive")
    if not docs:
        raise InputError("pretraining corpus is empty")
    pairs = _fitting(config, docs)
    if not pairs:
        raise InputError("no pretraining document fits the context window")
    batch_size = min(batch_size, len(pairs))
    per_example = np.mean([len(p) + len(t) for p, t in pairs])
    steps = max(1, int(round(token_budget / (per_example * batch_size))))
    params = init_params(config, seed)
    rng = np.random.default_rng(seed + 1)
    opt = Adam(weight_decay=weight_decay)
    arrays = params.arrays
    lengths = np.array([len(p) + len(t) for p, t in pairs])
    batches: list[np.ndarray] = []
    for step in range(steps):
        if not batches:
            batches = _bucketed_batches(rng, lengths, batch_size)
        batch = [pairs[i] for i in batches.pop()]
        loss, grads = backward(ModelParams(config, arrays), batch)
        norm = float(np.sqrt(sum(np.vdot(g, g) for g in grads.values())))
        if clip and norm > clip:
            grads = {k: g * (clip / norm) for k, g in grads.items()}
        arrays = opt.step(arrays, grads, _schedule(step, steps, lr, warmup))
        if step % 100 == 0:
            log.info("pretrain %s step %d/%d loss %.4f", config.width, step, steps, loss)
    return ModelParams(config, arrays)


def _fitting(config: ModelConfig, docs: Sequence[tuple[str, str]]) -> list:
    pairs = [encode_document(c, t, config.vocab) for c, t in docs]
    kept = [(p, t) for p, t in pairs if len(p) + len(t) <= config.context_len]
    if len(kept) < len(pairs):
        log.info("dropped %d documents longer than the context", len(pairs) - len(kept))
    return kept


def _bucketed_batches(rng: np.random.Generator, lengths: np.ndarray, batch_size: int,
                      window: int = 32) -> list[np.ndarray]:
    """One epoch of mini-batches of similar length, in random order.

    Sorting within windows of ``window`` batches keeps padding low and lets
    batches of template documents share their common prompt prefix.
    """
    perm = rng.permutation(lengths.size)
    out = []
    span = window * batch_size
    for s in range(0, perm.size, span):
        chunk = perm[s:s + span]
        chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        out += [np.sort(chunk[i:i + batch_size]) for i in range(0, chunk.size, batch_size)
                if chunk[i:i + batch_size].size == batch_size]
    return [out[i] for i in rng.permutation(len(out))]


def _schedule(step: int, steps: int, lr: float, warmup: float) -> float:
    n = int(warmup * steps)
    if step < n:
        return lr * (step + 1) / n
    return cosine_lr(step - n, steps - n, lr)


def held_out_loss(params: ModelParams, docs: Sequence[tuple[str, str]],
                  batch_size: int = 64) -> float:
    """Mean over documents of the per-token NLL of their scored text."""
    pairs = _fitting(params.config, docs)
    if not pairs:
        raise InputError("no held-out document fits the context window")
    total = 0.0
    for s in range(0, len(pairs), batch_size):
        chunk = pairs[s:s + batch_size]
        total += batch_loss(params, chunk) * len(chunk)
    return total / len(pairs)
