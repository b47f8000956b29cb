"""Greedy and sampled decoding over any next-token logit source.

A logit source needs ``vocab`` and ``context_len`` attributes plus
``next_logits(tokens)``.  Sources that also offer ``stream(prompt)`` (an object
with ``logits`` and ``append(token)``) decode incrementally with cached keys and
values; plain models, adapted models and proxy ensembles all do.
"""

from __future__ import annotations

from collections.abc import Sequence
from typing import Protocol

import numpy as np

from .adapter import AdaptedModel
from .errors import InputError
from .model import KVSession, ModelParams, Vocab, forward_logits, softmax


class LogitSource(Protocol):
    vocab: Vocab
    context_len: int

    def next_logits(self, tokens: Sequence[int]) -> np.ndarray: ...


class ModelSource:
    """Wraps base weights (optionally adapted) as a logit source."""

    def __init__(self, params: ModelParams, adapter=None):
        self.params = params
        self.lora = None if adapter is None else adapter.factors
        self.vocab = params.config.vocab
        self.context_len = params.config.context_len

    def next_logits(self, tokens):
        return forward_logits(self.params, tokens, self.lora)[-1]

    def stream(self, prompt):
        return KVSession(self.params, prompt, self.lora)


def as_source(obj) -> LogitSource:
    if isinstance(obj, ModelParams):
        return ModelSource(obj)
    if isinstance(obj, AdaptedModel):
        return ModelSource(obj.base, obj.adapter)
    return obj


class _Recompute:
    """Stream fallback that re-runs the whole prefix every step."""

    def __init__(self, source, prompt):
        self.source, self.tokens = source, list(prompt)
        self.logits = source.next_logits(self.tokens)

    def append(self, token):
        self.tokens.append(int(token))
        self.logits = self.source.next_logits(self.tokens)
        return self.logits


def _open(source, prompt):
    if hasattr(source, "stream"):
        return source.stream(prompt)
    return _Recompute(source, prompt)


def _decode(source, prompt, max_len, pick) -> list[int]:
    source = as_source(source)
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise InputError("prompt must hold at least one token")
    if len(prompt) > source.context_len:
        raise InputError(f"prompt of {len(prompt)} tokens exceeds context {source.context_len}")
    if max_len < 1:
        raise InputError("max_len must be >= 1")
    eos = source.vocab.eos
    st = _open(source, prompt)
    out: list[int] = []
    budget = min(max_len, source.context_len - len(prompt) + 1)
    while len(out) < budget:
        tok = pick(st.logits)
        if tok == eos:
            break
        out.append(tok)
        if len(out) == budget:
            break
        st.append(tok)
    return out


def greedy_decode(source, prompt: Sequence[int], max_len: int) -> list[int]:
    """Append the argmax token until end-of-sequence or ``max_len`` new tokens."""
    return _decode(source, prompt, max_len, lambda z: int(np.argmax(z)))


def sample_decode(source, prompt: Sequence[int], max_len: int, rng: np.random.Generator,
                  temperature: float = 1.0, top_p: float = 1.0) -> list[int]:
    """Ancestral sampling with optional nucleus truncation."""
    if temperature <= 0 or not 0 < top_p <= 1:
        raise InputError("temperature must be > 0 and top_p in (0, 1]")

    def pick(z):
        p = softmax(np.asarray(z) / temperature)
        if top_p < 1.0:
            order = np.argsort(-p, kind="stable")
            keep = np.cumsum(p[order]) - p[order] < top_p
            mask = np.zeros_like(p, dtype=bool)
            mask[order[keep]] = True
            p = np.where(mask, p, 0.0)
            p /= p.sum()
        return int(rng.choice(p.size, p=p))

    return _decode(source, prompt, max_len, pick)
