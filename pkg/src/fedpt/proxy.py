"""Proxy-tuned large model built by logit arithmetic.

At every position the combined logits are::

    g_large + alpha * (g_tuned - g_pre)

where ``g_tuned`` comes from the small base plus the aggregated adapter and
``g_pre`` from the small base alone.  Softmax is applied only after combining,
so this is the same distribution as multiplying the large model's probabilities
by the tuned/untuned probability ratio raised to ``alpha`` and renormalizing.
No weights of the large model are touched; only its output logits are used.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .adapter import AdaptedModel
from .errors import ConfigurationError, InputError
from .model import KVSession, ModelParams, forward_logits, softmax, target_logits


@dataclass(frozen=True)
class ProxyEnsemble:
    large_base: ModelParams
    small_base: ModelParams
    small_tuned: AdaptedModel
    alpha: float

    def __post_init__(self) -> None:
        vocabs = {self.large_base.config.vocab, self.small_base.config.vocab,
                  self.small_tuned.config.vocab}
        if len(vocabs) != 1:
            raise ConfigurationError("proxy models must share one vocabulary")
        if not (math.isfinite(self.alpha) and self.alpha >= 0):
            raise ConfigurationError(f"alpha must be finite and >= 0, got {self.alpha}")

    @property
    def vocab(self):
        return self.large_base.config.vocab

    @property
    def context_len(self) -> int:
        return min(self.large_base.config.context_len, self.small_base.config.context_len)

    def combine(self, g_large, g_tuned, g_pre):
        return g_large + self.alpha * (g_tuned - g_pre)

    def next_logits(self, tokens: Sequence[int]) -> np.ndarray:
        return proxy_logits(self, tokens)[-1]

    def stream(self, prompt: Sequence[int]) -> _ProxyStream:
        return _ProxyStream(self, prompt)

    def with_alpha(self, alpha: float) -> ProxyEnsemble:
        return ProxyEnsemble(self.large_base, self.small_base, self.small_tuned, alpha)


class _ProxyStream:
    def __init__(self, e: ProxyEnsemble, prompt):
        self.e = e
        self.parts = (KVSession(e.large_base, prompt),
                      KVSession(e.small_tuned.base, prompt, e.small_tuned.adapter.factors),
                      KVSession(e.small_base, prompt))
        self.logits = e.combine(*(s.logits for s in self.parts))

    def append(self, token: int) -> np.ndarray:
        self.logits = self.e.combine(*(s.append(token) for s in self.parts))
        return self.logits


def proxy_logits(e: ProxyEnsemble, tokens: Sequence[int]) -> np.ndarray:
    """Combined logits at every position of ``tokens``."""
    if len(tokens) > e.context_len:
        raise InputError(f"sequence exceeds proxy context {e.context_len}")
    return e.combine(forward_logits(e.large_base, tokens),
                     forward_logits(e.small_tuned.base, tokens, e.small_tuned.adapter.factors),
                     forward_logits(e.small_base, tokens))


def proxy_next_distribution(e: ProxyEnsemble, tokens: Sequence[int]) -> np.ndarray:
    """Next-token distribution of the proxy-tuned model after ``tokens``."""
    return softmax(proxy_logits(e, tokens)[-1])


class ProxyTeacher:
    """Teacher-forced proxy logits over a fixed public dataset.

    The large-base and small-base terms never change across rounds, so they are
    computed once; :meth:`logits` only re-runs the tuned small model.  Results
    are per example, rows being that example's scored target positions.
    """

    def __init__(self, large_base: ModelParams, small_base: ModelParams,
                 examples: Sequence[tuple], chunk: int = 32):
        self.examples = list(examples)
        self.chunk = chunk
        self.large_base, self.small_base = large_base, small_base
        self.g_large = self._per_example(large_base, None)
        self.g_pre = self._per_example(small_base, None)

    def _per_example(self, params, lora) -> list[np.ndarray]:
        out = []
        for s in range(0, len(self.examples), self.chunk):
            part = self.examples[s:s + self.chunk]
            flat = target_logits(params, part, lora)
            sizes = np.cumsum([len(t) for _, t in part])[:-1]
            out.extend(np.split(flat, sizes))
        return out

    def logits(self, e: ProxyEnsemble) -> list[np.ndarray]:
        if e.large_base is not self.large_base or e.small_base is not self.small_base:
            raise ConfigurationError("ensemble bases differ from the cached teacher bases")
        g_tuned = self._per_example(e.small_tuned.base, e.small_tuned.adapter.factors)
        return [e.combine(a, b, c) for a, b, c in zip(self.g_large, g_tuned, self.g_pre)]
