"""Rouge-L, Dist-n and generation-based evaluation reports."""

from __future__ import annotations

import re
from collections import defaultdict
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Example, detokenize, encode_example, strip_specials
from .decode import as_source, greedy_decode, sample_decode
from .errors import InputError
from .rng import substream

_NON_WORD = re.compile(r"[^0-9a-z]+")


def words(text: str) -> list[str]:
    """Lowercased word tokens with punctuation treated as whitespace."""
    return _NON_WORD.sub(" ", text.lower()).split()


def lcs_length(a: Sequence, b: Sequence) -> int:
    """Length of the longest common subsequence (bit-parallel, one big-int per row)."""
    if not a or not b:
        return 0
    if len(a) < len(b):
        a, b = b, a
    masks: dict = defaultdict(int)
    for i, sym in enumerate(a):
        masks[sym] |= 1 << i
    full = (1 << len(a)) - 1
    v = full
    for sym in b:
        u = v & masks.get(sym, 0)
        v = ((v + u) | (v - u)) & full
    return len(a) - bin(v).count("1")


def rouge_l(candidate: str, reference: str) -> float:
    """LCS-based F1 between word sequences; 0 when either side is empty or nothing matches."""
    c, r = words(candidate), words(reference)
    lcs = lcs_length(c, r)
    if lcs == 0:
        return 0.0
    p, rec = lcs / len(c), lcs / len(r)
    return 2 * p * rec / (p + rec)


def ngrams(tokens: Sequence[str], n: int) -> list[tuple[str, ...]]:
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def dist_n(texts: Iterable[str], n: int) -> float | None:
    """Distinct n-grams over total n-grams across ``texts``; None when there are none."""
    if n < 1:
        raise InputError(f"n must be >= 1, got {n}")
    total, distinct = 0, set()
    for t in texts:
        grams = ngrams(t.split(), n)
        total += len(grams)
        distinct.update(grams)
    return len(distinct) / total if total else None


@dataclass
class EvalReport:
    rouge_l: float  # mean over seeds of per-seed mean, in [0, 1]
    rouge_l_std: float
    per_seed: list[float]
    dist: dict[int, float | None]
    per_category: dict[str, float]
    n_examples: int
    failures: int
    settings: dict
    generations: list[str] = field(default_factory=list)
    per_example: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rouge_l_x100"] = round(100 * self.rouge_l, 4)
        d["dist"] = {str(k): v for k, v in self.dist.items()}
        return d


def generate(source, e: Example, max_len: int = 64, rng: np.random.Generator | None = None,
             temperature: float = 1.0, top_p: float = 1.0) -> str:
    """Decode a response for ``e`` (greedy unless ``rng`` is given)."""
    src = as_source(source)
    prompt, _ = encode_example(e, src.vocab)
    if rng is None:
        out = greedy_decode(src, prompt, max_len)
    else:
        out = sample_decode(src, prompt, max_len, rng, temperature, top_p)
    return detokenize(strip_specials(out, src.vocab))


def evaluate(source, examples: Sequence[Example], seeds: Sequence[int] = (0,),
             max_len: int = 64, sample: bool = False, temperature: float = 1.0,
             top_p: float = 1.0) -> EvalReport:
    """Decode every example once per seed and score it against its reference.

    Greedy decoding ignores the seed, so it runs once and the scores are reused
    for every seed; sampled decoding draws from ``substream(seed, "decode", i)``.
    """
    if not examples:
        raise InputError("evaluation split is empty")
    if not seeds:
        raise InputError("need at least one seed")
    src = as_source(source)
    per_seed, gens_by_seed, scores_by_seed = [], [], []
    failures = 0
    cache = None
    for seed in seeds:
        if not sample and cache is not None:
            gens, scores = cache
        else:
            gens, scores = [], []
            failures = 0
            for i, e in enumerate(examples):
                try:
                    rng = substream(seed, "decode", i) if sample else None
                    g = generate(src, e, max_len, rng, temperature, top_p)
                except InputError:
                    failures += 1
                    gens.append(None)
                    scores.append(None)
                    continue
                gens.append(g)
                scores.append(rouge_l(g, e.response))
            cache = (gens, scores)
        valid = [s for s in scores if s is not None]
        per_seed.append(float(np.mean(valid)) if valid else 0.0)
        gens_by_seed.append(gens)
        scores_by_seed.append(scores)
    by_cat: dict[str, list[float]] = defaultdict(list)
    for scores in scores_by_seed:
        for e, s in zip(examples, scores):
            if s is not None:
                by_cat[e.category].append(s)
    all_gens = [g for gens in gens_by_seed for g in gens if g is not None]
    return EvalReport(
        rouge_l=float(np.mean(per_seed)), rouge_l_std=float(np.std(per_seed)),
        per_seed=per_seed, dist={n: dist_n(all_gens, n) for n in (3, 4)},
        per_category={c: float(np.mean(v)) for c, v in sorted(by_cat.items())},
        n_examples=len(examples), failures=failures,
        settings={"seeds": list(seeds), "max_len": max_len, "sample": sample,
                  "temperature": temperature, "top_p": top_p},
        generations=[g if g is not None else "" for g in gens_by_seed[0]],
        per_example=[s if s is not None else float("nan") for s in scores_by_seed[0]])


def report_rows(report: EvalReport, **keys) -> list[dict]:
    """Flat rows (one per metric) tagged with ``keys`` such as round, dataset, variant."""
    rows = [dict(keys, metric="rouge_l", value=report.rouge_l),
            dict(keys, metric="rouge_l_std", value=report.rouge_l_std)]
    rows += [dict(keys, metric=f"dist_{n}", value=v) for n, v in report.dist.items()]
    rows += [dict(keys, metric=f"rouge_l/{c}", value=v) for c, v in report.per_category.items()]
    return rows
