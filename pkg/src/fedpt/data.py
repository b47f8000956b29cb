"""Byte tokenizer, prompt wrapper, synthetic instruction corpus and device partitions."""

from __future__ import annotations

import json
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import Bounds, LinearConstraint, milp

from .errors import FormatError, InputError
from .model import BYTE_VOCAB, Vocab

SPLITS = ("train", "val", "test", "public")

# ---------------------------------------------------------------------------
# Tokenizer
# ---------------------------------------------------------------------------


def tokenize(text: str | bytes) -> list[int]:
    """One id per byte (UTF-8; lone surrogates from :func:`detokenize` map back to their byte)."""
    raw = text if isinstance(text, (bytes, bytearray)) else text.encode("utf-8", "surrogateescape")
    return list(raw)


def detokenize_bytes(ids: Iterable[int]) -> bytes:
    ids = list(ids)
    bad = [i for i in ids if not 0 <= int(i) < 256]
    if bad:
        raise InputError(f"ids {bad[:5]} are not byte tokens")
    return bytes(int(i) for i in ids)


def detokenize(ids: Iterable[int]) -> str:
    return detokenize_bytes(ids).decode("utf-8", "surrogateescape")


def strip_specials(ids: Iterable[int], vocab: Vocab = BYTE_VOCAB) -> list[int]:
    """Cut at the first end token and drop any other non-byte ids."""
    out = []
    for i in ids:
        if i == vocab.eos:
            break
        if 0 <= i < 256:
            out.append(int(i))
    return out


# ---------------------------------------------------------------------------
# Records and prompt wrapper
# ---------------------------------------------------------------------------

PREAMBLE = ("Below is an instruction that describes a task.\n"
            "Write a response that appropriately completes the request.\n\n")


@dataclass(frozen=True)
class Example:
    instruction: str
    input: str
    response: str
    category: str
    split: str = "train"

    def __post_init__(self) -> None:
        if not self.instruction or not self.response:
            raise InputError("instruction and response must be non-empty")


def format_prompt(instruction: str, input_text: str = "") -> str:
    """Instruction-following wrapper; the ``[Input]`` block is omitted when input is empty."""
    text = PREAMBLE + "[Instruction]\n" + instruction + "\n\n"
    if input_text:
        text += "[Input]\n" + input_text + "\n\n"
    return text + "[Response]\n"


def wrap_prompt(e: Example) -> str:
    return format_prompt(e.instruction, e.input)


def encode_example(e: Example, vocab: Vocab = BYTE_VOCAB) -> tuple[list[int], list[int]]:
    """(prompt ids, target ids): ``[bos] + wrapped prompt`` and ``response + [eos]``."""
    return [vocab.bos] + tokenize(wrap_prompt(e)), tokenize(e.response) + [vocab.eos]


def encode_text(text: str, vocab: Vocab = BYTE_VOCAB) -> tuple[list[int], list[int]]:
    """Plain running text as a (prompt, target) pair scored on every byte."""
    return [vocab.bos], tokenize(text) + [vocab.eos]


def fits(e: Example, context_len: int) -> bool:
    p, t = encode_example(e)
    return len(p) + len(t) <= context_len


# ---------------------------------------------------------------------------
# Synthetic tasks
# ---------------------------------------------------------------------------

# A small fictional world: every entity has one value per attribute.  The
# tasks ask for an attribute of one to three entities, so answering needs
# knowledge of the world (learned in pretraining) plus the terse answer format
# (learned in fine-tuning).

ENTITIES_MAIN = (
    "ant bee cat cow dog eel elk fox gnu hen jay owl pig ram rat yak "
    "ape bat cod emu "
    "cup jar pan pot box bag hat map pen key "
    "oak elm fig ivy ash bus car van cab kit"
).split()
ENTITIES_PUBLIC = "arc bay den dot ear gem hut inn jet lid mop nut orb pea rug tub urn web zip toy".split()

ATTRIBUTES = {
    "color": "red blue green pink gray gold black white".split(),
    "home": "farm sea cave nest hill field pond barn".split(),
    "food": "corn fish meat seed leaf fruit grass bugs".split(),
    "sound": "buzz moo bark hiss purr roar honk chirp".split(),
    "size": "tiny small big huge".split(),
    "mood": "calm shy bold glad sad wild".split(),
    "speed": "slow quick fast".split(),
    "shape": "round flat long square".split(),
}
CATEGORIES = tuple(ATTRIBUTES)
INSTRUCTIONS = {c: f"Name the {c} of each item." for c in CATEGORIES}
WORLD_SEED = 20240917


def _build_world() -> dict[str, dict[str, str]]:
    rng = np.random.default_rng(WORLD_SEED)
    entities = ENTITIES_MAIN + ENTITIES_PUBLIC
    world: dict[str, dict[str, str]] = {}
    for attr, values in ATTRIBUTES.items():
        # balanced: each value used equally often (up to one) over the entities
        cycle = [values[i % len(values)] for i in range(len(entities))]
        world[attr] = dict(zip(entities, (cycle[i] for i in rng.permutation(len(entities)))))
    return world


WORLD = _build_world()


def run_task(category: str, inp: str) -> str:
    """Ground-truth response: the ``category`` value of each input entity, in order."""
    if category not in WORLD:
        raise InputError(f"unknown category {category!r}")
    try:
        return " ".join(WORLD[category][w] for w in inp.split())
    except KeyError as exc:
        raise InputError(f"unknown entity {exc.args[0]!r}") from None


def fact(category: str, entity: str) -> str:
    return f"the {category} of {entity} is {WORLD[category][entity]}"


def verbose_answer(category: str, inp: str) -> str:
    """The same answer restated in full sentences, as a chatty assistant would."""
    parts = [fact(category, w) for w in inp.split()]
    text = ", and ".join(parts)
    return text[0].upper() + text[1:]


def _draw_input(rng: np.random.Generator, pool: Sequence[str]) -> str:
    n = int(rng.integers(1, 4))
    return " ".join(pool[i] for i in rng.choice(len(pool), size=n, replace=False))


@dataclass
class Corpus:
    """Ordered examples with split tags; index sets per split are disjoint by construction."""

    examples: list[Example]
    categories: tuple[str, ...] = CATEGORIES
    _encoded: dict = field(default_factory=dict, repr=False, compare=False)

    def indices(self, split: str) -> np.ndarray:
        return np.array([i for i, e in enumerate(self.examples) if e.split == split], dtype=np.int64)

    def split(self, split: str) -> list[Example]:
        return [e for e in self.examples if e.split == split]

    def labels(self) -> np.ndarray:
        lookup = {c: j for j, c in enumerate(self.categories)}
        return np.array([lookup[e.category] for e in self.examples], dtype=np.int64)

    def encoded(self, i: int, vocab: Vocab = BYTE_VOCAB) -> tuple[list[int], list[int]]:
        if i not in self._encoded:
            self._encoded[i] = encode_example(self.examples[i], vocab)
        return self._encoded[i]


DEFAULT_SIZES = {"train": 2000, "val": 100, "test": 120, "public": 256}


def generate_corpus(seed: int, sizes: Mapping[str, int] | None = None,
                    categories: Sequence[str] = CATEGORIES, context_len: int = 256) -> Corpus:
    """Deterministic synthetic corpus; categories are balanced round-robin within each split.

    The public split asks about a disjoint set of entities, standing in for a
    separate public instruction dataset.  Duplicate (category, input)
    pairs are never reused across or within splits.
    """
    sizes = dict(DEFAULT_SIZES if sizes is None else sizes)
    if any(v < 1 for v in sizes.values()) or not set(sizes) <= set(SPLITS):
        raise InputError(f"sizes must be positive counts over {SPLITS}")
    unknown = set(categories) - set(CATEGORIES)
    if unknown or not categories:
        raise InputError(f"unknown categories {sorted(unknown)}")
    rng = np.random.default_rng(seed)
    seen: set[tuple[str, str]] = set()
    examples: list[Example] = []
    for split in SPLITS:
        if split not in sizes:
            continue
        pool = ENTITIES_PUBLIC if split == "public" else ENTITIES_MAIN
        made, tries = 0, 0
        while made < sizes[split]:
            tries += 1
            if tries > 100 * sizes[split] + 1000:
                raise InputError(f"cannot draw {sizes[split]} distinct {split} examples")
            cat = categories[made % len(categories)]
            inp = _draw_input(rng, pool)
            if (cat, inp) in seen:
                continue
            e = Example(INSTRUCTIONS[cat], inp, run_task(cat, inp), cat, split)
            if not fits(e, context_len):
                continue
            seen.add((cat, inp))
            examples.append(e)
            made += 1
    return Corpus(examples, tuple(categories))


CHATTER_AFTER = (". I hope this helps!", ". Let me know if you need anything else.",
                 ". Glad to help.", ".")


def general_text(seed: int, n: int, categories: Sequence[str] = CATEGORIES,
                 chat_fraction: float = 0.5, terse_fraction: float = 0.05
                 ) -> list[tuple[str, str]]:
    """Pretraining documents about the world, as (context, text) pairs.

    A ``chat_fraction`` share are instruction-formatted exchanges.  Their
    answers open with the bare answer; most then go on to restate the facts in
    full sentences with some filler, and only a ``terse_fraction`` stop there
    as the task data does.  The bases thus know the facts and the prompt format
    but usually keep talking.  The rest are single facts with an empty
    context.  Only ``text`` is scored.
    """
    for name, v in (("chat_fraction", chat_fraction), ("terse_fraction", terse_fraction)):
        if not 0.0 <= v <= 1.0:
            raise InputError(f"{name} must lie in [0, 1], got {v}")
    rng = np.random.default_rng(seed)
    pools = (ENTITIES_MAIN, ENTITIES_PUBLIC)
    out = []
    for _ in range(n):
        cat = categories[int(rng.integers(len(categories)))]
        pool = pools[int(rng.integers(2))]
        if rng.random() < chat_fraction:
            x = _draw_input(rng, pool)
            if rng.random() < terse_fraction:
                out.append((format_prompt(INSTRUCTIONS[cat], x), run_task(cat, x)))
                continue
            after = CHATTER_AFTER[int(rng.integers(len(CHATTER_AFTER)))]
            text = run_task(cat, x) + ". " + verbose_answer(cat, x) + after
            out.append((format_prompt(INSTRUCTIONS[cat], x), text))
        else:
            text = fact(cat, pool[int(rng.integers(len(pool)))])
            out.append(("", text[0].upper() + text[1:] + "."))
    return out


def encode_document(context: str, text: str, vocab: Vocab = BYTE_VOCAB
                    ) -> tuple[list[int], list[int]]:
    """``([bos] + context, text + [eos])``; the context is conditioned on, never scored."""
    return [vocab.bos] + tokenize(context), tokenize(text) + [vocab.eos]


# ---------------------------------------------------------------------------
# Corpus file: one JSON object per line, keys in the order
#   instruction, input, response, category, split
# (JSON string escaping; UTF-8).
# ---------------------------------------------------------------------------

RECORD_FIELDS = ("instruction", "input", "response", "category", "split")


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for e in corpus.examples:
            f.write(json.dumps({k: getattr(e, k) for k in RECORD_FIELDS}, ensure_ascii=False) + "\n")


def load_corpus(path: str | Path, categories: Sequence[str] | None = None) -> Corpus:
    """Read a corpus file (also the ingestion path for external records in the same format)."""
    examples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                e = Example(*(str(rec.get(k, "")) for k in RECORD_FIELDS[:4]),
                            split=str(rec.get("split", "train")))
            except (json.JSONDecodeError, TypeError, InputError) as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if e.split not in SPLITS:
                raise FormatError(f"{path}:{lineno}: unknown split {e.split!r}")
            examples.append(e)
    if categories is None:
        categories = tuple(dict.fromkeys(e.category for e in examples))
    return Corpus(examples, tuple(categories))


# ---------------------------------------------------------------------------
# Partitions
# ---------------------------------------------------------------------------


@dataclass
class DevicePartition:
    """``assignments[n]`` lists corpus indices held by device ``n``."""

    assignments: list[np.ndarray]
    categories: tuple[str, ...]
    histograms: np.ndarray  # (devices, categories) counts

    @property
    def num_devices(self) -> int:
        return len(self.assignments)

    def sizes(self) -> list[int]:
        return [len(a) for a in self.assignments]

    def to_dict(self) -> dict:
        return {"categories": list(self.categories),
                "devices": [{"id": n, "size": len(a),
                             "histogram": dict(zip(self.categories, map(int, h)))}
                            for n, (a, h) in enumerate(zip(self.assignments, self.histograms))]}


def _build(corpus: Corpus, blocks: list[list[np.ndarray]]) -> DevicePartition:
    labels = corpus.labels()
    assignments = [np.sort(np.concatenate(b)).astype(np.int64) if b else np.zeros(0, np.int64)
                   for b in blocks]
    hist = np.zeros((len(assignments), len(corpus.categories)), dtype=np.int64)
    for n, a in enumerate(assignments):
        hist[n] = np.bincount(labels[a], minlength=len(corpus.categories))
    return DevicePartition(assignments, corpus.categories, hist)


def _train_by_category(corpus: Corpus, rng: np.random.Generator) -> list[np.ndarray]:
    train = corpus.indices("train")
    if train.size == 0:
        raise InputError("train split is empty")
    labels = corpus.labels()[train]
    return [rng.permutation(train[labels == j]) for j in range(len(corpus.categories))]


def _two_category_plan(sizes: Sequence[int], quota: Sequence[int], min_share: int):
    """Integer plan ``take[n, j]`` with two non-zero categories per device, or None."""
    N, C = len(quota), len(sizes)
    nv = N * C
    rows, lo, hi = [], [], []

    def row():
        r = np.zeros(2 * nv)
        rows.append(r)
        return r

    for n in range(N):
        row()[nv + n * C: nv + (n + 1) * C] = 1
        lo.append(2), hi.append(2)
        row()[n * C:(n + 1) * C] = 1
        lo.append(quota[n]), hi.append(quota[n])
    for j in range(C):
        row()[j:nv:C] = 1
        lo.append(sizes[j]), hi.append(sizes[j])
    for n in range(N):
        for j in range(C):
            r = row()
            r[n * C + j], r[nv + n * C + j] = 1, -quota[n]
            lo.append(-np.inf), hi.append(0)
            r = row()
            r[n * C + j], r[nv + n * C + j] = 1, -min_share
            lo.append(0), hi.append(np.inf)
    upper = np.concatenate([np.repeat(np.asarray(quota, float), C), np.ones(nv)])
    res = milp(np.zeros(2 * nv), constraints=LinearConstraint(np.array(rows), lo, hi),
               integrality=np.ones(2 * nv), bounds=Bounds(np.zeros(2 * nv), upper))
    if res.status != 0 or res.x is None:
        return None
    return np.rint(res.x[:nv]).reshape(N, C).astype(np.int64)


def partition_pathological(corpus: Corpus, num_devices: int, seed: int) -> DevicePartition:
    """Every device holds exactly two categories; shard sizes differ by at most one.

    Which two categories each device gets, and how many of each, come from a small
    integer program over a seeded category order; each category share is first
    required to be at least a quarter of the shard, relaxed to one sample if that
    is infeasible.
    """
    rng = np.random.default_rng(seed)
    per_cat = _train_by_category(corpus, rng)
    order = [j for j in rng.permutation(len(per_cat)) if per_cat[j].size]
    C, N = len(order), num_devices
    if N < 1 or C < 2:
        raise InputError("need at least one device and two non-empty categories")
    if 2 * N < C:
        raise InputError(f"{N} devices x 2 categories cannot cover {C} categories")
    sizes = [per_cat[j].size for j in order]
    total = sum(sizes)
    quota = [total // N + (1 if n < total % N else 0) for n in range(N)]
    if min(quota) < 2:
        raise InputError("too few training examples for two categories per device")
    take = None
    for share in (max(1, min(quota) // 4), 1):
        take = _two_category_plan(sizes, quota, share)
        if take is not None:
            break
    if take is None:
        raise InputError("no equal-shard two-category assignment exists for these category sizes")
    cursor = [0] * C
    blocks: list[list[np.ndarray]] = []
    for n in range(N):
        mine = []
        for c in range(C):
            k = int(take[n, c])
            if k:
                j = order[c]
                mine.append(per_cat[j][cursor[c]:cursor[c] + k])
                cursor[c] += k
        blocks.append(mine)
    return _build(corpus, blocks)


def largest_remainder(p: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total`` closest to ``p * total`` (Hamilton rounding)."""
    raw = np.asarray(p, dtype=np.float64) * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def partition_dirichlet(corpus: Corpus, num_devices: int, concentration: float,
                        seed: int) -> DevicePartition:
    """Per category, split examples across devices in Dirichlet(concentration) proportions."""
    if not concentration > 0:
        raise InputError(f"concentration must be > 0, got {concentration}")
    if num_devices < 1:
        raise InputError("need at least one device")
    rng = np.random.default_rng(seed)
    per_cat = _train_by_category(corpus, rng)
    blocks: list[list[np.ndarray]] = [[] for _ in range(num_devices)]
    for idx in per_cat:
        if not idx.size:
            continue
        p = rng.dirichlet(np.full(num_devices, float(concentration)))
        if not np.isfinite(p).all():
            p = np.full(num_devices, 1.0 / num_devices)
        counts = largest_remainder(p, idx.size)
        start = 0
        for n, k in enumerate(counts):
            blocks[n].append(idx[start:start + k])
            start += k
    return _build(corpus, blocks)
