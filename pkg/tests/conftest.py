import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fedpt.model import ModelConfig, Vocab, init_params  # noqa: E402

TINY_VOCAB = Vocab(size=12, pad=9, bos=10, eos=11)


def tiny_config(width=8, layers=2, heads=2, context_len=24, vocab=TINY_VOCAB):
    return ModelConfig(layers=layers, width=width, heads=heads, context_len=context_len,
                       vocab=vocab)


def randomize(params, seed, scale=0.3):
    """Larger-than-init weights and non-trivial norms/biases so gradients are not tiny."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for k, v in params.arrays.items():
        if k.endswith(".g"):
            arrays[k] = 1.0 + 0.2 * rng.standard_normal(v.shape)
        else:
            arrays[k] = scale * rng.standard_normal(v.shape)
    return type(params)(params.config, arrays)


def random_batch(rng, vocab, n, prompt=(2, 6), target=(1, 4)):
    """(prompt, target) pairs over the non-special ids."""
    hi = vocab.pad
    out = []
    for _ in range(n):
        p = [vocab.bos] + list(rng.integers(0, hi, size=int(rng.integers(*prompt))))
        t = list(rng.integers(0, hi, size=int(rng.integers(*target))))
        out.append((p, t))
    return out


@pytest.fixture
def tiny():
    return randomize(init_params(tiny_config(), 0), 1)
