import numpy as np
import pytest

from conftest import tiny_config
from fedpt.data import CATEGORIES, general_text
from fedpt.errors import InputError
from fedpt.model import BYTE_VOCAB, init_params
from fedpt.pretrain import _bucketed_batches, _schedule, held_out_loss, pretrain

CFG = tiny_config(width=16, layers=1, heads=2, context_len=256, vocab=BYTE_VOCAB)
DOCS = general_text(0, 120, CATEGORIES[:3])


def test_training_lowers_held_out_loss():
    held = general_text(1, 32, CATEGORIES[:3])
    before = held_out_loss(init_params(CFG, 0), held)
    after = held_out_loss(pretrain(CFG, DOCS, 20_000, seed=0, lr=1e-2), held)
    assert after < before - 0.5


def test_pretraining_is_seeded():
    a = pretrain(CFG, DOCS, 3_000, seed=1)
    b = pretrain(CFG, DOCS, 3_000, seed=1)
    assert all(np.array_equal(a.arrays[k], v) for k, v in b.arrays.items())


def test_long_documents_are_skipped():
    docs = [("", "x" * 400)] + DOCS[:8]
    pretrain(CFG, docs, 500, seed=0)
    with pytest.raises(InputError):
        pretrain(CFG, docs[:1], 500, seed=0)


@pytest.mark.parametrize("budget,docs", [(0, DOCS), (100, [])])
def test_bad_inputs(budget, docs):
    with pytest.raises(InputError):
        pretrain(CFG, docs, budget, seed=0)


def test_batches_cover_an_epoch_once():
    rng = np.random.default_rng(0)
    lengths = rng.integers(5, 50, size=100)
    batches = _bucketed_batches(rng, lengths, 8)
    seen = np.concatenate(batches)
    assert len(set(seen.tolist())) == seen.size == 96
    assert all(b.size == 8 for b in batches)


def test_schedule_warms_up_then_decays():
    lrs = [_schedule(s, 100, 1.0, 0.1) for s in range(100)]
    assert lrs[0] == pytest.approx(0.1) and lrs[9] == pytest.approx(1.0)
    assert lrs[10] == pytest.approx(1.0) and lrs[-1] == pytest.approx(0.0, abs=1e-12)
    assert all(x >= y for x, y in zip(lrs[10:], lrs[11:]))
