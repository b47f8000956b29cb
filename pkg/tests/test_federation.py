import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TINY_VOCAB, randomize, random_batch, tiny_config
from test_adapter import random_adapter
from fedpt.adapter import LoraAdapter, new_adapter, payload_size
from fedpt.distill import DistillConfig
from fedpt.errors import ConfigurationError, ContractViolation, InputError
from fedpt.federation import (DeviceState, FedConfig, aggregate, init_state, local_update,
                              normalized_weights, run_experiment, run_round, select_devices)
from fedpt.model import backward, cosine_lr, init_params
from fedpt.optim import Adam
from fedpt.rng import substream

CFG = tiny_config()
KD = DistillConfig(lam=0.1, kd_data_size=8, kd_batch_size=4, kd_iterations=2, kd_lr=1e-2)


def bases():
    small = randomize(init_params(CFG, 0), 1)
    large = randomize(init_params(tiny_config(width=12, layers=3), 2), 3)
    return small, large


def devices(n, per=6, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        ex = random_batch(rng, TINY_VOCAB, per)
        out.append(DeviceState(k, np.arange(k * per, (k + 1) * per), ex))
    return out


def public(n=16, seed=99):
    return random_batch(np.random.default_rng(seed), TINY_VOCAB, n)


def fed(**kw):
    base = dict(num_devices=3, devices_per_round=2, local_epochs=1, rounds=2, batch_size=4,
                base_lr=1e-2, seed=7, kd=KD, kd_probe_size=4, rank=2)
    base.update(kw)
    return FedConfig(**base)


def state_for(cfg, devs=None, pub=None):
    small, large = bases()
    need_large = cfg.mode in ("fedpt", "fedavg-plus-pt")
    return init_state(cfg, small, large if need_large else None,
                      devs if devs is not None else devices(cfg.num_devices),
                      pub if pub is not None else public())


# ---------------------------------------------------------------------------
# select_devices
# ---------------------------------------------------------------------------

def test_select_all_when_k_equals_n():
    assert select_devices(np.random.default_rng(0), 5, 5) == [0, 1, 2, 3, 4]


def test_select_singleton_is_reproducible():
    a = select_devices(np.random.default_rng(11), 10, 1)
    b = select_devices(np.random.default_rng(11), 10, 1)
    assert a == b and len(a) == 1


def test_select_is_uniform():
    counts = np.zeros(10)
    rng = np.random.default_rng(2024)
    for _ in range(10_000):
        counts[select_devices(rng, 10, 3)] += 1
    freq = counts / 10_000
    assert np.all(np.abs(freq - 0.3) <= 0.02), freq


@pytest.mark.parametrize("k", [0, 4])
def test_select_rejects_bad_k(k):
    with pytest.raises(InputError):
        select_devices(np.random.default_rng(0), 3, k)


# ---------------------------------------------------------------------------
# local_update
# ---------------------------------------------------------------------------

def test_local_update_rejects_zero_epochs():
    small, _ = bases()
    with pytest.raises(InputError):
        local_update(small, new_adapter(CFG, 2, 0), devices(1)[0], 0, 1e-2,
                     np.random.default_rng(0))


def test_local_update_zero_lr_is_identity():
    small, _ = bases()
    a = random_adapter(CFG, 2, 3)
    out, _ = local_update(small, a, devices(1)[0], 2, 0.0, np.random.default_rng(0))
    assert out.equals(a)


def test_empty_device_is_skipped():
    small, _ = bases()
    empty = DeviceState(0, np.array([], dtype=int), [])
    assert local_update(small, new_adapter(CFG, 2, 0), empty, 1, 1e-2,
                        np.random.default_rng(0)) == (None, None)


def test_full_batch_epoch_equals_one_centralized_step():
    small, _ = bases()
    a = random_adapter(CFG, 2, 4)
    dev = devices(1, per=5)[0]
    out, _ = local_update(small, a, dev, 1, 1e-2, np.random.default_rng(0), batch_size=5)
    _, grads = backward(small, list(dev.examples), lora=a.factors)
    expected = Adam().step(a.tensors(), grads, 1e-2)
    for k, v in out.tensors().items():
        assert np.array_equal(v, expected[k])


def test_local_update_is_pure():
    small, _ = bases()
    a = random_adapter(CFG, 2, 5)
    before = {k: v.copy() for k, v in a.tensors().items()}
    dev = devices(1)[0]
    o1, l1 = local_update(small, a, dev, 2, 1e-2, np.random.default_rng(3), batch_size=4)
    o2, l2 = local_update(small, a, dev, 2, 1e-2, np.random.default_rng(3), batch_size=4)
    assert o1.equals(o2) and l1 == l2
    assert all(np.array_equal(before[k], v) for k, v in a.tensors().items())


# ---------------------------------------------------------------------------
# aggregate
# ---------------------------------------------------------------------------

def const_adapter(value):
    a = new_adapter(CFG, 2, 0)
    return LoraAdapter.from_tensors(2, a.targets,
                                    {k: np.full_like(v, value) for k, v in a.tensors().items()})


def test_aggregate_single_is_unchanged():
    a = random_adapter(CFG, 2, 1)
    assert aggregate([a], [17]).equals(a)


def test_aggregate_equal_weights_mean():
    out = aggregate([const_adapter(1.0), const_adapter(3.0)], [5, 5])
    assert all(np.all(v == 2.0) for v in out.tensors().values())


def test_aggregate_weighted_mean():
    out = aggregate([const_adapter(0.0), const_adapter(4.0)], [1, 3])
    assert all(np.all(v == 3.0) for v in out.tensors().values())


def test_aggregate_layout_mismatch():
    with pytest.raises(ContractViolation):
        aggregate([new_adapter(CFG, 2, 0), new_adapter(CFG, 1, 0)], [1, 1])


def test_aggregate_zero_weights():
    with pytest.raises(InputError):
        aggregate([const_adapter(1.0), const_adapter(2.0)], [0, 0])


def test_factor_mean_is_not_product_mean():
    a, b = random_adapter(CFG, 2, 1), random_adapter(CFG, 2, 2)
    avg = aggregate([a, b], [1, 1])
    name = avg.targets[0]
    assert not np.allclose(avg.delta(name), (a.delta(name) + b.delta(name)) / 2)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 500), min_size=1, max_size=6), st.randoms(use_true_random=False))
def test_aggregate_permutation_invariant(weights, rnd):
    adapters = [random_adapter(CFG, 2, 10 + i) for i in range(len(weights))]
    order = list(range(len(weights)))
    rnd.shuffle(order)
    x = aggregate(adapters, weights)
    y = aggregate([adapters[i] for i in order], [weights[i] for i in order])
    assert x.equals(y)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 500), min_size=1, max_size=6),
       st.sampled_from([2, 3, 7, 0.5, 2.0 ** -10, 10 ** 6]))
def test_aggregate_weight_scale_invariant(weights, c):
    # c chosen so that c * w is exact in floating point
    adapters = [random_adapter(CFG, 2, 20 + i) for i in range(len(weights))]
    assert aggregate(adapters, weights).equals(aggregate(adapters, [w * c for w in weights]))


@given(st.lists(st.integers(0, 1000), min_size=1, max_size=8).filter(lambda w: sum(w) > 0))
def test_normalized_weights_sum_to_one(weights):
    w = normalized_weights(weights)
    assert abs(sum(w) - 1.0) < 1e-12 and all(x >= 0 for x in w)


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(devices_per_round=4), dict(devices_per_round=0),
                                dict(local_epochs=0), dict(rounds=0), dict(mode="x"),
                                dict(drop_prob=1.0), dict(alpha=float("nan"))])
def test_config_validation(kw):
    with pytest.raises(ConfigurationError):
        fed(**kw)


def test_config_round_trip_and_unknown_keys():
    c = fed()
    assert FedConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ConfigurationError):
        FedConfig.from_dict(dict(c.to_dict(), bogus=1))
    with pytest.raises(ConfigurationError):
        FedConfig.from_dict(dict(c.to_dict(), kd={"nope": 1}))


def test_proxy_modes_need_large_base():
    small, _ = bases()
    with pytest.raises(ConfigurationError):
        init_state(fed(), small, None, devices(3), public())


def test_public_set_too_small():
    with pytest.raises(ConfigurationError):
        state_for(fed(), pub=public(4))


# ---------------------------------------------------------------------------
# rounds
# ---------------------------------------------------------------------------

def test_identical_data_zero_lr_round_is_noop():
    dev = devices(1)[0]
    same = [DeviceState(k, dev.indices, dev.examples) for k in range(3)]
    st_ = state_for(fed(base_lr=0.0, mode="fedavg-small"), devs=same)
    before = st_.adapter
    run_round(st_, 0)
    assert st_.adapter.equals(before)


@pytest.mark.parametrize("mode", ["fedpt", "fedavg-small", "fedavg-plus-pt"])
def test_bytes_per_round(mode):
    st_ = state_for(fed(mode=mode))
    rec = run_round(st_, 0)
    assert rec.bytes_communicated == 2 * 2 * payload_size(st_.adapter)
    assert len(rec.selected) == 2


def test_dropped_devices_are_renormalized():
    cfg = fed(mode="fedavg-small", num_devices=6, devices_per_round=6, drop_prob=0.5)
    st_ = state_for(cfg)
    start = st_.adapter
    rec = run_round(st_, 0)
    kept = [k for k in rec.selected if k not in rec.dropped]
    assert rec.dropped and kept
    outs = [local_update(st_.small_base, start, st_.devices[k], cfg.local_epochs,
                         rec.lr, substream(cfg.seed, "local", 0, k), cfg.batch_size)[0]
            for k in kept]
    assert st_.adapter.equals(aggregate(outs, [st_.devices[k].size for k in kept]))
    assert rec.bytes_communicated == (6 + len(kept)) * payload_size(start)


def test_frozen_bases_are_untouched():
    st_ = state_for(fed(rounds=2))
    small = {k: v.copy() for k, v in st_.small_base.arrays.items()}
    large = {k: v.copy() for k, v in st_.large_base.arrays.items()}
    run_experiment(st_)
    assert all(np.array_equal(small[k], v) for k, v in st_.small_base.arrays.items())
    assert all(np.array_equal(large[k], v) for k, v in st_.large_base.arrays.items())


def test_rerun_gives_identical_records():
    a = run_experiment(state_for(fed(rounds=3, seed=42)))
    b = run_experiment(state_for(fed(rounds=3, seed=42)))
    assert [r.to_dict() for r in a.records] == [r.to_dict() for r in b.records]
    assert a.adapter.equals(b.adapter)


def test_worker_count_does_not_change_result():
    a = run_experiment(state_for(fed(rounds=2, workers=1)))
    b = run_experiment(state_for(fed(rounds=2, workers=3)))
    assert [r.to_dict() for r in a.records] == [r.to_dict() for r in b.records]


def test_single_round_experiment_equals_run_round():
    res = run_experiment(state_for(fed(rounds=1)))
    st_ = state_for(fed(rounds=1))
    rec = run_round(st_, 0)
    assert res.records[0].to_dict() == rec.to_dict() and res.adapter.equals(st_.adapter)
    assert set(res.checkpoints) == {1}


def test_base_mode_trains_nothing():
    st_ = state_for(fed(mode="base"))
    res = run_experiment(st_)
    assert res.records == [] and res.adapter.equals(st_.adapter)


def test_fedavg_small_has_no_kd():
    rec = run_round(state_for(fed(mode="fedavg-small")), 0)
    assert rec.kd is None and rec.aggregate_checksum == rec.adapter_checksum


def test_kd_changes_the_aggregate_in_fedpt():
    rec = run_round(state_for(fed()), 0)
    assert rec.aggregate_checksum != rec.adapter_checksum


def centralized(small, adapter, examples, rounds, epochs, base_lr, batch_size, seed):
    """Sequential training on one data set with a fresh Adam each round."""
    tensors = adapter.tensors()
    per_round = []
    for t in range(rounds):
        lr = cosine_lr(t, rounds, base_lr)
        rng = substream(seed, "local", t, 0)
        opt = Adam()
        for _ in range(epochs):
            perm = rng.permutation(len(examples))
            for s in range(0, len(examples), batch_size):
                batch = [examples[i] for i in sorted(perm[s:s + batch_size])]
                cur = LoraAdapter.from_tensors(adapter.rank, adapter.targets, tensors)
                _, g = backward(small, batch, lora=cur.factors)
                tensors = opt.step(tensors, g, lr)
        per_round.append(LoraAdapter.from_tensors(adapter.rank, adapter.targets, tensors))
    return per_round


@pytest.mark.parametrize("mode,kd", [("fedavg-small", KD),
                                     ("fedpt", DistillConfig(kd_data_size=8, kd_iterations=0)),
                                     ("fedpt", DistillConfig(kd_data_size=8, kd_lr=0.0))])
def test_one_device_reduces_to_centralized(mode, kd):
    cfg = fed(num_devices=1, devices_per_round=1, rounds=3, local_epochs=2, mode=mode, kd=kd)
    st_ = state_for(cfg)
    start = st_.adapter
    seen = []
    run_experiment(st_, on_round=lambda rec, a: seen.append(a))
    ref = centralized(st_.small_base, start, st_.devices[0].examples, 3, 2, cfg.base_lr,
                      cfg.batch_size, cfg.seed)
    assert all(x.equals(y) for x, y in zip(seen, ref))


def test_zero_kd_iterations_matches_fedavg_plus_pt():
    kd0 = DistillConfig(lam=0.1, kd_data_size=8, kd_batch_size=4, kd_iterations=0, kd_lr=1e-2)
    a = run_experiment(state_for(fed(mode="fedpt", kd=kd0, rounds=3)))
    b = run_experiment(state_for(fed(mode="fedavg-plus-pt", kd=KD, rounds=3)))
    assert [r.to_dict() for r in a.records] == [r.to_dict() for r in b.records]
