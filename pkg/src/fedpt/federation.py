"""Round orchestration: select, broadcast, local LoRA training, FedAvg, proxy, distill.

The broadcast model is the frozen small base plus the current adapter, so only
adapter bytes move in either direction.  All randomness comes from named
sub-streams of the root seed, keyed by round and device id, which makes every
local update a pure function of its inputs.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from .adapter import AdaptedModel, LoraAdapter, new_adapter, payload_size, serialize
from .distill import DistillConfig, distill, mean_token_kl
from .errors import ConfigurationError, ContractViolation, InputError
from .model import ModelParams, backward, cosine_lr
from .optim import apply_step, make_optimizer
from .proxy import ProxyEnsemble, ProxyTeacher
from .rng import child_seed, substream

log = logging.getLogger(__name__)

MODES = ("fedpt", "fedavg-small", "fedavg-plus-pt", "base")


@dataclass(frozen=True)
class FedConfig:
    num_devices: int = 10
    devices_per_round: int = 10
    local_epochs: int = 2
    rounds: int = 20
    batch_size: int = 16
    base_lr: float = 3e-3
    optimizer: str = "adam"
    seed: int = 0
    alpha: float = 1.5
    rank: int = 2
    drop_prob: float = 0.0
    mode: str = "fedpt"
    kd: DistillConfig = field(default_factory=DistillConfig)
    kd_probe_size: int = 32
    checkpoint_rounds: tuple[int, ...] = (1, 5, 10, 15, 20)
    workers: int = 1

    def __post_init__(self) -> None:
        checks = [
            ("num_devices", self.num_devices >= 1),
            ("devices_per_round", 1 <= self.devices_per_round <= self.num_devices),
            ("local_epochs", self.local_epochs >= 1),
            ("rounds", self.rounds >= 1),
            ("batch_size", self.batch_size >= 1),
            ("base_lr", self.base_lr >= 0),
            ("optimizer", self.optimizer in ("sgd", "adam")),
            ("alpha", np.isfinite(self.alpha) and self.alpha >= 0),
            ("rank", self.rank >= 1),
            ("drop_prob", 0.0 <= self.drop_prob < 1.0),
            ("mode", self.mode in MODES),
            ("kd_probe_size", self.kd_probe_size >= 0),
            ("workers", self.workers >= 1),
        ]
        for name, ok in checks:
            if not ok:
                raise ConfigurationError(f"invalid value for {name}: {getattr(self, name)!r}")

    @property
    def lam(self) -> float:
        return self.kd.lam

    def effective_kd(self) -> DistillConfig:
        """KD settings actually used: FedAvg+PT is FedPT with zero distillation steps."""
        if self.mode == "fedavg-plus-pt":
            return DistillConfig(self.kd.lam, self.kd.kd_data_size, self.kd.kd_batch_size, 0,
                                 self.kd.kd_lr, self.kd.optimizer)
        return self.kd

    def to_dict(self) -> dict:
        d = asdict(self)
        d["checkpoint_rounds"] = list(self.checkpoint_rounds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> FedConfig:
        d = dict(d)
        kd = d.pop("kd", {}) or {}
        if "checkpoint_rounds" in d:
            d["checkpoint_rounds"] = tuple(int(r) for r in d["checkpoint_rounds"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown federation keys: {sorted(unknown)}")
        bad_kd = set(kd) - set(DistillConfig.__dataclass_fields__)
        if bad_kd:
            raise ConfigurationError(f"unknown kd keys: {sorted(bad_kd)}")
        return cls(kd=DistillConfig(**kd), **d)


@dataclass(frozen=True)
class DeviceState:
    device_id: int
    indices: np.ndarray
    examples: Sequence[tuple]

    @property
    def size(self) -> int:
        return len(self.examples)


@dataclass
class RoundRecord:
    round: int
    selected: list[int]
    dropped: list[int]
    lr: float
    local_losses: dict[str, float | None]
    aggregate_checksum: str
    adapter_checksum: str
    bytes_communicated: int
    kd: dict | None

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def select_devices(rng: np.random.Generator, num_devices: int, k: int) -> list[int]:
    """Uniform sample of ``k`` distinct device ids, returned in id order."""
    if not 1 <= k <= num_devices:
        raise InputError(f"cannot select {k} of {num_devices} devices")
    return sorted(int(i) for i in rng.choice(num_devices, size=k, replace=False))


def local_update(small_base: ModelParams, adapter_in: LoraAdapter, device: DeviceState,
                 epochs: int, lr: float, rng: np.random.Generator, batch_size: int = 64,
                 optimizer: str = "adam") -> tuple[LoraAdapter | None, float | None]:
    """``epochs`` passes of mini-batch training on the device data, adapter only.

    Returns ``(adapter_out, mean loss over the last epoch)``; ``(None, None)`` for
    a device without data.  Mini-batches follow a fresh permutation each epoch
    and hold their examples in ascending index order.
    """
    if epochs < 1:
        raise InputError(f"local epochs must be >= 1, got {epochs}")
    if device.size == 0:
        log.warning("device %d has no data; skipping", device.device_id)
        return None, None
    if lr == 0:
        return adapter_in, None
    opt = make_optimizer(optimizer)
    tensors = adapter_in.tensors()
    adapter = adapter_in
    losses: list[float] = []
    for _ in range(epochs):
        perm = rng.permutation(device.size)
        losses = []
        for s in range(0, device.size, batch_size):
            batch = [device.examples[i] for i in np.sort(perm[s:s + batch_size])]
            loss, grads = backward(small_base, batch, lora=adapter.factors)
            tensors = apply_step(opt, tensors, grads, lr)
            adapter = LoraAdapter.from_tensors(adapter.rank, adapter.targets, tensors)
            losses.append(loss)
    return adapter, float(np.mean(losses))


def normalized_weights(weights: Sequence[float | int]) -> list[float]:
    """Exact-rational normalization, so scaling all weights by c > 0 changes nothing."""
    fr = [Fraction(w) for w in weights]
    if any(w < 0 for w in fr):
        raise InputError("aggregation weights must be non-negative")
    total = sum(fr)
    if total == 0:
        raise InputError("aggregation weights are all zero")
    return [float(w / total) for w in fr]


def aggregate(adapters: Sequence[LoraAdapter], weights: Sequence[float | int]) -> LoraAdapter:
    """Weighted mean of B factors and of A factors, each averaged separately.

    Summation runs in a canonical order (by weight, then by adapter bytes), so
    the result does not depend on the order of the (adapter, weight) pairs.
    Note that ``mean(B) @ mean(A)`` generally differs from ``mean(B @ A)``.
    """
    if not adapters or len(adapters) != len(weights):
        raise InputError("need one weight per adapter and at least one adapter")
    first = adapters[0]
    for a in adapters[1:]:
        if a.rank != first.rank or list(a.factors) != list(first.factors) or any(
                x.shape != y.shape for x, y in zip(a.tensors().values(), first.tensors().values())):
            raise ContractViolation("adapters to aggregate have different layouts")
    w = normalized_weights(weights)
    if len(adapters) == 1:
        return first
    order = sorted(range(len(adapters)), key=lambda i: (w[i], serialize(adapters[i])))
    flats = [adapters[i].tensors() for i in order]
    out = {}
    for name in flats[0]:
        acc = w[order[0]] * flats[0][name]
        for i, f in zip(order[1:], flats[1:]):
            acc = acc + w[i] * f[name]
        out[name] = acc
    return LoraAdapter.from_tensors(first.rank, first.targets, out)


# ---------------------------------------------------------------------------
# Server state and rounds
# ---------------------------------------------------------------------------


@dataclass
class FedState:
    config: FedConfig
    small_base: ModelParams
    large_base: ModelParams | None
    devices: list[DeviceState]
    adapter: LoraAdapter
    public: list[tuple] = field(default_factory=list)
    probe: list[tuple] = field(default_factory=list)
    teacher_cache: ProxyTeacher | None = None
    probe_cache: ProxyTeacher | None = None

    @property
    def uses_proxy(self) -> bool:
        return self.config.mode in ("fedpt", "fedavg-plus-pt")


def init_state(config: FedConfig, small_base: ModelParams, large_base: ModelParams | None,
               devices: Sequence[DeviceState], public: Sequence[tuple] = (),
               adapter: LoraAdapter | None = None) -> FedState:
    """Fresh server state; samples the fixed distillation set and a disjoint probe set."""
    if len(devices) != config.num_devices:
        raise ConfigurationError(f"{len(devices)} devices given, config says {config.num_devices}")
    if adapter is None:
        adapter = new_adapter(small_base.config, config.rank,
                              child_seed(substream(config.seed, "init", "adapter")))
    state = FedState(config, small_base, large_base, list(devices), adapter)
    if state.uses_proxy:
        if large_base is None:
            raise ConfigurationError(f"mode {config.mode!r} needs the large base model")
        kd = config.kd
        if len(public) < kd.kd_data_size:
            raise ConfigurationError(
                f"public set has {len(public)} examples, kd_data_size is {kd.kd_data_size}")
        perm = substream(config.seed, "kd", "data").permutation(len(public))
        state.public = [public[i] for i in np.sort(perm[:kd.kd_data_size])]
        state.probe = [public[i] for i in np.sort(perm[kd.kd_data_size:
                                                      kd.kd_data_size + config.kd_probe_size])]
        if config.effective_kd().kd_iterations > 0:
            state.teacher_cache = ProxyTeacher(large_base, small_base, state.public)
        if state.probe:
            state.probe_cache = ProxyTeacher(large_base, small_base, state.probe)
    return state


def _device_task(state: FedState, t: int, lr: float, device_id: int):
    cfg = state.config
    dev = state.devices[device_id]
    if cfg.drop_prob and substream(cfg.seed, "drop", t, device_id).random() < cfg.drop_prob:
        return device_id, None, None, True
    out, loss = local_update(state.small_base, state.adapter, dev, cfg.local_epochs, lr,
                             substream(cfg.seed, "local", t, device_id), cfg.batch_size,
                             cfg.optimizer)
    return device_id, out, loss, False


def run_round(state: FedState, t: int) -> RoundRecord:
    """One full round; updates ``state.adapter`` in place and returns its record."""
    cfg = state.config
    selected = select_devices(substream(cfg.seed, "selection", t), cfg.num_devices,
                              cfg.devices_per_round)
    lr = cosine_lr(t, cfg.rounds, cfg.base_lr)
    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as ex:
            results = list(ex.map(lambda k: _device_task(state, t, lr, k), selected))
    else:
        results = [_device_task(state, t, lr, k) for k in selected]
    results.sort(key=lambda r: r[0])
    kept = [(k, a) for k, a, _, dropped in results if not dropped and a is not None]
    dropped = [k for k, _, _, d in results if d]
    losses = {str(k): loss for k, _, loss, d in results if not d}
    if kept:
        averaged = aggregate([a for _, a in kept], [state.devices[k].size for k, _ in kept])
    else:
        averaged = state.adapter
    payload = payload_size(state.adapter)
    uploads = len(selected) - len(dropped)
    kd_info = None
    new_adapter_ = averaged
    if state.uses_proxy:
        ens = ProxyEnsemble(state.large_base, state.small_base,
                            AdaptedModel(state.small_base, averaged), cfg.alpha)
        kd_cfg = cfg.effective_kd()
        new_adapter_ = distill(AdaptedModel(state.small_base, averaged), ens, state.public, kd_cfg,
                               substream(cfg.seed, "kd", t), cache=state.teacher_cache)
        kd_info = {"iterations": kd_cfg.kd_iterations}
        if state.probe_cache is not None:
            teach = state.probe_cache.logits(ens)
            before = mean_token_kl(AdaptedModel(state.small_base, averaged), teach, state.probe)
            after = (before if new_adapter_ is averaged else
                     mean_token_kl(AdaptedModel(state.small_base, new_adapter_), teach,
                                   state.probe))
            kd_info.update(kl_before=before, kl_after=after)
    state.adapter = new_adapter_
    return RoundRecord(
        round=t, selected=selected, dropped=dropped, lr=lr, local_losses=losses,
        aggregate_checksum=averaged.checksum(), adapter_checksum=new_adapter_.checksum(),
        bytes_communicated=(len(selected) + uploads) * payload, kd=kd_info)


@dataclass
class ExperimentResult:
    records: list[RoundRecord]
    adapter: LoraAdapter
    checkpoints: dict[int, LoraAdapter]


def run_experiment(state: FedState,
                   on_round: Callable[[RoundRecord, LoraAdapter], None] | None = None
                   ) -> ExperimentResult:
    """All rounds of the configured mode; ``base`` mode trains nothing."""
    cfg = state.config
    records, ckpts = [], {}
    if cfg.mode == "base":
        return ExperimentResult(records, state.adapter, ckpts)
    for t in range(cfg.rounds):
        rec = run_round(state, t)
        records.append(rec)
        if t + 1 in cfg.checkpoint_rounds or t + 1 == cfg.rounds:
            ckpts[t + 1] = state.adapter
        if on_round is not None:
            on_round(rec, state.adapter)
    return ExperimentResult(records, state.adapter, ckpts)


def make_devices(partition, corpus) -> list[DeviceState]:
    """Device states holding encoded (prompt, target) pairs for their partition."""
    return [DeviceState(n, idx, [corpus.encoded(int(i)) for i in idx])
            for n, idx in enumerate(partition.assignments)]
