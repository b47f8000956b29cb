"""Server-side distillation of the proxy-tuned teacher into the small student.

The objective on a public batch is::

    (1 - lam) * NLL(student) + lam * KL(teacher || student)

evaluated per target token under teacher forcing on the ground-truth response.
Both terms average per example over its target tokens, then over the batch.
The teacher is a constant; only the student's adapter factors move.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .adapter import AdaptedModel, LoraAdapter
from .errors import ConfigurationError, InputError
from .model import TeacherForcedPass, log_softmax, target_logits
from .optim import apply_step, make_optimizer
from .proxy import ProxyEnsemble, ProxyTeacher


@dataclass(frozen=True)
class DistillConfig:
    lam: float = 0.1
    kd_data_size: int = 128
    kd_batch_size: int = 16
    kd_iterations: int = 8
    kd_lr: float = 1e-3
    optimizer: str = "adam"

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError(f"lam must lie in [0, 1], got {self.lam}")
        if self.kd_data_size < 1 or self.kd_batch_size < 1:
            raise ConfigurationError("kd_data_size and kd_batch_size must be positive")
        if self.kd_iterations < 0:
            raise ConfigurationError("kd_iterations must be >= 0")
        if self.kd_lr < 0:
            raise ConfigurationError("kd_lr must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")


def _teacher_flat(teacher, batch) -> np.ndarray:
    if isinstance(teacher, ProxyEnsemble):
        if teacher.vocab != teacher.small_tuned.config.vocab:
            raise ConfigurationError("teacher and student vocabularies differ")
        return teacher.combine(
            target_logits(teacher.large_base, batch),
            target_logits(teacher.small_tuned.base, batch, teacher.small_tuned.adapter.factors),
            target_logits(teacher.small_base, batch))
    return np.concatenate(teacher) if isinstance(teacher, list) else np.asarray(teacher)


def _terms(student: AdaptedModel, teacher_logits: np.ndarray, batch, lam: float, grad: bool):
    if teacher_logits.shape[-1] != student.config.vocab.size:
        raise ConfigurationError("teacher and student vocabularies differ")
    need = set(student.adapter.tensors()) if grad else None
    tp = TeacherForcedPass(student.base, batch, student.adapter.factors, need=need, keep=grad)
    log_q = log_softmax(tp.logits)
    log_p = log_softmax(teacher_logits)
    p = np.exp(log_p)
    rows = np.arange(tp.targets.size)
    nll = -log_q[rows, tp.targets]
    # 0 * log 0 = 0 for tokens the teacher rules out
    kl = (p * np.where(p > 0, log_p - log_q, 0.0)).sum(-1)
    mle = float(tp.example_means(nll).mean())
    kl_mean = float(tp.example_means(kl).mean())
    loss = (1.0 - lam) * mle + lam * kl_mean
    if not grad:
        return loss, mle, kl_mean, None
    q = np.exp(log_q)
    d = q.copy()
    d[rows, tp.targets] -= 1.0
    d *= 1.0 - lam
    d += lam * (q - p)
    d *= tp.position_weights()[:, None]
    return loss, mle, kl_mean, tp.backward(d)


def kd_loss(student: AdaptedModel, teacher, batch: Sequence[tuple], lam: float) -> float:
    """Mixed likelihood / forward-KL objective; ``teacher`` is an ensemble or its logits."""
    if not 0.0 <= lam <= 1.0:
        raise InputError(f"lam must lie in [0, 1], got {lam}")
    return _terms(student, _teacher_flat(teacher, batch), batch, lam, False)[0]


def kd_loss_and_grad(student: AdaptedModel, teacher, batch, lam: float):
    """Loss and gradient w.r.t. the student's adapter tensors."""
    loss, _, _, grads = _terms(student, _teacher_flat(teacher, batch), batch, lam, True)
    return loss, grads


def mean_token_kl(student: AdaptedModel, teacher, batch) -> float:
    """Mean KL(teacher || student) over target tokens of ``batch``."""
    return _terms(student, _teacher_flat(teacher, batch), batch, 1.0, False)[2]


def distill(student_in: AdaptedModel, teacher: ProxyEnsemble, public: Sequence[tuple],
            config: DistillConfig, rng: np.random.Generator,
            cache: ProxyTeacher | None = None) -> LoraAdapter:
    """Run ``kd_iterations`` optimizer steps on seeded mini-batches of ``public``.

    ``public`` is the distillation set (already subsampled to ``kd_data_size``).
    Mini-batches walk seeded permutations of it.  Returns the updated adapter;
    ``student_in`` and the teacher are left untouched.
    """
    if not public:
        raise ConfigurationError("public distillation set is empty")
    if config.kd_iterations == 0 or config.kd_lr == 0:
        return student_in.adapter
    t_logits = cache.logits(teacher) if cache is not None else None
    n = len(public)
    bs = min(config.kd_batch_size, n)
    opt = make_optimizer(config.optimizer)
    adapter = student_in.adapter
    tensors = adapter.tensors()
    order, pos = rng.permutation(n), 0
    for _ in range(config.kd_iterations):
        if pos + bs > n:
            order, pos = rng.permutation(n), 0
        idx = np.sort(order[pos:pos + bs])
        pos += bs
        batch = [public[i] for i in idx]
        teach = [t_logits[i] for i in idx] if t_logits is not None else teacher
        student = student_in.with_adapter(adapter)
        _, grads = kd_loss_and_grad(student, teach, batch, config.lam)
        tensors = apply_step(opt, tensors, grads, config.kd_lr)
        adapter = LoraAdapter.from_tensors(adapter.rank, adapter.targets, tensors)
    return adapter


def kd_gradient_check(student: AdaptedModel, teacher, batch: Sequence[tuple], lam: float,
                      h: float = 1e-4, tol: float = 1e-4, max_coords: int | None = None,
                      seed: int = 0, floor: float = 1e-6) -> dict:
    """Compare the analytic KD gradient with central differences on adapter entries.

    Relative error is ``|fd - analytic| / max(|fd|, |analytic|, floor)``; the floor
    keeps exactly-zero coordinates (e.g. ``A`` while ``B`` is still zero) from
    dividing finite-difference round-off by nothing.
    """
    t_flat = _teacher_flat(teacher, batch)
    _, _, _, grads = _terms(student, t_flat, batch, lam, True)
    coords = [(k, idx) for k, g in grads.items() for idx in np.ndindex(g.shape)]
    if max_coords is not None and len(coords) > max_coords:
        pick = np.random.default_rng(seed).choice(len(coords), max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]
    base = student.adapter.tensors()
    worst = 0.0
    for name, idx in coords:
        vals = []
        for sign in (1.0, -1.0):
            t = dict(base)
            t[name] = base[name].copy()
            t[name][idx] += sign * h
            ad = LoraAdapter.from_tensors(student.adapter.rank, student.adapter.targets, t)
            vals.append(_terms(student.with_adapter(ad), t_flat, batch, lam, False)[0])
        fd = (vals[0] - vals[1]) / (2 * h)
        an = grads[name][idx]
        err = abs(fd - an) / max(abs(fd), abs(an), floor)
        worst = max(worst, err)
    return {"coords": len(coords), "max_rel_error": worst, "tolerance": tol, "passed": worst <= tol,
            "lam": lam}


