"""Distillation on a toy ensemble: KL to the teacher before and after each round of KD."""

import numpy as np

from fedpt.adapter import AdaptedModel, LoraAdapter, new_adapter
from fedpt.distill import DistillConfig, distill, mean_token_kl
from fedpt.data import generate_corpus
from fedpt.model import ModelConfig, init_params
from fedpt.proxy import ProxyEnsemble

small = init_params(ModelConfig(layers=1, width=32, heads=2), 0)
large = init_params(ModelConfig(layers=2, width=48, heads=4), 1)
rng = np.random.default_rng(0)
a = new_adapter(small.config, 2, 0)
tuned = LoraAdapter(2, {n: (A, rng.normal(0, 4.0, B.shape)) for n, (A, B) in a.factors.items()})
teacher = ProxyEnsemble(large, small, AdaptedModel(small, tuned), alpha=1.5)

corpus = generate_corpus(0, {"train": 1, "public": 160})
public = [corpus.encoded(int(i)) for i in corpus.indices("public")]
kd_set, held = public[:128], public[128:]

student = AdaptedModel(small, new_adapter(small.config, 2, 1))
cfg = DistillConfig(lam=1.0, kd_iterations=16, kd_lr=3e-2)
print(f"round 0: held-out KL {mean_token_kl(student, teacher, held):.4f}")
for t in range(1, 6):
    student = student.with_adapter(distill(student, teacher, kd_set, cfg,
                                           np.random.default_rng(t)))
    print(f"round {t}: held-out KL {mean_token_kl(student, teacher, held):.4f}")
