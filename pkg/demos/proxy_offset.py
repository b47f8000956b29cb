"""What the proxy adds to the large model's logits, step by step.

Builds two random small/large models, shows that a fresh adapter leaves the
large model untouched, then trains the adapter on a handful of examples and
prints how the proxy's next-token distribution moves toward the tuned model.
"""

import numpy as np

from fedpt.adapter import AdaptedModel, new_adapter
from fedpt.data import generate_corpus
from fedpt.federation import DeviceState, local_update
from fedpt.model import ModelConfig, forward_logits, init_params, softmax
from fedpt.proxy import ProxyEnsemble, proxy_logits

small = init_params(ModelConfig(layers=1, width=32, heads=2), 0)
large = init_params(ModelConfig(layers=2, width=48, heads=4), 1)
corpus = generate_corpus(0, {"train": 24, "test": 2, "public": 1})
prompt, target = corpus.encoded(0)

fresh = AdaptedModel(small, new_adapter(small.config, 2, 0))
same = np.array_equal(proxy_logits(ProxyEnsemble(large, small, fresh, 1.5), prompt),
                      forward_logits(large, prompt))
print("fresh adapter, proxy == large base bitwise:", same)

train = [corpus.encoded(int(i)) for i in corpus.indices("train")]
device = DeviceState(0, corpus.indices("train"), train)
adapter, loss = local_update(small, fresh.adapter, device, epochs=40, lr=1e-1,
                             rng=np.random.default_rng(0), batch_size=8)
print(f"local training loss after 40 epochs: {loss:.3f} (untrained bases, so still high)")

tuned = AdaptedModel(small, adapter)
nxt = target[0]
for alpha in (0.0, 0.5, 1.0, 1.5, 2.0):
    p = softmax(proxy_logits(ProxyEnsemble(large, small, tuned, alpha), prompt)[-1])
    print(f"alpha {alpha:>3}: p(first response byte {chr(nxt)!r}) = {p[nxt]:.4f}")
