"""Desk-scale end-to-end run: pretrain both bases, train every mode, compare on test.

    python3 demos/desk_scale.py [out_dir]

Same steps as the command line::

    fedpt pretrain --out OUT
    fedpt run --out OUT --mode fedpt --rounds 10      (and the other modes)
    fedpt eval --out OUT --mode fedpt --rounds 10

Takes roughly half an hour on one CPU core; most of it is pretraining.
"""

import sys
import time

from fedpt.config import ExperimentConfig
from fedpt.experiment import cmd_eval, cmd_pretrain, cmd_run, format_report

out = sys.argv[1] if len(sys.argv) > 1 else "fedpt-desk"
base = ExperimentConfig(seed=0).with_overrides(rounds=10)

t = time.time()
pre = cmd_pretrain(base, out)
print(f"pretrained in {time.time() - t:.0f}s; held-out loss small {pre.small_loss:.3f}, "
      f"large {pre.large_loss:.3f}")

scores = {}
for mode in ("fedavg-small", "fedavg-plus-pt", "fedpt"):
    t = time.time()
    manifest = cmd_run(base.with_overrides(mode=mode), out)
    res = cmd_eval(manifest)
    print(f"\n{mode} ({time.time() - t:.0f}s)\n{format_report(res)}")
    for (name, alpha), rep in res.reports.items():
        scores.setdefault(name, rep.rouge_l)

print("\nRouge-L x100 on the test split")
# the first small-tuned score comes from the fedavg-small run
for name, label in (("base", "large base"), ("small-tuned", "fedavg-small"),
                    ("fedavg-plus-pt", "fedavg+pt"), ("fedpt", "fedpt")):
    if name in scores:
        print(f"  {label:<16}{100 * scores[name]:6.2f}")
