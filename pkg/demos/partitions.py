"""Per-device category histograms for both partition strategies."""

from fedpt.data import CATEGORIES, generate_corpus, partition_dirichlet, partition_pathological
from fedpt.experiment import format_partition

corpus = generate_corpus(0, categories=CATEGORIES[:6])

print("pathological (two categories per device, equal shards)")
print(format_partition(partition_pathological(corpus, 10, seed=0)))
for conc in (0.5, 1e6):
    print(f"\ndirichlet, concentration {conc:g}")
    print(format_partition(partition_dirichlet(corpus, 10, conc, seed=0)))
