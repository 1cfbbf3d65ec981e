"""The three toy domains.

SOURCE scenes carry many flat orange objects, TARGET scenes a few textured red
ones, and INTERMEDIATE scenes none at all. Run from anywhere; the figure lands
in ./demo_output.
"""
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from attnsplit.data_synth import DatasetSpec, Domain, build_dataset, class_balance_stats

out = Path("demo_output")
out.mkdir(exist_ok=True)

spec = DatasetSpec(n_source=200, n_target=200, n_intermediate=200)
data = build_dataset(spec)

# pixel share of the object class per domain; DatasetSpec defaults ask for roughly 8x
for domain in Domain:
    stats = class_balance_stats(data[domain])
    print(f"{domain.value:>13}: object {stats['object']:5.2f}%  background {stats['background']:6.2f}%")
src = class_balance_stats(data[Domain.SOURCE])["object"]
tgt = class_balance_stats(data[Domain.TARGET])["object"]
print(f"measured frequency ratio {src / tgt:.2f} (requested {spec.frequency_ratio:.2f})")

fig, axes = plt.subplots(3, 6, figsize=(9, 4.8))
for row, domain in enumerate(Domain):
    for col in range(6):
        ax = axes[row, col]
        ax.imshow(data[domain].images[col].transpose(1, 2, 0), interpolation="nearest")
        ax.set_xticks([])
        ax.set_yticks([])
    axes[row, 0].set_ylabel(domain.value)
fig.tight_layout()
fig.savefig(out / "toy_domains.png")
print("wrote", out / "toy_domains.png")
