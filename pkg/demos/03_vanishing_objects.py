"""The vanishing-object pathology and the annotation split that cures it.

An unsplit cycle translator sees eight times more object pixels in SOURCE than
in TARGET and learns to paint objects over. Giving objects and background
their own discriminators removes that incentive. Pass an iteration count to
shorten the run (default 1500 per arm, a few minutes each on one core).
"""
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from attnsplit.config import TrainConfig
from attnsplit.data_synth import DatasetSpec, Domain, build_dataset
from attnsplit.pipeline import held_out_spec, preservation_score
from attnsplit.training import annotation_split_train, baseline_train, translate

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 1500
out = Path("demo_output")
out.mkdir(exist_ok=True)

spec = DatasetSpec()
data = build_dataset(spec)
test_spec = held_out_spec(spec, 100)
test = build_dataset(test_spec)[Domain.SOURCE]
cfg = TrainConfig(iterations=iterations)

base = baseline_train(data, cfg)
split = annotation_split_train(data, cfg)

for name, res in (("baseline", base), ("annotation split", split)):
    print(f"{name:>17}: object preservation {preservation_score(res.pair.g_xy, test, test_spec):.3f}")

# held-out scenes with objects, side by side
rows = [i for i in range(len(test)) if test.labels[i].any()][:6]
panels = {"source": test.images[rows], "baseline": translate(base.pair.g_xy, test.images[rows]),
          "split": translate(split.pair.g_xy, test.images[rows])}
fig, axes = plt.subplots(3, len(rows), figsize=(1.6 * len(rows), 5))
for r, (title, imgs) in enumerate(panels.items()):
    for c, img in enumerate(imgs):
        axes[r, c].imshow(np.clip(img.transpose(1, 2, 0), 0, 1), interpolation="nearest")
        axes[r, c].axis("off")
    axes[r, 0].set_title(title, fontsize=8, loc="left")
fig.tight_layout()
fig.savefig(out / "vanishing_objects.png")
print("wrote", out / "vanishing_objects.png")
