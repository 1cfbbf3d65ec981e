"""Attention first, masks second, split translation third.

Stage 1 translates SOURCE and TARGET into the object-free INTERMEDIATE domain
through attention composition; where the attention fires is where objects must
go. Those maps become frozen binary masks, and stage 2 trains freshly
initialized split discriminators with them. No ground truth is used.
"""
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from attnsplit.config import MaskDerivationConfig, TrainConfig
from attnsplit.data_synth import DatasetSpec, Domain, build_dataset
from attnsplit.evaluation import summarize
from attnsplit.pipeline import attention_scores, held_out_spec, preservation_score
from attnsplit.training import attention_maps, derive_masks, save_masks, stage1_train, stage2_train

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 1500
out = Path("demo_output")
out.mkdir(exist_ok=True)

spec = DatasetSpec()
data = build_dataset(spec)
test_spec = held_out_spec(spec, 100)
test = build_dataset(test_spec)[Domain.SOURCE]
cfg = TrainConfig(iterations=iterations)

s1 = stage1_train(data, cfg, run_dir=out / "stage1")
iou = summarize(attention_scores(s1.attention_source, test))
print(f"attention IoU on held-out SOURCE: median {iou['median']:.3f} (q1 {iou['q1']:.3f}, q3 {iou['q3']:.3f})")

masks = MaskDerivationConfig()
source_masks = derive_masks(s1.attention_source, data[Domain.SOURCE], masks)
target_masks = derive_masks(s1.attention_target, data[Domain.TARGET], masks)
save_masks(out / "masks" / "source", source_masks)
save_masks(out / "masks" / "target", target_masks)
print(f"empty source masks: {int(source_masks.empty.sum())} of {len(source_masks.ids)}")

s2 = stage2_train(data, source_masks, target_masks, cfg, run_dir=out / "stage2")
print(f"stage-2 object preservation: {preservation_score(s2.pair.g_xy, test, test_spec):.3f}")

rows = [i for i in range(len(test)) if test.labels[i].any()][:6]
maps = attention_maps(s1.attention_source, test.images[rows])
fig, axes = plt.subplots(3, len(rows), figsize=(1.6 * len(rows), 5))
for c, i in enumerate(rows):
    axes[0, c].imshow(test.images[i].transpose(1, 2, 0), interpolation="nearest")
    axes[1, c].imshow(test.labels[i], cmap="gray", interpolation="nearest")
    axes[2, c].imshow(maps[c], vmin=0, vmax=1, interpolation="nearest")
for ax in axes.flat:
    ax.axis("off")
for r, title in enumerate(("source", "ground truth", "attention")):
    axes[r, 0].set_title(title, fontsize=8, loc="left")
fig.tight_layout()
fig.savefig(out / "attention_maps.png")
print("wrote", out / "attention_maps.png")
