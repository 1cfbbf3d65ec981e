"""Metrics for vanishing objects, attention alignment and downstream detection."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .config import EvalConfig
from .data_synth import Dataset
from .networks import init_weights

_EIGHT = np.ones((3, 3), bool)


def _plain(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    if hasattr(x, "pixels"):
        x = x.pixels
    if hasattr(x, "mask"):
        x = x.mask
    if hasattr(x, "values") and not isinstance(x, np.ndarray):
        x = x.values
    return np.asarray(x, dtype=np.float64)


def object_preservation(original, translated, background, mask) -> float:
    """How much of an in-painted object survives translation, in [0, 1].

    ``background`` is the same scene re-rendered without objects. Per masked
    pixel the colour distance of the translation from that background is
    compared with the original object's distance, capped at the original, and
    the caps are pooled with the original distances as weights. An untouched or
    restyled-but-distinct object scores 1, an object painted over with
    background scores 0.
    """
    o, x, b = _plain(original), _plain(translated), _plain(background)
    m = _plain(mask).astype(bool)
    if m.ndim == 3:
        m = m[0]
    if not m.any():
        raise ValueError("object_preservation needs a nonempty object mask")
    contrast = np.linalg.norm(o - b, axis=0)[m]
    moved = np.linalg.norm(x - b, axis=0)[m]
    total = contrast.sum()
    if total == 0:
        raise ValueError("object is indistinguishable from its background")
    return float(np.clip(np.minimum(moved, contrast).sum() / total, 0.0, 1.0))


def mean_preservation(originals: np.ndarray, translated: np.ndarray, backgrounds: np.ndarray,
                      masks: np.ndarray) -> float:
    scores = [object_preservation(o, t, b, m)
              for o, t, b, m in zip(originals, translated, backgrounds, masks) if m.any()]
    return float(np.mean(scores)) if scores else float("nan")


def attention_iou(attention, gt_mask, threshold: float = 0.5) -> float:
    a = _plain(attention)
    if a.ndim == 3:
        a = a[0]
    g = _plain(gt_mask).astype(bool)
    if a.shape != g.shape:
        raise ValueError(f"attention {a.shape} and mask {g.shape} differ")
    pred = a > threshold
    union = np.logical_or(pred, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, g).sum() / union)


# -- detection ----------------------------------------------------------------


def boxes_from_mask(mask: np.ndarray) -> list[tuple[int, int, int, int]]:
    """Inclusive ``(y0, x0, y1, x1)`` boxes of the 8-connected components."""
    regions, _ = ndimage.label(np.asarray(mask) > 0, structure=_EIGHT)
    return [(s[0].start, s[1].start, s[0].stop - 1, s[1].stop - 1) for s in ndimage.find_objects(regions)]


def box_iou(a, b) -> float:
    iy = min(a[2], b[2]) - max(a[0], b[0]) + 1
    ix = min(a[3], b[3]) - max(a[1], b[1]) + 1
    if iy <= 0 or ix <= 0:
        return 0.0
    inter = iy * ix
    area = lambda r: (r[2] - r[0] + 1) * (r[3] - r[1] + 1)  # noqa: E731
    return inter / (area(a) + area(b) - inter)


@dataclass
class Detection:
    image: int
    box: tuple[int, int, int, int]
    score: float


@dataclass
class APResult:
    ap: float
    n_gt: int
    n_detections: int
    undefined: bool = False


def average_precision(detections: Sequence[Detection], gt_boxes: Sequence[Sequence[tuple]],
                      iou_threshold: float = 0.5, min_size: int = 0) -> APResult:
    """Non-interpolated AP: precision summed at each true positive over the GT count.

    Ground-truth boxes shorter than ``min_size`` pixels are ignored; detections
    matched to them count neither as hits nor as false alarms.
    """
    ignored = [[(b[2] - b[0] + 1) < min_size for b in boxes] for boxes in gt_boxes]
    n_gt = sum(not i for img in ignored for i in img)
    if n_gt == 0:
        return APResult(0.0, 0, len(detections), undefined=True)
    taken = [np.zeros(len(b), bool) for b in gt_boxes]
    order = sorted(range(len(detections)), key=lambda k: -detections[k].score)
    tp = fp = 0
    ap = 0.0
    for k in order:
        det = detections[k]
        best, best_iou = -1, iou_threshold
        for j, gt in enumerate(gt_boxes[det.image]):
            if taken[det.image][j]:
                continue
            iou = box_iou(det.box, gt)
            if iou >= best_iou:
                best, best_iou = j, iou
        if best < 0:
            fp += 1
            continue
        taken[det.image][best] = True
        if ignored[det.image][best]:
            continue
        tp += 1
        ap += tp / (tp + fp)
    return APResult(ap / n_gt, n_gt, len(detections))


class ToyDetector(nn.Module):
    """Fully convolutional objectness map; detections are its connected blobs."""

    def __init__(self, in_channels: int = 3, filters: int = 16, layers: int = 3):
        super().__init__()
        self.arch = {"kind": "detector", "role": "detector", "in_channels": in_channels,
                     "filters": filters, "layers": layers}
        mods: list[nn.Module] = []
        ch = in_channels
        for i in range(layers):
            dilation = 1 if i == 0 else 2
            mods += [nn.Conv2d(ch, filters, 3, padding=dilation, dilation=dilation), nn.LeakyReLU(0.2)]
            ch = filters
        mods.append(nn.Conv2d(ch, 1, 1))
        self.body = nn.Sequential(*mods)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)

    def objectness(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        out = []
        with torch.no_grad():
            for start in range(0, len(images), batch_size):
                out.append(torch.sigmoid(self(torch.from_numpy(images[start:start + batch_size])))[:, 0].numpy())
        return np.concatenate(out)

    def detect(self, images: np.ndarray, threshold: float = 0.5) -> list[Detection]:
        dets = []
        for i, prob in enumerate(self.objectness(images)):
            regions, count = ndimage.label(prob > threshold, structure=_EIGHT)
            for label, sl in enumerate(ndimage.find_objects(regions), start=1):
                score = float(prob[sl][regions[sl] == label].mean())
                dets.append(Detection(i, (sl[0].start, sl[1].start, sl[0].stop - 1, sl[1].stop - 1), score))
        return dets


def train_toy_detector(images: np.ndarray, masks: np.ndarray, cfg: EvalConfig | None = None,
                       seed: int = 0) -> ToyDetector:
    """Fit per-pixel objectness with a positive-class weighted cross-entropy."""
    cfg = cfg or EvalConfig()
    masks = np.asarray(masks, np.float32)
    if not masks.any():
        raise ValueError("detector training set contains no object pixels")
    torch.use_deterministic_algorithms(True)
    gen = torch.Generator().manual_seed(int(np.random.SeedSequence([seed, 44]).generate_state(1)[0]))
    det = init_weights(ToyDetector(images.shape[1], cfg.detector_filters), gen)
    # default init is too small for a detector trained from scratch with Adam
    with torch.no_grad():
        for name, p in det.named_parameters():
            if name.endswith("weight"):
                fan_in = p[0].numel()
                p.copy_(torch.randn(p.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
    opt = torch.optim.Adam(det.parameters(), lr=cfg.detector_lr)
    pos = float(masks.mean())
    pos_weight = torch.tensor(min((1 - pos) / pos, 20.0))
    xs, ys = torch.from_numpy(np.asarray(images, np.float32)), torch.from_numpy(masks)[:, None]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 45]))
    for _ in range(cfg.detector_iterations):
        idx = rng.integers(0, len(xs), size=cfg.detector_batch_size)
        opt.zero_grad(set_to_none=True)
        loss = F.binary_cross_entropy_with_logits(det(xs[idx]), ys[idx], pos_weight=pos_weight)
        loss.backward()
        opt.step()
    return det


def detector_ap(detector: ToyDetector, images: np.ndarray, labels: np.ndarray, min_size: int = 0,
                iou_threshold: float = 0.5) -> APResult:
    gts = [boxes_from_mask(lbl) for lbl in labels]
    return average_precision(detector.detect(images), gts, iou_threshold, min_size)


# -- reporting ----------------------------------------------------------------

TRAIN_SETS = ("target", "augmented", "adapted")
TRAIN_SET_TITLES = {"target": "Target (upper bound)", "augmented": "Augmented", "adapted": "Adapted"}


@dataclass
class EvalReport:
    ap: dict[str, dict[str, float | None]]  # eval set -> training set -> AP
    ratio: dict[str, dict[str, float | None]]
    preservation: dict[str, float] = field(default_factory=dict)
    attention_iou: dict[str, float] = field(default_factory=dict)
    class_balance: dict[str, dict[str, float]] = field(default_factory=dict)
    config_hash: str = ""
    dataset_manifest_hash: str = ""
    missing: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def table(self) -> str:
        header = f"{'eval set':<14}" + "".join(f"{TRAIN_SET_TITLES[t]:>24}" for t in TRAIN_SETS)
        sub = f"{'':<14}" + "".join(f"{'AP':>12}{'ratio':>12}" for _ in TRAIN_SETS)
        rows = [header, sub]
        for ev, aps in self.ap.items():
            cells = []
            for t in TRAIN_SETS:
                ap, r = aps.get(t), self.ratio[ev].get(t)
                cells.append(f"{'--':>12}" if ap is None else f"{ap:>12.3f}")
                cells.append(f"{'--':>12}" if r is None else f"{100 * r:>11.2f}%")
            rows.append(f"{ev:<14}" + "".join(cells))
        lines = ["Detection AP by training set", *rows]
        if self.preservation:
            lines += ["", "Object preservation"] + [f"  {k:<20}{v:.3f}" for k, v in self.preservation.items()]
        if self.attention_iou:
            lines += ["", "Attention IoU"] + [f"  {k:<20}{v:.3f}" for k, v in self.attention_iou.items()]
        if self.class_balance:
            lines += ["", "Class balance (% pixels)"]
            for dom, table in self.class_balance.items():
                lines.append(f"  {dom:<14}" + "  ".join(f"{k} {v:6.2f}" for k, v in table.items()))
        if self.missing:
            lines += ["", "missing runs: " + ", ".join(self.missing)]
        return "\n".join(lines)

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "report.json").write_text(self.to_json())
        (directory / "report.txt").write_text(self.table() + "\n")
        self.plot(directory / "report.png")
        return directory

    def plot(self, path: str | Path) -> None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        evals = list(self.ap)
        fig, ax = plt.subplots(figsize=(6, 3.5))
        width = 0.8 / len(TRAIN_SETS)
        for k, t in enumerate(TRAIN_SETS):
            vals = [self.ap[e].get(t) or 0.0 for e in evals]
            ax.bar(np.arange(len(evals)) + k * width, vals, width, label=TRAIN_SET_TITLES[t])
        ax.set_xticks(np.arange(len(evals)) + width * (len(TRAIN_SETS) - 1) / 2)
        ax.set_xticklabels(evals)
        ax.set_ylabel("AP@0.5")
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(path, format="png")
        plt.close(fig)


def make_report(runs: Mapping[str, Mapping[str, float | None]], **extras) -> EvalReport:
    """Assemble the AP grid with ratios to the target-trained upper bound.

    ``runs`` maps a training-set name (``target``, ``augmented``, ``adapted``)
    to ``{eval set: AP}``. Missing training sets leave explicit gaps.
    """
    missing = [t for t in TRAIN_SETS if t not in runs]
    eval_sets: list[str] = []
    for aps in runs.values():
        eval_sets += [e for e in aps if e not in eval_sets]
    ap = {e: {t: (runs[t].get(e) if t in runs else None) for t in TRAIN_SETS} for e in eval_sets}
    ratio = {}
    for e in eval_sets:
        upper = ap[e]["target"]
        ratio[e] = {t: (None if v is None or not upper else v / upper) for t, v in ap[e].items()}
    return EvalReport(ap=ap, ratio=ratio, missing=missing, **extras)


def summarize(values: Sequence[float]) -> dict[str, float]:
    v = np.asarray(values, np.float64)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"median": float(med), "q1": float(q1), "q3": float(q3), "mean": float(v.mean())}
