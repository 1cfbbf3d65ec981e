"""End-to-end helpers shared by the command line, the demos and the acceptance suite.

Held-out data is rendered from the training spec with a shifted seed, so no
held-out scene ever appears in training.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .config import Config, EvalConfig
from .data_synth import Dataset, DatasetSpec, Domain, build_dataset, empty_backgrounds
from .evaluation import (
    attention_iou,
    detector_ap,
    make_report,
    mean_preservation,
    summarize,
    train_toy_detector,
)
from .networks import Generator
from .training import (
    DerivedMasks,
    Stage1Result,
    TrainResult,
    annotation_split_train,
    attention_maps,
    baseline_train,
    derive_masks,
    stage1_train,
    stage2_train,
    translate,
)

HELD_OUT_OFFSET = 100_003
EVAL_SETS = ("full", "size-filtered")


def held_out_spec(spec: DatasetSpec, n: int) -> DatasetSpec:
    return dataclasses.replace(spec, seed=spec.seed + HELD_OUT_OFFSET, n_source=n, n_target=n, n_intermediate=1)


def held_out(spec: DatasetSpec, n: int) -> dict[Domain, Dataset]:
    return build_dataset(held_out_spec(spec, n))


def preservation_score(generator: Generator, source: Dataset, spec: DatasetSpec) -> float:
    """Mean object preservation of ``generator`` over the object-bearing samples of ``source``.

    ``spec`` must be the spec ``source`` was rendered from; it drives the
    empty-background re-render.
    """
    translated = translate(generator, source.images)
    return mean_preservation(source.images, translated, empty_backgrounds(source, spec), source.labels)


def attention_scores(attention: Generator, source: Dataset, threshold: float = 0.5) -> list[float]:
    maps = attention_maps(attention, source.images)
    return [attention_iou(a, m, threshold) for a, m in zip(maps, source.labels)]


def detector_grid(train_sets: dict[str, tuple[np.ndarray, np.ndarray]], eval_set: Dataset,
                  cfg: EvalConfig, seed: int = 0) -> dict[str, dict[str, float]]:
    """Train one detector per training set and score it on ``eval_set``, full and size-filtered."""
    grid = {}
    for name, (images, labels) in train_sets.items():
        det = train_toy_detector(images, labels, cfg, seed)
        grid[name] = {
            "full": detector_ap(det, eval_set.images, eval_set.labels, 0, cfg.iou_threshold).ap,
            "size-filtered": detector_ap(det, eval_set.images, eval_set.labels, cfg.min_object_size,
                                         cfg.iou_threshold).ap,
        }
    return grid


@dataclass
class PipelineRun:
    """Everything one seed of the full comparison produces."""

    seed: int
    baseline: TrainResult
    stage1: Stage1Result
    masks: tuple[DerivedMasks, DerivedMasks]
    stage2: TrainResult
    direct_stage1: Stage1Result | None = None
    annotation: TrainResult | None = None
    metrics: dict = field(default_factory=dict)


def run_pipeline(cfg: Config, seed: int, direct: bool = True, annotation: bool = False) -> PipelineRun:
    """Train every arm for one seed and measure preservation, attention IoU and detector AP."""
    spec = dataclasses.replace(cfg.data, seed=seed)
    train_cfg = dataclasses.replace(cfg.train, seed=seed)
    data = build_dataset(spec)
    test_spec = held_out_spec(spec, cfg.eval.n_eval)
    test = build_dataset(test_spec)

    base = baseline_train(data, train_cfg)
    s1 = stage1_train(data, train_cfg)
    masks = (derive_masks(s1.attention_source, data[Domain.SOURCE], cfg.masks),
             derive_masks(s1.attention_target, data[Domain.TARGET], cfg.masks))
    s2 = stage2_train(data, *masks, train_cfg)
    run = PipelineRun(seed, base, s1, masks, s2)

    src_test = test[Domain.SOURCE]
    m = run.metrics
    m["preservation"] = {"baseline": preservation_score(base.pair.g_xy, src_test, test_spec),
                         "stage2": preservation_score(s2.pair.g_xy, src_test, test_spec)}
    m["attention_iou"] = {"intermediate": summarize(attention_scores(s1.attention_source, src_test,
                                                                     cfg.eval.attention_threshold))}
    if direct:
        run.direct_stage1 = stage1_train(data, dataclasses.replace(train_cfg, stage1_routing="direct"),
                                         sides=("source",))
        m["attention_iou"]["direct"] = summarize(attention_scores(run.direct_stage1.attention_source, src_test,
                                                                  cfg.eval.attention_threshold))
    if annotation:
        run.annotation = annotation_split_train(data, train_cfg)
        m["preservation"]["annotation_split"] = preservation_score(run.annotation.pair.g_xy, src_test, test_spec)

    src, tgt = data[Domain.SOURCE], data[Domain.TARGET]
    train_sets = {
        "target": (tgt.images, tgt.labels),
        "augmented": (src.images, src.labels),
        "adapted": (translate(s2.pair.g_xy, src.images), src.labels),
    }
    m["detector_ap"] = detector_grid(train_sets, test[Domain.TARGET], cfg.eval, seed)
    return run


def report_from_runs(runs: list[PipelineRun], **extras):
    """Average the per-seed metrics into one report."""
    grid: dict[str, dict[str, float]] = {}
    for train_set in ("target", "augmented", "adapted"):
        grid[train_set] = {e: float(np.mean([r.metrics["detector_ap"][train_set][e] for r in runs]))
                           for e in EVAL_SETS}
    preservation = {k: float(np.mean([r.metrics["preservation"][k] for r in runs]))
                    for k in runs[0].metrics["preservation"]}
    iou = {k: float(np.mean([r.metrics["attention_iou"][k]["median"] for r in runs]))
           for k in runs[0].metrics["attention_iou"]}
    return make_report(grid, preservation=preservation, attention_iou=iou, **extras)
