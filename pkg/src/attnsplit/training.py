"""Two-stage training: attention learning, mask derivation, split-discriminator translation.

Stage 1 trains attention-composed cycle translators whose adversarial signal
shapes the attention maps. Their maps are binarized into per-sample masks,
which then gate freshly initialized class-specific discriminators in stage 2.
The same split machinery, fed ground-truth or degenerate masks, provides the
annotation-split upper bound and the unsplit baseline.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from . import checkpoint
from .config import MaskDerivationConfig, TrainConfig
from .data_synth import Dataset, Domain
from .losses import (
    LossBreakdown,
    attention_adversarial_loss,
    cyclic_loss,
    masked_adversarial_loss,
    stage1_objective,
    stage2_objective,
)
from .networks import (
    Generator,
    MaskedPatchDiscriminator,
    attention_network,
    compose_translation,
    downsample_mask,
    init_weights,
)

log = logging.getLogger(__name__)

SPLIT_CLASSES = ("object", "background")
ATTENTION_CLASSES = ("all", "none")

# distinct seed streams; stage 2 never shares initial weights with stage 1
_STREAM = {"stage1": 11, "split": 22, "batches": 33, "detector": 44}


class NonFiniteLossError(FloatingPointError):
    def __init__(self, iteration: int, record: dict, snapshot: Path | None = None):
        self.iteration, self.record, self.snapshot = iteration, record, snapshot
        where = f"; diagnostic snapshot in {snapshot}" if snapshot else ""
        super().__init__(f"non-finite loss at iteration {iteration}: {record}{where}")


def torch_generator(*keys: int) -> torch.Generator:
    seed = int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0] >> 1)
    return torch.Generator().manual_seed(seed)


class TranslationPair(torch.nn.Module):
    """Generators ``X->Y`` and ``Y->X``, optional attention networks, and per-class discriminators.

    ``d_y`` judges images in domain Y (real ``y`` against ``g_xy(x)``), ``d_x`` the
    reverse. Naming follows the source/target reading X = SOURCE, Y = TARGET.
    """

    def __init__(self, cfg: TrainConfig, seed_keys: Sequence[int], attention: bool, classes: Sequence[str]):
        super().__init__()
        gen_kw = dict(filters=cfg.generator_filters, downsamplings=cfg.generator_downsamplings,
                      res_blocks=cfg.generator_res_blocks)
        rng = torch_generator(*seed_keys)
        self.g_xy = init_weights(Generator(**gen_kw), rng)
        self.g_yx = init_weights(Generator(**gen_kw), rng)
        if attention:
            att_kw = dict(gen_kw, downsamplings=cfg.attention_downsamplings)
            self.a_x = init_weights(attention_network(**att_kw), rng)
            self.a_y = init_weights(attention_network(**att_kw), rng)
            with torch.no_grad():
                for att in (self.a_x, self.a_y):
                    att.model[-1].bias.fill_(cfg.attention_init_bias)
        else:
            self.a_x = self.a_y = None
        blocks = cfg.attention_discriminator_blocks if attention else cfg.discriminator_blocks
        disc_kw = dict(filters=cfg.discriminator_filters, blocks=blocks)
        self.d_y = torch.nn.ModuleDict({c: init_weights(MaskedPatchDiscriminator(**disc_kw), rng) for c in classes})
        self.d_x = torch.nn.ModuleDict({c: init_weights(MaskedPatchDiscriminator(**disc_kw), rng) for c in classes})
        self.classes = tuple(classes)

    def generator_modules(self) -> list[torch.nn.Module]:
        mods = [self.g_xy, self.g_yx]
        if self.a_x is not None:
            mods += [self.a_x, self.a_y]
        return mods

    def discriminator_modules(self) -> list[torch.nn.Module]:
        return [*self.d_y.values(), *self.d_x.values()]

    def named_networks(self) -> dict[str, torch.nn.Module]:
        nets = {"G_xy": self.g_xy, "G_yx": self.g_yx}
        if self.a_x is not None:
            nets.update(A_x=self.a_x, A_y=self.a_y)
        nets.update({f"D_y_{c}": d for c, d in self.d_y.items()})
        nets.update({f"D_x_{c}": d for c, d in self.d_x.items()})
        return nets


@dataclass
class Optimizers:
    generator: torch.optim.Adam
    discriminator: torch.optim.Adam

    @classmethod
    def for_pair(cls, pair: TranslationPair, cfg: TrainConfig) -> "Optimizers":
        betas = (cfg.beta1, cfg.beta2)
        g_params = [p for m in pair.generator_modules() for p in m.parameters()]
        d_params = [p for m in pair.discriminator_modules() for p in m.parameters()]
        return cls(torch.optim.Adam(g_params, lr=cfg.lr, betas=betas),
                   torch.optim.Adam(d_params, lr=cfg.lr, betas=betas))


@dataclass
class Minibatch:
    x: torch.Tensor
    y: torch.Tensor
    mask_x: torch.Tensor | None = None  # object-class mask for x, (N, 1, H, W)
    mask_y: torch.Tensor | None = None


@dataclass
class TrainResult:
    pair: TranslationPair
    optimizers: Optimizers
    history: list[dict] = field(default_factory=list)


def _set_requires_grad(modules, flag: bool) -> None:
    for m in modules:
        for p in m.parameters():
            p.requires_grad_(flag)


def _gate(mask: torch.Tensor, cls: str) -> torch.Tensor:
    """Input-resolution mask seen by the discriminator of class ``cls``."""
    if cls in ("object", "all"):
        return mask
    if cls == "background":
        return 1.0 - mask
    return torch.zeros_like(mask)


def _attention_translate(gen, att, image):
    return compose_translation(image, gen(image), att(image)[:, 0])


def _translations(pair: TranslationPair, batch: Minibatch) -> tuple[torch.Tensor, torch.Tensor]:
    if pair.a_x is None:
        return pair.g_xy(batch.x), pair.g_yx(batch.y)
    return (_attention_translate(pair.g_xy, pair.a_x, batch.x),
            _attention_translate(pair.g_yx, pair.a_y, batch.y))


def _reconstructions(pair: TranslationPair, fake_y: torch.Tensor, fake_x: torch.Tensor):
    if pair.a_x is None:
        return pair.g_yx(fake_y), pair.g_xy(fake_x)
    return (_attention_translate(pair.g_yx, pair.a_y, fake_y),
            _attention_translate(pair.g_xy, pair.a_x, fake_x))


def _masks(batch: Minibatch) -> tuple[torch.Tensor, torch.Tensor]:
    mx = batch.mask_x if batch.mask_x is not None else torch.ones_like(batch.x[:, :1])
    my = batch.mask_y if batch.mask_y is not None else torch.ones_like(batch.y[:, :1])
    return mx, my


def _adversarial_terms(pair: TranslationPair, batch: Minibatch, fake_y, fake_x, side: str):
    """Per-class adversarial terms for both directions, discriminator or generator side."""
    mx, my = _masks(batch)
    attention = pair.a_x is not None
    src, tgt = {}, {}
    for c in pair.classes:
        for disc, real, fake, m_real, m_fake, out in (
            (pair.d_y[c], batch.y, fake_y, my, mx, src),
            (pair.d_x[c], batch.x, fake_x, mx, my, tgt),
        ):
            mr, mf = _gate(m_real, c), _gate(m_fake, c)
            n = disc.patch_size(*real.shape[-2:])
            mf_n = downsample_mask(mf, n)
            if side == "discriminator":
                real_patch, fake_patch = disc(real, mr), disc(fake.detach(), mf)
            else:
                fake_patch = disc(fake, mf)
                real_patch = fake_patch.detach()  # the generator term ignores the real side
            if attention:
                terms = attention_adversarial_loss(real_patch, fake_patch, mf_n)
            else:
                terms = masked_adversarial_loss(real_patch, fake_patch, downsample_mask(mr, n), mf_n)
            out[c] = terms.discriminator if side == "discriminator" else terms.generator
    return src, tgt


def _objective(pair: TranslationPair):
    return stage1_objective if pair.a_x is not None else stage2_objective


def discriminator_objective(pair: TranslationPair, batch: Minibatch, fake_y, fake_x,
                            lambda_cyc: float = 10.0) -> LossBreakdown:
    src, tgt = _adversarial_terms(pair, batch, fake_y, fake_x, "discriminator")
    return _objective(pair)(src, tgt, 0.0, 0.0, lambda_cyc)


def generator_objective(pair: TranslationPair, batch: Minibatch, lambda_cyc: float = 10.0,
                        translations=None) -> LossBreakdown:
    """Generator-side objective (adversarial flip plus weighted cycle terms) on ``batch``."""
    fake_y, fake_x = translations if translations is not None else _translations(pair, batch)
    src, tgt = _adversarial_terms(pair, batch, fake_y, fake_x, "generator")
    rec_x, rec_y = _reconstructions(pair, fake_y, fake_x)
    return _objective(pair)(src, tgt, cyclic_loss(batch.x, rec_x), cyclic_loss(batch.y, rec_y), lambda_cyc)


def alternating_update(pair: TranslationPair, optimizers: Optimizers, batch: Minibatch,
                       lambda_cyc: float = 10.0) -> tuple[LossBreakdown, LossBreakdown]:
    """One discriminator ascent step followed by one generator descent step.

    Attention pairs judge the composed translation with a whole-image and an
    empty discriminator; split pairs gate each class discriminator with its
    mask. Returns the discriminator-side and generator-side breakdowns, each
    evaluated before its own step.
    """
    fake_y, fake_x = _translations(pair, batch)

    _set_requires_grad(pair.discriminator_modules(), True)
    optimizers.discriminator.zero_grad(set_to_none=True)
    d_loss = discriminator_objective(pair, batch, fake_y, fake_x, lambda_cyc)
    if isinstance(d_loss.total, torch.Tensor) and d_loss.total.requires_grad:
        d_loss.total.backward()
        _check_gradients(pair.discriminator_modules())
        optimizers.discriminator.step()

    _set_requires_grad(pair.discriminator_modules(), False)
    try:
        optimizers.generator.zero_grad(set_to_none=True)
        g_loss = generator_objective(pair, batch, lambda_cyc, (fake_y, fake_x))
        g_loss.total.backward()
        _check_gradients(pair.generator_modules())
        optimizers.generator.step()
    finally:
        _set_requires_grad(pair.discriminator_modules(), True)
    return d_loss, g_loss


def _check_gradients(modules) -> None:
    for m in modules:
        for p in m.parameters():
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NonFiniteLossError(-1, {"reason": "non-finite gradient"})


# -- run directories ----------------------------------------------------------


class RunLogger:
    """Appends one JSON record per iteration and writes checkpoints and snapshots."""

    def __init__(self, run_dir: str | Path | None, cfg: TrainConfig, name: str):
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.cfg, self.name = cfg, name
        self._fh = None
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.run_dir / f"losses_{name}.jsonl", "a")

    def record(self, iteration: int, d_loss: LossBreakdown, g_loss: LossBreakdown) -> dict:
        rec = {"stage": self.name, "iteration": iteration, "time": time.time(),
               "discriminator": d_loss.as_record(), "generator": g_loss.as_record()}
        if self._fh is not None:
            self._fh.write(json.dumps(rec) + "\n")
        return rec

    def maybe_checkpoint(self, iteration: int, result: TrainResult, final: bool = False) -> None:
        every = self.cfg.checkpoint_every
        if self.run_dir is None or not (final or (every and iteration % every == 0)):
            return
        tag = "final" if final else f"iter_{iteration:06d}"
        save_pair(self.run_dir / "checkpoints" / self.name / tag, result.pair, result.optimizers)

    def maybe_snapshot(self, iteration: int, pair: TranslationPair, images: torch.Tensor) -> None:
        every = self.cfg.snapshot_every
        if self.run_dir is None or pair.a_x is None or not every or iteration % every:
            return
        out = self.run_dir / "attention" / self.name
        out.mkdir(parents=True, exist_ok=True)
        with torch.no_grad():
            maps = pair.a_x(images)[:, 0].numpy()
        for i, amap in enumerate(maps):
            save_gray(out / f"iter_{iteration:06d}_{i}.png", amap)

    def failure(self, iteration: int, rec: dict, result: TrainResult) -> NonFiniteLossError:
        snap = None
        if self.run_dir is not None:
            snap = self.run_dir / "failure" / self.name
            save_pair(snap, result.pair, result.optimizers)
            (snap / "record.json").write_text(json.dumps(rec, default=str))
        return NonFiniteLossError(iteration, rec, snap)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def save_gray(path: Path, values: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(values, 0, 1) * 255).astype(np.uint8), mode="L").save(path)


def save_pair(directory: str | Path, pair: TranslationPair, optimizers: Optimizers | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, net in pair.named_networks().items():
        checkpoint.save_network(directory / f"{name}.npz", net)
    if optimizers is not None:
        checkpoint.save_optimizer(directory / "optim_generator.npz", optimizers.generator)
        checkpoint.save_optimizer(directory / "optim_discriminator.npz", optimizers.discriminator)
    return directory


def load_pair(directory: str | Path, pair: TranslationPair, optimizers: Optimizers | None = None) -> TranslationPair:
    directory = Path(directory)
    for name, net in pair.named_networks().items():
        checkpoint.load_network(directory / f"{name}.npz", net)
    if optimizers is not None:
        checkpoint.load_optimizer(directory / "optim_generator.npz", optimizers.generator)
        checkpoint.load_optimizer(directory / "optim_discriminator.npz", optimizers.discriminator)
    return pair


# -- training loops -----------------------------------------------------------


def _sampler(cfg: TrainConfig, stream: str, n_x: int, n_y: int) -> Callable[[], tuple[np.ndarray, np.ndarray]]:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _STREAM["batches"], _STREAM[stream]]))
    m = cfg.batch_size

    def draw():
        return rng.integers(0, n_x, size=m), rng.integers(0, n_y, size=m)

    return draw


def _run(pair: TranslationPair, cfg: TrainConfig, draw, make_batch, logger: RunLogger,
         snapshot_images: torch.Tensor | None = None) -> TrainResult:
    torch.use_deterministic_algorithms(True)
    result = TrainResult(pair, Optimizers.for_pair(pair, cfg))
    try:
        for it in range(1, cfg.iterations + 1):
            batch = make_batch(*draw())
            try:
                d_loss, g_loss = alternating_update(pair, result.optimizers, batch, cfg.lambda_cyc)
            except NonFiniteLossError as exc:
                raise logger.failure(it, exc.record, result) from exc
            rec = logger.record(it, d_loss, g_loss)
            result.history.append(rec)
            if not (d_loss.is_finite() and g_loss.is_finite()):
                raise logger.failure(it, rec, result)
            logger.maybe_checkpoint(it, result)
            if snapshot_images is not None:
                logger.maybe_snapshot(it, pair, snapshot_images)
        logger.maybe_checkpoint(cfg.iterations, result, final=True)
    finally:
        logger.close()
    return result


def train_attention_pair(x_data: Dataset, y_data: Dataset, cfg: TrainConfig,
                         run_dir: str | Path | None = None, name: str | None = None) -> TrainResult:
    """Train an attention-composed cycle translator between two domains."""
    codes = {Domain.SOURCE: 0, Domain.TARGET: 1, Domain.INTERMEDIATE: 2}
    name = name or f"stage1_{x_data.domain.value}_{y_data.domain.value}"
    pair = TranslationPair(cfg, [cfg.seed, _STREAM["stage1"], codes[x_data.domain], codes[y_data.domain]],
                           attention=True, classes=ATTENTION_CLASSES)
    xs, ys = torch.from_numpy(x_data.images), torch.from_numpy(y_data.images)

    def make_batch(ix, iy):
        return Minibatch(xs[ix], ys[iy])

    return _run(pair, cfg, _sampler(cfg, "stage1", len(x_data), len(y_data)), make_batch,
                RunLogger(run_dir, cfg, name), snapshot_images=xs[:4])


@dataclass
class Stage1Result:
    attention_source: Generator
    attention_target: Generator | None
    pairs: dict[str, TrainResult]


def stage1_train(datasets: dict[Domain, Dataset], cfg: TrainConfig, run_dir: str | Path | None = None,
                 sides: Sequence[str] = ("source", "target")) -> Stage1Result:
    """Learn attention networks for SOURCE and TARGET images.

    With ``intermediate`` routing each of SOURCE and TARGET is paired with the
    object-free INTERMEDIATE domain; with ``direct`` routing SOURCE is paired with
    TARGET. ``sides`` restricts which attention networks are trained.
    """
    pairs: dict[str, TrainResult] = {}
    if cfg.stage1_routing == "direct":
        res = train_attention_pair(datasets[Domain.SOURCE], datasets[Domain.TARGET], cfg, run_dir)
        pairs["source_target"] = res
        return Stage1Result(res.pair.a_x, res.pair.a_y, pairs)
    inter = datasets.get(Domain.INTERMEDIATE)
    if inter is None or len(inter) == 0:
        raise ValueError("intermediate routing needs a nonempty INTERMEDIATE dataset")
    a_s = a_t = None
    if "source" in sides:
        pairs["source_intermediate"] = train_attention_pair(datasets[Domain.SOURCE], inter, cfg, run_dir)
        a_s = pairs["source_intermediate"].pair.a_x
    if "target" in sides:
        pairs["target_intermediate"] = train_attention_pair(datasets[Domain.TARGET], inter, cfg, run_dir)
        a_t = pairs["target_intermediate"].pair.a_x
    return Stage1Result(a_s, a_t, pairs)


@dataclass
class DerivedMasks:
    masks: np.ndarray  # (N, H, W) uint8
    ids: list[str]
    empty: np.ndarray  # (N,) bool, True where no pixel exceeded the threshold


def attention_maps(attention: Generator, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            out.append(attention(torch.from_numpy(images[start:start + batch_size]))[:, 0].numpy())
    return np.concatenate(out) if out else np.empty((0,) + images.shape[-2:], np.float32)


def mask_from_attention(attention_map: np.ndarray, cfg: MaskDerivationConfig) -> tuple[np.ndarray, bool]:
    """Threshold, dilate and drop small regions; returns (mask, empty flag)."""
    binary = np.asarray(attention_map) > cfg.threshold
    empty = not binary.any()
    if cfg.dilation > 0 and not empty:
        size = 2 * cfg.dilation + 1
        binary = ndimage.binary_dilation(binary, structure=np.ones((size, size), bool))
    if cfg.min_area > 0 and not empty:
        regions, count = ndimage.label(binary, structure=np.ones((3, 3)))
        areas = ndimage.sum_labels(binary, regions, index=np.arange(1, count + 1))
        keep = np.zeros(count + 1, bool)
        keep[1:] = areas >= cfg.min_area
        binary = keep[regions]
    return binary.astype(np.uint8), empty


def derive_masks(attention: Generator, dataset: Dataset, cfg: MaskDerivationConfig) -> DerivedMasks:
    if len(dataset) == 0:
        raise ValueError("derive_masks needs a nonempty dataset")
    maps = attention_maps(attention, dataset.images)
    masks, empty = zip(*(mask_from_attention(a, cfg) for a in maps))
    return DerivedMasks(np.stack(masks), list(dataset.ids), np.array(empty))


def save_masks(directory: str | Path, derived: DerivedMasks) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for sample_id, mask in zip(derived.ids, derived.masks):
        Image.fromarray(mask * 255, mode="L").save(directory / f"{sample_id}.png")
    (directory / "index.json").write_text(json.dumps(
        {"ids": derived.ids, "empty": [bool(e) for e in derived.empty]}, indent=1))
    return directory


def load_masks(directory: str | Path) -> DerivedMasks:
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text())
    masks = np.stack([(np.asarray(Image.open(directory / f"{i}.png")) > 127).astype(np.uint8) for i in index["ids"]])
    return DerivedMasks(masks, index["ids"], np.array(index["empty"], bool))


def _as_masks(masks, dataset: Dataset) -> np.ndarray:
    arr = masks.masks if isinstance(masks, DerivedMasks) else np.asarray(masks)
    if arr.shape != dataset.labels.shape:
        raise ValueError(f"need one {dataset.labels.shape[1:]} mask per sample, got {arr.shape}")
    return arr.astype(np.float32)


def split_train(source: Dataset, target: Dataset, source_masks, target_masks, cfg: TrainConfig,
                run_dir: str | Path | None = None, name: str = "stage2") -> TrainResult:
    """Cycle translation with object/background discriminator pairs gated by the given masks."""
    pair = TranslationPair(cfg, [cfg.seed, _STREAM["split"]], attention=False, classes=SPLIT_CLASSES)
    xs, ys = torch.from_numpy(source.images), torch.from_numpy(target.images)
    mxs = torch.from_numpy(_as_masks(source_masks, source))[:, None]
    mys = torch.from_numpy(_as_masks(target_masks, target))[:, None]

    def make_batch(ix, iy):
        return Minibatch(xs[ix], ys[iy], mxs[ix], mys[iy])

    return _run(pair, cfg, _sampler(cfg, "split", len(source), len(target)), make_batch,
                RunLogger(run_dir, cfg, name))


def stage2_train(datasets: dict[Domain, Dataset], source_masks, target_masks, cfg: TrainConfig,
                 run_dir: str | Path | None = None) -> TrainResult:
    """Split training with masks derived from stage-1 attention (never the attention networks)."""
    return split_train(datasets[Domain.SOURCE], datasets[Domain.TARGET], source_masks, target_masks,
                       cfg, run_dir, name="stage2")


def annotation_split_train(datasets: dict[Domain, Dataset], cfg: TrainConfig,
                           run_dir: str | Path | None = None) -> TrainResult:
    src, tgt = datasets[Domain.SOURCE], datasets[Domain.TARGET]
    return split_train(src, tgt, src.object_masks(), tgt.object_masks(), cfg, run_dir, name="annotation_split")


def baseline_train(datasets: dict[Domain, Dataset], cfg: TrainConfig,
                   run_dir: str | Path | None = None) -> TrainResult:
    """Unsplit control: the object discriminator sees everything, the background one nothing."""
    src, tgt = datasets[Domain.SOURCE], datasets[Domain.TARGET]
    ones_s = np.ones(src.labels.shape, np.uint8)
    ones_t = np.ones(tgt.labels.shape, np.uint8)
    return split_train(src, tgt, ones_s, ones_t, cfg, run_dir, name="baseline")


def translate(generator: Generator, images: np.ndarray, attention: Generator | None = None,
              batch_size: int = 32) -> np.ndarray:
    """Apply a trained generator; with ``attention`` the output is the composed blend."""
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = torch.from_numpy(images[start:start + batch_size])
            y = generator(x)
            if attention is not None:
                y = compose_translation(x, y, attention(x)[:, 0])
            out.append(y.numpy())
    return np.concatenate(out).astype(np.float32)
