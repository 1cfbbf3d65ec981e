import hashlib
import json

import numpy as np
import pytest
import torch

from attnsplit import training as T
from attnsplit.config import MaskDerivationConfig, TrainConfig
from attnsplit.data_synth import DatasetSpec, Domain, build_dataset
from attnsplit.networks import parameter_digest


def tiny_cfg(**kw):
    base = dict(batch_size=2, iterations=3, generator_filters=4, generator_res_blocks=1,
                discriminator_filters=4)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    spec = DatasetSpec(n_source=6, n_target=6, n_intermediate=6, height=16, width=16,
                       min_object_size=3, max_object_size=5, max_objects=3)
    return build_dataset(spec)


def weights(module):
    return {k: v.clone() for k, v in module.state_dict().items()}


def same_weights(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def batch_from(data, n=2, masks=True):
    src, tgt = data[Domain.SOURCE], data[Domain.TARGET]
    x, y = torch.from_numpy(src.images[:n]), torch.from_numpy(tgt.images[:n])
    if not masks:
        return T.Minibatch(x, y)
    mx = torch.from_numpy(src.labels[:n, None].astype(np.float32))
    my = torch.from_numpy(tgt.labels[:n, None].astype(np.float32))
    return T.Minibatch(x, y, mx, my)


# -- stage 1 -------------------------------------------------------------------


def test_stage1_zero_iterations_keeps_initialization(tiny_data):
    cfg = tiny_cfg(iterations=0)
    res = T.stage1_train(tiny_data, cfg)
    fresh = T.TranslationPair(cfg, [cfg.seed, T._STREAM["stage1"], 0, 2], attention=True,
                              classes=T.ATTENTION_CLASSES)
    assert same_weights(weights(res.pairs["source_intermediate"].pair), weights(fresh))


def test_stage1_is_deterministic(tiny_data):
    cfg = tiny_cfg()
    a = T.stage1_train(tiny_data, cfg)
    b = T.stage1_train(tiny_data, cfg)
    for key in a.pairs:
        assert same_weights(weights(a.pairs[key].pair), weights(b.pairs[key].pair))
        assert [r["generator"] for r in a.pairs[key].history] == [r["generator"] for r in b.pairs[key].history]


def test_stage1_routes_through_intermediate(tiny_data):
    res = T.stage1_train(tiny_data, tiny_cfg(iterations=1))
    assert set(res.pairs) == {"source_intermediate", "target_intermediate"}
    assert res.attention_source is not res.attention_target
    direct = T.stage1_train(tiny_data, tiny_cfg(iterations=1, stage1_routing="direct"))
    assert set(direct.pairs) == {"source_target"}


def test_stage1_needs_intermediate(tiny_data):
    data = {k: v for k, v in tiny_data.items() if k is not Domain.INTERMEDIATE}
    with pytest.raises(ValueError):
        T.stage1_train(data, tiny_cfg())


def test_stage1_run_dir_layout(tiny_data, tmp_path):
    cfg = tiny_cfg(iterations=4, checkpoint_every=2, snapshot_every=2)
    T.stage1_train(tiny_data, cfg, tmp_path, sides=("source",))
    lines = (tmp_path / "losses_stage1_source_intermediate.jsonl").read_text().splitlines()
    assert [json.loads(line)["iteration"] for line in lines] == [1, 2, 3, 4]
    rec = json.loads(lines[0])
    assert "time" in rec and set(rec["generator"]["adv_source"]) == {"all", "none"}
    ckpt = tmp_path / "checkpoints" / "stage1_source_intermediate"
    assert sorted(p.name for p in ckpt.iterdir()) == ["final", "iter_000002", "iter_000004"]
    snaps = sorted((tmp_path / "attention" / "stage1_source_intermediate").glob("*.png"))
    assert snaps
    from PIL import Image
    assert Image.open(snaps[0]).mode == "L"


def test_empty_discriminator_never_contributes(tiny_data):
    res = T.stage1_train(tiny_data, tiny_cfg(), sides=("source",))
    for rec in res.pairs["source_intermediate"].history:
        for side in ("discriminator", "generator"):
            assert rec[side]["adv_source"]["none"] == 0.0
            assert rec[side]["adv_target"]["none"] == 0.0


# -- mask derivation ------------------------------------------------------------


def test_mask_from_saturated_attention():
    cfg = MaskDerivationConfig()
    for tau in (0.1, 0.5, 0.9):
        mask, empty = T.mask_from_attention(np.ones((8, 8)), MaskDerivationConfig(threshold=tau))
        assert mask.all() and not empty
    mask, empty = T.mask_from_attention(np.zeros((8, 8)), cfg)
    assert not mask.any() and empty


def test_mask_from_corner_attention():
    att = np.full((4, 4), 0.1)
    att[:2, :2] = 0.9
    mask, empty = T.mask_from_attention(att, MaskDerivationConfig(threshold=0.5, dilation=0, min_area=0))
    expected = np.zeros((4, 4), np.uint8)
    expected[:2, :2] = 1
    assert np.array_equal(mask, expected) and not empty


def test_mask_dilation_and_speckle_removal():
    att = np.zeros((16, 16))
    att[8, 8] = 0.9
    grown, _ = T.mask_from_attention(att, MaskDerivationConfig(dilation=2, min_area=0))
    assert grown.sum() == 25
    speck, _ = T.mask_from_attention(att, MaskDerivationConfig(dilation=0, min_area=4))
    assert not speck.any()


class ConstantAttention(torch.nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = value

    def forward(self, x):
        return torch.full_like(x[:, :1], self.value)


def test_derive_masks_keeps_ids_and_flags(tiny_data, tmp_path):
    src = tiny_data[Domain.SOURCE]
    derived = T.derive_masks(ConstantAttention(0.0), src, MaskDerivationConfig())
    assert derived.ids == src.ids and derived.empty.all()
    assert derived.masks.shape == src.labels.shape and derived.masks.dtype == np.uint8
    T.save_masks(tmp_path / "m", derived)
    back = T.load_masks(tmp_path / "m")
    assert back.ids == derived.ids and np.array_equal(back.masks, derived.masks)
    assert np.array_equal(back.empty, derived.empty)


def test_derive_masks_rejects_empty_dataset(tiny_data):
    with pytest.raises(ValueError):
        T.derive_masks(ConstantAttention(1.0), tiny_data[Domain.SOURCE].subset([]), MaskDerivationConfig())


# -- split training -------------------------------------------------------------


def test_split_training_is_deterministic(tiny_data):
    cfg = tiny_cfg()
    a = T.annotation_split_train(tiny_data, cfg)
    b = T.annotation_split_train(tiny_data, cfg)
    assert same_weights(weights(a.pair), weights(b.pair))
    assert a.history[-1]["generator"] == b.history[-1]["generator"]


def test_baseline_equals_split_with_degenerate_masks(tiny_data):
    cfg = tiny_cfg()
    base = T.baseline_train(tiny_data, cfg)
    src, tgt = tiny_data[Domain.SOURCE], tiny_data[Domain.TARGET]
    ones = T.DerivedMasks(np.ones(src.labels.shape, np.uint8), src.ids, np.zeros(len(src), bool))
    ones_t = T.DerivedMasks(np.ones(tgt.labels.shape, np.uint8), tgt.ids, np.zeros(len(tgt), bool))
    split = T.stage2_train(tiny_data, ones, ones_t, cfg)
    assert same_weights(weights(base.pair), weights(split.pair))
    strip = [{k: r[k] for k in ("discriminator", "generator")} for r in base.history]
    assert strip == [{k: r[k] for k in ("discriminator", "generator")} for r in split.history]
    # the complement discriminator is never active
    assert all(r["discriminator"]["adv_source"]["background"] == 0.0 for r in base.history)


def test_ground_truth_equals_perfect_derived_masks(tiny_data):
    cfg = tiny_cfg()
    src, tgt = tiny_data[Domain.SOURCE], tiny_data[Domain.TARGET]
    perfect = [T.DerivedMasks(d.labels.copy(), d.ids, np.zeros(len(d), bool)) for d in (src, tgt)]
    a = T.annotation_split_train(tiny_data, cfg)
    b = T.stage2_train(tiny_data, *perfect, cfg)
    assert same_weights(weights(a.pair), weights(b.pair))


def test_empty_derived_masks_silence_object_discriminator(tiny_data):
    src, tgt = tiny_data[Domain.SOURCE], tiny_data[Domain.TARGET]
    empty = [np.zeros(d.labels.shape, np.uint8) for d in (src, tgt)]
    res = T.stage2_train(tiny_data, *empty, tiny_cfg())
    for rec in res.history:
        for side in ("discriminator", "generator"):
            assert rec[side]["adv_source"]["object"] == 0.0
            assert rec[side]["adv_target"]["object"] == 0.0
        assert rec["discriminator"]["adv_source"]["background"] > 0.0


def test_split_masks_are_exact_complements():
    m = (torch.rand(3, 1, 8, 8, generator=torch.Generator().manual_seed(0)) > 0.7).float()
    p, b = T._gate(m, "object"), T._gate(m, "background")
    assert torch.equal(p + b, torch.ones_like(m))
    assert torch.equal(p * b, torch.zeros_like(m))


def test_split_rejects_wrong_mask_count(tiny_data):
    src, tgt = tiny_data[Domain.SOURCE], tiny_data[Domain.TARGET]
    with pytest.raises(ValueError):
        T.split_train(src, tgt, src.labels[:2], tgt.labels, tiny_cfg())


def test_stage2_reinitializes_generators(tiny_data):
    cfg = tiny_cfg()
    s1 = T.stage1_train(tiny_data, cfg, sides=("source",)).pairs["source_intermediate"].pair
    s2 = T.TranslationPair(cfg, [cfg.seed, T._STREAM["split"]], attention=False, classes=T.SPLIT_CLASSES)
    assert parameter_digest([s1.g_xy]) != parameter_digest([s2.g_xy])
    assert parameter_digest([s1.g_yx]) != parameter_digest([s2.g_yx])


def file_hashes(directory):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(directory.iterdir())}


def test_stage2_leaves_mask_files_untouched(tiny_data, tmp_path):
    cfg = tiny_cfg()
    att = ConstantAttention(0.8)
    dirs = []
    for side in (Domain.SOURCE, Domain.TARGET):
        derived = T.derive_masks(att, tiny_data[side], MaskDerivationConfig())
        dirs.append(T.save_masks(tmp_path / f"masks_{side.value}", derived))
    before = [file_hashes(d) for d in dirs]
    T.stage2_train(tiny_data, T.load_masks(dirs[0]), T.load_masks(dirs[1]), cfg, tmp_path / "run")
    assert [file_hashes(d) for d in dirs] == before


def test_non_finite_loss_aborts_with_snapshot(tiny_data, tmp_path):
    bad = dict(tiny_data)
    src = tiny_data[Domain.SOURCE]
    images = src.images.copy()
    images[:] = np.nan
    bad[Domain.SOURCE] = src.with_images(images)
    with pytest.raises(T.NonFiniteLossError) as info:
        T.baseline_train(bad, tiny_cfg(), tmp_path)
    assert info.value.snapshot is not None
    assert (info.value.snapshot / "G_xy.npz").exists()
    assert (info.value.snapshot / "record.json").exists()


# -- alternating update ---------------------------------------------------------


@pytest.mark.parametrize("attention", [False, True])
def test_zero_learning_rate_changes_nothing(tiny_data, attention):
    cfg = tiny_cfg(lr=0.0)
    classes = T.ATTENTION_CLASSES if attention else T.SPLIT_CLASSES
    pair = T.TranslationPair(cfg, [1], attention=attention, classes=classes)
    before = weights(pair)
    d_loss, g_loss = T.alternating_update(pair, T.Optimizers.for_pair(pair, cfg),
                                          batch_from(tiny_data, masks=not attention))
    assert same_weights(before, weights(pair))
    assert d_loss.is_finite() and g_loss.is_finite()
    assert g_loss.as_record()["total"] > 0


def test_discriminator_step_does_not_touch_generators(tiny_data):
    cfg = tiny_cfg()
    pair = T.TranslationPair(cfg, [2], attention=False, classes=T.SPLIT_CLASSES)
    opt = T.Optimizers.for_pair(pair, cfg)
    batch = batch_from(tiny_data)
    fake_y, fake_x = T._translations(pair, batch)
    opt.discriminator.zero_grad()
    T.discriminator_objective(pair, batch, fake_y, fake_x).total.backward()
    assert all(p.grad is None for m in pair.generator_modules() for p in m.parameters())
    assert any(p.grad is not None for m in pair.discriminator_modules() for p in m.parameters())


def test_generator_step_decreases_own_objective(tiny_data):
    cfg = tiny_cfg(lr=2e-4)
    data = build_dataset(DatasetSpec(n_source=50, n_target=50, n_intermediate=1, height=16, width=16,
                                     min_object_size=3, max_object_size=5, seed=3))
    src, tgt = data[Domain.SOURCE], data[Domain.TARGET]
    decreased = 0
    for trial in range(50):
        pair = T.TranslationPair(cfg, [100 + trial], attention=False, classes=T.SPLIT_CLASSES)
        opt = T.Optimizers.for_pair(pair, cfg)
        ix, iy = [trial % 49, trial % 49 + 1], [(3 * trial) % 49, (3 * trial) % 49 + 1]
        batch = T.Minibatch(torch.from_numpy(src.images[ix]), torch.from_numpy(tgt.images[iy]),
                            torch.from_numpy(src.labels[ix, None].astype(np.float32)),
                            torch.from_numpy(tgt.labels[iy, None].astype(np.float32)))
        _, g_before = T.alternating_update(pair, opt, batch, cfg.lambda_cyc)
        with torch.no_grad():
            g_after = T.generator_objective(pair, batch, cfg.lambda_cyc)
        decreased += float(g_after.total) < g_before.as_record()["total"]
    assert decreased >= 40


def test_optimizer_state_round_trip(tiny_data, tmp_path):
    cfg = tiny_cfg()
    pair = T.TranslationPair(cfg, [5], attention=True, classes=T.ATTENTION_CLASSES)
    opt = T.Optimizers.for_pair(pair, cfg)
    batch = batch_from(tiny_data, masks=False)
    for _ in range(2):
        T.alternating_update(pair, opt, batch)
    T.save_pair(tmp_path / "ck", pair, opt)

    clone = T.TranslationPair(cfg, [6], attention=True, classes=T.ATTENTION_CLASSES)
    clone_opt = T.Optimizers.for_pair(clone, cfg)
    T.load_pair(tmp_path / "ck", clone, clone_opt)
    assert same_weights(weights(pair), weights(clone))
    for a, b in ((opt.generator, clone_opt.generator), (opt.discriminator, clone_opt.discriminator)):
        sa, sb = a.state_dict(), b.state_dict()
        assert sa["param_groups"] == sb["param_groups"]
        for k in sa["state"]:
            for name, v in sa["state"][k].items():
                assert torch.equal(v, sb["state"][k][name])
    # resuming from the checkpoint continues the exact trajectory
    T.alternating_update(pair, opt, batch)
    T.alternating_update(clone, clone_opt, batch)
    assert same_weights(weights(pair), weights(clone))


def test_translate_plain_and_composed(tiny_data):
    cfg = tiny_cfg()
    pair = T.TranslationPair(cfg, [7], attention=True, classes=T.ATTENTION_CLASSES)
    images = tiny_data[Domain.SOURCE].images
    plain = T.translate(pair.g_xy, images)
    assert plain.shape == images.shape and plain.dtype == np.float32
    kept = T.translate(pair.g_xy, images, ConstantAttention(0.0))
    assert np.array_equal(kept, images)
