"""Masked least-squares adversarial energies, cycle loss and stage objectives.

Discriminators are trained towards 1 on real patches and 0 on translated ones;
generators are trained towards 1 on their translated patches. Only cells where
the (downsampled) mask is on contribute.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Union

import torch

Scalar = Union[float, torch.Tensor]


class AdversarialTerms(NamedTuple):
    discriminator: torch.Tensor
    generator: torch.Tensor
    skipped: bool


def _as_grid(x) -> torch.Tensor:
    t = torch.as_tensor(x)
    if not t.is_floating_point():
        t = t.to(torch.float64)
    return t


def masked_frobenius(patch, target: float, mask) -> torch.Tensor:
    """Unnormalized squared Frobenius norm of ``(patch - target) * mask``."""
    return (((patch - target) * mask) ** 2).sum()


def _check(*grids: torch.Tensor) -> None:
    shape = grids[0].shape
    for g in grids[1:]:
        if g.shape != shape:
            raise ValueError(f"grid shapes differ: {tuple(shape)} vs {tuple(g.shape)}")


def masked_adversarial_loss(real_patch, fake_patch, real_mask, fake_mask) -> AdversarialTerms:
    """Class-masked least-squares energy, normalized by the active cell count.

    ``real_mask`` gates the real grid and ``fake_mask`` the translated one; all
    four grids share a shape (``n x n`` or batched ``N x 1 x n x n``). A side
    with no active cell contributes exactly 0; when both sides are empty the
    class is absent and the result is flagged ``skipped``.
    """
    real_patch, fake_patch = _as_grid(real_patch), _as_grid(fake_patch)
    real_mask = _as_grid(real_mask).to(real_patch.dtype)
    fake_mask = _as_grid(fake_mask).to(fake_patch.dtype)
    _check(real_patch, fake_patch, real_mask, fake_mask)
    n_real, n_fake = real_mask.sum(), fake_mask.sum()
    zero = real_patch.new_zeros(())
    real_term = masked_frobenius(real_patch, 1.0, real_mask) / n_real if n_real > 0 else zero
    fake_term = masked_frobenius(fake_patch, 0.0, fake_mask) / n_fake if n_fake > 0 else zero
    gen_term = masked_frobenius(fake_patch, 1.0, fake_mask) / n_fake if n_fake > 0 else zero
    return AdversarialTerms(real_term + fake_term, gen_term, bool(n_real == 0 and n_fake == 0))


def attention_adversarial_loss(real_patch, composed_fake_patch, mask) -> AdversarialTerms:
    """Whole-grid least-squares energy with an explicit ``1/n**2`` factor.

    The fake grid comes from the discriminator applied to the attention-composed
    translation. Squared errors are averaged over all ``n x n`` cells of every
    sample regardless of how many cells the mask keeps, so the all-ones mask
    gives the plain LSGAN energy and the all-zeros mask gives exactly 0.
    """
    real_patch, fake = _as_grid(real_patch), _as_grid(composed_fake_patch)
    mask = _as_grid(mask).to(real_patch.dtype)
    _check(real_patch, fake, mask)
    cells = real_patch.numel()
    skipped = not bool(mask.any())
    if skipped:
        zero = real_patch.new_zeros(())
        return AdversarialTerms(zero, zero, True)
    d = (masked_frobenius(real_patch, 1.0, mask) + masked_frobenius(fake, 0.0, mask)) / cells
    g = masked_frobenius(fake, 1.0, mask) / cells
    return AdversarialTerms(d, g, False)


def cyclic_loss(original, reconstructed) -> torch.Tensor:
    original, reconstructed = _as_grid(original), _as_grid(reconstructed)
    if original.shape != reconstructed.shape:
        raise ValueError(f"shape mismatch {tuple(original.shape)} vs {tuple(reconstructed.shape)}")
    return (original - reconstructed).abs().mean()


@dataclass
class LossBreakdown:
    """Per-term energies of one stage objective.

    ``total = sum(adv_source_split_per_class) + sum(adv_target_split_per_class)
    + lambda_cyc * (cyc_source + cyc_target)``.
    """

    adv_source_split_per_class: dict[str, Scalar]
    adv_target_split_per_class: dict[str, Scalar]
    cyc_source: Scalar
    cyc_target: Scalar
    lambda_cyc: float
    total: Scalar = field(init=False)

    def __post_init__(self) -> None:
        adv = sum(self.adv_source_split_per_class.values()) + sum(self.adv_target_split_per_class.values())
        self.total = adv + self.lambda_cyc * (self.cyc_source + self.cyc_target)

    def recomputed_total(self) -> float:
        rec = self.as_record()
        return (sum(rec["adv_source"].values()) + sum(rec["adv_target"].values())
                + self.lambda_cyc * (rec["cyc_source"] + rec["cyc_target"]))

    def as_record(self) -> dict:
        def f(x):
            return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)

        return {
            "adv_source": {k: f(v) for k, v in self.adv_source_split_per_class.items()},
            "adv_target": {k: f(v) for k, v in self.adv_target_split_per_class.items()},
            "cyc_source": f(self.cyc_source),
            "cyc_target": f(self.cyc_target),
            "lambda_cyc": self.lambda_cyc,
            "total": f(self.total),
        }

    def is_finite(self) -> bool:
        rec = self.as_record()
        values = [*rec["adv_source"].values(), *rec["adv_target"].values(), rec["cyc_source"], rec["cyc_target"]]
        return all(v == v and abs(v) != float("inf") for v in values + [rec["total"]])


SPLIT_KEYS = frozenset({"object", "background"})
ATTENTION_KEYS = frozenset({"all", "none"})


def _check_keys(adv_source: Mapping, adv_target: Mapping, expected: frozenset) -> None:
    for terms in (adv_source, adv_target):
        if set(terms) != expected:
            raise ValueError(f"expected adversarial terms for {sorted(expected)}, got {sorted(terms)}")


def stage2_objective(adv_source: Mapping[str, Scalar], adv_target: Mapping[str, Scalar],
                     cyc_source: Scalar, cyc_target: Scalar, lambda_cyc: float = 10.0) -> LossBreakdown:
    """Split objective: four class-specific adversarial terms plus weighted cycle terms.

    ``adv_source`` holds the terms of the target-domain discriminators judging
    ``G_S(s)`` (keys ``"object"``, ``"background"``); ``adv_target`` those of the
    source-domain discriminators judging ``G_T(t)``. Pass discriminator-side terms
    with zero cycle terms for the max side, generator-side terms for the min side.
    """
    _check_keys(adv_source, adv_target, SPLIT_KEYS)
    return LossBreakdown(dict(adv_source), dict(adv_target), cyc_source, cyc_target, lambda_cyc)


def stage1_objective(adv_source: Mapping[str, Scalar], adv_target: Mapping[str, Scalar],
                     cyc_source: Scalar, cyc_target: Scalar, lambda_cyc: float = 10.0) -> LossBreakdown:
    """Attention objective with one whole-image (``"all"``) and one empty (``"none"``) discriminator per direction."""
    _check_keys(adv_source, adv_target, ATTENTION_KEYS)
    return LossBreakdown(dict(adv_source), dict(adv_target), cyc_source, cyc_target, lambda_cyc)
