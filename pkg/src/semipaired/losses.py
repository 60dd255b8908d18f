"""Loss functions of the semi-paired objective.

Tensor layout: labels are one-hot (B, C, H, W); conditional discriminator
logits are (B, C+1, H, W) with the fake class last; unconditional
discriminator outputs are raw logits of shape (B,).

Pixel sums are divided by H*W so every term is resolution independent.
"""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F

from .core import ConfigError, NumericError
from .networks import PerceptualExtractor, is_frozen, perceptual_features


def _finite(t: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in {what}")
    return t


def class_balance_weights(labels: torch.Tensor) -> torch.Tensor:
    """alpha_c = H*W / (mean per-image pixel count of class c); 0 for classes absent from the batch."""
    if labels.dim() != 4 or labels.shape[0] == 0:
        raise ValueError(f"expected a non-empty (B, C, H, W) label batch, got {tuple(labels.shape)}")
    hw = labels.shape[2] * labels.shape[3]
    mean_count = labels.sum(dim=(0, 2, 3)) / labels.shape[0]
    present = mean_count > 0
    alpha = torch.zeros_like(mean_count)
    alpha[present] = hw / mean_count[present]
    return alpha


def _weighted_seg_ce(log_probs: torch.Tensor, labels: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    # -sum_c alpha_c sum_hw m log p / (H*W), averaged over the batch
    C = labels.shape[1]
    w = alpha.view(1, C, 1, 1).to(log_probs.dtype)
    per_image = -(w * labels * log_probs[:, :C]).sum(dim=(1, 2, 3))
    return per_image.mean() / (labels.shape[2] * labels.shape[3])


def discriminator_loss_paired(
    real_logits: torch.Tensor, fake_logits: torch.Tensor, labels: torch.Tensor, alpha: torch.Tensor
) -> torch.Tensor:
    """Segment real pixels into their classes and fake pixels into the fake class."""
    _finite(real_logits, "discriminator logits on real images")
    _finite(fake_logits, "discriminator logits on fake images")
    real_term = _weighted_seg_ce(F.log_softmax(real_logits, dim=1), labels, alpha)
    fake_lp = F.log_softmax(fake_logits, dim=1)[:, -1]
    fake_term = -fake_lp.mean(dim=(1, 2)).mean()
    return real_term + fake_term


def generator_adversarial_seg_loss(fake_logits: torch.Tensor, labels: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    _finite(fake_logits, "discriminator logits on fake images")
    return _weighted_seg_ce(F.log_softmax(fake_logits, dim=1), labels, alpha)


def generator_unpaired_cycle_loss(
    fake_logits: torch.Tensor, labels: torch.Tensor, alpha: torch.Tensor, fake_class: str = "renormalize"
) -> torch.Tensor:
    """Cross-entropy of the (frozen) discriminator's segmentation against the input labels.

    ``fake_class="renormalize"`` drops the fake logit and takes the softmax over
    the C real classes only; ``"full"`` keeps the (C+1)-way softmax and simply
    never targets the fake class.
    """
    _finite(fake_logits, "discriminator logits on unpaired fakes")
    C = labels.shape[1]
    if fake_class == "renormalize":
        lp = F.log_softmax(fake_logits[:, :C], dim=1)
    elif fake_class == "full":
        lp = F.log_softmax(fake_logits, dim=1)
    else:
        raise ConfigError(f"unknown fake_class mode {fake_class!r}")
    return _weighted_seg_ce(lp, labels, alpha)


def feature_matching_loss(real_feats: Sequence[torch.Tensor], fake_feats: Sequence[torch.Tensor]) -> torch.Tensor:
    """Mean squared feature difference, averaged over layers."""
    if len(real_feats) != len(fake_feats) or not real_feats:
        raise ValueError(f"feature lists differ in length: {len(real_feats)} vs {len(fake_feats)}")
    total = 0.0
    for i, (r, f) in enumerate(zip(real_feats, fake_feats)):
        if r.shape != f.shape:
            raise ValueError(f"feature tap {i}: shape {tuple(r.shape)} vs {tuple(f.shape)}")
        total = total + ((r.detach() - f) ** 2).mean()
    return total / len(real_feats)


def perceptual_loss(
    x_real: torch.Tensor, x_fake: torch.Tensor, extractor: PerceptualExtractor, layer_weights=None
) -> torch.Tensor:
    """Weighted sum over extractor layers of mean absolute feature differences.

    Default weights are 1/L per layer.
    """
    if not is_frozen(extractor):
        raise ConfigError("perceptual loss requires a frozen extractor")
    fr = perceptual_features(x_real, extractor)
    ff = perceptual_features(x_fake, extractor)
    if layer_weights is None:
        layer_weights = [1.0 / len(fr)] * len(fr)
    if len(layer_weights) != len(fr):
        raise ConfigError(f"{len(layer_weights)} layer weights for {len(fr)} layers")
    return sum(w * (a - b).abs().mean() for w, a, b in zip(layer_weights, fr, ff))


def generator_unconditional_adv_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    """Non-saturating loss, mean of -log sigmoid(logit)."""
    _finite(fake_logits, "unconditional discriminator logits on fakes")
    return F.softplus(-fake_logits).mean()


def unconditional_discriminator_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """Mean of -log(1 - D_u(fake)) - log D_u(real), in logit form."""
    _finite(real_logits, "unconditional discriminator logits on reals")
    _finite(fake_logits, "unconditional discriminator logits on fakes")
    return F.softplus(fake_logits).mean() + F.softplus(-real_logits).mean()
