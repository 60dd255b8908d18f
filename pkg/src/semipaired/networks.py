"""Toy networks behind the interfaces the training algorithm needs.

* ``Generator``: label map + broadcast noise -> image, decoder blocks use
  spatially-adaptive (label-modulated) normalization, tanh output.
* ``UNetDiscriminator``: per-pixel logits over C real classes + 1 fake class,
  plus feature taps from every block except the final prediction layer.
* ``UncondDiscriminator``: one real/fake logit per image.
* ``PerceptualExtractor``: frozen, seeded random conv stack standing in for a
  pretrained feature network.

Every module carries an ``architecture_id`` so checkpoints can refuse to load
weights into the wrong architecture.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ConfigError, ValidationError


@dataclass
class CondDiscriminatorOutput:
    logits: torch.Tensor  # (B, C+1, H, W)
    features: list[torch.Tensor]


def set_trainable(net: nn.Module, flag: bool) -> nn.Module:
    """Freeze or unfreeze every parameter of ``net``.

    Frozen parameters get no ``.grad``, so an optimizer step skips them, while
    gradients still flow through the network to its inputs.
    """
    for p in net.parameters():
        p.requires_grad_(flag)
    return net


def is_frozen(net: nn.Module) -> bool:
    return not any(p.requires_grad for p in net.parameters())


def _check_input(x: torch.Tensor, channels: int, size: int | None, what: str):
    if x.dim() != 4 or x.shape[1] != channels:
        raise ValidationError(f"{what}: expected (B, {channels}, H, W), got {tuple(x.shape)}")
    if size is not None and (x.shape[2] != size or x.shape[3] != size):
        raise ValidationError(f"{what}: expected spatial size {size}x{size}, got {x.shape[2]}x{x.shape[3]}")


class SPADE(nn.Module):
    def __init__(self, norm_ch, label_ch, hidden_ch=8):
        super().__init__()
        self.norm = nn.InstanceNorm2d(norm_ch, affine=False)
        self.shared = nn.Sequential(nn.Conv2d(label_ch, hidden_ch, 3, padding=1), nn.ReLU())
        self.gamma_beta = nn.Conv2d(hidden_ch, 2 * norm_ch, 1)

    def forward(self, x, m):
        if m.shape[2:] != x.shape[2:]:
            m = F.interpolate(m, size=x.shape[2:], mode="nearest")
        gamma, beta = self.gamma_beta(self.shared(m)).chunk(2, dim=1)
        return self.norm(x) * (1 + gamma) + beta


class SPADEBlock(nn.Module):
    def __init__(self, in_ch, out_ch, label_ch, hidden_ch=8):
        super().__init__()
        self.norm = SPADE(in_ch, label_ch, hidden_ch)
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1, bias=False) if in_ch != out_ch else nn.Identity()

    def forward(self, x, m):
        return self.skip(x) + self.conv(F.leaky_relu(self.norm(x, m), 0.2))


class Generator(nn.Module):
    """Encoder-decoder generator.

    The one-hot label map and the spatially broadcast noise vector are
    concatenated at the input. Full-resolution layers use ``channels // 2``
    features, each downsampling level doubles the width.
    """

    def __init__(self, num_classes, noise_dim=64, channels=16, image_size=64, levels=2):
        super().__init__()
        if image_size % (2**levels):
            raise ConfigError(f"image_size {image_size} must be divisible by {2**levels}")
        self.num_classes, self.noise_dim, self.image_size = num_classes, noise_dim, image_size
        self.architecture_id = f"generator-spade-c{num_classes}-z{noise_dim}-ch{channels}-l{levels}-s{image_size}"
        widths = [max(channels // 2, 1)] + [channels * 2**i for i in range(levels)]
        self.stem = nn.Conv2d(num_classes + noise_dim, widths[0], 1)
        self.down = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], 4, stride=2, padding=1) for i in range(levels)
        )
        self.middle = SPADEBlock(widths[-1], widths[-1], num_classes)
        self.up = nn.ModuleList(
            SPADEBlock(widths[i + 1], widths[i], num_classes) for i in reversed(range(levels))
        )
        self.to_rgb = nn.Conv2d(widths[0], 3, 3, padding=1)

    def forward(self, m: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        _check_input(m, self.num_classes, self.image_size, "generator label input")
        if z.dim() != 2 or z.shape != (m.shape[0], self.noise_dim):
            raise ValidationError(f"generator noise: expected ({m.shape[0]}, {self.noise_dim}), got {tuple(z.shape)}")
        # 1x1 conv over cat([m, broadcast z]) computed without materialising the
        # broadcast: W @ [m; z] = W_m @ m + W_z @ z
        C = self.num_classes
        w, b = self.stem.weight[:, :, 0, 0], self.stem.bias
        h = F.conv2d(m, self.stem.weight[:, :C]) + (z @ w[:, C:].t() + b)[:, :, None, None]
        h = F.leaky_relu(h, 0.2)
        pyramid = [m]
        for conv in self.down:
            h = F.leaky_relu(conv(h), 0.2)
            pyramid.append(F.interpolate(pyramid[-1], size=h.shape[2:], mode="nearest"))
        h = self.middle(h, pyramid[-1])
        for i, block in enumerate(self.up):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(h, pyramid[-2 - i])
        return torch.tanh(self.to_rgb(F.leaky_relu(h, 0.2)))


class UNetDiscriminator(nn.Module):
    """U-Net segmenter with C+1 output classes (index C is the fake class).

    Feature taps are the outputs of every encoder and decoder block, i.e. all
    layers except the final 1x1 prediction layer.
    """

    def __init__(self, num_classes, channels=16, depth=3, image_size=64):
        super().__init__()
        if depth < 1:
            raise ConfigError("U-Net depth must be >= 1")
        if image_size % (2 ** (depth - 1)):
            raise ConfigError(f"image_size {image_size} must be divisible by {2 ** (depth - 1)}")
        self.num_classes, self.image_size = num_classes, image_size
        self.architecture_id = f"unet-d-c{num_classes}-ch{channels}-d{depth}-s{image_size}"
        widths = [channels * 2**i for i in range(depth)]
        self.enc = nn.ModuleList()
        in_ch = 3
        for i, w in enumerate(widths):
            stride = 1 if i == 0 else 2
            self.enc.append(nn.Conv2d(in_ch, w, 3 if stride == 1 else 4, stride=stride, padding=1))
            in_ch = w
        self.dec = nn.ModuleList(
            nn.Conv2d(widths[i + 1] + widths[i], widths[i], 3, padding=1) for i in reversed(range(depth - 1))
        )
        self.head = nn.Conv2d(widths[0], num_classes + 1, 1)

    @property
    def num_feature_taps(self) -> int:
        return len(self.enc) + len(self.dec)

    def forward(self, x: torch.Tensor) -> CondDiscriminatorOutput:
        _check_input(x, 3, self.image_size, "conditional discriminator input")
        feats, skips = [], []
        h = x
        for conv in self.enc:
            h = F.leaky_relu(conv(h), 0.2)
            skips.append(h)
            feats.append(h)
        for conv, skip in zip(self.dec, reversed(skips[:-1])):
            h = F.interpolate(h, size=skip.shape[2:], mode="nearest")
            h = F.leaky_relu(conv(torch.cat([h, skip], 1)), 0.2)
            feats.append(h)
        return CondDiscriminatorOutput(self.head(h), feats)


class UncondDiscriminator(nn.Module):
    def __init__(self, channels=16, image_size=64, levels=3):
        super().__init__()
        self.image_size = image_size
        self.architecture_id = f"uncond-d-ch{channels}-l{levels}-s{image_size}"
        layers, in_ch = [], 3
        for i in range(levels):
            out_ch = channels * 2**i
            layers += [nn.Conv2d(in_ch, out_ch, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            in_ch = out_ch
        self.body = nn.Sequential(*layers)
        self.fc = nn.Linear(in_ch, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Returns one logit per image, shape (B,)."""
        _check_input(x, 3, self.image_size, "unconditional discriminator input")
        return self.fc(self.body(x).mean(dim=(2, 3))).squeeze(1)


class PerceptualExtractor(nn.Module):
    """Frozen random conv stack. Weights are a pure function of ``seed``."""

    def __init__(self, seed=0, widths=(8, 16, 32, 32)):
        super().__init__()
        self.seed = seed
        self.architecture_id = f"randconv{len(widths)}-" + "-".join(map(str, widths))
        self.extractor_id = f"{self.architecture_id}-seed{seed}"
        gen = torch.Generator().manual_seed(seed)
        self.convs = nn.ModuleList()
        in_ch = 3
        for i, w in enumerate(widths):
            conv = nn.Conv2d(in_ch, w, 3, stride=1 if i == 0 else 2, padding=1)
            bound = (6.0 / (in_ch * 9)) ** 0.5  # He-uniform for a LeakyReLU stack
            with torch.no_grad():
                conv.weight.copy_(torch.rand(conv.weight.shape, generator=gen) * 2 * bound - bound)
                conv.bias.zero_()
            self.convs.append(conv)
            in_ch = w
        set_trainable(self, False)

    @property
    def feature_dim(self) -> int:
        return sum(c.out_channels for c in self.convs)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        return perceptual_features(x, self)


def perceptual_features(x: torch.Tensor, extractor: PerceptualExtractor) -> list[torch.Tensor]:
    if not is_frozen(extractor):
        raise ConfigError("perceptual extractor must be frozen")
    _check_input(x, 3, None, "perceptual extractor input")
    feats, h = [], x
    for conv in extractor.convs:
        h = F.leaky_relu(conv(h), 0.2)
        feats.append(h)
    return feats
