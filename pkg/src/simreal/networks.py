"""Network definitions for the translation system and the deformation classifier.

Translation side: an encoder maps an image to a 64-channel feature map at 1/4
resolution, a separator splits those features additively into content and
style factors, and a generator decodes (content + style) back to an image.
Per-domain patch discriminators judge translated images.  A frozen VGG-19
topology feature extractor supplies perceptual constraints.  A CycleGAN
generator/discriminator pair serves as the baseline system, and a VGG-16
topology binary classifier consumes the resulting datasets.

All constructors are deterministic given the torch RNG state; use
``build_network`` to get bit-reproducible initialization from a seed.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .spectral import SNConv2d, SNConvTranspose2d, SNLinear


def _check_divisible(x, factor):
    if x.shape[-2] % factor or x.shape[-1] % factor:
        raise ValueError(f"spatial size {tuple(x.shape[-2:])} not divisible by {factor}")


@dataclass
class FeatureBundle:
    """Encoder features split additively: features == content + style (reshaped)."""

    features: torch.Tensor  # B x 64 x h x w
    content: torch.Tensor   # B x N flattened
    style: torch.Tensor     # B x N flattened

    @property
    def spatial(self):
        return self.features.shape[1:]


class ResidualBlock(nn.Module):
    """Two 3x3 convs with a skip connection; spectral norm optional."""

    def __init__(self, channels, sn=True, activation="relu"):
        super().__init__()
        conv = SNConv2d if sn else nn.Conv2d
        self.conv1 = conv(channels, channels, 3, 1, 1)
        self.conv2 = conv(channels, channels, 3, 1, 1)
        self.act = nn.LeakyReLU(0.2) if activation == "lrelu" else nn.ReLU()

    def forward(self, x):
        h = self.act(self.conv1(x))
        h = self.conv2(h)
        return self.act(x + h)


class Encoder(nn.Module):
    """Image -> 64-channel feature map at 1/4 spatial resolution."""

    def __init__(self):
        super().__init__()
        self.stem = SNConv2d(3, 32, 4, 2, 1)
        self.blocks = nn.Sequential(*[ResidualBlock(32) for _ in range(3)])
        self.expand = SNConv2d(32, 64, 4, 2, 1)
        self.act = nn.ReLU()

    def forward(self, x):
        _check_divisible(x, 4)
        h = self.act(self.stem(x))
        h = self.blocks(h)
        return self.act(self.expand(h))


class Separator(nn.Module):
    """Split encoder features into content (learned) and style (residual)."""

    def __init__(self):
        super().__init__()
        layers = []
        for _ in range(3):
            layers += [SNConv2d(64, 64, 3, 1, 1), nn.ReLU()]
        self.net = nn.Sequential(*layers)

    def forward(self, features):
        if features.dim() != 4 or features.shape[1] != 64:
            raise ValueError(f"expected B x 64 x h x w features, got {tuple(features.shape)}")
        content_map = self.net(features)
        style_map = features - content_map
        b = features.shape[0]
        # reassembled sum is the canonical feature value so the additive
        # identity content + style == features holds bit-exactly
        return FeatureBundle(
            features=content_map + style_map,
            content=content_map.reshape(b, -1),
            style=style_map.reshape(b, -1),
        )


class Generator(nn.Module):
    """Decode (content + style) feature factors back to an image in [-1, 1]."""

    def __init__(self):
        super().__init__()
        self.shrink = SNConvTranspose2d(64, 32, 4, 2, 1)
        self.blocks = nn.Sequential(*[ResidualBlock(32) for _ in range(3)])
        self.out = SNConvTranspose2d(32, 3, 4, 2, 1)
        self.act = nn.ReLU()

    def forward(self, content, style, spatial):
        c, h, w = spatial
        if content.shape != style.shape:
            raise ValueError(f"content {tuple(content.shape)} vs style {tuple(style.shape)}")
        if content.shape[1] != c * h * w:
            raise ValueError(f"flattened width {content.shape[1]} != {c}*{h}*{w}")
        feats = (content + style).reshape(-1, c, h, w)
        return self.decode(feats)

    def decode(self, feature_map):
        h = self.act(self.shrink(feature_map))
        h = self.blocks(h)
        return torch.tanh(self.out(h))


class PatchDiscriminator(nn.Module):
    """Per-patch real/fake logits (no sigmoid; the loss applies the nonlinearity)."""

    def __init__(self):
        super().__init__()
        chans = [3, 64, 128, 256, 512]
        layers = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            layers += [SNConv2d(cin, cout, 4, 2, 1), nn.LeakyReLU(0.2)]
        layers.append(SNConv2d(512, 1, 4, 1, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        if x.shape[-1] < 32 or x.shape[-2] < 32:
            raise ValueError(f"patch discriminator needs >= 32x32 input, got {tuple(x.shape[-2:])}")
        return self.net(x)


class CycleGenerator(nn.Module):
    """Baseline translation generator: 3-step encoder, 9 residual blocks at 256, mirrored decoder."""

    def __init__(self):
        super().__init__()
        self.enc = nn.Sequential(
            nn.Conv2d(3, 64, 4, 2, 1), nn.ReLU(),
            nn.Conv2d(64, 128, 4, 2, 1), nn.ReLU(),
            nn.Conv2d(128, 256, 4, 2, 1), nn.ReLU(),
        )
        self.blocks = nn.Sequential(*[ResidualBlock(256, sn=False) for _ in range(9)])
        self.dec = nn.Sequential(
            nn.ConvTranspose2d(256, 128, 4, 2, 1), nn.ReLU(),
            nn.ConvTranspose2d(128, 64, 4, 2, 1), nn.ReLU(),
            nn.ConvTranspose2d(64, 3, 4, 2, 1),
        )

    def forward(self, x):
        _check_divisible(x, 8)
        return torch.tanh(self.dec(self.blocks(self.enc(x))))


def _conv_out(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def cycle_discriminator_flat_width(image_size):
    """Flatten width in front of the baseline discriminator's linear layer."""
    n = image_size
    for _ in range(4):
        n = _conv_out(n, 4, 2, 1)
    n = _conv_out(n, 3, 1, 1)
    n = _conv_out(n, 4, 2, 1)
    if n < 1:
        raise ValueError(f"image size {image_size} too small for the baseline discriminator")
    return 16 * n * n


class CycleDiscriminator(nn.Module):
    """Baseline discriminator: 6 convs down to 16 channels, linear head, sigmoid probability.

    The linear width is recomputed from ``image_size``; 448-pixel inputs give
    the 3136-wide layer.
    """

    def __init__(self, image_size=64):
        super().__init__()
        self.image_size = image_size
        self.convs = nn.Sequential(
            SNConv2d(3, 64, 4, 2, 1), nn.LeakyReLU(0.2),
            SNConv2d(64, 128, 4, 2, 1), nn.LeakyReLU(0.2),
            SNConv2d(128, 256, 4, 2, 1), nn.LeakyReLU(0.2),
            SNConv2d(256, 512, 4, 2, 1), nn.LeakyReLU(0.2),
            SNConv2d(512, 512, 3, 1, 1), nn.LeakyReLU(0.2),
            SNConv2d(512, 16, 4, 2, 1), nn.LeakyReLU(0.2),
        )
        self.flat_width = cycle_discriminator_flat_width(image_size)
        self.linear = SNLinear(self.flat_width, 1)

    def forward(self, x):
        h = self.convs(x)
        h = h.reshape(h.shape[0], -1)
        if h.shape[1] != self.flat_width:
            raise ValueError(
                f"flatten width mismatch: expected {self.flat_width} (image_size={self.image_size}), "
                f"got {h.shape[1]} from input {tuple(x.shape[-2:])}"
            )
        return torch.sigmoid(self.linear(h)).reshape(-1)


VGG19_CFG = [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M", 512, 512, 512, 512, "M", 512, 512, 512, 512]
VGG16_CFG = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"]

# Tap points for the perceptual extractor, as 0-based conv indices into the
# VGG-19 stack: the last conv of each of the five blocks.  This choice is this
# package's documented default; the set is configurable.
DEFAULT_PERCEPTUAL_TAPS = (1, 3, 7, 11, 15)


def _make_vgg_layers(cfg):
    layers, cin = [], 3
    for item in cfg:
        if item == "M":
            layers.append(nn.MaxPool2d(2, 2))
        else:
            layers += [nn.Conv2d(cin, item, 3, 1, 1), nn.ReLU()]
            cin = item
    return layers


def _kaiming_init(module):
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class PerceptualNet(nn.Module):
    """Frozen VGG-19 topology feature extractor returning maps at 5 tap points.

    Weights default to a fixed seeded random init so the pipeline never needs
    a download; ``load_pretrained`` can overwrite them with torchvision's
    ImageNet weights when those are available locally.
    """

    def __init__(self, taps=DEFAULT_PERCEPTUAL_TAPS):
        super().__init__()
        self.taps = tuple(taps)
        self.layers = nn.ModuleList(_make_vgg_layers(VGG19_CFG))
        _kaiming_init(self)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        feats = []
        conv_idx = -1
        h = x
        for layer in self.layers:
            h = layer(h)
            if isinstance(layer, nn.Conv2d):
                conv_idx += 1
            if isinstance(layer, nn.ReLU) and conv_idx in self.taps:
                feats.append(h)
                if len(feats) == len(self.taps):
                    break
        return feats

    def load_pretrained(self):
        """Copy torchvision VGG-19 ImageNet conv weights into this extractor."""
        from torchvision.models import VGG19_Weights, vgg19

        src = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).features
        src_convs = [m for m in src if isinstance(m, nn.Conv2d)]
        dst_convs = [m for m in self.layers if isinstance(m, nn.Conv2d)]
        with torch.no_grad():
            for a, b in zip(dst_convs, src_convs):
                a.weight.copy_(b.weight)
                a.bias.copy_(b.bias)


class DeformClassifier(nn.Module):
    """VGG-16 topology backbone + adaptive pooling + 3-layer head -> P(deformed).

    ``frozen_prefix`` covers every conv except the last one so transfer-style
    training can freeze it (and cache its activations); ``trainable_tail``
    holds the final conv and pooling.
    """

    def __init__(self, dropout=0.5):
        super().__init__()
        layers = _make_vgg_layers(VGG16_CFG)
        last_conv = max(i for i, m in enumerate(layers) if isinstance(m, nn.Conv2d))
        self.frozen_prefix = nn.Sequential(*layers[:last_conv])
        self.trainable_tail = nn.Sequential(*layers[last_conv:])
        self.pool = nn.AdaptiveAvgPool2d((7, 7))
        self.fc1 = nn.Linear(512 * 7 * 7, 256)
        self.fc2 = nn.Linear(256, 64)
        self.fc3 = nn.Linear(64, 1)
        self.dropout = nn.Dropout(dropout)
        _kaiming_init(self)

    def backbone_features(self, x):
        if x.shape[-1] < 32 or x.shape[-2] < 32:
            raise ValueError(f"classifier needs >= 32x32 input, got {tuple(x.shape[-2:])}")
        return self.trainable_tail(self.frozen_prefix(x))

    def head(self, feats, return_penultimate=False):
        h = self.pool(feats).flatten(1)
        h = self.dropout(F.relu(self.fc1(h)))
        h = F.relu(self.fc2(h))
        if return_penultimate:
            return h
        return torch.sigmoid(self.fc3(h)).reshape(-1)

    def forward(self, x):
        return self.head(self.backbone_features(x))

    def penultimate(self, x):
        """64-d features before the output unit (used for PCA visualization)."""
        return self.head(self.backbone_features(x), return_penultimate=True)

    def freeze_backbone(self):
        for p in self.frozen_prefix.parameters():
            p.requires_grad_(False)

    def load_pretrained(self):
        """Copy torchvision VGG-16 ImageNet conv weights into the backbone."""
        from torchvision.models import VGG16_Weights, vgg16

        src = vgg16(weights=VGG16_Weights.IMAGENET1K_V1).features
        src_convs = [m for m in src if isinstance(m, nn.Conv2d)]
        dst_convs = [m for m in list(self.frozen_prefix) + list(self.trainable_tail) if isinstance(m, nn.Conv2d)]
        with torch.no_grad():
            for a, b in zip(dst_convs, src_convs):
                a.weight.copy_(b.weight)
                a.bias.copy_(b.bias)


_REGISTRY = {
    "encoder": Encoder,
    "separator": Separator,
    "generator": Generator,
    "patch_discriminator": PatchDiscriminator,
    "cycle_generator": CycleGenerator,
    "cycle_discriminator": CycleDiscriminator,
    "perceptual": PerceptualNet,
    "classifier": DeformClassifier,
}


def build_network(arch, init_seed, **kwargs):
    """Construct a registered network with bit-reproducible initialization."""
    if arch not in _REGISTRY:
        raise ValueError(f"unknown architecture {arch!r}; known: {sorted(_REGISTRY)}")
    torch.manual_seed(init_seed & (2**63 - 1))
    net = _REGISTRY[arch](**kwargs)
    net.arch = arch
    net.init_seed = init_seed
    net.build_kwargs = dict(kwargs)
    return net
