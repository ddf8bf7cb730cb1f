"""Training objectives for both translation systems and the classifier.

The patch-based system uses least-squares adversarial terms on logits; the
baseline system's discriminator ends in a sigmoid, so it trains with binary
cross-entropy.  Content and style constraints come from a frozen perceptual
extractor: content as feature MSE, style as MSE between Gram matrices.
"""

from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F


class TrainingDivergenceError(RuntimeError):
    """A loss term became non-finite during training."""


@dataclass
class LossWeights:
    """Scalar weights of the translation objective terms.

    Defaults follow common practice for perceptual style training: heavy
    reconstruction anchor, Gram terms scaled up to balance their small
    magnitude.  All weights are configurable.
    """

    w_adv: float = 1.0
    w_recon: float = 10.0
    w_consistency: float = 1.0
    w_content: float = 1.0
    w_style: float = 1e3

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (v >= 0 and v == v and v != float("inf")):
                raise ValueError(f"{f.name} must be finite and >= 0, got {v}")


def gram(features):
    """Per-item Gram statistic G = F F^T / (C h w) of a B x C x h x w map."""
    b, c, h, w = features.shape
    flat = features.reshape(b, c, h * w)
    return flat @ flat.transpose(1, 2) / (c * h * w)


def adversarial_loss_casnet(d_logits_real, d_logits_fake, role):
    """Least-squares adversarial loss on patch logits.

    Discriminator: mean((real - 1)^2) + mean(fake^2).
    Generator: mean((fake - 1)^2); real logits are ignored.
    """
    if role == "discriminator":
        return ((d_logits_real - 1.0) ** 2).mean() + (d_logits_fake**2).mean()
    if role == "generator":
        return ((d_logits_fake - 1.0) ** 2).mean()
    raise ValueError(f"role must be 'generator' or 'discriminator', got {role!r}")


def adversarial_loss_cyclegan(d_probs, target_real):
    """Binary cross-entropy on the baseline discriminator's sigmoid outputs."""
    probs = torch.clamp(d_probs, 1e-7, 1.0 - 1e-7)
    target = torch.ones_like(probs) if target_real else torch.zeros_like(probs)
    return F.binary_cross_entropy(probs, target)


def reconstruction_loss(x, x_rec):
    """Mean absolute error between an image batch and its reconstruction."""
    if x.shape != x_rec.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_rec.shape)}")
    return (x - x_rec).abs().mean()


def _check_taps(feats_a, feats_b, taps):
    if len(feats_a) != len(feats_b):
        raise ValueError(f"feature lists differ in length: {len(feats_a)} vs {len(feats_b)}")
    for t in taps:
        if not 0 <= t < len(feats_a):
            raise ValueError(f"tap index {t} out of range for {len(feats_a)} feature maps")


def perceptual_content_loss(p_feats_a, p_feats_b, taps):
    """Sum over content taps of the mean squared feature difference."""
    _check_taps(p_feats_a, p_feats_b, taps)
    total = 0.0
    for t in taps:
        total = total + F.mse_loss(p_feats_a[t], p_feats_b[t])
    return total


def perceptual_style_loss(p_feats_a, p_feats_b, taps):
    """Sum over style taps of the mean squared Gram-matrix difference."""
    _check_taps(p_feats_a, p_feats_b, taps)
    total = 0.0
    for t in taps:
        total = total + F.mse_loss(gram(p_feats_a[t]), gram(p_feats_b[t]))
    return total


def total_casnet_loss(terms, weights):
    """Weighted sum of the translation loss terms.

    ``terms`` maps {adv, recon, consistency, content, style} to scalar
    tensors.  Returns (total, breakdown dict of floats).  A non-finite term
    raises TrainingDivergenceError naming it.
    """
    weight_of = {
        "adv": weights.w_adv,
        "recon": weights.w_recon,
        "consistency": weights.w_consistency,
        "content": weights.w_content,
        "style": weights.w_style,
    }
    unknown = set(terms) - set(weight_of)
    if unknown:
        raise ValueError(f"unknown loss terms: {sorted(unknown)}")
    total = None
    breakdown = {}
    for name, value in terms.items():
        scalar = float(value)
        if scalar != scalar or scalar in (float("inf"), float("-inf")):
            raise TrainingDivergenceError(f"loss term {name!r} is non-finite: {scalar}")
        breakdown[name] = scalar
        contrib = weight_of[name] * value
        total = contrib if total is None else total + contrib
    if total is None:
        total = torch.zeros(())
    return total, breakdown
