"""Spectral weight normalization via power iteration.

Dividing a weight matrix by an estimate of its top singular value bounds the
layer's Lipschitz constant, which stabilizes adversarial training.  The
estimate (u, v) is refined by one power iteration per training-mode forward
and held fixed in eval mode.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

EPS = 1e-12


def spectral_normalize(weight, u, v, n_iterations=1, update=True):
    """Normalize ``weight`` by its estimated top singular value.

    ``weight`` is viewed as a 2-D matrix (dim 0 x rest).  Returns
    ``(w_norm, u, v, sigma)`` where sigma = u^T W v after ``n_iterations``
    power-iteration updates (skipped when ``update`` is false).  A zero
    matrix is returned unchanged: sigma is clamped to 1e-12 from below.
    """
    w_mat = weight.reshape(weight.shape[0], -1)
    if update:
        with torch.no_grad():
            for _ in range(n_iterations):
                v = F.normalize(torch.mv(w_mat.t(), u), dim=0, eps=EPS)
                u = F.normalize(torch.mv(w_mat, v), dim=0, eps=EPS)
        u, v = u.clone(), v.clone()
    sigma = torch.dot(u, torch.mv(w_mat, v))
    w_norm = weight / torch.clamp(sigma, min=EPS)
    return w_norm, u, v, sigma


class _SpectralNormMixin:
    """Adds (u, v) power-iteration buffers and normalized-weight access."""

    def _init_spectral(self, dim=0):
        self._sn_dim = dim
        w = self.weight
        if dim != 0:
            w = w.transpose(0, dim)
        w_mat = w.reshape(w.shape[0], -1)
        self.register_buffer("sn_u", F.normalize(torch.randn(w_mat.shape[0]), dim=0, eps=EPS))
        self.register_buffer("sn_v", F.normalize(torch.randn(w_mat.shape[1]), dim=0, eps=EPS))

    def normalized_weight(self):
        w = self.weight
        if self._sn_dim != 0:
            w = w.transpose(0, self._sn_dim)
        w_norm, u, v, _ = spectral_normalize(w, self.sn_u, self.sn_v, update=self.training)
        if self.training:
            self.sn_u.copy_(u)
            self.sn_v.copy_(v)
        if self._sn_dim != 0:
            w_norm = w_norm.transpose(0, self._sn_dim)
        return w_norm


class SNConv2d(nn.Conv2d, _SpectralNormMixin):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._init_spectral(dim=0)

    def forward(self, x):
        return self._conv_forward(x, self.normalized_weight(), self.bias)


class SNConvTranspose2d(nn.ConvTranspose2d, _SpectralNormMixin):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._init_spectral(dim=1)  # out-channel axis of transposed-conv weights

    def forward(self, x):
        return F.conv_transpose2d(
            x, self.normalized_weight(), self.bias, self.stride,
            self.padding, self.output_padding, self.groups, self.dilation,
        )


class SNLinear(nn.Linear, _SpectralNormMixin):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._init_spectral(dim=0)

    def forward(self, x):
        return F.linear(x, self.normalized_weight(), self.bias)
