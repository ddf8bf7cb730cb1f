"""In-memory dataset handling for training and evaluation.

Desk-scale datasets are small, so every image referenced by a manifest is
decoded once into a single float tensor.  Batch order comes from a seeded
numpy generator whose state is captured in checkpoints, which keeps resumed
runs bit-identical to uninterrupted ones.
"""

import numpy as np
import torch

from .synthgen import LABEL_DEFORMED, decode_png


class ArrayDataset:
    """All images of a manifest as one B x 3 x H x W tensor plus labels and ids."""

    def __init__(self, images, labels, ids, domains):
        self.images = images
        self.labels = labels
        self.ids = list(ids)
        self.domains = list(domains)

    def __len__(self):
        return self.images.shape[0]

    @classmethod
    def from_manifest(cls, manifest):
        if not manifest.entries:
            raise ValueError("manifest has no entries")
        arrays, labels, ids, domains = [], [], [], []
        for e in manifest.entries:
            arrays.append(decode_png(manifest.image_path(e)).transpose(2, 0, 1))
            labels.append(1.0 if e.label == LABEL_DEFORMED else 0.0)
            ids.append(e.id)
            domains.append(e.domain)
        images = torch.from_numpy(np.stack(arrays).astype(np.float32))
        return cls(images, torch.tensor(labels, dtype=torch.float32), ids, domains)

    def class_presence(self):
        pos = int(self.labels.sum().item())
        return pos, len(self) - pos


class BatchSampler:
    """Seeded with-replacement batch drawer for step-driven training."""

    def __init__(self, n, batch_size, seed):
        self.n = n
        self.batch_size = batch_size
        self.rng = np.random.default_rng(np.random.SeedSequence([seed & (2**63 - 1), 0xB47C]))

    def next_batch(self):
        return self.rng.integers(0, self.n, size=self.batch_size)

    def get_state(self):
        return self.rng.bit_generator.state

    def set_state(self, state):
        self.rng.bit_generator.state = state


class EpochSampler:
    """Seeded epoch shuffler for epoch-driven training."""

    def __init__(self, n, batch_size, seed):
        self.n = n
        self.batch_size = batch_size
        self.rng = np.random.default_rng(np.random.SeedSequence([seed & (2**63 - 1), 0xE90C]))

    def epoch(self):
        order = self.rng.permutation(self.n)
        for start in range(0, self.n, self.batch_size):
            yield order[start : start + self.batch_size]

    def get_state(self):
        return self.rng.bit_generator.state

    def set_state(self, state):
        self.rng.bit_generator.state = state


def resize_batch(x, size):
    """Bilinear resize of an image batch to size x size (no-op when it matches)."""
    if x.shape[-1] == size and x.shape[-2] == size:
        return x
    return torch.nn.functional.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
