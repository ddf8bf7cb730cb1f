"""Content-adaptive style mixing between two batches.

A plain style swap pairs source image i with target image i, which bleeds
unrelated scene content ("ghosting") into the translation when the batches
are not aligned.  Content-adaptive transfer instead mixes target styles with
weights given by a softmaxed content-similarity matrix, so each source image
draws style from the target images whose content most resembles its own.
The raw content dot products feed the softmax directly; there is no
temperature or scaling knob.
"""

import torch

from .networks import FeatureBundle


def _check_same_shape(c_x, c_y):
    if c_x.shape != c_y.shape:
        raise ValueError(f"content shapes differ: {tuple(c_x.shape)} vs {tuple(c_y.shape)}")


def content_similarity_row(c_x, c_y):
    """Row-stochastic similarity: softmax over each row of C_X @ C_Y^T."""
    _check_same_shape(c_x, c_y)
    logits = c_x @ c_y.t()
    return torch.softmax(logits, dim=1)


def content_similarity_col(c_x, c_y):
    """Column softmax of C_X @ C_Y^T, transposed; rows of the result sum to 1."""
    _check_same_shape(c_x, c_y)
    logits = c_x @ c_y.t()
    return torch.softmax(logits, dim=0).t()


def adapt_style_row(h_row, s_y):
    """Mix target styles: each output row is a convex combination of S_Y rows."""
    if h_row.shape[1] != s_y.shape[0]:
        raise ValueError(f"similarity {tuple(h_row.shape)} incompatible with styles {tuple(s_y.shape)}")
    return h_row @ s_y


def adapt_style_col(h_col, s_x):
    """Reverse-direction mixing of source styles with the transposed similarity."""
    if h_col.shape[1] != s_x.shape[0]:
        raise ValueError(f"similarity {tuple(h_col.shape)} incompatible with styles {tuple(s_x.shape)}")
    return h_col @ s_x


def transfer_styles(bundle_x, bundle_y, cadt_enabled=True):
    """Swap styles between two feature bundles, content-adaptively if enabled.

    Returns flattened mixed features ``(content_x + adapted_style_y,
    content_y + adapted_style_x)``.  With ``cadt_enabled`` false this is the
    plain per-index swap.  At batch size 1 the two coincide.
    """
    if bundle_x.content.shape[1] != bundle_y.content.shape[1]:
        raise ValueError(
            f"feature widths differ: {bundle_x.content.shape[1]} vs {bundle_y.content.shape[1]}"
        )
    if cadt_enabled:
        h_row = content_similarity_row(bundle_x.content, bundle_y.content)
        h_col = content_similarity_col(bundle_x.content, bundle_y.content)
        style_for_x = adapt_style_row(h_row, bundle_y.style)
        style_for_y = adapt_style_col(h_col, bundle_x.style)
    else:
        style_for_x = bundle_y.style
        style_for_y = bundle_x.style
    return bundle_x.content + style_for_x, bundle_y.content + style_for_y
