"""Small builders shared by the test modules."""

import numpy as np

from mfcca.attention import AttentionParams


def attn_arrays(rng, D, heads, scale=0.5):
    """Random attention parameters as a plain dict (oracle form)."""
    p = {"heads": heads}
    for n in AttentionParams.NAMES:
        if n.startswith("w"):
            p[n] = rng.standard_normal((D, D)) * scale
        else:
            p[n] = rng.standard_normal(D) * 0.1
    return p


def attn_params(arrays):
    return AttentionParams(arrays["heads"], *(arrays[n] for n in AttentionParams.NAMES))


def as_np(t):
    return np.asarray(t.data if hasattr(t, "data") else t)
