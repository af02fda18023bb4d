"""Delay-recovery scoring for exported multi-frame attention rows.

For a single-source utterance, channel c carries the source shifted by
``delays[c]`` frames. The key in channel c2 holding the same content as
query (t, c) then sits at offset ``delays[c2] - delays[c]``. A query counts
as interior when its frame is non-silent and its whole context window lies
inside the utterance.
"""

import numpy as np

from .errors import ContractError, DimensionError


def block_argmax(weights, F, C):
    """[T, C, (2F+1)*C] rows -> [T, C, C] best offset per key channel."""
    T, Cq, K = weights.shape
    if K != (2 * F + 1) * C or Cq != C:
        raise DimensionError(f"rows of width {K} do not match F={F}, C={C}")
    blocks = weights.reshape(T, C, 2 * F + 1, C)
    return blocks.argmax(axis=2) - F


def delay_recovery(weights, features, delays, F):
    """Return (hits, queries) over interior (t, c, c2) triples with |delay gap| <= F."""
    features = np.asarray(features)
    delays = np.asarray(delays, dtype=np.int64)
    if delays.ndim == 2:
        if delays.shape[0] != 1:
            raise ContractError("delay recovery is defined for single-source utterances")
        delays = delays[0]
    C, T, _ = features.shape
    weights = np.asarray(weights).reshape(T, C, -1)
    best = block_argmax(weights, F, C)
    active = np.abs(features).sum(axis=2) > 0  # [C, T]
    gap = delays[None, :] - delays[:, None]     # [c, c2]
    hits = total = 0
    for t in range(F, T - F):
        for c in range(C):
            if not active[c, t]:
                continue
            ok = np.abs(gap[c]) <= F
            total += int(ok.sum())
            hits += int((best[t, c][ok] == gap[c][ok]).sum())
    return hits, total
