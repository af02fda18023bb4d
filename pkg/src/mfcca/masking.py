"""Random channel masking for multi-channel training inputs."""

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class MaskPolicy:
    """Mask an utterance with probability ``p``; when masking, the number of
    masked channels m is uniform over 1..C-1 so one channel always survives."""

    p: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ContractError(f"mask probability must lie in [0, 1], got {self.p}")


@dataclass(frozen=True)
class MaskPlan:
    masked: frozenset = frozenset()

    @property
    def applied(self):
        return bool(self.masked)


def sample_mask(policy, channels, rng):
    if policy.p > 0 and channels < 2:
        raise ContractError(f"channel masking needs at least 2 channels, got {channels}")
    u = rng.random()
    if policy.p == 0 or u >= policy.p:
        return MaskPlan()
    m = int(rng.integers(1, channels))
    chosen = rng.choice(channels, size=m, replace=False)
    return MaskPlan(frozenset(int(c) for c in chosen))


def apply_mask(x, plan):
    """Zero the masked channels of ``x`` [..., C, T, D]; returns a new array."""
    x = np.asarray(x)
    C = x.shape[-3]
    if any(c < 0 or c >= C for c in plan.masked):
        raise ContractError(f"mask indices {sorted(plan.masked)} out of range for {C} channels")
    out = np.array(x, copy=True)
    if plan.masked:
        out[..., sorted(plan.masked), :, :] = 0.0
    return out
