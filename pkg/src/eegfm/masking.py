"""Masking strategies for self-supervised pretraining.

Amplitude-aware masking picks, per channel, a contiguous window of amplitude
*ranks* centred on a random percentile: the masked time points are those whose
values occupy that window in the stably sorted channel.  ``random_mask`` is
the interval baseline.  ``corruption_plan`` draws BERT-style 80/10/10 actions
over the masked points, and ``coarsen`` propagates a mask through temporal
segment merging.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .numerics import RngStream


@dataclass
class MaskSpec:
    """Boolean time-by-channel mask plus the draws that produced it."""

    mask: np.ndarray  # (T, D) bool, True = masked
    ratio: float
    per_channel_percentile: np.ndarray  # (D,) in [0, 1); NaN for random_mask
    rank_windows: np.ndarray | None = None  # (D, 2) inclusive rank bounds (amplitude masks)

    @property
    def n_masked_per_channel(self) -> np.ndarray:
        return self.mask.sum(axis=0)


class Action(IntEnum):
    MASK_TOKEN = 0
    RANDOM_REPLACE = 1
    KEEP = 2


@dataclass
class CorruptionPlan:
    """Per-masked-point action with donor indices for random replacement.

    ``action`` is -1 at unmasked points.  ``donor_t``/``donor_d`` are defined
    (>= 0) exactly where ``action == RANDOM_REPLACE``.
    """

    action: np.ndarray  # (T, D) int8
    donor_t: np.ndarray  # (T, D) int32
    donor_d: np.ndarray  # (T, D) int32

    def fractions(self) -> dict[str, float]:
        masked = self.action >= 0
        total = int(masked.sum())
        if total == 0:
            return {a.name: 0.0 for a in Action}
        return {a.name: float((self.action == a).sum()) / total for a in Action}


@dataclass
class LayerMasks:
    """Per-encoder-layer masks at each merge resolution.

    A merged segment is masked iff all of its constituents are masked, so a
    True at a coarse level certifies that no underlying point was visible.
    """

    masks: list[np.ndarray]  # masks[l] has shape (T_l, D)


def _window_length(T: int, ratio: float) -> int:
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"masking ratio must lie in (0, 1), got {ratio}")
    w = round(T * ratio)
    if w < 1:
        raise ValueError(f"T*ratio rounds to zero (T={T}, ratio={ratio})")
    return int(w)


def aamp_mask(x: np.ndarray, ratio: float, rng: RngStream) -> MaskSpec:
    """Amplitude-rank window mask.

    Per channel d: draw a percentile xi ~ U(0,1); stable-sort time indices by
    (value, time index); with w = round(T*ratio) and centre
    c = clamp(floor(xi*T), floor(w/2), T - ceil(w/2)), mask the time indices
    occupying sorted ranks [c - floor(w/2), c - floor(w/2) + w - 1].  The
    clamp keeps exact cardinality at both percentile extremes.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a (T, D) array, got shape {x.shape}")
    T, D = x.shape
    w = _window_length(T, ratio)
    xi = np.asarray(rng.uniform(size=D))
    mask = np.zeros((T, D), dtype=bool)
    windows = np.zeros((D, 2), dtype=np.int64)
    lo = w // 2
    hi = T - (w + 1) // 2
    for d in range(D):
        order = np.argsort(x[:, d], kind="stable")
        c = min(max(int(np.floor(xi[d] * T)), lo), hi)
        start = c - w // 2
        picked = order[start : start + w]
        mask[picked, d] = True
        windows[d] = (start, start + w - 1)
    return MaskSpec(mask=mask, ratio=float(ratio), per_channel_percentile=xi, rank_windows=windows)


def random_mask(x: np.ndarray, ratio: float, rng: RngStream) -> MaskSpec:
    """Baseline: one uniformly placed contiguous time interval per channel."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a (T, D) array, got shape {x.shape}")
    T, D = x.shape
    w = _window_length(T, ratio)
    starts = np.asarray(rng.integers(0, T - w + 1, size=D))
    mask = np.zeros((T, D), dtype=bool)
    for d in range(D):
        mask[starts[d] : starts[d] + w, d] = True
    return MaskSpec(
        mask=mask,
        ratio=float(ratio),
        per_channel_percentile=np.full(D, np.nan),
        rank_windows=None,
    )


def corruption_plan(mask: MaskSpec, rng: RngStream) -> CorruptionPlan:
    """I.i.d. 80/10/10 action draw over masked points, row-major order.

    Random-replace donors are drawn uniformly from the sample's own T*D
    points (masked or not).
    """
    m = mask.mask
    T, D = m.shape
    action = np.full((T, D), -1, dtype=np.int8)
    donor_t = np.full((T, D), -1, dtype=np.int32)
    donor_d = np.full((T, D), -1, dtype=np.int32)
    points = np.argwhere(m)  # row-major (t, d) order
    n = len(points)
    if n == 0:
        return CorruptionPlan(action, donor_t, donor_d)
    u = np.asarray(rng.uniform(size=n))
    acts = np.where(u < 0.8, Action.MASK_TOKEN, np.where(u < 0.9, Action.RANDOM_REPLACE, Action.KEEP))
    flat_donors = np.asarray(rng.integers(0, T * D, size=n))
    for (t, d), a, donor in zip(points, acts, flat_donors):
        action[t, d] = a
        if a == Action.RANDOM_REPLACE:
            donor_t[t, d] = donor // D
            donor_d[t, d] = donor % D
    return CorruptionPlan(action, donor_t, donor_d)


def coarsen(mask: MaskSpec, merge_factors: list[int]) -> LayerMasks:
    """Propagate the point mask through cumulative temporal merging.

    Each layer's mask ALL-reduces groups of ``merge_factors[l]`` consecutive
    steps of the previous layer's mask; a trailing partial group reduces over
    its actual members (padding repeats the last vector, which cannot unmask
    a segment).
    """
    if any(m < 1 for m in merge_factors):
        raise ValueError(f"merge factors must be positive, got {merge_factors}")
    current = mask.mask.copy()
    out = []
    for m in merge_factors:
        if m > 1:
            T_prev, D = current.shape
            T_next = -(-T_prev // m)
            merged = np.zeros((T_next, D), dtype=bool)
            for i in range(T_next):
                merged[i] = current[i * m : (i + 1) * m].all(axis=0)
            current = merged
        out.append(current.copy())
    return LayerMasks(masks=out)
