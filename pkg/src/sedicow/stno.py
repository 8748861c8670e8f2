"""Silence/Target/Non-target/Overlap masks and their training augmentations."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diar_io import ActivityMatrix, _resample_rows

SILENCE, TARGET, NON_TARGET, OVERLAP = range(4)
CLASS_NAMES = ("S", "T", "N", "O")


@dataclass
class StnoMask:
    """Per-frame class probabilities, columns ordered (S, T, N, O)."""

    frame_rate: float
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != 4:
            raise ValueError(f"STNO values must have shape (T, 4), got {self.values.shape}")
        if self.values.size:
            if self.values.min() < 0:
                raise ValueError("STNO probabilities must be >= 0")
            if np.abs(self.values.sum(axis=1) - 1.0).max() > 1e-9:
                raise ValueError("STNO rows must sum to 1")

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]


def stno_values(d: np.ndarray, target_index: int) -> np.ndarray:
    """STNO probabilities (T x 4) for activity rows ``d`` (S x T).

    Uses the factored forms p_N = (1-d_k)(1-q) and p_O = d_k(1-q), with
    q the product of (1 - d_s) over non-target speakers.  They equal
    (1 - p_S) - d_k and d_k - p_T exactly but cannot go negative by rounding.
    """
    d = np.asarray(d, dtype=np.float64)
    if not 0 <= target_index < d.shape[0]:
        raise ValueError(f"target_index {target_index} out of range for {d.shape[0]} speakers")
    dk = d[target_index]
    others = np.prod(np.delete(1.0 - d, target_index, axis=0), axis=0)
    p_s = (1.0 - dk) * others
    p_t = dk * others
    p_n = (1.0 - dk) * (1.0 - others)
    p_o = dk * (1.0 - others)
    return np.stack([p_s, p_t, p_n, p_o], axis=1)


def compute_stno(m: ActivityMatrix, target_index: int) -> StnoMask:
    return StnoMask(m.frame_rate, stno_values(m.values, target_index))


def resample_stno(mask: StnoMask, target_rate: float) -> StnoMask:
    """Mean-pool a mask onto another frame rate (same rule as activity matrices)."""
    if target_rate == mask.frame_rate:
        return StnoMask(mask.frame_rate, mask.values.copy())
    values = _resample_rows(mask.values.T, mask.frame_rate, target_rate).T
    return StnoMask(target_rate, values)


def stno_gaussian_noise(
    mask: StnoMask,
    sigma: float = 0.2,
    apply_prob: float = 0.75,
    rng: np.random.Generator | None = None,
) -> StnoMask:
    """Add N(0, sigma^2) per entry, clip at zero and renormalize rows.

    One Bernoulli(apply_prob) draw decides for the whole mask.  Rows whose
    entries all clip to zero keep their original values.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if not 0 <= apply_prob <= 1:
        raise ValueError("apply_prob must be in [0, 1]")
    rng = np.random.default_rng() if rng is None else rng
    if rng.random() >= apply_prob or sigma == 0:
        return StnoMask(mask.frame_rate, mask.values.copy())
    noise = rng.normal(0.0, sigma, size=mask.values.shape)
    return StnoMask(mask.frame_rate, renormalize_noisy(mask.values, noise))


def renormalize_noisy(values: np.ndarray, noise: np.ndarray) -> np.ndarray:
    clipped = np.maximum(values + noise, 0.0)
    totals = clipped.sum(axis=1, keepdims=True)
    degenerate = totals[:, 0] == 0
    out = clipped / np.where(degenerate[:, None], 1.0, totals)
    out[degenerate] = values[degenerate]
    return out


def stno_segment_flip(
    mask: StnoMask,
    apply_prob: float = 0.3,
    seg_len_range: tuple[float, float] = (0.1, 1.0),
    flip_prob: float = 0.1,
    rng: np.random.Generator | None = None,
) -> StnoMask:
    """Swap the dominant class with a random other class on random segments.

    Segment lengths are drawn uniformly from ``seg_len_range`` seconds
    (at least one frame).  Within a flipped segment, the column of the class
    with the highest segment-mean probability is exchanged, frame by frame,
    with the column of one uniformly chosen other class.
    """
    lo, hi = seg_len_range
    if not 0 < lo <= hi:
        raise ValueError("seg_len_range must satisfy 0 < lo <= hi")
    if not (0 <= apply_prob <= 1 and 0 <= flip_prob <= 1):
        raise ValueError("probabilities must be in [0, 1]")
    rng = np.random.default_rng() if rng is None else rng
    values = mask.values.copy()
    if rng.random() >= apply_prob:
        return StnoMask(mask.frame_rate, values)
    start = 0
    n = values.shape[0]
    while start < n:
        length = max(1, int(round(rng.uniform(lo, hi) * mask.frame_rate)))
        stop = min(n, start + length)
        if rng.random() < flip_prob:
            dominant = int(np.argmax(values[start:stop].mean(axis=0)))
            choices = [c for c in range(4) if c != dominant]
            other = choices[rng.integers(len(choices))]
            values[start:stop, [dominant, other]] = values[start:stop, [other, dominant]]
        start = stop
    return StnoMask(mask.frame_rate, values)


def joint_spec_augment(
    features: np.ndarray,
    mask: StnoMask,
    time_masks: int = 2,
    max_time: int = 50,
    freq_masks: int = 2,
    max_freq: int | None = None,
    rng: np.random.Generator | None = None,
    return_time_spans: bool = False,
):
    """SpecAugment over features and mask together.

    Time masks zero feature rows and turn the same mask rows into pure
    silence; frequency masks only touch the features.  With
    ``return_time_spans`` the masked ``(start, stop)`` frame spans are
    returned as a third value.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError("features must be a (T, F) array")
    if features.shape[0] != mask.num_frames:
        raise ValueError(
            f"features have {features.shape[0]} frames but the mask has {mask.num_frames}"
        )
    rng = np.random.default_rng() if rng is None else rng
    n_frames, n_bins = features.shape
    if max_freq is None:
        max_freq = max(1, n_bins // 8)
    feats = features.copy()
    values = mask.values.copy()
    spans = []
    for _ in range(time_masks):
        width = int(rng.integers(0, min(max_time, n_frames) + 1))
        start = int(rng.integers(0, n_frames - width + 1))
        feats[start:start + width] = 0.0
        values[start:start + width] = (1.0, 0.0, 0.0, 0.0)
        spans.append((start, start + width))
    for _ in range(freq_masks):
        width = int(rng.integers(0, min(max_freq, n_bins) + 1))
        start = int(rng.integers(0, n_bins - width + 1))
        feats[:, start:start + width] = 0.0
    if return_time_spans:
        return feats, StnoMask(mask.frame_rate, values), spans
    return feats, StnoMask(mask.frame_rate, values)


def time_mask(features: np.ndarray, mask: StnoMask, start: int, stop: int):
    """Apply one explicit time mask over frames ``[start, stop)``."""
    feats = np.array(features, dtype=np.float64)
    values = mask.values.copy()
    feats[start:stop] = 0.0
    values[start:stop] = (1.0, 0.0, 0.0, 0.0)
    return feats, StnoMask(mask.frame_rate, values)
