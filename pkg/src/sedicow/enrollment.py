"""Self-enrollment window selection and enrollment-mixture construction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diar_io import ActivityMatrix

# window scores closer than this (relative) to the best are treated as ties
TIE_TOLERANCE = 1e-9


@dataclass(frozen=True)
class EnrollWindow:
    t_start: int
    t_end: int  # exclusive
    score: float

    @property
    def length(self) -> int:
        return self.t_end - self.t_start

    def to_seconds(self, frame_rate: float) -> dict:
        return {
            "start_seconds": self.t_start / frame_rate,
            "end_seconds": self.t_end / frame_rate,
            "score": self.score,
        }


def select_enrollment(p_target, window: int) -> EnrollWindow:
    """Fixed-length window with the largest summed target-only probability.

    The window length is ``min(window, T)``.  Ties (within a relative
    1e-9) go to the earliest start.  O(T) via prefix sums.
    """
    p = np.asarray(p_target, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("p_target must be a non-empty 1-D series")
    if window < 1:
        raise ValueError("window must be >= 1")
    w = min(window, p.size)
    prefix = np.concatenate([[0.0], np.cumsum(p)])
    scores = prefix[w:] - prefix[:-w]
    best = scores.max()
    tol = TIE_TOLERANCE * max(1.0, abs(best))
    start = int(np.flatnonzero(scores >= best - tol)[0])
    return EnrollWindow(start, start + w, float(max(scores[start], 0.0)))


def overlap_ratio(activity: np.ndarray, target: int = 0) -> float:
    """Fraction of the target's active frames where any other speaker is active."""
    active = activity[target] > 0.5
    others = np.delete(activity, target, axis=0) > 0.5
    if not active.any():
        return 0.0
    return float((active & others.any(axis=0)).sum() / active.sum())


def build_enrollment_mixture(
    target_stream: np.ndarray,
    interferer_streams: list[np.ndarray],
    overlap_ratio: float,
    rng: np.random.Generator,
    frame_rate: float = 50.0,
) -> tuple[np.ndarray, ActivityMatrix]:
    """Sum a target utterance with interferers overlapping it by ``overlap_ratio``.

    Overlap is counted on the target: round(ratio * target_frames) of its
    frames coincide with the interferers.  All interferers sit on the same
    side of the target (one random draw), so their union overlaps exactly
    that many frames.  Speaker 0 of the returned activity is the target.
    """
    if not 0.0 <= overlap_ratio <= 1.0:
        raise ValueError(f"overlap_ratio must be in [0, 1], got {overlap_ratio}")
    target_stream = np.asarray(target_stream, dtype=np.float64)
    n_target = target_stream.shape[0]
    if n_target == 0:
        raise ValueError("target stream is empty")
    n_overlap = int(round(overlap_ratio * n_target))
    right = bool(rng.integers(2)) if interferer_streams else True
    starts = [0]
    for stream in interferer_streams:
        n = len(stream)
        if n < n_overlap:
            raise ValueError(f"interferer has {n} frames, fewer than the {n_overlap} to overlap")
        starts.append(n_target - n_overlap if right else n_overlap - n)
    streams = [target_stream] + [np.asarray(s, dtype=np.float64) for s in interferer_streams]
    shift = -min(starts)
    starts = [s + shift for s in starts]
    total = max(s + len(x) for s, x in zip(starts, streams))
    features = np.zeros((total, target_stream.shape[1]))
    activity = np.zeros((len(streams), total))
    for i, (s, x) in enumerate(zip(starts, streams)):
        features[s:s + len(x)] += x
        activity[i, s:s + len(x)] = 1.0
    speakers = ["target"] + [f"interferer{i + 1}" for i in range(len(interferer_streams))]
    return features, ActivityMatrix(speakers, frame_rate, activity)
