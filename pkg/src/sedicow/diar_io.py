"""RTTM and segment-list I/O, and frame-level speaker activity matrices."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class RttmParseError(ValueError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


@dataclass(frozen=True)
class RttmRecord:
    recording_id: str
    onset: float
    duration: float
    speaker: str

    def __post_init__(self):
        if self.onset < 0:
            raise ValueError(f"onset must be >= 0, got {self.onset}")
        if self.duration <= 0:
            raise ValueError(f"duration must be > 0, got {self.duration}")
        if not self.speaker:
            raise ValueError("speaker label must be non-empty")

    @property
    def end(self) -> float:
        return self.onset + self.duration


@dataclass
class ActivityMatrix:
    """Per-speaker, per-frame speech probabilities ``values[s, t]``."""

    speakers: list[str]
    frame_rate: float
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != len(self.speakers):
            raise ValueError(
                f"values shape {self.values.shape} does not match {len(self.speakers)} speakers"
            )
        if len(set(self.speakers)) != len(self.speakers):
            raise ValueError("speaker labels must be unique")
        if self.frame_rate <= 0:
            raise ValueError("frame_rate must be > 0")
        if self.values.size and (self.values.min() < 0 or self.values.max() > 1):
            raise ValueError("activity values must lie in [0, 1]")

    @property
    def num_frames(self) -> int:
        return self.values.shape[1]

    @property
    def duration(self) -> float:
        return self.num_frames / self.frame_rate

    def row(self, speaker: str) -> np.ndarray:
        return self.values[self.speakers.index(speaker)]


def parse_rttm(text: str) -> list[RttmRecord]:
    records = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if fields[0] != "SPEAKER":
            continue
        if len(fields) < 9:
            raise RttmParseError(line_no, f"expected >= 9 fields, got {len(fields)}")
        try:
            onset = float(fields[3])
            duration = float(fields[4])
        except ValueError:
            raise RttmParseError(line_no, "onset/duration are not numeric") from None
        if not (math.isfinite(onset) and math.isfinite(duration)):
            raise RttmParseError(line_no, "onset/duration are not finite")
        if duration <= 0:
            raise RttmParseError(line_no, f"duration <= 0 ({duration})")
        if onset < 0:
            raise RttmParseError(line_no, f"onset < 0 ({onset})")
        records.append(RttmRecord(fields[1], onset, duration, fields[7]))
    return records


def format_rttm(records: list[RttmRecord]) -> str:
    return "".join(
        f"SPEAKER {r.recording_id} 1 {r.onset:.3f} {r.duration:.3f} <NA> <NA> {r.speaker} <NA> <NA>\n"
        for r in records
    )


def read_rttm(path) -> list[RttmRecord]:
    return parse_rttm(Path(path).read_text())


def write_rttm(path, records: list[RttmRecord]):
    Path(path).write_text(format_rttm(records))


def _speaker_order(records) -> list[str]:
    order = []
    for r in records:
        if r.speaker not in order:
            order.append(r.speaker)
    return order


def segments_to_activity(
    records: list[RttmRecord], frame_rate: float, total_duration: float
) -> ActivityMatrix:
    """Binary activity: frame t is active iff its midpoint lies in a segment.

    Segments are treated as the interval (onset, end]: a midpoint sitting
    exactly on the onset belongs to the previous frame's side.  Times are
    compared after rounding to 1e-9 s so that float noise such as
    0.05 + 0.10 = 0.15000000000000002 does not move a boundary.
    """
    if frame_rate <= 0:
        raise ValueError("frame_rate must be > 0")
    if records and total_duration < max(r.end for r in records) - 1e-9:
        raise ValueError("total_duration is shorter than the last segment end")
    if total_duration < 0:
        raise ValueError("total_duration must be >= 0")
    speakers = _speaker_order(records)
    # guard against float noise such as 1.0 * 10 = 10.000000000000002
    num_frames = math.ceil(round(total_duration * frame_rate, 9))
    midpoints = np.round((np.arange(num_frames) + 0.5) / frame_rate, 9)
    values = np.zeros((len(speakers), num_frames))
    for r in records:
        s = speakers.index(r.speaker)
        inside = (midpoints > round(r.onset, 9)) & (midpoints <= round(r.end, 9))
        values[s, inside] = 1.0
    return ActivityMatrix(speakers, frame_rate, values)


def activity_to_segments(m: ActivityMatrix, recording_id: str = "rec") -> list[RttmRecord]:
    """Convert runs of active (>= 0.5) frames back into RTTM records."""
    records = []
    for s, speaker in enumerate(m.speakers):
        active = np.concatenate([[False], m.values[s] >= 0.5, [False]])
        edges = np.flatnonzero(active[1:] != active[:-1])
        for start, stop in zip(edges[::2], edges[1::2]):
            records.append(
                RttmRecord(recording_id, float(start / m.frame_rate), float((stop - start) / m.frame_rate), speaker)
            )
    records.sort(key=lambda r: (r.onset, r.speaker))
    return records


def resample_activity(m: ActivityMatrix, target_rate: float) -> ActivityMatrix:
    """Mean-pool (or spread) activity onto a new frame rate.

    Output frame j covers ``[j, j+1) / target_rate`` and takes the mean of the
    source frames whose midpoints fall inside; a span with no midpoint takes
    the nearest source frame.
    """
    if target_rate <= 0:
        raise ValueError("target_rate must be > 0")
    if target_rate == m.frame_rate:
        return ActivityMatrix(list(m.speakers), m.frame_rate, m.values.copy())
    values = _resample_rows(m.values, m.frame_rate, target_rate)
    return ActivityMatrix(list(m.speakers), target_rate, values)


def _resample_rows(values: np.ndarray, source_rate: float, target_rate: float) -> np.ndarray:
    """Resample along the last axis; shared by activity matrices and STNO masks."""
    n_src = values.shape[-1]
    n_out = math.ceil(round(n_src / source_rate * target_rate, 9))
    if n_src == 0:
        return np.zeros(values.shape[:-1] + (0,))
    midpoints = (np.arange(n_src) + 0.5) / source_rate
    # output bin of each source frame midpoint
    bins = np.floor(np.round(midpoints * target_rate, 9)).astype(np.int64)
    bins = np.clip(bins, 0, n_out - 1)
    pool = np.zeros((n_src, n_out))
    pool[np.arange(n_src), bins] = 1.0
    sums = values @ pool
    counts = np.bincount(bins, minlength=n_out)
    out = np.empty_like(sums)
    filled = counts > 0
    out[..., filled] = sums[..., filled] / counts[filled]
    if not filled.all():
        centers = (np.arange(n_out) + 0.5) / target_rate
        nearest = np.clip(np.floor(centers * source_rate).astype(np.int64), 0, n_src - 1)
        empty = np.flatnonzero(~filled)
        out[..., empty] = values[..., nearest[empty]]
    return out


# Segment-list JSON: [{"speaker", "start_time", "end_time", "words"}, ...]


def read_seglist(path) -> list[dict]:
    data = json.loads(Path(path).read_text())
    return validate_seglist(data)


def validate_seglist(data) -> list[dict]:
    if not isinstance(data, list):
        raise ValueError("segment list must be a JSON array")
    out = []
    for i, entry in enumerate(data):
        try:
            speaker = str(entry["speaker"])
            start = float(entry["start_time"])
            end = float(entry["end_time"])
            words = str(entry["words"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"segment {i}: malformed entry ({exc})") from None
        if end < start:
            raise ValueError(f"segment {i}: end_time < start_time")
        item = {"speaker": speaker, "start_time": start, "end_time": end, "words": words}
        # optional recording/session key for multi-recording files
        if "session_id" in entry:
            item["session_id"] = str(entry["session_id"])
        out.append(item)
    return out


def write_seglist(path, segments: list[dict]):
    Path(path).write_text(json.dumps(segments, indent=1))
