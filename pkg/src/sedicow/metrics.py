"""Multi-speaker transcription and diarization scoring.

* ``word_error_rate``: plain Levenshtein WER.
* ``tcp_wer``: time-constrained minimum-permutation WER.  A hyp word may
  match or substitute a ref word only when their start times differ by at
  most ``collar`` seconds; otherwise it costs a deletion plus an insertion.
* ``der``: frame-based diarization error rate with a no-score collar.
* ``msce``: mean absolute speaker-count error.
"""
from __future__ import annotations

import itertools
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .diar_io import ActivityMatrix

# exhaustive assignment is used for both tcpWER and DER
MAX_SPEAKERS = 8


class UnsupportedError(ValueError):
    """Input is outside what the exhaustive scorers handle."""


@dataclass
class SegListEntry:
    speaker: str
    words: list[tuple[str, float, float]] = field(default_factory=list)

    def __post_init__(self):
        prev = -math.inf
        for text, start, end in self.words:
            if end < start:
                raise ValueError(f"word {text!r} ends before it starts")
            if start < prev:
                raise ValueError(f"word times of speaker {self.speaker!r} are not sorted")
            prev = start


@dataclass
class WerResult:
    errors: int
    ref_len: int
    rate: float  # math.inf when ref is empty and hyp is not

    @property
    def infinite(self) -> bool:
        return math.isinf(self.rate)


def _words(x) -> list[str]:
    return x.split() if isinstance(x, str) else list(x)


def _rate(errors: int, ref_len: int) -> float:
    if ref_len == 0:
        return 0.0 if errors == 0 else math.inf
    return errors / ref_len


def edit_distance(ref, hyp) -> int:
    ref, hyp = _words(ref), _words(hyp)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def word_error_rate(ref, hyp) -> WerResult:
    """Levenshtein word errors.  Accepts strings (split on whitespace) or word lists."""
    ref, hyp = _words(ref), _words(hyp)
    errors = edit_distance(ref, hyp)
    return WerResult(errors, len(ref), _rate(errors, len(ref)))


# segment lists ----------------------------------------------------------------


def interpolate_words(segment: dict) -> list[tuple[str, float, float]]:
    """Spread an utterance's words evenly over its time span."""
    words = segment["words"].split()
    start, end = float(segment["start_time"]), float(segment["end_time"])
    step = (end - start) / len(words) if words else 0.0
    return [(w, start + i * step, start + (i + 1) * step) for i, w in enumerate(words)]


def to_streams(seglist) -> list[SegListEntry]:
    """Group a segment list (or pass through SegListEntry items) into one stream per speaker."""
    if isinstance(seglist, dict):
        seglist = list(seglist.values())
    if all(isinstance(s, SegListEntry) for s in seglist):
        return list(seglist)
    by_speaker = defaultdict(list)
    for segment in seglist:
        by_speaker[str(segment["speaker"])].extend(interpolate_words(segment))
    return [
        SegListEntry(spk, sorted(words, key=lambda w: (w[1], w[2])))
        for spk, words in by_speaker.items()
    ]


def time_constrained_distance(ref_words, hyp_words, collar: float) -> int:
    """Edit distance where pairing two words needs |start difference| <= collar."""
    n = len(hyp_words)
    prev = list(range(n + 1))
    for i, (rw, rs, _) in enumerate(ref_words, 1):
        cur = [i] + [0] * n
        for j, (hw, hs, _) in enumerate(hyp_words, 1):
            best = min(prev[j] + 1, cur[j - 1] + 1)
            if abs(rs - hs) <= collar:
                best = min(best, prev[j - 1] + (rw != hw))
            cur[j] = best
        prev = cur
    return prev[-1]


@dataclass
class TcpWerResult:
    errors: int
    ref_len: int
    rate: float
    assignment: dict[str, str]  # hyp speaker -> ref speaker


def tcp_wer_details(ref, hyp, collar: float = 5.0) -> TcpWerResult:
    ref_streams, hyp_streams = to_streams(ref), to_streams(hyp)
    if len(ref_streams) > MAX_SPEAKERS or len(hyp_streams) > MAX_SPEAKERS:
        raise UnsupportedError(f"at most {MAX_SPEAKERS} speakers per side are supported")
    if collar < 0:
        raise ValueError("collar must be >= 0")
    ref_len = sum(len(s.words) for s in ref_streams)
    hyp_len = sum(len(s.words) for s in hyp_streams)
    # pairing r with h changes the all-unassigned total by gain[r, h] <= 0,
    # so some maximum matching is always optimal
    gain = np.zeros((len(ref_streams), len(hyp_streams)), dtype=np.int64)
    for r, rs in enumerate(ref_streams):
        for h, hs in enumerate(hyp_streams):
            dist = time_constrained_distance(rs.words, hs.words, collar)
            gain[r, h] = dist - len(rs.words) - len(hs.words)
    best, best_pairs = 0, []
    n_ref, n_hyp = gain.shape
    if n_ref and n_hyp:
        best = None
        if n_ref >= n_hyp:
            candidates = ([(r, h) for h, r in enumerate(perm)]
                          for perm in itertools.permutations(range(n_ref), n_hyp))
        else:
            candidates = ([(r, h) for r, h in enumerate(perm)]
                          for perm in itertools.permutations(range(n_hyp), n_ref))
        for pairs in candidates:
            total = sum(int(gain[r, h]) for r, h in pairs)
            if best is None or total < best:
                best, best_pairs = total, pairs
    errors = ref_len + hyp_len + best
    assignment = {hyp_streams[h].speaker: ref_streams[r].speaker for r, h in sorted(best_pairs)}
    return TcpWerResult(errors, ref_len, _rate(errors, ref_len), assignment)


def tcp_wer(ref, hyp, collar: float = 5.0) -> float:
    """Time-constrained minimum-permutation WER (errors / reference words)."""
    return tcp_wer_details(ref, hyp, collar).rate


def cp_wer(ref, hyp) -> float:
    """Concatenated minimum-permutation WER: tcpWER without a time constraint."""
    return tcp_wer(ref, hyp, collar=math.inf)


# diarization ---------------------------------------------------------------------


@dataclass
class DerResult:
    missed: float
    false_alarm: float
    confusion: float
    ref_speech: float
    mapping: dict[str, str]  # hyp speaker -> ref speaker

    @property
    def rate(self) -> float:
        return (self.missed + self.false_alarm + self.confusion) / self.ref_speech


def collar_mask(ref: np.ndarray, frame_rate: float, collar: float) -> np.ndarray:
    """Frames to score: midpoints farther than ``collar`` from every ref boundary.

    A boundary is a frame edge where any ref speaker switches on or off;
    the edges of the recording itself are not boundaries.
    """
    n = ref.shape[1]
    keep = np.ones(n, dtype=bool)
    if collar <= 0 or n == 0:
        return keep
    changes = np.flatnonzero((np.diff(ref, axis=1) != 0).any(axis=0)) + 1
    if changes.size == 0:
        return keep
    mid = (np.arange(n) + 0.5) / frame_rate
    dist = np.abs(mid[:, None] - changes[None, :] / frame_rate).min(axis=1)
    return dist >= collar


def der_details(ref: ActivityMatrix, hyp: ActivityMatrix, collar: float = 0.25) -> DerResult:
    if ref.frame_rate != hyp.frame_rate or ref.values.shape[1] != hyp.values.shape[1]:
        raise ValueError("ref and hyp must share frame rate and duration")
    if len(ref.speakers) > MAX_SPEAKERS or len(hyp.speakers) > MAX_SPEAKERS:
        raise UnsupportedError(f"at most {MAX_SPEAKERS} speakers per side are supported")
    r = ref.values > 0.5
    h = hyp.values > 0.5
    keep = collar_mask(r, ref.frame_rate, collar)
    r, h = r[:, keep], h[:, keep]
    dt = 1.0 / ref.frame_rate
    n_ref, n_hyp = r.sum(axis=0), h.sum(axis=0)
    ref_speech = float(n_ref.sum()) * dt
    if ref_speech == 0:
        raise ValueError("reference has no scored speech: DER is undefined")
    # overlap[i, j] = frames where ref i and hyp j are both active
    overlap = r.astype(np.int64) @ h.T.astype(np.int64)
    best, best_pairs = 0, []
    if r.shape[0] and h.shape[0]:
        best = -1
        small, large = sorted([r.shape[0], h.shape[0]])
        for perm in itertools.permutations(range(large), small):
            if r.shape[0] <= h.shape[0]:
                pairs = list(enumerate(perm))
            else:
                pairs = [(i, j) for j, i in enumerate(perm)]
            total = sum(int(overlap[i, j]) for i, j in pairs)
            if total > best:
                best, best_pairs = total, pairs
    missed = float(np.maximum(n_ref - n_hyp, 0).sum()) * dt
    false_alarm = float(np.maximum(n_hyp - n_ref, 0).sum()) * dt
    confusion = (float(np.minimum(n_ref, n_hyp).sum()) - best) * dt
    mapping = {hyp.speakers[j]: ref.speakers[i] for i, j in sorted(best_pairs)}
    return DerResult(missed, false_alarm, confusion, ref_speech, mapping)


def der(ref: ActivityMatrix, hyp: ActivityMatrix, collar: float = 0.25) -> float:
    return der_details(ref, hyp, collar).rate


def msce(ref_counts, hyp_counts) -> float:
    """Mean absolute difference between reference and hypothesis speaker counts."""
    ref_counts, hyp_counts = list(ref_counts), list(hyp_counts)
    if len(ref_counts) != len(hyp_counts):
        raise ValueError("count lists differ in length")
    if not ref_counts:
        raise ValueError("need at least one recording")
    return sum(abs(int(a) - int(b)) for a, b in zip(ref_counts, hyp_counts)) / len(ref_counts)


# frame decoding --------------------------------------------------------------------


def token_runs_to_words(tokens, frame_rate: float, ignore=(-1,)) -> list[tuple[str, float, float]]:
    """Each maximal run of one token becomes a timed word; ignored tokens emit nothing."""
    words = []
    tokens = list(tokens)
    start = 0
    for t in range(1, len(tokens) + 1):
        if t == len(tokens) or tokens[t] != tokens[start]:
            if tokens[start] not in ignore:
                words.append((f"w{int(tokens[start])}", start / frame_rate, t / frame_rate))
            start = t
    return words


# reports ---------------------------------------------------------------------------


def _by_recording(seglist) -> dict[str, list[dict]]:
    groups = defaultdict(list)
    for segment in seglist:
        groups[segment.get("session_id", "rec")].append(segment)
    return dict(groups)


def tcpwer_report(ref: list[dict], hyp: list[dict], collar: float = 5.0) -> dict:
    """Per-recording tcpWER with macro and micro averages."""
    ref_groups, hyp_groups = _by_recording(ref), _by_recording(hyp)
    rows = []
    for rec in sorted(set(ref_groups) | set(hyp_groups)):
        res = tcp_wer_details(ref_groups.get(rec, []), hyp_groups.get(rec, []), collar)
        rows.append({"recording": rec, "errors": res.errors, "ref_words": res.ref_len, "rate": res.rate})
    return _summarize(rows, "errors", "ref_words")


def der_report(ref: dict[str, ActivityMatrix], hyp: dict[str, ActivityMatrix], collar: float = 0.25) -> dict:
    rows = []
    for rec in sorted(ref):
        if rec not in hyp:
            raise ValueError(f"recording {rec!r} missing from hypothesis")
        res = der_details(ref[rec], hyp[rec], collar)
        err = res.missed + res.false_alarm + res.confusion
        rows.append({
            "recording": rec, "missed": res.missed, "false_alarm": res.false_alarm,
            "confusion": res.confusion, "error_time": err, "ref_speech": res.ref_speech,
            "rate": res.rate,
        })
    return _summarize(rows, "error_time", "ref_speech")


def _summarize(rows: list[dict], num: str, den: str) -> dict:
    if not rows:
        return {"per_recording": [], "macro_average": None, "micro_average": None}
    total_den = sum(r[den] for r in rows)
    total_num = sum(r[num] for r in rows)
    return {
        "per_recording": rows,
        "macro_average": sum(r["rate"] for r in rows) / len(rows),
        "micro_average": _rate(total_num, total_den) if total_den or total_num else 0.0,
    }


def format_table(report: dict) -> str:
    rows = report["per_recording"]
    if not rows:
        return "(no recordings)\n"
    keys = list(rows[0])
    lines = ["\t".join(keys)]
    for r in rows:
        lines.append("\t".join(f"{r[k]:.4f}" if isinstance(r[k], float) else str(r[k]) for k in keys))
    lines.append(f"macro\t{report['macro_average']:.4f}")
    lines.append(f"micro\t{report['micro_average']:.4f}")
    return "\n".join(lines) + "\n"
