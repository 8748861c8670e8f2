"""Synthetic multi-speaker "recordings" with exact activity and token targets.

A speaker renders token ``v`` as ``timbre * E[v] + noise`` where ``E`` is a
fixed token-embedding table shared by everybody and the timbre is built
from the speaker's unit identity vector ``u`` as ``1 + strength*sqrt(F)*u``.
A lone speaker is decodable from the shared table alone, but in a mixture
the binding between tokens and voices is carried only by the timbre, so
two fully overlapped speakers with identical STNO masks can only be told
apart by someone who knows what the target sounds like.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diar_io import ActivityMatrix, activity_to_segments
from .enrollment import build_enrollment_mixture
from .model import IGNORE_INDEX


@dataclass
class SynthConfig:
    n_features: int = 24
    vocab: int = 16
    run_length: int = 2
    obs_noise: float = 0.05
    identity_strength: float = 1.0
    frame_rate: float = 50.0
    segment_frames: int = 40
    max_speakers: int = 3
    overlap_range: tuple[float, float] = (0.8, 1.0)
    noise_prob: float = 0.3
    noise_std: float = 0.1
    enroll_frames: int = 100
    enroll_interferers: int = 2
    enroll_overlap_range: tuple[float, float] = (0.3, 1.0)
    embedding_seed: int = 1234

    def __post_init__(self):
        self.overlap_range = tuple(self.overlap_range)
        self.enroll_overlap_range = tuple(self.enroll_overlap_range)
        for lo, hi in (self.overlap_range, self.enroll_overlap_range):
            if not 0.0 <= lo <= hi <= 1.0:
                raise ValueError("overlap ranges must satisfy 0 <= lo <= hi <= 1")

    @property
    def recording_frames(self) -> int:
        """Fixed canvas length: room for the largest offset the overlap range allows."""
        return self.segment_frames + int(round((1.0 - self.overlap_range[0]) * self.segment_frames))


@dataclass
class SpeakerProfile:
    speaker_id: str
    identity_vector: np.ndarray = field(repr=False)
    token_sequence: np.ndarray = field(repr=False)


@dataclass
class MixtureSample:
    features: np.ndarray = field(repr=False)
    activity: ActivityMatrix
    transcripts: np.ndarray = field(repr=False)  # (S, T0) tokens, IGNORE_INDEX where inactive
    profiles: list[SpeakerProfile] = field(repr=False)
    target: int | None = None
    enrollment_features: np.ndarray | None = field(default=None, repr=False)
    enrollment_activity: ActivityMatrix | None = None


def token_table(cfg: SynthConfig) -> np.ndarray:
    """Shared token embeddings, rows scaled to norm sqrt(F)."""
    rng = np.random.default_rng(cfg.embedding_seed)
    table = rng.standard_normal((cfg.vocab, cfg.n_features))
    return table / np.linalg.norm(table, axis=1, keepdims=True) * np.sqrt(cfg.n_features)


def generate_speaker(
    rng: np.random.Generator,
    n_features: int,
    vocab: int,
    length: int,
    run_length: int = 2,
    speaker_id: str = "spk",
) -> SpeakerProfile:
    if n_features < 1 or vocab < 1 or length < 1 or run_length < 1:
        raise ValueError("n_features, vocab, length and run_length must be >= 1")
    identity = rng.standard_normal(n_features)
    identity /= np.linalg.norm(identity)
    runs = -(-length // run_length)
    tokens = np.repeat(rng.integers(0, vocab, size=runs), run_length)[:length]
    return SpeakerProfile(speaker_id, identity, tokens)


def timbre(identity: np.ndarray, strength: float) -> np.ndarray:
    return 1.0 + strength * np.sqrt(identity.size) * identity


def render_frames(
    profile: SpeakerProfile,
    table: np.ndarray,
    rng: np.random.Generator,
    start: int = 0,
    stop: int | None = None,
    obs_noise: float = 0.05,
    strength: float = 1.0,
) -> np.ndarray:
    tokens = profile.token_sequence[start:stop]
    frames = timbre(profile.identity_vector, strength) * table[tokens]
    if obs_noise > 0:
        frames = frames + rng.normal(0.0, obs_noise, size=frames.shape)
    return frames


def decode_frames(frames: np.ndarray, identity: np.ndarray, table: np.ndarray, strength: float = 1.0):
    """Nearest rendered token for a single known speaker (noise-free oracle)."""
    templates = timbre(identity, strength) * table
    dist = ((frames[:, None, :] - templates[None]) ** 2).sum(axis=-1)
    return dist.argmin(axis=1)


def _new_speaker(rng, cfg: SynthConfig, length: int, speaker_id: str, taken=()) -> SpeakerProfile:
    while True:
        profile = generate_speaker(rng, cfg.n_features, cfg.vocab, length, cfg.run_length, speaker_id)
        # redraw on the (practically impossible) event of a duplicate identity
        if not any(np.array_equal(profile.identity_vector, t.identity_vector) for t in taken):
            return profile


def make_enrollment(
    target: SpeakerProfile,
    rng: np.random.Generator,
    cfg: SynthConfig,
    table: np.ndarray | None = None,
    n_interferers: int | None = None,
    overlap: float | None = None,
) -> tuple[np.ndarray, ActivityMatrix]:
    """A fresh utterance of the target mixed with fresh interfering speakers."""
    table = token_table(cfg) if table is None else table
    n_interferers = cfg.enroll_interferers if n_interferers is None else n_interferers
    if overlap is None:
        overlap = rng.uniform(*cfg.enroll_overlap_range)
    n = cfg.enroll_frames
    # new token sequence for the target: never the utterance used in the mixture
    utterance = SpeakerProfile(
        target.speaker_id,
        target.identity_vector,
        generate_speaker(rng, cfg.n_features, cfg.vocab, n, cfg.run_length).token_sequence,
    )
    target_stream = render_frames(utterance, table, rng, obs_noise=cfg.obs_noise, strength=cfg.identity_strength)
    interferers = []
    for i in range(n_interferers):
        other = _new_speaker(rng, cfg, n, f"enroll_interferer{i}", [target])
        interferers.append(render_frames(other, table, rng, obs_noise=cfg.obs_noise, strength=cfg.identity_strength))
    return build_enrollment_mixture(target_stream, interferers, overlap, rng, cfg.frame_rate)


def generate_mixture(
    n_speakers: int,
    rng: np.random.Generator,
    cfg: SynthConfig,
    overlap_range: tuple[float, float] | None = None,
    target: int | None = None,
    with_enrollment: bool = True,
    table: np.ndarray | None = None,
) -> MixtureSample:
    """Overlapped mixture of ``n_speakers`` equal-length utterances.

    Speaker j > 0 starts round((1 - r_j) * L) frames after speaker 0 with
    r_j ~ U(overlap_range), so every pair overlaps by a ratio inside the
    range.  A target is drawn uniformly unless given, and its enrollment
    mixture is attached.
    """
    if not 1 <= n_speakers <= cfg.max_speakers:
        raise ValueError(f"n_speakers must be in [1, {cfg.max_speakers}]")
    lo, hi = cfg.overlap_range if overlap_range is None else overlap_range
    if not 0.0 <= lo <= hi <= 1.0:
        raise ValueError("overlap_range must satisfy 0 <= lo <= hi <= 1")
    table = token_table(cfg) if table is None else table
    seg = cfg.segment_frames
    total = max(cfg.recording_frames, seg + int(round((1.0 - lo) * seg)))
    profiles = []
    for i in range(n_speakers):
        profiles.append(_new_speaker(rng, cfg, seg, f"spk{i}", profiles))
    offsets = [0] + [int(round((1.0 - rng.uniform(lo, hi)) * seg)) for _ in range(n_speakers - 1)]
    features = np.zeros((total, cfg.n_features))
    activity = np.zeros((n_speakers, total))
    transcripts = np.full((n_speakers, total), IGNORE_INDEX, dtype=np.int64)
    for i, (profile, off) in enumerate(zip(profiles, offsets)):
        features[off:off + seg] += render_frames(
            profile, table, rng, obs_noise=cfg.obs_noise, strength=cfg.identity_strength
        )
        activity[i, off:off + seg] = 1.0
        transcripts[i, off:off + seg] = profile.token_sequence
    if rng.random() < cfg.noise_prob:
        # synthetic stand-in for additive background noise
        features += rng.normal(0.0, cfg.noise_std, size=features.shape)
    sample = MixtureSample(
        features=features,
        activity=ActivityMatrix([p.speaker_id for p in profiles], cfg.frame_rate, activity),
        transcripts=transcripts,
        profiles=profiles,
    )
    if target is None:
        target = int(rng.integers(n_speakers))
    if not 0 <= target < n_speakers:
        raise ValueError("target index out of range")
    sample.target = target
    if with_enrollment:
        sample.enrollment_features, sample.enrollment_activity = make_enrollment(
            profiles[target], rng, cfg, table
        )
    return sample


def dump_dataset(out_dir, samples: list[MixtureSample], cfg: SynthConfig, seed: int) -> Path:
    """Write per-sample feature binaries plus JSON sidecars and a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        stem = f"sample{i:05d}"
        s.features.astype("<f8").tofile(out / f"{stem}.features.f64")
        sidecar = {
            "num_frames": int(s.features.shape[0]),
            "n_features": int(s.features.shape[1]),
            "frame_rate": cfg.frame_rate,
            "target": s.target,
            "segments": [
                {"speaker": r.speaker, "onset": r.onset, "duration": r.duration}
                for r in activity_to_segments(s.activity, stem)
            ],
            "transcripts": {
                spk: s.transcripts[k].tolist() for k, spk in enumerate(s.activity.speakers)
            },
        }
        if s.enrollment_features is not None:
            s.enrollment_features.astype("<f8").tofile(out / f"{stem}.enroll.f64")
            sidecar["enrollment_num_frames"] = int(s.enrollment_features.shape[0])
            sidecar["enrollment_segments"] = [
                {"speaker": r.speaker, "onset": r.onset, "duration": r.duration}
                for r in activity_to_segments(s.enrollment_activity, stem)
            ]
        (out / f"{stem}.json").write_text(json.dumps(sidecar))
        entries.append(stem)
    manifest = {"seed": seed, "config": asdict(cfg), "samples": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out
