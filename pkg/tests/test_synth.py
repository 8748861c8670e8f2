import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sedicow.enrollment import overlap_ratio
from sedicow.model import IGNORE_INDEX
from sedicow.stno import stno_values
from sedicow.synth import (
    SynthConfig,
    decode_frames,
    dump_dataset,
    generate_mixture,
    generate_speaker,
    render_frames,
    token_table,
)

CFG = SynthConfig()


def test_speaker_basics():
    a = generate_speaker(np.random.default_rng(0), 24, 16, 41, run_length=5)
    b = generate_speaker(np.random.default_rng(1), 24, 16, 41, run_length=5)
    assert abs(np.linalg.norm(a.identity_vector) - 1) < 1e-12
    assert not np.allclose(a.identity_vector, b.identity_vector)
    assert len(a.token_sequence) == 41
    runs = a.token_sequence[:40].reshape(8, 5)
    assert (runs == runs[:, :1]).all()
    assert a.token_sequence.min() >= 0 and a.token_sequence.max() < 16
    with pytest.raises(ValueError):
        generate_speaker(np.random.default_rng(0), 0, 16, 5)


def test_decode_oracle_recovers_tokens_without_noise():
    rng = np.random.default_rng(2)
    table = token_table(CFG)
    for _ in range(20):
        spk = generate_speaker(rng, CFG.n_features, CFG.vocab, 50)
        frames = render_frames(spk, table, rng, obs_noise=0.0)
        np.testing.assert_array_equal(decode_frames(frames, spk.identity_vector, table), spk.token_sequence)


def test_same_token_different_speakers_render_differently():
    rng = np.random.default_rng(3)
    table = token_table(CFG)
    a = generate_speaker(rng, 24, 16, 4)
    b = generate_speaker(rng, 24, 16, 4)
    b.token_sequence = a.token_sequence.copy()
    fa = render_frames(a, table, rng, obs_noise=0.0)
    fb = render_frames(b, table, rng, obs_noise=0.0)
    assert not np.allclose(fa, fb)
    assert not np.allclose(fa + fb, fa) and not np.allclose(fa + fb, fb)


def test_single_speaker_mixture():
    s = generate_mixture(1, np.random.default_rng(0), CFG)
    assert s.activity.values.shape[0] == 1
    assert overlap_ratio(s.activity.values, 0) == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_pairwise_overlap_in_range(seed):
    s = generate_mixture(3, np.random.default_rng(seed), CFG, with_enrollment=False)
    act = s.activity.values
    L = CFG.segment_frames
    lo, hi = CFG.overlap_range
    for i in range(3):
        for j in range(3):
            if i != j:
                shared = (act[i] * act[j]).sum() / L
                assert lo - 1 / L <= shared <= hi + 1 / L


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3))
def test_transcripts_align_with_activity(seed, n):
    s = generate_mixture(n, np.random.default_rng(seed), CFG, with_enrollment=False)
    np.testing.assert_array_equal(s.transcripts != IGNORE_INDEX, s.activity.values == 1)
    for k in range(n):
        p = stno_values(s.activity.values, k)
        assert set(np.unique(p)) <= {0.0, 1.0}
    # the features are the sum of the rendered speakers (noise aside)
    assert s.features.shape == (s.activity.num_frames, CFG.n_features)


def test_full_overlap_gives_identical_masks():
    s = generate_mixture(2, np.random.default_rng(4), CFG, overlap_range=(1.0, 1.0))
    a = stno_values(s.activity.values, 0)
    b = stno_values(s.activity.values, 1)
    assert a.tobytes() == b.tobytes()


def test_reproducible_and_enrollment_attached():
    a = generate_mixture(2, np.random.default_rng(9), CFG)
    b = generate_mixture(2, np.random.default_rng(9), CFG)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.enrollment_features.tobytes() == b.enrollment_features.tobytes()
    assert a.enrollment_activity.speakers[0] == "target"
    assert a.enrollment_activity.values.shape[0] == 1 + CFG.enroll_interferers
    rho = overlap_ratio(a.enrollment_activity.values, 0)
    lo, hi = CFG.enroll_overlap_range
    assert lo - 0.01 <= rho <= hi + 0.01


def test_bad_arguments():
    with pytest.raises(ValueError):
        generate_mixture(4, np.random.default_rng(0), CFG)
    with pytest.raises(ValueError):
        generate_mixture(2, np.random.default_rng(0), CFG, overlap_range=(0.9, 0.8))
    with pytest.raises(ValueError):
        SynthConfig(overlap_range=(0.5, 1.2))


def test_dump_dataset(tmp_path):
    rng = np.random.default_rng(0)
    samples = [generate_mixture(2, rng, CFG) for _ in range(3)]
    out = dump_dataset(tmp_path / "ds", samples, CFG, seed=0)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["samples"] == ["sample00000", "sample00001", "sample00002"]
    side = json.loads((out / "sample00001.json").read_text())
    feats = np.fromfile(out / "sample00001.features.f64", dtype="<f8").reshape(side["num_frames"], -1)
    np.testing.assert_array_equal(feats, samples[1].features)
    assert set(side["transcripts"]) == {"spk0", "spk1"}
