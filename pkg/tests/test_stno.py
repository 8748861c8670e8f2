import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from sedicow.diar_io import ActivityMatrix
from sedicow.stno import (
    StnoMask,
    compute_stno,
    joint_spec_augment,
    renormalize_noisy,
    resample_stno,
    stno_gaussian_noise,
    stno_segment_flip,
    stno_values,
    time_mask,
)


def direct_formula(d, k):
    """Straight transcription of the four class probabilities."""
    others = np.ones(d.shape[1])
    for s in range(d.shape[0]):
        if s != k:
            others = others * (1 - d[s])
    p_s = np.prod(1 - d, axis=0)
    p_t = d[k] * others
    p_n = (1 - p_s) - d[k]
    p_o = d[k] - p_t
    return np.stack([p_s, p_t, p_n, p_o], axis=1)


activity = st.integers(1, 5).flatmap(
    lambda s: st.integers(1, 30).flatmap(
        lambda t: arrays(np.float64, (s, t), elements=st.floats(0, 1))
    )
)


@given(activity, st.data())
def test_matches_direct_formula_and_is_distribution(d, data):
    k = data.draw(st.integers(0, d.shape[0] - 1))
    p = stno_values(d, k)
    np.testing.assert_allclose(p, direct_formula(d, k), atol=1e-12)
    assert p.min() >= 0
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


def test_worked_example():
    d = np.array([[1.0, 1.0, 0.0, 0.5], [0.0, 1.0, 1.0, 0.5]])
    p = stno_values(d, 0)
    np.testing.assert_allclose(p, [
        [0, 1, 0, 0],  # target alone
        [0, 0, 0, 1],  # both
        [0, 0, 1, 0],  # other alone
        [0.25, 0.25, 0.25, 0.25],
    ])


def test_single_speaker_has_no_non_target():
    d = np.random.default_rng(0).random((1, 20))
    p = stno_values(d, 0)
    np.testing.assert_array_equal(p[:, 2], 0)
    np.testing.assert_array_equal(p[:, 3], 0)


def test_binary_activity_gives_one_hot_rows():
    d = np.random.default_rng(1).integers(0, 2, (3, 50)).astype(float)
    p = stno_values(d, 1)
    assert set(np.unique(p)) <= {0.0, 1.0}
    np.testing.assert_array_equal(p.sum(axis=1), 1)


def test_bad_target_index():
    with pytest.raises(ValueError):
        stno_values(np.zeros((2, 3)), 2)


def test_compute_stno_keeps_frame_rate():
    m = compute_stno(ActivityMatrix(["a", "b"], 25, np.ones((2, 4))), 0)
    assert m.frame_rate == 25 and m.num_frames == 4


def test_mask_validation():
    with pytest.raises(ValueError):
        StnoMask(10, [[0.5, 0.5, 0.5, 0.0]])
    with pytest.raises(ValueError):
        StnoMask(10, [[-0.1, 1.1, 0, 0]])


def _mask(seed, n=40, rate=50.0):
    return StnoMask(rate, np.random.default_rng(seed).dirichlet(np.ones(4), size=n))


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_gaussian_noise_keeps_rows_valid(seed):
    rng = np.random.default_rng(seed)
    out = stno_gaussian_noise(_mask(seed), 0.2, 1.0, rng)
    assert out.values.min() >= 0
    np.testing.assert_allclose(out.values.sum(axis=1), 1, atol=1e-9)


def test_gaussian_noise_off_is_identity():
    m = _mask(0)
    np.testing.assert_array_equal(stno_gaussian_noise(m, 0.2, 0.0, np.random.default_rng(0)).values, m.values)
    np.testing.assert_array_equal(stno_gaussian_noise(m, 0.0, 1.0, np.random.default_rng(0)).values, m.values)


def test_renormalize_falls_back_when_everything_clips():
    values = np.array([[0.25, 0.25, 0.25, 0.25], [1, 0, 0, 0.0]])
    noise = np.array([[-1.0, -1, -1, -1], [0, 0.5, 0, 0]])
    out = renormalize_noisy(values, noise)
    np.testing.assert_array_equal(out[0], values[0])
    np.testing.assert_allclose(out[1], [1 / 1.5, 0.5 / 1.5, 0, 0])


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_segment_flip_permutes_columns_per_frame(seed):
    m = _mask(seed, n=120)
    out = stno_segment_flip(m, 1.0, (0.1, 1.0), 0.5, np.random.default_rng(seed))
    # every row is a permutation of the original row
    np.testing.assert_array_equal(np.sort(out.values, axis=1), np.sort(m.values, axis=1))


def test_segment_flip_swaps_dominant_class():
    values = np.tile([0.7, 0.1, 0.1, 0.1], (50, 1))
    out = stno_segment_flip(StnoMask(50, values), 1.0, (1.0, 1.0), 1.0, np.random.default_rng(3))
    assert (out.values[:, 0] == 0.1).all()
    assert ((out.values == 0.7).sum(axis=1) == 1).all()


def test_spec_augment_time_masks_are_silence():
    feats = np.ones((30, 8))
    m = _mask(0, n=30)
    out_f, out_m, spans = joint_spec_augment(
        feats, m, time_masks=2, max_time=10, freq_masks=1, max_freq=2,
        rng=np.random.default_rng(5), return_time_spans=True,
    )
    for start, stop in spans:
        assert (out_f[start:stop] == 0).all()
        np.testing.assert_array_equal(out_m.values[start:stop], np.tile([1, 0, 0, 0], (stop - start, 1)))
    untouched = np.ones(30, bool)
    for start, stop in spans:
        untouched[start:stop] = False
    np.testing.assert_array_equal(out_m.values[untouched], m.values[untouched])


def test_spec_augment_shape_mismatch():
    with pytest.raises(ValueError):
        joint_spec_augment(np.ones((10, 4)), _mask(0, n=9))


def test_time_mask_helper():
    f, m = time_mask(np.ones((5, 2)), _mask(1, n=5), 1, 3)
    assert (f[1:3] == 0).all() and (f[[0, 3, 4]] == 1).all()
    np.testing.assert_array_equal(m.values[1:3], [[1, 0, 0, 0]] * 2)


def test_resample_stno_rows_stay_normalized():
    m = _mask(2, n=41, rate=50)
    out = resample_stno(m, 25)
    assert out.num_frames == 21
    np.testing.assert_allclose(out.values.sum(axis=1), 1, atol=1e-12)
    np.testing.assert_allclose(out.values[0], m.values[:2].mean(axis=0))


def test_gaussian_noise_worked_example():
    out = renormalize_noisy(np.array([[1.0, 0, 0, 0]]), np.array([[-0.3, 0.1, 0, 0]]))
    np.testing.assert_allclose(out, [[0.875, 0.125, 0, 0]])


def test_zero_masks_and_zero_flip_prob_are_identity():
    m = _mask(4, n=25)
    f = np.random.default_rng(0).normal(size=(25, 6))
    out_f, out_m = joint_spec_augment(f, m, 0, 50, 0, 2, np.random.default_rng(1))
    np.testing.assert_array_equal(out_f, f)
    np.testing.assert_array_equal(out_m.values, m.values)
    np.testing.assert_array_equal(stno_segment_flip(m, 1.0, (0.1, 1.0), 0.0, np.random.default_rng(2)).values, m.values)


def test_frequency_mask_leaves_mask_alone():
    m = _mask(5, n=25)
    out_f, out_m = joint_spec_augment(np.ones((25, 6)), m, 0, 50, 3, 2, np.random.default_rng(3))
    np.testing.assert_array_equal(out_m.values, m.values)
    assert (out_f == 0).any(axis=0).sum() <= 6


def test_flip_on_pure_target_segment_moves_mass_to_one_class():
    seen = set()
    for seed in range(40):
        out = stno_segment_flip(StnoMask(50, np.tile([0, 1.0, 0, 0], (10, 1))), 1.0, (1.0, 1.0), 1.0,
                                np.random.default_rng(seed)).values
        (cls,) = set(out.argmax(axis=1))
        assert cls != 1 and (out.max(axis=1) == 1).all()
        seen.add(cls)
    assert seen == {0, 2, 3}


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_permuting_other_speakers_leaves_mask_unchanged(seed):
    rng = np.random.default_rng(seed)
    d = rng.random((4, 15))
    order = [0] + list(1 + rng.permutation(3))
    np.testing.assert_allclose(stno_values(d[order], 0), stno_values(d, 0), atol=1e-15)


@settings(max_examples=100)
@given(st.integers(0, 10**6))
def test_every_augmentation_keeps_mask_valid(seed):
    rng = np.random.default_rng(seed)
    m = _mask(seed, n=60)
    for out in (
        stno_gaussian_noise(m, 0.5, 1.0, rng),
        stno_segment_flip(m, 1.0, (0.1, 1.0), 0.5, rng),
        joint_spec_augment(np.ones((60, 8)), m, 2, 20, 2, 2, rng)[1],
    ):
        assert out.values.min() >= 0
        np.testing.assert_allclose(out.values.sum(axis=1), 1, atol=1e-9)
