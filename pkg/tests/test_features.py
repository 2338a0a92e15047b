import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from asdkit.features import (
    FeatureError,
    LogMelExtractor,
    MelConfig,
    NormStats,
    fit_norm_stats,
    inference_segments,
    load_norm_stats,
    logmel,
    mel_center_frequencies,
    mel_filterbank,
    norm_stats_from_waveforms,
    random_crop,
    save_norm_stats,
    segment_stack,
)
from oracles import htk_mel, htk_mel_inv

CFG = MelConfig()


def test_frame_geometry():
    assert CFG.win_length == 2048
    assert CFG.hop_length == 256
    assert CFG.n_frames(160000) == (160000 - 2048) // 256 + 1 == 618
    assert CFG.segment_frames == 118


def test_ten_second_clip_shape(rng):
    assert logmel(rng.standard_normal(160000)).shape == (618, 224)


def test_short_clip_rejected():
    with pytest.raises(FeatureError):
        logmel(np.zeros(1000))


def test_normal_noise_stats(rng):
    st_ = norm_stats_from_waveforms([rng.normal(3, 2, 50000) for _ in range(4)], "fan")
    assert st_.mean == pytest.approx(3, rel=0.01)
    assert st_.std == pytest.approx(2, rel=0.01)


def test_alternating_signal_stats():
    st_ = norm_stats_from_waveforms([np.tile([1.0, -1.0], 500)], "fan")
    assert st_.mean == 0 and st_.std == 1


def test_constant_clip_clamps_std():
    with pytest.warns(RuntimeWarning):
        st_ = norm_stats_from_waveforms([np.zeros(100)], "fan")
    assert st_.std == 1e-8 and st_.clamped


def test_norm_stats_roundtrip(tmp_path):
    stats = {"fan": NormStats("fan", 0.1, 0.5), "pump": NormStats("pump", -0.2, 1.5, True)}
    save_norm_stats(stats, tmp_path / "n.json")
    assert load_norm_stats(tmp_path / "n.json") == stats


def test_norm_stats_use_train_split_only(tiny_corpus):
    from asdkit.dataset import read_wav

    recs = tiny_corpus.select(machine_type="fan", split="train")
    x = np.concatenate([read_wav(tiny_corpus.resolve(r))[0] for r in recs])
    got = fit_norm_stats(tiny_corpus, "fan")
    assert got.mean == pytest.approx(x.mean(), abs=1e-12)
    assert got.std == pytest.approx(x.std(), rel=1e-10)


def test_silence_is_log_floor():
    out = logmel(np.zeros(16000))
    assert np.all(out == np.log(1e-10))


def test_mel_scale_matches_htk():
    for f in [0.0, 50.0, 700.0, 1000.0, 7800.0]:
        from asdkit.features import hz_to_mel, mel_to_hz

        assert float(hz_to_mel(f)) == pytest.approx(htk_mel(f), rel=1e-12, abs=1e-12)
        assert float(mel_to_hz(htk_mel(f))) == pytest.approx(f, abs=1e-9)


def test_center_frequencies_are_evenly_spaced_in_mel():
    centers = mel_center_frequencies(CFG)
    lo, hi = htk_mel(50.0), htk_mel(7800.0)
    step = (hi - lo) / 225
    expected = [htk_mel_inv(lo + step * (i + 1)) for i in range(224)]
    np.testing.assert_allclose(centers, expected, rtol=1e-10)


def test_filterbank_shape_and_readonly():
    fb = mel_filterbank(CFG)
    assert fb.shape == (224, 1025)
    assert fb.max() <= 1.0 and fb.min() >= 0.0
    with pytest.raises(ValueError):
        fb[0, 0] = 1.0


def test_one_khz_tone_peaks_in_nearest_band():
    t = np.arange(32000) / 16000
    out = logmel(np.sin(2 * np.pi * 1000 * t))
    nearest = int(np.argmin(np.abs(mel_center_frequencies(CFG) - 1000.0)))
    assert set(np.argmax(out, axis=1)) == {nearest}


def test_normalization_applied(rng):
    x = rng.normal(1.0, 3.0, 8000)
    stats = NormStats("fan", 1.0, 3.0)
    np.testing.assert_allclose(logmel(x, CFG, stats), logmel((x - 1.0) / 3.0), rtol=1e-12)


def test_segment_starts_ten_second_clip():
    segs = inference_segments(np.zeros((618, 224)), S=10, T_s=2.0)
    assert len(segs) == 10
    np.testing.assert_allclose([s.start_s for s in segs], [8.0 * i / 9 for i in range(10)], atol=1e-9)
    assert all(s.values.shape == (118, 224) for s in segs)


def test_segment_frame_offsets():
    mel = np.arange(618, dtype=float)[:, None] * np.ones((1, 3))
    segs = inference_segments(mel, S=10)
    expected = [round(i * 500 / 9) for i in range(10)]
    assert [int(s.values[0, 0]) for s in segs] == expected
    assert int(segs[-1].values[-1, 0]) == 617


def test_two_segments_cover_endpoints():
    segs = inference_segments(np.zeros((618, 4)), S=2)
    assert [s.start_s for s in segs] == [0.0, pytest.approx(8.0)]


def test_two_second_clip_gives_identical_segments(rng):
    mel = rng.standard_normal((118, 8))
    stack = segment_stack(mel)
    assert stack.shape == (10, 118, 8)
    assert np.all(stack == mel)


def test_segment_longer_than_clip_rejected():
    with pytest.raises(FeatureError):
        inference_segments(np.zeros((100, 4)))


def test_crop_of_exact_length_starts_at_zero(rng):
    mel = rng.standard_normal((118, 4))
    for _ in range(20):
        assert random_crop(mel, 2.0, rng).start_s == 0.0


def test_crop_replay():
    mel = np.zeros((618, 2))
    a = [random_crop(mel, 2.0, np.random.default_rng(5)).start_s for _ in range(3)]
    r1, r2 = np.random.default_rng(5), np.random.default_rng(5)
    assert [random_crop(mel, 2.0, r1).start_s for _ in range(50)] == [random_crop(mel, 2.0, r2).start_s for _ in range(50)]
    assert len(set(a)) == 1


def test_crop_starts_uniform_ks():
    mel = np.zeros((618, 1))
    r = np.random.default_rng(0)
    starts = np.array([random_crop(mel, 2.0, r).start_s for _ in range(10000)])
    assert starts.min() >= 0 and starts.max() <= 8.0
    # starts live on a 16 ms grid; compare against the uniform law on [0, 8] with half-step jitter
    jitter = np.random.default_rng(1).uniform(-0.008, 0.008, starts.size)
    res = sps.kstest(np.clip(starts + jitter, 0, 8.016), sps.uniform(loc=-0.008, scale=8.016).cdf)
    assert res.pvalue > 0.01


def test_extractor_estimator(rng):
    X = [rng.standard_normal(8000) * 2 + 1 for _ in range(3)]
    ext = LogMelExtractor(machine_type="fan").fit(X)
    out = ext.transform(X)
    assert out.shape == (3, CFG.n_frames(8000), 224) and out.dtype == np.float32
    assert ext.get_params()["n_mels"] == 224
    np.testing.assert_allclose(out[0], logmel(X[0], CFG, ext.stats_), rtol=1e-5, atol=1e-5)


def test_config_hash_stable():
    assert MelConfig().hash() == MelConfig().hash()
    assert MelConfig().hash() != MelConfig(n_mels=128).hash()


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=2, max_value=12), st.integers(min_value=118, max_value=700))
def test_segments_stay_in_bounds(S, n_frames):
    segs = inference_segments(np.zeros((n_frames, 1)), S=S)
    assert len(segs) == S
    assert all(s.values.shape[0] == 118 for s in segs)
    starts = [s.start_s for s in segs]
    assert starts == sorted(starts) and starts[0] == 0.0
    assert math.isclose(starts[-1], CFG.duration_of(n_frames) - 2.0, abs_tol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.floats(min_value=-5, max_value=5), st.floats(min_value=0.1, max_value=10))
def test_normalized_audio_is_standardized(shift, scale):
    x = np.random.default_rng(0).standard_normal(4000) * scale + shift
    st_ = norm_stats_from_waveforms([x], "fan")
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        z = (x - st_.mean) / st_.std
    assert abs(z.mean()) < 1e-9 and abs(z.std() - 1) < 1e-9
