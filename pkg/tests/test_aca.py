import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shapeline import aca
from shapeline.audio import AudioClip
from shapeline.errors import ConfigError
from shapeline.synth import apply_shape, piece_score, render

FS = 16000


def sine(freq, seconds=1.0, fs=FS, amp=0.5):
    return AudioClip(amp * np.sin(2 * np.pi * freq * np.arange(int(seconds * fs)) / fs), fs)


def spectra(rows, freqs):
    return aca.FrameSpectra(np.atleast_2d(np.asarray(rows, float)), np.asarray(freqs, float), FS)


def test_framing_counts_and_bins():
    s = aca.frame_audio(sine(1000.0))
    assert len(s) == 30 and s.magnitudes.shape[1] == 513
    assert set(s.magnitudes.argmax(axis=1)) == {64}
    assert not aca.frame_audio(AudioClip(np.zeros(FS), FS)).magnitudes.any()
    with pytest.raises(ValueError):
        aca.frame_audio(AudioClip(np.zeros(1000), FS))


def test_zcr_examples():
    assert not aca.zcr(AudioClip(np.full(4096, 0.3), FS)).any()
    alt = AudioClip(np.tile([1.0, -1.0], 2048), FS)
    np.testing.assert_allclose(aca.zcr(alt), 1.0)
    np.testing.assert_allclose(aca.zcr(sine(100.0)), 0.0125, atol=0.002)
    with pytest.raises(ConfigError):
        aca.zcr(alt, frame_len=1)


def test_spectral_examples():
    f = np.array([0.0, 100.0, 200.0, 300.0])
    two = aca.spectral_features(spectra([0, 1, 0, 1], f))
    assert two["centroid"][0] == pytest.approx(200.0) and two["rolloff"][0] == 300.0
    point = aca.spectral_features(spectra([0, 0, 5, 0], f))
    assert point["centroid"][0] == 200.0 and point["rolloff"][0] == 200.0
    assert point["flatness"][0] < 1e-6  # the log floor keeps it just above 0
    flat = aca.spectral_features(spectra(np.ones(9), np.arange(9) * 50.0))
    assert flat["flatness"][0] == pytest.approx(1.0) and abs(flat["skewness"][0]) < 1e-12
    silent = aca.spectral_features(spectra(np.zeros(4), f))
    assert all(v[0] == 0.0 for v in silent.values())


def test_skewness_matches_moment_definition():
    rng = np.random.default_rng(3)
    X = rng.random(40)
    f = np.arange(40) * 25.0
    p = X / X.sum()
    mu = (p * f).sum()
    sd = math.sqrt((p * (f - mu) ** 2).sum())
    expected = (p * ((f - mu) / sd) ** 3).sum()
    got = aca.spectral_features(spectra(X, f))["skewness"][0]
    assert got == pytest.approx(expected, rel=1e-10)


def test_flux_examples():
    n_bins = 6
    rows = np.zeros((3, n_bins))
    rows[1, 2] = 4.0
    rows[2, 2] = 4.0
    flux = aca.spectral_flux(spectra(rows, np.arange(n_bins)))
    np.testing.assert_allclose(flux, [0.0, 4.0 / n_bins, 0.0])
    with pytest.raises(ValueError):
        aca.spectral_flux(spectra(rows[:1], np.arange(n_bins)))
    x = np.concatenate([np.zeros(2048), sine(440.0, 1.0).samples])
    fl = aca.spectral_flux(aca.frame_audio(AudioClip(x, FS)))
    onset = fl.max()
    interior = fl[8:-1]
    assert interior.max() <= 0.01 * onset


def _reference_mfcc(x, fs, n_mels=26, n_coeffs=13, frame_len=1024, hop=512):
    """Loop-based MFCC written independently of the package code."""
    n_frames = (len(x) - frame_len) // hop + 1
    window = [0.5 - 0.5 * math.cos(2 * math.pi * n / frame_len) for n in range(frame_len)]
    n_bins = frame_len // 2 + 1
    mel_top = 2595.0 * math.log10(1 + (fs / 2) / 700.0)
    pts = [700.0 * (10 ** (mel_top * i / (n_mels + 1) / 2595.0) - 1) for i in range(n_mels + 2)]
    bank = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, c, hi = pts[m], pts[m + 1], pts[m + 2]
        for k in range(n_bins):
            fk = k * fs / frame_len
            if lo < fk <= c:
                bank[m, k] = (fk - lo) / (c - lo)
            elif c < fk < hi:
                bank[m, k] = (hi - fk) / (hi - c)
    out = np.zeros((n_frames, n_coeffs))
    for t in range(n_frames):
        seg = np.array(x[t * hop:t * hop + frame_len]) * window
        power = np.abs(np.fft.rfft(seg)) ** 2
        logmel = [math.log(max(float(bank[m] @ power), 1e-10)) for m in range(n_mels)]
        for q in range(n_coeffs):
            scale = math.sqrt(1.0 / n_mels) if q == 0 else math.sqrt(2.0 / n_mels)
            out[t, q] = scale * sum(logmel[m] * math.cos(math.pi * q * (2 * m + 1) / (2 * n_mels))
                                    for m in range(n_mels))
    return out


def test_mfcc_matches_reference_on_a440():
    clip = sine(440.0, 0.5)
    np.testing.assert_allclose(aca.mfcc(clip), _reference_mfcc(clip.samples, FS), atol=1e-6, rtol=0)


def test_mfcc_silence_and_flat():
    c = aca.mfcc(AudioClip(np.zeros(FS // 2), FS))
    assert np.all(c == c[0])
    assert c[0, 0] == pytest.approx(math.sqrt(26) * math.log(1e-10))
    assert np.abs(c[:, 1:]).max() < 1e-9
    d = aca.dct_matrix(26)
    np.testing.assert_allclose(d @ d.T, np.eye(26), atol=1e-12)
    np.testing.assert_allclose((d @ np.full(26, 3.0))[1:], 0.0, atol=1e-12)
    with pytest.raises(ConfigError):
        aca.mfcc(sine(440.0), frame_len=1000)


def test_mel_scale_round_trip():
    f = np.array([0.0, 440.0, 8000.0])
    np.testing.assert_allclose(aca.mel_to_hz(aca.hz_to_mel(f)), f, atol=1e-9)
    assert aca.hz_to_mel(700.0) == pytest.approx(2595.0 * math.log10(2.0))


def test_pool_examples():
    np.testing.assert_allclose(aca.pool([1.0, 3.0]), [2.0, 1.0])
    np.testing.assert_allclose(aca.pool([[4.0, 5.0]]), [4.0, 5.0, 0.0, 0.0])
    np.testing.assert_allclose(aca.pool(np.full((7, 2), 0.5)), [0.5, 0.5, 0.0, 0.0])


@pytest.mark.parametrize("name", aca.FEATURES)
def test_features_finite_and_bounded(name):
    rng = np.random.default_rng(0)
    for x in (np.zeros(FS), rng.standard_normal(FS) * 0.3, sine(3000.0).samples):
        f = aca.extract(AudioClip(x, FS), name)
        assert np.all(np.isfinite(f.frames)) and f.pooled.size == 2 * f.frames.shape[1]
        if name in ("zcr", "spflat"):
            assert f.frames.min() >= 0 and f.frames.max() <= 1
        if name in ("spcen", "sprf"):
            assert f.frames.min() >= 0 and f.frames.max() <= FS / 2
    with pytest.raises(ConfigError):
        aca.extract(sine(100.0), "loudness")


@settings(max_examples=10, deadline=None)
@given(alpha=st.floats(0.05, 1.5), seed=st.integers(0, 500))
def test_amplitude_invariance(alpha, seed):
    x = np.random.default_rng(seed).standard_normal(8000) * 0.5
    x /= np.abs(x).max()
    a, b = AudioClip(x, FS), AudioClip(alpha * x, FS)
    for name in ("zcr", "spcen", "sprf", "spskew", "spflat"):
        np.testing.assert_allclose(aca.frame_features(b, name), aca.frame_features(a, name),
                                   rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(aca.frame_features(b, "spflux"), alpha * aca.frame_features(a, "spflux"),
                               rtol=1e-9, atol=1e-12)


def test_adagio_busier_than_largo():
    # averaged over pieces: per clip the window can cut a phrase unluckily
    diffs = {"zcr": [], "spcen": []}
    for i in range(12):
        score = piece_score(0, "A", i)
        fast = render(score, apply_shape("Adagio"))
        slow = render(score, apply_shape("Largo"))
        for name in diffs:
            diffs[name].append(aca.extract(fast, name).pooled[0] - aca.extract(slow, name).pooled[0])
    assert np.mean(diffs["zcr"]) > 0
    assert np.mean(diffs["spcen"]) > 0


def test_classifier_separable_clusters():
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal(-3, 0.5, (20, 2)), rng.normal(3, 0.5, (20, 2))])
    y = np.repeat([0, 1], 20)
    model = aca.train_linear_classifier(X, y, epochs=100)
    assert (aca.predict(model, X) == y).all()


def test_classifier_shuffled_labels_near_chance():
    accs = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((200, 6))
        y = rng.permutation(np.repeat(np.arange(4), 50))
        model = aca.train_linear_classifier(X[:100], y[:100], epochs=200)
        accs.append(np.mean(aca.predict(model, X[100:]) == y[100:]))
    assert abs(np.mean(accs) - 0.25) <= 0.10


def test_classifier_edge_cases():
    X = np.random.default_rng(1).standard_normal((6, 3))
    model = aca.train_linear_classifier(X, [0, 1, 2, 0, 1, 2], epochs=0)
    np.testing.assert_allclose(model.proba(X), 1 / 3)
    assert not aca.predict(model, X).any()
    with pytest.raises(ValueError):
        aca.train_linear_classifier(X, np.zeros(6, int))


def test_features_csv_layout():
    text = aca.features_csv(["a", "b"], np.array([[1.0, 2.0], [3.0, 4.0]]), "zcr")
    lines = text.splitlines()
    assert lines[0] == "key,zcr_mean0,zcr_std0"
    assert lines[1] == "a,1.0,2.0"
