"""Frame-level audio content descriptors and a softmax-regression baseline."""
from __future__ import annotations

import io
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import kernels as K
from .audio import AudioClip
from .errors import ConfigError

FRAME_LEN = 1024
HOP = 512
ROLLOFF_KAPPA = 0.85
FLATNESS_FLOOR = 1e-12
LOG_FLOOR = 1e-10
N_MELS = 26
N_MFCC = 13

# short names used on the command line and in reports
FEATURES = ("zcr", "mfcc", "spcen", "sprf", "spflux", "spskew", "spflat")


@dataclass
class FrameSpectra:
    """Magnitude spectra of consecutive frames, shape (n_frames, n_bins)."""
    magnitudes: np.ndarray
    frequencies: np.ndarray
    sample_rate: int

    def __len__(self):
        return self.magnitudes.shape[0]


@dataclass
class ClipFeatures:
    name: str
    frames: np.ndarray  # (n_frames, dim)
    pooled: np.ndarray  # (2 * dim,)


def _samples(clip) -> tuple[np.ndarray, int]:
    if isinstance(clip, AudioClip):
        return np.asarray(clip.samples, dtype=np.float64), clip.sample_rate
    raise TypeError("expected an AudioClip")


def _frames(x: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    if frame_len > x.size:
        raise ValueError(f"clip of {x.size} samples is shorter than one frame ({frame_len})")
    n = (x.size - frame_len) // hop + 1
    return np.lib.stride_tricks.sliding_window_view(x, frame_len)[::hop][:n]


def frame_audio(clip, frame_len: int = FRAME_LEN, hop: int = HOP) -> FrameSpectra:
    x, fs = _samples(clip)
    fr = _frames(x, frame_len, hop) * np.hanning(frame_len + 1)[:-1]
    mags = np.abs(np.fft.rfft(fr, axis=1))
    return FrameSpectra(mags, np.fft.rfftfreq(frame_len, 1.0 / fs), fs)


def zcr(clip, frame_len: int = FRAME_LEN, hop: int = HOP) -> np.ndarray:
    if frame_len < 2:
        raise ConfigError("frame_len must be at least 2")
    x, _ = _samples(clip)
    s = np.sign(_frames(x, frame_len, hop))
    return np.abs(np.diff(s, axis=1)).sum(axis=1) / (2.0 * (frame_len - 1))


def spectral_features(spectra: FrameSpectra) -> dict[str, np.ndarray]:
    """Centroid, rolloff, skewness and flatness for every frame."""
    X = np.atleast_2d(spectra.magnitudes)
    f = spectra.frequencies
    if X.shape[1] < 2:
        raise ValueError("need at least 2 frequency bins")
    total = X.sum(axis=1)
    silent = total <= 0
    safe = np.where(silent, 1.0, total)
    centroid = np.where(silent, 0.0, X @ f / safe)

    cum = np.cumsum(X, axis=1)
    idx = np.argmax(cum >= ROLLOFF_KAPPA * total[:, None], axis=1)
    rolloff = np.where(silent, 0.0, f[idx])

    dev = f[None, :] - centroid[:, None]
    var = (X * dev ** 2).sum(axis=1) / safe
    third = (X * dev ** 3).sum(axis=1) / safe
    ok = ~silent & (var > 1e-12 * np.maximum(centroid, 1.0) ** 2)
    skew = np.where(ok, third / np.where(ok, var, 1.0) ** 1.5, 0.0)

    geo = np.exp(np.log(np.maximum(X, FLATNESS_FLOOR)).mean(axis=1))
    flat = np.where(silent, 0.0, geo / np.where(silent, 1.0, X.mean(axis=1)))
    return {"centroid": centroid, "rolloff": rolloff, "skewness": skew,
            "flatness": np.clip(flat, 0.0, 1.0)}


def spectral_flux(spectra: FrameSpectra) -> np.ndarray:
    X = np.atleast_2d(spectra.magnitudes)
    if X.shape[0] < 2:
        raise ValueError("spectral flux needs at least 2 frames")
    out = np.zeros(X.shape[0])
    out[1:] = np.sqrt((np.diff(X, axis=0) ** 2).sum(axis=1)) / X.shape[1]
    return out


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(n_mels: int, frame_len: int, sample_rate: int) -> np.ndarray:
    """Triangular filters on the HTK mel scale, 0 Hz to Nyquist, shape (n_mels, n_bins)."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    f = np.fft.rfftfreq(frame_len, 1.0 / sample_rate)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (f - lo) / (mid - lo)
    down = (hi - f) / (hi - mid)
    bank = np.maximum(0.0, np.minimum(up, down))
    bank.setflags(write=False)
    return bank


@lru_cache(maxsize=8)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II, rows are basis vectors."""
    k = np.arange(n)[:, None]
    m = np.cos(np.pi * k * (2 * np.arange(n)[None, :] + 1) / (2 * n)) * math.sqrt(2.0 / n)
    m[0] /= math.sqrt(2.0)
    m.setflags(write=False)
    return m


def mfcc(clip, n_mels: int = N_MELS, n_coeffs: int = N_MFCC, frame_len: int = FRAME_LEN,
         hop: int = HOP) -> np.ndarray:
    if frame_len & (frame_len - 1):
        raise ConfigError("frame_len must be a power of two")
    if n_coeffs > n_mels:
        raise ConfigError("n_coeffs cannot exceed n_mels")
    spectra = frame_audio(clip, frame_len, hop)
    power = spectra.magnitudes ** 2
    logmel = np.log(np.maximum(power @ mel_filterbank(n_mels, frame_len, spectra.sample_rate).T, LOG_FLOOR))
    return logmel @ dct_matrix(n_mels)[:n_coeffs].T


def pool(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    if v.shape[0] < 1:
        raise ValueError("cannot pool zero frames")
    return np.concatenate([v.mean(axis=0), v.std(axis=0)])


def frame_features(clip, name: str, frame_len: int = FRAME_LEN, hop: int = HOP) -> np.ndarray:
    """Per-frame values of one named descriptor, shape (n_frames, dim)."""
    if name == "zcr":
        out = zcr(clip, frame_len, hop)
    elif name == "mfcc":
        out = mfcc(clip, frame_len=frame_len, hop=hop)
    elif name == "spflux":
        out = spectral_flux(frame_audio(clip, frame_len, hop))
    elif name in ("spcen", "sprf", "spskew", "spflat"):
        key = {"spcen": "centroid", "sprf": "rolloff", "spskew": "skewness", "spflat": "flatness"}[name]
        out = spectral_features(frame_audio(clip, frame_len, hop))[key]
    else:
        raise ConfigError(f"unknown feature {name!r}; choose from {', '.join(FEATURES)}")
    return out[:, None] if out.ndim == 1 else out


def extract(clip, name: str, frame_len: int = FRAME_LEN, hop: int = HOP) -> ClipFeatures:
    frames = frame_features(clip, name, frame_len, hop)
    return ClipFeatures(name, frames, pool(frames))


def features_csv(keys, vectors, name: str) -> str:
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    dim = vectors.shape[1] // 2
    cols = [f"{name}_mean{i}" for i in range(dim)] + [f"{name}_std{i}" for i in range(dim)]
    buf = io.StringIO()
    buf.write("key," + ",".join(cols) + "\n")
    for key, vec in zip(keys, vectors):
        buf.write(str(key) + "," + ",".join(repr(float(v)) for v in vec) + "\n")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# classifier
# ---------------------------------------------------------------------------

@dataclass
class LinearModel:
    mean: np.ndarray
    scale: np.ndarray
    layer: K.Dense
    n_classes: int

    def standardize(self, features):
        return (np.atleast_2d(np.asarray(features, dtype=np.float64)) - self.mean) / self.scale

    def proba(self, features) -> np.ndarray:
        return K.softmax(self.layer.forward(self.standardize(features)))

    def predict(self, features) -> np.ndarray:
        # argmax returns the first maximum, i.e. ties go to the lowest id
        return self.proba(features).argmax(axis=1)


def train_linear_classifier(features, labels, epochs: int = 500, lr: float = 0.5,
                            n_classes: int | None = None, momentum: float = 0.9) -> LinearModel:
    """Softmax regression by full-batch gradient descent on standardized features."""
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = np.asarray(labels, dtype=int)
    if len(np.unique(y)) < 2:
        raise ValueError("training set contains a single class")
    n_classes = int(n_classes if n_classes is not None else y.max() + 1)
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    layer = K.Dense(X.shape[1], n_classes, dtype=np.float64)
    layer.weight.value[...] = 0.0
    model = LinearModel(mean, scale, layer, n_classes)
    Xs = model.standardize(X)
    target = K.one_hot(y, n_classes, np.float64)
    params = [p for _, p in layer.named_parameters()]
    for _ in range(epochs):
        res = K.softmax_cross_entropy(layer.forward(Xs, train=True), target)
        layer.zero_grad()
        layer.backward(res.logit_grad)
        K.sgd_step(params, lr, momentum, 0.0)
    return model


def predict(model: LinearModel, features) -> np.ndarray:
    return model.predict(features)
