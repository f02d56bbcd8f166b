"""Constant-Q spectrogram front end.

Bin ``k`` has centre frequency ``f_min * 2**(k/B)`` and a Hann-windowed
complex kernel of length ``N_k = ceil(Q * fs / f_k)`` with
``Q = 1 / (2**(1/B) - 1)``. Frames are centred on multiples of ``hop`` after
reflection padding.

The per-(bin, frame) inner products are evaluated directly in the time
domain. They are grouped into hop-sized blocks so one matrix product covers
every bin; the arithmetic is the same sum, only reassociated.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .audio import AudioClip
from .errors import ConfigError

IMAGE_SIZE = 224
DESK_IMAGE_SIZE = 64


@dataclass(frozen=True)
class CqtConfig:
    f_min: float = 32.70
    bins_per_octave: int = 24
    n_bins: int = 168
    hop: int = 512
    floor_db: float = -80.0

    @property
    def q(self) -> float:
        return 1.0 / (2.0 ** (1.0 / self.bins_per_octave) - 1.0)

    def frequencies(self) -> np.ndarray:
        return self.f_min * 2.0 ** (np.arange(self.n_bins) / self.bins_per_octave)

    def window_lengths(self, sample_rate: int) -> np.ndarray:
        return np.ceil(self.q * sample_rate / self.frequencies()).astype(int)

    def validate(self, sample_rate: int) -> None:
        if self.f_min <= 0 or self.bins_per_octave < 1 or self.n_bins < 1 or self.hop < 1:
            raise ConfigError(f"invalid CQT parameters: {self}")
        f_top = self.f_min * 2.0 ** ((self.n_bins - 1) / self.bins_per_octave)
        if f_top >= sample_rate / 2:
            raise ConfigError(
                f"highest CQT bin {f_top:.1f} Hz is not below Nyquist ({sample_rate / 2:.1f} Hz)")


@dataclass
class Spectrogram:
    magnitudes: np.ndarray  # (K, T), rows ascending in frequency
    frame_times: np.ndarray
    frequencies: np.ndarray = field(default=None)

    @property
    def shape(self):
        return self.magnitudes.shape

    def with_magnitudes(self, mags) -> "Spectrogram":
        return Spectrogram(mags, self.frame_times, self.frequencies)


def hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def bin_kernel(cfg: CqtConfig, sample_rate: int, k: int) -> np.ndarray:
    """Complex analysis kernel of bin ``k``, including the 1/N_k factor."""
    n_k = int(cfg.window_lengths(sample_rate)[k])
    n = np.arange(n_k)
    return hann(n_k) * np.exp(-2j * np.pi * cfg.q * n / n_k) / n_k


@lru_cache(maxsize=8)
def _kernel_bank(cfg: CqtConfig, sample_rate: int):
    lengths = cfg.window_lengths(sample_rate)
    hop = cfg.hop
    pad = int(lengths.max()) // 2
    blocks, q_offsets, counts = [], [], []
    for k, n_k in enumerate(lengths):
        start = pad - n_k // 2  # kernel start relative to frame 0 in padded coordinates
        q, r = divmod(start, hop)
        nb = -(-(r + n_k) // hop)
        shifted = np.zeros(nb * hop, dtype=np.complex128)
        shifted[r:r + n_k] = bin_kernel(cfg, sample_rate, k)
        blocks.append(shifted.reshape(nb, hop))
        q_offsets.append(q)
        counts.append(nb)
    bank = np.concatenate(blocks)
    real_bank = np.concatenate([bank.real, bank.imag]).T.copy()  # (hop, 2 * total_blocks)
    counts = np.array(counts)
    first_col = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return pad, real_bank, np.array(q_offsets), counts, first_col


def min_clip_length(cfg: CqtConfig, sample_rate: int) -> int:
    return int(cfg.window_lengths(sample_rate)[0])


def cqt(clip: AudioClip, cfg: CqtConfig = CqtConfig()) -> Spectrogram:
    fs = clip.sample_rate
    cfg.validate(fs)
    x = clip.samples
    if x.size < min_clip_length(cfg, fs):
        raise ValueError(
            f"clip of {x.size} samples is shorter than the lowest bin's window "
            f"({min_clip_length(cfg, fs)} samples)")
    pad, real_bank, q_off, counts, first_col = _kernel_bank(cfg, fs)
    hop = cfg.hop
    n_frames = 1 + x.size // hop
    n_blocks_total = real_bank.shape[1] // 2

    xpad = np.pad(x, pad, mode="reflect")
    need = (n_frames - 1 + int(q_off.max() + counts.max())) * hop
    need = max(need, -(-xpad.size // hop) * hop)
    xpad = np.concatenate([xpad, np.zeros(need - xpad.size)])
    xb = xpad.reshape(-1, hop)

    prod = xb @ real_bank  # (blocks, 2 * total_blocks): real then imaginary parts
    block_idx = np.arange(n_blocks_total)
    owner = np.repeat(np.arange(cfg.n_bins), counts)
    b_within = block_idx - first_col[owner]
    rows = (q_off[owner] + b_within)[:, None] + np.arange(n_frames)[None, :]
    re = prod[rows, block_idx[:, None]]
    im = prod[rows, (block_idx + n_blocks_total)[:, None]]
    re = np.add.reduceat(re, first_col, axis=0)
    im = np.add.reduceat(im, first_col, axis=0)
    mags = np.hypot(re, im)
    times = np.arange(n_frames) * hop / fs
    return Spectrogram(mags, times, cfg.frequencies())


def cqt_direct(clip: AudioClip, cfg: CqtConfig = CqtConfig()) -> Spectrogram:
    """Unoptimised per-(bin, frame) evaluation, kept as a cross-check."""
    fs = clip.sample_rate
    cfg.validate(fs)
    lengths = cfg.window_lengths(fs)
    pad = int(lengths.max()) // 2
    xpad = np.pad(clip.samples, pad, mode="reflect")
    n_frames = 1 + clip.samples.size // cfg.hop
    mags = np.zeros((cfg.n_bins, n_frames))
    for k, n_k in enumerate(lengths):
        kern = bin_kernel(cfg, fs, k)
        for t in range(n_frames):
            s = t * cfg.hop + pad - n_k // 2
            seg = xpad[s:s + n_k]
            mags[k, t] = abs(np.dot(seg, kern))
    return Spectrogram(mags, np.arange(n_frames) * cfg.hop / fs, cfg.frequencies())


def log_compress(spec: Spectrogram, floor_db: float = -80.0, reference: float | None = None) -> Spectrogram:
    """Map magnitudes to dB relative to ``reference`` (default: the maximum),
    clamp at ``floor_db`` and rescale affinely to [0, 1]."""
    mags = spec.magnitudes
    ref = float(mags.max()) if reference is None else float(reference)
    if ref <= 0:
        return spec.with_magnitudes(np.zeros_like(mags))
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(mags / ref)
    db = np.clip(db, floor_db, 0.0)
    return spec.with_magnitudes((db - floor_db) / -floor_db)


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    if n_out == n_in:
        return np.eye(n_in)
    pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def resize_bilinear(plane: np.ndarray, height: int, width: int) -> np.ndarray:
    plane = np.asarray(plane, dtype=np.float64)
    return _interp_matrix(height, plane.shape[0]) @ plane @ _interp_matrix(width, plane.shape[1]).T


def standardize(plane: np.ndarray, stats: tuple[float, float] | None = None) -> np.ndarray:
    mean, std = (float(plane.mean()), float(plane.std())) if stats is None else stats
    if std <= 0:
        return np.zeros_like(plane)
    return (plane - mean) / std


def to_image(spec: Spectrogram, height: int = IMAGE_SIZE, width: int = IMAGE_SIZE,
             stats: tuple[float, float] | None = None, dtype=np.float32) -> np.ndarray:
    """Resize to height x width, replicate to 3 channels, standardize.

    Standardization uses the image's own mean/std unless ``stats`` is given.
    """
    if spec.magnitudes.size == 0:
        raise ValueError("empty spectrogram")
    plane = standardize(resize_bilinear(spec.magnitudes, height, width), stats)
    return np.repeat(plane[None].astype(dtype), 3, axis=0)


def image_stats(spec: Spectrogram, height: int, width: int) -> tuple[float, float]:
    plane = resize_bilinear(spec.magnitudes, height, width)
    return float(plane.mean()), float(plane.std())


def pair_images(reference: AudioClip, query: AudioClip, cfg: CqtConfig = CqtConfig(),
                height: int = DESK_IMAGE_SIZE, width: int = DESK_IMAGE_SIZE):
    """Images for a (reference, query) pair under reference-relative scaling.

    Both spectrograms are compressed against the reference's peak magnitude
    and standardized with the reference image's statistics, so loudness and
    tempo differences from the reference survive into the query image.
    """
    ref_spec = cqt(reference, cfg)
    return pair_images_from_specs(ref_spec, cqt(query, cfg), cfg.floor_db, height, width)


def pair_images_from_specs(ref_spec, query_spec, floor_db=-80.0, height=DESK_IMAGE_SIZE,
                           width=DESK_IMAGE_SIZE):
    peak = float(ref_spec.magnitudes.max())
    ref_c = log_compress(ref_spec, floor_db, reference=peak if peak > 0 else None)
    q_c = log_compress(query_spec, floor_db, reference=peak if peak > 0 else None)
    stats = image_stats(ref_c, height, width)
    return to_image(ref_c, height, width, stats), to_image(q_c, height, width, stats)


def write_pgm(plane: np.ndarray, path) -> None:
    """Dump a 2-D array as an 8-bit binary portable graymap (low rows at the bottom)."""
    plane = np.asarray(plane, dtype=np.float64)
    lo, hi = plane.min(), plane.max()
    scaled = np.zeros_like(plane) if hi <= lo else (plane - lo) / (hi - lo)
    data = np.round(scaled[::-1] * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def expected_bin(freq: float, cfg: CqtConfig = CqtConfig()) -> int:
    return int(round(cfg.bins_per_octave * math.log2(freq / cfg.f_min)))
