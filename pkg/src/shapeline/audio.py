"""Mono audio clips and 16-bit PCM WAV I/O."""
from __future__ import annotations

import os
import wave
from dataclasses import dataclass

import numpy as np

from .errors import DataIOError, MalformedFileError, UnsupportedEncodingError

PCM_SCALE = 32768.0


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.samples.size < 1:
            raise ValueError("an audio clip needs at least one sample")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio samples must be finite")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def scaled(self, factor: float) -> "AudioClip":
        return AudioClip(self.samples * factor, self.sample_rate)


def to_pcm16(samples) -> np.ndarray:
    q = np.round(np.asarray(samples, dtype=np.float64) * PCM_SCALE)
    return np.clip(q, -32768, 32767).astype("<i2")


def write_wav(clip: AudioClip, path) -> None:
    if np.max(np.abs(clip.samples)) > 1.0:
        raise ValueError("samples must lie within [-1, 1] before PCM encoding")
    try:
        with wave.open(os.fspath(path), "wb") as fh:
            fh.setnchannels(1)
            fh.setsampwidth(2)
            fh.setframerate(clip.sample_rate)
            fh.writeframes(to_pcm16(clip.samples).tobytes())
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def read_wav(path) -> AudioClip:
    """Read a canonical mono 16-bit PCM RIFF/WAVE file."""
    try:
        fh = wave.open(os.fspath(path), "rb")
    except FileNotFoundError as exc:
        raise DataIOError(f"{path}: no such file") from exc
    except (wave.Error, EOFError) as exc:
        msg = str(exc)
        if "unknown format" in msg:
            raise UnsupportedEncodingError(f"{path}: {msg}") from exc
        raise MalformedFileError(f"{path}: malformed RIFF/WAVE header ({msg or 'truncated'})") from exc
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    with fh:
        channels, width, rate, n = (fh.getnchannels(), fh.getsampwidth(),
                                    fh.getframerate(), fh.getnframes())
        if width != 2:
            raise UnsupportedEncodingError(f"{path}: {8 * width}-bit samples, expected 16-bit PCM")
        if channels != 1:
            raise UnsupportedEncodingError(f"{path}: {channels} channels, expected mono")
        raw = fh.readframes(n)
    if len(raw) != n * 2:
        raise MalformedFileError(
            f"{path}: data chunk declares {n * 2} bytes but only {len(raw)} are present")
    if n == 0:
        raise MalformedFileError(f"{path}: empty data chunk")
    pcm = np.frombuffer(raw, dtype="<i2")
    return AudioClip(pcm.astype(np.float64) / PCM_SCALE, rate)
