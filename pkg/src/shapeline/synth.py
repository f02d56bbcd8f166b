"""Synthetic shaped piano-exercise renditions.

A piece is a short pseudo-random exercise (:class:`Score`). Each of the 28
shape labels turns into time curves (:class:`ShapeCurves`) that warp the
tempo, scale the loudness or nudge note timing. The score is then rendered
by additive synthesis.
"""
from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import AudioClip, write_wav
from .errors import ConfigError, DataIOError

NORMAL_BPM = 60.0
ADAGIO_BPM = 72.0
LARGO_BPM = 50.0

GAIN_F = 1.0
GAIN_P = 0.25
GAIN_NORMAL = 0.5
DYNAMICS_BASE = 0.25

SWING_RATIO = 2.0
GIVE_TAKE_SHIFT_S = 0.060

N_HARMONICS = 6
ATTACK_S, DECAY_S, SUSTAIN, RELEASE_S = 0.005, 0.050, 0.6, 0.150
STACCATO_RELEASE_S = 0.030
PEAK_LIMIT = 0.99

DESK_SAMPLE_RATE = 16000
PAPER_SAMPLE_RATE = 48000
CLIP_SECONDS = 7.0

EXERCISE_KINDS = ("polyphony", "scale", "arpeggio", "staccato")
# relative frequency of exercise kinds in the source collection: 83/20/12/32 of 147
KIND_WEIGHTS = (83, 20, 12, 32)

MANIFEST_HEADER = ["clip_path", "reference_path", "label_id", "label_name", "piece_id",
                   "corpus", "duration_s", "sample_rate"]


# ---------------------------------------------------------------------------
# scores
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Note:
    pitch: int
    onset: float  # beats
    duration: float  # beats


@dataclass
class Score:
    notes: list[Note]
    kind: str

    def __post_init__(self):
        if self.kind not in EXERCISE_KINDS:
            raise ValueError(f"unknown exercise kind {self.kind!r}")
        onsets = [n.onset for n in self.notes]
        if any(b < a for a, b in zip(onsets, onsets[1:])):
            raise ValueError("note onsets must be non-decreasing")
        for n in self.notes:
            if not 21 <= n.pitch <= 108 or n.duration <= 0 or n.onset < 0:
                raise ValueError(f"invalid note {n}")

    @property
    def length_beats(self) -> float:
        return max((n.onset + n.duration for n in self.notes), default=0.0)


PITCH_RANGE = (48, 84)
_MAJOR = (0, 2, 4, 5, 7, 9, 11)
_MINOR = (0, 2, 3, 5, 7, 8, 10)


def _degree_pitch(tonic, scale, degree):
    octave, step = divmod(degree, len(scale))
    return tonic + 12 * octave + scale[step]


def generate_exercise(seed: int, kind: str, n_beats: float = 12.0) -> Score:
    """Deterministic five-finger / scale / arpeggio / staccato pattern.

    Melodic notes move on an eighth- or sixteenth-note grid so that swing and
    tempo changes are audible; pitches stay within MIDI 48-84.
    """
    if kind not in EXERCISE_KINDS:
        raise ValueError(f"unknown exercise kind {kind!r}")
    if n_beats < 4:
        raise ValueError("n_beats must be at least 4")
    rng = np.random.default_rng(seed)
    scale = _MAJOR if rng.random() < 0.7 else _MINOR
    step = 0.5 if kind in ("polyphony", "staccato") else float(rng.choice([0.5, 0.25]))
    n_steps = int(math.ceil(n_beats / step))

    if kind == "scale":
        span = int(rng.integers(8, 12))  # scale degrees per run
        degrees, d, direction = [], 0, 1
        for _ in range(n_steps):
            degrees.append(d)
            if not 0 <= d + direction <= span:
                direction = -direction
            d += direction
    elif kind == "arpeggio":
        chord = (0, 2, 4)
        top = int(rng.integers(6, 10))  # highest chord tone index
        degrees, i, direction = [], 0, 1
        for _ in range(n_steps):
            octave, j = divmod(i, 3)
            degrees.append(7 * octave + chord[j])
            if not 0 <= i + direction <= top:
                direction = -direction
            i += direction
    else:  # five-finger figures for polyphony and staccato
        figures = [(0, 1, 2, 3, 4, 3, 2, 1), (0, 2, 1, 3, 2, 4, 3, 1),
                   (0, 1, 2, 1, 2, 3, 4, 2), (4, 3, 2, 1, 0, 1, 2, 3)]
        fig = figures[int(rng.integers(len(figures)))]
        degrees = [fig[i % len(fig)] for i in range(n_steps)]

    lowest = PITCH_RANGE[0] + (12 if kind == "polyphony" else 0)  # room for the bass voice
    highest = PITCH_RANGE[1] - _degree_pitch(0, scale, max(degrees))
    tonic = int(rng.integers(lowest, highest + 1))
    dur = 0.25 if kind == "staccato" else step
    notes = [Note(_degree_pitch(tonic, scale, deg), i * step, dur) for i, deg in enumerate(degrees)]
    if kind == "polyphony":
        bass = tonic - 12
        for beat in np.arange(0.0, n_steps * step, 2.0):
            notes.append(Note(_degree_pitch(bass, scale, int(rng.choice([0, 4, 3]))), float(beat), 2.0))
    notes.sort(key=lambda n: (n.onset, n.pitch))
    return Score(notes, kind)


# ---------------------------------------------------------------------------
# shape labels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ShapeLabel:
    id: int
    name: str
    tempo: tuple[float, float]  # bpm at clip start and end
    gain: tuple[float, float]  # multiplier at clip start and end
    timing: str = "none"  # none | swing | give | take

    @property
    def slug(self) -> str:
        return self.name.lower().replace("+", "_").replace(".", "")

    @property
    def tempo_ramp(self) -> bool:
        return self.tempo[0] != self.tempo[1]

    @property
    def gain_ramp(self) -> bool:
        return self.gain[0] != self.gain[1]


def _build_labels():
    dyn = [("Forte", (GAIN_F, GAIN_F)), ("Piano", (GAIN_P, GAIN_P)),
           ("Cresc", (GAIN_P, GAIN_F)), ("Decresc", (GAIN_F, GAIN_P))]
    tempo = [("Adagio", (ADAGIO_BPM, ADAGIO_BPM)), ("Largo", (LARGO_BPM, LARGO_BPM)),
             ("Rit", (NORMAL_BPM, LARGO_BPM)), ("Accel", (NORMAL_BPM, ADAGIO_BPM))]
    normal_t, normal_g = (NORMAL_BPM, NORMAL_BPM), (GAIN_NORMAL, GAIN_NORMAL)
    out = [ShapeLabel(0, "Normal", normal_t, normal_g)]
    for name, g in dyn:
        out.append(ShapeLabel(len(out), name, normal_t, g))
    for name, t in tempo:
        out.append(ShapeLabel(len(out), name, t, normal_g))
    for dname, g in dyn:
        for tname, t in tempo:
            out.append(ShapeLabel(len(out), f"{dname}+{tname}", t, g))
    for name in ("Swing", "Give", "Take"):
        out.append(ShapeLabel(len(out), name, normal_t, normal_g, name.lower()))
    return tuple(out)


LABELS: tuple[ShapeLabel, ...] = _build_labels()
N_CLASSES = len(LABELS)
SUPPLEMENTARY = ("Swing", "Give", "Take")

LABEL_SETS = {
    "all": tuple(range(N_CLASSES)),
    "basic": tuple(range(9)),
    "no-supplementary": tuple(l.id for l in LABELS if l.name not in SUPPLEMENTARY),
}


def get_label(key) -> ShapeLabel:
    if isinstance(key, ShapeLabel):
        key = key.id
    if isinstance(key, (int, np.integer)) and 0 <= key < N_CLASSES:
        return LABELS[int(key)]
    for label in LABELS:
        if isinstance(key, str) and key.lower() in (label.name.lower(), label.slug):
            return label
    raise KeyError(f"unknown shape label {key!r}")


def resolve_label_set(spec) -> tuple[int, ...]:
    if isinstance(spec, str):
        if spec in LABEL_SETS:
            return LABEL_SETS[spec]
        return tuple(get_label(s.strip()).id for s in spec.split(","))
    return tuple(get_label(s).id for s in spec)


@dataclass
class ShapeCurves:
    """Time curves of one shape over a clip of ``clip_seconds``.

    Tempo and gain ramps are linear in clock time over the whole clip.
    """

    tempo: tuple[float, float]
    gain: tuple[float, float]
    timing: str
    clip_seconds: float

    def bpm_at_time(self, t):
        t = np.clip(np.asarray(t, dtype=np.float64), 0, self.clip_seconds)
        b0, b1 = self.tempo
        return b0 + (b1 - b0) * t / self.clip_seconds

    def gain_curve(self, u):
        """Gain at clip-relative time ``u`` in [0, 1]."""
        u = np.clip(np.asarray(u, dtype=np.float64), 0, 1)
        g0, g1 = self.gain
        return g0 + (g1 - g0) * u

    def beat_to_time(self, beats):
        """Seconds at which ``beats`` elapse: the inverse of integrating bpm/60."""
        beats = np.asarray(beats, dtype=np.float64)
        b0, b1 = self.tempo
        d = self.clip_seconds
        if b0 == b1:
            return beats * 60.0 / b0
        slope = (b1 - b0) / d
        beats_at_end = (b0 * d + 0.5 * slope * d * d) / 60.0
        # 60*beats = b0 t + slope t^2 / 2  for t <= d
        within = (-b0 + np.sqrt(np.maximum(b0 * b0 + 2 * slope * 60.0 * beats, 0))) / slope
        beyond = d + (beats - beats_at_end) * 60.0 / b1
        return np.where(beats <= beats_at_end, within, beyond)

    def bpm_at_beat(self, beats):
        return self.bpm_at_time(self.beat_to_time(beats))

    def _swing(self, beats):
        beats = np.asarray(beats, dtype=np.float64)
        whole = np.floor(beats)
        u = beats - whole
        long_part = SWING_RATIO / (SWING_RATIO + 1)
        warped = np.where(u < 0.5, u * 2 * long_part, long_part + (u - 0.5) * 2 * (1 - long_part))
        return whole + warped

    def onset_times(self, score: Score) -> np.ndarray:
        onsets = np.array([n.onset for n in score.notes], dtype=np.float64)
        if self.timing == "swing":
            onsets = self._swing(onsets)
        times = self.beat_to_time(onsets)
        if self.timing in ("give", "take") and len(times):
            audible = times[times < self.clip_seconds]
            first, last = audible.min(), audible.max()
            interior = (times > first) & (times < last)
            shift = -GIVE_TAKE_SHIFT_S if self.timing == "give" else GIVE_TAKE_SHIFT_S
            times = np.where(interior, times + shift, times)
        return times

    def onset_offsets(self, score: Score) -> np.ndarray:
        """Per-note timing shift in seconds relative to the plain tempo mapping."""
        plain = self.beat_to_time([n.onset for n in score.notes])
        return self.onset_times(score) - plain

    def note_seconds(self, score: Score) -> np.ndarray:
        starts = self.beat_to_time([n.onset for n in score.notes])
        ends = self.beat_to_time([n.onset + n.duration for n in score.notes])
        return ends - starts


def apply_shape(label, clip_seconds: float = CLIP_SECONDS) -> ShapeCurves:
    label = get_label(label)
    return ShapeCurves(label.tempo, label.gain, label.timing, float(clip_seconds))


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def midi_to_hz(pitch) -> float:
    return 440.0 * 2.0 ** ((pitch - 69) / 12.0)


def adsr(n_samples: int, hold_samples: int, sample_rate: int, release_s: float) -> np.ndarray:
    """Attack/decay/sustain while held, then a linear release to zero."""
    t = np.arange(n_samples) / sample_rate
    hold = hold_samples / sample_rate
    env = np.where(t < ATTACK_S, t / ATTACK_S,
                   np.where(t < ATTACK_S + DECAY_S,
                            1 - (1 - SUSTAIN) * (t - ATTACK_S) / DECAY_S, SUSTAIN))
    level_at_release = np.interp(hold, t, env) if n_samples else 0.0
    rel = np.clip(1 - (t - hold) / release_s, 0, 1) * level_at_release
    return np.where(t < hold, env, rel)


def render(score: Score, curves: ShapeCurves, sample_rate: int = DESK_SAMPLE_RATE,
           duration_s: float = CLIP_SECONDS) -> AudioClip:
    if duration_s <= 0:
        raise ValueError("duration_s must be positive")
    n_total = int(round(duration_s * sample_rate))
    mix = np.zeros(n_total)
    if score.notes:
        release = STACCATO_RELEASE_S if score.kind == "staccato" else RELEASE_S
        starts = curves.onset_times(score)
        lengths = curves.note_seconds(score)
        norm = sum(1.0 / h for h in range(1, N_HARMONICS + 1))
        for note, t0, dur in zip(score.notes, starts, lengths):
            i0 = int(round(t0 * sample_rate))
            if i0 >= n_total:
                continue
            hold = int(round(dur * sample_rate))
            n = min(hold + int(round(release * sample_rate)), n_total - i0)
            if n <= 0:
                continue
            t = np.arange(n) / sample_rate
            f0 = midi_to_hz(note.pitch)
            tone = np.zeros(n)
            for h in range(1, N_HARMONICS + 1):
                if h * f0 < sample_rate / 2:
                    tone += np.sin(2 * np.pi * h * f0 * t) / h
            mix[i0:i0 + n] += tone / norm * adsr(n, hold, sample_rate, release)
    u = np.arange(n_total) / max(n_total - 1, 1)
    mix *= DYNAMICS_BASE * curves.gain_curve(u)
    return AudioClip(np.clip(mix, -PEAK_LIMIT, PEAK_LIMIT), sample_rate)


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

@dataclass
class ManifestRow:
    clip_path: str
    reference_path: str
    label_id: int
    label_name: str
    piece_id: str
    corpus: str
    duration_s: float
    sample_rate: int


@dataclass
class Manifest:
    rows: list[ManifestRow]
    root: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.rows)

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label_id for r in self.rows], dtype=int)

    def subset(self, indices) -> "Manifest":
        return Manifest([self.rows[i] for i in indices], self.root)

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in self.rows:
            w.writerow([r.clip_path, r.reference_path, r.label_id, r.label_name, r.piece_id,
                        r.corpus, f"{r.duration_s:g}", r.sample_rate])
        return buf.getvalue()

    def write(self, path) -> Path:
        path = Path(path)
        try:
            path.write_text(self.to_csv_text(), encoding="utf-8", newline="\n")
        except OSError as exc:
            raise DataIOError(f"cannot write manifest {path}: {exc}") from exc
        return path

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise DataIOError(f"cannot read manifest {path}: {exc}") from exc
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ConfigError(f"{path}: unexpected manifest header {header}")
        rows = [ManifestRow(c, ref, int(lid), name, pid, corpus, float(d), int(sr))
                for c, ref, lid, name, pid, corpus, d, sr in reader]
        return cls(rows, path.parent)


def piece_seed(seed: int, corpus: str, index: int) -> int:
    ss = np.random.SeedSequence([seed, index, *corpus.encode("utf-8")])
    return int(ss.generate_state(1)[0])


def piece_score(seed: int, corpus: str, index: int, n_beats: float = 12.0) -> Score:
    rng = np.random.default_rng(piece_seed(seed, corpus, index))
    kind = EXERCISE_KINDS[int(rng.choice(len(EXERCISE_KINDS), p=np.array(KIND_WEIGHTS) / sum(KIND_WEIGHTS)))]
    return generate_exercise(int(rng.integers(2**31)), kind, n_beats)


def _render_job(args):
    score, label_id, sample_rate, duration_s, path = args
    clip = render(score, apply_shape(label_id, duration_s), sample_rate, duration_s)
    write_wav(clip, path)
    return path


def build_dataset(n_pieces: int, labels=LABEL_SETS["all"], out_dir=".", seed: int = 0,
                  corpus: str = "A", sample_rate: int = DESK_SAMPLE_RATE,
                  duration_s: float = CLIP_SECONDS, jobs: int = 1) -> Manifest:
    """Render one normal reference plus one clip per label for each piece."""
    if n_pieces < 1:
        raise ValueError("n_pieces must be at least 1")
    label_ids = resolve_label_set(labels)
    out = Path(out_dir)
    n_beats = math.ceil(ADAGIO_BPM * duration_s / 60.0) + 2
    jobs_list, rows = [], []
    for i in range(n_pieces):
        piece_id = f"{corpus}{i:03d}"
        score = piece_score(seed, corpus, i, n_beats)
        ref_rel = f"reference/{piece_id}.wav"
        jobs_list.append((score, 0, sample_rate, duration_s, out / ref_rel))
        for lid in label_ids:
            label = LABELS[lid]
            clip_rel = f"clips/{piece_id}/{lid:02d}_{label.slug}.wav"
            jobs_list.append((score, lid, sample_rate, duration_s, out / clip_rel))
            rows.append(ManifestRow(clip_rel, ref_rel, lid, label.name, piece_id, corpus,
                                    duration_s, sample_rate))
    try:
        for d in {p.parent for *_, p in jobs_list}:
            d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataIOError(f"cannot create {out}: {exc}") from exc
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            list(pool.map(_render_job, jobs_list, chunksize=16))
    else:
        for job in jobs_list:
            _render_job(job)
    manifest = Manifest(rows, out)
    manifest.write(out / "manifest.csv")
    return manifest
