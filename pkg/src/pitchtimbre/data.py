"""Dataset ingestion, MIDI rolls, seen/unseen splits, pair sampling and toy data."""
from __future__ import annotations

import json
import logging
import re
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dsp import (
    DEFAULT_SAMPLE_RATE,
    DEFAULT_STFT,
    StftConfig,
    Waveform,
    hz_to_midi,
    midi_to_hz,
    pitch_shift,
    read_wav,
    resample,
    write_wav,
)

logger = logging.getLogger(__name__)

N_NOTES = 89
SILENCE = 88
LOWEST_MIDI = 21
HIGHEST_MIDI = 108

SILENCE_RMS = 1e-3
SILENCE_WINDOW = 0.1  # seconds

# The 13 URMP instruments. Which five are held out is not recoverable from
# the text, so this default is only a starting point; edit the manifest.
URMP_INSTRUMENTS = ("vn", "va", "vc", "db", "fl", "ob", "cl", "sax", "bn", "tpt", "hn", "tbn", "tba")
URMP_UNSEEN = ("va", "db", "sax", "hn", "tba")


@dataclass(frozen=True)
class NoteEvent:
    onset: float
    frequency: float
    duration: float

    def __post_init__(self):
        if self.onset < 0 or self.duration <= 0 or self.frequency <= 0:
            raise ValueError(f"invalid note event {self}")

    @property
    def offset(self) -> float:
        return self.onset + self.duration


@dataclass(frozen=True)
class Track:
    instrument: str
    waveform: Waveform
    notes: tuple
    split: str = "seen"
    piece: str = ""
    name: str = ""


@dataclass
class TrainingPair:
    target: Waveform
    interferer: Waveform
    mixture: Waveform
    shifted_target: Waveform
    shifted_mixture: Waveform
    query_clips: list
    target_roll: np.ndarray
    shift: int
    target_instrument: str
    interferer_instrument: str


@dataclass
class TestPair:
    target: Waveform
    interferer: Waveform
    mixture: Waveform
    query: Waveform
    target_roll: np.ndarray
    target_instrument: str
    interferer_instrument: str
    split: str

    __test__ = False  # not a pytest class despite the name


# --------------------------------------------------------------------------
# annotations and rolls
# --------------------------------------------------------------------------

def parse_annotations(path, midi_column: bool = False) -> list[NoteEvent]:
    """Read whitespace-separated ``onset frequency duration`` lines.

    With ``midi_column`` the middle column holds MIDI note numbers instead of Hz.
    Overlapping notes are truncated at the next onset to keep the track monophonic.
    """
    events = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            if len(parts) != 3:
                raise ValueError(f"expected 3 columns, got {len(parts)}")
            onset, pitch, duration = (float(p) for p in parts)
            freq = midi_to_hz(pitch) if midi_column else pitch
            events.append(NoteEvent(onset, freq, duration))
        except ValueError as exc:
            raise ValueError(f"{path}: line {lineno}: {exc}") from None
    return make_monophonic(events)


def make_monophonic(events) -> list[NoteEvent]:
    events = sorted(events, key=lambda e: e.onset)
    out = []
    for cur, nxt in zip(events, events[1:] + [None]):
        if nxt is not None and cur.offset > nxt.onset:
            if nxt.onset <= cur.onset:
                logger.warning("dropping note at %.3fs hidden by a simultaneous onset", cur.onset)
                continue
            cur = replace(cur, duration=nxt.onset - cur.onset)
        out.append(cur)
    return out


def write_annotations(path, events):
    lines = [f"{e.onset:.6f}\t{e.frequency:.6f}\t{e.duration:.6f}" for e in events]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def note_index(frequency: float) -> int:
    midi = int(round(hz_to_midi(frequency)))
    if midi < LOWEST_MIDI or midi > HIGHEST_MIDI:
        warnings.warn(f"pitch {frequency:.1f} Hz (MIDI {midi}) outside piano range; clamped")
        midi = min(max(midi, LOWEST_MIDI), HIGHEST_MIDI)
    return midi - LOWEST_MIDI


def notes_to_roll(events, n_frames: int, hop: float, offset: float = 0.0) -> np.ndarray:
    """One-hot (T, 89) roll; frame ``t`` is labelled by the note sounding at ``offset + t*hop``."""
    if hop <= 0:
        raise ValueError("hop must be positive")
    roll = np.zeros((n_frames, N_NOTES))
    labels = np.full(n_frames, SILENCE)
    times = offset + np.arange(n_frames) * hop
    for ev in events:
        active = (times >= ev.onset) & (times < ev.offset)
        if active.any():
            labels[active] = note_index(ev.frequency)
    roll[np.arange(n_frames), labels] = 1.0
    return roll


def roll_to_notes(roll: np.ndarray, hop: float) -> list[NoteEvent]:
    """Collapse runs of identical argmax labels into note events (silence dropped)."""
    labels = np.asarray(roll).argmax(axis=1)
    events = []
    start = 0
    for t in range(1, labels.size + 1):
        if t == labels.size or labels[t] != labels[start]:
            if labels[start] != SILENCE:
                freq = midi_to_hz(labels[start] + LOWEST_MIDI)
                events.append(NoteEvent(start * hop, freq, (t - start) * hop))
            start = t
    return events


# --------------------------------------------------------------------------
# manifest, loading, splitting
# --------------------------------------------------------------------------

@dataclass
class Manifest:
    """Instrument label -> ``seen``/``unseen``, plus pieces reserved for testing."""

    instruments: dict
    test_pieces: list = field(default_factory=list)

    @classmethod
    def load(cls, path) -> "Manifest":
        data = json.loads(Path(path).read_text())
        return cls(dict(data["instruments"]), list(data.get("test_pieces", [])))

    def save(self, path):
        Path(path).write_text(json.dumps(
            {"instruments": self.instruments, "test_pieces": self.test_pieces}, indent=2))

    def split_of(self, instrument: str) -> str:
        try:
            return self.instruments[instrument]
        except KeyError:
            raise ValueError(f"unknown instrument label {instrument!r}") from None


def default_urmp_manifest() -> Manifest:
    return Manifest({k: ("unseen" if k in URMP_UNSEEN else "seen") for k in URMP_INSTRUMENTS})


_AUSEP = re.compile(r"AuSep_(\d+)_([A-Za-z]+)_(.+)\.wav$")


def load_urmp(root, manifest: Manifest | None = None, sample_rate: int = DEFAULT_SAMPLE_RATE) -> list[Track]:
    """Load ``<root>/<piece>/AuSep_<n>_<instr>_<piece>.wav`` with sibling ``Notes_*.txt``."""
    root = Path(root)
    if manifest is None and (root / "manifest.json").exists():
        manifest = Manifest.load(root / "manifest.json")
    tracks = []
    for wav in sorted(root.glob("*/AuSep_*.wav")):
        m = _AUSEP.search(wav.name)
        if m is None:
            continue
        idx, instr, piece_name = m.groups()
        notes_path = wav.with_name(f"Notes_{idx}_{instr}_{piece_name}.txt")
        if not notes_path.exists():
            raise FileNotFoundError(f"missing annotations for {wav}")
        w = read_wav(wav)
        if w.sample_rate != sample_rate:
            w = resample(w, sample_rate)
        split = manifest.split_of(instr) if manifest else "seen"
        tracks.append(Track(instr, w, tuple(parse_annotations(notes_path)), split,
                            wav.parent.name, wav.stem))
    return tracks


def split_dataset(tracks, manifest: Manifest | None = None):
    """Partition into (train, test).

    Train holds seen-instrument tracks outside the test pieces; everything else
    (unseen instruments, test pieces) goes to test, tagged by ``Track.split``.
    """
    train, test = [], []
    test_pieces = set(manifest.test_pieces) if manifest else set()
    for tr in tracks:
        split = manifest.split_of(tr.instrument) if manifest else tr.split
        if split not in ("seen", "unseen"):
            raise ValueError(f"bad split {split!r} for {tr.instrument}")
        tr = replace(tr, split=split)
        if split == "seen" and tr.piece not in test_pieces:
            train.append(tr)
        else:
            test.append(tr)
    return train, test


# --------------------------------------------------------------------------
# pair sampling
# --------------------------------------------------------------------------

def _crop(x: np.ndarray, start: int, length: int) -> np.ndarray:
    seg = x[start:start + length]
    if seg.size < length:
        seg = np.pad(seg, (0, length - seg.size))
    return seg


def frame_rms(x: np.ndarray, sample_rate: int, window: float = SILENCE_WINDOW) -> np.ndarray:
    n = max(int(round(window * sample_rate)), 1)
    k = x.size // n
    if k == 0:
        return np.zeros(0)
    return np.sqrt(np.mean(x[:k * n].reshape(k, n) ** 2, axis=1))


def is_silence_free(x: np.ndarray, sample_rate: int, threshold: float = SILENCE_RMS) -> bool:
    rms = frame_rms(x, sample_rate)
    return rms.size > 0 and bool(np.all(rms >= threshold))


def silence_free_signal(track: Track, threshold: float = SILENCE_RMS) -> np.ndarray:
    """Concatenation of the track's 100 ms windows whose RMS clears ``threshold``."""
    sr = track.waveform.sample_rate
    n = int(round(SILENCE_WINDOW * sr))
    x = track.waveform.samples
    k = x.size // n
    windows = x[:k * n].reshape(k, n)
    keep = np.sqrt(np.mean(windows ** 2, axis=1)) >= threshold
    return windows[keep].reshape(-1)


def sample_query(tracks, rng: np.random.Generator, seconds: float, cache: dict | None = None) -> Waveform:
    """Silence-free query clip cut at 100 ms boundaries from one of ``tracks``."""
    sr = tracks[0].waveform.sample_rate
    win = int(round(SILENCE_WINDOW * sr))
    n_win = max(int(round(seconds / SILENCE_WINDOW)), 1)
    order = rng.permutation(len(tracks))
    for i in order:
        tr = tracks[i]
        key = id(tr)
        if cache is not None and key in cache:
            voiced = cache[key]
        else:
            voiced = silence_free_signal(tr)
            if cache is not None:
                cache[key] = voiced
        avail = voiced.size // win
        if avail >= n_win:
            start = int(rng.integers(0, avail - n_win + 1)) * win
            return Waveform(voiced[start:start + n_win * win], sr)
    raise ValueError(f"no {seconds}s silence-free query available for {tracks[0].instrument!r}")


class PairSampler:
    """Draws :class:`TrainingPair` objects on the fly from a training set."""

    def __init__(self, train_set, segment_seconds: float = 4.0, shift_range: int = 4,
                 stft_config: StftConfig = DEFAULT_STFT, query_seconds: float | None = None,
                 n_queries: int = 3):
        self.by_instrument = {}
        for tr in train_set:
            self.by_instrument.setdefault(tr.instrument, []).append(tr)
        if len(self.by_instrument) < 2:
            raise ValueError("need at least 2 instruments to build mixtures")
        self.instruments = sorted(self.by_instrument)
        self.segment_seconds = segment_seconds
        self.shift_range = shift_range
        self.stft_config = stft_config
        self.query_seconds = query_seconds or segment_seconds
        self.n_queries = n_queries
        self._voiced = {}

    def _segment(self, track: Track, rng, length: int):
        x = track.waveform.samples
        start = int(rng.integers(0, max(x.size - length, 0) + 1))
        return _crop(x, start, length), start / track.waveform.sample_rate

    def sample(self, rng: np.random.Generator) -> TrainingPair:
        c, i = rng.choice(len(self.instruments), size=2, replace=False)
        c_name, i_name = self.instruments[c], self.instruments[i]
        c_tracks, i_tracks = self.by_instrument[c_name], self.by_instrument[i_name]
        c_track = c_tracks[rng.integers(len(c_tracks))]
        i_track = i_tracks[rng.integers(len(i_tracks))]
        sr = c_track.waveform.sample_rate
        length = int(round(self.segment_seconds * sr))

        s_c, c_start = self._segment(c_track, rng, length)
        s_i, _ = self._segment(i_track, rng, length)
        shift = int(rng.integers(-self.shift_range, self.shift_range + 1))
        s_shift = pitch_shift(Waveform(s_c, sr), shift).samples

        peak = max(np.abs(s_c + s_i).max(), np.abs(s_shift + s_i).max())
        if peak > 1.0:
            s_c, s_i, s_shift = s_c / peak, s_i / peak, s_shift / peak

        queries = [sample_query(c_tracks, rng, self.query_seconds, self._voiced)
                   for _ in range(self.n_queries)]
        hop = self.stft_config.hop_length / sr
        roll = notes_to_roll(c_track.notes, self.stft_config.n_frames(length), hop, offset=c_start)
        return TrainingPair(
            target=Waveform(s_c, sr),
            interferer=Waveform(s_i, sr),
            mixture=Waveform(s_c + s_i, sr),
            shifted_target=Waveform(s_shift, sr),
            shifted_mixture=Waveform(s_shift + s_i, sr),
            query_clips=queries,
            target_roll=roll,
            shift=shift,
            target_instrument=c_name,
            interferer_instrument=i_name,
        )


def sample_training_pair(train_set, rng: np.random.Generator, segment_seconds: float = 4.0,
                         shift_range: int = 4, stft_config: StftConfig = DEFAULT_STFT,
                         query_seconds: float | None = None) -> TrainingPair:
    sampler = PairSampler(train_set, segment_seconds, shift_range, stft_config, query_seconds)
    return sampler.sample(rng)


def make_test_pairs(test_set, rng: np.random.Generator, n_pairs: int, segment_seconds: float = 4.0,
                    stft_config: StftConfig = DEFAULT_STFT, query_seconds: float | None = None,
                    query_pool=None) -> list[TestPair]:
    """Fixed evaluation pairs; silence is *not* excluded from the mixtures.

    ``query_pool`` supplies query tracks per instrument (defaults to ``test_set``).
    """
    by_instrument = {}
    for tr in test_set:
        by_instrument.setdefault(tr.instrument, []).append(tr)
    pool = {}
    for tr in (query_pool if query_pool is not None else test_set):
        pool.setdefault(tr.instrument, []).append(tr)
    names = sorted(by_instrument)
    if len(names) < 2:
        raise ValueError("need at least 2 instruments to build test pairs")
    query_seconds = query_seconds or segment_seconds
    pairs = []
    for _ in range(n_pairs):
        c, i = rng.choice(len(names), size=2, replace=False)
        c_tracks, i_tracks = by_instrument[names[c]], by_instrument[names[i]]
        c_track = c_tracks[rng.integers(len(c_tracks))]
        i_track = i_tracks[rng.integers(len(i_tracks))]
        sr = c_track.waveform.sample_rate
        length = int(round(segment_seconds * sr))
        c_start = int(rng.integers(0, max(len(c_track.waveform) - length, 0) + 1))
        i_start = int(rng.integers(0, max(len(i_track.waveform) - length, 0) + 1))
        s_c = _crop(c_track.waveform.samples, c_start, length)
        s_i = _crop(i_track.waveform.samples, i_start, length)
        peak = np.abs(s_c + s_i).max()
        if peak > 1.0:
            s_c, s_i = s_c / peak, s_i / peak
        query = sample_query(pool.get(names[c], c_tracks), rng, query_seconds)
        roll = notes_to_roll(c_track.notes, stft_config.n_frames(length),
                             stft_config.hop_length / sr, offset=c_start / sr)
        pairs.append(TestPair(Waveform(s_c, sr), Waveform(s_i, sr), Waveform(s_c + s_i, sr), query,
                              roll, names[c], names[i], c_track.split))
    return pairs


# --------------------------------------------------------------------------
# toy instruments
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Timbre:
    """Additive-synthesis recipe: harmonic amplitudes as ``amp(n)`` plus an envelope."""

    rolloff: float       # amplitude ~ 1 / n**rolloff
    odd_only: bool
    attack: float        # seconds
    decay: float         # exponential decay time constant, seconds (inf = flat)
    max_harmonics: int = 40

    def harmonic_amplitudes(self, f0: float, sample_rate: int) -> np.ndarray:
        n = np.arange(1, self.max_harmonics + 1)
        amps = 1.0 / n ** self.rolloff
        if self.odd_only:
            amps[n % 2 == 0] = 0.0
        amps[n * f0 >= 0.45 * sample_rate] = 0.0
        return amps


TIMBRES = {
    "sine": Timbre(rolloff=np.inf, odd_only=False, attack=0.01, decay=np.inf, max_harmonics=1),
    "sawtooth": Timbre(rolloff=1.0, odd_only=False, attack=0.005, decay=0.6),
    "square": Timbre(rolloff=1.0, odd_only=True, attack=0.02, decay=np.inf),
    "triangle": Timbre(rolloff=2.0, odd_only=True, attack=0.03, decay=1.5),
    "reed": Timbre(rolloff=0.7, odd_only=True, attack=0.04, decay=np.inf),
    "organ": Timbre(rolloff=0.5, odd_only=False, attack=0.01, decay=np.inf, max_harmonics=6),
}


def render_note(timbre: Timbre, frequency: float, duration: float, sample_rate: int,
                amplitude: float = 0.3) -> np.ndarray:
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    if timbre.max_harmonics == 1:
        amps = np.array([1.0])
    else:
        amps = timbre.harmonic_amplitudes(frequency, sample_rate)
    harmonics = np.arange(1, amps.size + 1)
    tone = np.sin(2 * np.pi * frequency * np.outer(t, harmonics[amps > 0])) @ amps[amps > 0]
    tone /= np.abs(amps).sum()
    env = np.minimum(t / timbre.attack, 1.0) * np.exp(-t / timbre.decay)
    release = min(0.02, duration / 4)
    env *= np.clip((duration - t) / release, 0.0, 1.0)
    return amplitude * tone * env


def render_track(timbre: Timbre | str, events, seconds: float, sample_rate: int,
                 amplitude: float = 0.3) -> np.ndarray:
    timbre = TIMBRES[timbre] if isinstance(timbre, str) else timbre
    out = np.zeros(int(round(seconds * sample_rate)))
    for ev in events:
        start = int(round(ev.onset * sample_rate))
        note = render_note(timbre, ev.frequency, ev.duration, sample_rate, amplitude)
        end = min(start + note.size, out.size)
        out[start:end] += note[:end - start]
    return out


def random_score(rng: np.random.Generator, seconds: float, midi_range=(57, 76),
                 note_seconds=(0.15, 0.5), rest_probability: float = 0.15,
                 rest_seconds=(0.05, 0.2), grid: float = 0.01) -> list[NoteEvent]:
    """Random monophonic score on a ``grid``-second lattice."""
    events, t = [], 0.0
    while True:
        if rng.random() < rest_probability:
            t += rng.uniform(*rest_seconds)
        dur = rng.uniform(*note_seconds)
        t, dur = round(t / grid) * grid, max(round(dur / grid), 1) * grid
        if t + dur > seconds:
            break
        midi = int(rng.integers(midi_range[0], midi_range[1] + 1))
        events.append(NoteEvent(t, midi_to_hz(midi), dur))
        t += dur
    return events


@dataclass(frozen=True)
class ToySpec:
    timbres: tuple = ("sawtooth", "square")
    tracks_per_timbre: int = 2
    seconds: float = 8.0
    sample_rate: int = 8000
    midi_range: tuple = (57, 76)
    rest_probability: float = 0.15
    unseen: tuple = ()
    seed: int = 0
    shared_score: bool = False


def synth_toy_dataset(spec: ToySpec) -> list[Track]:
    """Tracks of synthetic monophonic instruments with exactly known notes.

    Track ``k`` of every timbre belongs to piece ``toy{k:02d}``. With
    ``shared_score`` all timbres of a piece play the same score.
    """
    if len(spec.timbres) < 2:
        raise ValueError("toy dataset needs at least 2 timbres")
    rng = np.random.default_rng(spec.seed)
    tracks = []
    for k in range(spec.tracks_per_timbre):
        piece = f"toy{k:02d}"
        shared = random_score(rng, spec.seconds, spec.midi_range, rest_probability=spec.rest_probability)
        for j, name in enumerate(spec.timbres):
            events = shared if spec.shared_score else random_score(
                rng, spec.seconds, spec.midi_range, rest_probability=spec.rest_probability)
            audio = render_track(name, events, spec.seconds, spec.sample_rate)
            split = "unseen" if name in spec.unseen else "seen"
            tracks.append(Track(name, Waveform(audio, spec.sample_rate), tuple(events), split,
                                piece, f"AuSep_{j + 1}_{name}_{piece}"))
    return tracks


def toy_manifest(spec: ToySpec) -> Manifest:
    return Manifest({t: ("unseen" if t in spec.unseen else "seen") for t in spec.timbres})


def write_dataset(tracks, root, manifest: Manifest | None = None, fmt: str = "float32"):
    """Write tracks in the URMP layout so :func:`load_urmp` can read them back."""
    root = Path(root)
    for n, tr in enumerate(tracks, start=1):
        piece = tr.piece or "piece"
        d = root / piece
        d.mkdir(parents=True, exist_ok=True)
        stem = f"{n}_{tr.instrument}_{piece}"
        write_wav(d / f"AuSep_{stem}.wav", tr.waveform, fmt=fmt)
        write_annotations(d / f"Notes_{stem}.txt", tr.notes)
    if manifest is not None:
        manifest.save(root / "manifest.json")
