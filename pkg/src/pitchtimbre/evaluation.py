"""Separation/transcription metrics and report assembly."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import DEFAULT_STFT, StftConfig, Waveform, midi_to_hz, stft
from .inference import separate
from .training import load_model

SDR_CAP = 60.0
Z95 = 1.96


def sdr(reference, estimate) -> float:
    """Scale-invariant SDR in dB (zero-lag projection), capped at +60 dB."""
    ref = np.asarray(getattr(reference, "samples", reference), dtype=np.float64)
    est = np.asarray(getattr(estimate, "samples", estimate), dtype=np.float64)
    if ref.shape != est.shape:
        raise ValueError(f"length mismatch {ref.shape} vs {est.shape}")
    ref_energy = np.dot(ref, ref)
    if ref_energy == 0:
        raise ValueError("undefined SDR: reference is all zeros")
    target = np.dot(est, ref) / ref_energy * ref
    num = np.dot(target, target)
    den = np.dot(est - target, est - target)
    if den == 0 or (num > 0 and 10 * np.log10(num / den) > SDR_CAP):
        return SDR_CAP
    if num == 0:
        return -SDR_CAP
    return float(max(10 * np.log10(num / den), -SDR_CAP))


def frame_hits(y_true: np.ndarray, y_pred: np.ndarray) -> tuple[int, int]:
    if y_true.shape[0] != y_pred.shape[0]:
        raise ValueError("frame counts differ")
    return int(np.sum(np.argmax(y_true, 1) == np.argmax(y_pred, 1))), int(y_true.shape[0])


def precision(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    """Micro-averaged precision of per-frame argmax labels (silence included)."""
    hits, n = frame_hits(y_true, y_pred)
    return hits / n


# --------------------------------------------------------------------------
# polyphony detector
# --------------------------------------------------------------------------

def detect_pitches(frame: np.ndarray, sample_rate: int, n_fft: int, midi_range=(40, 96),
                   n_harmonics: int = 8, ratio: float = 0.5, max_pitches: int = 3,
                   f0_floor: float = 0.1) -> list:
    """Greedy harmonic-sum multi-pitch estimate for one magnitude frame.

    After picking the strongest candidate its harmonic bins (Hann main lobe
    included) are zeroed; a further pitch counts only if its salience is at least
    ``ratio`` of the first one. Candidates need ``f0_floor`` of the frame peak at
    their fundamental, which rules out subharmonics.
    """
    mag = np.asarray(frame, dtype=np.float64).copy()
    n_bins = mag.size
    peak = mag.max()
    if peak <= 0:
        return []
    cands = np.arange(midi_range[0], midi_range[1] + 1)
    f0 = midi_to_hz(cands)
    weights = 0.8 ** np.arange(n_harmonics)
    bins = np.rint(np.outer(f0, np.arange(1, n_harmonics + 1)) * n_fft / sample_rate).astype(int)
    valid = bins < n_bins - 1
    found, first = [], None
    for _ in range(max_pitches):
        padded = np.concatenate([[0.0], mag, [0.0, 0.0]])
        b = np.clip(bins, 0, n_bins)
        local = np.maximum(np.maximum(padded[b], padded[b + 1]), padded[b + 2])
        salience = (np.where(valid, local, 0.0) * weights).sum(axis=1)
        salience[local[:, 0] < f0_floor * peak] = 0.0
        best = int(np.argmax(salience))
        s = salience[best]
        if s <= 0 or (first is not None and s < ratio * first):
            break
        first = s if first is None else first
        found.append(int(cands[best]))
        for b in bins[best][valid[best]]:
            mag[max(b - 2, 0):b + 3] = 0.0
    return found


def polyphony_rate(mag: np.ndarray, sample_rate: int, n_fft: int, floor: float = 0.05, **kw) -> float:
    """Fraction of non-silent frames where more than one pitch is detected."""
    mag = np.asarray(mag)
    energy = mag.sum(axis=1)
    if energy.max() <= 0:
        return 0.0
    active = np.flatnonzero(energy >= floor * energy.max())
    poly = sum(len(detect_pitches(mag[t], sample_rate, n_fft, **kw)) > 1 for t in active)
    return poly / max(active.size, 1)


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

def ci_halfwidth(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return 0.0
    return float(Z95 * values.std(ddof=1) / np.sqrt(values.size))


def aggregate_rows(rows) -> dict:
    """Checkpoint-level micro averages, then mean and 95% CI across checkpoints.

    Returns ``{partition: {sdr, sdr_ci, precision, precision_ci, n_pairs}}`` for
    ``seen``, ``unseen`` and ``overall`` (empty partitions are omitted).
    """
    out = {}
    ckpts = sorted({r["checkpoint"] for r in rows})
    for part in ("seen", "unseen", "overall"):
        sel = [r for r in rows if part == "overall" or r["split"] == part]
        if not sel:
            continue
        sdrs, precs = [], []
        for c in ckpts:
            rs = [r for r in sel if r["checkpoint"] == c]
            vals = [r["sdr"] for r in rs if r["sdr"] is not None]
            if vals:
                sdrs.append(float(np.mean(vals)))
            hits = sum(r["hits"] for r in rs if r["hits"] is not None)
            frames = sum(r["frames"] for r in rs if r["hits"] is not None)
            if frames:
                precs.append(hits / frames)
        out[part] = {
            "sdr": float(np.mean(sdrs)) if sdrs else None,
            "sdr_ci": ci_halfwidth(sdrs) if sdrs else None,
            "precision": float(np.mean(precs)) if precs else None,
            "precision_ci": ci_halfwidth(precs) if precs else None,
            "n_pairs": len({r["pair"] for r in sel}),
        }
    return out


def instrument_table(rows) -> dict:
    table = {}
    for inst in sorted({r["instrument"] for r in rows}):
        rs = [r for r in rows if r["instrument"] == inst]
        sd = [r["sdr"] for r in rs if r["sdr"] is not None]
        hits = sum(r["hits"] for r in rs if r["hits"] is not None)
        frames = sum(r["frames"] for r in rs if r["hits"] is not None)
        table[inst] = {"split": rs[0]["split"], "sdr": float(np.mean(sd)) if sd else None,
                       "precision": hits / frames if frames else None}
    return table


@dataclass
class EvalReport:
    variant: str
    rows: list = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    instruments: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"variant": self.variant, "aggregates": self.aggregates,
                           "instruments": self.instruments, "pairs": self.rows}, indent=2)

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "EvalReport":
        d = json.loads(Path(path).read_text())
        return cls(d["variant"], d["pairs"], d["aggregates"], d["instruments"])


def evaluate(checkpoints, test_pairs, cfg: StftConfig = DEFAULT_STFT) -> EvalReport:
    """Score every checkpoint (path or model) on every test pair."""
    if not checkpoints:
        raise ValueError("no checkpoints to evaluate")
    rows, variant = [], None
    for ci, ckpt in enumerate(checkpoints):
        model = load_model(ckpt) if isinstance(ckpt, (str, Path)) else ckpt
        variant = model.variant
        for pi, pair in enumerate(test_pairs):
            res = separate(model, pair.mixture, pair.query, cfg)
            score = sdr(pair.target, res.waveform) if res.waveform is not None else None
            hits, frames = frame_hits(pair.target_roll, res.roll) if res.roll is not None else (None, None)
            rows.append({"checkpoint": ci, "pair": pi, "split": pair.split,
                         "instrument": pair.target_instrument, "sdr": score,
                         "hits": hits, "frames": frames})
    return EvalReport(variant, rows, aggregate_rows(rows), instrument_table(rows))


def mixture_baseline(test_pairs) -> float:
    """Mean SDR obtained by returning the unprocessed mixture."""
    return float(np.mean([sdr(p.target, p.mixture) for p in test_pairs]))


def oracle_magnitude_sdr(target: Waveform, mixture: Waveform, cfg: StftConfig) -> float:
    """SDR of the true target magnitude combined with the mixture phase."""
    from .dsp import Spectrogram, istft
    mix = stft(mixture, cfg)
    mag = np.abs(stft(target, cfg).values)
    est = istft(Spectrogram(mag * np.exp(1j * mix.phase), cfg, len(mixture)), sample_rate=mixture.sample_rate)
    return sdr(target, est)


def format_table(reports: dict) -> str:
    """Text table: rows seen/unseen/overall, SDR then precision columns per model."""
    names = list(reports)
    head = ["", *[f"SDR {n}" for n in names], *[f"Prec {n}" for n in names]]
    lines = [" | ".join(head)]
    for part in ("seen", "unseen", "overall"):
        cells = [part.capitalize()]
        for key in ("sdr", "precision"):
            for n in names:
                a = reports[n].aggregates.get(part, {})
                v, c = a.get(key), a.get(f"{key}_ci")
                fmt = "{:.2f}" if key == "sdr" else "{:.3f}"
                cells.append("-" if v is None else f"{fmt.format(v)}±{fmt.format(c)}")
        lines.append(" | ".join(cells))
    return "\n".join(lines)
