"""Separation, transcription and synthesis with a trained model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .data import roll_to_notes
from .dsp import DEFAULT_STFT, Spectrogram, StftConfig, Waveform, griffin_lim, istft, stft
from .model import MSI_DIS, SeparationModel


@dataclass
class Separation:
    waveform: Waveform | None
    magnitude: np.ndarray | None   # (T, F), in the mixture's original scale
    roll: np.ndarray | None        # (T, N) probabilities


def _prepared(w: Waveform, cfg: StftConfig):
    if len(w) < cfg.win_length:
        raise ValueError(f"signal of {len(w)} samples is shorter than one STFT window ({cfg.win_length})")
    spec = stft(w, cfg)
    mag = np.abs(spec.values)
    scale = float(mag.max()) or 1.0
    return spec, mag / scale, scale


def _tensor(a, model):
    dtype = next(model.parameters()).dtype
    return torch.as_tensor(a, dtype=dtype)[None]


@torch.no_grad()
def separate(model: SeparationModel, mixture: Waveform, query: Waveform,
             cfg: StftConfig = DEFAULT_STFT) -> Separation:
    """Extract the source matching ``query`` using the mixture phase for resynthesis."""
    model.eval()
    spec, mix, scale = _prepared(mixture, cfg)
    _, q, _ = _prepared(query, cfg)
    out = model(_tensor(mix, model), query_spec=_tensor(q, model))
    roll = out["roll"][0].numpy() if "roll" in out else None
    if "spec" not in out:
        return Separation(None, None, roll)
    mag = out["spec"][0].numpy().astype(np.float64) * scale
    wav = istft(Spectrogram(mag * np.exp(1j * spec.phase), cfg, len(mixture)),
                sample_rate=mixture.sample_rate)
    return Separation(wav, mag, roll)


@torch.no_grad()
def transcribe(model: SeparationModel, mixture: Waveform, query: Waveform,
               cfg: StftConfig = DEFAULT_STFT) -> np.ndarray:
    if model.transcriptor is None:
        raise ValueError(f"variant {model.variant} has no transcriptor")
    return separate(model, mixture, query, cfg).roll


def transcribe_notes(roll: np.ndarray, cfg: StftConfig, sample_rate: int):
    return roll_to_notes(roll, cfg.hop_length / sample_rate)


@torch.no_grad()
def synthesize_magnitude(model: SeparationModel, timbre_source: Waveform, score_roll: np.ndarray,
                         query: Waveform | None = None, cfg: StftConfig = DEFAULT_STFT) -> np.ndarray:
    """Magnitude rebuilt from the timbre of ``timbre_source`` and a one-hot score roll."""
    # MSI shares the hardware but its decoder never learned to work without the skips
    if model.variant != MSI_DIS:
        raise ValueError(f"variant {model.variant} cannot synthesize")
    model.eval()
    _, mix, scale = _prepared(timbre_source, cfg)
    _, q, _ = _prepared(query if query is not None else timbre_source, cfg)
    if score_roll.shape[0] != mix.shape[0]:
        raise ValueError(f"score has {score_roll.shape[0]} frames, timbre source {mix.shape[0]}")
    qv = model.embed_query(_tensor(q, model))
    out = model.reconstruct(_tensor(mix, model), qv, _tensor(score_roll, model))
    return out[0].numpy().astype(np.float64) * scale


def synthesize(model: SeparationModel, timbre_source: Waveform, score_roll: np.ndarray,
               query: Waveform | None = None, cfg: StftConfig = DEFAULT_STFT,
               n_iters: int = 60) -> Waveform:
    """Render a score in the source's timbre; phase comes from Griffin-Lim."""
    mag = synthesize_magnitude(model, timbre_source, score_roll, query, cfg)
    return griffin_lim(mag, n_iters, cfg=cfg, length=len(timbre_source),
                       sample_rate=timbre_source.sample_rate)
