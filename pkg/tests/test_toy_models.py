"""Behaviour of the toy-trained models (shares the session fixtures with acceptance)."""
import numpy as np
import pytest

from pitchtimbre.data import NoteEvent, notes_to_roll
from pitchtimbre.dsp import dominant_frequency, griffin_lim, midi_to_hz
from pitchtimbre.evaluation import sdr
from pitchtimbre.inference import separate, synthesize_magnitude

pytestmark = pytest.mark.slow


def _render(res, pair, events):
    cfg = res.config.stft_config
    sr = pair.mixture.sample_rate
    roll = notes_to_roll(events, cfg.n_frames(len(pair.mixture)), cfg.hop_length / sr)
    mag = synthesize_magnitude(res.model, pair.mixture, roll, pair.query, cfg)
    return mag, griffin_lim(mag, 60, cfg=cfg, length=len(pair.mixture), sample_rate=sr)


def test_dis_separates_toy_mixtures(toy_two, trained_dis):
    _, pairs = toy_two
    cfg = trained_dis.config.stft_config
    scores = [sdr(p.target, separate(trained_dis.model, p.mixture, p.query, cfg).waveform) for p in pairs]
    assert np.mean(scores) > 5


def test_transposed_score_shifts_frequency(toy_two, trained_dis):
    pair = toy_two[1][0]
    freqs = []
    for shift in (0, 2):
        _, audio = _render(trained_dis, pair, [NoteEvent(0.0, midi_to_hz(64 + shift), 1.0)])
        freqs.append(dominant_frequency(audio))
    resolution = pair.mixture.sample_rate / len(pair.mixture)
    assert abs(freqs[1] - freqs[0] * 2 ** (2 / 12)) <= 2 * resolution
    assert abs(freqs[0] - midi_to_hz(64)) <= 2 * resolution


def test_empty_score_is_near_silent(toy_two, trained_dis):
    pair = toy_two[1][0]
    silent, _ = _render(trained_dis, pair, [])
    normal = separate(trained_dis.model, pair.mixture, pair.query, trained_dis.config.stft_config).magnitude
    assert np.sqrt(np.mean(silent ** 2)) < 0.05 * np.sqrt(np.mean(normal ** 2))


def test_query_selects_instrument(toy_two, trained_msi):
    _, pairs = toy_two
    cfg = trained_msi.config.stft_config
    pair = pairs[0]
    other = next(p for p in pairs if p.target_instrument == pair.interferer_instrument)
    a = separate(trained_msi.model, pair.mixture, pair.query, cfg)
    b = separate(trained_msi.model, pair.mixture, other.query, cfg)
    assert sdr(pair.target, a.waveform) > sdr(pair.target, b.waveform)
    assert sdr(pair.interferer, b.waveform) > sdr(pair.interferer, a.waveform)
