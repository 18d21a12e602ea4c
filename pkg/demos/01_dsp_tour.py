# Signal-processing building blocks on a synthetic tone.
# Writes a few wav files and a spectrogram image into ./demo_out.
from pathlib import Path

import numpy as np

from pitchtimbre.cli import log_spectrogram, plot_image
from pitchtimbre.data import NoteEvent, render_track
from pitchtimbre.dsp import (
    StftConfig,
    Waveform,
    dominant_frequency,
    griffin_lim,
    istft,
    midi_to_hz,
    pitch_shift,
    stft,
    write_wav,
)

out = Path("demo_out")
out.mkdir(exist_ok=True)
sr = 16000
cfg = StftConfig()  # 2048-point FFT, 1024-sample Hann window, 10 ms hop

# %% a short sawtooth melody
melody = [NoteEvent(0.25 * k, midi_to_hz(m), 0.25) for k, m in enumerate([60, 62, 64, 65, 67, 65, 64, 62])]
x = Waveform(render_track("sawtooth", melody, 2.0, sr), sr)
write_wav(out / "melody.wav", x)

spec = stft(x, cfg)
print("spectrogram", spec.shape, "frames x bins")

# exact inverse with the true phase
y = istft(spec, length=len(x))
print("round-trip max error", np.abs(y.samples - x.samples).max())

# %% magnitude only: recover a phase iteratively
gla, errors = griffin_lim(np.abs(spec.values), 60, cfg=cfg, length=len(x), sample_rate=sr, return_errors=True)
print(f"griffin-lim spectral convergence {errors[0]:.3f} -> {errors[-1]:.3f}")
write_wav(out / "melody_gla.wav", gla)

# %% pitch shift keeps the duration
tone = Waveform(0.5 * np.sin(2 * np.pi * 440 * np.arange(sr) / sr), sr)
for k in (-4, 2, 4):
    shifted = pitch_shift(tone, k)
    print(f"{k:+d} semitones: {dominant_frequency(shifted):.1f} Hz "
          f"(expected {440 * 2 ** (k / 12):.1f}), {len(shifted)} samples")

plot_image(log_spectrogram(x.samples, cfg), out / "melody.png", cfg.hop_length / sr, sr / 2, scale=0.5)
print("wrote", out / "melody.png")
