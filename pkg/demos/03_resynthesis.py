# Disentangled model as a synthesizer: keep the timbre, replace the score.
# Training takes roughly ten minutes on one CPU core.
from pathlib import Path

import numpy as np

from pitchtimbre.data import NoteEvent, ToySpec, make_test_pairs, notes_to_roll, synth_toy_dataset
from pitchtimbre.dsp import dominant_frequency, midi_to_hz, write_wav
from pitchtimbre.inference import separate, synthesize
from pitchtimbre.model import MSI_DIS, small_config
from pitchtimbre.training import TrainConfig, save_checkpoint, train

out = Path("demo_out")
out.mkdir(exist_ok=True)

tracks = synth_toy_dataset(ToySpec(timbres=("sawtooth", "square"), tracks_per_timbre=2, seconds=8.0))
cfg = TrainConfig(variant=MSI_DIS, batch_pairs=8, epochs=1, steps_per_epoch=1000, sample_rate=8000,
                  n_fft=256, win_length=256, hop_length=80, segment_seconds=1.0, query_seconds=0.5)
result = train(cfg, small_config(MSI_DIS, n_freqs=cfg.stft_config.n_freqs), tracks)
save_checkpoint(out / "toy_msi_dis.pt", result.model, train_config=cfg)
model, stft_cfg, sr = result.model, cfg.stft_config, cfg.sample_rate

pair = make_test_pairs(tracks, np.random.default_rng(3), 1, 1.0, stft_cfg, 0.5)[0]
write_wav(out / "mixture.wav", pair.mixture)
write_wav(out / "separated.wav", separate(model, pair.mixture, pair.query, stft_cfg).waveform)

# %% a fixed two-note score in the target's timbre, then the same score up a tone
n_frames = stft_cfg.n_frames(len(pair.mixture))
hop = stft_cfg.hop_length / sr
for name, shift in (("score", 0), ("score_up2", 2)):
    events = [NoteEvent(0.0, midi_to_hz(64 + shift), 0.5), NoteEvent(0.5, midi_to_hz(69 + shift), 0.5)]
    audio = synthesize(model, pair.mixture, notes_to_roll(events, n_frames, hop), pair.query, stft_cfg)
    write_wav(out / f"{name}.wav", audio)
    first = audio.samples[: len(audio) // 2]
    print(f"{name}: dominant frequency of first note {dominant_frequency(first, sr):.1f} Hz "
          f"(note {midi_to_hz(64 + shift):.1f} Hz)")
