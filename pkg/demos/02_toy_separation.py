# Query-conditioned separation on two synthetic instruments.
# Trains a small MSI model for a few minutes on CPU, then separates and transcribes.
from pathlib import Path

import numpy as np

from pitchtimbre.data import ToySpec, make_test_pairs, synth_toy_dataset
from pitchtimbre.evaluation import evaluate, mixture_baseline, sdr
from pitchtimbre.inference import separate
from pitchtimbre.model import MSI, small_config
from pitchtimbre.training import TrainConfig, save_checkpoint, train

out = Path("demo_out")
out.mkdir(exist_ok=True)

tracks = synth_toy_dataset(ToySpec(timbres=("sawtooth", "square"), tracks_per_timbre=2, seconds=8.0))
cfg = TrainConfig(variant=MSI, batch_pairs=8, epochs=1, steps_per_epoch=600, sample_rate=8000,
                  n_fft=256, win_length=256, hop_length=80, segment_seconds=1.0, query_seconds=0.5)
model_cfg = small_config(MSI, n_freqs=cfg.stft_config.n_freqs)

result = train(cfg, model_cfg, tracks)
print("final losses", {k: round(v, 4) for k, v in result.history[-1].items() if isinstance(v, float)})
save_checkpoint(out / "toy_msi.pt", result.model, train_config=cfg)

# %% score on held-in pairs
pairs = make_test_pairs(tracks, np.random.default_rng(1), 16, 1.0, cfg.stft_config, 0.5)
report = evaluate([result.model], pairs, cfg.stft_config)
print("model", report.aggregates["overall"])
print("mixture as estimate", round(mixture_baseline(pairs), 2), "dB")

# %% the same mixture with each instrument as the query
pair = pairs[0]
for query_pair in pairs:
    if query_pair.target_instrument == pair.interferer_instrument:
        break
for name, query, ref in ((pair.target_instrument, pair.query, pair.target),
                         (pair.interferer_instrument, query_pair.query, pair.interferer)):
    res = separate(result.model, pair.mixture, query, cfg.stft_config)
    notes = sorted(set(res.roll.argmax(axis=1)) - {88})
    print(f"query {name}: SDR {sdr(ref, res.waveform):.2f} dB, notes {[n + 21 for n in notes]}")
