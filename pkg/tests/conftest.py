"""Session fixtures: toy datasets and the models trained on them.

Training happens at most once per session and only when a test asks for it.
"""
import time

import numpy as np
import pytest

from pitchtimbre.data import ToySpec, make_test_pairs, split_dataset, synth_toy_dataset, toy_manifest
from pitchtimbre.model import MSI, MSI_DIS, small_config
from pitchtimbre.training import TrainConfig, train

TOY_STEPS = {MSI: 600, MSI_DIS: 1000}
ZERO_SHOT_STEPS = 900

ACCEPTANCE_LINES = []


def toy_train_config(variant, steps, seed=0):
    return TrainConfig(variant=variant, batch_pairs=8, epochs=1, steps_per_epoch=steps, seed=seed,
                       sample_rate=8000, n_fft=256, win_length=256, hop_length=80,
                       segment_seconds=1.0, query_seconds=0.5)


def _train(variant, steps, tracks):
    cfg = toy_train_config(variant, steps)
    start = time.perf_counter()
    res = train(cfg, small_config(variant, n_freqs=cfg.stft_config.n_freqs), tracks)
    res.seconds = time.perf_counter() - start
    res.config = cfg
    return res


@pytest.fixture(scope="session")
def toy_two():
    """Two timbres; evaluation pairs are drawn from the training tracks (held-in)."""
    tracks = synth_toy_dataset(ToySpec(timbres=("sawtooth", "square"), tracks_per_timbre=2, seconds=8.0))
    cfg = toy_train_config(MSI, 1)
    pairs = make_test_pairs(tracks, np.random.default_rng(1), 16, cfg.segment_seconds,
                            cfg.stft_config, cfg.query_seconds)
    return tracks, pairs


@pytest.fixture(scope="session")
def trained_msi(toy_two):
    return _train(MSI, TOY_STEPS[MSI], toy_two[0])


@pytest.fixture(scope="session")
def trained_dis(toy_two):
    return _train(MSI_DIS, TOY_STEPS[MSI_DIS], toy_two[0])


@pytest.fixture(scope="session")
def zero_shot():
    # square lies between reed and triangle in harmonic rolloff, so the query has to interpolate
    spec = ToySpec(timbres=("sawtooth", "reed", "triangle", "square"), unseen=("square",),
                   tracks_per_timbre=2, seconds=8.0, seed=5)
    tracks = synth_toy_dataset(spec)
    train_set, _ = split_dataset(tracks, toy_manifest(spec))
    res = _train(MSI, ZERO_SHOT_STEPS, train_set)
    cfg = res.config
    pairs = make_test_pairs(tracks, np.random.default_rng(2), 96, cfg.segment_seconds,
                            cfg.stft_config, cfg.query_seconds)
    return res, pairs


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
