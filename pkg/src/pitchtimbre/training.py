"""Optimisation loop, batch assembly and checkpoints."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses
from .data import PairSampler
from .dsp import StftConfig, stft
from .model import MSI_DIS, ModelConfig, SeparationModel, build_model

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "pitchtimbre-checkpoint"
CHECKPOINT_VERSION = 1
METRIC_FIELDS = ("step", "epoch", "variant", "l_query", "l_transcription", "l_separation", "l_pti", "total")


@dataclass
class TrainConfig:
    variant: str = MSI_DIS
    batch_pairs: int = 12
    epochs: int = 200
    steps_per_epoch: int = 100
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    segment_seconds: float = 4.0
    query_seconds: float | None = None
    shift_range: int = 4
    sample_rate: int = 16000
    n_fft: int = 2048
    win_length: int = 1024
    hop_length: int = 160
    keep_last: int = 10

    def __post_init__(self):
        if self.batch_pairs < 2:
            raise ValueError("batch_pairs must be >= 2 so the contrastive loss has negatives")

    @property
    def stft_config(self) -> StftConfig:
        return StftConfig(self.n_fft, self.win_length, self.hop_length)


def load_config(path) -> tuple[TrainConfig, ModelConfig]:
    """Read a JSON file with ``train`` and ``model`` sections."""
    data = json.loads(Path(path).read_text())
    train_cfg = TrainConfig(**data.get("train", {}))
    model_kw = dict(data.get("model", {}))
    model_kw.setdefault("variant", train_cfg.variant)
    model_kw.setdefault("n_freqs", train_cfg.stft_config.n_freqs)
    return train_cfg, ModelConfig(**model_kw)


def save_config(path, train_cfg: TrainConfig, model_cfg: ModelConfig):
    Path(path).write_text(json.dumps({"train": asdict(train_cfg), "model": model_cfg.to_dict()}, indent=2))


# --------------------------------------------------------------------------
# batches
# --------------------------------------------------------------------------

def magnitude(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    return np.abs(stft(x, cfg).values)


@dataclass
class Batch:
    mix: torch.Tensor            # (B, T, F), scaled by the mixture peak
    mix_shifted: torch.Tensor    # same scale as ``mix``
    target: torch.Tensor
    roll: torch.Tensor           # (B, T, N) one-hot
    queries: torch.Tensor        # (B, Q, Tq, F), each clip scaled by its own peak
    labels: list
    scale: torch.Tensor          # (B,)


def _peak(m: np.ndarray) -> float:
    peak = float(m.max())
    return peak if peak > 0 else 1.0


def make_batch(pairs, cfg: StftConfig, dtype=torch.float32) -> Batch:
    mixes, shifted, targets, rolls, queries, scales = [], [], [], [], [], []
    for pair in pairs:
        mix = magnitude(pair.mixture.samples, cfg)
        scale = _peak(mix)
        mixes.append(mix / scale)
        shifted.append(magnitude(pair.shifted_mixture.samples, cfg) / scale)
        targets.append(magnitude(pair.target.samples, cfg) / scale)
        rolls.append(pair.target_roll)
        qs = [magnitude(q.samples, cfg) for q in pair.query_clips]
        queries.append([q / _peak(q) for q in qs])
        scales.append(scale)
    t = lambda a: torch.as_tensor(np.asarray(a), dtype=dtype)
    return Batch(t(mixes), t(shifted), t(targets), t(rolls), t(queries),
                 [p.target_instrument for p in pairs], t(scales))


# --------------------------------------------------------------------------
# loss computation
# --------------------------------------------------------------------------

def compute_losses(model: SeparationModel, batch: Batch) -> dict:
    """All loss terms for the model's variant plus ``total``; values are tensors."""
    b, n_q = batch.queries.shape[:2]
    q_all = model.embed_query(batch.queries.flatten(0, 1)).view(b, n_q, -1)
    anchors = q_all[:, 0]
    pool = q_all.flatten(0, 1)
    pool_labels = [lab for lab in batch.labels for _ in range(n_q)]
    parts = {"l_query": losses.batch_query_loss(anchors, q_all[:, 1], batch.labels, pool, pool_labels)}

    variant = model.variant
    if variant == MSI_DIS:
        levels = model.encode(batch.mix, anchors)
        roll = model.transcribe_latent(levels)
        parts["l_transcription"] = losses.transcription_loss(batch.roll, roll)
        parts["l_pti"] = losses.pti_loss(batch.target, model, batch.mix_shifted, roll, anchors)
    else:
        out = model(batch.mix, query=anchors)
        if "roll" in out:
            parts["l_transcription"] = losses.transcription_loss(batch.roll, out["roll"])
        if "spec" in out:
            parts["l_separation"] = losses.separation_loss(batch.target, out["spec"])
    parts["total"] = losses.aggregate(variant, parts)
    return parts


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(path, model: SeparationModel, optimizer=None, epoch: int = 0, step: int = 0,
                    train_config: TrainConfig | None = None):
    """Write a self-describing checkpoint (``torch.save`` zip container).

    Keys: ``format``, ``version``, ``model_config`` (dict echo), ``train_config``,
    ``state_dict`` (tensors by hierarchical name), ``optimizer``, ``epoch``, ``step``.
    """
    state = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_dict(),
        "train_config": asdict(train_config) if train_config else None,
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "step": step,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(state, path)
    return path


def load_checkpoint(path, expected: ModelConfig | None = None) -> dict:
    state = torch.load(Path(path), map_location="cpu", weights_only=True)
    if state.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if state.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {state.get('version')} != supported {CHECKPOINT_VERSION}")
    if expected is not None and state["model_config"] != expected.to_dict():
        raise ValueError(f"checkpoint config {state['model_config']} does not match {expected.to_dict()}")
    return state


def load_model(path, expected: ModelConfig | None = None) -> SeparationModel:
    state = load_checkpoint(path, expected)
    model = build_model(ModelConfig.from_dict(state["model_config"]))
    model.load_state_dict(state["state_dict"])
    return model.eval()


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

def make_optimizer(model, cfg: TrainConfig):
    if cfg.optimizer != "adam":
        raise ValueError(f"unsupported optimizer {cfg.optimizer!r}")
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)


@dataclass
class TrainResult:
    model: SeparationModel
    history: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    step: int = 0
    epoch: int = 0


def _as_float(v):
    return float(v.detach()) if torch.is_tensor(v) else v


def train(cfg: TrainConfig, model_cfg: ModelConfig, train_set, out_dir=None, resume=None,
          max_steps: int | None = None) -> TrainResult:
    """Train ``cfg.epochs * cfg.steps_per_epoch`` steps on pairs drawn on the fly.

    With ``out_dir`` a checkpoint is written after every epoch (the last
    ``keep_last`` are kept) and ``metrics.csv`` receives one row per step.
    ``resume`` continues from a checkpoint, keeping its epoch/step counters.
    """
    if model_cfg.variant != cfg.variant:
        raise ValueError(f"model variant {model_cfg.variant} != train variant {cfg.variant}")
    if model_cfg.n_freqs != cfg.stft_config.n_freqs:
        raise ValueError("model n_freqs does not match the STFT configuration")
    torch.manual_seed(cfg.seed)
    model = build_model(model_cfg)
    optimizer = make_optimizer(model, cfg)
    epoch = step = 0
    if resume is not None:
        state = load_checkpoint(resume, model_cfg)
        model.load_state_dict(state["state_dict"])
        if state["optimizer"] is not None:
            optimizer.load_state_dict(state["optimizer"])
        epoch, step = state["epoch"], state["step"]
    # stream keyed on the resume point so a resumed run sees fresh pairs
    rng = np.random.default_rng([cfg.seed, step])

    sampler = PairSampler(train_set, cfg.segment_seconds, cfg.shift_range, cfg.stft_config,
                          cfg.query_seconds)
    out_dir = Path(out_dir) if out_dir is not None else None
    writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.csv"
        new = not metrics_path.exists()
        fh = open(metrics_path, "a", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        if new:
            writer.writeheader()
    result = TrainResult(model, step=step, epoch=epoch)
    model.train()
    try:
        while epoch < cfg.epochs:
            for _ in range(cfg.steps_per_epoch):
                if max_steps is not None and step >= max_steps:
                    break
                batch = make_batch([sampler.sample(rng) for _ in range(cfg.batch_pairs)], cfg.stft_config)
                parts = compute_losses(model, batch)
                total = parts["total"]
                if not torch.isfinite(total):
                    if out_dir is not None:
                        save_checkpoint(out_dir / "diagnostic.pt", model, optimizer, epoch, step, cfg)
                    raise FloatingPointError(
                        f"non-finite loss at step {step}: " + ", ".join(f"{k}={_as_float(v)}" for k, v in parts.items()))
                optimizer.zero_grad()
                total.backward()
                optimizer.step()
                step += 1
                row = {"step": step, "epoch": epoch, "variant": cfg.variant}
                row.update({k: _as_float(parts.get(k)) for k in METRIC_FIELDS[3:]})
                result.history.append(row)
                if writer is not None:
                    writer.writerow(row)
            else:
                epoch += 1
                if out_dir is not None:
                    path = save_checkpoint(out_dir / f"epoch{epoch:04d}.pt", model, optimizer, epoch, step, cfg)
                    result.checkpoints.append(path)
                    for old in sorted(out_dir.glob("epoch*.pt"))[:-cfg.keep_last]:
                        old.unlink()
                continue
            break
    finally:
        if writer is not None:
            fh.close()
    result.step, result.epoch = step, epoch
    result.optimizer = optimizer
    if out_dir is not None:
        result.checkpoints = last_checkpoints(out_dir, cfg.keep_last)
    model.eval()
    return result


def last_checkpoints(out_dir, n: int = 10) -> list:
    return sorted(Path(out_dir).glob("epoch*.pt"))[-n:]
