"""Command-line entry point: ``pitchtimbre <command> [flags]``."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .data import (
    Manifest,
    ToySpec,
    default_urmp_manifest,
    load_urmp,
    make_test_pairs,
    notes_to_roll,
    parse_annotations,
    split_dataset,
    synth_toy_dataset,
    toy_manifest,
    write_annotations,
    write_dataset,
)
from .dsp import DEFAULT_SAMPLE_RATE, DEFAULT_STFT, StftConfig, Waveform, read_wav, resample, stft, write_wav

DATA_ENV = "PITCHTIMBRE_DATA"
CHECKSUM_FILE = "checksums.sha256"
PLOT_MARGINS = (80, 20, 20, 60)  # left, right, top, bottom, in pixels
PLOT_DPI = 100
PLOT_FLOOR_DB = 80.0

class CliError(Exception):
    pass


# --------------------------------------------------------------------------
# shared helpers
# --------------------------------------------------------------------------

def _data_root(args) -> Path:
    root = args.data_root or os.environ.get(DATA_ENV)
    if not root:
        raise CliError(f"no dataset root: pass --data-root or set {DATA_ENV}")
    return Path(root)


def _read_config(args) -> dict:
    if not getattr(args, "config", None):
        return {}
    path = Path(args.config)
    if not path.exists():
        raise CliError(f"config file not found: {path}")
    return json.loads(path.read_text())


def _stft_from(train_section: dict | None) -> tuple[StftConfig, int]:
    t = train_section or {}
    cfg = StftConfig(t.get("n_fft", DEFAULT_STFT.n_fft), t.get("win_length", DEFAULT_STFT.win_length),
                     t.get("hop_length", DEFAULT_STFT.hop_length))
    return cfg, t.get("sample_rate", DEFAULT_SAMPLE_RATE)


def _load_checkpoint(path):
    from .training import load_checkpoint, load_model
    if not Path(path).exists():
        raise CliError(f"checkpoint not found: {path}")
    model = load_model(path)
    cfg, sr = _stft_from(load_checkpoint(path)["train_config"])
    return model, cfg, sr


def _read_audio(path, sample_rate: int) -> Waveform:
    path = Path(path)
    if not path.exists():
        raise CliError(f"input not found: {path}")
    try:
        w = read_wav(path)
    except ValueError as exc:
        raise CliError(f"unreadable audio {path}: {exc}") from None
    return resample(w, sample_rate) if w.sample_rate != sample_rate else w


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _seed(seed: int):
    import torch
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_prepare(args):
    """Write the manifest and checksums; verify checksums when they already exist."""
    root = _data_root(args)
    if args.toy:
        spec = ToySpec(timbres=tuple(args.toy_timbres), unseen=tuple(args.toy_unseen),
                       tracks_per_timbre=args.toy_tracks, seconds=args.toy_seconds, seed=args.seed)
        write_dataset(synth_toy_dataset(spec), root, toy_manifest(spec))
    if not root.is_dir():
        raise CliError(f"dataset root {root} is not a directory")
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        default_urmp_manifest().save(manifest_path)
    files = sorted(p for p in root.glob("*/*") if p.suffix in (".wav", ".txt"))
    if not files:
        raise CliError(f"no tracks found under {root}")
    sums_path = root / CHECKSUM_FILE
    current = {str(p.relative_to(root)): _sha256(p) for p in files}
    if sums_path.exists():
        recorded = dict(line.split("  ", 1)[::-1] for line in sums_path.read_text().splitlines() if line)
        bad = sorted(k for k in recorded if current.get(k) != recorded[k])
        if bad:
            raise CliError(f"checksum mismatch for {len(bad)} file(s), first: {bad[0]}")
        print(f"verified {len(recorded)} files")
    else:
        sums_path.write_text("".join(f"{h}  {k}\n" for k, h in current.items()))
        print(f"recorded checksums for {len(current)} files")
    tracks = load_urmp(root, Manifest.load(manifest_path), sample_rate=args.sample_rate)
    train_set, test_set = split_dataset(tracks, Manifest.load(manifest_path))
    print(f"{len(train_set)} training tracks, {len(test_set)} test tracks")


def cmd_train(args):
    from .training import TrainConfig, train
    from .model import ModelConfig
    conf = _read_config(args)
    train_kw = dict(conf.get("train", {}))
    if args.seed is not None:
        train_kw["seed"] = args.seed
    if args.variant:
        train_kw["variant"] = args.variant
    cfg = TrainConfig(**train_kw)
    model_kw = dict(conf.get("model", {}))
    model_kw["variant"] = cfg.variant
    model_kw.setdefault("n_freqs", cfg.stft_config.n_freqs)
    model_cfg = ModelConfig(**model_kw)
    root = _data_root(args)
    manifest = Manifest.load(root / "manifest.json") if (root / "manifest.json").exists() else None
    train_set, _ = split_dataset(load_urmp(root, manifest, cfg.sample_rate), manifest)
    if not train_set:
        raise CliError(f"no training tracks under {root}")
    res = train(cfg, model_cfg, train_set, out_dir=args.out, resume=args.resume, max_steps=args.max_steps)
    print(f"trained {res.step} steps; last checkpoint: {res.checkpoints[-1] if res.checkpoints else 'none'}")


def cmd_separate(args):
    from .inference import separate, transcribe_notes
    _seed(args.seed or 0)
    model, cfg, sr = _load_checkpoint(args.checkpoint)
    if model.decoder is None:
        raise CliError(f"variant {model.variant} has no decoder and cannot separate")
    res = separate(model, _read_audio(args.mixture, sr), _read_audio(args.query, sr), cfg)
    write_wav(args.out, res.waveform)
    if res.roll is not None:
        out = Path(args.out)
        np.save(out.with_suffix(".roll.npy"), res.roll)
        write_annotations(out.with_suffix(".notes.txt"), transcribe_notes(res.roll, cfg, sr))
    print(f"wrote {args.out}")


def cmd_transcribe(args):
    from .inference import transcribe, transcribe_notes
    _seed(args.seed or 0)
    model, cfg, sr = _load_checkpoint(args.checkpoint)
    if model.transcriptor is None:
        raise CliError(f"variant {model.variant} has no transcriptor")
    roll = transcribe(model, _read_audio(args.mixture, sr), _read_audio(args.query, sr), cfg)
    write_annotations(args.out, transcribe_notes(roll, cfg, sr))
    np.save(Path(args.out).with_suffix(".roll.npy"), roll)
    print(f"wrote {args.out}")


def cmd_synthesize(args):
    from .inference import synthesize
    from .model import MSI_DIS
    _seed(args.seed or 0)
    model, cfg, sr = _load_checkpoint(args.checkpoint)
    if model.variant != MSI_DIS:
        raise CliError(f"variant {model.variant} cannot synthesize")
    source = _read_audio(args.timbre_source, sr)
    query = _read_audio(args.query, sr) if args.query else None
    if not Path(args.score).exists():
        raise CliError(f"score not found: {args.score}")
    events = parse_annotations(args.score, midi_column=args.midi_score)
    roll = notes_to_roll(events, cfg.n_frames(len(source)), cfg.hop_length / sr)
    out = synthesize(model, source, roll, query, cfg, n_iters=args.n_iters)
    write_wav(args.out, out)
    print(f"wrote {args.out}")


def cmd_evaluate(args):
    from .evaluation import evaluate, format_table
    from .training import last_checkpoints, load_checkpoint
    paths = list(args.checkpoint or [])
    if args.run_dir:
        paths += last_checkpoints(args.run_dir, args.last)
    if not paths:
        raise CliError("no checkpoints: pass --checkpoint or --run-dir")
    for p in paths:
        if not Path(p).exists():
            raise CliError(f"checkpoint not found: {p}")
    state = load_checkpoint(paths[0])
    cfg, sr = _stft_from(state["train_config"])
    t = state["train_config"] or {}
    root = _data_root(args)
    manifest = Manifest.load(root / "manifest.json") if (root / "manifest.json").exists() else None
    tracks = load_urmp(root, manifest, sr)
    train_set, test_set = split_dataset(tracks, manifest)
    pool = tracks if args.held_in else test_set
    if not pool:
        raise CliError("no test tracks; use --held-in to evaluate on training tracks")
    pairs = make_test_pairs(pool, _seed(args.seed or 0), args.pairs, t.get("segment_seconds", 4.0),
                            cfg, t.get("query_seconds"))
    report = evaluate(paths, pairs, cfg)
    if args.out:
        report.save(args.out)
    print(format_table({report.variant: report}))


def log_spectrogram(samples: np.ndarray, cfg: StftConfig, floor_db: float = PLOT_FLOOR_DB) -> np.ndarray:
    """(F, T) dB image clipped ``floor_db`` below its peak; silence maps to the floor."""
    mag = np.abs(stft(np.asarray(samples, dtype=np.float64), cfg).values).T
    peak = mag.max()
    if peak <= 0:
        return np.full(mag.shape, -floor_db)
    db = 20 * np.log10(np.maximum(mag / peak, 10 ** (-floor_db / 20)))
    return db


def plot_image(image: np.ndarray, out, hop_seconds: float, max_hz: float, scale: float = 2.0, title=None):
    """Save an (F, T) image so the data area is exactly ``scale`` px per frame and per bin."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    n_f, n_t = image.shape
    left, right, top, bottom = PLOT_MARGINS
    w_px, h_px = int(round(n_t * scale)), int(round(n_f * scale))
    fig_w, fig_h = w_px + left + right, h_px + top + bottom
    fig = plt.figure(figsize=(fig_w / PLOT_DPI, fig_h / PLOT_DPI), dpi=PLOT_DPI)
    ax = fig.add_axes([left / fig_w, bottom / fig_h, w_px / fig_w, h_px / fig_h])
    ax.imshow(image, origin="lower", aspect="auto", cmap="magma", vmin=-PLOT_FLOOR_DB, vmax=0,
              extent=(0, n_t * hop_seconds, 0, max_hz), interpolation="nearest")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("frequency (Hz)")
    if title:
        ax.set_title(title, fontsize=8)
    meta = {"Frames": str(n_t), "Bins": str(n_f), "Scale": f"{scale:g}",
            "Margins": ",".join(map(str, PLOT_MARGINS))}
    fig.savefig(out, dpi=PLOT_DPI, metadata=meta)
    plt.close(fig)
    return fig_w, fig_h


def cmd_plot(args):
    conf = _read_config(args)
    cfg, sr = _stft_from(conf.get("train"))
    src = Path(args.input)
    if not src.exists():
        raise CliError(f"input not found: {src}")
    if src.suffix == ".npy":
        try:
            mag = np.load(src)
        except ValueError as exc:
            raise CliError(f"unreadable spectrogram {src}: {exc}") from None
        if mag.ndim != 2:
            raise CliError(f"expected a 2-D (T, F) magnitude array, got shape {mag.shape}")
        mag = np.abs(mag).T
        peak = mag.max()
        image = (np.full(mag.shape, -PLOT_FLOOR_DB) if peak <= 0 else
                 20 * np.log10(np.maximum(mag / peak, 10 ** (-PLOT_FLOOR_DB / 20))))
    else:
        w = _read_audio(src, sr)
        image = log_spectrogram(w.samples, cfg)
    plot_image(image, args.out, cfg.hop_length / sr, sr / 2, args.scale, title=src.name)
    print(f"wrote {args.out}")


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with 'train' and 'model' sections")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pitchtimbre",
                                description="Query-conditioned separation, transcription and synthesis.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", parents=[common], help="write manifest and checksums for a dataset")
    s.add_argument("--data-root", help=f"dataset root (default: ${DATA_ENV})")
    s.add_argument("--sample-rate", type=int, default=DEFAULT_SAMPLE_RATE)
    s.add_argument("--toy", action="store_true", help="synthesize a toy dataset into the root first")
    s.add_argument("--toy-timbres", nargs="+", default=["sawtooth", "square"])
    s.add_argument("--toy-unseen", nargs="*", default=[])
    s.add_argument("--toy-tracks", type=int, default=2)
    s.add_argument("--toy-seconds", type=float, default=8.0)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", parents=[common], help="train a model")
    s.add_argument("--data-root")
    s.add_argument("--out", required=True, help="run directory for checkpoints and metrics.csv")
    s.add_argument("--variant", choices=["MSI", "MSI-DIS", "MSS-only", "AMT-only", "Multi-task"])
    s.add_argument("--resume")
    s.add_argument("--max-steps", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("separate", parents=[common], help="extract the source matching a query")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--mixture", required=True)
    s.add_argument("--query", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_separate)

    s = sub.add_parser("transcribe", parents=[common], help="transcribe the source matching a query")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--mixture", required=True)
    s.add_argument("--query", required=True)
    s.add_argument("--out", required=True, help="note file (onset Hz duration)")
    s.set_defaults(func=cmd_transcribe)

    s = sub.add_parser("synthesize", parents=[common], help="render a score in a source's timbre")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--timbre-source", required=True)
    s.add_argument("--score", required=True)
    s.add_argument("--query", help="query clip (default: the timbre source itself)")
    s.add_argument("--midi-score", action="store_true", help="second score column holds MIDI numbers")
    s.add_argument("--n-iters", type=int, default=60)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("evaluate", parents=[common], help="score checkpoints on test pairs")
    s.add_argument("--checkpoint", action="append")
    s.add_argument("--run-dir")
    s.add_argument("--last", type=int, default=10)
    s.add_argument("--data-root")
    s.add_argument("--pairs", type=int, default=100)
    s.add_argument("--held-in", action="store_true", help="draw pairs from all tracks")
    s.add_argument("--out", help="JSON report path")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("plot", parents=[common], help="log-magnitude spectrogram image")
    s.add_argument("--in", dest="input", required=True, help="wav file or (T, F) .npy magnitude")
    s.add_argument("--out", required=True)
    s.add_argument("--scale", type=float, default=2.0, help="pixels per frame and per bin")
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CliError, ValueError, OSError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
