"""Full-scale URMP run: train every variant, then score its last 10 checkpoints.

Expect days of compute at the shipped settings (200 epochs of 12-pair batches
at 16 kHz). Runs resume from the newest checkpoint in each run directory.

    python scripts/reproduce_table1.py --data-root /data/URMP --out runs/urmp
"""
import argparse
import json
from pathlib import Path

import numpy as np

from pitchtimbre.data import Manifest, load_urmp, make_test_pairs, split_dataset
from pitchtimbre.evaluation import evaluate, format_table
from pitchtimbre.training import last_checkpoints, load_config, train

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
VARIANTS = {
    "MSI": "urmp_msi.json",
    "MSI-DIS": "urmp_msi_dis.json",
    "MSS-only": "urmp_mss_only.json",
    "AMT-only": "urmp_amt_only.json",
    "Multi-task": "urmp_multi_task.json",
}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--data-root", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=list(VARIANTS))
    p.add_argument("--pairs", type=int, default=500, help="number of fixed test pairs")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    root, out = Path(args.data_root), Path(args.out)
    manifest_path = root / "manifest.json"
    manifest = Manifest.load(manifest_path) if manifest_path.exists() else None
    reports = {}
    pairs = None
    for name in args.variants:
        train_cfg, model_cfg = load_config(CONFIGS / VARIANTS[name])
        tracks = load_urmp(root, manifest, train_cfg.sample_rate)
        train_set, test_set = split_dataset(tracks, manifest)
        run_dir = out / name
        done = last_checkpoints(run_dir, 1)
        resume = done[-1] if done else None
        train(train_cfg, model_cfg, train_set, out_dir=run_dir, resume=resume)
        if pairs is None:
            pairs = make_test_pairs(test_set, np.random.default_rng(args.seed), args.pairs,
                                    train_cfg.segment_seconds, train_cfg.stft_config,
                                    train_cfg.query_seconds, query_pool=tracks)
        report = evaluate(last_checkpoints(run_dir, train_cfg.keep_last), pairs, train_cfg.stft_config)
        report.save(run_dir / "report.json")
        reports[name] = report
        print(f"{name}: {json.dumps(report.aggregates)}", flush=True)
    print(format_table(reports))


if __name__ == "__main__":
    main()
