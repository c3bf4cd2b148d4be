"""Run one experiment config end to end and print the posterior summary.

    python scripts/run_experiment.py configs/heat1d.yaml --out-dir runs/heat1d
"""
import argparse
import json
import logging
from pathlib import Path

from dklinv import cli, config


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("config")
    ap.add_argument("--out-dir", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = config.load(args.config)
    out = Path(args.out_dir or cfg["output"]["dir"])
    manifest = cli.run_experiment(cfg, out)
    summary = json.loads((out / "summary.json").read_text())
    for name, v in summary.items():
        if isinstance(v, dict) and "ci95" in v:
            lo, hi = v["ci95"]
            print(f"{name:>8}: mean {v['mean']:.4f}  sd {v['sd']:.4f}  95% CI [{lo:.4f}, {hi:.4f}]")
    print("truth:", summary["phi_true"], " pretrained:", [round(p, 4) for p in summary["phi_pre"]])
    print("wall clock (s):", {k: round(t, 1) for k, t in manifest["wall_clock_seconds"].items()})


if __name__ == "__main__":
    main()
