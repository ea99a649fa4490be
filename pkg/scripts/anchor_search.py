"""Anchor aspect ratios and scales for the toy training set (or any manifest).

    python scripts/anchor_search.py [--manifest data/manifest.json] [--k 4] [--size 64]

Without ``--manifest`` the seeded 600-image toy training split is generated in memory.
Prints the anchor configuration as JSON.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from biskdet.anchorsearch import compute_anchor_hyperparameters
from biskdet.dataio import DatasetManifest, generate_synthetic_dataset
from biskdet.experiments import TOY_SEEDS, TOY_SIZES


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--manifest", type=Path)
    ap.add_argument("--k", type=int, default=4)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if args.manifest:
        records = DatasetManifest.from_json(args.manifest.read_text()).records
    else:
        ds = generate_synthetic_dataset(TOY_SIZES["train"], image_size=(args.size, args.size), seed=TOY_SEEDS["train"])
        records = ds.manifest.records
    wh = np.concatenate([r.boxes()[:, 2:] * [r.width, r.height] for r in records if r.objects])
    cfg = compute_anchor_hyperparameters(wh, args.k, seed=args.seed)
    print(f"{len(wh)} boxes, k={args.k}")
    print(cfg.to_json())


if __name__ == "__main__":
    main()
