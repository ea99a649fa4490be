"""Clean training, UAP attack, curriculum adversarial training and heatmap check on the toy set.

    python scripts/toy_protocol.py --out runs/toy [--epochs 150] [--skip-adversarial]

Writes curves, checkpoints, perturbation blobs and ``summary.json`` under ``--out``.
"""

from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

from biskdet.detector import Detector
from biskdet.evalmetrics import evaluate_model
from biskdet.experiments import attacked_map, heatmap_hit_rate, toy_splits, toy_train_config
from biskdet.training import smoothed, train_model


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("--epochs", type=int, default=150)
    ap.add_argument("--skip-adversarial", action="store_true")
    args = ap.parse_args()
    out = Path(args.out)
    splits = toy_splits()
    te = splits.test
    summary = {}

    t0 = time.perf_counter()
    clean = train_model(toy_train_config(epochs=args.epochs), splits.train, splits.val,
                        model=Detector(splits.model_cfg), out_dir=out / "clean",
                        on_epoch=lambda r: print(r, flush=True))
    summary["clean_seconds"] = time.perf_counter() - t0
    summary["clean_map"] = evaluate_model(clean.model, te.images, te.boxes, te.classes)[0].map
    sm = smoothed([r["loss"] for r in clean.curves])[:20]
    summary["smoothed_nonincreasing_20"] = bool((sm[1:] <= sm[:-1]).all())
    summary["attacked_map"], uap = attacked_map(clean.model, splits)
    uap.save(out / "uap_clean.blob")
    summary["heatmap_hit_rate"], summary["heatmap_objects"] = heatmap_hit_rate(clean.model, te)
    print(summary, flush=True)

    if not args.skip_adversarial:
        t0 = time.perf_counter()
        adv = train_model(toy_train_config(epochs=args.epochs, adversarial=True), splits.train, splits.val,
                          model=Detector(splits.model_cfg), out_dir=out / "adversarial",
                          on_epoch=lambda r: print(r, flush=True))
        summary["adv_seconds"] = time.perf_counter() - t0
        summary["adv_clean_map"] = evaluate_model(adv.model, te.images, te.boxes, te.classes)[0].map
        summary["adv_attacked_map"], uap2 = attacked_map(adv.model, splits)
        uap2.save(out / "uap_adversarial.blob")
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps(summary, indent=1))


if __name__ == "__main__":
    main()
