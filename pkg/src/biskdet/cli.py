"""``biskdet`` command line: data prep, anchors, training, evaluation, attack, heatmaps."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import dataio
from .dataio import DataError, DatasetManifest

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("biskdet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# config handling


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    from .training import TrainConfig

    known = {f.name for f in fields(TrainConfig)}
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise UsageError(f"{path}:{n}: unknown config key {key!r}")
        out[key] = value
    return out


def build_train_config(args) -> "TrainConfig":
    from .training import TrainConfig

    types = TrainConfig.field_types()
    values: dict = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for name in types:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    typed = {}
    for key, val in values.items():
        kind = types[key]
        try:
            typed[key] = _parse_bool(val) if kind is bool and isinstance(val, str) else kind(val)
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {val!r}") from exc
    try:
        return TrainConfig(**typed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    from .training import TrainConfig

    for f in fields(TrainConfig):
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, default=None, metavar=f.name.upper())


# --------------------------------------------------------------------------
# data helpers


def load_manifest(path) -> tuple[DatasetManifest, Path]:
    path = Path(path)
    try:
        return DatasetManifest.from_json(path.read_text()), path.parent
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: invalid manifest ({exc})") from None


def split_arrays(manifest: DatasetManifest, root: Path, split: str | None):
    sub = manifest.subset(split) if split else manifest
    if not sub.records:
        raise DataError(f"split {split!r} is empty")
    images = dataio.load_images(sub, root)
    boxes = [r.boxes() for r in sub.records]
    classes = [r.classes() for r in sub.records]
    return sub, images, boxes, classes


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    print(f"wrote {path}")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    out = Path(args.out)
    counts = [int(v) for v in _floats(args.counts)] if args.counts else [args.images]
    weights = _floats(args.class_weights) if args.class_weights else None
    records, images, tags = [], [], []
    for i, (n, tag) in enumerate(zip(counts, ("train", "val", "test") if args.counts else (None,))):
        ds = dataio.generate_synthetic_dataset(
            n, image_size=(args.size, args.size), class_weights=weights, noise=args.noise,
            seed=args.seed + i, total_objects=args.total_objects if not args.counts else None,
        )
        for img, r in zip(ds.images, ds.manifest.records):
            name = f"images/{len(records):05d}.ppm"
            records.append(dataio.AnnotationRecord(name, r.width, r.height, r.objects))
            images.append(img)
            tags.append(tag)
    manifest = DatasetManifest(records, dataio.DEFAULT_CLASSES, tags if args.counts else None)
    dataio.SyntheticDataset(np.stack(images), manifest).save(out)
    print(f"wrote {len(records)} images to {out}")
    return EXIT_OK


def cmd_prepare(args) -> int:
    manifest = dataio.parse_annotations(args.input, args.format, drop_unlabeled=args.drop_unlabeled)
    ratios = tuple(_floats(args.ratios))
    if len(ratios) != 3:
        raise UsageError("--ratios needs three values")
    tagged = dataio.normalize_and_split(manifest, ratios, seed=args.seed)
    src = Path(args.input)
    root = src if src.is_dir() else src.parent
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    for r in tagged.records:  # image paths relative to the manifest file
        r.image = os.path.relpath(root.resolve() / r.image, out.parent.resolve())
    _write(out, tagged.to_json())
    sizes = {s: tagged.splits.count(s) for s in dataio.SPLITS}
    print(" ".join(f"{k}={v}" for k, v in sizes.items()))
    return EXIT_OK


def cmd_stats(args) -> int:
    if args.counts:
        counts = _floats(args.counts)
        names = [f"class{i}" for i in range(len(counts))]
    elif args.manifest:
        manifest, _ = load_manifest(args.manifest)
        counts = dataio.class_counts(manifest)
        names = list(manifest.classes)
    else:
        raise UsageError("stats needs --manifest or --counts")
    stats = dataio.class_statistics(counts)
    for n, c in zip(names, counts):
        print(f"{n:12s} {c:g}")
    print(stats.summary(2))
    return EXIT_OK


def cmd_anchors(args) -> int:
    from .anchorsearch import compute_anchor_hyperparameters

    manifest, _ = load_manifest(args.manifest)
    sub = manifest.subset(args.split) if args.split and manifest.splits else manifest
    wh = [(b.center_size()[2] * r.width, b.center_size()[3] * r.height) for r in sub.records for _, b in r.objects]
    if len(wh) < args.k:
        raise DataError(f"need at least k={args.k} boxes, found {len(wh)}")
    cfg = compute_anchor_hyperparameters(np.array(wh), args.k, merge_threshold=args.merge_threshold, seed=args.seed)
    text = cfg.to_json()
    if args.out:
        _write(Path(args.out), text)
    print(text)
    return EXIT_OK


def cmd_train(args) -> int:
    from .anchorsearch import AnchorConfig
    from .experiments import model_config_for
    from .training import TrainData, train_model
    from .detector import Detector

    cfg = build_train_config(args)
    manifest, root = load_manifest(args.manifest)
    if manifest.splits is None:
        raise DataError("manifest has no split tags; run `prepare` first")
    _, tr_imgs, tr_boxes, tr_cls = split_arrays(manifest, root, "train")
    mcfg = model_config_for(tr_imgs, tr_boxes, seed=cfg.seed, k=args.k)
    if args.anchors:
        from dataclasses import replace

        mcfg = replace(mcfg, anchors=AnchorConfig.from_json(Path(args.anchors).read_text()))
    model = Detector(mcfg)
    train = TrainData.build(model, tr_imgs, tr_boxes, tr_cls)
    val = None
    if "val" in manifest.splits:
        _, v_imgs, v_boxes, v_cls = split_arrays(manifest, root, "val")
        val = TrainData.build(model, v_imgs, v_boxes, v_cls)
    res = train_model(cfg, train, val, model=model, out_dir=args.out, resume=args.resume)
    last = res.curves[-1]
    print(f"epochs={last['epoch']} loss={last['loss']:.5f} val_map={last.get('val_map', float('nan')):.4f}")
    print(f"checkpoint: {Path(args.out) / 'final.ckpt'}")
    return EXIT_OK


def _load_model(path):
    from .detector import load_checkpoint

    try:
        model, _, meta = load_checkpoint(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    return model, meta


def cmd_eval(args) -> int:
    from . import evalmetrics as em

    out = Path(args.out)
    if args.kfold_scores:
        summary = em.format_mean_std(_floats(args.kfold_scores), 1)
        print(summary)
        _write(out / "kfold.txt", summary + "\n")
        if not args.checkpoint:
            return EXIT_OK
    if not (args.checkpoint and args.manifest):
        raise UsageError("eval needs --checkpoint and --manifest (or only --kfold-scores)")
    model, _ = _load_model(args.checkpoint)
    manifest, root = load_manifest(args.manifest)
    sub, images, boxes, classes = split_arrays(manifest, root, args.split if manifest.splits else None)
    if images.shape[1:3] != tuple(model.cfg.image_size):
        raise DataError(f"images are {images.shape[1:3]} but the checkpoint expects {model.cfg.image_size}")
    if args.uap:
        from .adversarial import Perturbation

        images = Perturbation.load(args.uap).apply(images)
    ap, cm, _ = em.evaluate_model(model, images, boxes, classes, conf_threshold=args.conf,
                                  iou_threshold=args.iou)
    headers = ["class", "gt", "AP"]
    rows = em.class_ap_rows(ap, manifest.classes)
    _write(out / "class_ap.txt", em.aligned_table(headers, rows))
    _write(out / "class_ap.csv", em.csv_table(headers, rows))
    ch, crows = em.confusion_rows(cm, manifest.classes)
    _write(out / "confusion.txt", em.aligned_table(ch, crows))
    _write(out / "confusion.csv", em.csv_table(ch, crows))
    print(em.aligned_table(headers, rows), end="")
    print(f"mAP@{args.iou:g} = {100 * ap.map:.1f}")
    return EXIT_OK


def cmd_attack(args) -> int:
    from .adversarial import UAPConfig, compute_uap, detection_loss_fn
    from .training import TrainData

    model, meta = _load_model(args.checkpoint)
    manifest, root = load_manifest(args.manifest)
    _, images, boxes, classes = split_arrays(manifest, root, args.split if manifest.splits else None)
    data = TrainData.build(model, images, boxes, classes)
    kind = meta.get("train_config", {}).get("loss", "focal")
    uap = compute_uap(model, data.images, detection_loss_fn(model, data.labels, data.targets, kind),
                      UAPConfig(args.max_norm, args.samples, seed=args.seed))
    uap.save(args.out)
    print(f"wrote {args.out}: max_norm={args.max_norm} nonzero={np.count_nonzero(uap.data)}/{uap.data.size}")
    return EXIT_OK


def cmd_explain(args) -> int:
    from .explain import gradcam_heatmap, heatmap_filename, write_heatmap_pgm, write_overlay

    model, _ = _load_model(args.checkpoint)
    manifest, root = load_manifest(args.manifest)
    sub, images, _, _ = split_arrays(manifest, root, args.split if manifest.splits else None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = len(images) if args.limit is None else min(args.limit, len(images))
    dets = model.detect(images[:n], conf_threshold=args.conf)
    written = 0
    for img, rec, ds in zip(images[:n], sub.records[:n], dets):
        wanted = [args.class_id] if args.class_id is not None else sorted({d.class_id for d in ds})
        for c in wanted:
            hm = gradcam_heatmap(model, img, c, mode=args.mode)
            name = heatmap_filename(rec.image, manifest.classes[c])
            write_heatmap_pgm(out / name, hm)
            write_overlay(out / (Path(name).stem + "_overlay.png"), img, hm)
            written += 1
    print(f"wrote {written} heatmaps to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="biskdet", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate the synthetic toy dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--images", type=int, default=100)
    s.add_argument("--counts", help="train,val,test image counts (tags splits directly)")
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--noise", type=float, default=0.04)
    s.add_argument("--class-weights")
    s.add_argument("--total-objects", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prepare", help="parse annotations, validate, split 70:20:10")
    s.add_argument("--input", required=True)
    s.add_argument("--format", choices=("yolo_txt", "coco_json"), default="yolo_txt")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--ratios", default="70,20,10")
    s.add_argument("--drop-unlabeled", action="store_true")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("stats", help="class-count mean / variance / std")
    s.add_argument("--manifest")
    s.add_argument("--counts")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("anchors", help="Jaccard k-means anchor search")
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="train")
    s.add_argument("--k", type=int, default=4)
    s.add_argument("--merge-threshold", type=float, default=1.25)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_anchors)

    s = sub.add_parser("train", help="train a detector")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--anchors", help="anchor JSON from `anchors` (default: search on the train split)")
    s.add_argument("--k", type=int, default=4)
    s.add_argument("--resume")
    _add_train_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint and write reports")
    s.add_argument("--checkpoint")
    s.add_argument("--manifest")
    s.add_argument("--split", default="test")
    s.add_argument("--out", default="report")
    s.add_argument("--conf", type=float, default=0.05)
    s.add_argument("--iou", type=float, default=0.5)
    s.add_argument("--uap", help="evaluate on inputs carrying this perturbation")
    s.add_argument("--kfold-scores", help="comma-separated fold scores to summarise")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("attack", help="compute a universal adversarial perturbation")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="train")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--max-norm", type=float, default=0.1)
    s.add_argument("--samples", type=int, default=64)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_attack)

    s = sub.add_parser("explain", help="write class heatmaps")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=("gradcam", "gradcam++"), default="gradcam")
    s.add_argument("--class-id", type=int)
    s.add_argument("--conf", type=float, default=0.25)
    s.add_argument("--limit", type=int)
    s.set_defaults(func=cmd_explain)
    return p


def main(argv=None) -> int:
    from .training import NumericError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "train" and args.seed is None:
        parser.exit(EXIT_USAGE, "biskdet train: error: --seed is required\n")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
