"""Annotation formats, dataset splitting, class statistics and the synthetic toy set."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import ABSOLUTE, Box, normalize_box

log = logging.getLogger(__name__)

DEFAULT_CLASSES = ("Crab", "Fish-big", "Fish-school", "fish-small", "shrimp", "jellyfish")
REFERENCE_CLASS_COUNTS = (1751, 2992, 927, 2268, 824, 1237)
IMAGE_SUFFIXES = (".ppm", ".png", ".jpg", ".jpeg", ".pgm")
SPLITS = ("train", "val", "test")


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


@dataclass
class AnnotationRecord:
    image: str
    width: int
    height: int
    objects: list[tuple[int, Box]] = field(default_factory=list)

    def boxes(self) -> np.ndarray:
        return np.array([b.center_size() for _, b in self.objects], dtype=float).reshape(-1, 4)

    def classes(self) -> np.ndarray:
        return np.array([c for c, _ in self.objects], dtype=int)


@dataclass
class DatasetManifest:
    records: list[AnnotationRecord]
    classes: tuple[str, ...] = DEFAULT_CLASSES
    splits: list[str] | None = None

    def subset(self, split: str) -> "DatasetManifest":
        if self.splits is None:
            raise DataError("manifest has no split tags")
        recs = [r for r, s in zip(self.records, self.splits) if s == split]
        return DatasetManifest(recs, self.classes, [split] * len(recs))

    def to_json(self) -> str:
        return json.dumps(
            {
                "version": 1,
                "classes": list(self.classes),
                "records": [
                    {
                        "image": r.image,
                        "width": r.width,
                        "height": r.height,
                        "split": None if self.splits is None else self.splits[i],
                        "objects": [[c, *b.center_size()] for c, b in r.objects],
                    }
                    for i, r in enumerate(self.records)
                ],
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        raw = json.loads(text)
        recs, splits = [], []
        for r in raw["records"]:
            objs = [(int(o[0]), Box.from_center(*o[1:])) for o in r["objects"]]
            recs.append(AnnotationRecord(r["image"], int(r["width"]), int(r["height"]), objs))
            splits.append(r.get("split"))
        return cls(recs, tuple(raw["classes"]), None if any(s is None for s in splits) else splits)


# --------------------------------------------------------------------------
# YOLO-TXT and COCO-JSON


def _clamped_unit_box(cx, cy, w, h, where: str) -> Box:
    raw = (cx, cy, w, h)
    vals = tuple(min(max(v, 0.0), 1.0) for v in raw)
    if vals != raw:
        log.info("%s: clamped box %s -> %s", where, raw, vals)
    try:
        return Box.from_center(*vals)
    except ValueError as exc:
        raise DataError(f"{where}: {exc}") from None


def parse_yolo_line(line: str, num_classes: int, where: str = "") -> tuple[int, Box]:
    parts = line.split()
    if len(parts) != 5:
        raise DataError(f"{where}: expected 'class cx cy w h', got {line!r}")
    try:
        cls = int(parts[0])
        cx, cy, w, h = (float(p) for p in parts[1:])
    except ValueError:
        raise DataError(f"{where}: malformed line {line!r}") from None
    if not 0 <= cls < num_classes:
        raise DataError(f"{where}: unknown class id {cls}")
    return cls, _clamped_unit_box(cx, cy, w, h, where)


def format_yolo_line(cls: int, box: Box) -> str:
    return f"{cls} " + " ".join(f"{v:.10f}" for v in box.center_size())


def _image_size(path: Path) -> tuple[int, int]:
    if path.suffix.lower() in (".ppm", ".pgm"):
        return read_pnm(path).shape[1::-1]
    from PIL import Image

    with Image.open(path) as im:
        return im.size


def parse_annotations(path, fmt: str = "yolo_txt", classes: Sequence[str] | None = None,
                      drop_unlabeled: bool = False) -> DatasetManifest:
    """Read a YOLO directory (``images/`` + ``labels/``) or a COCO-JSON file."""
    path = Path(path)
    if fmt == "yolo_txt":
        return _parse_yolo(path, classes, drop_unlabeled)
    if fmt == "coco_json":
        return _parse_coco(path, classes, drop_unlabeled)
    raise DataError(f"unknown annotation format {fmt!r}")


def _read_classes(root: Path, classes):
    if classes is not None:
        return tuple(classes)
    f = root / "classes.txt"
    if f.exists():
        return tuple(line.strip() for line in f.read_text().splitlines() if line.strip())
    return DEFAULT_CLASSES


def _parse_yolo(root: Path, classes, drop_unlabeled) -> DatasetManifest:
    classes = _read_classes(root, classes)
    img_dir, lbl_dir = root / "images", root / "labels"
    if not img_dir.is_dir() or not lbl_dir.is_dir():
        raise DataError(f"{root} needs images/ and labels/ subdirectories")
    images = {p.stem: p for p in sorted(img_dir.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}
    labels = {p.stem: p for p in sorted(lbl_dir.glob("*.txt"))}
    orphans = sorted(set(labels) - set(images))
    if orphans:
        raise DataError(f"annotations without images: {orphans[:5]}")
    unlabeled = sorted(set(images) - set(labels))
    if unlabeled and not drop_unlabeled:
        raise DataError(f"images without annotations: {unlabeled[:5]}")
    if unlabeled:
        log.info("dropping %d unlabeled images", len(unlabeled))
    records = []
    for stem in sorted(labels):
        w, h = _image_size(images[stem])
        objs = []
        for n, line in enumerate(labels[stem].read_text().splitlines(), 1):
            if line.strip():
                objs.append(parse_yolo_line(line, len(classes), f"{labels[stem].name}:{n}"))
        records.append(AnnotationRecord(str(images[stem].relative_to(root)), w, h, objs))
    return DatasetManifest(records, classes)


def _parse_coco(path: Path, classes, drop_unlabeled) -> DatasetManifest:
    classes = tuple(classes) if classes is not None else _read_classes(path.parent, None)
    try:
        raw = json.loads(path.read_text())
        images = {int(im["id"]): im for im in raw["images"]}
        anns = raw["annotations"]
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: not a COCO subset file ({exc})") from None
    per_image: dict[int, list] = {i: [] for i in images}
    for a in anns:
        iid = int(a["image_id"])
        if iid not in images:
            raise DataError(f"annotation references unknown image id {iid}")
        cls = int(a["category_id"])
        if not 0 <= cls < len(classes):
            raise DataError(f"unknown class id {cls}")
        im = images[iid]
        x, y, w, h = (float(v) for v in a["bbox"])
        try:
            box = normalize_box(Box.from_center(x + w / 2, y + h / 2, w, h, space=ABSOLUTE),
                                im["width"], im["height"])
        except ValueError as exc:
            raise DataError(f"image {iid}: {exc}") from None
        per_image[iid].append((cls, box))
    records = []
    for iid in sorted(images, key=lambda i: images[i]["file_name"]):
        if not per_image[iid] and drop_unlabeled:
            continue
        im = images[iid]
        records.append(AnnotationRecord(im["file_name"], int(im["width"]), int(im["height"]), per_image[iid]))
    return DatasetManifest(records, classes)


def write_yolo(manifest: DatasetManifest, root) -> None:
    """Write ``labels/<stem>.txt`` files and ``classes.txt`` (images are not copied)."""
    root = Path(root)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    (root / "classes.txt").write_text("\n".join(manifest.classes) + "\n")
    for r in manifest.records:
        text = "".join(format_yolo_line(c, b) + "\n" for c, b in r.objects)
        (root / "labels" / (Path(r.image).stem + ".txt")).write_text(text)


def to_coco(manifest: DatasetManifest) -> dict:
    images, anns = [], []
    for i, r in enumerate(manifest.records):
        images.append({"id": i, "file_name": r.image, "width": r.width, "height": r.height})
        for c, b in r.objects:
            cx, cy, w, h = b.center_size()
            bw, bh = w * r.width, h * r.height
            anns.append({
                "image_id": i,
                "category_id": c,
                "bbox": [cx * r.width - bw / 2, cy * r.height - bh / 2, bw, bh],
            })
    return {"images": images, "annotations": anns}


def write_coco(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(json.dumps(to_coco(manifest), indent=1))


# --------------------------------------------------------------------------
# splitting and statistics


def split_sizes(n: int, ratios=(70, 20, 10)) -> tuple[int, int, int]:
    val = math.floor(n * ratios[1] / 100 + 0.5)
    test = math.floor(n * ratios[2] / 100 + 0.5)
    return n - val - test, val, test


def normalize_and_split(manifest: DatasetManifest, ratios=(70, 20, 10), seed: int = 0) -> DatasetManifest:
    """Seeded shuffle then contiguous train/val/test split; rounding remainder goes to train."""
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 100) > 1e-9:
        raise DataError(f"split ratios must be three positive numbers summing to 100, got {ratios}")
    n = len(manifest.records)
    n_train, n_val, _ = split_sizes(n, ratios)
    order = np.random.default_rng(seed).permutation(n)
    tags = [""] * n
    for rank, idx in enumerate(order):
        tags[idx] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return replace(manifest, splits=tags)


@dataclass(frozen=True)
class ClassStats:
    counts: tuple[int, ...]
    mean: float
    variance: float
    std: float

    def summary(self, digits: int = 2) -> str:
        return f"mean {self.mean:.{digits}f}, variance {self.variance:.{digits}f}, std {self.std:.{digits}f}"


def class_statistics(counts: Sequence[float]) -> ClassStats:
    """Mean and population variance / standard deviation of per-class counts."""
    a = np.asarray(counts, dtype=float)
    if a.size == 0:
        raise DataError("no class counts")
    var = float(np.mean((a - a.mean()) ** 2))
    return ClassStats(tuple(counts), float(a.mean()), var, math.sqrt(var))


def class_counts(manifest: DatasetManifest) -> list[int]:
    counts = [0] * len(manifest.classes)
    for r in manifest.records:
        for c, _ in r.objects:
            counts[c] += 1
    return counts


# --------------------------------------------------------------------------
# PNM images


def write_pnm(path, image: np.ndarray) -> None:
    """Binary PPM (H, W, 3) or PGM (H, W) from uint8 data."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise ValueError("PNM writer expects uint8 data")
    magic = b"P6" if img.ndim == 3 else b"P5"
    h, w = img.shape[:2]
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + img.tobytes())


def read_pnm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: unsupported PNM ({magic!r}, maxval {maxval})")
    ch = 3 if magic == b"P6" else 1
    arr = np.frombuffer(data[pos : pos + w * h * ch], dtype=np.uint8)
    return arr.reshape((h, w, ch) if ch == 3 else (h, w)).copy()


def load_image(path) -> np.ndarray:
    """Float image in [0, 1], shape (H, W, 3)."""
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pgm"):
        arr = read_pnm(path)
    else:
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    return arr.astype(np.float64) / 255.0


def load_images(manifest: DatasetManifest, root) -> np.ndarray:
    return np.stack([load_image(Path(root) / r.image) for r in manifest.records])


# --------------------------------------------------------------------------
# synthetic "toy-brackish" generator

# (min side px, max side px, height/width) per class, plus an RGB tint
_CLASS_STYLE = {
    0: ((14, 20), 0.6, (0.85, 0.35, 0.25)),   # crab: wide block
    1: ((22, 28), 0.5, (0.90, 0.80, 0.30)),   # fish-big: wide ellipse
    2: ((16, 22), 1.0, (0.30, 0.85, 0.90)),   # fish-school: dot cluster
    3: ((10, 14), 0.5, (0.35, 0.90, 0.35)),   # fish-small: small ellipse
    4: ((14, 20), 2.2, (0.95, 0.55, 0.75)),   # shrimp: tall sliver
    5: ((14, 20), 1.0, (0.55, 0.45, 0.95)),   # jellyfish: ring
}


@dataclass
class SyntheticDataset:
    images: np.ndarray
    manifest: DatasetManifest

    def float_images(self) -> np.ndarray:
        return self.images.astype(np.float64) / 255.0

    def save(self, root) -> None:
        """``images/*.ppm``, ``labels/*.txt``, ``classes.txt`` and ``manifest.json`` under ``root``."""
        root = Path(root)
        (root / "images").mkdir(parents=True, exist_ok=True)
        for img, r in zip(self.images, self.manifest.records):
            write_pnm(root / r.image, img)
        write_yolo(self.manifest, root)
        (root / "manifest.json").write_text(self.manifest.to_json())


def allocate_counts(total: int, weights: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``total`` items by ``weights``."""
    w = np.asarray(weights, dtype=float)
    exact = total * w / w.sum()
    base = np.floor(exact).astype(int)
    rest = total - base.sum()
    order = np.argsort(-(exact - base), kind="stable")
    base[order[:rest]] += 1
    return base.tolist()


def _draw(canvas, mask_fn, x0, y0, w, h, tint, alpha):
    hh, ww = canvas.shape[:2]
    ys, xs = np.mgrid[0:hh, 0:ww] + 0.5
    u = (xs - x0) / w
    v = (ys - y0) / h
    m = mask_fn(u, v) & (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
    canvas[m] = (1 - alpha) * canvas[m] + alpha * np.asarray(tint)


def _shape_mask(cls: int, rng: np.random.Generator):
    if cls == 0:
        return lambda u, v: np.ones_like(u, dtype=bool)
    if cls in (1, 3):
        return lambda u, v: (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
    if cls == 2:
        pts = np.vstack([[0.12, 0.12], [0.88, 0.88], [0.12, 0.88], [0.88, 0.12],
                         rng.uniform(0.2, 0.8, size=(3, 2))])
        return lambda u, v: np.any(
            (u[..., None] - pts[:, 0]) ** 2 + (v[..., None] - pts[:, 1]) ** 2 <= 0.016, axis=-1
        )
    if cls == 4:
        return lambda u, v: np.abs(u - 0.3 - 0.4 * np.sin(3 * v)) <= 0.3
    if cls == 5:
        return lambda u, v: np.abs(np.hypot(u - 0.5, v - 0.5) - 0.36) <= 0.13
    raise ValueError(cls)


def generate_synthetic_dataset(
    n_images: int,
    image_size: tuple[int, int] = (64, 64),
    class_weights: Sequence[float] | None = None,
    objects_per_image: tuple[int, int] = (1, 3),
    noise: float = 0.04,
    alpha: float = 0.55,
    seed: int = 0,
    total_objects: int | None = None,
) -> SyntheticDataset:
    """Low-contrast noisy scenes with 1-3 non-overlapping shape/tint-coded objects.

    Per-class object totals follow ``class_weights`` exactly (largest-remainder
    apportionment). Output is a pure function of the arguments.
    """
    h, w = image_size
    if n_images <= 0 or h <= 0 or w <= 0:
        raise ValueError("image count and size must be positive")
    lo, hi = objects_per_image
    rng = np.random.default_rng(seed)
    if total_objects is None:
        per_image = rng.integers(lo, hi + 1, size=n_images)
    else:
        if not lo * n_images <= total_objects <= hi * n_images:
            raise ValueError("total_objects incompatible with objects_per_image")
        per_image = np.full(n_images, lo)
        extra = total_objects - per_image.sum()
        while extra > 0:
            room = np.nonzero(per_image < hi)[0]
            pick = rng.choice(room, size=min(extra, len(room)), replace=False)
            per_image[pick] += 1
            extra -= len(pick)
    weights = class_weights if class_weights is not None else [1.0] * len(DEFAULT_CLASSES)
    counts = allocate_counts(int(per_image.sum()), weights)
    labels = rng.permutation(np.repeat(np.arange(len(counts)), counts))
    scale = min(h, w) / 64.0

    images = np.empty((n_images, h, w, 3), dtype=np.uint8)
    records, cursor = [], 0
    for i in range(n_images):
        base = np.array([0.22, 0.32, 0.28]) + rng.uniform(-0.04, 0.04, 3)
        grad = np.linspace(-0.05, 0.05, h)[:, None, None] * rng.choice([-1, 1])
        canvas = np.broadcast_to(base, (h, w, 3)) + grad
        canvas = np.array(canvas)
        placed: list[tuple[float, float, float, float]] = []
        objs = []
        for cls in labels[cursor : cursor + per_image[i]]:
            (smin, smax), aspect, tint = _CLASS_STYLE[int(cls)]
            for attempt in range(200):
                side = rng.uniform(smin, smax) * scale * (0.9 ** (attempt // 50))
                bw, bh = (side, side * aspect) if aspect <= 1 else (side / aspect, side)
                x0 = rng.uniform(1, w - bw - 1)
                y0 = rng.uniform(1, h - bh - 1)
                if all(x0 > px1 + 2 or x0 + bw < px0 - 2 or y0 > py1 + 2 or y0 + bh < py0 - 2
                       for px0, py0, px1, py1 in placed):
                    break
            else:
                raise RuntimeError("could not place object; image too small")
            placed.append((x0, y0, x0 + bw, y0 + bh))
            _draw(canvas, _shape_mask(int(cls), rng), x0, y0, bw, bh, tint, alpha)
            objs.append((int(cls), Box.from_center((x0 + bw / 2) / w, (y0 + bh / 2) / h, bw / w, bh / h)))
        cursor += per_image[i]
        canvas += rng.normal(0.0, noise, canvas.shape)
        images[i] = np.clip(np.round(canvas * 255), 0, 255).astype(np.uint8)
        records.append(AnnotationRecord(f"images/{i:05d}.ppm", w, h, objs))
    return SyntheticDataset(images, DatasetManifest(records, DEFAULT_CLASSES))


def augment(image: np.ndarray, record: AnnotationRecord, rng: np.random.Generator,
            ops: Sequence[str] = ("hflip", "vflip", "rot90")) -> tuple[np.ndarray, AnnotationRecord]:
    """Seeded box-exact flips / quarter turns of one synthetic sample."""
    img = image
    boxes = record.boxes()
    w, h = record.width, record.height
    for op in ops:
        if rng.random() >= 0.5:
            continue
        if op == "hflip":
            img = img[:, ::-1]
            boxes[:, 0] = 1 - boxes[:, 0]
        elif op == "vflip":
            img = img[::-1]
            boxes[:, 1] = 1 - boxes[:, 1]
        elif op == "rot90":
            # counter-clockwise: (x, y) -> (y, 1 - x)
            img = np.rot90(img)
            boxes = boxes[:, [1, 0, 3, 2]] * [1, 1, 1, 1]
            boxes[:, 1] = 1 - boxes[:, 1]
            w, h = h, w
        else:
            raise ValueError(f"unknown augmentation {op!r}")
    objs = [(c, Box.from_center(*b)) for c, b in zip(record.classes(), boxes)]
    return np.ascontiguousarray(img), AnnotationRecord(record.image, w, h, objs)
