import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from biskdet.dataio import (
    DEFAULT_CLASSES, REFERENCE_CLASS_COUNTS, AnnotationRecord, DataError, DatasetManifest, allocate_counts, augment,
    class_counts, class_statistics, generate_synthetic_dataset, load_image, load_images, normalize_and_split,
    parse_annotations, parse_yolo_line, read_pnm, split_sizes, to_coco, write_coco, write_pnm, write_yolo,
)
from biskdet.geometry import Box


def random_manifest(seed, n=5):
    g = np.random.default_rng(seed)
    recs = []
    for i in range(n):
        w, h = int(g.integers(20, 200)), int(g.integers(20, 200))
        objs = []
        for _ in range(int(g.integers(0, 4))):
            bw, bh = g.uniform(0.05, 0.5, 2)
            cx, cy = g.uniform(bw / 2, 1 - bw / 2), g.uniform(bh / 2, 1 - bh / 2)
            objs.append((int(g.integers(0, 6)), Box.from_center(cx, cy, bw, bh)))
        recs.append(AnnotationRecord(f"images/{i:03d}.ppm", w, h, objs))
    return DatasetManifest(recs)


def materialize(manifest, root):
    """Write tiny images plus YOLO labels so the directory parser can run."""
    (root / "images").mkdir(parents=True, exist_ok=True)
    for r in manifest.records:
        write_pnm(root / r.image, np.zeros((r.height, r.width, 3), dtype=np.uint8))
    write_yolo(manifest, root)


def assert_same_objects(a, b, tol=1e-6):
    assert len(a.records) == len(b.records)
    for ra, rb in zip(a.records, b.records):
        assert ra.classes().tolist() == rb.classes().tolist()
        np.testing.assert_allclose(ra.boxes(), rb.boxes(), atol=tol)


def test_yolo_line_example():
    cls, box = parse_yolo_line("0 0.5 0.5 0.1 0.1", 6)
    assert cls == 0 and box.center_size() == (0.5, 0.5, 0.1, 0.1)


@pytest.mark.parametrize("line", ["0 0.5 0.5 0.1", "x 0.5 0.5 0.1 0.1", "6 0.5 0.5 0.1 0.1", "0 0.5 0.5 0 0.1"])
def test_yolo_line_errors(line):
    with pytest.raises(DataError):
        parse_yolo_line(line, 6)


def test_out_of_range_values_are_clamped(caplog):
    caplog.set_level("INFO")
    _, box = parse_yolo_line("1 1.02 0.5 0.2 0.2", 6, "f:1")
    assert box.center_size()[0] == 1.0
    assert "clamped" in caplog.text


@pytest.mark.parametrize("seed", range(5))
def test_yolo_coco_yolo_round_trip(seed, tmp_path):
    m = random_manifest(seed)
    materialize(m, tmp_path)
    from_yolo = parse_annotations(tmp_path)
    write_coco(from_yolo, tmp_path / "ann.json")
    from_coco = parse_annotations(tmp_path / "ann.json", "coco_json")
    write_yolo(from_coco, tmp_path / "again")
    (tmp_path / "again" / "images").symlink_to(tmp_path / "images")
    back = parse_annotations(tmp_path / "again")
    assert_same_objects(m, from_yolo)
    assert_same_objects(m, from_coco)
    assert_same_objects(m, back)


def test_coco_conversion_to_unit_center(tmp_path):
    raw = {"images": [{"id": 7, "file_name": "a.ppm", "width": 200, "height": 100}],
           "annotations": [{"image_id": 7, "category_id": 2, "bbox": [20, 10, 40, 30], "area": 1200}]}
    (tmp_path / "c.json").write_text(json.dumps(raw))
    m = parse_annotations(tmp_path / "c.json", "coco_json")
    (cls, box), = m.records[0].objects
    assert cls == 2
    np.testing.assert_allclose(box.center_size(), (0.2, 0.25, 0.2, 0.3), atol=1e-12)


def test_coco_emits_only_subset_fields():
    coco = to_coco(random_manifest(1))
    assert set(coco) == {"images", "annotations"}
    assert all(set(a) == {"image_id", "category_id", "bbox"} for a in coco["annotations"])


def test_orphan_annotation_rejected(tmp_path):
    materialize(random_manifest(0, n=2), tmp_path)
    (tmp_path / "labels" / "zzz.txt").write_text("0 0.5 0.5 0.1 0.1\n")
    with pytest.raises(DataError):
        parse_annotations(tmp_path)


def test_unlabeled_images_rejected_or_dropped(tmp_path):
    materialize(random_manifest(0, n=2), tmp_path)
    write_pnm(tmp_path / "images" / "extra.ppm", np.zeros((4, 4, 3), dtype=np.uint8))
    with pytest.raises(DataError):
        parse_annotations(tmp_path)
    assert len(parse_annotations(tmp_path, drop_unlabeled=True).records) == 2


def test_coco_errors(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{}")
    with pytest.raises(DataError):
        parse_annotations(p, "coco_json")
    p.write_text(json.dumps({"images": [], "annotations": [{"image_id": 1, "category_id": 0, "bbox": [0, 0, 1, 1]}]}))
    with pytest.raises(DataError):
        parse_annotations(p, "coco_json")
    with pytest.raises(DataError):
        parse_annotations(p, "voc_xml")


def test_split_sizes_table_example():
    assert split_sizes(10000) == (7000, 2000, 1000)
    assert split_sizes(7) == (5, 1, 1)


@given(st.integers(1, 300), st.integers(0, 100))
def test_split_is_partition(n, seed):
    m = DatasetManifest([AnnotationRecord(f"{i}.ppm", 1, 1) for i in range(n)])
    tagged = normalize_and_split(m, seed=seed)
    sizes = [tagged.splits.count(s) for s in ("train", "val", "test")]
    assert sizes == list(split_sizes(n)) and sum(sizes) == n
    assert tagged.splits == normalize_and_split(m, seed=seed).splits
    parts = [tagged.subset(s).records for s in ("train", "val", "test")]
    assert sorted(r.image for p in parts for r in p) == sorted(r.image for r in m.records)


def test_split_ratio_errors():
    m = DatasetManifest([AnnotationRecord("a", 1, 1)])
    with pytest.raises(DataError):
        normalize_and_split(m, (50, 50, 50))
    with pytest.raises(DataError):
        m.subset("train")


def test_class_statistics_examples():
    s = class_statistics([17, 29, 9, 22, 8, 12])
    assert f"{s.mean:.2f}" == "16.17"
    assert f"{s.std:.2f}" == "7.47"
    assert abs(s.std - math.sqrt(s.variance)) <= 1e-12
    # population variance of these counts is 55.8055..., printed as 55.81
    assert s.variance == pytest.approx(2009 / 36, abs=1e-12)
    assert class_statistics([5]).std == 0.0
    with pytest.raises(DataError):
        class_statistics([])


@given(st.lists(st.integers(0, 5000), min_size=1, max_size=12))
def test_statistics_match_statistics_module(counts):
    import statistics

    s = class_statistics(counts)
    assert s.mean == pytest.approx(statistics.fmean(counts))
    assert s.variance == pytest.approx(statistics.pvariance(counts), abs=1e-9)


def test_synthetic_is_byte_identical():
    a = generate_synthetic_dataset(4, seed=9)
    b = generate_synthetic_dataset(4, seed=9)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.manifest.to_json() == b.manifest.to_json()
    assert generate_synthetic_dataset(4, seed=10).images.tobytes() != a.images.tobytes()


def test_synthetic_boxes_in_unit_range_and_object_count():
    ds = generate_synthetic_dataset(30, seed=2)
    for r in ds.manifest.records:
        assert 1 <= len(r.objects) <= 3
        for _, b in r.objects:
            x1, y1, x2, y2 = b.corners()
            assert 0 <= x1 < x2 <= 1 and 0 <= y1 < y2 <= 1


def test_synthetic_class_proportions():
    ds = generate_synthetic_dataset(100, class_weights=REFERENCE_CLASS_COUNTS, seed=0, total_objects=200)
    targets = np.array(REFERENCE_CLASS_COUNTS) * 200 / sum(REFERENCE_CLASS_COUNTS)
    counts = class_counts(ds.manifest)
    assert sum(counts) == 200
    assert np.all(np.abs(np.array(counts) - targets) <= 2)


def test_synthetic_objects_are_visible():
    ds = generate_synthetic_dataset(5, seed=4, noise=0.0)
    img = ds.float_images()
    for i, r in enumerate(ds.manifest.records):
        for _, b in r.objects:
            x1, y1, x2, y2 = (np.array(b.corners()) * 64).round().astype(int)
            patch = img[i, y1:y2, x1:x2]
            assert patch.std() > 0.02 or np.abs(patch.mean(axis=(0, 1)) - img[i, 0, 0]).max() > 0.05


def test_synthetic_errors():
    with pytest.raises(ValueError):
        generate_synthetic_dataset(2, image_size=(0, 64))
    with pytest.raises(ValueError):
        generate_synthetic_dataset(2, total_objects=100)


@given(st.integers(1, 500), st.lists(st.floats(0.1, 10.0), min_size=1, max_size=8))
def test_allocation_exact_total(total, weights):
    counts = allocate_counts(total, weights)
    exact = total * np.array(weights) / sum(weights)
    assert sum(counts) == total
    assert np.all(np.abs(np.array(counts) - exact) < 1)


def test_pnm_and_image_loading(tmp_path):
    rgb = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    write_pnm(tmp_path / "a.ppm", rgb)
    np.testing.assert_array_equal(read_pnm(tmp_path / "a.ppm"), rgb)
    (tmp_path / "c.ppm").write_bytes(b"P6\n# comment\n7 5\n255\n" + rgb.tobytes())
    np.testing.assert_array_equal(read_pnm(tmp_path / "c.ppm"), rgb)
    from PIL import Image

    Image.fromarray(rgb).save(tmp_path / "b.png")
    np.testing.assert_allclose(load_image(tmp_path / "b.png"), rgb / 255.0)
    write_pnm(tmp_path / "g.pgm", rgb[..., 0])
    assert load_image(tmp_path / "g.pgm").shape == (5, 7, 3)
    with pytest.raises(ValueError):
        write_pnm(tmp_path / "f.ppm", rgb.astype(float))


def test_save_and_reload_synthetic(tmp_path):
    ds = generate_synthetic_dataset(3, seed=1)
    ds.save(tmp_path)
    m = DatasetManifest.from_json((tmp_path / "manifest.json").read_text())
    assert m.classes == DEFAULT_CLASSES
    np.testing.assert_array_equal(load_images(m, tmp_path), ds.float_images())
    assert_same_objects(parse_annotations(tmp_path), ds.manifest)


@given(st.integers(0, 1000))
def test_augment_keeps_boxes_on_objects(seed):
    """Mark each box with a unique colour, augment, and check the box still frames it."""
    g = np.random.default_rng(seed)
    w, h = 24, 16
    img = np.zeros((h, w, 3))
    objs = []
    for k in range(2):
        x0, y0 = int(g.integers(0, w - 6)), int(g.integers(0, h - 5))
        bw, bh = int(g.integers(2, 6)), int(g.integers(2, 5))
        img[y0 : y0 + bh, x0 : x0 + bw, k] = 1.0
        objs.append((k, Box.from_center((x0 + bw / 2) / w, (y0 + bh / 2) / h, bw / w, bh / h)))
    out, rec = augment(img, AnnotationRecord("x", w, h, objs), np.random.default_rng(seed))
    oh, ow = out.shape[:2]
    assert (rec.width, rec.height) == (ow, oh)
    for k, b in rec.objects:
        ys, xs = np.nonzero(out[..., k])
        x1, y1, x2, y2 = b.corners()
        assert x1 * ow == pytest.approx(xs.min()) and x2 * ow == pytest.approx(xs.max() + 1)
        assert y1 * oh == pytest.approx(ys.min()) and y2 * oh == pytest.approx(ys.max() + 1)
