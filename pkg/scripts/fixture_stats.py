"""Print the class-count statistics and five-fold summaries used as exact-string fixtures."""

from biskdet.dataio import class_statistics
from biskdet.evalmetrics import format_mean_std

COUNTS = [17, 29, 9, 22, 8, 12]
FOLDS = {
    "proposed": [99.5, 98.7, 98.0, 97.0, 99.8],
    "yolov3": [31.9, 30.2, 29.5, 32.5, 31.7],
}

if __name__ == "__main__":
    s = class_statistics(COUNTS)
    print(f"mean {s.mean:.2f}, variance {s.variance:.2f}, std {s.std:.2f}  (variance exact: {s.variance!r})")
    for name, scores in FOLDS.items():
        print(f"{name:>8}: {format_mean_std(scores, 1)}")
