"""Crop datasets on disk: a directory of 120x120 images plus ``manifest.csv`` (path, label[, source])."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .. import imaging

LABELS = {"FC": 0, "TC": 1}


def write_crop_dataset(out_dir, crops, labels, meta=None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["path", "label", "source"])
        for j, (crop, lab) in enumerate(zip(crops, labels)):
            name = f"crop_{j:05d}.png"
            imaging.write_image(out / name, crop)
            wr.writerow([name, "TC" if lab else "FC", (meta[j].get("source", "") if meta else "")])
    return manifest


def read_crop_dataset(manifest) -> tuple[np.ndarray, np.ndarray]:
    """Load a manifest; returns (crops uint8 (n, H, W), labels int (n,), 1 = TC)."""
    manifest = Path(manifest)
    crops, labels = [], []
    with open(manifest, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"path", "label"} <= set(reader.fieldnames):
            raise ValueError(f"{manifest}: manifest needs 'path' and 'label' columns")
        for line, row in enumerate(reader, start=2):
            if row["label"] not in LABELS:
                raise ValueError(f"{manifest}:{line}: bad label {row['label']!r}")
            crops.append(imaging.read_image(manifest.parent / row["path"]))
            labels.append(LABELS[row["label"]])
    if not crops:
        raise ValueError(f"{manifest}: empty manifest")
    shapes = {c.shape for c in crops}
    if len(shapes) != 1:
        raise ValueError(f"{manifest}: crops have mixed sizes {sorted(shapes)}")
    return np.stack(crops), np.asarray(labels, dtype=np.int64)
