"""Per-class Dice and symmetric Average Surface Distance on 2-D label maps."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage


class MetricShapeError(ValueError):
    pass


def _masks(pred, gt, c):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise MetricShapeError(f"{pred.shape} vs {gt.shape}")
    return pred == c, gt == c


def dice(pred, gt, c: int) -> float:
    """2|P & G| / (|P| + |G|); 1 when both masks are empty."""
    p, g = _masks(pred, gt, c)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def boundary(mask) -> np.ndarray:
    """Mask pixels with at least one 4-neighbour outside the mask.

    Pixels on the image border count as touching the outside.
    """
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return m & ~interior


def asd(pred, gt, c: int) -> float:
    """Symmetric average surface distance in pixels, NaN when either mask is empty."""
    p, g = _masks(pred, gt, c)
    if not p.any() or not g.any():
        return math.nan
    bp, bg = boundary(p), boundary(g)
    # Euclidean distance from every pixel to the nearest boundary pixel of the other mask
    d_to_g = ndimage.distance_transform_edt(~bg)
    d_to_p = ndimage.distance_transform_edt(~bp)
    return 0.5 * (float(d_to_g[bp].mean()) + float(d_to_p[bg].mean()))


@dataclass
class ClassReport:
    """Per-image per-class scores plus per-class and macro averages.

    ASD entries are NaN where undefined and are skipped when averaging.
    """

    classes: list[int]
    dice: np.ndarray
    asd: np.ndarray
    image_ids: list = field(default_factory=list)

    def class_dice(self) -> dict[int, float]:
        return {c: float(np.mean(self.dice[:, i])) for i, c in enumerate(self.classes)}

    def class_asd(self) -> dict[int, float]:
        out = {}
        for i, c in enumerate(self.classes):
            col = self.asd[:, i]
            col = col[~np.isnan(col)]
            out[c] = float(col.mean()) if col.size else math.nan
        return out

    @property
    def macro_dice(self) -> float:
        return float(np.mean(list(self.class_dice().values())))

    @property
    def macro_asd(self) -> float:
        vals = [v for v in self.class_asd().values() if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan

    def rows(self) -> list[dict]:
        rows = []
        for k, img in enumerate(self.image_ids):
            for i, c in enumerate(self.classes):
                rows.append({"image": img, "class": c, "dice": self.dice[k, i],
                             "asd": self.asd[k, i]})
        cd, ca = self.class_dice(), self.class_asd()
        for c in self.classes:
            rows.append({"image": "mean", "class": c, "dice": cd[c], "asd": ca[c]})
        rows.append({"image": "mean", "class": "macro", "dice": self.macro_dice,
                     "asd": self.macro_asd})
        return rows

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["image", "class", "dice", "asd"])
            w.writeheader()
            for r in self.rows():
                r = dict(r)
                for k in ("dice", "asd"):
                    r[k] = "" if math.isnan(r[k]) else repr(float(r[k]))
                w.writerow(r)


def evaluate_labels(preds: Sequence, gts: Sequence, num_classes: int,
                    image_ids=None) -> ClassReport:
    """Score foreground classes 1..C-1 image by image."""
    if len(preds) != len(gts):
        raise MetricShapeError("prediction and ground-truth counts differ")
    classes = list(range(1, num_classes))
    D = np.zeros((len(preds), len(classes)))
    A = np.zeros((len(preds), len(classes)))
    for k, (p, g) in enumerate(zip(preds, gts)):
        for i, c in enumerate(classes):
            D[k, i] = dice(p, g, c)
            A[k, i] = asd(p, g, c)
    ids = list(image_ids) if image_ids is not None else list(range(len(preds)))
    return ClassReport(classes, D, A, ids)
