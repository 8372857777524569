"""DSC, IoU and ASSD for thin landmark masks, plus split-level reporting."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .dataset import CLASSES
from .errors import AlignmentError, ShapeError


def _pair(pred, gt):
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ")
    return p, g


def dsc(pred, gt) -> float:
    p, g = _pair(pred, gt)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def iou(pred, gt) -> float:
    p, g = _pair(pred, gt)
    union = int((p | g).sum())
    if union == 0:
        return 1.0
    return int((p & g).sum()) / union


def assd(pred, gt) -> float:
    """Average symmetric distance between foreground pixel sets (every pixel counts as surface).

    Both empty gives 0; exactly one empty gives the image diagonal.
    """
    p, g = _pair(pred, gt)
    n_p, n_g = int(p.sum()), int(g.sum())
    if n_p == 0 and n_g == 0:
        return 0.0
    if n_p == 0 or n_g == 0:
        return math.hypot(*p.shape)
    # distance from every pixel to the nearest foreground pixel of the other set
    to_g = ndimage.distance_transform_edt(~g)
    to_p = ndimage.distance_transform_edt(~p)
    return (float(to_g[p].sum()) + float(to_p[g].sum())) / (n_p + n_g)


@dataclass
class ClassMetrics:
    dsc: float
    iou: float
    assd: float
    n_frames: int = 0
    n_skipped: int = 0


@dataclass
class MetricsReport:
    per_class: dict[str, ClassMetrics] = field(default_factory=dict)
    mean: dict[str, float] = field(default_factory=dict)
    n_frames: int = 0
    n_skipped: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self, title: str = "") -> str:
        rows = [(name, m.dsc, m.iou, m.assd) for name, m in self.per_class.items()]
        rows.append(("mean", self.mean["dsc"], self.mean["iou"], self.mean["assd"]))
        head = f"{'class':<12}{'DSC↑':>9}{'IoU↑':>9}{'Assd↓':>9}"
        lines = ([title] if title else []) + [head, "-" * len(head)]
        lines += [f"{n:<12}{d:>9.2f}{i:>9.2f}{a:>9.2f}" for n, d, i, a in rows]
        return "\n".join(lines)


def evaluate_split(preds, gts, threshold: float = 0.5) -> MetricsReport:
    """Per-class averages over frames where the class is annotated.

    ``preds`` holds (frame_id, probs[3,H,W]) pairs; ``gts`` holds FrameSamples.
    DSC/IoU are reported in percent, Assd in pixels.
    """
    preds = list(preds)
    gts = list(gts)
    if len(preds) != len(gts):
        raise AlignmentError(f"{len(preds)} predictions for {len(gts)} frames")
    sums = {c: np.zeros(3) for c in CLASSES}
    counts = {c: 0 for c in CLASSES}
    skipped = {c: 0 for c in CLASSES}
    for (frame_id, probs), gt in zip(preds, gts):
        if frame_id != gt.frame_id:
            raise AlignmentError(f"prediction {frame_id!r} aligned with frame {gt.frame_id!r}")
        binary = np.asarray(probs) >= threshold
        for c, name in enumerate(CLASSES):
            if not gt.present[c]:
                skipped[name] += 1
                continue
            g = gt.masks[c] > 0.5
            sums[name] += (dsc(binary[c], g), iou(binary[c], g), assd(binary[c], g))
            counts[name] += 1
    report = MetricsReport(n_frames=len(gts), n_skipped=skipped)
    for name in CLASSES:
        n = counts[name]
        if n == 0:
            continue
        d, i, a = sums[name] / n
        report.per_class[name] = ClassMetrics(100 * d, 100 * i, a, n, skipped[name])
    if report.per_class:
        vals = list(report.per_class.values())
        report.mean = {
            "dsc": float(np.mean([m.dsc for m in vals])),
            "iou": float(np.mean([m.iou for m in vals])),
            "assd": float(np.mean([m.assd for m in vals])),
        }
    else:
        report.mean = {"dsc": float("nan"), "iou": float("nan"), "assd": float("nan")}
    return report
