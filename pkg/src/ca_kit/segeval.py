"""Zero-shot segmentation metrics over saliency maps.

Two protocols:

* single object: the target concept's score plane is thresholded at its mean
  (strictly greater is foreground) and scored with pixel accuracy, two-class
  mIoU and rank-based average precision of the raw plane;
* multi-class: each pixel takes the label of its highest-scoring concept
  (ties to the lowest concept index), scored with accuracy and mIoU.

Label 255 marks pixels ignored by every metric.
"""

from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import asdict, dataclass

import numpy as np

from .conceptattn import SaliencyMap

IGNORE_LABEL = 255
MIOU_MODES = ("two_class", "foreground")


class NoPositivesError(ValueError):
    """Average precision is undefined without positive pixels."""


def _as_mask(a, name="mask") -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def _check_same_shape(pred, gt):
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: prediction {pred.shape}, ground truth {gt.shape}")


def validate_ground_truth(gt, n_classes: int | None = None) -> np.ndarray:
    gt = _as_mask(gt, "ground truth")
    if not np.issubdtype(gt.dtype, np.integer):
        raise ValueError("ground-truth labels must be integers")
    labels = set(np.unique(gt).tolist()) - {IGNORE_LABEL}
    if any(l < 0 for l in labels):
        raise ValueError("negative label in ground truth")
    if n_classes is not None and any(l > n_classes for l in labels):
        raise ValueError(f"labels {sorted(labels)} exceed 0..{n_classes}")
    return gt


def binarize_mean_threshold(scores) -> np.ndarray:
    """Foreground where the score is strictly above the map mean."""
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    return scores > scores.mean()


def _score_cube(scores) -> np.ndarray:
    cube = scores.scores if isinstance(scores, SaliencyMap) else np.asarray(scores, dtype=np.float64)
    if cube.ndim != 3:
        raise ValueError(f"expected (h, w, r) scores, got shape {cube.shape}")
    return cube


def multiclass_argmax(scores) -> np.ndarray:
    """Index of the best concept per pixel; ties go to the lowest index."""
    cube = _score_cube(scores)
    if cube.shape[2] < 2:
        raise ValueError("multi-class prediction needs at least two concepts")
    return np.argmax(cube, axis=2)


def pixel_accuracy(pred, gt, ignore: int = IGNORE_LABEL) -> float:
    pred, gt = _as_mask(pred, "prediction"), _as_mask(gt, "ground truth")
    _check_same_shape(pred, gt)
    valid = gt != ignore
    n = int(valid.sum())
    if n == 0:
        raise ValueError("every pixel is ignored")
    return int((pred[valid] == gt[valid]).sum()) / n


def miou(pred, gt, class_set, ignore: int = IGNORE_LABEL) -> float:
    """Mean IoU over the classes of ``class_set`` present in ``pred`` or ``gt``.

    The mean is taken over exact per-class ratios and rounded once.
    """
    pred, gt = _as_mask(pred, "prediction"), _as_mask(gt, "ground truth")
    _check_same_shape(pred, gt)
    classes = list(class_set)
    if not classes:
        raise ValueError("class_set is empty")
    valid = gt != ignore
    p, g = pred[valid], gt[valid]
    ious = []
    for c in classes:
        union = int(((p == c) | (g == c)).sum())
        if union:
            ious.append(Fraction(int(((p == c) & (g == c)).sum()), union))
    if not ious:
        raise ValueError(f"none of the classes {classes} occur in prediction or ground truth")
    return float(sum(ious) / len(ious))


def per_class_iou(pred, gt, class_set, ignore: int = IGNORE_LABEL) -> dict:
    pred, gt = _as_mask(pred, "prediction"), _as_mask(gt, "ground truth")
    _check_same_shape(pred, gt)
    valid = gt != ignore
    p, g = pred[valid], gt[valid]
    out = {}
    for c in class_set:
        union = int(((p == c) | (g == c)).sum())
        if union:
            out[int(c)] = int(((p == c) & (g == c)).sum()) / union
    return out


def average_precision(scores, gt) -> float:
    """Rank-based AP: mean of precision@k over the ranks k of positive pixels.

    Pixels are ranked by descending score; equal scores keep pixel order.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    gt = np.asarray(gt).ravel().astype(bool)
    if scores.shape != gt.shape:
        raise ValueError(f"shape mismatch: {scores.shape} scores, {gt.shape} labels")
    n_pos = int(gt.sum())
    if n_pos == 0:
        raise NoPositivesError("no positive pixels")
    order = np.argsort(-scores, kind="stable")
    hits = gt[order]
    ranks = np.flatnonzero(hits) + 1
    precision_at_hits = np.arange(1, n_pos + 1) / ranks
    return math.fsum(precision_at_hits.tolist()) / n_pos


@dataclass
class SegmentationSample:
    """Scores for one image plus what they are judged against.

    ``target`` names the known class for the single-object protocol;
    ``label_map`` maps concept names to ground-truth labels for multi-class.
    """

    id: str
    scores: np.ndarray  # (h, w, r)
    concepts: tuple[str, ...]
    gt: np.ndarray
    target: str | None = None
    label_map: dict | None = None

    def __post_init__(self):
        if isinstance(self.scores, SaliencyMap):
            if not self.concepts:
                self.concepts = self.scores.concepts
            self.scores = self.scores.scores
        self.scores = _score_cube(self.scores)
        self.concepts = tuple(self.concepts)
        self.gt = validate_ground_truth(self.gt)
        if self.scores.shape[2] != len(self.concepts):
            raise ValueError(f"sample {self.id}: {self.scores.shape[2]} score planes for "
                             f"{len(self.concepts)} concepts")
        if self.scores.shape[:2] != self.gt.shape:
            raise ValueError(f"sample {self.id}: scores {self.scores.shape[:2]} vs mask {self.gt.shape}")
        if self.target is not None and self.target not in self.concepts:
            raise ValueError(f"sample {self.id}: target {self.target!r} not in {list(self.concepts)}")


@dataclass
class MetricsReport:
    acc: float
    miou: float
    map: float | None
    per_sample: list[dict]
    n_samples: int
    n_excluded: int = 0
    mode: str = "single"
    miou_mode: str = "two_class"

    def to_dict(self) -> dict:
        return asdict(self)

    def summary(self) -> dict:
        return {"acc": self.acc, "miou": self.miou, "map": self.map}


def _mean(values) -> float:
    return math.fsum(values) / len(values)


def _sorted(samples) -> list[SegmentationSample]:
    samples = list(samples)
    if not samples:
        raise ValueError("no samples to evaluate")
    ids = [s.id for s in samples]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate sample ids")
    return sorted(samples, key=lambda s: s.id)


def evaluate_single_object(samples, background_vocab=(), miou_mode: str = "two_class") -> MetricsReport:
    """Mean-threshold binary segmentation of each sample's target plane."""
    if miou_mode not in MIOU_MODES:
        raise ValueError(f"miou_mode must be one of {MIOU_MODES}")
    classes = [0, 1] if miou_mode == "two_class" else [1]
    rows = []
    for s in _sorted(samples):
        if s.target is None:
            raise ValueError(f"sample {s.id} has no target concept")
        missing = [b for b in background_vocab if b not in s.concepts]
        if missing:
            raise ValueError(f"sample {s.id}: background concepts {missing} not in its vocabulary")
        if s.target in background_vocab:
            raise ValueError(f"sample {s.id}: target {s.target!r} is also a background concept")
        plane = s.scores[:, :, s.concepts.index(s.target)]
        gt_bin = np.where(s.gt == IGNORE_LABEL, IGNORE_LABEL, (s.gt != 0).astype(s.gt.dtype))
        pred = binarize_mean_threshold(plane).astype(s.gt.dtype)
        valid = s.gt != IGNORE_LABEL
        try:
            ap = average_precision(plane[valid], gt_bin[valid])
        except NoPositivesError:
            ap = None
        rows.append({
            "id": s.id,
            "acc": pixel_accuracy(pred, gt_bin),
            "miou": miou(pred, gt_bin, classes),
            "ap": ap,
        })
    aps = [r["ap"] for r in rows if r["ap"] is not None]
    return MetricsReport(
        acc=_mean([r["acc"] for r in rows]),
        miou=_mean([r["miou"] for r in rows]),
        map=_mean(aps) if aps else None,
        per_sample=rows,
        n_samples=len(rows),
        n_excluded=len(rows) - len(aps),
        mode="single",
        miou_mode=miou_mode,
    )


def concept_labels(concepts, label_map, background=()) -> np.ndarray:
    """Ground-truth label for each concept index; background concepts map to 0."""
    labels = []
    for c in concepts:
        if c in background:
            labels.append(0)
        elif label_map is not None and c in label_map:
            labels.append(int(label_map[c]))
        else:
            raise ValueError(f"concept {c!r} has no label")
    return np.array(labels)


def evaluate_multiclass(samples, background=()) -> MetricsReport:
    """Per-pixel argmax over concepts, scored with accuracy and mIoU."""
    rows = []
    for s in _sorted(samples):
        if s.label_map is None and not background:
            raise ValueError(f"sample {s.id} has no label map")
        lut = concept_labels(s.concepts, s.label_map or {}, background)
        gt_labels = set(np.unique(s.gt).tolist()) - {IGNORE_LABEL}
        unmapped = gt_labels - set(lut.tolist())
        if unmapped:
            raise ValueError(f"sample {s.id}: ground-truth labels {sorted(unmapped)} not mapped")
        pred = lut[multiclass_argmax(s.scores)]
        classes = sorted(set(lut.tolist()))
        rows.append({"id": s.id, "acc": pixel_accuracy(pred, s.gt), "miou": miou(pred, s.gt, classes)})
    return MetricsReport(
        acc=_mean([r["acc"] for r in rows]),
        miou=_mean([r["miou"] for r in rows]),
        map=None,
        per_sample=rows,
        n_samples=len(rows),
        mode="multi",
        miou_mode="all_classes",
    )
