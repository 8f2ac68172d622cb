"""Segmentation metrics, forgetting measures, zero-shot evaluation and stitch curves."""

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .autodiff.ops import IGNORE_LABEL
from .model import SegNet, stitch_predict

FULL_CUT = "full"


def confusion_matrix(preds, gts, class_count, ignore_label=IGNORE_LABEL):
    """Rows are ground-truth classes, columns predictions; ignored pixels dropped."""
    preds = np.asarray(preds)
    gts = np.asarray(gts)
    if preds.shape != gts.shape:
        raise ValueError(f"prediction shape {preds.shape} != ground-truth shape {gts.shape}")
    valid = gts != ignore_label
    if not valid.any():
        raise ValueError("no valid pixels to evaluate")
    g = gts[valid].astype(np.int64)
    p = preds[valid].astype(np.int64)
    if g.max() >= class_count or p.max() >= class_count or min(g.min(), p.min()) < 0:
        raise ValueError(f"labels outside [0, {class_count})")
    return np.bincount(g * class_count + p, minlength=class_count ** 2).reshape(class_count, class_count)


def miou_from_confusion(cm):
    """Mean IoU in percent over classes that occur in ground truth or prediction.

    The mean is computed as an exact fraction and rounded once, so the result
    does not depend on summation order.
    """
    tp = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    present = np.flatnonzero(union > 0)
    if present.size == 0:
        raise ValueError("no valid pixels to evaluate")
    total = sum(Fraction(int(tp[c]), int(union[c])) for c in present)
    return float(100 * total / present.size)


def confusion_and_miou(preds, gts, class_count, ignore_label=IGNORE_LABEL):
    cm = confusion_matrix(preds, gts, class_count, ignore_label)
    return cm, miou_from_confusion(cm)


def evaluate(model: SegNet, task, batch_size=32) -> float:
    """Inference-mode mIoU of ``model`` on ``task``."""
    if model.cfg.class_count != task.class_count:
        raise ValueError(f"model has {model.cfg.class_count} classes, task has {task.class_count}")
    preds = model.predict(task.images, batch_size)
    return confusion_and_miou(preds, task.masks, task.class_count)[1]


def zero_shot_eval(model: SegNet, task) -> float:
    return evaluate(model, task)


def learning_accuracy(*diagonal) -> float:
    """Mean of the diagonal entries mIoU_{k,k}."""
    if not diagonal:
        raise ValueError("learning accuracy needs at least one value")
    return float(sum(diagonal) / len(diagonal))


def forgetting(m_before, m_after) -> float:
    """Drop on an earlier task: mIoU right after learning it minus mIoU at the end."""
    return float(m_before - m_after)


# ----------------------------------------------------------------------------- tables


@dataclass
class MetricsTable:
    """Grid ``miou[p, q]``: model trained up to task ``p`` evaluated on task ``q``."""

    tasks: list
    grid: np.ndarray
    method: str = ""
    seed: int = 0
    joint: bool = False

    @classmethod
    def empty(cls, tasks, method="", seed=0, joint=False):
        rows = 1 if joint else len(tasks)
        return cls(list(tasks), np.full((rows, len(tasks)), np.nan), method, seed, joint)

    def set(self, p, q, value):
        if not 0.0 <= value <= 100.0:
            raise ValueError(f"mIoU must lie in [0, 100], got {value}")
        self.grid[p, q] = value

    @property
    def diagonal(self):
        return [float(self.grid[k, k]) for k in range(min(self.grid.shape))]

    @property
    def zero_shot(self):
        """Task-0 model on every later task."""
        return [float(v) for v in self.grid[0, 1:]]

    @property
    def learning_accuracy(self):
        if self.joint:
            return float(np.mean(self.grid[0]))
        return learning_accuracy(*self.diagonal)

    def forgetting(self, q=0):
        if self.joint:
            return float("nan")
        return forgetting(self.grid[q, q], self.grid[-1, q])

    def rows(self):
        out = []
        for p in range(self.grid.shape[0]):
            for q in range(self.grid.shape[1]):
                if not np.isnan(self.grid[p, q]):
                    upto = "joint" if self.joint else p
                    out.append((self.method, self.seed, upto, q, self.tasks[q], float(self.grid[p, q])))
        return out


# ----------------------------------------------------------------------------- stitching


@dataclass
class StitchCurve:
    cuts: list
    relative: list
    zones: list
    reference: float
    stitched: list = field(default_factory=list)

    def entries(self):
        return list(zip(self.cuts, self.zones, self.relative))

    def encoder_min(self):
        return min(r for c, z, r in self.entries() if z == "encoder")

    def value(self, cut):
        return self.relative[self.cuts.index(cut)]


def relative_miou(value, reference):
    if reference <= 0:
        raise ValueError("reference mIoU must be positive")
    return 100.0 * (value / reference)


def stitching_curve(f0: SegNet, f1: SegNet, val, batch_size=32) -> StitchCurve:
    """Relative task-0 mIoU of ``f1`` stitched into ``f0`` at every cut, then ``f1`` alone."""
    f0.check_compatible(f1)
    reference = evaluate(f0, val, batch_size)
    cuts, zones, rel, raw = [], [], [], []
    for cut in f0.cut_points:
        preds = stitch_predict(f1, f0, cut, val.images, batch_size)
        m = confusion_and_miou(preds, val.masks, val.class_count)[1]
        cuts.append(cut)
        zones.append(f0.zones[cut])
        raw.append(m)
        rel.append(relative_miou(m, reference))
    m = evaluate(f1, val, batch_size)
    cuts.append(FULL_CUT)
    zones.append("decoder")
    raw.append(m)
    rel.append(relative_miou(m, reference))
    return StitchCurve(cuts, rel, zones, reference, raw)


def aggregate(values):
    """Mean and sample standard deviation (0 for a single value)."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise ValueError("nothing to aggregate")
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std
