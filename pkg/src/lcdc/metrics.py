"""Temporal action segmentation metrics: frame accuracy, segmental edit score, F1@k.

Segment-level metrics follow the usual segmentation convention: edit
distance between the sequences of segment labels normalized by the longer
sequence, and greedy in-order matching of predicted segments to unmatched
same-class ground-truth segments by IoU.  A background label, when given,
is dropped from the segment-level metrics only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .synthdata import segments_from_labels


@dataclass
class SegmentLabeling:
    frame_labels: list

    @property
    def segments(self) -> list[tuple[int, int, int]]:
        return segments_from_labels(self.frame_labels)

    def __len__(self):
        return len(self.frame_labels)


def _labels(x) -> list:
    return list(x.frame_labels) if isinstance(x, SegmentLabeling) else [int(v) for v in x]


def _segments(x, background):
    segs = segments_from_labels(x.frame_labels if isinstance(x, SegmentLabeling) else x)
    if background is not None:
        segs = [s for s in segs if s[0] != background]
    return segs


def frame_accuracy(pred, gt) -> float:
    p, g = np.asarray(_labels(pred)), np.asarray(_labels(gt))
    if p.shape != g.shape:
        raise ValueError(f"length mismatch: {len(p)} predicted vs {len(g)} ground-truth frames")
    if p.size == 0:
        raise ValueError("no frames to score")
    return 100.0 * float(np.mean(p == g))


def levenshtein(a, b) -> int:
    a, b = list(a), list(b)
    # a shared prefix or suffix never changes the distance
    while a and b and a[-1] == b[-1]:
        a.pop()
        b.pop()
    start = 0
    while start < len(a) and start < len(b) and a[start] == b[start]:
        start += 1
    a, b = a[start:], b[start:]
    if not a or not b:
        return len(a) + len(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            d = prev[j - 1] + (x != y)
            if cur[j - 1] + 1 < d:
                d = cur[j - 1] + 1
            if prev[j] + 1 < d:
                d = prev[j] + 1
            cur.append(d)
        prev = cur
    return prev[-1]


def edit_score(pred, gt, background=None) -> float:
    p = [s[0] for s in _segments(pred, background)]
    g = [s[0] for s in _segments(gt, background)]
    if p == g:
        return 100.0
    score = 100.0 * (1.0 - levenshtein(p, g) / max(len(p), len(g)))
    return max(score, 0.0)


def f1_at_k(pred, gt, k: float = 10.0, background=None) -> float:
    """Segmental F1 where a match needs IoU >= k/100 with an unmatched same-class segment."""
    if not 0 < k <= 100:
        raise ValueError(f"overlap threshold k must be in (0, 100], got {k}")
    p = _segments(pred, background)
    g = _segments(gt, background)
    by_class: dict = {}
    for j, (gl, gs, ge) in enumerate(g):
        by_class.setdefault(gl, []).append((j, gs, ge))
    used = [False] * len(g)
    thr = k / 100.0
    tp = fp = 0
    for label, ps, pe in p:
        best, best_j = -1.0, -1
        for j, gs, ge in by_class.get(label, ()):
            if used[j]:
                continue
            inter = min(pe, ge) - max(ps, gs)
            iou = inter / (max(pe, ge) - min(ps, gs)) if inter > 0 else 0.0
            if iou > best:
                best, best_j = iou, j
        if best_j >= 0 and best >= thr:
            tp += 1
            used[best_j] = True
        else:
            fp += 1
    fn = used.count(False)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 200.0 * precision * recall / (precision + recall)


def evaluate(pred, gt, ks=(10,), background=None) -> list[float]:
    """``[accuracy, edit, f1@k for k in ks]``."""
    out = [frame_accuracy(pred, gt), edit_score(pred, gt, background)]
    out += [f1_at_k(pred, gt, k, background) for k in ks]
    return out
