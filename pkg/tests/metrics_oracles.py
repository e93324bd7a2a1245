"""Independent reference implementations for the segment metrics."""

import itertools
from functools import lru_cache


def runs(labels):
    """Segments as ``(label, frame bitmask)`` found by grouping equal neighbours."""
    out = []
    pos = 0
    for lab, grp in itertools.groupby(labels):
        n = len(list(grp))
        out.append((lab, ((1 << n) - 1) << pos))
        pos += n
    return tuple(out)


@lru_cache(maxsize=None)
def edit_distance(a, b):
    # textbook recursion on prefixes
    if not a:
        return len(b)
    if not b:
        return len(a)
    return min(
        edit_distance(a[:-1], b) + 1,
        edit_distance(a, b[:-1]) + 1,
        edit_distance(a[:-1], b[:-1]) + (a[-1] != b[-1]),
    )


@lru_cache(maxsize=None)
def _edit_from_strings(a, b):
    if not a and not b:
        return 100.0
    return max(0.0, 100.0 * (1 - edit_distance(a, b) / max(len(a), len(b))))


def edit_oracle(p_runs, g_runs):
    return _edit_from_strings(tuple(lab for lab, _ in p_runs), tuple(lab for lab, _ in g_runs))


def f1_oracle(p_runs, g_runs, k):
    taken = set()
    tp = 0
    for lab, pm in p_runs:
        best, best_j = -1.0, None
        for j, (gl, gm) in enumerate(g_runs):
            if gl != lab or j in taken:
                continue
            iou = (pm & gm).bit_count() / (pm | gm).bit_count()
            if iou > best:  # earliest segment wins ties
                best, best_j = iou, j
        if best_j is not None and best * 100 >= k:
            tp += 1
            taken.add(best_j)
    fp = len(p_runs) - tp
    fn = len(g_runs) - tp
    if tp == 0:
        return 0.0
    prec, rec = tp / (tp + fp), tp / (tp + fn)
    return 200 * prec * rec / (prec + rec)
