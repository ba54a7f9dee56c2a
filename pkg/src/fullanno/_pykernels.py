"""Pure-Python greedy suppression kernel.

Fallback for the compiled `_speedups` extension; same contract. Boxes arrive
already sorted in suppression order; the kernel only runs the O(n^2) loop.
"""

from __future__ import annotations

from typing import Sequence

BACKEND = "python"


def iou_xywh(ax: float, ay: float, aw: float, ah: float,
             bx: float, by: float, bw: float, bh: float) -> float:
    ix = min(ax + aw, bx + bw) - max(ax, bx)
    if ix <= 0:
        return 0.0
    iy = min(ay + ah, by + bh) - max(ay, by)
    if iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (aw * ah + bw * bh - inter)


def suppress(boxes: Sequence[Sequence[float]], iou_threshold: float) -> list[int]:
    """Greedy NMS over pre-ordered xywh boxes; returns kept positions.

    A box is suppressed when its IoU with an already-kept box is strictly
    greater than the threshold.
    """
    kept: list[int] = []
    for i, b in enumerate(boxes):
        for k in kept:
            a = boxes[k]
            if iou_xywh(a[0], a[1], a[2], a[3], b[0], b[1], b[2], b[3]) > iou_threshold:
                break
        else:
            kept.append(i)
    return kept
