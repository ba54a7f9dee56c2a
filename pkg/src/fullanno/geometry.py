"""Geometric kernels: area, IoU, containment, confidence filtering, NMS,
and multi-source detection aggregation.

All functions are pure and thread-safe. The O(n^2) suppression loop runs in a
compiled extension (`fullanno._speedups`) when it was built, with a
pure-Python fallback selected at import time; `KERNEL_BACKEND` names which one
is active. Run benchmarks/bench_nms.py to compare the two.

Suppression policy (fixed for reproducibility):
* class-aware by default — only detections of the same category suppress each
  other; `class_agnostic=True` merges everything into one group;
* within a category, candidates are ranked by (score desc, source priority
  asc, insertion index asc);
* a candidate is suppressed when its IoU with a kept detection is strictly
  greater than the threshold;
* output is ordered by (score desc, insertion index asc).
"""

from __future__ import annotations

from typing import Iterable, Mapping, Sequence

from .errors import DegenerateBox, UnknownSource
from .model import BBox, Detection

try:
    from . import _speedups as _kernel
except ImportError:  # extension not built; pure-Python loop
    from . import _pykernels as _kernel

KERNEL_BACKEND: str = _kernel.BACKEND


def _check(b: BBox) -> None:
    if b.w <= 0 or b.h <= 0:
        raise DegenerateBox(f"box {b.as_list()} has non-positive extent")


def area(b: BBox) -> float:
    """Box area in square pixels."""
    _check(b)
    return b.w * b.h


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 for disjoint boxes, symmetric in (a, b)."""
    _check(a)
    _check(b)
    return _kernel.iou_xywh(a.x, a.y, a.w, a.h, b.x, b.y, b.w, b.h)


def contains(outer: BBox, inner: BBox) -> bool:
    """Edge-inclusive containment: equal boxes contain each other."""
    return (
        outer.x <= inner.x
        and outer.y <= inner.y
        and inner.x + inner.w <= outer.x + outer.w
        and inner.y + inner.h <= outer.y + outer.h
    )


def filter_by_confidence(dets: Sequence[Detection], threshold: float) -> list[Detection]:
    """Keep detections with score >= threshold, preserving input order."""
    if not 0 <= threshold <= 1:
        raise ValueError(f"threshold must be in [0,1], got {threshold}")
    return [d for d in dets if d.score >= threshold]


def nms(
    dets: Sequence[Detection],
    iou_threshold: float,
    source_priorities: Mapping[str, int] | None = None,
    class_agnostic: bool = False,
) -> list[Detection]:
    """Greedy non-maximum suppression; see the module docstring for policy.

    `source_priorities` maps source_id -> rank (lower wins ties); sources not
    listed rank after all listed ones, tied among themselves.
    """
    if not 0 <= iou_threshold <= 1:
        raise ValueError(f"iou_threshold must be in [0,1], got {iou_threshold}")
    for d in dets:
        _check(d.bbox)
    prio = source_priorities or {}
    worst = max(prio.values(), default=0) + 1

    groups: dict[str, list[int]] = {}
    for idx, d in enumerate(dets):
        key = "" if class_agnostic else d.category
        groups.setdefault(key, []).append(idx)

    kept_idx: list[int] = []
    for members in groups.values():
        members.sort(key=lambda i: (-dets[i].score, prio.get(dets[i].source_id, worst), i))
        boxes = [dets[i].bbox.as_list() for i in members]
        if boxes:
            kept_idx.extend(members[pos] for pos in _kernel.suppress(boxes, iou_threshold))
    kept_idx.sort(key=lambda i: (-dets[i].score, i))
    return [dets[i] for i in kept_idx]


def aggregate_sources(
    per_source: Iterable[tuple[str, Sequence[Detection]]],
    conf_threshold: float,
    iou_threshold: float,
    source_priorities: Mapping[str, int],
    class_agnostic: bool = False,
) -> list[Detection]:
    """Merge detections from several sources into one filtered, suppressed set.

    Equivalent to nms(filter_by_confidence(concatenation, conf), iou) where
    the concatenation order is canonical: sources sorted by priority, and
    detections within each source sorted by (score desc, category, box
    coordinates) — so the result does not depend on arrival order.
    """
    merged: list[Detection] = []
    ordered = sorted(per_source, key=lambda item: (source_priorities.get(item[0], -1), item[0]))
    for source_id, dets in ordered:
        if source_id not in source_priorities:
            raise UnknownSource(f"no priority configured for source {source_id!r}")
        canon = sorted(
            dets,
            key=lambda d: (-d.score, d.category, d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h),
        )
        for d in canon:
            if d.source_id != source_id:
                raise UnknownSource(
                    f"detection tagged {d.source_id!r} listed under source {source_id!r}"
                )
        merged.extend(canon)
    return nms(
        filter_by_confidence(merged, conf_threshold),
        iou_threshold,
        source_priorities=source_priorities,
        class_agnostic=class_agnostic,
    )
