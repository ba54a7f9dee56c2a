"""Stage-2/3 logic: OCR-to-object matching, context-padded crops, the region
description prompt, and deterministic construction of the integration prompt.

Matching rule: an OCR entry is assigned to the smallest-area object whose box
fully contains the OCR box (edge-inclusive); area ties go to the lowest
object_id; no containing object means unmatched, which is a normal outcome.

The integration prompt is a pure function of the AnnotationBundle: identical
bundles produce byte-identical messages and hashes. The template is versioned
(TEMPLATE_VERSION) and the version participates in the hash, so a template
change invalidates caches cleanly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

from . import geometry
from .errors import DegenerateBox, EmptyBundle, EmptyCategory, StageViolation
from .model import (
    AnnotationBundle,
    BBox,
    EnrichedImageAnnotation,
    ObjectAnnotation,
    OcrEntry,
)

TEMPLATE_VERSION = "v1"

REGION_PROMPT_TEMPLATE = (
    "You glimpsed the image and saw a {category_name}. "
    "Please describe the image in a few sentences: "
)

INTEGRATION_PREAMBLE = (
    "Using only the facts listed below, write one detailed paragraph "
    "describing the image. Mention the visible text verbatim. Do not invent "
    "objects, text, or attributes that are not listed."
)


@dataclass(frozen=True)
class OcrMatch:
    ocr_id: int
    matched_object_id: Optional[int]
    candidate_count: int


@dataclass(frozen=True)
class IntegrationMessage:
    system_preamble: str
    content: str
    hash: str
    template_version: str = TEMPLATE_VERSION


def match_ocr_to_objects(
    ocr: Sequence[OcrEntry], objects: Sequence[ObjectAnnotation]
) -> list[OcrMatch]:
    """Assign each OCR entry to the smallest containing object (if any)."""
    matches = []
    for entry in ocr:
        candidates = [o for o in objects if geometry.contains(o.bbox, entry.bbox)]
        best = None
        if candidates:
            best = min(candidates, key=lambda o: (geometry.area(o.bbox), o.object_id))
        matches.append(OcrMatch(
            ocr_id=entry.ocr_id,
            matched_object_id=best.object_id if best else None,
            candidate_count=len(candidates),
        ))
    return matches


def apply_matches(
    record: EnrichedImageAnnotation, matches: Sequence[OcrMatch]
) -> EnrichedImageAnnotation:
    """Write match results back as consistent bidirectional links."""
    by_ocr = {m.ocr_id: m.matched_object_id for m in matches}
    linked: dict[int, list[int]] = {}
    new_ocr = []
    for e in record.ocr:
        target = by_ocr.get(e.ocr_id)
        new_ocr.append(replace(e, matched_object_id=target))
        if target is not None:
            linked.setdefault(target, []).append(e.ocr_id)
    new_objects = [
        replace(o, matched_ocr_ids=tuple(sorted(linked.get(o.object_id, []))))
        for o in record.objects
    ]
    return replace(record, objects=tuple(new_objects), ocr=tuple(new_ocr))


def crop_with_context(
    image_dims: tuple[float, float], box: BBox, context_ratio: float
) -> BBox:
    """Pad a box by context_ratio of its own size per side, clamped to the image."""
    if box.degenerate:
        raise DegenerateBox(f"box {box.as_list()} has non-positive extent")
    if context_ratio < 0:
        raise ValueError("context_ratio must be >= 0")
    width, height = image_dims
    padded = BBox(
        box.x - context_ratio * box.w,
        box.y - context_ratio * box.h,
        box.w * (1 + 2 * context_ratio),
        box.h * (1 + 2 * context_ratio),
    )
    return padded.clamped(width, height)


def build_region_prompt(category_name: str) -> str:
    """Text prompt for describing one object's crop."""
    if not category_name.strip():
        raise EmptyCategory("category name is empty")
    return REGION_PROMPT_TEMPLATE.format(category_name=category_name)


def _norm3(v: float, scale: float) -> float:
    return round(v / scale, 3)


def build_bundle(
    record: EnrichedImageAnnotation, max_simple_captions: int
) -> AnnotationBundle:
    """Collect an image's priors into the canonical ordered bundle.

    Objects come out largest-first (ties by object_id), positions normalized
    to [0,1] and rounded to 3 decimals. OCR items are ordered by ocr_id and
    labeled with the owning object's category, or "unattached". Simple
    captions are the first max_simple_captions in caption order.
    """
    if not record.provenance.stage_done(2):
        raise StageViolation(f"image {record.image_id} has not completed stage 2")
    categories = {o.object_id: o.category for o in record.objects}
    objects = []
    ordering = sorted(record.objects, key=lambda o: (-geometry.area(o.bbox), o.object_id))
    for o in ordering:
        b = o.bbox
        pos = (
            _norm3(b.x, record.width),
            _norm3(b.y, record.height),
            _norm3(b.w, record.width),
            _norm3(b.h, record.height),
        )
        objects.append((o.category, pos, o.region_description))
    ocr_items = []
    for e in sorted(record.ocr, key=lambda e: e.ocr_id):
        label = categories.get(e.matched_object_id, "unattached")
        ocr_items.append((e.display_text, label))
    captions = tuple(c.text for c in record.simple_captions[:max_simple_captions])
    return AnnotationBundle(
        width=record.width,
        height=record.height,
        objects=tuple(objects),
        ocr_items=tuple(ocr_items),
        sampled_simple_captions=captions,
    )


def _section(title: str, lines: list[str]) -> list[str]:
    return [title] + (lines if lines else ["- (none)"]) + [""]


def build_integration_prompt(bundle: AnnotationBundle) -> IntegrationMessage:
    """Render the bundle into the integrator prompt; byte-deterministic."""
    if not bundle.objects and not bundle.sampled_simple_captions:
        raise EmptyBundle("bundle has no objects and no captions")
    lines: list[str] = [
        f"Image size: {bundle.width:g}x{bundle.height:g}",
        "",
    ]
    lines += _section(
        "Objects:",
        [f"- {cat} @ ({p[0]:.3f},{p[1]:.3f},{p[2]:.3f},{p[3]:.3f})"
         for cat, p, _ in bundle.objects],
    )
    lines += _section(
        "Region descriptions:",
        [f"- {cat}: {desc}" for cat, _, desc in bundle.objects if desc],
    )
    lines += _section(
        "Text in image (OCR):",
        [f'- "{text}" ({label})' for text, label in bundle.ocr_items],
    )
    lines += _section(
        "Reference captions:",
        [f"- {c}" for c in bundle.sampled_simple_captions],
    )
    content = "\n".join(lines).rstrip("\n") + "\n"
    digest = hashlib.sha256(
        f"{TEMPLATE_VERSION}\x00{INTEGRATION_PREAMBLE}\x00{content}".encode("utf-8")
    ).hexdigest()
    return IntegrationMessage(
        system_preamble=INTEGRATION_PREAMBLE,
        content=content,
        hash=digest,
    )


def verify_ocr(
    entry: OcrEntry, crop: BBox, verifier: Callable[[BBox, str], str]
) -> OcrEntry:
    """Run the verifier over one OCR region and record its answer.

    An empty or whitespace-only answer keeps the original text and sets the
    verify_failed flag. Client errors from the gateway propagate.
    """
    if entry.verified:
        return entry
    answer = verifier(crop, entry.text)
    if answer and answer.strip():
        return replace(entry, verified=True, corrected_text=answer.strip())
    return replace(entry, verified=True, corrected_text=entry.text, verify_failed=True)
