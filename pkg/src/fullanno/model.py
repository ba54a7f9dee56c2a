"""Domain model: annotation records and their canonical serialized form.

All types are frozen dataclasses — immutable after construction, safe to share
between workers. The canonical JSON layout (key order, list sort keys) is
documented in docs/formats.md; `canonical_serialize` is the single source of
truth for it and is byte-stable: serialize -> parse -> serialize is the
identity on bytes.

Box convention is COCO xywh with a top-left origin. Containment checks are
edge-inclusive.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Any, Optional

from .errors import InvariantViolation, SchemaError
from .tokenizers import Tokenizer

__all__ = [
    "BBox",
    "Detection",
    "ObjectAnnotation",
    "OcrEntry",
    "SimpleCaption",
    "DenseCaption",
    "Provenance",
    "EnrichedImageAnnotation",
    "AnnotationBundle",
    "StatsReport",
    "canonical_serialize",
    "parse_record",
    "validate",
]


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in COCO xywh pixels (x,y = top-left corner)."""

    x: float
    y: float
    w: float
    h: float

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]

    def clamped(self, width: float, height: float) -> "BBox":
        """Clamp into [0,width]x[0,height]; may become degenerate."""
        x0 = min(max(self.x, 0.0), width)
        y0 = min(max(self.y, 0.0), height)
        x1 = min(max(self.x + self.w, 0.0), width)
        y1 = min(max(self.y + self.h, 0.0), height)
        return BBox(x0, y0, x1 - x0, y1 - y0)

    @property
    def degenerate(self) -> bool:
        return self.w <= 0 or self.h <= 0


@dataclass(frozen=True)
class Detection:
    """One candidate object from a single source (detector or ground truth)."""

    bbox: BBox
    category: str
    score: float
    source_id: str


@dataclass(frozen=True)
class ObjectAnnotation:
    object_id: int
    bbox: BBox
    category: str
    score: float
    source_id: str
    region_description: Optional[str] = None
    region_token_length: Optional[int] = None
    matched_ocr_ids: tuple[int, ...] = ()
    segmentation: Any = None  # COCO segmentation carried through opaquely


@dataclass(frozen=True)
class OcrEntry:
    ocr_id: int
    bbox: BBox
    text: str
    confidence: float
    verified: bool = False
    corrected_text: Optional[str] = None
    matched_object_id: Optional[int] = None
    verify_failed: bool = False

    @property
    def display_text(self) -> str:
        """Text to surface downstream: the corrected form once verified."""
        if self.verified and self.corrected_text is not None:
            return self.corrected_text
        return self.text


@dataclass(frozen=True)
class SimpleCaption:
    text: str
    token_length: int


@dataclass(frozen=True)
class DenseCaption:
    text: str
    token_length: int
    generator: dict[str, Any]
    prompt_hash: str


@dataclass(frozen=True)
class Provenance:
    """Monotone stage-completion flags (stage k complete implies stages < k)."""

    stage1: bool = False
    stage2: bool = False
    stage3: bool = False

    def stage_done(self, stage: int) -> bool:
        return (self.stage1, self.stage2, self.stage3)[stage - 1]

    def with_stage(self, stage: int) -> "Provenance":
        flags = [self.stage1, self.stage2, self.stage3]
        flags[stage - 1] = True
        return Provenance(*flags)


@dataclass(frozen=True)
class EnrichedImageAnnotation:
    image_id: int
    file_name: str
    width: float
    height: float
    objects: tuple[ObjectAnnotation, ...] = ()
    ocr: tuple[OcrEntry, ...] = ()
    simple_captions: tuple[SimpleCaption, ...] = ()
    dense_caption: Optional[DenseCaption] = None
    provenance: Provenance = field(default_factory=Provenance)

    def with_objects(self, objects) -> "EnrichedImageAnnotation":
        return replace(self, objects=tuple(objects))


@dataclass(frozen=True)
class AnnotationBundle:
    """Canonical, ordered prior-knowledge payload for the caption integrator.

    Objects are (category, normalized xywh rounded to 3 decimals,
    region_description or None) ordered by (area desc, object_id asc).
    OCR items are (text, owning category or "unattached") ordered by ocr_id.
    """

    width: float
    height: float
    objects: tuple[tuple[str, tuple[float, float, float, float], Optional[str]], ...]
    ocr_items: tuple[tuple[str, str], ...]
    sampled_simple_captions: tuple[str, ...]


@dataclass(frozen=True)
class StatsReport:
    num_images: int
    num_boxes: int
    num_ocr_entries: int
    atl_dense: float
    atl_region: float
    dense_empty: bool
    region_empty: bool


# --- canonical JSON -------------------------------------------------------

def _num(v: float):
    """Emit whole-valued floats as ints so canonical bytes are stable."""
    if isinstance(v, float) and v.is_integer():
        return int(v)
    return v


def _bbox_json(b: BBox) -> list:
    return [_num(b.x), _num(b.y), _num(b.w), _num(b.h)]


def _object_json(o: ObjectAnnotation) -> dict:
    out = {
        "object_id": o.object_id,
        "bbox": _bbox_json(o.bbox),
        "category": o.category,
        "score": _num(o.score),
        "source_id": o.source_id,
        "region_description": o.region_description,
        "region_token_length": o.region_token_length,
        "matched_ocr_ids": sorted(o.matched_ocr_ids),
    }
    if o.segmentation is not None:
        out["segmentation"] = o.segmentation
    return out


def _ocr_json(e: OcrEntry) -> dict:
    return {
        "ocr_id": e.ocr_id,
        "bbox": _bbox_json(e.bbox),
        "text": e.text,
        "confidence": _num(e.confidence),
        "verified": e.verified,
        "corrected_text": e.corrected_text,
        "matched_object_id": e.matched_object_id,
        "verify_failed": e.verify_failed,
    }


def record_to_json(record: EnrichedImageAnnotation) -> dict:
    """Plain-dict form of a record, keys and lists in canonical order."""
    dense = None
    if record.dense_caption is not None:
        d = record.dense_caption
        dense = {
            "text": d.text,
            "token_length": d.token_length,
            "generator": {k: d.generator[k] for k in sorted(d.generator)},
            "prompt_hash": d.prompt_hash,
        }
    return {
        "image_id": record.image_id,
        "file_name": record.file_name,
        "width": _num(record.width),
        "height": _num(record.height),
        "objects": [_object_json(o) for o in sorted(record.objects, key=lambda o: o.object_id)],
        "ocr": [_ocr_json(e) for e in sorted(record.ocr, key=lambda e: e.ocr_id)],
        "simple_captions": [
            {"text": c.text, "token_length": c.token_length} for c in record.simple_captions
        ],
        "dense_caption": dense,
        "provenance": {
            "stage1": record.provenance.stage1,
            "stage2": record.provenance.stage2,
            "stage3": record.provenance.stage3,
        },
    }


def canonical_serialize(record: EnrichedImageAnnotation) -> bytes:
    """Serialize a record to its canonical JSON byte form (one line, no LF)."""
    violations = validate(record)
    if violations:
        raise InvariantViolation(
            f"image {record.image_id}: " + "; ".join(violations)
        )
    return json.dumps(
        record_to_json(record), ensure_ascii=True, separators=(",", ":")
    ).encode("utf-8")


def _parse_bbox(v, path: str) -> BBox:
    if not (isinstance(v, list) and len(v) == 4):
        raise SchemaError("bbox must be a 4-element array", path)
    try:
        return BBox(*(float(c) for c in v))
    except (TypeError, ValueError):
        raise SchemaError("bbox elements must be numbers", path)


def parse_record(data: bytes | str) -> EnrichedImageAnnotation:
    """Inverse of canonical_serialize. Raises SchemaError on malformed input."""
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as e:
        raise SchemaError(f"invalid JSON: {e.msg}", "$")
    if not isinstance(doc, dict):
        raise SchemaError("record must be a JSON object", "$")

    def need(key: str, types, path: str = "$"):
        if key not in doc:
            raise SchemaError("missing key", f"{path}.{key}")
        v = doc[key]
        if not isinstance(v, types):
            raise SchemaError(f"wrong type for {key}", f"{path}.{key}")
        return v

    objects = []
    for i, o in enumerate(need("objects", list)):
        p = f"$.objects[{i}]"
        if not isinstance(o, dict):
            raise SchemaError("object must be an object", p)
        try:
            objects.append(ObjectAnnotation(
                object_id=int(o["object_id"]),
                bbox=_parse_bbox(o["bbox"], f"{p}.bbox"),
                category=str(o["category"]),
                score=float(o["score"]),
                source_id=str(o["source_id"]),
                region_description=o.get("region_description"),
                region_token_length=o.get("region_token_length"),
                matched_ocr_ids=tuple(o.get("matched_ocr_ids", [])),
                segmentation=o.get("segmentation"),
            ))
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaError(f"bad object: {e}", p)
    ocr = []
    for i, e in enumerate(need("ocr", list)):
        p = f"$.ocr[{i}]"
        if not isinstance(e, dict):
            raise SchemaError("ocr entry must be an object", p)
        try:
            ocr.append(OcrEntry(
                ocr_id=int(e["ocr_id"]),
                bbox=_parse_bbox(e["bbox"], f"{p}.bbox"),
                text=str(e["text"]),
                confidence=float(e["confidence"]),
                verified=bool(e.get("verified", False)),
                corrected_text=e.get("corrected_text"),
                matched_object_id=e.get("matched_object_id"),
                verify_failed=bool(e.get("verify_failed", False)),
            ))
        except (KeyError, TypeError, ValueError) as err:
            raise SchemaError(f"bad ocr entry: {err}", p)
    captions = []
    for i, c in enumerate(need("simple_captions", list)):
        p = f"$.simple_captions[{i}]"
        try:
            captions.append(SimpleCaption(text=str(c["text"]), token_length=int(c["token_length"])))
        except (KeyError, TypeError, ValueError) as err:
            raise SchemaError(f"bad caption: {err}", p)
    dense = None
    d = doc.get("dense_caption")
    if d is not None:
        try:
            dense = DenseCaption(
                text=str(d["text"]),
                token_length=int(d["token_length"]),
                generator=dict(d["generator"]),
                prompt_hash=str(d["prompt_hash"]),
            )
        except (KeyError, TypeError, ValueError) as err:
            raise SchemaError(f"bad dense_caption: {err}", "$.dense_caption")
    prov = doc.get("provenance", {})
    if not isinstance(prov, dict):
        raise SchemaError("provenance must be an object", "$.provenance")
    return EnrichedImageAnnotation(
        image_id=int(need("image_id", (int,))),
        file_name=str(need("file_name", str)),
        width=float(need("width", (int, float))),
        height=float(need("height", (int, float))),
        objects=tuple(objects),
        ocr=tuple(ocr),
        simple_captions=tuple(captions),
        dense_caption=dense,
        provenance=Provenance(
            stage1=bool(prov.get("stage1", False)),
            stage2=bool(prov.get("stage2", False)),
            stage3=bool(prov.get("stage3", False)),
        ),
    )


# --- validation -----------------------------------------------------------

def _box_in_image(b: BBox, width: float, height: float) -> bool:
    return b.x >= 0 and b.y >= 0 and b.x + b.w <= width + 1e-9 and b.y + b.h <= height + 1e-9


def _contains(outer: BBox, inner: BBox) -> bool:
    # duplicated from geometry to keep model free of a circular import
    return (
        outer.x <= inner.x
        and outer.y <= inner.y
        and inner.x + inner.w <= outer.x + outer.w
        and inner.y + inner.h <= outer.y + outer.h
    )


def validate(record: EnrichedImageAnnotation,
             tokenizer: Tokenizer | None = None) -> list[str]:
    """Check all record invariants; returns one message per violation.

    Violations are data, not exceptions. Pass a tokenizer to additionally
    check stored token lengths against a recount.
    """
    v: list[str] = []
    objects = {o.object_id: o for o in record.objects}
    ocr = {e.ocr_id: e for e in record.ocr}
    if len(objects) != len(record.objects):
        v.append("objects: duplicate object_id")
    if len(ocr) != len(record.ocr):
        v.append("ocr: duplicate ocr_id")
    for o in record.objects:
        tag = f"object {o.object_id}"
        if o.bbox.degenerate:
            v.append(f"{tag}: degenerate bbox (w,h must be > 0)")
        elif not _box_in_image(o.bbox, record.width, record.height):
            v.append(f"{tag}: bbox outside image bounds")
        if not (0 <= o.score <= 1):
            v.append(f"{tag}: score outside [0,1]")
        if not o.category.strip():
            v.append(f"{tag}: empty category")
        if (o.region_description is None) != (o.region_token_length is None):
            v.append(f"{tag}: region_description and region_token_length must come together")
        if tokenizer is not None and o.region_description is not None:
            if o.region_token_length != tokenizer.count(o.region_description):
                v.append(f"{tag}: region_token_length does not match tokenizer recount")
        for oid in o.matched_ocr_ids:
            e = ocr.get(oid)
            if e is None:
                v.append(f"{tag}: matched_ocr_ids references missing ocr {oid}")
            elif e.matched_object_id != o.object_id:
                v.append(f"{tag}: ocr {oid} does not link back")
    for e in record.ocr:
        tag = f"ocr {e.ocr_id}"
        if e.bbox.degenerate:
            v.append(f"{tag}: degenerate bbox (w,h must be > 0)")
        elif not _box_in_image(e.bbox, record.width, record.height):
            v.append(f"{tag}: bbox outside image bounds")
        if not (0 <= e.confidence <= 1):
            v.append(f"{tag}: confidence outside [0,1]")
        if e.verified and e.corrected_text is None:
            v.append(f"{tag}: verified without corrected_text")
        if e.matched_object_id is not None:
            o = objects.get(e.matched_object_id)
            if o is None:
                v.append(f"{tag}: matched_object_id references missing object {e.matched_object_id}")
            else:
                if not _contains(o.bbox, e.bbox):
                    v.append(f"{tag}: matched object's bbox does not contain the ocr bbox")
                if e.ocr_id not in o.matched_ocr_ids:
                    v.append(f"{tag}: object {o.object_id} does not link back")
    if tokenizer is not None:
        for i, c in enumerate(record.simple_captions):
            if c.token_length != tokenizer.count(c.text):
                v.append(f"simple_caption {i}: token_length does not match tokenizer recount")
        if record.dense_caption is not None:
            if record.dense_caption.token_length != tokenizer.count(record.dense_caption.text):
                v.append("dense_caption: token_length does not match tokenizer recount")
    p = record.provenance
    if (p.stage3 and not p.stage2) or (p.stage2 and not p.stage1):
        v.append("provenance: stage flags not monotone")
    return v
