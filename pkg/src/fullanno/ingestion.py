"""Dataset I/O: COCO and Visual Genome readers, enriched JSONL writer/reader.

COCO ground-truth annotations enter the domain model with score 1.0 and
source_id "coco-gt" so they survive any confidence filter and win duplicate
contests during aggregation. Boxes partially out of frame are clamped; boxes
that end up with zero area are dropped; both actions are counted in the load
report so loaded + dropped always equals the input annotation count.

The enriched JSONL output is one canonical_serialize line per image, sorted
by image_id, with a sidecar manifest (<out>.manifest.json).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

from .errors import IdCollision, InvariantViolation, SchemaError
from .model import (
    BBox,
    EnrichedImageAnnotation,
    ObjectAnnotation,
    SimpleCaption,
    canonical_serialize,
    parse_record,
    validate,
)
from .tokenizers import Tokenizer

COCO_GT_SOURCE = "coco-gt"
ENGINE_VERSION = "0.1.0"


@dataclass
class LoadReport:
    annotations_in: int = 0
    loaded: int = 0
    dropped: int = 0
    clamped: int = 0
    captions: int = 0


@dataclass
class VgLoadResult:
    regions: dict[int, list[tuple[BBox, str]]]
    skipped: int = 0


@dataclass(frozen=True)
class DatasetHandle:
    name: str
    images: tuple[EnrichedImageAnnotation, ...]
    source_manifest: dict = field(default_factory=dict)

    def sorted_images(self) -> list[EnrichedImageAnnotation]:
        return sorted(self.images, key=lambda r: r.image_id)

    def replace_images(self, images) -> "DatasetHandle":
        return DatasetHandle(self.name, tuple(images), self.source_manifest)


def _sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_json(path: str):
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise SchemaError(f"invalid JSON in {path}: {e.msg}", "$")


def load_coco(
    instances_path: str,
    tokenizer: Tokenizer,
    captions_path: str | None = None,
    name: str = "coco",
) -> tuple[DatasetHandle, LoadReport]:
    """Read a COCO detection file (plus optional captions file) into a handle."""
    doc = _load_json(instances_path)
    if not isinstance(doc, dict):
        raise SchemaError("top level must be an object", "$")
    for key in ("images", "annotations", "categories"):
        if key not in doc:
            raise SchemaError("missing key", f"$.{key}")
        if not isinstance(doc[key], list):
            raise SchemaError("must be an array", f"$.{key}")

    categories = {}
    for i, c in enumerate(doc["categories"]):
        try:
            categories[int(c["id"])] = str(c["name"])
        except (KeyError, TypeError, ValueError):
            raise SchemaError("category needs id and name", f"$.categories[{i}]")

    images: dict[int, dict] = {}
    for i, im in enumerate(doc["images"]):
        try:
            image_id = int(im["id"])
            entry = {
                "file_name": str(im["file_name"]),
                "width": float(im["width"]),
                "height": float(im["height"]),
            }
        except (KeyError, TypeError, ValueError):
            raise SchemaError("image needs id, file_name, width, height", f"$.images[{i}]")
        if image_id in images:
            raise IdCollision(f"duplicate image id {image_id}")
        images[image_id] = entry

    report = LoadReport(annotations_in=len(doc["annotations"]))
    objects: dict[int, list[ObjectAnnotation]] = {i: [] for i in images}
    for i, ann in enumerate(doc["annotations"]):
        path = f"$.annotations[{i}]"
        try:
            image_id = int(ann["image_id"])
            ann_id = int(ann["id"])
            cat_id = int(ann["category_id"])
            bbox = ann["bbox"]
            box = BBox(*(float(c) for c in bbox))
        except (KeyError, TypeError, ValueError):
            raise SchemaError("annotation needs id, image_id, category_id, bbox", path)
        if image_id not in images:
            raise SchemaError(f"unknown image_id {image_id}", path)
        if cat_id not in categories:
            raise SchemaError(f"unknown category_id {cat_id}", path)
        im = images[image_id]
        clamped = box.clamped(im["width"], im["height"])
        if clamped.degenerate:
            report.dropped += 1
            continue
        if clamped != box:
            report.clamped += 1
        objects[image_id].append(ObjectAnnotation(
            object_id=ann_id,
            bbox=clamped,
            category=categories[cat_id],
            score=1.0,
            source_id=COCO_GT_SOURCE,
            segmentation=ann.get("segmentation"),
        ))
        report.loaded += 1

    captions: dict[int, list[SimpleCaption]] = {i: [] for i in images}
    caption_files = {}
    if captions_path is not None:
        cdoc = _load_json(captions_path)
        if not isinstance(cdoc, dict) or "annotations" not in cdoc:
            raise SchemaError("missing key", "$.annotations")
        for i, ann in enumerate(cdoc["annotations"]):
            try:
                image_id = int(ann["image_id"])
                text = str(ann["caption"])
            except (KeyError, TypeError, ValueError):
                raise SchemaError("caption needs image_id and caption", f"$.annotations[{i}]")
            if image_id in captions:
                captions[image_id].append(SimpleCaption(text=text, token_length=tokenizer.count(text)))
                report.captions += 1
        caption_files = {"captions": {"path": captions_path,
                                      "sha256": _sha256_file(captions_path)}}

    records = tuple(
        EnrichedImageAnnotation(
            image_id=image_id,
            file_name=im["file_name"],
            width=im["width"],
            height=im["height"],
            objects=tuple(objects[image_id]),
            simple_captions=tuple(captions[image_id]),
        )
        for image_id, im in sorted(images.items())
    )
    manifest = {
        "instances": {"path": instances_path, "sha256": _sha256_file(instances_path)},
        **caption_files,
    }
    return DatasetHandle(name=name, images=records, source_manifest=manifest), report


def load_vg_regions(regions_path: str) -> VgLoadResult:
    """Read a Visual Genome region-descriptions file.

    Returns region (box, phrase) pairs keyed by image id. Malformed regions
    are skipped and counted, not fatal. Boxes are clamped to non-negative
    origin; the file carries no image dimensions to clamp extents against.
    """
    doc = _load_json(regions_path)
    if not isinstance(doc, list):
        raise SchemaError("top level must be an array", "$")
    out: dict[int, list[tuple[BBox, str]]] = {}
    skipped = 0
    for i, im in enumerate(doc):
        if not isinstance(im, dict) or "regions" not in im:
            raise SchemaError("entry needs a 'regions' array", f"$[{i}]")
        try:
            image_id = int(im.get("id", im.get("image_id")))
        except (TypeError, ValueError):
            raise SchemaError("entry needs an image id", f"$[{i}]")
        rows = out.setdefault(image_id, [])
        for r in im["regions"]:
            try:
                phrase = str(r["phrase"])
                box = BBox(float(r["x"]), float(r["y"]),
                           float(r["width"]), float(r["height"]))
            except (KeyError, TypeError, ValueError):
                skipped += 1
                continue
            if box.x < 0 or box.y < 0:
                x0, y0 = max(box.x, 0.0), max(box.y, 0.0)
                box = BBox(x0, y0, box.w - (x0 - box.x), box.h - (y0 - box.y))
            if box.degenerate or not phrase.strip():
                skipped += 1
                continue
            rows.append((box, phrase))
    return VgLoadResult(regions=out, skipped=skipped)


def write_enriched(handle: DatasetHandle, out_path: str,
                   tokenizer_id: str = "whitespace",
                   config_hash: str = "") -> dict:
    """Write the enriched JSONL plus its sidecar manifest; returns the manifest.

    Refuses to write anything if any record fails validation, so a partial or
    invalid dataset never lands on disk at this path.
    """
    records = handle.sorted_images()
    for record in records:
        violations = validate(record)
        if violations:
            raise InvariantViolation(
                f"image {record.image_id}: " + "; ".join(violations)
            )
    lines = [canonical_serialize(r) for r in records]
    payload = b"".join(line + b"\n" for line in lines)
    tmp = out_path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, out_path)
    manifest = {
        "dataset": handle.name,
        "tokenizer": tokenizer_id,
        "engine_version": ENGINE_VERSION,
        "config_hash": config_hash,
        "line_count": len(lines),
        "content_sha256": hashlib.sha256(payload).hexdigest(),
        "sources": handle.source_manifest,
    }
    with open(out_path + ".manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def read_enriched(path: str, name: str = "enriched") -> DatasetHandle:
    """Read a JSONL file produced by write_enriched back into a handle."""
    records = []
    with open(path, "rb") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(parse_record(line))
            except SchemaError as e:
                raise SchemaError(f"line {lineno}: {e}", f"line {lineno}")
    return DatasetHandle(name=name, images=tuple(records))
