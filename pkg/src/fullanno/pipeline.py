"""Three-stage cascade orchestration: checkpointing, worker pool, statistics.

Stage 1 aggregates ground truth with every configured detector source and
suppresses duplicates; stage 2 adds OCR (recognized, verified, matched to
objects) and a region description per object; stage 3 integrates everything
into a dense caption per image.

Execution model: images are processed in sorted image_id order, in batches of
checkpoint_batch; a thread pool works within a batch and a checkpoint is
saved after each batch. Stage snapshots live in work_dir as canonical JSONL,
so an interrupted run resumed later, or a run with a different worker count,
writes byte-identical final output. Per-image model failures are recorded and
skipped (fail-soft); only configuration and I/O errors abort the run.

New object_id / ocr_id values are NEW_ID_BASE + image_id * 1e6 + ordinal,
which stays inside 64 bits and clear of COCO's id space for image ids below
one million.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

from . import enrichment, geometry
from .errors import (
    ClientError,
    ConfigError,
    EmptyBundle,
    EmptyResponse,
    MalformedResponse,
    SchemaError,
    StageViolation,
)
from .gateway import EndpointConfig, FakeClock, Gateway, SystemClock
from .ingestion import (
    COCO_GT_SOURCE,
    DatasetHandle,
    load_coco,
    load_vg_regions,
    read_enriched,
    write_enriched,
)
from .model import (
    Detection,
    EnrichedImageAnnotation,
    ObjectAnnotation,
    StatsReport,
    canonical_serialize,
)
from .tokenizers import Tokenizer, get_tokenizer

NEW_ID_BASE = 10 ** 12
_FAILSOFT = (ClientError, MalformedResponse, EmptyResponse, EmptyBundle,
             StageViolation)


@dataclass
class PipelineConfig:
    dataset_name: str
    coco_instances: str
    work_dir: str
    output_path: str
    coco_captions: Optional[str] = None
    vg_regions: Optional[str] = None
    cache_dir: Optional[str] = None
    endpoints: dict[str, EndpointConfig] = field(default_factory=dict)
    detector_sources: list[str] = field(default_factory=list)
    ocr_source: Optional[str] = None
    region_captioner: Optional[str] = None
    ocr_verifier: Optional[str] = None
    integrator: Optional[str] = None
    source_priorities: dict[str, int] = field(default_factory=dict)
    conf_threshold: float = 0.3
    iou_threshold: float = 0.75
    context_ratio: float = 0.2
    max_simple_captions: int = 2
    worker_count: int = 4
    checkpoint_path: Optional[str] = None
    checkpoint_batch: int = 64
    tokenizer: str = "whitespace"
    class_agnostic_nms: bool = False

    def __post_init__(self):
        if not 0 <= self.iou_threshold <= 1:
            raise ConfigError(f"iou_threshold must be in [0,1], got {self.iou_threshold}")
        if self.worker_count < 1:
            raise ConfigError("worker_count must be >= 1")
        if not self.source_priorities:
            prios = {COCO_GT_SOURCE: 0}
            for i, det in enumerate(self.detector_sources, start=1):
                prios[det] = i
            self.source_priorities = prios
        if self.checkpoint_path is None:
            self.checkpoint_path = os.path.join(self.work_dir, "checkpoint.json")

    @classmethod
    def from_json(cls, doc: dict) -> "PipelineConfig":
        endpoints = {
            eid: EndpointConfig.from_json(eid, e)
            for eid, e in doc.get("endpoints", {}).items()
        }
        known = {f for f in cls.__dataclass_fields__}
        kwargs = {k: v for k, v in doc.items() if k in known and k != "endpoints"}
        missing = {"dataset_name", "coco_instances", "work_dir", "output_path"} - kwargs.keys()
        if missing:
            raise ConfigError(f"config missing required keys: {sorted(missing)}")
        unknown = set(doc) - known - {"endpoints"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(endpoints=endpoints, **kwargs)

    @classmethod
    def from_file(cls, path: str) -> "PipelineConfig":
        with open(path, encoding="utf-8") as f:
            try:
                doc = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"invalid config JSON: {e.msg}")
        return cls.from_json(doc)

    def config_hash(self) -> str:
        """Hash of the semantic configuration. Runtime knobs that cannot
        change the output (worker_count, checkpoint/cache paths) are
        excluded, so resuming with a different worker count is allowed."""
        doc = {
            "dataset_name": self.dataset_name,
            "coco_instances": self.coco_instances,
            "coco_captions": self.coco_captions,
            "vg_regions": self.vg_regions,
            "detector_sources": self.detector_sources,
            "ocr_source": self.ocr_source,
            "region_captioner": self.region_captioner,
            "ocr_verifier": self.ocr_verifier,
            "integrator": self.integrator,
            "source_priorities": self.source_priorities,
            "conf_threshold": self.conf_threshold,
            "iou_threshold": self.iou_threshold,
            "context_ratio": self.context_ratio,
            "max_simple_captions": self.max_simple_captions,
            "tokenizer": self.tokenizer,
            "class_agnostic_nms": self.class_agnostic_nms,
            "endpoints": {
                eid: [e.base_url, e.model, e.temperature, e.max_output_tokens, sorted(e.stub.items())]
                for eid, e in sorted(self.endpoints.items())
            },
        }
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class Checkpoint:
    """Per-stage completed-image bookkeeping, persisted after every batch."""

    def __init__(self, config_hash: str):
        self.config_hash = config_hash
        self.completed: dict[int, set[int]] = {1: set(), 2: set(), 3: set()}
        self.stages_done: set[int] = set()
        self.failures: list[dict] = []

    def save(self, path: str) -> None:
        doc = {
            "config_hash": self.config_hash,
            "completed": {str(k): sorted(v) for k, v in self.completed.items()},
            "stages_done": sorted(self.stages_done),
            "failures": self.failures,
        }
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(doc, f)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str, config_hash: str) -> "Checkpoint":
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
        if doc.get("config_hash") != config_hash:
            raise ConfigError(
                "checkpoint was written with a different configuration "
                f"(checkpoint {doc.get('config_hash', '?')[:12]}..., live {config_hash[:12]}...)"
            )
        ckpt = cls(config_hash)
        for k, ids in doc.get("completed", {}).items():
            ckpt.completed[int(k)] = set(ids)
        ckpt.stages_done = set(doc.get("stages_done", []))
        ckpt.failures = list(doc.get("failures", []))
        return ckpt


# --- per-image stage functions -------------------------------------------

def _gt_detections(record: EnrichedImageAnnotation) -> list[Detection]:
    return [
        Detection(bbox=o.bbox, category=o.category, score=o.score, source_id=o.source_id)
        for o in record.objects
    ]


def stage1_image(record: EnrichedImageAnnotation, cfg: PipelineConfig,
                 gateway: Gateway) -> EnrichedImageAnnotation:
    """Aggregate ground truth with all detector sources and suppress duplicates."""
    dims = (record.width, record.height)
    ref = str(record.image_id)
    gt = _gt_detections(record)
    gt_by_identity = {id(d): o for d, o in zip(gt, record.objects)}
    per_source = [(COCO_GT_SOURCE, gt)]
    for det_id in cfg.detector_sources:
        per_source.append((det_id, gateway.detect(ref, dims, gateway.endpoint(det_id))))
    kept = geometry.aggregate_sources(
        per_source,
        conf_threshold=cfg.conf_threshold,
        iou_threshold=cfg.iou_threshold,
        source_priorities=cfg.source_priorities,
        class_agnostic=cfg.class_agnostic_nms,
    )
    objects = []
    ordinal = 0
    for det in kept:
        existing = gt_by_identity.get(id(det))
        if existing is not None:
            objects.append(existing)
        else:
            objects.append(ObjectAnnotation(
                object_id=NEW_ID_BASE + record.image_id * 10 ** 6 + ordinal,
                bbox=det.bbox,
                category=det.category,
                score=det.score,
                source_id=det.source_id,
            ))
            ordinal += 1
    objects.sort(key=lambda o: o.object_id)
    return replace(record, objects=tuple(objects),
                   provenance=record.provenance.with_stage(1))


def stage2_image(record: EnrichedImageAnnotation, cfg: PipelineConfig,
                 gateway: Gateway, tokenizer: Tokenizer) -> EnrichedImageAnnotation:
    """OCR extraction + verification, region descriptions, OCR-object matching."""
    if not record.provenance.stage_done(1):
        raise StageViolation(f"image {record.image_id} has not completed stage 1")
    dims = (record.width, record.height)
    ref = str(record.image_id)

    ocr = []
    if cfg.ocr_source:
        src = gateway.endpoint(cfg.ocr_source)
        raw = gateway.recognize_text(ref, dims, src)
        verifier_cfg = gateway.endpoint(cfg.ocr_verifier) if cfg.ocr_verifier else None
        for i, entry in enumerate(raw):
            entry = replace(entry, ocr_id=NEW_ID_BASE + record.image_id * 10 ** 6 + i)
            if verifier_cfg is not None:
                crop = enrichment.crop_with_context(dims, entry.bbox, cfg.context_ratio)
                crop_ref = f"{ref}:{crop.x:g},{crop.y:g},{crop.w:g},{crop.h:g}"

                def ask(_crop, text, _ref=crop_ref, _cfg=verifier_cfg):
                    return gateway.verify_text(_ref, text, _cfg)

                entry = enrichment.verify_ocr(entry, crop, ask)
            ocr.append(entry)

    objects = []
    for o in record.objects:
        if cfg.region_captioner:
            crop = enrichment.crop_with_context(dims, o.bbox, cfg.context_ratio)
            crop_ref = f"{ref}:{crop.x:g},{crop.y:g},{crop.w:g},{crop.h:g}"
            prompt = enrichment.build_region_prompt(o.category)
            desc = gateway.describe_region(
                crop_ref, prompt, gateway.endpoint(cfg.region_captioner)
            )
            o = replace(o, region_description=desc,
                        region_token_length=tokenizer.count(desc))
        objects.append(o)

    updated = replace(record, objects=tuple(objects), ocr=tuple(ocr))
    matches = enrichment.match_ocr_to_objects(updated.ocr, updated.objects)
    updated = enrichment.apply_matches(updated, matches)
    return replace(updated, provenance=updated.provenance.with_stage(2))


def stage3_image(record: EnrichedImageAnnotation, cfg: PipelineConfig,
                 gateway: Gateway, tokenizer: Tokenizer) -> EnrichedImageAnnotation:
    """Integrate the image's priors into one dense caption."""
    bundle = enrichment.build_bundle(record, cfg.max_simple_captions)
    message = enrichment.build_integration_prompt(bundle)
    if not cfg.integrator:
        raise ConfigError("no integrator endpoint configured")
    dense = gateway.integrate_caption(message, gateway.endpoint(cfg.integrator), tokenizer)
    return replace(record, dense_caption=dense,
                   provenance=record.provenance.with_stage(3))


# --- stage runner ---------------------------------------------------------

class PipelineRunner:
    def __init__(self, cfg: PipelineConfig, resume: bool = False,
                 dry_run: bool = False):
        self.cfg = cfg
        self.dry_run = dry_run
        self.tokenizer = get_tokenizer(cfg.tokenizer)
        clock = FakeClock(0.0) if dry_run else SystemClock()
        self.gateway = Gateway(cfg.endpoints, cache_dir=cfg.cache_dir,
                               clock=clock, dry_run=dry_run)
        os.makedirs(cfg.work_dir, exist_ok=True)
        chash = cfg.config_hash()
        if resume and os.path.exists(cfg.checkpoint_path):
            self.ckpt = Checkpoint.load(cfg.checkpoint_path, chash)
        elif resume:
            raise ConfigError(f"--resume given but no checkpoint at {cfg.checkpoint_path}")
        else:
            self.ckpt = Checkpoint(chash)

    def _stage_path(self, stage: int, partial: bool = False) -> str:
        suffix = ".partial.jsonl" if partial else ".jsonl"
        return os.path.join(self.cfg.work_dir, f"stage{stage}{suffix}")

    def ingest(self) -> DatasetHandle:
        path = self._stage_path(0)
        if os.path.exists(path) and 0 in self.ckpt.stages_done:
            return read_enriched(path, name=self.cfg.dataset_name)
        handle, report = load_coco(
            self.cfg.coco_instances,
            self.tokenizer,
            captions_path=self.cfg.coco_captions,
            name=self.cfg.dataset_name,
        )
        if self.cfg.vg_regions:
            vg = load_vg_regions(self.cfg.vg_regions)
            handle.source_manifest["vg_regions"] = {
                "path": self.cfg.vg_regions,
                "images": len(vg.regions),
                "skipped": vg.skipped,
            }
        handle.source_manifest["load_report"] = {
            "annotations_in": report.annotations_in,
            "loaded": report.loaded,
            "dropped": report.dropped,
            "clamped": report.clamped,
        }
        write_enriched(handle, path, tokenizer_id=self.cfg.tokenizer,
                       config_hash=self.ckpt.config_hash)
        self.ckpt.stages_done.add(0)
        self.ckpt.save(self.cfg.checkpoint_path)
        return handle

    def _process_one(self, stage: int, record: EnrichedImageAnnotation):
        try:
            if stage == 1:
                return stage1_image(record, self.cfg, self.gateway), None
            if stage == 2:
                return stage2_image(record, self.cfg, self.gateway, self.tokenizer), None
            return stage3_image(record, self.cfg, self.gateway, self.tokenizer), None
        except _FAILSOFT as e:
            return record, {"image_id": record.image_id, "stage": stage,
                            "error": type(e).__name__, "message": str(e)}

    def run_stage(self, stage: int, handle: DatasetHandle) -> DatasetHandle:
        """Run one stage over all images not yet completed in the checkpoint."""
        final_path = self._stage_path(stage)
        if stage in self.ckpt.stages_done and os.path.exists(final_path):
            return read_enriched(final_path, name=self.cfg.dataset_name)

        partial_path = self._stage_path(stage, partial=True)
        done: dict[int, EnrichedImageAnnotation] = {}
        if os.path.exists(partial_path):
            for r in read_enriched(partial_path).images:
                done[r.image_id] = r

        records = handle.sorted_images()
        pending = [r for r in records
                   if r.image_id not in self.ckpt.completed[stage]]
        batch_size = max(1, self.cfg.checkpoint_batch)
        with ThreadPoolExecutor(max_workers=self.cfg.worker_count) as pool, \
                open(partial_path, "ab") as partial:
            for start in range(0, len(pending), batch_size):
                batch = pending[start:start + batch_size]
                results = list(pool.map(lambda r: self._process_one(stage, r), batch))
                for record, failure in sorted(results, key=lambda t: t[0].image_id):
                    done[record.image_id] = record
                    self.ckpt.completed[stage].add(record.image_id)
                    if failure is not None:
                        self.ckpt.failures.append(failure)
                    partial.write(canonical_serialize(record) + b"\n")
                partial.flush()
                self.ckpt.save(self.cfg.checkpoint_path)

        merged = [done.get(r.image_id, r) for r in records]
        out = handle.replace_images(merged)
        write_enriched(out, final_path, tokenizer_id=self.cfg.tokenizer,
                       config_hash=self.ckpt.config_hash)
        self.ckpt.stages_done.add(stage)
        self.ckpt.save(self.cfg.checkpoint_path)
        if os.path.exists(partial_path):
            os.remove(partial_path)
        return out

    def export(self, handle: DatasetHandle) -> dict:
        manifest = write_enriched(handle, self.cfg.output_path,
                                  tokenizer_id=self.cfg.tokenizer,
                                  config_hash=self.ckpt.config_hash)
        manifest["failures"] = self.ckpt.failures
        with open(self.cfg.output_path + ".manifest.json", "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")
        return manifest


def run_all(cfg: PipelineConfig, resume: bool = False, dry_run: bool = False,
            stop_after_stage: int = 3, only_stage: Optional[int] = None) -> dict:
    """Ingest, run stages in order, export; returns the output manifest.

    `stop_after_stage` truncates the cascade (for staged runs and tests);
    `only_stage` runs a single stage and requires the previous one to be
    complete in the checkpoint.
    """
    runner = PipelineRunner(cfg, resume=resume, dry_run=dry_run)
    handle = runner.ingest()
    if only_stage is not None:
        if only_stage > 1 and (only_stage - 1) not in runner.ckpt.stages_done:
            raise StageViolation(
                f"stage {only_stage} requires stage {only_stage - 1} to be complete"
            )
        for stage in range(1, only_stage):
            handle = runner.run_stage(stage, handle)
        handle = runner.run_stage(only_stage, handle)
        return runner.export(handle)
    for stage in (1, 2, 3):
        if stage > stop_after_stage:
            break
        handle = runner.run_stage(stage, handle)
    return runner.export(handle)


# --- statistics -----------------------------------------------------------

def compute_stats(handle: DatasetHandle, tokenizer: Tokenizer) -> StatsReport:
    """Table-style dataset summary; averages over present items only."""
    num_boxes = 0
    num_ocr = 0
    dense_lengths: list[int] = []
    region_lengths: list[int] = []
    for r in handle.images:
        num_boxes += len(r.objects)
        num_ocr += len(r.ocr)
        if r.dense_caption is not None:
            dense_lengths.append(tokenizer.count(r.dense_caption.text))
        for o in r.objects:
            if o.region_description is not None:
                region_lengths.append(tokenizer.count(o.region_description))
    return StatsReport(
        num_images=len(handle.images),
        num_boxes=num_boxes,
        num_ocr_entries=num_ocr,
        atl_dense=sum(dense_lengths) / len(dense_lengths) if dense_lengths else 0.0,
        atl_region=sum(region_lengths) / len(region_lengths) if region_lengths else 0.0,
        dense_empty=not dense_lengths,
        region_empty=not region_lengths,
    )


def render_stats(report: StatsReport, handle: DatasetHandle) -> str:
    """Aligned text table with the standard comparison columns."""
    has_simple = any(r.simple_captions for r in handle.images)
    headers = ["Dataset", "Simple Cap", "Dense Cap", "Region Cap", "OCR",
               "#Images", "#Boxes", "ATL for Dense Cap", "ATL for Region Cap"]
    row = [
        handle.name,
        "yes" if has_simple else "-",
        "-" if report.dense_empty else "yes",
        "-" if report.region_empty else "yes",
        "yes" if report.num_ocr_entries else "-",
        str(report.num_images),
        str(report.num_boxes),
        "-" if report.dense_empty else f"{report.atl_dense:.2f}",
        "-" if report.region_empty else f"{report.atl_region:.2f}",
    ]
    widths = [max(len(h), len(v)) for h, v in zip(headers, row)]
    def fmt(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    return "\n".join([fmt(headers), fmt(["-" * w for w in widths]), fmt(row)])


def stats_json(report: StatsReport) -> dict:
    return {
        "num_images": report.num_images,
        "num_boxes": report.num_boxes,
        "num_ocr_entries": report.num_ocr_entries,
        "atl_dense": report.atl_dense,
        "atl_region": report.atl_region,
        "dense_empty": report.dense_empty,
        "region_empty": report.region_empty,
    }
