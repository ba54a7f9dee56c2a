"""Shared fixtures: synthetic COCO files and a fully-stubbed pipeline config.

The synthetic dataset keeps ground-truth boxes in the left half of each
640x480 image and the seeded stub detector in the right half, so detector
boxes never collide with ground truth and expected object counts are easy to
derive independently.
"""

from __future__ import annotations

import json
import random

import pytest

# OCR strings planted in the stub, keyed by image id. "13" and "Carwford"
# deliberately include an OCR-style misreading to exercise verification.
FIXTURE_OCR = {
    5: [{"bbox": [40, 40, 60, 20], "text": "13", "confidence": 0.95}],
    10: [{"bbox": [100, 200, 120, 30], "text": "Carwford", "confidence": 0.9}],
    15: [{"bbox": [350, 100, 90, 25], "text": "EXIT", "confidence": 0.8},
         {"bbox": [30, 300, 70, 22], "text": "OPEN 24H", "confidence": 0.7}],
}

CATEGORIES = [
    {"id": 1, "name": "person"},
    {"id": 2, "name": "car"},
    {"id": 3, "name": "sign"},
]


def make_coco_files(dirpath, n_images=50, seed=7):
    """Write instances.json + captions.json; returns their paths."""
    rng = random.Random(seed)
    images, annotations, captions = [], [], []
    ann_id = 1
    cap_id = 1
    for image_id in range(1, n_images + 1):
        images.append({
            "id": image_id,
            "file_name": f"img_{image_id:06d}.jpg",
            "width": 640,
            "height": 480,
        })
        for _ in range(rng.randint(1, 3)):
            w = rng.uniform(30, 120)
            h = rng.uniform(30, 120)
            x = rng.uniform(0, 280 - w) if w < 280 else 0
            y = rng.uniform(0, 480 - h)
            annotations.append({
                "id": ann_id,
                "image_id": image_id,
                "category_id": rng.choice([1, 2, 3]),
                "bbox": [round(x, 2), round(y, 2), round(w, 2), round(h, 2)],
                "area": round(w * h, 2),
                "iscrowd": 0,
            })
            ann_id += 1
        for k in range(2):
            captions.append({
                "id": cap_id,
                "image_id": image_id,
                "caption": f"a photo number {image_id}-{k} of an outdoor scene",
            })
            cap_id += 1
    instances = {"images": images, "annotations": annotations,
                 "categories": CATEGORIES}
    instances_path = str(dirpath / "instances.json")
    captions_path = str(dirpath / "captions.json")
    with open(instances_path, "w") as f:
        json.dump(instances, f)
    with open(captions_path, "w") as f:
        json.dump({"annotations": captions}, f)
    return instances_path, captions_path


def stub_endpoints(rpm=1_000_000):
    """Endpoint config dicts for a fully-stubbed run."""
    ocr_by_image = {str(k): v for k, v in FIXTURE_OCR.items()}
    common = {"requests_per_minute": rpm, "max_in_flight": 32}
    return {
        "det-a": {"base_url": "stub:detector", **common,
                  "stub": {"seeded": {"per_image": 2,
                                      "region": [330, 20, 620, 460]}}},
        "ocr-main": {"base_url": "stub:ocr", **common,
                     "stub": {"by_image": ocr_by_image}},
        "region-cap": {"base_url": "stub:captioner", **common},
        "ocr-verify": {"base_url": "stub:verifier", **common,
                       "stub": {"mode": "echo"}},
        "integrate": {"base_url": "stub:integrator", **common},
    }


def make_config_doc(dirpath, instances_path, captions_path, **overrides):
    doc = {
        "dataset_name": "fixture",
        "coco_instances": instances_path,
        "coco_captions": captions_path,
        "work_dir": str(dirpath / "work"),
        "output_path": str(dirpath / "enriched.jsonl"),
        "cache_dir": str(dirpath / "cache"),
        "endpoints": stub_endpoints(),
        "detector_sources": ["det-a"],
        "ocr_source": "ocr-main",
        "region_captioner": "region-cap",
        "ocr_verifier": "ocr-verify",
        "integrator": "integrate",
        "worker_count": 4,
        "checkpoint_batch": 16,
    }
    doc.update(overrides)
    return doc


@pytest.fixture
def coco_files(tmp_path):
    return make_coco_files(tmp_path)


@pytest.fixture
def fixture_config(tmp_path, coco_files):
    from fullanno.pipeline import PipelineConfig

    instances, captions = coco_files
    return PipelineConfig.from_json(make_config_doc(tmp_path, instances, captions))
