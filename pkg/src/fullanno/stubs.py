"""Deterministic in-process stand-ins for the external expert models.

An endpoint whose base_url is "stub:<kind>" is served by StubTransport instead
of HTTP. Stubs answer in the same wire shapes as live endpoints and run
through the same gateway machinery (cache, limiter, retries), so the whole
pipeline is bit-reproducible with them. Behavior is configured through the
endpoint's "stub" options dict:

stub:detector   {"detections": [...]}            same canned boxes per image
                {"by_image": {"<ref>": [...]}}   canned boxes per image ref
                {"seeded": {"per_image": N}}     jittered boxes from the ref
stub:ocr        {"entries": [...]} or {"by_image": {...}}
stub:captioner  {"mode": "echo"}                 caption derived from prompt
stub:verifier   {"mode": "echo" | "empty", "corrections": {...}}
stub:integrator {"mode": "concat"}               joins bundle facts; includes
                                                 every OCR string verbatim
"""

from __future__ import annotations

import hashlib
import re

from .errors import ConfigError
from .gateway import EndpointConfig


def _seed(ref: str) -> int:
    return int.from_bytes(hashlib.sha256(ref.encode("utf-8")).digest()[:4], "big")


def _text_part(payload: dict) -> str:
    content = payload["messages"][-1]["content"]
    if isinstance(content, str):
        return content
    for part in content:
        if part.get("type") == "text":
            return part["text"]
    return ""


class StubTransport:
    def send(self, cfg: EndpointConfig, payload: dict) -> dict:
        kind = cfg.base_url[len("stub:"):]
        handler = getattr(self, f"_{kind}", None)
        if handler is None:
            raise ConfigError(f"unknown stub kind {cfg.base_url!r}")
        return handler(cfg.stub, payload)

    def _detector(self, opts: dict, payload: dict) -> dict:
        ref = payload["image_ref"]
        if "by_image" in opts:
            return {"detections": opts["by_image"].get(ref, [])}
        if "detections" in opts:
            return {"detections": opts["detections"]}
        seeded = opts.get("seeded", {})
        per_image = seeded.get("per_image", 2)
        categories = seeded.get("categories", ["sign", "car", "person"])
        region = seeded.get("region", [0, 0] + payload["image_size"])
        x0, y0, rw, rh = region[0], region[1], region[2] - region[0], region[3] - region[1]
        s = _seed(ref)
        dets = []
        for i in range(per_image):
            # tile the region so stub boxes never overlap each other
            col = i % 2
            row = i // 2
            jx = (s >> (8 * i)) % 16
            jy = (s >> (8 * i + 4)) % 16
            w = rw / 2 * 0.6
            h = rh / ((per_image + 1) // 2) * 0.6
            x = x0 + col * rw / 2 + jx
            y = y0 + row * rh / ((per_image + 1) // 2) + jy
            dets.append({
                "bbox": [x, y, w, h],
                "category": categories[(s + i) % len(categories)],
                "score": 0.5 + ((s >> i) % 50) / 100.0,
            })
        return {"detections": dets}

    def _ocr(self, opts: dict, payload: dict) -> dict:
        ref = payload["image_ref"]
        if "by_image" in opts:
            return {"entries": opts["by_image"].get(ref, [])}
        return {"entries": opts.get("entries", [])}

    def _captioner(self, opts: dict, payload: dict) -> dict:
        prompt = _text_part(payload)
        m = re.search(r"saw a (.+?)\. Please", prompt)
        subject = m.group(1) if m else "scene"
        text = f"A {subject} occupies this part of the image."
        return {"choices": [{"message": {"content": text}}]}

    def _verifier(self, opts: dict, payload: dict) -> dict:
        mode = opts.get("mode", "echo")
        if mode == "empty":
            return {"choices": [{"message": {"content": ""}}]}
        prompt = _text_part(payload)
        m = re.search(r'read the text "(.*)" in this image region', prompt, re.S)
        text = m.group(1) if m else ""
        text = opts.get("corrections", {}).get(text, text)
        return {"choices": [{"message": {"content": text}}]}

    def _integrator(self, opts: dict, payload: dict) -> dict:
        content = _text_part(payload)
        cats, texts, descs, caps = [], [], [], []
        section = None
        for line in content.splitlines():
            if line.endswith(":") and not line.startswith("- "):
                section = line
                continue
            if not line.startswith("- ") or line == "- (none)":
                continue
            item = line[2:]
            if section == "Objects:":
                cats.append(item.split(" @ ")[0])
            elif section == "Text in image (OCR):":
                m = re.match(r'"(.*)" \([^)]*\)$', item)
                if m:
                    texts.append(m.group(1))
            elif section == "Region descriptions:":
                descs.append(item.split(": ", 1)[-1])
            elif section == "Reference captions:":
                caps.append(item)
        parts = []
        if cats:
            parts.append("The image shows " + ", ".join(cats) + ".")
        if caps:
            parts.append(" ".join(caps) + ".")
        if descs:
            parts.append(" ".join(descs))
        if texts:
            parts.append("Visible text includes " + ", ".join(f'"{t}"' for t in texts) + ".")
        return {"choices": [{"message": {"content": " ".join(parts)}}]}
