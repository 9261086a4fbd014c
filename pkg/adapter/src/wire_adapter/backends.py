"""Deterministic reference backends for every request kind.

Real deployments put model inference behind these five methods; this
reference implementation derives every answer from a keyed hash of the
request payload, so the service is a pure function of its input:
stateless, reproducible across processes, and cheap enough for
conformance testing.
"""

import base64
import binascii
import hashlib
import math
from pathlib import Path

_WORDS = (
    "amber", "basket", "cobble", "drift", "ember", "fallow", "gleam",
    "harbor", "inlet", "juniper", "kernel", "lattice", "meadow", "nimbus",
    "orchard", "pebble", "quill", "russet", "slate", "thicket", "umber",
    "vessel", "willow", "yonder",
)

MODEL_INFO = "reference-hash-backends-0.1"


class PayloadError(ValueError):
    """Schema-valid payload whose content cannot be used (HTTP 400)."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


def _digest(*parts: object) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return h.digest()


def _unit(*parts: object) -> float:
    """Deterministic float in [0, 1) keyed by the parts."""
    return int.from_bytes(_digest(*parts)[:8], "big") / 2.0**64


def _pick(count: int, *parts: object) -> list[str]:
    return [
        _WORDS[int.from_bytes(_digest(*parts, i)[:4], "big") % len(_WORDS)]
        for i in range(count)
    ]


def _rect_rle(width: int, height: int, x0: int, y0: int, x1: int, y1: int) -> list[int]:
    """Row-major alternating run lengths, background first."""
    counts: list[int] = []
    run_value = 0
    run_length = 0
    for row in range(height):
        for col in range(width):
            value = 1 if (y0 <= row < y1 and x0 <= col < x1) else 0
            if value == run_value:
                run_length += 1
            else:
                counts.append(run_length)
                run_value = value
                run_length = 1
    counts.append(run_length)
    return counts


class ReferenceBackends:
    """Hash-keyed implementations of the five inference operations."""

    model_info = MODEL_INFO
    embed_dim = 32
    segment_frame = (64, 48)  # width, height of the mask grid

    def caption(self, payload: dict) -> dict:
        image_id = payload["image_id"]
        template = payload["prompt_template"]
        slots = tuple(sorted(payload["slots"].items()))
        box = payload["box"]
        key = ("caption", image_id, template, slots, box)
        if template == "category_detect":
            offered = [
                name.strip()
                for name in payload["slots"].get("cls_list", "").split(",")
                if name.strip()
            ]
            texts = [
                name
                for i, name in enumerate(offered)
                if _unit(*key, "present", i, name) < 0.4
            ]
        elif template == "open_set":
            n = 2 + int(_unit(*key, "n") * 3.0)  # 2..4 descriptions
            texts = [" ".join(_pick(3 + i % 3, *key, "desc", i)) for i in range(n)]
        else:
            length = {"closed_short": 3, "closed_mid": 6, "closed_long": 10}[template]
            subject = payload["slots"].get("cls", "item")
            texts = [" ".join([subject] + _pick(length - 1, *key, "words"))]
        return {"texts": texts}

    def ground(self, payload: dict) -> dict:
        key = ("ground", payload["image_id"], payload["query_text"])
        n = 1 + int(_unit(*key, "n") * 3.0)  # 1..3 boxes
        boxes = []
        for i in range(n):
            x0 = _unit(*key, i, "x0") * 600.0
            y0 = _unit(*key, i, "y0") * 440.0
            w = 8.0 + _unit(*key, i, "w") * (640.0 - x0 - 8.0)
            h = 8.0 + _unit(*key, i, "h") * (480.0 - y0 - 8.0)
            confidence = 0.4 + _unit(*key, i, "conf") * 0.59
            boxes.append(
                {
                    "box": [round(x0, 2), round(y0, 2), round(x0 + w, 2), round(y0 + h, 2)],
                    "confidence": round(confidence, 4),
                }
            )
        boxes.sort(key=lambda b: -b["confidence"])
        return {"boxes": boxes}

    def similarity(self, payload: dict) -> dict:
        if "image_png_base64" in payload:
            try:
                image_bytes = base64.b64decode(payload["image_png_base64"], validate=True)
            except (binascii.Error, ValueError):
                raise PayloadError(
                    "image_png_base64 is not valid base64",
                    field="$.payload.image_png_base64",
                )
        else:
            try:
                image_bytes = Path(payload["image_path"]).read_bytes()
            except OSError as exc:
                raise PayloadError(
                    f"cannot read image_path: {exc}", field="$.payload.image_path"
                )
        image_key = hashlib.blake2b(image_bytes, digest_size=16).hexdigest()
        score = _unit("similarity", image_key, payload["text"])
        return {"score": round(score, 6)}

    def embed(self, payload: dict) -> dict:
        text = payload["text"]
        vector = [
            round(2.0 * _unit("embed", text, i) - 1.0, 9) for i in range(self.embed_dim)
        ]
        return {"vector": vector, "dimension": self.embed_dim}

    def segment(self, payload: dict) -> dict:
        width, height = self.segment_frame
        xs = sorted((payload["box"][0], payload["box"][2]))
        ys = sorted((payload["box"][1], payload["box"][3]))
        scale = min(
            1.0,
            (width - 1) / max(1.0, xs[1]),
            (height - 1) / max(1.0, ys[1]),
        )
        x0 = max(0, min(width - 1, math.floor(xs[0] * scale)))
        y0 = max(0, min(height - 1, math.floor(ys[0] * scale)))
        x1 = max(x0 + 1, min(width, math.ceil(xs[1] * scale)))
        y1 = max(y0 + 1, min(height, math.ceil(ys[1] * scale)))
        return {
            "counts": _rect_rle(width, height, x0, y0, x1, y1),
            "width": width,
            "height": height,
        }

    def handle(self, kind: str, payload: dict) -> dict:
        return getattr(self, kind)(payload)
