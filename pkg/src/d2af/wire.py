"""JSON-over-HTTP wire protocol shared by the pipeline and model servers.

Every model call crosses this boundary as a versioned envelope::

    {"schema": "d2af_wire_v1", "request_id": "...", "kind": "...", "payload": {...}}

Responses echo the request_id and add ``model_info``.  The JSON Schemas
for all five request/response pairs ship as a package data file and are
the single compatibility contract: in-process mock backends, the HTTP
clients here, and any external server all validate against the same
schemas.  A fixed conformance-vector file exercises each kind.
"""

from __future__ import annotations

import base64
import json
import uuid
from functools import lru_cache
from importlib import resources
from typing import Callable

import jsonschema
import requests

from .clients.contracts import (
    BoundingBox,
    CaptionRequest,
    EmbeddingResult,
    GroundingRequest,
    GroundingResult,
    RleMask,
    ScoredBox,
    SimilarityRequest,
)
from .errors import BackendError, DataError, ProtocolError
from .imageio import decode_png, encode_png

WIRE_SCHEMA = "d2af_wire_v1"
KINDS = ("caption", "ground", "similarity", "embed", "segment")

# Images up to this many raw bytes travel inline as base64 PNG; larger
# payloads must be passed by shared filesystem path.
INLINE_IMAGE_LIMIT = 8 * 1024 * 1024

_CLIENT_KIND = {
    "captioner": "caption",
    "grounder": "ground",
    "grounder_lmm": "ground",
    "scorer": "similarity",
    "embedder": "embed",
    "segmenter": "segment",
}


# --------------------------------------------------------------------------
# schema construction


def _box_schema() -> dict:
    return {
        "type": "array",
        "items": {"type": "number"},
        "minItems": 4,
        "maxItems": 4,
    }


def _payload_schemas() -> dict[str, dict[str, dict]]:
    box = _box_schema()
    return {
        "caption": {
            "request": {
                "type": "object",
                "properties": {
                    "image_id": {"type": "string", "minLength": 1},
                    "prompt_template": {
                        "enum": [
                            "category_detect",
                            "closed_short",
                            "closed_mid",
                            "closed_long",
                            "open_set",
                        ]
                    },
                    "slots": {
                        "type": "object",
                        "additionalProperties": {"type": "string"},
                    },
                    "box": {"oneOf": [box, {"type": "null"}]},
                },
                "required": ["image_id", "prompt_template", "slots", "box"],
                "additionalProperties": False,
            },
            "response": {
                "type": "object",
                "properties": {
                    "texts": {"type": "array", "items": {"type": "string"}}
                },
                "required": ["texts"],
                "additionalProperties": False,
            },
        },
        "ground": {
            "request": {
                "type": "object",
                "properties": {
                    "image_id": {"type": "string", "minLength": 1},
                    "query_text": {"type": "string", "minLength": 1},
                },
                "required": ["image_id", "query_text"],
                "additionalProperties": False,
            },
            "response": {
                "type": "object",
                "properties": {
                    "boxes": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "properties": {
                                "box": box,
                                "confidence": {
                                    "type": "number",
                                    "minimum": 0,
                                    "maximum": 1,
                                },
                            },
                            "required": ["box", "confidence"],
                            "additionalProperties": False,
                        },
                    }
                },
                "required": ["boxes"],
                "additionalProperties": False,
            },
        },
        "similarity": {
            "request": {
                "type": "object",
                "properties": {
                    "text": {"type": "string", "minLength": 1},
                    "image_png_base64": {"type": "string", "minLength": 1},
                    "image_path": {"type": "string", "minLength": 1},
                },
                "required": ["text"],
                "oneOf": [
                    {
                        "required": ["image_png_base64"],
                        "not": {"required": ["image_path"]},
                    },
                    {
                        "required": ["image_path"],
                        "not": {"required": ["image_png_base64"]},
                    },
                ],
                "additionalProperties": False,
            },
            "response": {
                "type": "object",
                "properties": {"score": {"type": "number"}},
                "required": ["score"],
                "additionalProperties": False,
            },
        },
        "embed": {
            "request": {
                "type": "object",
                "properties": {"text": {"type": "string", "minLength": 1}},
                "required": ["text"],
                "additionalProperties": False,
            },
            "response": {
                "type": "object",
                "properties": {
                    "vector": {
                        "type": "array",
                        "items": {"type": "number"},
                        "minItems": 1,
                    },
                    "dimension": {"type": "integer", "minimum": 1},
                },
                "required": ["vector", "dimension"],
                "additionalProperties": False,
            },
        },
        "segment": {
            "request": {
                "type": "object",
                "properties": {
                    "image_id": {"type": "string", "minLength": 1},
                    "box": box,
                    "text": {"type": "string"},
                },
                "required": ["image_id", "box", "text"],
                "additionalProperties": False,
            },
            "response": {
                "type": "object",
                "properties": {
                    "counts": {
                        "type": "array",
                        "items": {"type": "integer", "minimum": 0},
                    },
                    "width": {"type": "integer", "minimum": 1},
                    "height": {"type": "integer", "minimum": 1},
                },
                "required": ["counts", "width", "height"],
                "additionalProperties": False,
            },
        },
    }


def _envelope_schema(kind: str, payload_schema: dict, response: bool) -> dict:
    properties = {
        "schema": {"const": WIRE_SCHEMA},
        "request_id": {"type": "string", "minLength": 1},
        "kind": {"const": kind},
        "payload": payload_schema,
    }
    required = ["schema", "request_id", "kind", "payload"]
    if response:
        properties["model_info"] = {"type": "string", "minLength": 1}
        required.append("model_info")
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "type": "object",
        "properties": properties,
        "required": required,
        "additionalProperties": False,
    }


def build_wire_schemas() -> dict:
    """The complete schema document, as shipped in the package data."""
    payloads = _payload_schemas()
    return {
        "schema_version": WIRE_SCHEMA,
        "kinds": list(KINDS),
        "request": {
            kind: _envelope_schema(kind, payloads[kind]["request"], response=False)
            for kind in KINDS
        },
        "response": {
            kind: _envelope_schema(kind, payloads[kind]["response"], response=True)
            for kind in KINDS
        },
        "error": {
            "$schema": "https://json-schema.org/draft/2020-12/schema",
            "type": "object",
            "properties": {
                "schema": {"const": WIRE_SCHEMA},
                "request_id": {"type": ["string", "null"]},
                "error": {
                    "type": "object",
                    "properties": {
                        "message": {"type": "string", "minLength": 1},
                        "field": {"type": ["string", "null"]},
                    },
                    "required": ["message"],
                    "additionalProperties": False,
                },
            },
            "required": ["schema", "request_id", "error"],
            "additionalProperties": False,
        },
    }


@lru_cache(maxsize=1)
def load_wire_schemas() -> dict:
    """The packaged schema document (what external consumers read)."""
    text = resources.files("d2af").joinpath("data/wire_schemas.json").read_text("utf-8")
    return json.loads(text)


@lru_cache(maxsize=32)
def _validator(direction: str, kind: str) -> jsonschema.Draft202012Validator:
    schemas = load_wire_schemas()
    if kind not in schemas[direction]:
        raise ProtocolError(f"unknown wire kind {kind!r}")
    return jsonschema.Draft202012Validator(schemas[direction][kind])


def validate_envelope(envelope: dict, direction: str, kind: str) -> None:
    """Check one envelope against the schema; name the offending field."""
    if direction not in ("request", "response"):
        raise ProtocolError(f"direction must be request or response, got {direction!r}")
    errors = sorted(
        _validator(direction, kind).iter_errors(envelope),
        key=lambda e: len(e.json_path),
    )
    if errors:
        err = errors[-1]  # deepest path names the actual offending field
        raise ProtocolError(f"invalid {kind} {direction} at {err.json_path}: {err.message}")


def make_request(kind: str, payload: dict, request_id: str | None = None) -> dict:
    if kind not in KINDS:
        raise ProtocolError(f"unknown wire kind {kind!r}")
    return {
        "schema": WIRE_SCHEMA,
        "request_id": request_id if request_id is not None else str(uuid.uuid4()),
        "kind": kind,
        "payload": payload,
    }


def make_response(request_envelope: dict, payload: dict, model_info: str) -> dict:
    return {
        "schema": WIRE_SCHEMA,
        "request_id": request_envelope["request_id"],
        "kind": request_envelope["kind"],
        "payload": payload,
        "model_info": model_info,
    }


# --------------------------------------------------------------------------
# payload (de)serialization


def caption_payload(request: CaptionRequest) -> dict:
    return {
        "image_id": request.image_id,
        "prompt_template": request.prompt_template,
        "slots": dict(request.slots),
        "box": request.box.as_list() if request.box is not None else None,
    }


def caption_request_from_payload(payload: dict) -> CaptionRequest:
    box = payload["box"]
    return CaptionRequest(
        image_id=payload["image_id"],
        prompt_template=payload["prompt_template"],
        slots=dict(payload["slots"]),
        box=BoundingBox.from_list(box) if box is not None else None,
    )


def ground_payload(request: GroundingRequest) -> dict:
    return {"image_id": request.image_id, "query_text": request.query_text}


def ground_request_from_payload(payload: dict) -> GroundingRequest:
    return GroundingRequest(
        image_id=payload["image_id"], query_text=payload["query_text"]
    )


def grounding_result_payload(result: GroundingResult) -> dict:
    return {
        "boxes": [
            {"box": sb.box.as_list(), "confidence": sb.confidence}
            for sb in result.boxes
        ]
    }


def grounding_result_from_payload(payload: dict) -> GroundingResult:
    return GroundingResult(
        boxes=tuple(
            ScoredBox(box=BoundingBox.from_list(b["box"]), confidence=b["confidence"])
            for b in payload["boxes"]
        )
    )


def similarity_payload(request: SimilarityRequest) -> dict:
    png = encode_png(request.image_variant)
    if len(png) > INLINE_IMAGE_LIMIT:
        raise ProtocolError(
            f"similarity image is {len(png)} bytes; over the "
            f"{INLINE_IMAGE_LIMIT}-byte inline limit, pass it by shared path"
        )
    return {
        "text": request.text,
        "image_png_base64": base64.b64encode(png).decode("ascii"),
    }


def similarity_request_from_payload(payload: dict) -> SimilarityRequest:
    if "image_png_base64" in payload:
        try:
            png = base64.b64decode(payload["image_png_base64"], validate=True)
        except (ValueError, TypeError) as exc:
            raise ProtocolError(f"image_png_base64 is not valid base64: {exc}") from exc
        image = decode_png(png)
    else:
        try:
            image = decode_png(open(payload["image_path"], "rb").read())
        except OSError as exc:
            raise ProtocolError(f"cannot read image_path: {exc}") from exc
    return SimilarityRequest(image_variant=image, text=payload["text"])


def segment_payload(image_id: str, box: BoundingBox, text: str = "") -> dict:
    return {"image_id": image_id, "box": box.as_list(), "text": text}


def mask_from_payload(payload: dict) -> RleMask:
    return RleMask(
        counts=tuple(payload["counts"]),
        width=payload["width"],
        height=payload["height"],
    )


def mask_payload(mask: RleMask) -> dict:
    return {
        "counts": list(mask.counts),
        "width": mask.width,
        "height": mask.height,
    }


# --------------------------------------------------------------------------
# in-process dispatcher (bundle behind the wire contract)


class Dispatcher:
    """Serve a ClientBundle through wire envelopes, without a network.

    This is how the pipeline's own backends prove they speak the wire
    contract: tests run the conformance vectors against a Dispatcher
    wrapping the mock bundle, and any HTTP server must behave the same.
    """

    def __init__(self, bundle, model_info: str = "d2af-mock"):
        self.bundle = bundle
        self.model_info = model_info

    def handle(self, envelope: dict) -> dict:
        if not isinstance(envelope, dict):
            raise ProtocolError("request must be a JSON object")
        kind = envelope.get("kind")
        if kind not in KINDS:
            raise ProtocolError(f"unknown wire kind {kind!r}")
        validate_envelope(envelope, "request", kind)
        payload = envelope["payload"]
        try:
            out = getattr(self, f"_handle_{kind}")(payload)
        except DataError as exc:
            raise ProtocolError(f"undecodable {kind} payload: {exc}") from exc
        response = make_response(envelope, out, self.model_info)
        validate_envelope(response, "response", kind)
        return response

    def _handle_caption(self, payload: dict) -> dict:
        texts = self.bundle.captioner.generate(caption_request_from_payload(payload))
        return {"texts": list(texts)}

    def _handle_ground(self, payload: dict) -> dict:
        result = self.bundle.grounder.ground(ground_request_from_payload(payload))
        return grounding_result_payload(result)

    def _handle_similarity(self, payload: dict) -> dict:
        score = self.bundle.scorer.similarity(similarity_request_from_payload(payload))
        return {"score": float(score)}

    def _handle_embed(self, payload: dict) -> dict:
        result = self.bundle.embedder.embed(payload["text"])
        return {
            "vector": [float(v) for v in result.vector],
            "dimension": int(result.dimension),
        }

    def _handle_segment(self, payload: dict) -> dict:
        if self.bundle.segmenter is None:
            raise BackendError("no segmenter configured")
        mask = self.bundle.segmenter.segment(
            payload["image_id"],
            BoundingBox.from_list(payload["box"]),
            payload["text"],
        )
        return mask_payload(mask)


# --------------------------------------------------------------------------
# HTTP clients


class _HttpBase:
    """Shared POST/validate/echo-check plumbing for all five clients."""

    kind: str

    def __init__(self, base_url: str, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.session = requests.Session()

    def call(self, payload: dict) -> dict:
        request = make_request(self.kind, payload)
        validate_envelope(request, "request", self.kind)
        url = f"{self.base_url}/{self.kind}"
        try:
            http = self.session.post(url, json=request, timeout=self.timeout)
        except requests.RequestException as exc:
            raise BackendError(f"POST {url} failed: {exc}") from exc
        if http.status_code == 400:
            raise ProtocolError(f"server rejected {self.kind} request: {http.text}")
        if http.status_code != 200:
            raise BackendError(
                f"POST {url} returned {http.status_code}: {http.text[:500]}"
            )
        try:
            response = http.json()
        except ValueError as exc:
            raise ProtocolError(f"non-JSON response from {url}: {exc}") from exc
        validate_envelope(response, "response", self.kind)
        if response["request_id"] != request["request_id"]:
            raise ProtocolError(
                f"response echoes request_id {response['request_id']!r}, "
                f"expected {request['request_id']!r}"
            )
        return response["payload"]


class HttpCaptioner(_HttpBase):
    kind = "caption"

    def generate(self, request: CaptionRequest) -> list[str]:
        return list(self.call(caption_payload(request))["texts"])


class HttpGrounder(_HttpBase):
    kind = "ground"

    def ground(self, request: GroundingRequest) -> GroundingResult:
        return grounding_result_from_payload(self.call(ground_payload(request)))


class HttpScorer(_HttpBase):
    kind = "similarity"

    def similarity(self, request: SimilarityRequest) -> float:
        return float(self.call(similarity_payload(request))["score"])


class HttpEmbedder(_HttpBase):
    kind = "embed"

    def embed(self, text: str) -> EmbeddingResult:
        import numpy as np

        payload = self.call({"text": text})
        return EmbeddingResult(
            vector=np.asarray(payload["vector"], dtype=np.float64),
            dimension=payload["dimension"],
        )


class HttpSegmenter(_HttpBase):
    kind = "segment"

    def segment(self, image_id: str, box: BoundingBox, text: str = "") -> RleMask:
        return mask_from_payload(self.call(segment_payload(image_id, box, text)))


_HTTP_CLASSES = {
    "caption": HttpCaptioner,
    "ground": HttpGrounder,
    "similarity": HttpScorer,
    "embed": HttpEmbedder,
    "segment": HttpSegmenter,
}


def http_client(client_name: str, base_url: str):
    """An HTTP-backed client for one ClientBundle slot."""
    kind = _CLIENT_KIND.get(client_name)
    if kind is None:
        raise ProtocolError(f"unknown client name {client_name!r}")
    return _HTTP_CLASSES[kind](base_url)


# --------------------------------------------------------------------------
# conformance vectors


@lru_cache(maxsize=1)
def load_wire_vectors() -> tuple[dict, ...]:
    text = resources.files("d2af").joinpath("data/wire_vectors.json").read_text("utf-8")
    doc = json.loads(text)
    if doc.get("schema_version") != WIRE_SCHEMA:
        raise ProtocolError(f"unsupported vector file version {doc.get('schema_version')!r}")
    return tuple(doc["vectors"])


class ConformanceFailure(Exception):
    """One conformance vector did not hold; message lists the reasons."""


def check_vector(handler: Callable[[dict], dict], vector: dict) -> list[str]:
    """Run one vector through ``handler``; empty result means conformant."""
    failures: list[str] = []
    request = vector["request"]
    kind = vector["kind"]
    try:
        response = handler(json.loads(json.dumps(request)))
    except Exception as exc:  # a conformance run reports, never crashes
        return [f"handler raised {type(exc).__name__}: {exc}"]
    try:
        validate_envelope(response, "response", kind)
    except ProtocolError as exc:
        failures.append(str(exc))
        return failures
    if response["request_id"] != request["request_id"]:
        failures.append(
            f"request_id not echoed: sent {request['request_id']!r}, "
            f"got {response['request_id']!r}"
        )
    if response["kind"] != kind:
        failures.append(f"kind not echoed: got {response['kind']!r}")
    if kind == "embed":
        second = handler(json.loads(json.dumps(request)))
        if second["payload"] != response["payload"]:
            failures.append("embed is not deterministic: two calls differ")
    return failures


def run_conformance(
    handler: Callable[[dict], dict],
    vectors: tuple[dict, ...] | None = None,
) -> dict[str, list[str]]:
    """All failing vectors by name; an empty dict means full conformance."""
    vectors = vectors if vectors is not None else load_wire_vectors()
    report: dict[str, list[str]] = {}
    for vector in vectors:
        failures = check_vector(handler, vector)
        if failures:
            report[vector["name"]] = failures
    return report


def generate_wire_vectors(seed: int = 11) -> list[dict]:
    """Build the shipped 20-vector file from the seeded mock backend.

    Four vectors per kind; the recorded responses come from a Dispatcher
    over the mock bundle, so the file doubles as worked examples of the
    protocol.
    """
    import numpy as np

    from .clients.mock import CorpusSpec, MockCorpus

    corpus = MockCorpus(CorpusSpec(images=3, seed=seed))
    bundle = corpus.clients()
    dispatcher = Dispatcher(bundle)
    source = corpus.image_source()
    ids = source.ids()
    img_a, img_b = ids[0], ids[1]
    scene_a = corpus.scene(img_a)
    closed_a = scene_a.closed_object
    closed_b = corpus.scene(img_b).closed_object
    cat_list = ", ".join(corpus.category_list())

    def box_slot(box: BoundingBox) -> str:
        return "[" + ",".join(str(int(round(v))) for v in box.as_list()) + "]"

    image_a = source.load(img_a)
    x0, y0, x1, y1 = (int(round(v)) for v in closed_a.box.as_list())
    crop = np.ascontiguousarray(image_a[y0:y1, x0:x1])

    requests_by_kind: dict[str, list[tuple[str, dict]]] = {
        "caption": [
            (
                "caption-detect",
                caption_payload(
                    CaptionRequest(
                        image_id=img_a,
                        prompt_template="category_detect",
                        slots={"cls_list": cat_list},
                    )
                ),
            ),
            (
                "caption-closed-short",
                caption_payload(
                    CaptionRequest(
                        image_id=img_a,
                        prompt_template="closed_short",
                        slots={"box": box_slot(closed_a.box), "cls": closed_a.category},
                        box=closed_a.box,
                    )
                ),
            ),
            (
                "caption-closed-long",
                caption_payload(
                    CaptionRequest(
                        image_id=img_b,
                        prompt_template="closed_long",
                        slots={"box": box_slot(closed_b.box), "cls": closed_b.category},
                        box=closed_b.box,
                    )
                ),
            ),
            (
                "caption-open",
                caption_payload(
                    CaptionRequest(image_id=img_b, prompt_template="open_set", slots={})
                ),
            ),
        ],
        "ground": [
            ("ground-category-a", ground_payload(GroundingRequest(img_a, closed_a.category))),
            (
                "ground-caption-a",
                ground_payload(
                    GroundingRequest(img_a, scene_a.closed_captions["short"])
                ),
            ),
            (
                "ground-category-b",
                ground_payload(
                    GroundingRequest(img_b, corpus.scene(img_b).closed_object.category)
                ),
            ),
            (
                "ground-caption-b",
                ground_payload(
                    GroundingRequest(img_b, corpus.scene(img_b).closed_captions["mid"])
                ),
            ),
        ],
        "similarity": [
            (
                "similarity-crop-match",
                similarity_payload(
                    SimilarityRequest(crop, scene_a.closed_captions["short"])
                ),
            ),
            (
                "similarity-crop-free",
                similarity_payload(SimilarityRequest(crop, "a plain gray shape")),
            ),
            (
                "similarity-full-frame",
                similarity_payload(
                    SimilarityRequest(image_a, scene_a.closed_captions["long"])
                ),
            ),
            (
                "similarity-tiny",
                similarity_payload(
                    SimilarityRequest(
                        np.full((8, 8, 3), 128, dtype=np.uint8), "small level patch"
                    )
                ),
            ),
        ],
        "embed": [
            ("embed-short", {"text": scene_a.closed_captions["short"]}),
            ("embed-long", {"text": scene_a.closed_captions["long"]}),
            ("embed-open", {"text": corpus.scene(img_b).open_descriptions[1]}),
            ("embed-repeat", {"text": scene_a.closed_captions["short"]}),
        ],
        "segment": [
            ("segment-closed-a", segment_payload(img_a, closed_a.box)),
            (
                "segment-novel-a",
                segment_payload(
                    img_a, scene_a.novel_object.box, scene_a.open_descriptions[1]
                ),
            ),
            (
                "segment-closed-b",
                segment_payload(img_b, corpus.scene(img_b).closed_object.box),
            ),
            ("segment-corner", segment_payload(img_a, BoundingBox(0, 0, 4, 4))),
        ],
    }

    vectors = []
    for kind in KINDS:
        for index, (name, payload) in enumerate(requests_by_kind[kind]):
            request = make_request(kind, payload, request_id=f"vec-{kind}-{index:02d}")
            validate_envelope(request, "request", kind)
            response = dispatcher.handle(json.loads(json.dumps(request)))
            vectors.append(
                {"name": name, "kind": kind, "request": request, "response": response}
            )
    return vectors
