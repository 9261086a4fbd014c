"""Conformance and error-path tests for the adapter service.

The conformance section replays the shared vector file: every recorded
request must get a schema-valid 200 response with the request_id and
kind echoed, and the embed route must be deterministic.
"""

import copy
import json

import pytest
from fastapi.testclient import TestClient

from wire_adapter.assets import (
    KINDS,
    SCHEMA_VERSION,
    AssetError,
    find_assets_dir,
    load_schemas,
    load_vectors,
    validator,
)
from wire_adapter.backends import ReferenceBackends, _rect_rle
from wire_adapter.service import create_app

VECTORS = load_vectors()
VECTOR_IDS = [v["name"] for v in VECTORS]


@pytest.fixture(scope="module")
def client() -> TestClient:
    return TestClient(create_app())


def assert_error_body(reply, status: int, request_id: str | None):
    assert reply.status_code == status, reply.text
    body = reply.json()
    validator("error", "").validate(body)
    assert body["schema"] == SCHEMA_VERSION
    assert body["request_id"] == request_id
    return body


class TestAssets:
    def test_assets_dir_found_by_walking_up(self):
        path = find_assets_dir()
        assert (path / "wire_schemas.json").is_file()
        assert (path / "wire_vectors.json").is_file()

    def test_explicit_bad_dir_rejected(self, tmp_path):
        with pytest.raises(AssetError):
            find_assets_dir(tmp_path)

    def test_schema_file_lists_all_kinds(self):
        schemas = load_schemas()
        assert tuple(schemas["kinds"]) == KINDS
        for direction in ("request", "response"):
            assert sorted(schemas[direction]) == sorted(KINDS)

    def test_vector_file_covers_every_kind(self):
        by_kind = {}
        for vector in VECTORS:
            by_kind.setdefault(vector["request"]["kind"], []).append(vector["name"])
        assert len(VECTORS) == 20
        assert {kind: len(names) for kind, names in by_kind.items()} == {
            kind: 4 for kind in KINDS
        }


class TestConformance:
    @pytest.mark.parametrize("vector", VECTORS, ids=VECTOR_IDS)
    def test_vector_round_trip(self, client, vector):
        request = copy.deepcopy(vector["request"])
        kind = request["kind"]
        reply = client.post(f"/{kind}", json=request)
        assert reply.status_code == 200, reply.text
        body = reply.json()
        validator("response", kind).validate(body)
        assert body["request_id"] == request["request_id"]
        assert body["kind"] == kind
        assert body["model_info"]

    def test_whole_suite_has_no_failures(self, client):
        failures = {}
        for vector in VECTORS:
            request = vector["request"]
            kind = request["kind"]
            problems = []
            reply = client.post(f"/{kind}", json=request)
            if reply.status_code != 200:
                problems.append(f"status {reply.status_code}")
            else:
                body = reply.json()
                errors = list(validator("response", kind).iter_errors(body))
                problems += [e.message for e in errors]
                if body.get("request_id") != request["request_id"]:
                    problems.append("request_id not echoed")
                if body.get("kind") != kind:
                    problems.append("kind not echoed")
                if kind == "embed":
                    again = client.post(f"/{kind}", json=request).json()
                    if again.get("payload") != body.get("payload"):
                        problems.append("embed is not deterministic")
            if problems:
                failures[vector["name"]] = problems
        assert failures == {}

    def test_embed_depends_only_on_text(self, client):
        by_name = {v["name"]: v["request"] for v in VECTORS}
        short = by_name["embed-short"]
        repeat = by_name["embed-repeat"]
        assert short["payload"]["text"] == repeat["payload"]["text"]
        assert short["request_id"] != repeat["request_id"]
        a = client.post("/embed", json=short).json()
        b = client.post("/embed", json=repeat).json()
        assert a["payload"] == b["payload"]
        assert a["request_id"] != b["request_id"]

    @pytest.mark.parametrize("vector", VECTORS, ids=VECTOR_IDS)
    def test_service_is_stateless(self, client, vector):
        request = vector["request"]
        kind = request["kind"]
        first = client.post(f"/{kind}", json=request)
        second = client.post(f"/{kind}", json=request)
        assert first.status_code == second.status_code == 200
        assert first.json() == second.json()


class TestBackendOutputs:
    def test_embed_dimension_matches_vector(self, client):
        request = next(v for v in VECTORS if v["request"]["kind"] == "embed")["request"]
        payload = client.post("/embed", json=request).json()["payload"]
        assert payload["dimension"] == len(payload["vector"]) == ReferenceBackends.embed_dim
        assert all(-1.0 <= x <= 1.0 for x in payload["vector"])

    def test_ground_boxes_are_ordered_and_well_formed(self, client):
        request = next(v for v in VECTORS if v["request"]["kind"] == "ground")["request"]
        payload = client.post("/ground", json=request).json()["payload"]
        assert 1 <= len(payload["boxes"]) <= 3
        confidences = [b["confidence"] for b in payload["boxes"]]
        assert confidences == sorted(confidences, reverse=True)
        for scored in payload["boxes"]:
            x0, y0, x1, y1 = scored["box"]
            assert x0 < x1 and y0 < y1

    def test_segment_mask_covers_the_grid_exactly(self, client):
        request = next(v for v in VECTORS if v["request"]["kind"] == "segment")["request"]
        payload = client.post("/segment", json=request).json()["payload"]
        assert sum(payload["counts"]) == payload["width"] * payload["height"]
        foreground = sum(payload["counts"][1::2])
        assert foreground > 0, "a non-degenerate box must produce foreground pixels"

    def test_rect_rle_known_grid(self):
        # 4x3 grid, 2x2 box at (1,1): rows are 0000 0110 0110
        counts = _rect_rle(4, 3, 1, 1, 3, 3)
        assert counts == [5, 2, 2, 2, 1]
        assert sum(counts) == 12

    def test_category_detect_answers_from_the_offered_list(self, client):
        request = next(
            v
            for v in VECTORS
            if v["request"]["kind"] == "caption"
            and v["request"]["payload"]["prompt_template"] == "category_detect"
        )["request"]
        offered = {
            name.strip()
            for name in request["payload"]["slots"]["cls_list"].split(",")
            if name.strip()
        }
        payload = client.post("/caption", json=request).json()["payload"]
        assert set(payload["texts"]) <= offered

    def test_similarity_score_in_unit_interval(self, client):
        request = next(v for v in VECTORS if v["request"]["kind"] == "similarity")["request"]
        payload = client.post("/similarity", json=request).json()["payload"]
        assert 0.0 <= payload["score"] <= 1.0


class TestErrorPaths:
    def test_missing_payload_field_names_it(self, client):
        request = copy.deepcopy(
            next(v for v in VECTORS if v["request"]["kind"] == "ground")["request"]
        )
        del request["payload"]["query_text"]
        body = assert_error_body(
            client.post("/ground", json=request), 400, request["request_id"]
        )
        blame = (body["error"]["field"] or "") + body["error"]["message"]
        assert "query_text" in blame

    def test_extra_envelope_field_rejected(self, client):
        request = copy.deepcopy(
            next(v for v in VECTORS if v["request"]["kind"] == "embed")["request"]
        )
        request["debug"] = True
        assert_error_body(client.post("/embed", json=request), 400, request["request_id"])

    def test_kind_mismatch_rejected(self, client):
        request = next(v for v in VECTORS if v["request"]["kind"] == "caption")["request"]
        assert_error_body(client.post("/ground", json=request), 400, request["request_id"])

    def test_malformed_json_body(self, client):
        reply = client.post(
            "/ground", content=b"{nope", headers={"Content-Type": "application/json"}
        )
        body = assert_error_body(reply, 400, None)
        assert "JSON" in body["error"]["message"]

    def test_invalid_base64_names_the_field(self, client):
        request = copy.deepcopy(
            next(v for v in VECTORS if v["request"]["kind"] == "similarity")["request"]
        )
        request["payload"]["image_png_base64"] = "?definitely not base64!"
        body = assert_error_body(
            client.post("/similarity", json=request), 400, request["request_id"]
        )
        assert "image_png_base64" in (body["error"]["field"] or "")

    def test_similarity_by_path(self, client, tmp_path):
        image = tmp_path / "patch.png"
        image.write_bytes(b"\x89PNG\r\n\x1a\nnot-a-real-image-but-bytes-suffice")
        request = copy.deepcopy(
            next(v for v in VECTORS if v["request"]["kind"] == "similarity")["request"]
        )
        del request["payload"]["image_png_base64"]
        request["payload"]["image_path"] = str(image)
        reply = client.post("/similarity", json=request)
        assert reply.status_code == 200, reply.text
        assert 0.0 <= reply.json()["payload"]["score"] <= 1.0

    def test_unreadable_image_path_names_the_field(self, client, tmp_path):
        request = copy.deepcopy(
            next(v for v in VECTORS if v["request"]["kind"] == "similarity")["request"]
        )
        del request["payload"]["image_png_base64"]
        request["payload"]["image_path"] = str(tmp_path / "absent.png")
        body = assert_error_body(
            client.post("/similarity", json=request), 400, request["request_id"]
        )
        assert "image_path" in (body["error"]["field"] or "")

    def test_both_image_fields_rejected_by_schema(self, client, tmp_path):
        request = copy.deepcopy(
            next(v for v in VECTORS if v["request"]["kind"] == "similarity")["request"]
        )
        request["payload"]["image_path"] = str(tmp_path / "patch.png")
        assert_error_body(
            client.post("/similarity", json=request), 400, request["request_id"]
        )

    def test_unknown_route_is_404(self, client):
        assert client.post("/translate", json={}).status_code == 404


class TestServiceStates:
    def test_not_loaded_returns_503_everywhere(self):
        cold = TestClient(create_app(loaded=False))
        for vector in VECTORS[:: len(VECTORS) // 5]:
            request = vector["request"]
            assert_error_body(
                cold.post(f"/{request['kind']}", json=request),
                503,
                request["request_id"],
            )
        assert cold.get("/healthz").json()["status"] == "loading"

    def test_inference_failure_returns_500_with_request_id(self):
        class ExplodingBackends(ReferenceBackends):
            def ground(self, payload):
                raise RuntimeError("kaput")

        broken = TestClient(
            create_app(backends=ExplodingBackends()), raise_server_exceptions=False
        )
        request = next(v for v in VECTORS if v["request"]["kind"] == "ground")["request"]
        body = assert_error_body(
            broken.post("/ground", json=request), 500, request["request_id"]
        )
        assert "kaput" in body["error"]["message"]

    def test_healthz_reports_ready(self, client):
        body = client.get("/healthz").json()
        assert body == {"status": "ok", "schema": SCHEMA_VERSION}
