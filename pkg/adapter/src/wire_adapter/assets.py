"""Locate and load the shared wire schema and conformance-vector files.

The files are the single compatibility contract with the pipeline, so
they are read from disk by path — via the WIRE_ASSETS_DIR environment
variable, an explicit argument, or by walking up from this file to find
the pipeline checkout's ``src/d2af/data`` directory.
"""

import json
import os
from functools import lru_cache
from pathlib import Path

from jsonschema import Draft202012Validator

SCHEMA_VERSION = "d2af_wire_v1"
KINDS = ("caption", "ground", "similarity", "embed", "segment")

SCHEMAS_FILENAME = "wire_schemas.json"
VECTORS_FILENAME = "wire_vectors.json"


class AssetError(RuntimeError):
    """The shared wire asset files cannot be found or are unusable."""


def find_assets_dir(explicit: Path | str | None = None) -> Path:
    if explicit is not None:
        path = Path(explicit)
        if not (path / SCHEMAS_FILENAME).is_file():
            raise AssetError(f"no {SCHEMAS_FILENAME} in {path}")
        return path
    env = os.environ.get("WIRE_ASSETS_DIR")
    if env:
        return find_assets_dir(env)
    for ancestor in Path(__file__).resolve().parents:
        candidate = ancestor / "src" / "d2af" / "data"
        if (candidate / SCHEMAS_FILENAME).is_file():
            return candidate
    raise AssetError(
        f"could not locate {SCHEMAS_FILENAME}; set WIRE_ASSETS_DIR or pass a directory"
    )


def load_schemas(assets_dir: Path | str | None = None) -> dict:
    path = find_assets_dir(assets_dir) / SCHEMAS_FILENAME
    data = json.loads(path.read_text("utf-8"))
    if data.get("schema_version") != SCHEMA_VERSION:
        raise AssetError(
            f"{path} declares schema_version {data.get('schema_version')!r}, "
            f"this service speaks {SCHEMA_VERSION!r}"
        )
    if tuple(data.get("kinds", ())) != KINDS:
        raise AssetError(f"{path} lists kinds {data.get('kinds')!r}, expected {KINDS!r}")
    return data


def load_vectors(assets_dir: Path | str | None = None) -> list[dict]:
    path = find_assets_dir(assets_dir) / VECTORS_FILENAME
    data = json.loads(path.read_text("utf-8"))
    if data.get("schema_version") != SCHEMA_VERSION:
        raise AssetError(
            f"{path} declares schema_version {data.get('schema_version')!r}, "
            f"this service speaks {SCHEMA_VERSION!r}"
        )
    return data["vectors"]


@lru_cache(maxsize=None)
def _validators(assets_dir: str | None) -> dict:
    schemas = load_schemas(assets_dir)
    table: dict[tuple[str, str], Draft202012Validator] = {}
    for direction in ("request", "response"):
        for kind in KINDS:
            table[(direction, kind)] = Draft202012Validator(schemas[direction][kind])
    table[("error", "")] = Draft202012Validator(schemas["error"])
    return table


def validator(
    direction: str, kind: str, assets_dir: Path | str | None = None
) -> Draft202012Validator:
    key = None if assets_dir is None else str(Path(assets_dir))
    return _validators(key)[(direction, kind)]


def deepest_violation(validator_: Draft202012Validator, instance) -> tuple[str, str] | None:
    """(json_path, message) of the most specific schema violation, or None."""
    errors = sorted(
        validator_.iter_errors(instance),
        key=lambda e: (len(e.absolute_path), len(e.message)),
        reverse=True,
    )
    if not errors:
        return None
    error = errors[0]
    return error.json_path, error.message
