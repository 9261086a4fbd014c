#!/usr/bin/env python3
"""Regenerate the shipped wire-protocol assets.

Writes ``src/d2af/data/wire_schemas.json`` (the JSON Schemas every
client and server validates against) and ``src/d2af/data/wire_vectors.json``
(20 recorded request/response pairs from the seeded mock backend, used
as the shared conformance suite).  Output is deterministic; rerunning
must be a no-op unless the protocol itself changed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from d2af import wire  # noqa: E402


def dump(path: Path, doc: dict) -> bool:
    text = json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    old = path.read_text(encoding="utf-8") if path.exists() else None
    if old == text:
        return False
    path.write_text(text, encoding="utf-8", newline="\n")
    return True


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=11, help="mock corpus seed")
    args = parser.parse_args()

    data_dir = Path(__file__).resolve().parents[1] / "src" / "d2af" / "data"
    schemas_path = data_dir / "wire_schemas.json"
    vectors_path = data_dir / "wire_vectors.json"

    changed = dump(schemas_path, wire.build_wire_schemas())
    print(f"{schemas_path}: {'updated' if changed else 'unchanged'}")

    # vector generation validates against the freshly written schema file
    wire.load_wire_schemas.cache_clear()
    wire._validator.cache_clear()
    vectors = wire.generate_wire_vectors(seed=args.seed)
    doc = {
        "schema_version": wire.WIRE_SCHEMA,
        "seed": args.seed,
        "vectors": vectors,
    }
    changed = dump(vectors_path, doc)
    print(f"{vectors_path}: {'updated' if changed else 'unchanged'} ({len(vectors)} vectors)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
