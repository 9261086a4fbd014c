"""Image access: a small source abstraction plus PNG helpers.

Pipeline stages never open files themselves; they ask an ImageSource for
pixels by image id.  The directory-backed source reads an ``index.jsonl``
sidecar so runs never depend on filesystem listing order.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, runtime_checkable

import numpy as np
from PIL import Image

from .core import ImageRecord
from .errors import DataError


@runtime_checkable
class ImageSource(Protocol):
    """Anything that can hand out images and their metadata by id."""

    def ids(self) -> list[str]: ...

    def record(self, image_id: str) -> ImageRecord: ...

    def load(self, image_id: str) -> np.ndarray: ...


def encode_png(image: np.ndarray) -> bytes:
    """Serialize an HxWx3 uint8 array as PNG bytes."""
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise DataError(f"expected HxWx3 uint8 image, got {image.shape} {image.dtype}")
    buf = io.BytesIO()
    Image.fromarray(image, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    """Parse PNG bytes back to an HxWx3 uint8 array."""
    try:
        with Image.open(io.BytesIO(data)) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except Exception as exc:  # Pillow raises a mix of OSError subclasses
        raise DataError(f"could not decode PNG payload: {exc}") from exc


@dataclass
class DirectoryImageSource:
    """Images stored as files under ``root`` described by ``index.jsonl``.

    Each index line is a JSON object with keys ``image_id``, ``path``
    (relative to root), ``width`` and ``height``.  Loading verifies the
    file's real size against the index.
    """

    root: Path

    def __post_init__(self) -> None:
        self.root = Path(self.root)
        index_path = self.root / "index.jsonl"
        if not index_path.is_file():
            raise DataError(f"image index not found: {index_path}")
        self._records: dict[str, ImageRecord] = {}
        self._paths: dict[str, Path] = {}
        for lineno, line in enumerate(
            index_path.read_text(encoding="utf-8").splitlines(), start=1
        ):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                record = ImageRecord(row["image_id"], row["width"], row["height"])
                rel = row["path"]
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{index_path}:{lineno}: bad index row: {exc}") from exc
            if record.image_id in self._records:
                raise DataError(
                    f"{index_path}:{lineno}: duplicate image_id {record.image_id!r}"
                )
            self._records[record.image_id] = record
            self._paths[record.image_id] = self.root / rel

    def ids(self) -> list[str]:
        return sorted(self._records)

    def record(self, image_id: str) -> ImageRecord:
        try:
            return self._records[image_id]
        except KeyError:
            raise DataError(f"unknown image_id {image_id!r}") from None

    def load(self, image_id: str) -> np.ndarray:
        record = self.record(image_id)
        path = self._paths[image_id]
        try:
            with Image.open(path) as img:
                array = np.asarray(img.convert("RGB"), dtype=np.uint8)
        except OSError as exc:
            raise DataError(f"could not read image {path}: {exc}") from exc
        h, w = array.shape[:2]
        if (w, h) != (record.width, record.height):
            raise DataError(
                f"image {image_id!r}: file is {w}x{h} but index says "
                f"{record.width}x{record.height}"
            )
        return array


def materialize(source: ImageSource, root: Path, ids: Iterable[str] | None = None) -> Path:
    """Write a source's images to ``root`` as PNGs plus an index.jsonl.

    Returns the index path.  Useful for turning an in-memory source into
    a directory a separate process can read.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for image_id in sorted(ids if ids is not None else source.ids()):
        record = source.record(image_id)
        rel = f"{image_id}.png"
        (root / rel).write_bytes(encode_png(source.load(image_id)))
        lines.append(
            json.dumps(
                {
                    "image_id": record.image_id,
                    "path": rel,
                    "width": record.width,
                    "height": record.height,
                },
                sort_keys=False,
            )
        )
    index_path = root / "index.jsonl"
    index_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return index_path
