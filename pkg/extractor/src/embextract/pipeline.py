"""Image-folder -> embedding-file pipeline.

Preprocessing is deterministic by design: decode, convert to RGB, bilinear
resize to 224x224, normalize with the backbone's published channel
constants. No augmentation happens here. Row order is sorted sample_id
(filename stem), stable across filesystems.

The output file follows the harness wire format exactly (all integers
little-endian): magic ``FUSEMB01``, u32 version=1, u32 name length + UTF-8
expert name, u32 dim, u64 count, per-sample u32 id length + UTF-8 id, then
count*dim float32 values row-major.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from embextract.registry import POOLING_MODES, get_backbone

log = logging.getLogger(__name__)

MAGIC = b"FUSEMB01"
VERSION = 1
IMAGE_SIZE = 224
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class ExtractorError(RuntimeError):
    pass


@dataclass
class ExtractorSpec:
    backbone_id: str
    image_dir: Path
    output_path: Path
    pooling: str = "cls_token"
    batch: int = 16

    def __post_init__(self):
        self.image_dir = Path(self.image_dir)
        self.output_path = Path(self.output_path)
        if self.pooling not in POOLING_MODES:
            raise ValueError(f"pooling must be one of {POOLING_MODES}, got {self.pooling!r}")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")


def list_images(image_dir: Path) -> list[Path]:
    """Image files sorted by sample_id (filename stem). Duplicate stems are
    rejected: they would collide in the output file."""
    paths = [
        p
        for p in image_dir.iterdir()
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    ]
    paths.sort(key=lambda p: p.stem)
    stems = [p.stem for p in paths]
    dupes = {s for s in stems if stems.count(s) > 1}
    if dupes:
        raise ExtractorError(f"duplicate sample ids (filename stems): {sorted(dupes)}")
    return paths


def preprocess(raw: bytes, mean, std) -> np.ndarray:
    """Decode + deterministic resize/normalize. Raises on undecodable input."""
    import io

    with Image.open(io.BytesIO(raw)) as img:
        img = img.convert("RGB").resize((IMAGE_SIZE, IMAGE_SIZE), Image.BILINEAR)
        pixels = np.asarray(img, dtype=np.float32) / 255.0
    return (pixels - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)


def write_embedding_file(path: Path, expert_name: str, vectors: np.ndarray, sample_ids: list[str]) -> None:
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    if vectors.ndim != 2 or vectors.shape[0] != len(sample_ids):
        raise ValueError("vectors must be (len(sample_ids), dim)")
    if not np.isfinite(vectors).all():
        raise ValueError("vectors contain non-finite values")
    name_bytes = expert_name.encode("utf-8")
    parts = [
        MAGIC,
        struct.pack("<I", VERSION),
        struct.pack("<I", len(name_bytes)),
        name_bytes,
        struct.pack("<I", vectors.shape[1]),
        struct.pack("<Q", vectors.shape[0]),
    ]
    for sid in sample_ids:
        sb = sid.encode("utf-8")
        parts.append(struct.pack("<I", len(sb)))
        parts.append(sb)
    parts.append(vectors.tobytes())
    path.write_bytes(b"".join(parts))


def extract(spec: ExtractorSpec) -> Path:
    """Embed every decodable image in the folder and write one embedding file.

    Undecodable images are skipped with a logged id; zero successes fail the
    run. Returns the output path.
    """
    backbone = get_backbone(spec.backbone_id)
    if not spec.image_dir.is_dir():
        raise ExtractorError(f"image directory not found: {spec.image_dir}")
    paths = list_images(spec.image_dir)
    if not paths:
        raise ExtractorError(f"no image files in {spec.image_dir}")

    ids: list[str] = []
    pixel_batch: list[np.ndarray] = []
    raw_batch: list[bytes] = []
    rows: list[np.ndarray] = []

    def flush():
        if raw_batch:
            rows.append(backbone.embed(np.stack(pixel_batch), list(raw_batch), spec.pooling))
            pixel_batch.clear()
            raw_batch.clear()

    for path in paths:
        raw = path.read_bytes()
        try:
            pixels = preprocess(raw, backbone.mean, backbone.std)
        except (UnidentifiedImageError, OSError, ValueError):
            log.warning("skipping undecodable image %r", path.stem)
            continue
        ids.append(path.stem)
        pixel_batch.append(pixels)
        raw_batch.append(raw)
        if len(raw_batch) >= spec.batch:
            flush()
    flush()

    if not ids:
        raise ExtractorError(f"no image in {spec.image_dir} could be decoded")
    vectors = np.concatenate(rows, axis=0)
    spec.output_path.parent.mkdir(parents=True, exist_ok=True)
    write_embedding_file(spec.output_path, spec.backbone_id, vectors, ids)
    log.info("wrote %d x %d embeddings to %s", len(ids), backbone.dim, spec.output_path)
    return spec.output_path
