"""On-disk embedding and manifest formats, dataset assembly, and the
stratified train/val/test splitter.

Embedding file layout (all integers little-endian):

    bytes 0-7   magic ``FUSEMB01`` (ASCII)
    u32         version (= 1)
    u32         expert-name byte length, then UTF-8 expert_name
    u32         dim
    u64         count
    count x     (u32 id byte length, then UTF-8 sample_id)
    count*dim   float32 payload, row-major

Manifest files are JSON-Lines: a header object ``{"task": str,
"num_classes": int}`` followed by one ``{"id", "label", "split"?}`` object
per sample. ``split`` is optional and defaults to "unassigned".
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from fusebench.nncore import child_seed, seeded_rng

log = logging.getLogger(__name__)

MAGIC = b"FUSEMB01"
VERSION = 1
SPLITS = ("train", "val", "test", "unassigned")


class EmbeddingFormatError(ValueError):
    """Raised for malformed embedding files (bad magic, truncation, ...)."""


class ManifestError(ValueError):
    """Raised for malformed or inconsistent manifest files."""


@dataclass
class EmbeddingSet:
    """All cached embedding vectors produced by one expert over one dataset."""

    expert_name: str
    dim: int
    sample_ids: list[str]
    vectors: np.ndarray  # float32, shape (len(sample_ids), dim)

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)

    def validate(self) -> None:
        if not self.expert_name:
            raise ValueError("expert_name must be non-empty")
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise ValueError("sample_ids contain duplicates")
        if self.vectors.shape != (len(self.sample_ids), self.dim):
            raise ValueError(
                f"vectors shape {self.vectors.shape} inconsistent with "
                f"{len(self.sample_ids)} samples of dim {self.dim}"
            )
        if not np.isfinite(self.vectors).all():
            raise ValueError("vectors contain non-finite values")

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, EmbeddingSet)
            and self.expert_name == other.expert_name
            and self.dim == other.dim
            and self.sample_ids == other.sample_ids
            and self.vectors.shape == other.vectors.shape
            and bool((self.vectors.view(np.uint32) == other.vectors.view(np.uint32)).all())
        )


@dataclass
class ManifestEntry:
    sample_id: str
    label: int
    split: str = "unassigned"


@dataclass
class SampleManifest:
    """Per-sample ID, class label, and split assignment for one task."""

    task_name: str
    num_classes: int
    entries: list[ManifestEntry]

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ManifestError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.entries:
            raise ManifestError("manifest has no entries")
        seen = set()
        counts = [0] * self.num_classes
        for e in self.entries:
            if e.sample_id in seen:
                raise ManifestError(f"duplicate sample_id {e.sample_id!r}")
            seen.add(e.sample_id)
            if not (0 <= e.label < self.num_classes):
                raise ManifestError(
                    f"label {e.label} out of range for num_classes={self.num_classes}"
                )
            if e.split not in SPLITS:
                raise ManifestError(f"unknown split {e.split!r}")
            counts[e.label] += 1
        for c, n in enumerate(counts):
            if n == 0:
                raise ManifestError(f"class {c} has zero samples")

    def class_counts(self) -> list[int]:
        counts = [0] * self.num_classes
        for e in self.entries:
            counts[e.label] += 1
        return counts


def write_embedding_set(path, es: EmbeddingSet) -> None:
    """Write ``es`` in the binary format above.

    The set is validated first; nothing is written when invalid.
    """
    es.validate()
    name_bytes = es.expert_name.encode("utf-8")
    parts = [
        MAGIC,
        struct.pack("<I", VERSION),
        struct.pack("<I", len(name_bytes)),
        name_bytes,
        struct.pack("<I", es.dim),
        struct.pack("<Q", len(es.sample_ids)),
    ]
    for sid in es.sample_ids:
        sb = sid.encode("utf-8")
        parts.append(struct.pack("<I", len(sb)))
        parts.append(sb)
    parts.append(np.ascontiguousarray(es.vectors, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def _take(buf: bytes, offset: int, n: int, what: str) -> tuple[bytes, int]:
    if offset + n > len(buf):
        raise EmbeddingFormatError(f"truncated file: expected {n} more bytes for {what}")
    return buf[offset : offset + n], offset + n


def read_embedding_header(path) -> tuple[str, int, int, int]:
    """Read (expert_name, dim, count, payload_offset) without the payload."""
    with open(path, "rb") as fh:
        buf = fh.read()
    off = 0
    raw, off = _take(buf, off, 8, "magic")
    if raw != MAGIC:
        raise EmbeddingFormatError(f"bad magic {raw!r}, expected {MAGIC!r}")
    raw, off = _take(buf, off, 4, "version")
    version = struct.unpack("<I", raw)[0]
    if version != VERSION:
        raise EmbeddingFormatError(f"unsupported version {version}, expected {VERSION}")
    raw, off = _take(buf, off, 4, "name length")
    (name_len,) = struct.unpack("<I", raw)
    raw, off = _take(buf, off, name_len, "expert name")
    name = raw.decode("utf-8")
    raw, off = _take(buf, off, 4, "dim")
    (dim,) = struct.unpack("<I", raw)
    raw, off = _take(buf, off, 8, "count")
    (count,) = struct.unpack("<Q", raw)
    return name, dim, count, off


def read_embedding_set(path) -> EmbeddingSet:
    """Read and validate an embedding file written by :func:`write_embedding_set`."""
    with open(path, "rb") as fh:
        buf = fh.read()
    name, dim, count, off = read_embedding_header(path)
    sample_ids = []
    for _ in range(count):
        raw, off = _take(buf, off, 4, "sample id length")
        (id_len,) = struct.unpack("<I", raw)
        raw, off = _take(buf, off, id_len, "sample id")
        sample_ids.append(raw.decode("utf-8"))
    payload_bytes = count * dim * 4
    raw, off = _take(buf, off, payload_bytes, "float32 payload")
    if off != len(buf):
        raise EmbeddingFormatError(f"{len(buf) - off} unexpected trailing bytes")
    vectors = np.frombuffer(raw, dtype="<f4", count=count * dim).reshape(count, dim).copy()
    es = EmbeddingSet(expert_name=name, dim=dim, sample_ids=sample_ids, vectors=vectors)
    try:
        es.validate()
    except ValueError as exc:
        raise EmbeddingFormatError(str(exc)) from exc
    return es


def load_manifest(path) -> SampleManifest:
    """Parse and validate a JSON-Lines manifest. Errors cite line numbers."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        raise ManifestError("empty manifest file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestError(f"line 1: invalid JSON header: {exc}") from exc
    if not isinstance(header, dict) or "task" not in header or "num_classes" not in header:
        raise ManifestError('line 1: header must carry "task" and "num_classes"')
    task = header["task"]
    num_classes = header["num_classes"]
    if not isinstance(num_classes, int) or num_classes < 2:
        raise ManifestError(f"line 1: num_classes must be an integer >= 2, got {num_classes!r}")

    entries = []
    seen = set()
    for lineno, ln in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(ln)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"line {lineno}: invalid JSON: {exc}") from exc
        for key in ("id", "label"):
            if key not in rec:
                raise ManifestError(f"line {lineno}: missing required field {key!r}")
        sid = rec["id"]
        label = rec["label"]
        if not isinstance(sid, str) or not sid:
            raise ManifestError(f"line {lineno}: id must be a non-empty string")
        if not isinstance(label, int) or isinstance(label, bool):
            raise ManifestError(f"line {lineno}: label must be an integer")
        if not (0 <= label < num_classes):
            raise ManifestError(
                f"line {lineno}: label {label} out of range for num_classes={num_classes}"
            )
        if sid in seen:
            raise ManifestError(f"line {lineno}: duplicate sample_id {sid!r}")
        seen.add(sid)
        split = rec.get("split", "unassigned")
        if split is None:
            split = "unassigned"
        if split not in SPLITS:
            raise ManifestError(f"line {lineno}: unknown split {split!r}")
        entries.append(ManifestEntry(sample_id=sid, label=label, split=split))

    manifest = SampleManifest(task_name=task, num_classes=num_classes, entries=entries)
    manifest.validate()
    return manifest


def save_manifest(path, manifest: SampleManifest, extra_header: dict | None = None) -> None:
    """Write a manifest in the JSON-Lines format read by :func:`load_manifest`."""
    manifest.validate()
    header = {"task": manifest.task_name, "num_classes": manifest.num_classes}
    if extra_header:
        header.update(extra_header)
    lines = [json.dumps(header, sort_keys=True)]
    for e in manifest.entries:
        rec = {"id": e.sample_id, "label": e.label}
        if e.split != "unassigned":
            rec["split"] = e.split
        lines.append(json.dumps(rec, sort_keys=True))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def stratified_split(
    manifest: SampleManifest, ratios: tuple[float, float, float], seed: int
) -> SampleManifest:
    """Assign every entry to train/val/test, stratified per class.

    Within each class the three counts follow largest-remainder rounding of
    ``class_size * ratio``. Remainder ties are broken toward the split with
    the largest accumulated quota deficit across classes processed so far
    (then by split order train < val < test), which keeps the overall counts
    maximally proportional. Entries are shuffled inside each class with a
    seed-derived stream before slicing, so the assignment is a deterministic
    function of (manifest, ratios, seed).
    """
    manifest.validate()
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3:
        raise ValueError("ratios must be (train, val, test)")
    if any(r < 0 for r in ratios):
        raise ValueError(f"ratios must be nonnegative, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1 within 1e-9, got sum={sum(ratios)!r}")

    by_class: dict[int, list[int]] = {}
    for idx, e in enumerate(manifest.entries):
        by_class.setdefault(e.label, []).append(idx)

    assignment = ["unassigned"] * len(manifest.entries)
    carry = [0.0, 0.0, 0.0]
    for label in sorted(by_class):
        indices = by_class[label]
        n = len(indices)
        quota = [n * r for r in ratios]
        alloc = [math.floor(q) for q in quota]
        remainder = n - sum(alloc)
        frac = [q - a for q, a in zip(quota, alloc)]
        order = sorted(range(3), key=lambda s: (-frac[s], -carry[s], s))
        for s in order[:remainder]:
            alloc[s] += 1
        for s in range(3):
            carry[s] += quota[s] - alloc[s]

        rng = seeded_rng(child_seed(seed, "split", label))
        perm = rng.permutation(n)
        shuffled = [indices[p] for p in perm]
        bounds = (alloc[0], alloc[0] + alloc[1])
        for pos, idx in enumerate(shuffled):
            if pos < bounds[0]:
                assignment[idx] = "train"
            elif pos < bounds[1]:
                assignment[idx] = "val"
            else:
                assignment[idx] = "test"

    entries = [replace(e, split=assignment[i]) for i, e in enumerate(manifest.entries)]
    return SampleManifest(manifest.task_name, manifest.num_classes, entries)


@dataclass
class AlignedDataset:
    """Inner join of a manifest with one embedding matrix per expert.

    Rows follow manifest order restricted to the joined sample_ids; expert
    order is the configured subset order. Feature matrices are widened to
    float64 on assembly. Immutable after construction and safe to share.
    """

    expert_names: list[str]
    dims: list[int]
    sample_ids: list[str]
    features: list[np.ndarray]  # one (n, d_i) float64 matrix per expert
    labels: np.ndarray  # int64, shape (n,)
    splits: list[str]
    num_classes: int
    task_name: str
    dropped_ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.sample_ids)

    def sample(self, i: int) -> tuple[list[np.ndarray], int, str]:
        return [f[i] for f in self.features], int(self.labels[i]), self.splits[i]

    def split_indices(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return np.array([i for i, s in enumerate(self.splits) if s == split], dtype=np.int64)


def assemble_dataset(
    manifest: SampleManifest, sets: list[EmbeddingSet], expert_subset: list[str]
) -> AlignedDataset:
    """Inner-join the manifest with the selected embedding sets on sample_id.

    Sample_ids present in the manifest but missing from any selected expert
    are dropped; the drop list is logged and returned on the dataset.
    """
    if not expert_subset:
        raise ValueError("expert_subset must be non-empty")
    by_name: dict[str, EmbeddingSet] = {}
    for es in sets:
        if es.expert_name in by_name:
            raise ValueError(f"expert {es.expert_name!r} appears more than once")
        by_name[es.expert_name] = es
    missing = [name for name in expert_subset if name not in by_name]
    if missing:
        raise ValueError(f"expert(s) not found: {missing}")

    selected = [by_name[name] for name in expert_subset]
    id_maps = [{sid: row for row, sid in enumerate(es.sample_ids)} for es in selected]

    kept_rows: list[int] = []
    dropped: list[str] = []
    for idx, e in enumerate(manifest.entries):
        if all(e.sample_id in m for m in id_maps):
            kept_rows.append(idx)
        else:
            dropped.append(e.sample_id)
    if not kept_rows:
        raise ValueError("inner join is empty: no sample_id shared by manifest and all experts")
    if dropped:
        log.warning(
            "assemble_dataset dropped %d sample_id(s) missing from some expert: %s",
            len(dropped),
            dropped,
        )

    sample_ids = [manifest.entries[i].sample_id for i in kept_rows]
    labels = np.array([manifest.entries[i].label for i in kept_rows], dtype=np.int64)
    splits = [manifest.entries[i].split for i in kept_rows]
    features = []
    for es, id_map in zip(selected, id_maps):
        rows = np.array([id_map[sid] for sid in sample_ids], dtype=np.int64)
        features.append(es.vectors[rows].astype(np.float64))
    return AlignedDataset(
        expert_names=list(expert_subset),
        dims=[es.dim for es in selected],
        sample_ids=sample_ids,
        features=features,
        labels=labels,
        splits=splits,
        num_classes=manifest.num_classes,
        task_name=manifest.task_name,
        dropped_ids=dropped,
    )
