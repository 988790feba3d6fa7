# src/moeprune/io/logit_cache.py
"""
Binary logit-cache container.

    MAGIC (8 bytes) | header length (uint64 LE) | header (UTF-8 JSON) |
    float64 LE probability rows, sample-major then answer position

Header keys: format, model_spec_hash, dataset_hash, vocab_size, sample_count,
position_counts, payload_sha256.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..core.esap import LogitCache, SearchSample, dataset_hash
from ..core.moe import ModelSpec
from ..errors import ArtifactIOError, CoverageError, StalenessError, ValidationError

logger = logging.getLogger(__name__)

MAGIC = b"MOELOGC1"
FORMAT_VERSION = 1


def write_logit_cache(path: str | Path, cache: LogitCache) -> Path:
    path = Path(path)
    payload = b"".join(np.ascontiguousarray(r, dtype="<f8").tobytes() for r in cache.rows)
    header = {
        "format": FORMAT_VERSION,
        "model_spec_hash": cache.model_hash,
        "dataset_hash": cache.dataset_hash,
        "vocab_size": cache.vocab_size,
        "sample_count": cache.sample_count,
        "position_counts": cache.position_counts,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<Q", len(head)))
            f.write(head)
            f.write(payload)
    except OSError as exc:
        raise ArtifactIOError(f"cannot write logit cache {path}: {exc}") from exc
    logger.info("Wrote logit cache %s (samples=%d rows=%d)", path, cache.sample_count, sum(cache.position_counts))
    return path


def read_logit_cache(path: str | Path, spec: Optional[ModelSpec] = None,
                     dataset: Optional[Sequence[SearchSample]] = None) -> LogitCache:
    """Load a cache; when spec/dataset are given, refuse one built for different inputs."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read logit cache {path}: {exc}") from exc
    if blob[: len(MAGIC)] != MAGIC or len(blob) < len(MAGIC) + 8:
        raise ValidationError(f"{path} is not a logit cache file", field=str(path))
    (head_len,) = struct.unpack("<Q", blob[len(MAGIC): len(MAGIC) + 8])
    start = len(MAGIC) + 8
    try:
        header = json.loads(blob[start: start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise StalenessError(f"{path}: unreadable cache header") from exc
    payload = blob[start + head_len:]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise StalenessError(f"{path}: cache payload does not match its header hash")
    if spec is not None and header.get("model_spec_hash") != spec.spec_hash():
        raise StalenessError(f"{path}: cache was built for a different model spec")
    if dataset is not None and header.get("dataset_hash") != dataset_hash(dataset):
        raise StalenessError(f"{path}: cache was built for a different dataset")

    vocab = int(header["vocab_size"])
    counts = [int(c) for c in header["position_counts"]]
    if len(counts) != int(header["sample_count"]):
        raise StalenessError(f"{path}: header sample_count disagrees with position_counts")
    flat = np.frombuffer(payload, dtype="<f8")
    if flat.size != sum(counts) * vocab:
        raise CoverageError(f"{path}: payload holds {flat.size} values, header promises {sum(counts) * vocab}")
    rows, offset = [], 0
    for c in counts:
        block = flat[offset: offset + c * vocab].reshape(c, vocab).astype(np.float64)
        block.setflags(write=False)
        rows.append(block)
        offset += c * vocab
    return LogitCache(header["model_spec_hash"], header["dataset_hash"], vocab, tuple(rows))
