# src/moeprune/io/artifacts.py
from __future__ import annotations

import hashlib
import json
import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator, Optional

import yaml
from tenacity import RetryError, retry, retry_if_exception_type, stop_after_attempt, wait_fixed

from ..config.params import Params
from ..core.allocation import Allocation
from ..core.criteria import PruningOrder
from ..core.moe import ModelSpec
from ..errors import ArtifactIOError, StalenessError, ValidationError

logger = logging.getLogger(__name__)

LOCK_NAME = ".moeprune.lock"


# ---- hashing ----
def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    try:
        with open(path, "rb") as f:
            for block in iter(lambda: f.read(1 << 20), b""):
                h.update(block)
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}: {exc}") from exc
    return h.hexdigest()


# ---- json ----
def dumps(obj: Any) -> str:
    """Canonical JSON text: sorted keys, fixed indentation, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(path: str | Path, obj: Any) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dumps(obj), encoding="utf-8")
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc
    logger.info("Wrote %s", path)
    return path


def read_json(path: str | Path) -> Any:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path} is not valid JSON: {exc}", field=str(path)) from exc


def write_jsonl(path: str | Path, rows) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for row in rows:
                f.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc
    logger.info("Wrote %s", path)
    return path


# ---- model spec artifact ----
def load_model_spec(path: str | Path) -> ModelSpec:
    """Accept a bare spec object or a gen-model artifact ({spec, spec_hash, ...})."""
    raw = read_json(path)
    if isinstance(raw, dict) and "spec" in raw:
        spec = ModelSpec.from_dict(raw["spec"])
        if raw.get("spec_hash") and raw["spec_hash"] != spec.spec_hash():
            raise StalenessError(f"{path}: recorded spec_hash does not match its spec")
        return spec
    return ModelSpec.from_dict(raw)


def check_provenance(artifact: dict, path: str | Path, **expected: str) -> None:
    """Refuse an artifact whose recorded input hashes differ from the current inputs."""
    inputs = artifact.get("inputs", {}) if isinstance(artifact, dict) else {}
    for key, value in expected.items():
        recorded = inputs.get(key)
        if recorded is not None and recorded != value:
            raise StalenessError(f"{path}: was built from a different {key.replace('_', ' ')}")


# ---- output directory lock ----
@retry(
    retry=retry_if_exception_type(FileExistsError),
    stop=stop_after_attempt(max(1, Params.lock_attempts)),
    wait=wait_fixed(Params.lock_wait_seconds),
    reraise=False,
)
def _acquire(lock_path: Path) -> int:
    return os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)


@contextmanager
def output_lock(outdir: str | Path) -> Iterator[Path]:
    """Single writer per output directory."""
    outdir = Path(outdir)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ArtifactIOError(f"cannot create {outdir}: {exc}") from exc
    lock_path = outdir / LOCK_NAME
    try:
        fd = _acquire(lock_path)
    except RetryError:
        raise ArtifactIOError(f"{outdir} is locked by another run ({lock_path})") from None
    except OSError as exc:
        raise ArtifactIOError(f"cannot lock {outdir}: {exc}") from exc
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield outdir
    finally:
        try:
            lock_path.unlink()
        except FileNotFoundError:
            pass


# ---- run manifest ----
MANIFEST_INPUTS = ("model_spec", "dataset", "order", "budget", "search_config")
OPTIONAL_INPUTS = ("cache",)


@dataclass(frozen=True)
class RunManifest:
    paths: dict[str, Path]
    hashes: dict[str, str]
    criterion: str
    output_dir: Path

    def path(self, key: str) -> Optional[Path]:
        return self.paths.get(key)

    def to_dict(self) -> dict:
        return {
            "inputs": {k: {"path": str(p), "sha256": self.hashes[k]} for k, p in sorted(self.paths.items())},
            "criterion": self.criterion,
            "output_dir": str(self.output_dir),
        }


def write_manifest(path: str | Path, paths: dict[str, str | Path], criterion: str, output_dir: str | Path) -> RunManifest:
    """Hash the referenced inputs and record them next to their paths."""
    base = Path(path).resolve().parent
    resolved = {k: Path(v) for k, v in paths.items() if v is not None}
    missing = [k for k in MANIFEST_INPUTS if k not in resolved]
    if missing:
        raise ValidationError(f"manifest is missing input(s): {', '.join(missing)}", field=missing[0])
    hashes = {k: sha256_file(p) for k, p in resolved.items()}
    rel = {k: Path(os.path.relpath(p.resolve(), base)) for k, p in resolved.items()}
    rel_out = Path(os.path.relpath(Path(output_dir).resolve(), base))
    write_json(path, RunManifest(rel, hashes, criterion, rel_out).to_dict())
    return RunManifest({k: base / p for k, p in rel.items()}, hashes, criterion, base / rel_out)


def load_manifest(path: str | Path) -> RunManifest:
    """Read a manifest (JSON or YAML) and verify every input against its recorded hash."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ValidationError(f"{path} is not a valid manifest: {exc}", field=str(path)) from exc
    if not isinstance(raw, dict) or "inputs" not in raw:
        raise ValidationError(f"{path} has no 'inputs' section", field="inputs")
    base = path.resolve().parent
    paths, hashes = {}, {}
    for key, entry in raw["inputs"].items():
        if key not in MANIFEST_INPUTS + OPTIONAL_INPUTS:
            raise ValidationError(f"manifest input '{key}' is not recognised", field=f"inputs.{key}")
        if not isinstance(entry, dict) or "path" not in entry or "sha256" not in entry:
            raise ValidationError(f"manifest input '{key}' needs 'path' and 'sha256'", field=f"inputs.{key}")
        p = Path(entry["path"])
        p = p if p.is_absolute() else base / p
        if not p.exists():
            raise ArtifactIOError(f"manifest input '{key}' does not exist: {p}")
        actual = sha256_file(p)
        if actual != entry["sha256"]:
            raise StalenessError(f"manifest input '{key}' changed since the manifest was written: {p}")
        paths[key], hashes[key] = p, actual
    missing = [k for k in MANIFEST_INPUTS if k not in paths]
    if missing:
        raise ValidationError(f"manifest is missing input(s): {', '.join(missing)}", field=f"inputs.{missing[0]}")
    out = Path(raw.get("output_dir", "output"))
    return RunManifest(paths, hashes, str(raw.get("criterion", "")), out if out.is_absolute() else base / out)


def manifest_hash(manifest: RunManifest) -> str:
    canon = json.dumps({k: manifest.hashes[k] for k in sorted(manifest.hashes)}, sort_keys=True)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


# ---- pruning orders and allocations ----
def load_order(path: str | Path, spec: ModelSpec) -> PruningOrder:
    raw = read_json(path)
    if not isinstance(raw, dict):
        raise ValidationError(f"{path} is not a pruning order object", field="pi")
    check_provenance(raw, path, model_spec=spec.spec_hash())
    order = PruningOrder.from_dict(raw)
    if len(order.pi) != spec.layers:
        raise ValidationError(f"{path}: order covers {len(order.pi)} layers, model has {spec.layers}", field="pi")
    return order


def read_allocation(path: str | Path, model_spec: Optional[str] = None) -> tuple[Allocation, Optional[str]]:
    """Accept a bare integer list or a search output ({allocation, parity, ...}); returns (allocation, parity)."""
    raw = read_json(path)
    parity = None
    if isinstance(raw, dict):
        if model_spec is not None:
            check_provenance(raw, path, model_spec=model_spec)
        parity = raw.get("parity")
        raw = raw.get("allocation")
    if not isinstance(raw, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in raw):
        raise ValidationError(f"{path}: allocation must be a list of integers", field="allocation")
    return Allocation(tuple(raw)), parity
