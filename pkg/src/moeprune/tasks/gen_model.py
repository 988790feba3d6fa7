from __future__ import annotations

import logging
from pathlib import Path

from ..config.params import Params
from ..core.moe import ModelSpec, build_model, parameter_checksum
from ..io.artifacts import load_model_spec, write_json
from ..utils.global_helpers import artifact_paths

logger = logging.getLogger(__name__)


def model_artifact(spec: ModelSpec) -> dict:
    return {
        "spec": spec.to_dict(),
        "spec_hash": spec.spec_hash(),
        "parameter_checksum": parameter_checksum(build_model(spec)),
    }


def run(spec: ModelSpec | str | Path, out: str | Path) -> dict:
    """Validate a model spec, build its weights once and write {spec, spec_hash, parameter_checksum}."""
    if not isinstance(spec, ModelSpec):
        spec = load_model_spec(spec)
    artifact = model_artifact(spec)
    write_json(out, artifact)
    logger.info("Model spec %s -> %s (L=%d experts=%d)", artifact["spec_hash"][:12], out,
                spec.layers, spec.total_experts)
    return artifact


def main() -> dict:
    out = artifact_paths(Params.outdir, str(Params.criterion))["model_spec"]
    return run(ModelSpec.from_dict(Params.model_spec), out)


if __name__ == "__main__":
    main()
