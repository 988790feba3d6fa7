from __future__ import annotations

import logging
from pathlib import Path

from ..config.params import Params
from ..core.esap import LogitCache, build_logit_cache
from ..core.moe import build_model
from ..io.artifacts import load_model_spec
from ..io.datasets import read_dataset
from ..io.logit_cache import write_logit_cache
from ..utils.global_helpers import artifact_paths

logger = logging.getLogger(__name__)


def run(model_path: str | Path, dataset_path: str | Path, out: str | Path) -> LogitCache:
    spec = load_model_spec(model_path)
    # overlong samples fail here with the dataset line number
    samples = read_dataset(dataset_path, spec)
    cache = build_logit_cache(build_model(spec), samples)
    write_logit_cache(out, cache)
    return cache


def main() -> LogitCache:
    paths = artifact_paths(Params.outdir, str(Params.criterion))
    return run(paths["model_spec"], paths["dataset"], paths["cache"])


if __name__ == "__main__":
    main()
