from __future__ import annotations

import logging
from pathlib import Path

from ..config.params import Params
from ..core.moe import build_model
from ..io.artifacts import load_model_spec, write_jsonl
from ..io.datasets import dataset_rows, synthesize_dataset
from ..utils.global_helpers import artifact_paths

logger = logging.getLogger(__name__)


def run(model_path: str | Path, out: str | Path, n_samples: int, prompt_len: int,
        answer_len: int, seed: int) -> int:
    spec = load_model_spec(model_path)
    samples = synthesize_dataset(build_model(spec), n_samples, prompt_len, answer_len, seed)
    write_jsonl(out, dataset_rows(samples))
    return len(samples)


def main() -> int:
    paths = artifact_paths(Params.outdir, str(Params.criterion))
    return run(
        paths["model_spec"], paths["dataset"],
        n_samples=Params.dataset_n_samples,
        prompt_len=Params.dataset_prompt_len,
        answer_len=Params.dataset_answer_len,
        seed=Params.dataset_seed,
    )


if __name__ == "__main__":
    main()
