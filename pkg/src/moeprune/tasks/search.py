from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import pandas as pd

from ..config.params import Params
from ..core.allocation import BudgetSpec
from ..core.esap import FitnessKind, LogitCache, SearchSample, build_logit_cache
from ..core.evosearch import SearchConfig, SearchRun, run_search
from ..core.moe import ModelSpec, MoEModel, build_model
from ..core.specdec import SpecDecConfig
from ..io.artifacts import (
    RunManifest, load_manifest, load_model_spec, load_order, manifest_hash, output_lock, read_json,
    write_json, write_jsonl,
)
from ..io.datasets import read_dataset
from ..io.logit_cache import read_logit_cache
from ..utils.global_helpers import artifact_paths, density_bar, density_schedule
from ..utils.metrics_helpers import history_frame

logger = logging.getLogger(__name__)


@dataclass
class SearchOutputs:
    run: SearchRun
    density: pd.DataFrame
    output_dir: Path


def specdec_config_for(dataset: Sequence[SearchSample], n_prompts: int, block_size: int,
                       max_new_tokens: int, seed: int) -> SpecDecConfig:
    """Decode from the first n_prompts search-set prompts."""
    return SpecDecConfig(
        prompts=tuple(s.prompt for s in list(dataset)[: max(1, n_prompts)]),
        block_size=block_size,
        max_new_tokens=max_new_tokens,
        seed=seed,
    )


def load_cache_or_build(manifest: RunManifest, spec: ModelSpec, model: MoEModel,
                        dataset: Sequence[SearchSample], kind: FitnessKind) -> Optional[LogitCache]:
    path = manifest.path("cache")
    if path is not None:
        return read_logit_cache(path, spec, dataset)
    if kind is FitnessKind.SPECDEC:
        return None
    logger.warning("Manifest names no logit cache; computing full-model distributions in memory")
    return build_logit_cache(model, dataset)


def format_density(density: pd.DataFrame) -> str:
    shown = density.assign(bar=[density_bar(d) for d in density["density"]])
    return shown.to_string(index=False, float_format=lambda v: f"{v:.3f}")


def run(manifest_path: str | Path, out: Optional[str | Path] = None,
        specdec_prompts: int = 8, block_size: int = 4, max_new_tokens: int = 64,
        specdec_seed: int = 0) -> SearchOutputs:
    manifest = load_manifest(manifest_path)
    spec = load_model_spec(manifest.paths["model_spec"])
    dataset = read_dataset(manifest.paths["dataset"], spec)
    order = load_order(manifest.paths["order"], spec)
    budget = BudgetSpec.from_dict(read_json(manifest.paths["budget"]))
    config = SearchConfig.from_dict(read_json(manifest.paths["search_config"]))
    model = build_model(spec)

    cache = load_cache_or_build(manifest, spec, model, dataset, config.fitness)
    sd_config = None
    if config.fitness is FitnessKind.SPECDEC:
        sd_config = specdec_config_for(dataset, specdec_prompts, block_size, max_new_tokens, specdec_seed)

    outdir = Path(out) if out is not None else manifest.output_dir
    with output_lock(outdir):
        result = run_search(model, order, budget, dataset, cache, config, sd_config)
        inputs = {"manifest": manifest_hash(manifest), "model_spec": spec.spec_hash()}
        density = density_schedule(result.best_allocation.as_list(), spec.experts_per_layer)

        write_json(outdir / "search_run.json", {**result.to_dict(), "inputs": inputs})
        write_json(outdir / "best_allocation.json", {
            "allocation": result.best_allocation.as_list(),
            "budget": budget.budget,
            "parity": budget.parity.value,
            "fitness": result.best_fitness.to_dict(),
            "inputs": inputs,
        })
        write_jsonl(outdir / "search_log.jsonl", (h.to_dict() for h in result.history))
        density.to_csv(outdir / "density.csv", index=False)
        history_frame(result.history).to_csv(outdir / "history.csv", index=False)

    logger.info("Best allocation %s: %s=%.6f (evaluations=%d memo_hits=%d)",
                result.best_allocation, result.best_fitness.kind.value, result.best_fitness.value,
                result.evaluations, result.memo_hits)
    return SearchOutputs(result, density, outdir)


def main() -> SearchOutputs:
    paths = artifact_paths(Params.outdir, str(Params.criterion))
    outputs = run(
        paths["manifest"],
        specdec_prompts=Params.specdec_prompts,
        block_size=Params.block_size,
        max_new_tokens=Params.max_new_tokens,
        specdec_seed=Params.specdec_seed,
    )
    logger.info("Density schedule:\n%s", format_density(outputs.density))
    return outputs


if __name__ == "__main__":
    main()
