from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional

import pandas as pd

from ..config.params import Params
from ..core.allocation import BudgetSpec, uniform_allocation
from ..core.esap import FitnessKind
from ..core.evosearch import SearchConfig, evaluate_feasible
from ..core.moe import build_model
from ..io.artifacts import load_manifest, load_model_spec, load_order, output_lock, read_json
from ..io.datasets import read_dataset
from ..utils.global_helpers import artifact_paths
from ..utils.metrics_helpers import brute_force_table
from .search import load_cache_or_build, specdec_config_for

logger = logging.getLogger(__name__)


def run(manifest_path: str | Path, limit: int, out: Optional[str | Path] = None,
        specdec_prompts: int = 8, block_size: int = 4, max_new_tokens: int = 64,
        specdec_seed: int = 0) -> pd.DataFrame:
    """Score every feasible allocation of the manifest's budget; SizeError when there are more than `limit`."""
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

    table = evaluate_feasible(model, order, budget, dataset, cache, limit, config.fitness,
                              config.seed, sd_config)
    budget.require_feasible()
    df = brute_force_table(table, uniform_allocation(budget, spec.layers))

    outdir = Path(out) if out is not None else manifest.output_dir
    with output_lock(outdir):
        df.to_csv(outdir / "brute_force.csv", index=False)
    best = df.sort_values("rank").iloc[0]
    logger.info("Brute force over %d allocations: best %s %s=%.6f",
                len(df), best["r"], config.fitness.value, best["fitness"])
    return df


def main() -> pd.DataFrame:
    paths = artifact_paths(Params.outdir, str(Params.criterion))
    return run(
        paths["manifest"], Params.brute_force_limit,
        specdec_prompts=Params.specdec_prompts,
        block_size=Params.block_size,
        max_new_tokens=Params.max_new_tokens,
        specdec_seed=Params.specdec_seed,
    )


if __name__ == "__main__":
    main()
