from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional

from ..config.params import Params
from ..core.allocation import BudgetSpec, Parity, budget_from_sparsity, count_feasible
from ..core.evosearch import SearchConfig
from ..io.artifacts import RunManifest, load_model_spec, load_order, read_json, write_json, write_manifest
from ..utils.global_helpers import artifact_paths

logger = logging.getLogger(__name__)


def resolve_budget(caps, experts_per_layer, parity: Parity | str,
                   budget: Optional[int] = None, sparsity: Optional[float] = None) -> BudgetSpec:
    """An explicit budget wins over a sparsity fraction."""
    if budget is not None:
        spec = BudgetSpec(int(budget), tuple(caps), parity)
        spec.require_feasible()
        return spec
    return budget_from_sparsity(caps, experts_per_layer, float(sparsity if sparsity is not None else 0.0), parity)


def run(model_path: str | Path, dataset_path: str | Path, order_path: str | Path, outdir: str | Path,
        config: SearchConfig, budget: Optional[int] = None, sparsity: Optional[float] = None,
        cache_path: Optional[str | Path] = None, output_dir: Optional[str | Path] = None) -> RunManifest:
    outdir = Path(outdir)
    spec = load_model_spec(model_path)
    load_order(order_path, spec)
    criterion = str(read_json(order_path).get("criterion", ""))

    budget_spec = resolve_budget(spec.caps, spec.experts_per_layer, config.parity, budget, sparsity)
    size = count_feasible(budget_spec)
    logger.info("Budget B=%d (parity=%s) over caps %s: %d feasible allocations",
                budget_spec.budget, budget_spec.parity.value, list(budget_spec.caps), size)

    budget_path = write_json(outdir / "budget.json", budget_spec.to_dict())
    config_path = write_json(outdir / "search_config.json", config.to_dict())
    paths = {
        "model_spec": model_path,
        "dataset": dataset_path,
        "order": order_path,
        "budget": budget_path,
        "search_config": config_path,
    }
    if cache_path is not None:
        paths["cache"] = cache_path
    return write_manifest(outdir / "manifest.json", paths, criterion,
                          output_dir if output_dir is not None else outdir / "search")


def search_config_from_params() -> SearchConfig:
    return SearchConfig(
        population_size=Params.population_size,
        elite_size=Params.elite_size,
        generations=Params.generations,
        max_transfer=Params.max_transfer,
        mutation_cap=Params.mutation_cap,
        seed=Params.search_seed,
        parity=Params.parity,
        fitness=Params.fitness,
        workers=Params.workers,
        resample_budget=Params.resample_budget,
        enumeration_limit=Params.enumeration_limit,
    )


def main() -> RunManifest:
    paths = artifact_paths(Params.outdir, str(Params.criterion))
    return run(
        paths["model_spec"], paths["dataset"], paths["order"], Params.outdir,
        config=search_config_from_params(),
        budget=Params.budget, sparsity=Params.sparsity,
        cache_path=paths["cache"], output_dir=paths["search"],
    )


if __name__ == "__main__":
    main()
