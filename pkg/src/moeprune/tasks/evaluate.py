from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional, Sequence

import pandas as pd

from ..config.params import Params
from ..core.allocation import Allocation, BudgetSpec, Parity, is_feasible, uniform_allocation
from ..core.esap import FitnessKind, build_logit_cache
from ..core.evosearch import FitnessEvaluator
from ..core.moe import build_model
from ..errors import FeasibilityError
from ..io.artifacts import load_model_spec, load_order, read_allocation
from ..io.datasets import read_dataset
from ..io.logit_cache import read_logit_cache
from ..utils.global_helpers import artifact_paths
from ..utils.metrics_helpers import FitnessSpec, fitness_report
from .search import specdec_config_for

logger = logging.getLogger(__name__)

DEFAULT_KINDS = (FitnessKind.ESAP, FitnessKind.SAP, FitnessKind.KL, FitnessKind.NLL)

DESCRIPTIONS = {
    FitnessKind.ESAP: "expected speculative acceptance, sum_v min(p, q)",
    FitnessKind.SAP: "single-draw speculative acceptance",
    FitnessKind.KL: "negative KL(full || pruned)",
    FitnessKind.NLL: "log-likelihood of the reference answer",
    FitnessKind.SPECDEC: "acceptance rate of real speculative decoding",
}


def run(model_path: str | Path, order_path: str | Path, allocation_path: str | Path,
        dataset_path: str | Path, kinds: Sequence[FitnessKind | str] = DEFAULT_KINDS,
        out: Optional[str | Path] = None, cache_path: Optional[str | Path] = None, seed: int = 0,
        specdec_prompts: int = 8, block_size: int = 4, max_new_tokens: int = 64) -> pd.DataFrame:
    """Score an allocation against the uniform allocation with the same budget, one column per fitness kind."""
    kinds = [FitnessKind(k) for k in kinds]
    spec = load_model_spec(model_path)
    dataset = read_dataset(dataset_path, spec)
    order = load_order(order_path, spec)
    alloc, parity = read_allocation(allocation_path, model_spec=spec.spec_hash())
    budget = BudgetSpec(alloc.total, spec.caps, parity or Parity.ANY)
    if not is_feasible(alloc.r, budget):
        raise FeasibilityError(f"allocation {alloc} is not feasible for caps {list(spec.caps)} ({budget.parity.value})")
    uniform = uniform_allocation(budget, spec.layers)

    model = build_model(spec)
    cache = None
    if any(k is not FitnessKind.SPECDEC for k in kinds):
        cache = read_logit_cache(cache_path, spec, dataset) if cache_path else build_logit_cache(model, dataset)
    sd_config = None
    if FitnessKind.SPECDEC in kinds:
        sd_config = specdec_config_for(dataset, specdec_prompts, block_size, max_new_tokens, seed)

    specs = [
        FitnessSpec(kind=k, description=DESCRIPTIONS[k],
                    compute=FitnessEvaluator(model, order, dataset, cache, k, seed, sd_config))
        for k in kinds
    ]
    report = fitness_report({"allocation": alloc, "uniform": uniform}, specs)
    if out is not None:
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        report.to_csv(out, index=False)
        logger.info("Wrote evaluation report -> %s", out)
    return report


def main() -> pd.DataFrame:
    paths = artifact_paths(Params.outdir, str(Params.criterion))
    search_dir = Path(paths["search"])
    report = run(
        paths["model_spec"], paths["order"], search_dir / "best_allocation.json", paths["dataset"],
        out=search_dir / "evaluate.csv", cache_path=paths["cache"], seed=Params.search_seed,
    )
    logger.info("Evaluation:\n%s", report.to_string(index=False))
    return report


if __name__ == "__main__":
    main()
