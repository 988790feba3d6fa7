import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd

from ..core.allocation import Allocation
from ..core.esap import FitnessKind, FitnessValue
from ..core.evosearch import GenerationRecord

logger = logging.getLogger(__name__)

@dataclass
class FitnessSpec:
    kind: FitnessKind  # column name in the report
    description: str
    compute: Callable[[Allocation], FitnessValue]


def fitness_report(rows: dict[str, Allocation], specs: Sequence[FitnessSpec]) -> pd.DataFrame:
    """One row per named allocation, one column per fitness kind."""
    records = []
    for label, alloc in rows.items():
        rec = {"allocation": label, "r": str(alloc), "removed": alloc.total}
        for spec in specs:
            rec[spec.kind.value] = spec.compute(alloc).value
        records.append(rec)
        logger.info("Evaluated %s %s", label, alloc)
    return pd.DataFrame.from_records(records, columns=["allocation", "r", "removed", *[s.kind.value for s in specs]])


def brute_force_table(table: Sequence[tuple[Allocation, FitnessValue]], uniform: Optional[Allocation] = None) -> pd.DataFrame:
    if not table:
        return pd.DataFrame(columns=["rank", "r", "fitness", "is_uniform"])
    df = pd.DataFrame({
        "r": [str(a) for a, _ in table],
        "fitness": [f.value for _, f in table],
        "is_uniform": [uniform is not None and a == uniform for a, _ in table],
    })
    # enumeration order is lexicographic, so "first" ranks break ties the same way the argmax does
    df["rank"] = df["fitness"].rank(ascending=False, method="first").astype(int)
    result = df[["rank", "r", "fitness", "is_uniform"]]
    logger.info("Computed brute_force_table with %d rows", len(result))
    return result


def history_frame(history: Sequence[GenerationRecord]) -> pd.DataFrame:
    df = pd.DataFrame([h.to_dict() for h in history])
    if not df.empty and not np.all(np.diff(df["best_so_far"].to_numpy()) >= 0):
        logger.warning("best_so_far is not monotone in the history")
    return df
