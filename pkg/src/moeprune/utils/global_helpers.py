# src/moeprune/utils/global_helpers.py
from __future__ import annotations
import logging, os
from typing import Sequence

import pandas as pd

from ..config.config import Config
from ..config.params import Params

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(message)s"

def setup_logging(logfile: str | None = None, level: str | None = None) -> None:
    """File handler under the log dir plus stderr, at Params.logging_level unless overridden."""
    os.makedirs(Config.LOG_DIR, exist_ok=True)
    lvl = getattr(logging, str(level or Params.logging_level).upper(), logging.INFO)
    logging.basicConfig(
        level=lvl,
        format=LOG_FORMAT,
        handlers=[
            logging.FileHandler(os.path.join(Config.LOG_DIR, logfile or Params.logging_file), mode="a"),
            logging.StreamHandler(),
        ],
        force=True,
    )

def artifact_paths(base_outdir: str, criterion: str) -> dict[str, str]:
    """Where the `run` pipelines put each artifact below the output directory."""
    return {
        "model_spec": os.path.join(base_outdir, "model.json"),
        "dataset": os.path.join(base_outdir, "dataset.jsonl"),
        "scores": os.path.join(base_outdir, f"scores_{criterion}.json"),
        "order": os.path.join(base_outdir, f"order_{criterion}.json"),
        "cache": os.path.join(base_outdir, "logits.cache"),
        "manifest": os.path.join(base_outdir, "manifest.json"),
        "search": os.path.join(base_outdir, "search"),
    }

def density_schedule(alloc: Sequence[int], experts_per_layer: Sequence[int]) -> pd.DataFrame:
    """Per-layer fraction of experts kept, 1 - r_l / n_l."""
    rows = [
        {"layer": l, "experts": n, "removed": int(r), "kept": n - int(r), "density": 1.0 - int(r) / n}
        for l, (r, n) in enumerate(zip(alloc, experts_per_layer))
    ]
    return pd.DataFrame(rows, columns=["layer", "experts", "removed", "kept", "density"])

def density_bar(density: float, width: int = 20) -> str:
    filled = int(round(density * width))
    return "#" * filled + "." * (width - filled)
