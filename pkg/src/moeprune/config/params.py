# src/moeprune/config/params.py
import yaml
from pathlib import Path

from .config import Config

def _load_yaml(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return yaml.safe_load(f) or {}

HERE = Path(__file__).resolve().parent
PARAMS_FILE = Path(Config.PARAMS_FILE) if Config.PARAMS_FILE else HERE / "parameters.yml"
if not PARAMS_FILE.exists():
    raise RuntimeError(f"No parameters file found. Looked for: {PARAMS_FILE}")

_loaded = _load_yaml(PARAMS_FILE)

def _dig(d: dict, dotted: str):
    """Traverse dict by dotted path; return (found, value)."""
    cur = d
    for part in dotted.split("."):
        if not isinstance(cur, dict) or part not in cur:
            return False, None
        cur = cur[part]
    return True, cur

def _get(*candidates, default=None):
    """
    Return the first existing key among dotted-path candidates.
    Examples: _get('search.seed', 'seed', default=42)
    """
    for key in candidates:
        ok, val = _dig(_loaded, key)
        if ok:
            return val
    return default

def _get_int(*candidates, default=0):
    v = _get(*candidates, default=default)
    try:
        return int(v) if v is not None else default
    except Exception:
        return default

def _get_float(*candidates, default=0.0):
    v = _get(*candidates, default=default)
    try:
        return float(v) if v is not None else default
    except Exception:
        return default

def _get_dict(*candidates, default=None):
    v = _get(*candidates, default=None)
    return dict(v) if isinstance(v, dict) else dict(default or {})

class Params:
    # ----- logging -----
    logging_file  = _get("common.logging.file", "file", default="moeprune.log")
    logging_level = _get("common.logging.level", "level", default="INFO")

    # ----- output -----
    outdir = _get("common.outdir", "outdir", default="output")

    # ----- model (default toy spec for the pipelines) -----
    model_spec = _get_dict("model", default={})

    # ----- synthetic search set -----
    dataset_n_samples  = _get_int("dataset.n_samples", "n_samples", default=64)
    dataset_prompt_len = _get_int("dataset.prompt_len", "prompt_len", default=8)
    dataset_answer_len = _get_int("dataset.answer_len", "answer_len", default=12)
    dataset_seed       = _get_int("dataset.seed", default=1234)

    # ----- calibration -----
    criterion = _get("calibration.criterion", "criterion", default="reap")

    # ----- budget -----
    sparsity = _get_float("budget.sparsity", "sparsity", default=0.25)
    budget   = _get("budget.budget", default=None)
    parity   = _get("budget.parity", "parity", default="any")

    # ----- search -----
    population_size = _get_int("search.population_size", "population_size", default=32)
    elite_size      = _get_int("search.elite_size", "elite_size", default=4)
    generations     = _get_int("search.generations", "generations", default=20)
    max_transfer    = _get_int("search.max_transfer", "max_transfer", default=4)
    mutation_cap    = _get_int("search.mutation_cap", "mutation_cap", default=3)
    search_seed     = _get_int("search.seed", default=42)
    fitness         = _get("search.fitness", "fitness", default="esap")
    workers         = _get_int("search.workers", "workers", default=1)
    resample_budget = _get_int("search.resample_budget", "resample_budget", default=1000)

    # ----- allocation -----
    enumeration_limit = _get_int("allocation.enumeration_limit", "enumeration_limit", default=10000)

    # ----- speculative decoding -----
    block_size     = _get_int("specdec.block_size", "block_size", default=4)
    max_new_tokens = _get_int("specdec.max_new_tokens", "max_new_tokens", default=64)
    specdec_prompts = _get_int("specdec.n_prompts", default=8)
    specdec_seed   = _get_int("specdec.seed", default=0)

    # ----- brute force -----
    brute_force_limit = _get_int("brute_force.limit", default=5000)

    # ----- output directory lock -----
    lock_attempts     = _get_int("lock.attempts", default=5)
    lock_wait_seconds = _get_float("lock.wait_seconds", default=0.5)
