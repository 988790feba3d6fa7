# src/moeprune/pipelines/flows.py
from __future__ import annotations
import logging
from ..tasks import (
    gen_model as T_gen_model,
    gen_dataset as T_gen_dataset,
    calibrate as T_calibrate,
    cache_logits as T_cache_logits,
    make_manifest as T_make_manifest,
    search as T_search,
    evaluate as T_evaluate,
)
from .runner import Pipeline, Step

logger = logging.getLogger(__name__)

# every step reads its arguments from parameters.yml through main()

def pipeline_prepare() -> Pipeline:
    steps = [
        Step("gen_model",     T_gen_model.main),
        Step("gen_dataset",   T_gen_dataset.main),
        Step("calibrate",     T_calibrate.main),
        Step("cache_logits",  T_cache_logits.main),
        Step("make_manifest", T_make_manifest.main),
    ]
    return Pipeline("prepare", steps)

def pipeline_search() -> Pipeline:
    steps = [
        Step("search",   T_search.main),
        Step("evaluate", T_evaluate.main),
    ]
    return Pipeline("search", steps)

def pipeline_all() -> Pipeline:
    # prepare -> search
    p = pipeline_prepare().steps
    s = pipeline_search().steps
    return Pipeline("all", [*p, *s])

PIPELINES = {
    "prepare": pipeline_prepare,
    "search": pipeline_search,
    "all": pipeline_all,
}
