from __future__ import annotations

import logging
import os
from pathlib import Path

from ..config.params import Params
from ..core.criteria import Criterion, calibrate, calibration_set, make_order
from ..core.moe import build_model
from ..io.artifacts import load_model_spec, sha256_file, write_json
from ..io.datasets import read_dataset
from ..utils.global_helpers import artifact_paths

logger = logging.getLogger(__name__)


def run(model_path: str | Path, dataset_path: str | Path, criterion: Criterion | str,
        outdir: str | Path) -> tuple[Path, Path]:
    """
    Score every expert on the dataset (prompt + answer tokens) and write
    scores_<criterion>.json and order_<criterion>.json. Both record the hashes
    of the model spec and dataset they were computed from.
    """
    criterion = Criterion(criterion)
    spec = load_model_spec(model_path)
    samples = read_dataset(dataset_path, spec)
    data = calibration_set([s.tokens for s in samples], name=os.path.basename(str(dataset_path)))
    scores = calibrate(build_model(spec), data, criterion)
    order = make_order(scores)

    inputs = {"model_spec": spec.spec_hash(), "dataset": sha256_file(dataset_path)}
    scores_path = Path(outdir) / f"scores_{criterion.value}.json"
    order_path = Path(outdir) / f"order_{criterion.value}.json"
    write_json(scores_path, {**scores.to_dict(), "inputs": inputs})
    write_json(order_path, {**order.to_dict(), "criterion": criterion.value, "inputs": inputs})
    for l, pi in enumerate(order.pi):
        logger.debug("Layer %d pruning order: %s", l, pi.tolist())
    return scores_path, order_path


def main() -> tuple[Path, Path]:
    paths = artifact_paths(Params.outdir, str(Params.criterion))
    return run(paths["model_spec"], paths["dataset"], Params.criterion, Params.outdir)


if __name__ == "__main__":
    main()
