# src/moeprune/io/datasets.py
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import List, Optional

import numpy as np

from ..core.esap import SearchSample
from ..core.moe import ModelSpec, MoEModel, next_token_distribution
from ..errors import ArtifactIOError, DataError, MoePruneError, ValidationError

logger = logging.getLogger(__name__)


def read_dataset(path: str | Path, spec: Optional[ModelSpec] = None) -> List[SearchSample]:
    """One {prompt: [ids], answer: [ids]} object per line; errors name the 1-based line."""
    samples: List[SearchSample] = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read dataset {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}:{lineno}: invalid JSON ({exc.msg})", line=lineno) from exc
        if not isinstance(obj, dict) or "prompt" not in obj or "answer" not in obj:
            raise DataError(f"{path}:{lineno}: expected an object with 'prompt' and 'answer'", line=lineno)
        try:
            sample = SearchSample(tuple(obj["prompt"]), tuple(obj["answer"]))
            if spec is not None:
                sample.check(spec)
        except (TypeError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: token ids must be integers", line=lineno) from exc
        except MoePruneError as exc:
            # re-raise with the line number attached, keeping the error class (and exit code)
            raise type(exc)(f"{path}:{lineno}: {exc}", field=exc.field, line=lineno) from exc
        samples.append(sample)
    logger.info("Loaded %d samples from %s", len(samples), path)
    return samples


def dataset_rows(samples: List[SearchSample]) -> list[dict]:
    return [s.to_dict() for s in samples]


def synthesize_dataset(model: MoEModel, n_samples: int, prompt_len: int, answer_len: int,
                       seed: int) -> List[SearchSample]:
    """Uniform random prompts; answers sampled from the full model at temperature 1."""
    spec = model.spec
    if n_samples < 1 or prompt_len < 1 or answer_len < 1:
        raise ValidationError("n_samples, prompt_len and answer_len must all be >= 1", field="dataset")
    if prompt_len + answer_len > spec.max_seq_len:
        raise ValidationError(
            f"prompt_len + answer_len = {prompt_len + answer_len} exceeds max_seq_len {spec.max_seq_len}",
            field="answer_len",
        )
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n_samples):
        prompt = [int(t) for t in rng.integers(0, spec.vocab_size, size=prompt_len)]
        seq = list(prompt)
        for _ in range(answer_len):
            p = next_token_distribution(model, seq)
            seq.append(int(rng.choice(spec.vocab_size, p=p)))
        samples.append(SearchSample(tuple(prompt), tuple(seq[prompt_len:])))
    logger.info("Synthesized %d samples (prompt_len=%d answer_len=%d seed=%d)",
                n_samples, prompt_len, answer_len, seed)
    return samples
