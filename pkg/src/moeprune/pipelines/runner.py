# src/moeprune/pipelines/runner.py
from __future__ import annotations
import logging
import time
from typing import Any, Callable, Iterable

logger = logging.getLogger(__name__)

class Step:
    def __init__(self, name: str, fn: Callable[..., Any], kwargs: dict | None = None):
        self.name = name
        self.fn = fn
        self.kwargs = kwargs or {}

    def run(self) -> Any:
        logger.info("▶️  Step: %s", self.name)
        t0 = time.perf_counter()
        result = self.fn(**self.kwargs)
        logger.info("   %s done in %.2fs", self.name, time.perf_counter() - t0)
        return result

class Pipeline:
    def __init__(self, name: str, steps: Iterable[Step]):
        self.name = name
        self.steps = list(steps)

    def run(self) -> dict[str, Any]:
        """Run steps in order; the first failing step stops the pipeline."""
        logger.info("🚀 Pipeline: %s (steps=%d)", self.name, len(self.steps))
        results = {s.name: s.run() for s in self.steps}
        logger.info("✅ Pipeline finished: %s", self.name)
        return results
