# src/moeprune/pipelines/cli.py
from __future__ import annotations
import dataclasses
import functools
import logging
from pathlib import Path
from typing import List, Optional

import typer
import yaml

from ..config.params import Params
from ..core.allocation import Parity
from ..core.criteria import Criterion
from ..core.esap import FitnessKind
from ..core.evosearch import SearchConfig
from ..errors import ArtifactIOError, MoePruneError, SizeError
from ..io.artifacts import load_model_spec
from ..tasks import (
    brute_force as T_brute_force,
    cache_logits as T_cache_logits,
    calibrate as T_calibrate,
    evaluate as T_evaluate,
    gen_dataset as T_gen_dataset,
    gen_model as T_gen_model,
    make_manifest as T_make_manifest,
    search as T_search,
)
from ..utils.global_helpers import artifact_paths, setup_logging
from .flows import PIPELINES

app = typer.Typer(add_completion=False, help="Layer-wise expert pruning allocation search for toy sparse MoE models.")
logger = logging.getLogger(__name__)

EXIT_IO = ArtifactIOError.exit_code
EXIT_VALIDATION = 2


def _paths():
    return artifact_paths(Params.outdir, str(Params.criterion))


def _guarded(fn):
    """Map package errors onto exit codes: 2 validation, 3 staleness, 4 size, 5 I/O."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except SizeError as exc:
            typer.echo(f"error: {exc} (count={exc.count}{'' if exc.exact else '+'})", err=True)
            raise typer.Exit(exc.exit_code)
        except MoePruneError as exc:
            where = f" [field={exc.field}]" if exc.field else ""
            typer.echo(f"error: {exc}{where}", err=True)
            raise typer.Exit(exc.exit_code)
        except yaml.YAMLError as exc:
            typer.echo(f"error: malformed input: {exc}", err=True)
            raise typer.Exit(EXIT_VALIDATION)
        except OSError as exc:
            typer.echo(f"error: {exc}", err=True)
            raise typer.Exit(EXIT_IO)
    return wrapper


@app.callback()
def main(log_level: Optional[str] = typer.Option(None, "--log-level", help="Override the configured log level")):
    setup_logging(level=log_level)


@app.command("gen-model")
@_guarded
def gen_model(
    spec_file: Path = typer.Argument(..., help="Model spec JSON"),
    out: Optional[Path] = typer.Option(None, "--out", help="Where to write the spec artifact"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Override weight_seed"),
):
    spec = load_model_spec(spec_file)
    if seed is not None:
        spec = dataclasses.replace(spec, weight_seed=seed)
    artifact = T_gen_model.run(spec, out or _paths()["model_spec"])
    typer.echo(artifact["spec_hash"])


@app.command("gen-dataset")
@_guarded
def gen_dataset(
    model: Path = typer.Argument(..., help="Model spec artifact"),
    out: Optional[Path] = typer.Option(None, "--out"),
    n_samples: int = typer.Option(Params.dataset_n_samples, "--n-samples"),
    prompt_len: int = typer.Option(Params.dataset_prompt_len, "--prompt-len"),
    answer_len: int = typer.Option(Params.dataset_answer_len, "--answer-len"),
    seed: int = typer.Option(Params.dataset_seed, "--seed"),
):
    n = T_gen_dataset.run(model, out or _paths()["dataset"], n_samples, prompt_len, answer_len, seed)
    typer.echo(f"{n} samples")


@app.command()
@_guarded
def calibrate(
    model: Path = typer.Argument(...),
    dataset: Path = typer.Argument(...),
    criterion: Criterion = typer.Option(Criterion(Params.criterion), "--criterion"),
    out: Optional[Path] = typer.Option(None, "--out", help="Output directory"),
):
    scores_path, order_path = T_calibrate.run(model, dataset, criterion, out or Params.outdir)
    typer.echo(f"{scores_path}\n{order_path}")


@app.command("cache-logits")
@_guarded
def cache_logits(
    model: Path = typer.Argument(...),
    dataset: Path = typer.Argument(...),
    out: Optional[Path] = typer.Option(None, "--out"),
):
    cache = T_cache_logits.run(model, dataset, out or _paths()["cache"])
    typer.echo(f"{cache.sample_count} samples, {sum(cache.position_counts)} positions")


@app.command("make-manifest")
@_guarded
def make_manifest(
    model: Path = typer.Argument(...),
    dataset: Path = typer.Argument(...),
    order: Path = typer.Argument(...),
    out: Optional[Path] = typer.Option(None, "--out", help="Directory for budget, search config and manifest"),
    budget: Optional[int] = typer.Option(Params.budget, "--budget", help="Experts removed in total"),
    sparsity: float = typer.Option(Params.sparsity, "--sparsity", help="Used when --budget is not given"),
    parity: Parity = typer.Option(Parity(Params.parity), "--parity"),
    fitness: FitnessKind = typer.Option(FitnessKind(Params.fitness), "--fitness"),
    seed: int = typer.Option(Params.search_seed, "--seed"),
    population_size: int = typer.Option(Params.population_size, "--population-size"),
    elite_size: int = typer.Option(Params.elite_size, "--elite-size"),
    generations: int = typer.Option(Params.generations, "--generations"),
    max_transfer: int = typer.Option(Params.max_transfer, "--max-transfer"),
    mutation_cap: int = typer.Option(Params.mutation_cap, "--mutation-cap"),
    workers: int = typer.Option(Params.workers, "--workers"),
    cache: Optional[Path] = typer.Option(None, "--cache", help="Logit cache to reuse"),
    search_out: Optional[Path] = typer.Option(None, "--search-out", help="Output directory recorded for search"),
):
    config = SearchConfig(
        population_size=population_size, elite_size=elite_size, generations=generations,
        max_transfer=max_transfer, mutation_cap=mutation_cap, seed=seed, parity=parity,
        fitness=fitness, workers=workers, resample_budget=Params.resample_budget,
        enumeration_limit=Params.enumeration_limit,
    )
    manifest = T_make_manifest.run(model, dataset, order, out or Params.outdir, config,
                                   budget=budget, sparsity=sparsity, cache_path=cache, output_dir=search_out)
    typer.echo(str(manifest.output_dir))


@app.command()
@_guarded
def search(
    manifest: Path = typer.Argument(...),
    out: Optional[Path] = typer.Option(None, "--out", help="Override the manifest's output directory"),
):
    outputs = T_search.run(
        manifest, out,
        specdec_prompts=Params.specdec_prompts, block_size=Params.block_size,
        max_new_tokens=Params.max_new_tokens, specdec_seed=Params.specdec_seed,
    )
    best = outputs.run.best_fitness
    typer.echo(f"best allocation {outputs.run.best_allocation}  {best.kind.value}={best.value:.6f}")
    typer.echo(T_search.format_density(outputs.density))


@app.command()
@_guarded
def evaluate(
    model: Path = typer.Argument(...),
    order: Path = typer.Argument(...),
    allocation: Path = typer.Argument(...),
    dataset: Path = typer.Argument(...),
    fitness: Optional[List[FitnessKind]] = typer.Option(None, "--fitness", help="Repeat for several kinds"),
    cache: Optional[Path] = typer.Option(None, "--cache"),
    out: Optional[Path] = typer.Option(None, "--out", help="CSV report path"),
    seed: int = typer.Option(Params.search_seed, "--seed"),
):
    report = T_evaluate.run(
        model, order, allocation, dataset, kinds=fitness or T_evaluate.DEFAULT_KINDS, out=out,
        cache_path=cache, seed=seed, specdec_prompts=Params.specdec_prompts,
        block_size=Params.block_size, max_new_tokens=Params.max_new_tokens,
    )
    typer.echo(report.to_string(index=False))


@app.command("brute-force")
@_guarded
def brute_force(
    manifest: Path = typer.Argument(...),
    limit: int = typer.Option(Params.brute_force_limit, "--limit"),
    out: Optional[Path] = typer.Option(None, "--out"),
):
    df = T_brute_force.run(
        manifest, limit, out,
        specdec_prompts=Params.specdec_prompts, block_size=Params.block_size,
        max_new_tokens=Params.max_new_tokens, specdec_seed=Params.specdec_seed,
    )
    typer.echo(df.sort_values("rank").to_string(index=False))


@app.command()
@_guarded
def run(name: str = typer.Argument(..., help="prepare | search | all")):
    name = name.lower()
    if name not in PIPELINES:
        raise typer.BadParameter("Unknown pipeline. Use: prepare, search, all")
    PIPELINES[name]().run()


if __name__ == "__main__":
    app()
