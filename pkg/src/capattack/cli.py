"""``capattack`` command line.

Exit codes: 0 ok, 1 every attack failed, 2 configuration error,
3 model-load failure, 4 missing artifact.

Artifacts go to ``<output_dir>/<mode>/<epsilon>/<sample_id>.{png,trace.jsonl,result.json}``.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

import click

from . import __version__
from .attack import run_attack
from .config import apply_overrides, attack_config, load_config
from .data import CaptionedSample, FilteredDataset, filter_hallucinations, load_dataset, select_target_pairs
from .encoders import (
    ContentCache,
    cached_encode_image,
    default_cache_dir,
    load_captioner,
    load_clip,
    load_image_encoder,
)
from .errors import CapAttackError, ConfigError, InsufficientSamples, MissingArtifact, MissingIndex, ModelLoadError
from .evaluation import (
    EvalRecord,
    aggregate_sweep,
    evaluate_images,
    plot_report,
    read_records_csv,
    render_table,
    report_csv,
    write_records_csv,
)
from .objectives import ObjectiveSpec
from .types import MODES, RunManifest, load_png, quantize_within, save_png, validate_config

log = logging.getLogger("capattack")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_MODEL, EXIT_MISSING = 0, 1, 2, 3, 4


def _exit_code(exc: Exception) -> int:
    if isinstance(exc, (ConfigError, MissingIndex, InsufficientSamples)):
        return EXIT_CONFIG
    if isinstance(exc, ModelLoadError):
        return EXIT_MODEL
    if isinstance(exc, MissingArtifact):
        return EXIT_MISSING
    return EXIT_FAILED


def _guarded(fn: Callable) -> Callable:
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            code = fn(*args, **kwargs)
        except CapAttackError as exc:
            click.echo(f"error [{exc.code}]: {exc}", err=True)
            sys.exit(_exit_code(exc))
        sys.exit(code or EXIT_OK)

    return wrapper


def _common(fn: Callable) -> Callable:
    options = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), help="YAML/JSON config file."),
        click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Dotted config override."),
        click.option("--mode", type=click.Choice(["untargeted", "targeted", "both"]), help="Attack mode(s)."),
        click.option("--epsilon", type=float, help="L-infinity budget in unit pixel range."),
        click.option("--grid", help="Comma-separated epsilon grid for sweeps."),
        click.option("--limit", type=int, help="Maximum number of samples."),
        click.option("--seed", type=int, help="Attack seed."),
        click.option("--pair-seed", type=int, help="Seed for targeted source/target pairing."),
        click.option("--workers", type=int, help="Parallel workers across samples."),
        click.option("--output-dir", type=click.Path(file_okay=False), help="Artifact directory."),
        click.option("--resume", is_flag=True, help="Skip samples whose artifacts already exist."),
    ]
    for opt in reversed(options):
        fn = opt(fn)
    return fn


@dataclass
class Run:
    cfg: dict
    resume: bool

    @property
    def out(self) -> Path:
        return Path(self.cfg["run"]["output_dir"])

    @property
    def workers(self) -> int:
        return max(1, int(self.cfg["run"]["workers"] or 1))

    @functools.cached_property
    def cache(self) -> ContentCache:
        return ContentCache(Path(self.cfg["models"]["cache_dir"] or default_cache_dir()))

    @property
    def manifest_path(self) -> Path:
        return Path(self.cfg["data"]["manifest"] or self.out / "filtered.json")

    def model_cache_dir(self) -> str | None:
        return self.cfg["models"]["cache_dir"]


def _resolve(config_path, overrides, mode, epsilon, grid, limit, seed, pair_seed, workers, output_dir, resume) -> Run:
    cfg = load_config(config_path)
    apply_overrides(cfg, list(overrides))
    if mode == "both":
        cfg["sweep"]["modes"] = list(MODES)
    elif mode:
        cfg["attack"]["mode"] = mode
        cfg["sweep"]["modes"] = [mode]
    if epsilon is not None:
        cfg["attack"]["epsilon"] = epsilon
    if grid:
        try:
            cfg["sweep"]["grid"] = [float(g) for g in grid.split(",") if g.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad --grid {grid!r}") from exc
    if limit is not None:
        cfg["data"]["limit"] = limit
    if seed is not None:
        cfg["attack"]["seed"] = seed
    if pair_seed is not None:
        cfg["data"]["pair_seed"] = pair_seed
    if workers is not None:
        cfg["run"]["workers"] = workers
    if output_dir:
        cfg["run"]["output_dir"] = output_dir
    for m in cfg["sweep"]["modes"]:
        if m not in MODES:
            raise ConfigError(f"unknown mode {m!r} in sweep.modes")
    try:
        acfg = attack_config(cfg)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    problems = validate_config(acfg)
    for eps in cfg["sweep"]["grid"]:
        problems += [p for p in validate_config(acfg.replace(epsilon=eps)) if p.field == "epsilon"]
    if problems:
        raise ConfigError("; ".join(f"{p.code}: {p.message}" for p in problems))
    return Run(cfg, resume)


def _load(loader, model_id: str, run: Run):
    try:
        return loader(model_id, run.model_cache_dir())
    except (ConfigError, ModelLoadError):
        raise
    except Exception as exc:
        raise ModelLoadError(f"{model_id}: {exc}") from exc


def _input_size(captioner) -> tuple[int, int] | None:
    size = getattr(captioner, "input_size", None)
    if size is None and hasattr(captioner, "encoder"):
        size = captioner.encoder.input_size
    return tuple(size) if size else None


def _eps_dir(eps: float) -> str:
    return f"{eps:g}"


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


@click.group()
@click.version_option(__version__, prog_name="capattack")
@click.option("-v", "--verbose", count=True, help="-v info, -vv debug.")
def main(verbose: int) -> None:
    """Gray-box caption attacks: filter data, attack, evaluate, report."""
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


# -- filter ------------------------------------------------------------------


@main.command("filter")
@_common
@click.option("--tau", type=float, help="Caption-agreement threshold.")
@_guarded
def cmd_filter(tau, **opts) -> int:
    """Caption clean images and keep those that agree with their references."""
    run = _resolve(**opts)
    if tau is not None:
        run.cfg["data"]["tau"] = tau
    data = run.cfg["data"]
    if not data["root"]:
        raise ConfigError("data.root is required for filter")
    tau = float(data["tau"])
    if not 0 < tau <= 1:
        raise ConfigError(f"data.tau must lie in (0, 1], got {tau}")
    samples = load_dataset(data["root"], data["limit"], int(data["seed"]), data["index"])
    captioner = _load(load_captioner, run.cfg["models"]["captioner_id"], run)
    clip = _load(load_clip, run.cfg["models"]["clip_id"], run)
    hits0, misses0 = run.cache.hits, run.cache.misses
    dataset = filter_hallucinations(
        samples, captioner, clip.text_encoder, tau, run.cache, _input_size(captioner), run.workers
    )
    dataset.save(run.manifest_path)
    click.echo(
        f"retained {len(dataset.samples)}/{len(dataset.candidates)} at tau={tau:g} "
        f"(captions: {run.cache.hits - hits0} cached, {run.cache.misses - misses0} computed) "
        f"-> {run.manifest_path}"
    )
    return EXIT_OK


# -- attack / sweep -----------------------------------------------------------


def _manifest(run: Run) -> FilteredDataset:
    path = run.manifest_path
    if not path.is_file():
        raise MissingArtifact(f"filtered manifest {path} not found; run `capattack filter` first")
    return FilteredDataset.load(path)


def _jobs(run: Run, dataset: FilteredDataset, mode: str) -> list[tuple[CaptionedSample, CaptionedSample | None]]:
    limit = run.cfg["data"]["limit"]
    if mode == "untargeted":
        jobs = [(s, None) for s in dataset.samples]
    else:
        jobs = _pairs(run, dataset)
    return jobs if limit is None else jobs[: max(0, int(limit))]


def _pairs(run: Run, dataset: FilteredDataset):
    data = run.cfg["data"]
    by_id = {s.sample_id: s for s in dataset.samples}
    if data["pairs"]:
        path = Path(data["pairs"])
        if not path.is_file():
            raise ConfigError(f"pairs file {path} not found")
        rows = json.loads(path.read_text(encoding="utf-8"))["pairs"]
        try:
            return [(by_id[r["source"]], by_id[r["target"]]) for r in rows]
        except KeyError as exc:
            raise ConfigError(f"pairs file names a sample that is not retained: {exc}") from exc
    if data["pair_seed"] is None:
        raise ConfigError("targeted mode needs data.pair_seed (--pair-seed) or a data.pairs file")
    pairs = select_target_pairs(dataset, int(data["pair_seed"]))
    payload = {
        "pair_seed": int(data["pair_seed"]),
        "pairs": [{"source": s.sample_id, "target": t.sample_id} for s, t in pairs],
    }
    _write_text(run.out / "pairs.json", json.dumps(payload, indent=2) + "\n")
    return pairs


ARTIFACT_SUFFIXES = (".png", ".trace.jsonl", ".result.json")


def _artifacts(cell: Path, sample_id: str) -> list[Path]:
    return [cell / f"{sample_id}{suffix}" for suffix in ARTIFACT_SUFFIXES]


@dataclass
class CellOutcome:
    mode: str
    epsilon: float
    done: int = 0
    skipped: int = 0
    failed: int = 0

    @property
    def complete(self) -> bool:
        return self.failed == 0


def _write_run_manifest(cell: Path, manifest: RunManifest) -> None:
    path = cell / "manifest.json"
    if path.is_file():
        try:
            old = RunManifest.from_json(path.read_text(encoding="utf-8"))
        except (ValueError, KeyError, CapAttackError):
            old = None
        if old is not None and old.timestamp and old == RunManifest(**{**manifest.__dict__, "timestamp": old.timestamp}):
            return
    _write_text(path, manifest.to_json())


def run_cell(run: Run, dataset: FilteredDataset, encoder, mode: str, epsilon: float) -> CellOutcome:
    acfg = attack_config(run.cfg, mode=mode, epsilon=float(epsilon))
    cell = run.out / mode / _eps_dir(epsilon)
    cell.mkdir(parents=True, exist_ok=True)
    jobs = _jobs(run, dataset, mode)
    outcome = CellOutcome(mode, float(epsilon))

    def one(job) -> str:
        source, target = job
        paths = _artifacts(cell, source.sample_id)
        if run.resume and all(p.is_file() for p in paths):
            return "skipped"
        try:
            clean = source.load_image(encoder.input_size)
            ref_img = clean if target is None else target.load_image(encoder.input_size)
            reference = cached_encode_image(encoder, ref_img, run.cache)
            spec = ObjectiveSpec(mode, acfg.lam, reference, clean)
            trace: list[str] = []
            result = run_attack(clean, spec, acfg, encoder, on_step=lambda r: trace.append(json.dumps(r)))
            adv = quantize_within(result.adversarial_image, clean, acfg.epsilon)
            png, trace_path, result_path = paths
            save_png(adv, png)
            _write_text(trace_path, "".join(line + "\n" for line in trace))
            record = {
                "sample_id": source.sample_id,
                "target_id": None if target is None else target.sample_id,
                "mode": mode,
                "epsilon": acfg.epsilon,
                "encoder_id": encoder.encoder_id,
                "image": png.name,
                "trace": trace_path.name,
                "config": acfg.to_dict(),
                **result.record(),
            }
            _write_text(result_path, json.dumps(record, indent=2) + "\n")
            log.info("%s %s eps=%g: cs=%.4f steps=%d (%s)", mode, source.sample_id, epsilon,
                     result.cs_final, result.steps_run, result.stop_reason)
            return "done"
        except CapAttackError as exc:
            log.error("%s %s eps=%g failed: %s", mode, source.sample_id, epsilon, exc)
            return "failed"

    if run.workers > 1:
        with ThreadPoolExecutor(max_workers=run.workers) as pool:
            statuses = list(pool.map(one, jobs))
    else:
        statuses = [one(j) for j in jobs]
    outcome.done = statuses.count("done")
    outcome.skipped = statuses.count("skipped")
    outcome.failed = statuses.count("failed")
    _write_run_manifest(
        cell,
        RunManifest(
            config=acfg,
            input_paths=tuple(s.image_path for s, _ in jobs),
            output_dir=str(cell),
            encoder_id=encoder.encoder_id,
            timestamp=datetime.now(timezone.utc).isoformat(timespec="seconds"),
            git_or_version_tag=f"capattack {__version__}",
        ),
    )
    return outcome


def _echo_cell(c: CellOutcome) -> None:
    click.echo(f"{c.mode} eps={c.epsilon:g}: {c.done} attacked, {c.skipped} skipped, {c.failed} failed")


@main.command("attack")
@_common
@_guarded
def cmd_attack(**opts) -> int:
    """Attack filtered samples at one epsilon. Loads only the image encoder."""
    run = _resolve(**opts)
    dataset = _manifest(run)
    mode = run.cfg["attack"]["mode"]
    if mode == "targeted":
        _pairs(run, dataset)
    encoder = _load(load_image_encoder, run.cfg["models"]["encoder_id"], run)
    outcome = run_cell(run, dataset, encoder, mode, float(run.cfg["attack"]["epsilon"]))
    _echo_cell(outcome)
    if outcome.failed and not (outcome.done or outcome.skipped):
        return EXIT_FAILED
    return EXIT_OK


@main.command("sweep")
@_common
@_guarded
def cmd_sweep(**opts) -> int:
    """Attack every (mode, epsilon) cell of the grid, then evaluate and report."""
    run = _resolve(**opts)
    dataset = _manifest(run)
    modes = run.cfg["sweep"]["modes"]
    grid = [float(e) for e in run.cfg["sweep"]["grid"]]
    if "targeted" in modes:
        _pairs(run, dataset)
    encoder = _load(load_image_encoder, run.cfg["models"]["encoder_id"], run)
    cells = []
    for mode in modes:
        for eps in grid:
            cells.append(run_cell(run, dataset, encoder, mode, eps))
            _echo_cell(cells[-1])
    complete = all(c.complete for c in cells)
    summary = {
        "complete": complete,
        "cells": [
            {"mode": c.mode, "epsilon": c.epsilon, "done": c.done, "skipped": c.skipped, "failed": c.failed}
            for c in cells
        ],
    }
    _write_text(run.out / "sweep.json", json.dumps(summary, indent=2) + "\n")
    if not any(c.done or c.skipped for c in cells):
        click.echo("every attack failed", err=True)
        return EXIT_FAILED
    if not complete:
        click.echo("warning: sweep grid is incomplete; see sweep.json", err=True)
    _evaluate(run, dataset)
    _report(run)
    return EXIT_OK


# -- evaluate / report ---------------------------------------------------------


def _result_files(out: Path) -> list[tuple[str, float, Path]]:
    found = []
    for mode in MODES:
        mode_dir = out / mode
        if not mode_dir.is_dir():
            continue
        for cell in mode_dir.iterdir():
            if not cell.is_dir():
                continue
            try:
                eps = float(cell.name)
            except ValueError:
                continue
            found += [(mode, eps, p) for p in sorted(cell.glob("*.result.json"))]
    found.sort(key=lambda t: (MODES.index(t[0]), t[1], t[2].name))
    return found


def _evaluate(run: Run, dataset: FilteredDataset) -> Path:
    results = _result_files(run.out)
    if not results:
        raise MissingArtifact(f"no attack results under {run.out}")
    by_id = {s.sample_id: s for s in dataset.candidates}
    jobs = []
    for mode, eps, path in results:
        record = json.loads(path.read_text(encoding="utf-8"))
        png = path.parent / record["image"]
        if not png.is_file():
            raise MissingArtifact(f"{png} referenced by {path} is missing")
        if record["sample_id"] not in by_id:
            raise MissingArtifact(f"sample {record['sample_id']!r} is not in the filtered manifest")
        jobs.append((by_id[record["sample_id"]], png, mode, float(record["epsilon"])))

    captioner = _load(load_captioner, run.cfg["models"]["captioner_id"], run)
    clip = _load(load_clip, run.cfg["models"]["clip_id"], run)

    def one(job) -> EvalRecord:
        sample, png, mode, eps = job
        adv = load_png(png)
        clean = sample.load_image(adv.shape[:2])
        return evaluate_images(sample, clean, adv, captioner, clip, epsilon=eps, mode=mode, cache=run.cache)

    if run.workers > 1:
        with ThreadPoolExecutor(max_workers=run.workers) as pool:
            records = list(pool.map(one, jobs))
    else:
        records = [one(j) for j in jobs]
    path = run.out / "eval.csv"
    write_records_csv(records, path, extra=bool(run.cfg["eval"]["generated_caption_column"]))
    click.echo(f"wrote {len(records)} evaluation rows -> {path}")
    return path


def _report(run: Run) -> None:
    path = run.out / "eval.csv"
    if not path.is_file():
        raise MissingArtifact(f"{path} not found; run `capattack evaluate` first")
    records = read_records_csv(path)
    if not records:
        raise MissingArtifact(f"{path} has no rows")
    report = aggregate_sweep(records)
    table = render_table(report)
    _write_text(run.out / "report.json", report.to_json())
    _write_text(run.out / "report.csv", report_csv(report))
    _write_text(run.out / "report.md", table)
    plot_report(report, run.out / "report.png")
    click.echo(table)


@main.command("evaluate")
@_common
@_guarded
def cmd_evaluate(**opts) -> int:
    """Caption and CLIP-score every attack artifact into eval.csv."""
    run = _resolve(**opts)
    _evaluate(run, _manifest(run))
    return EXIT_OK


@main.command("report")
@_common
@_guarded
def cmd_report(**opts) -> int:
    """Aggregate eval.csv into mean ± std tables, JSON, CSV and a plot."""
    run = _resolve(**opts)
    _report(run)
    return EXIT_OK


@main.command("make-toy-dataset")
@click.argument("root", type=click.Path(file_okay=False))
@click.option("-n", "count", type=int, default=24, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--image-size", type=int, default=32, show_default=True)
@click.option("--captioner-id", default="toy", show_default=True)
@_guarded
def cmd_make_toy_dataset(root, count, seed, image_size, captioner_id) -> int:
    """Write a synthetic dataset that the toy models can caption."""
    from .synthetic import make_toy_dataset

    kinds = make_toy_dataset(root, count, seed, image_size, captioner_id)
    tally = {k: list(kinds.values()).count(k) for k in sorted(set(kinds.values()))}
    click.echo(f"wrote {len(kinds)} samples to {root} {tally}")
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    main()
