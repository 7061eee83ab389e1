"""Command-line interface for the fundus vision-language pipeline."""

from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional

import typer

from .checkpoint import load_checkpoint
from .config import DEFAULT_CONFIG_FILE, DEFAULT_SEED
from .dialogue import RemoteDialogueGenerator, TemplateDialogueGenerator, create_dialogue_app
from .errors import FundusVlmError, ValidationError
from .evaluation import (
    EvalReport,
    ModelResponder,
    OracleResponder,
    RandomResponder,
    ReportRow,
    evaluate,
    label_universe,
    mcq_cases_from_corpus,
    multiple_choice_eval,
    read_cases,
    render_report,
    synth_mcq_cases,
)
from .forge import (
    corpus_kind,
    forge_fundus_corpus,
    forge_pretrain_corpus,
    read_fundus_corpus,
    read_pretrain_corpus,
    read_pretrain_pairs,
    synth_pretrain_pairs,
    validate_corpus,
    write_corpus,
)
from .manifest import RunManifest, changed_inputs, read_manifest, replay_argv
from .model import ModelParams, init_params
from .settings import AppSettings, load_app_settings, snapshot
from .train import TrainResult, answer_question, load_image, run_finetune, run_pretrain
from .utils import configure_logging

logger = logging.getLogger(__name__)

app = typer.Typer(help="Desk-scale fundus vision-language model: corpus forge, training and clinical evaluation.")


class CorpusKind(str, Enum):
    fundus = "fundus"
    pretrain = "pretrain"


class ResponderKind(str, Enum):
    model = "model"
    random = "random"
    oracle = "oracle"


@contextmanager
def _cli_errors() -> Iterator[None]:
    try:
        yield
    except ValidationError as exc:
        for field_name, problem in exc.problems:
            logger.error("%s: %s", field_name or "error", problem)
        raise typer.Exit(code=1)
    except FundusVlmError as exc:
        logger.error("%s", exc)
        raise typer.Exit(code=1)


def _argv(ctx: typer.Context) -> List[str]:
    """Reconstruct the invocation of the current command from its parsed parameters."""
    argv = [ctx.info_name or ""]
    for param in ctx.command.params:
        value = ctx.params.get(param.name)
        if value is None or param.param_type_name != "option":
            continue
        flag = max(param.opts, key=len)
        if param.is_flag:
            if value:
                argv.append(flag)
            continue
        for item in value if isinstance(value, (list, tuple)) else [value]:
            argv.extend([flag, item.value if isinstance(item, Enum) else str(item)])
    return argv


def _settings(config_file: Path, overrides: Optional[Dict[str, Any]] = None) -> AppSettings:
    return load_app_settings(config_file, overrides)


def _manifest(ctx: typer.Context, settings: AppSettings, seed: int, inputs: List[Optional[Path]]) -> RunManifest:
    manifest = RunManifest(command=ctx.info_name or "", argv=_argv(ctx), seed=seed, config=snapshot(settings))
    for path in inputs:
        if path is not None:
            manifest.add_input(path)
    typer.echo(f"seed: {seed}")
    return manifest


def _load_params(checkpoint: Optional[Path], settings: AppSettings, seed: int) -> ModelParams:
    if checkpoint is None:
        return init_params(settings.model, seed)
    loaded = load_checkpoint(checkpoint)
    if loaded.params.config != settings.model:
        logger.info("Using the model configuration stored in %s", checkpoint)
    return loaded.params


@app.callback()
def main(
    log_level: str = typer.Option(
        "INFO",
        help="Log level: DEBUG, INFO, WARNING, ERROR.",
        case_sensitive=False,
    ),
) -> None:
    """
    Global CLI setup (currently only the log level).
    """
    configure_logging(log_level)
    logger.debug("Log level set to %s", log_level.upper())


@app.command()
def forge(
    ctx: typer.Context,
    out: Path = typer.Option(Path("corpus/corpus.jsonl"), help="Where to write the JSONL corpus; images go next to it."),
    n: Optional[int] = typer.Option(None, "--n", help="Number of records; overrides [forge].records."),
    kind: CorpusKind = typer.Option(CorpusKind.fundus, help="fundus: records with signs and dialogues; pretrain: caption dialogues."),
    pairs: Optional[Path] = typer.Option(None, exists=True, dir_okay=False, help="Caption pairs JSONL for --kind pretrain."),
    dialogue_url: Optional[str] = typer.Option(None, help="Dialogue generator endpoint; overrides [forge].dialogue_url and the environment."),
    seed: int = typer.Option(DEFAULT_SEED, help="Random seed."),
    config_file: Path = typer.Option(DEFAULT_CONFIG_FILE, "--config", help="TOML config file path."),
) -> None:
    """Build and validate a fundus corpus (or a pretrain caption corpus)."""
    with _cli_errors():
        settings = _settings(config_file, {"forge/records": n, "forge/dialogue_url": dialogue_url})
        manifest = _manifest(ctx, settings, seed, [pairs])
        fs = settings.forge
        generator = RemoteDialogueGenerator(fs.dialogue_url, fs.dialogue_timeout) if fs.dialogue_url else TemplateDialogueGenerator()
        if kind is CorpusKind.fundus:
            records = forge_fundus_corpus(out.parent, fs, seed, generator)
            written = write_corpus(out, records)
            report = validate_corpus(records, settings.model.max_tokens)
            typer.echo(f"{written} records -> {out}; {report.summary()}")
        else:
            if pairs is not None:
                source = read_pretrain_pairs(pairs)
            else:
                source = synth_pretrain_pairs(forge_fundus_corpus(out.parent, fs, seed, generator), seed)
            samples = forge_pretrain_corpus(source, seed, fs.modality_threshold, fs.long_answer_words)
            written = write_corpus(out, samples)
            report = None
            typer.echo(f"{written} caption dialogues -> {out}")
        manifest.finish(out, [out])
    if report is not None and not report.ok:
        logger.error("Corpus has %d validation violations", len(report.violations))
        raise typer.Exit(code=1)


def _train(
    ctx: typer.Context,
    mode: str,
    corpus: Path,
    checkpoint: Optional[Path],
    out: Path,
    seed: int,
    config_file: Path,
    max_steps: Optional[int],
) -> TrainResult:
    settings = _settings(config_file, {"train/seed": seed})
    manifest = _manifest(ctx, settings, seed, [corpus, checkpoint])
    params = _load_params(checkpoint, settings, seed)
    kind = corpus_kind(corpus)
    if mode == "finetune":
        if kind != "fundus":
            raise ValidationError([(str(corpus), "finetuning needs a fundus corpus with sign vectors")])
        result = run_finetune(read_fundus_corpus(corpus), params, settings.train, corpus.parent, out, max_steps=max_steps)
    else:
        data = read_fundus_corpus(corpus) if kind == "fundus" else read_pretrain_corpus(corpus)
        result = run_pretrain(data, params, settings.train, corpus.parent, out, max_steps=max_steps)
    manifest.finish(out, [out / "metrics.csv", *result.checkpoints])
    last = result.metrics.iloc[-1]
    typer.echo(f"{mode}: {len(result.metrics)} steps, final total loss {last['total']:.4f}")
    if result.checkpoints:
        typer.echo(f"checkpoint: {result.checkpoints[-1]}")
    return result


@app.command()
def pretrain(
    ctx: typer.Context,
    corpus: Path = typer.Option(..., exists=True, dir_okay=False, readable=True, help="Pretrain (or fundus) corpus JSONL."),
    checkpoint: Optional[Path] = typer.Option(None, exists=True, dir_okay=False, help="Start from this checkpoint."),
    out: Path = typer.Option(Path("runs/pretrain"), help="Run directory for metrics, checkpoints and manifest."),
    max_steps: Optional[int] = typer.Option(None, min=1, help="Stop after this many optimizer steps."),
    seed: int = typer.Option(DEFAULT_SEED, help="Random seed."),
    config_file: Path = typer.Option(DEFAULT_CONFIG_FILE, "--config", help="TOML config file path."),
) -> None:
    """Text-generation pretraining on caption dialogues."""
    with _cli_errors():
        _train(ctx, "pretrain", corpus, checkpoint, out, seed, config_file, max_steps)


@app.command()
def finetune(
    ctx: typer.Context,
    corpus: Path = typer.Option(..., exists=True, dir_okay=False, readable=True, help="Fundus corpus JSONL."),
    checkpoint: Optional[Path] = typer.Option(None, exists=True, dir_okay=False, help="Start from this checkpoint (usually pretrained)."),
    out: Path = typer.Option(Path("runs/finetune"), help="Run directory for metrics, checkpoints and manifest."),
    max_steps: Optional[int] = typer.Option(None, min=1, help="Stop after this many optimizer steps."),
    seed: int = typer.Option(DEFAULT_SEED, help="Random seed."),
    config_file: Path = typer.Option(DEFAULT_CONFIG_FILE, "--config", help="TOML config file path."),
) -> None:
    """Multi-objective finetuning (contrastive + sign + text generation)."""
    with _cli_errors():
        result = _train(ctx, "finetune", corpus, checkpoint, out, seed, config_file, max_steps)
    if result.skipped:
        logger.error("%d records failed validation and were skipped", result.skipped)
        raise typer.Exit(code=1)


@app.command("eval")
def evaluate_cmd(
    ctx: typer.Context,
    cases: Path = typer.Option(..., exists=True, dir_okay=False, readable=True, help="EvalCase JSONL file."),
    out: Path = typer.Option(Path("runs/eval"), help="Directory for report.csv, summary.txt and manifest."),
    seed: int = typer.Option(DEFAULT_SEED, help="Bootstrap seed."),
    config_file: Path = typer.Option(DEFAULT_CONFIG_FILE, "--config", help="TOML config file path."),
) -> None:
    """Compute every evaluation statistic over a case file."""
    with _cli_errors():
        settings = _settings(config_file)
        manifest = _manifest(ctx, settings, seed, [cases])
        report = evaluate(read_cases(cases), settings.eval, seed)
        csv_path = report.write(out)
        manifest.finish(out, [csv_path, out / "summary.txt"])
        typer.echo(report.summary())


@app.command()
def mcq(
    ctx: typer.Context,
    corpus: Optional[Path] = typer.Option(None, exists=True, dir_okay=False, help="Fundus corpus; single-label records become cases."),
    checkpoint: Optional[Path] = typer.Option(None, exists=True, dir_okay=False, help="Model checkpoint for the model responder."),
    responder: Optional[ResponderKind] = typer.Option(None, help="model (needs --checkpoint and --corpus), random or oracle."),
    threshold: Optional[float] = typer.Option(None, help="Sign threshold; overrides [model].sign_threshold."),
    out: Path = typer.Option(Path("runs/mcq"), help="Directory for report.csv, summary.txt and manifest."),
    seed: int = typer.Option(DEFAULT_SEED, help="Seed for option construction and the random responder."),
    config_file: Path = typer.Option(DEFAULT_CONFIG_FILE, "--config", help="TOML config file path."),
) -> None:
    """Four-option multiple-choice diagnosis over the disease label universe."""
    with _cli_errors():
        settings = _settings(config_file, {"model/sign_threshold": threshold})
        manifest = _manifest(ctx, settings, seed, [corpus, checkpoint])
        universe = label_universe()
        kind = responder or (ResponderKind.model if checkpoint else ResponderKind.random)
        if corpus is not None:
            cases = mcq_cases_from_corpus(read_fundus_corpus(corpus))
        else:
            cases = synth_mcq_cases(settings.eval.mcq_cases, universe, seed)
        if kind is ResponderKind.model:
            if checkpoint is None or corpus is None:
                raise ValidationError([("--responder", "the model responder needs --checkpoint and --corpus")])
            loaded = load_checkpoint(checkpoint)
            params = loaded.params
            if threshold is not None:
                params.config = replace(params.config, sign_threshold=threshold)
            chooser = ModelResponder(
                params,
                corpus.parent,
                float(loaded.meta.get("contrast_factor", 1.0)),
                str(loaded.meta.get("color_space", "rgb")),
            )
        elif kind is ResponderKind.oracle:
            chooser = OracleResponder()
        else:
            chooser = RandomResponder(seed + 1)
        result = multiple_choice_eval(cases, universe, chooser, seed, settings.eval.confidence)
        report = EvalReport(rows=[ReportRow.from_rate("mcq_accuracy", kind.value, "overall", result.overall)])
        report.rows.extend(ReportRow.from_rate("mcq_accuracy", kind.value, label, r) for label, r in result.per_label.items())
        csv_path = report.write(out)
        manifest.finish(out, [csv_path, out / "summary.txt"])
        typer.echo(f"multiple choice ({kind.value}): {result.overall.display()}")


@app.command()
def chat(
    checkpoint: Path = typer.Option(..., exists=True, dir_okay=False, help="Model checkpoint."),
    image: Path = typer.Option(..., exists=True, dir_okay=False, help="Fundus image (PPM or .npy)."),
    question: Optional[List[str]] = typer.Option(None, help="Ask these questions and exit instead of prompting."),
    threshold: Optional[float] = typer.Option(None, help="Sign threshold for the CLS slots."),
    max_new: int = typer.Option(128, min=1, help="Maximum generated tokens per answer."),
) -> None:
    """Developer demonstration of greedy decoding; not a clinical interface."""
    with _cli_errors():
        loaded = load_checkpoint(checkpoint)
        pixels = load_image(
            image,
            float(loaded.meta.get("contrast_factor", 1.0)),
            str(loaded.meta.get("color_space", "rgb")),
        )
        typer.echo("Developer demonstration only; answers are not medical advice. Empty line to quit.")
        questions = list(question or [])
        interactive = not questions
        while True:
            if interactive:
                asked = typer.prompt("question", default="", show_default=False)
            elif questions:
                asked = questions.pop(0)
            else:
                break
            if not asked.strip():
                break
            typer.echo(answer_question(pixels, asked, loaded.params, max_new, threshold))


@app.command()
def report(
    csv_file: Path = typer.Argument(..., exists=True, dir_okay=False, readable=True, help="report.csv or metrics.csv."),
) -> None:
    """Render an evaluation report or a training metrics log as text."""
    with _cli_errors():
        typer.echo(render_report(csv_file))


@app.command("serve-dialogue")
def serve_dialogue(
    host: str = typer.Option("127.0.0.1", help="Bind address."),
    port: int = typer.Option(8765, help="Bind port."),
) -> None:
    """Serve the template dialogue generator over the dialogue HTTP contract."""
    flask_app = create_dialogue_app(TemplateDialogueGenerator())
    logger.info("Serving dialogue generator on http://%s:%d/dialogue", host, port)
    flask_app.run(host=host, port=port)


@app.command()
def rerun(
    manifest_file: Path = typer.Option(..., "--manifest", exists=True, help="manifest.toml or a run directory."),
    out: Path = typer.Option(..., help="New output directory for the replayed run."),
) -> None:
    """Replay a recorded command with its recorded config and seed."""
    with _cli_errors():
        recorded = read_manifest(manifest_file)
        for name in changed_inputs(recorded):
            logger.warning("Input %s changed or is missing since the recorded run", name)
        argv = replay_argv(recorded, out)
    logger.info("Replaying: %s", " ".join(argv))
    code = typer.main.get_command(app).main(args=argv, prog_name="fundus-vlm", standalone_mode=False)
    if isinstance(code, int) and code != 0:
        raise typer.Exit(code=code)
