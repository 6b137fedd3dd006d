"""Command-line entry point: ``attrsim <command>``.

Every command works on one run directory, ``<output root>/<experiment name>``.
The output root comes from ``--output-root``, then ``$ATTRSIM_OUTPUT_ROOT``,
then the experiment file's ``output_dir``, then ``./runs``.
"""

from __future__ import annotations

import functools
import json
import logging
import sys

import click
import yaml

from .injection import OPERATORS, SITES
from .maps import METHODS
from .pipeline import (ENV_OUTPUT_ROOT, HEAD_MASKS, MAP_SOURCES, SANITY_SOURCES, ExperimentConfig, PipelineError, Run,
                       evaluate_student, extract, make_injection, report, run_all, sanity, train_attributor_stage,
                       train_student, train_teacher)

ORIGINS = ("gold", "teacher-generated")


def _set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
        if not isinstance(d, dict):
            raise click.BadParameter(f"{dotted}: {k} is not a mapping")
    d[keys[-1]] = value


def build_config(config_file, overrides, **flags) -> ExperimentConfig:
    doc = {}
    if config_file:
        doc = yaml.safe_load(open(config_file, encoding="utf-8")) or {}
        if not isinstance(doc, dict):
            raise click.BadParameter("experiment file must hold a mapping", param_hint="--config")
    for item in overrides:
        if "=" not in item:
            raise click.BadParameter(f"expected key=value, got {item!r}", param_hint="--set")
        key, raw = item.split("=", 1)
        _set_path(doc, key.strip(), yaml.safe_load(raw))
    for key, value in flags.items():
        if value not in (None, ()):
            doc[key] = list(value) if isinstance(value, tuple) else value
    try:
        return ExperimentConfig.from_dict(doc)
    except (TypeError, ValueError) as e:
        raise click.UsageError(f"invalid experiment config: {e}") from e


class Context:
    def __init__(self, config_file, output_root, overrides, name, seeds):
        self.config_file = config_file
        self.output_root = output_root
        self.overrides = overrides
        self.name = name
        self.seeds = seeds

    def run(self, **flags) -> Run:
        cfg = build_config(self.config_file, self.overrides, name=self.name,
                           seeds=self.seeds or None, **flags)
        return Run(cfg, self.output_root)


def _echo_json(obj) -> None:
    click.echo(json.dumps(obj, indent=2, sort_keys=True, default=str))


def _guard(fn):
    """Turn pipeline errors into clean CLI failures."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (PipelineError, FileNotFoundError) as e:
            raise click.ClickException(str(e)) from e
    return wrapper


@click.group()
@click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False),
              help="Experiment file (YAML/JSON) with ExperimentConfig fields.")
@click.option("--output-root", type=click.Path(file_okay=False), default=None,
              help=f"Directory holding run directories (default: ${ENV_OUTPUT_ROOT} or ./runs).")
@click.option("--name", default=None, help="Experiment / run directory name.")
@click.option("--seed", "seeds", type=int, multiple=True, help="Seed(s); repeat for several.")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
              help="Override any config field, dotted for nesting (e.g. student_train.epochs=3).")
@click.option("-v", "--verbose", count=True)
@click.pass_context
def main(ctx, config_file, output_root, name, seeds, overrides, verbose):
    """Attribution-map simulatability experiments on seq2seq transformers."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    ctx.obj = Context(config_file, output_root, overrides, name, seeds)


@main.command("train-teacher")
@click.pass_obj
@_guard
def train_teacher_cmd(obj: Context):
    """Train the teacher on the experiment corpus and store its checkpoint."""
    run = obj.run()
    metrics = train_teacher(run)
    _echo_json({"checkpoint": str(run.teacher_path), "valid_token_accuracy": metrics["valid_token_accuracy"],
                "best_epoch": metrics["best_epoch"], "warnings": metrics["warnings"]})


@main.command("extract")
@click.option("--method", "methods", type=click.Choice(METHODS), multiple=True, help="Default: config methods.")
@click.option("--target-origin", type=click.Choice(ORIGINS), default=None)
@click.pass_obj
@_guard
def extract_cmd(obj: Context, methods, target_origin):
    """Write one attribution file per method for the working corpus subset."""
    run = obj.run(target_origin=target_origin)
    paths = extract(run, list(methods) or None, target_origin)
    _echo_json({m: str(p) for m, p in paths.items()})


def _injection(run: Run, operator, site, head_mask):
    cfg = run.cfg
    mc = cfg.model_config(8, 8)
    return make_injection(operator or cfg.operators[0], site or cfg.sites[0], head_mask or cfg.head_masks[0],
                          mc.n_heads, mc.max_length)


injection_options = [
    click.option("--operator", type=click.Choice(OPERATORS), default=None),
    click.option("--site", type=click.Choice(SITES), default=None),
    click.option("--head-mask", type=click.Choice(HEAD_MASKS), default=None),
    click.option("--target-origin", type=click.Choice(ORIGINS), default=None),
]


def with_injection_options(fn):
    for opt in reversed(injection_options):
        fn = opt(fn)
    return fn


@main.command("train-student")
@click.option("--source", type=click.Choice(MAP_SOURCES + ("none",)), required=True,
              help="Attribution method, sanity map kind, gold oracle, or none for the baseline.")
@with_injection_options
@click.pass_obj
@_guard
def train_student_cmd(obj: Context, source, operator, site, head_mask, target_origin):
    """Train a student with injected maps (or the baseline) and report its scores."""
    run = obj.run(target_origin=target_origin)
    inj = None if source == "none" else _injection(run, operator, site, head_mask)
    out = []
    for seed in run.cfg.seeds:
        res = train_student(run, source, inj, seed, target_origin)
        out.append({"seed": seed, "checkpoint": str(res.checkpoint), **res.report.to_dict()})
    for rec in out:
        rec.pop("sentence_bleu", None)
    _echo_json(out)


@main.command("evaluate")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--source", type=click.Choice(MAP_SOURCES + ("none",)), default="none",
              help="Where the injected test maps come from (must match training).")
@click.option("--target-origin", type=click.Choice(ORIGINS), default=None)
@click.pass_obj
@_guard
def evaluate_cmd(obj: Context, checkpoint, source, target_origin):
    """Score a stored student checkpoint on the test subset."""
    run = obj.run(target_origin=target_origin)
    rep = evaluate_student(run, checkpoint, source, origin=target_origin).to_dict()
    rep.pop("sentence_bleu", None)
    _echo_json(rep)


@main.command("train-attributor")
@click.option("--method", "methods", type=click.Choice(METHODS), multiple=True, help="Default: config methods.")
@click.option("--target-origin", type=click.Choice(ORIGINS), default=None)
@click.pass_obj
@_guard
def train_attributor_cmd(obj: Context, methods, target_origin):
    """Fit an Attributor per method and report KL / overlap@3 / tau@3 on test pairs."""
    run = obj.run(target_origin=target_origin)
    out = []
    for m in methods or run.cfg.methods:
        for seed in run.cfg.seeds:
            s = train_attributor_stage(run, m, seed, target_origin)
            out.append({"method": m, "seed": seed, **s["stats"]})
    _echo_json(out)


@main.command("sanity")
@click.option("--kind", "kinds", type=click.Choice(SANITY_SOURCES), multiple=True, help="Default: random and diagonal.")
@with_injection_options
@click.pass_obj
@_guard
def sanity_cmd(obj: Context, kinds, operator, site, head_mask, target_origin):
    """Train students on random or near-diagonal maps as sanity baselines."""
    run = obj.run(target_origin=target_origin)
    res = sanity(run, kinds or SANITY_SOURCES, _injection(run, operator, site, head_mask), origin=target_origin)
    _echo_json({k: [{"bleu": r.report.bleu, "delta_bleu": r.report.delta_bleu} for r in v] for k, v in res.items()})


@main.command("report")
@click.pass_obj
@_guard
def report_cmd(obj: Context):
    """Print score tables, Attributor metrics, entropies and correlations; write records."""
    run = obj.run()
    records = report(run)
    click.echo(records["text"], nl=False)
    click.echo(f"records: {run.dir / 'report' / 'records.json'}", err=True)


@main.command("run")
@click.pass_obj
@_guard
def run_cmd(obj: Context):
    """Run every stage of the configured grid, then report."""
    run = obj.run()
    click.echo(run_all(run)["text"], nl=False)


if __name__ == "__main__":  # pragma: no cover
    main()
