#!/usr/bin/env python3

import os
import os.path
import logging
from collections import defaultdict

import toml
import click

from .common import ConfigError, DeepcutsError, full_path, ratio_tag, true_basename

pass_config = click.make_pass_decorator(dict)

DEFAULT_CONFIG = {
    "task": {
        "kind": "planted_classify",
        "n_train": 2000,
        "n_test": 500,
        "vocab": 16,
        "min_len": 8,
        "max_seq_len": 32,
        "teacher_sparsity": 0.25,
        "teacher_hidden": 8,
        "val_fraction": 0.1,
    },
    "model": {
        "arch": "miniformer",
        "vocab_size": 259,
        "d_model": 32,
        "n_layers": 2,
        "n_heads": 2,
        "d_ffn": 256,
        "widths": [64, 64],
        "activation": "gelu",
        "init_std": 0.02,
    },
    "strategy": {
        "kinds": [
            "global_mag_weight",
            "layer_mag_weight",
            "layer_mag_grad",
            "layer_gradcam_shift",
            "layer_smoothgrad",
            "layer_smoothgradcam_shift",
        ],
        "lambda": 10.0,
        "eta": 10,
        "noise_variance": 0.01,
        "noise_mode": "broadcast",
        "relu_cam": False,
    },
    "compression": {"ratios": [2.0, 3.0, 3.5, 4.0]},
    "train": {
        "batch_size": 16,
        "learning_rate": 1e-4,
        "early_stopping_patience": 2,
        "rewind": "pre_finetune",
        "seeds": [],
    },
    "pipeline": {
        "train": "train",
        "scores": "scores",
        "masks": "masks",
        "checkpoints": "checkpoints",
        "reports": "reports",
        "analysis": "analysis",
        "summaries": "summaries",
        "npool": 1,
    },
}


def parse_value(text):
    try:
        return toml.loads("v = " + text)["v"]
    except toml.TomlDecodeError:
        return text


def apply_override(config, assignment):
    if "=" not in assignment:
        raise ConfigError("--set expects key=value, got '{}'".format(assignment))
    key, value = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = config
    for part in parts[:-1]:
        node = node.setdefault(part, dict())
        if not isinstance(node, dict):
            raise ConfigError("--set {}: '{}' is not a section".format(key, part))
    node[parts[-1]] = parse_value(value.strip())


def validate_config(config):
    from .lth import config_seeds, model_spec, strategy_config, task_spec, train_schedule

    ratios = config["compression"]["ratios"]
    kinds = config["strategy"]["kinds"]
    if not ratios:
        raise ConfigError("compression.ratios needs at least one ratio")
    if not kinds:
        raise ConfigError("strategy.kinds needs at least one strategy")
    for r in ratios:
        if not isinstance(r, (int, float)) or r < 1:
            raise ConfigError("compression.ratios: every ratio must be >= 1, got {}".format(r))
    seed = config_seeds(config)[0]
    task_spec(config, seed)
    model_spec(config, seed)
    train_schedule(config, seed)
    for kind in kinds:
        strategy_config(config, kind, seed)
    return config


def load_config(fname, out=None, overrides=(), seed=None):
    if fname is None:
        fname = "config.toml"

    if os.path.exists(fname):
        try:
            config = toml.load(fname)
        except toml.TomlDecodeError as e:
            raise ConfigError("{}:{}: {}".format(fname, e.lineno, e.msg))
    else:
        config = dict()

    # put in the defaults
    if out is not None:
        config["path"] = out
    if "path" not in config:
        if os.path.exists(fname) and os.path.dirname(fname) != "":
            config["path"] = os.path.dirname(fname)
        else:
            config["path"] = os.getcwd()

    config["path"] = full_path(config["path"])

    if "project" not in config:
        config["project"] = os.path.basename(config["path"])

    for k, v in DEFAULT_CONFIG.items():
        if k not in config:
            config[k] = dict(v)
        elif isinstance(v, dict):  # handle nested defaults
            for k2, v2 in v.items():
                if k2 not in config[k]:
                    config[k][k2] = v2

    for assignment in overrides:
        apply_override(config, assignment)

    if seed is not None and not config["train"].get("seeds"):
        config["train"]["seeds"] = [seed]

    return validate_config(config)


class DeepcutsGroup(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except DeepcutsError as e:
            click.secho("Error: {}".format(e), err=True, fg="red")
            ctx.exit(e.exit_code)


@click.group(cls=DeepcutsGroup)
@click.version_option()
@click.option(
    "--config",
    type=click.Path(exists=True, dir_okay=False),
    help='The config file to use instead of the default "config.toml" .',
)
@click.option("--out", type=click.Path(file_okay=False), help="Output folder, overrides path.")
@click.option("--set", "overrides", multiple=True, help="Override a config key, e.g. strategy.lambda=5")
@click.option("--seed", type=int, envvar="DEEPCUTS_SEED", help="Seed used when the config lists none.")
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
@click.pass_context
def cli(ctx, config, out, overrides, seed, verbose):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    ctx.obj = load_config(config, out, overrides, seed)


def cmd_train(config):
    from .lth import config_seeds, stage_paths, train_stage

    paths = []
    for seed in config_seeds(config):
        record = train_stage(config, seed, progress=True)
        paths.append(stage_paths(config, seed)["finetuned"])
        click.echo("seed {}: pre-prune {:.4f} -> {}".format(seed, record["pre_metric"], paths[-1]))
    return paths


def cmd_score(config, checkpoint=None, kinds=None, jobs=1):
    from .lth import config_seeds, score_stage

    kinds = kinds or config["strategy"]["kinds"]
    paths = []
    for seed in config_seeds(config):
        for kind in kinds:
            paths.append(score_stage(config, seed, kind, checkpoint=checkpoint, jobs=jobs, progress=True))
            click.echo("seed {}: {} -> {}".format(seed, kind, paths[-1]))
    return paths


def cmd_prune(score_fname, ratio, out_fname=None):
    from .lth import prune_scores_file

    if out_fname is None:
        out_fname = os.path.join(
            os.path.dirname(score_fname),
            "{}-{}.dcmask".format(true_basename(score_fname), ratio_tag(ratio)),
        )
    mask = prune_scores_file(score_fname, ratio, out_fname)
    click.echo(
        "kept {} of {} prunable weights (fraction {:.6f}) -> {}".format(
            mask.total_kept(), mask.total_elements(), mask.kept_fraction, out_fname
        )
    )
    return out_fname


def cmd_run(config, resume=False):
    from .lth import run_sweep
    from .analysis import analyze_sweep

    reports = run_sweep(config, resume=resume)
    analyze_sweep(config, reports)
    click.echo("{} runs appended to {}".format(len(reports), os.path.join(config["path"], "runs.csv")))
    return reports


def cmd_analyze(config, mask_fnames=()):
    from .analysis import analyze_sweep, compare_all, emit_report, head_map
    from .lth import config_seeds, model_spec
    from .masking import read_mask

    if not mask_fnames:
        return analyze_sweep(config, [])

    by_ratio = defaultdict(dict)
    for fname in mask_fnames:
        mask = read_mask(fname)
        by_ratio[mask.ratio][mask.strategy or true_basename(fname)] = mask
    heads = head_map(model_spec(config, config_seeds(config)[0]))
    comparisons = []
    for ratio, masks in sorted(by_ratio.items()):
        comparisons += compare_all(masks, heads, ratio=ratio)
    out_dir = os.path.join(config["path"], config["pipeline"]["analysis"])
    emit_report([], comparisons, out_dir)
    click.echo("{} comparisons written to {}".format(len(comparisons), out_dir))
    return comparisons


def cmd_report(config):
    from .summarize import summarize_all

    table, pivot = summarize_all(config)
    click.echo(pivot.to_string(index=False))
    return table, pivot


@cli.command()
@pass_config
def train(config):
    click.echo("Fine-tuning...")
    cmd_train(config)


@cli.command()
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--strategy", "kinds", multiple=True, help="Strategy kinds, defaults to strategy.kinds.")
@click.option("--jobs", type=int, default=1, show_default=True)
@pass_config
def score(config, checkpoint, kinds, jobs):
    click.echo("Scoring...")
    cmd_score(config, checkpoint, list(kinds), jobs)


@cli.command()
@click.argument("score_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--ratio", type=click.FloatRange(min=1.0), required=True)
@click.option("--output", type=click.Path(dir_okay=False), default=None)
@pass_config
def prune(config, score_file, ratio, output):
    cmd_prune(score_file, ratio, output)


@cli.command()
@click.option("--jobs", type=int, default=None, help="Parallel cells, defaults to pipeline.npool.")
@click.option("--resume", is_flag=True, help="Skip stages whose artifacts are up to date.")
@pass_config
def run(config, jobs, resume):
    if jobs is not None:
        config["pipeline"]["npool"] = jobs
    click.echo("Running sweep...")
    cmd_run(config, resume)


@cli.command()
@click.argument("mask_files", nargs=-1, type=click.Path(exists=True, dir_okay=False))
@pass_config
def analyze(config, mask_files):
    click.echo("Comparing masks...")
    cmd_analyze(config, mask_files)


@cli.command()
@pass_config
def report(config):
    click.echo("Summarizing runs...")
    cmd_report(config)


if __name__ == "__main__":
    cli()
