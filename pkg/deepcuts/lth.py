#!/usr/bin/env python3

"""Single-shot lottery-ticket pipeline.

snapshot -> initial fine-tune -> score -> mask -> rewind -> apply mask ->
final fine-tune -> evaluate. Each stage persists its artifact under the
project path so stages can be run one at a time or resumed.
"""

import os
import os.path
import time
import logging
import functools
from dataclasses import dataclass, field, asdict

import numpy as np
import pandas as pd
import toml
from tqdm import trange

from .common import (
    ConfigError,
    ConsistencyError,
    DataError,
    NumericError,
    StageError,
    TrainingError,
    atomic_write_text,
    config_hash,
    derive_seed,
    file_sha256,
    full_path,
    process_all,
    ratio_tag,
    read_provenance,
)
from .nn_core import (
    AdamState,
    ModelSpec,
    adam_step,
    assign_values,
    backward,
    build_model,
    load_checkpoint,
    read_checkpoint,
    read_checkpoint_provenance,
    regression_prediction,
    write_checkpoint,
)
from .tensor import no_grad
from .tasks import TaskSpec, batches, make_task
from .strategies import (
    StrategyConfig,
    accumulate_scores,
    read_scores,
    read_scores_provenance,
    write_scores,
)
from .masking import (
    CompressionSpec,
    apply_mask,
    build_mask,
    masked_linf,
    read_mask,
    read_mask_provenance,
    write_mask,
)

logger = logging.getLogger(__name__)

REWIND_MODES = ("pre_finetune", "post_finetune")

SCHEDULE_PRESETS = {
    "planted_classify": dict(initial_epochs=3, final_epochs=8, eval_metric="accuracy"),
    "toy_acceptability": dict(initial_epochs=5, final_epochs=12, eval_metric="accuracy"),
    "toy_pair_regression": dict(initial_epochs=8, final_epochs=10, eval_metric="mse"),
}

RUNS_COLUMNS = [
    "task",
    "strategy",
    "ratio",
    "seed",
    "pre_metric",
    "post_metric",
    "final_metric",
    "kept_fraction",
    "wall_seconds",
    "mask_path",
]


@dataclass
class TrainSchedule:
    batch_size: int = 16
    learning_rate: float = 1e-4
    initial_epochs: int = 3
    final_epochs: int = 8
    early_stopping_patience: int = 2
    eval_metric: str = "accuracy"
    seed: int = 0
    rewind: str = "pre_finetune"

    def __post_init__(self):
        for name in ("batch_size", "initial_epochs", "final_epochs", "early_stopping_patience"):
            if getattr(self, name) < 1:
                raise ConfigError("train.{} must be >= 1, got {}".format(name, getattr(self, name)))
        if self.eval_metric not in ("accuracy", "mse"):
            raise ConfigError("train.eval_metric must be accuracy or mse")
        if self.rewind not in REWIND_MODES:
            raise ConfigError("train.rewind must be one of {}".format(REWIND_MODES))
        if not self.learning_rate > 0:
            raise ConfigError("train.learning_rate must be > 0")


@dataclass
class Snapshot:
    values: dict
    optimizer_reset: bool = True
    seed: int = None


@dataclass
class FinetuneResult:
    best_metric: float
    best_epoch: int
    epochs_run: int
    best_values: dict
    history: list = field(default_factory=list)


@dataclass
class RunReport:
    task: str
    strategy: str
    ratio: float
    seed: int
    pre_metric: float
    post_metric: float
    final_metric: float
    kept_fraction: float
    wall_seconds: float
    mask_path: str
    eval_metric: str = "accuracy"
    epochs_run: int = 0
    batches_scored: int = 0
    config_hash: str = ""
    support_overlap: float = None

    def row(self):
        d = asdict(self)
        return {k: d[k] for k in RUNS_COLUMNS}

    def to_text(self):
        return toml.dumps({k: v for k, v in asdict(self).items() if v is not None})

    @classmethod
    def from_text(cls, text):
        return cls(**toml.loads(text))


def _stage(name):
    return dict(stage=name)


def labeled_stage(name):
    def decorator(fun):
        @functools.wraps(fun)
        def wrapped(*args, **kwargs):
            try:
                return fun(*args, **kwargs)
            except StageError:
                raise
            except Exception as e:
                raise StageError(name, e) from e

        return wrapped

    return decorator


## config plumbing


def config_seeds(config):
    seeds = config["train"].get("seeds") or [0]
    return [int(s) for s in seeds]


def task_spec(config, seed):
    section = dict(config["task"])
    section.setdefault("seed", seed)
    return TaskSpec.from_config(section)


def model_spec(config, seed):
    task = task_spec(config, seed)
    return ModelSpec.from_config(
        config["model"],
        max_seq_len=task.max_seq_len,
        task_head="scaled_sigmoid_regressor" if task.is_regression else "classifier",
        n_classes=max(task.n_classes, 1),
        seed=derive_seed(seed, "model"),
    )


def train_schedule(config, seed):
    task = task_spec(config, seed)
    section = dict(SCHEDULE_PRESETS[task.kind])
    section.update({k: v for k, v in config["train"].items() if k in TrainSchedule.__dataclass_fields__})
    section["seed"] = seed
    return TrainSchedule(**section)


def strategy_config(config, kind, seed):
    return StrategyConfig.from_config(kind, config["strategy"], seed=derive_seed(seed, "noise"))


def stage_paths(config, seed, kind=None, ratio=None):
    root = config["path"]
    pipeline = config["pipeline"]
    seed_dir = "seed-{}".format(seed)
    paths = dict(
        runs=os.path.join(root, "runs.csv"),
        train_dir=os.path.join(root, pipeline["train"], seed_dir),
    )
    paths["rewind"] = os.path.join(paths["train_dir"], "rewind.dcm")
    paths["finetuned"] = os.path.join(paths["train_dir"], "finetuned.dcm")
    paths["train_record"] = os.path.join(paths["train_dir"], "train.toml")
    if kind is not None:
        paths["scores"] = os.path.join(root, pipeline["scores"], seed_dir, kind + ".dcs")
    if kind is not None and ratio is not None:
        cell = "{}-{}".format(kind, ratio_tag(ratio))
        paths["mask"] = os.path.join(root, pipeline["masks"], seed_dir, cell + ".dcmask")
        paths["final"] = os.path.join(root, pipeline["checkpoints"], seed_dir, cell + ".dcm")
        paths["report"] = os.path.join(root, pipeline["reports"], seed_dir, cell + ".toml")
    return paths


def train_hash(config, seed):
    train = {k: v for k, v in config["train"].items() if k != "seeds"}
    return config_hash(config["task"], config["model"], train, int(seed))


def score_hash(config, seed, kind):
    return config_hash(train_hash(config, seed), strategy_config(config, kind, seed).to_dict())


def mask_hash(config, seed, kind, ratio):
    return config_hash(score_hash(config, seed, kind), float(ratio))


def final_hash(config, seed, kind, ratio):
    return config_hash(mask_hash(config, seed, kind, ratio), "final")


def _is_current(path, reader, expected):
    provenance = read_provenance(path, reader)
    return provenance is not None and provenance.get("config_hash") == expected


def _read_toml(path):
    with open(path) as f:
        return toml.load(f)


def _read_toml_provenance(path):
    try:
        return _read_toml(path)
    except (OSError, toml.TomlDecodeError):
        return None


## training


def evaluate(model, examples, metric, batch_size=64):
    """Accuracy of argmax predictions, or MSE of 5*sigmoid predictions."""
    if len(examples) == 0:
        raise DataError("cannot evaluate on an empty split")
    total = 0.0
    with no_grad():
        for batch in batches(examples, batch_size):
            out = model.forward(batch).data
            if metric == "accuracy":
                total += float(np.sum(out.argmax(axis=-1) == batch.labels))
            else:
                diff = regression_prediction(out) - batch.labels
                total += float(np.sum(diff * diff))
    return total / len(examples)


def is_better(metric, best, kind):
    if best is None:
        return True
    return metric > best if kind == "accuracy" else metric < best


def finetune(model, train, val, schedule, epochs=None, mask=None, progress=False):
    """Adam fine-tuning with early stopping; the model ends on its best epoch."""
    epochs = schedule.final_epochs if epochs is None else epochs
    if epochs < 1:
        raise ConfigError("fine-tuning needs at least one epoch")
    params = model.parameters()
    state = AdamState.fresh(params)
    val = val if len(val) else train

    best, best_epoch, best_values, stale = None, -1, None, 0
    history = []
    for epoch in trange(epochs, ncols=70, desc="epochs", disable=not progress):
        stream = batches(train, schedule.batch_size, derive_seed(schedule.seed, "shuffle", epoch))
        losses = []
        for index, batch in enumerate(stream):
            model.zero_grad()
            try:
                loss = model.loss(model.forward(batch), batch.labels)
            except NumericError as e:
                raise TrainingError("epoch {} batch {}: {}".format(epoch, index, e)) from e
            if not np.isfinite(loss.data):
                raise TrainingError("epoch {} batch {}: non-finite loss".format(epoch, index))
            grads = backward(model, loss)
            adam_step(params, grads, state, schedule.learning_rate, mask=mask)
            losses.append(float(loss.data))
        model.zero_grad()

        if mask is not None and masked_linf(model, mask) != 0.0:
            raise ConsistencyError("masked parameters drifted from zero in epoch {}".format(epoch))

        metric = evaluate(model, val, schedule.eval_metric)
        history.append(dict(epoch=epoch, loss=float(np.mean(losses)), metric=metric))
        logger.debug("epoch %d loss %.5f %s %.5f", epoch, history[-1]["loss"], schedule.eval_metric, metric)

        if is_better(metric, best, schedule.eval_metric):
            best, best_epoch, best_values, stale = metric, epoch, model.values(), 0
        else:
            stale += 1
            if stale >= schedule.early_stopping_patience:
                break

    assign_values(model, best_values)
    return FinetuneResult(best, best_epoch, len(history), best_values, history)


def snapshot(model, seed=None):
    return Snapshot(values=model.values(), optimizer_reset=True, seed=seed)


def rewind(model, snap):
    """Restores snapshot values bitwise; optimizer state starts fresh afterwards."""
    assign_values(model, {k: v.copy() for k, v in snap.values.items()})
    return model


def write_snapshot(model, snap, path, provenance=None):
    provenance = dict(provenance or dict())
    provenance["seed"] = snap.seed
    write_checkpoint(model, path, provenance, values=snap.values)


def read_snapshot(path):
    values, provenance = read_checkpoint(path)
    return Snapshot({k: v for k, (_, v) in values.items()}, True, provenance.get("seed"))


def teacher_support_overlap(mask, metadata, model_spec):
    """Share of kept first-layer weights whose input token is in the teacher's support."""
    from .tasks import ALPHABET_START, N_RESERVED

    if model_spec.arch != "mlp" or "support" not in metadata or not model_spec.widths:
        return None
    bits = mask.bits.get("encoder.layer0.dense.weight")
    if bits is None or bits.sum() == 0:
        return None
    columns = [s + ALPHABET_START + N_RESERVED for s in metadata["support"]]
    columns = [c for c in columns if c < bits.shape[1]]
    return float(bits[:, columns].sum() / bits.sum())


## stages


@labeled_stage("train")
def train_stage(config, seed, resume=False, progress=False):
    paths = stage_paths(config, seed)
    expected = train_hash(config, seed)
    if (
        resume
        and _is_current(paths["finetuned"], read_checkpoint_provenance, expected)
        and _is_current(paths["rewind"], read_checkpoint_provenance, expected)
        and _is_current(paths["train_record"], _read_toml_provenance, expected)
    ):
        logger.info("[train] seed %d up to date, skipping", seed, extra=_stage("train"))
        return _read_toml(paths["train_record"])

    t0 = time.perf_counter()
    dataset = make_task(task_spec(config, seed))
    schedule = train_schedule(config, seed)
    model = build_model(model_spec(config, seed))
    provenance = dict(config_hash=expected, seed=seed)

    snap = None
    if schedule.rewind == "pre_finetune":
        logger.info("[snapshot] rewind point before fine-tuning", extra=_stage("snapshot"))
        snap = snapshot(model, seed)

    logger.info("[initial_finetune] %d epochs", schedule.initial_epochs, extra=_stage("initial_finetune"))
    result = finetune(model, dataset.train, dataset.val, schedule, schedule.initial_epochs, progress=progress)

    if schedule.rewind == "post_finetune":
        logger.info("[snapshot] rewind point after fine-tuning", extra=_stage("snapshot"))
        snap = snapshot(model, seed)

    pre_metric = evaluate(model, dataset.test or dataset.val, schedule.eval_metric)
    write_snapshot(model, snap, paths["rewind"], provenance)
    write_checkpoint(model, paths["finetuned"], provenance)

    record = dict(
        config_hash=expected,
        seed=seed,
        pre_metric=pre_metric,
        initial_epochs_run=result.epochs_run,
        seconds=time.perf_counter() - t0,
    )
    atomic_write_text(paths["train_record"], toml.dumps(record))
    return record


@labeled_stage("score")
def score_stage(config, seed, kind, resume=False, checkpoint=None, jobs=1, progress=False):
    paths = stage_paths(config, seed, kind)
    expected = score_hash(config, seed, kind)
    if resume and checkpoint is None and _is_current(paths["scores"], read_scores_provenance, expected):
        logger.info("[accumulate_scores] %s up to date, skipping", kind, extra=_stage("accumulate_scores"))
        return paths["scores"]

    t0 = time.perf_counter()
    dataset = make_task(task_spec(config, seed))
    schedule = train_schedule(config, seed)
    model = build_model(model_spec(config, seed))
    load_checkpoint(model, checkpoint or paths["finetuned"])
    strategy = strategy_config(config, kind, seed)

    source = dict()
    if checkpoint is not None:
        # scores from another checkpoint never count as current for the default one
        source = dict(checkpoint=full_path(checkpoint), checkpoint_sha256=file_sha256(checkpoint))
        expected = config_hash(expected, source)

    logger.info("[accumulate_scores] %s", kind, extra=_stage("accumulate_scores"))
    stream = batches(dataset.train, schedule.batch_size, derive_seed(seed, "scoring"))
    acc = accumulate_scores(model, stream, strategy, jobs=jobs, progress=progress)
    provenance = dict(config_hash=expected, seed=seed, seconds=time.perf_counter() - t0, **source)
    write_scores(acc, paths["scores"], provenance)
    return paths["scores"]


def prune_scores_file(score_path, ratio, mask_path, provenance=None):
    acc, _ = read_scores(score_path)
    spec = CompressionSpec(float(ratio), acc.n_total, acc.n_prunable)
    mask = build_mask(acc, spec)
    extra = dict(batches_scored=acc.batches_consumed)
    extra.update(provenance or dict())
    write_mask(mask, mask_path, extra)
    return mask


@labeled_stage("build_mask")
def prune_stage(config, seed, kind, ratio, resume=False):
    paths = stage_paths(config, seed, kind, ratio)
    expected = mask_hash(config, seed, kind, ratio)
    if resume and _is_current(paths["mask"], read_mask_provenance, expected):
        logger.info("[build_mask] %s %s up to date, skipping", kind, ratio_tag(ratio), extra=_stage("build_mask"))
        return paths["mask"]
    logger.info("[build_mask] %s at ratio %g", kind, ratio, extra=_stage("build_mask"))
    prune_scores_file(paths["scores"], ratio, paths["mask"], dict(config_hash=expected, seed=seed))
    return paths["mask"]


@labeled_stage("final_finetune")
def final_stage(config, seed, kind, ratio, resume=False, progress=False):
    paths = stage_paths(config, seed, kind, ratio)
    expected = final_hash(config, seed, kind, ratio)
    if resume and _is_current(paths["report"], _read_toml_provenance, expected):
        logger.info("[final_finetune] %s %s up to date, skipping", kind, ratio_tag(ratio), extra=_stage("final_finetune"))
        return RunReport(**_read_toml(paths["report"]))

    t0 = time.perf_counter()
    task = task_spec(config, seed)
    dataset = make_task(task)
    schedule = train_schedule(config, seed)
    mspec = model_spec(config, seed)
    train_record = _read_toml(paths["train_record"])
    mask = read_mask(paths["mask"])
    evaluation = dataset.test or dataset.val

    model = build_model(mspec)
    load_checkpoint(model, paths["finetuned"])
    apply_mask(model, mask)
    post_metric = evaluate(model, evaluation, schedule.eval_metric)

    logger.info("[rewind] restoring %s", schedule.rewind, extra=_stage("rewind"))
    rewind(model, read_snapshot(paths["rewind"]))

    logger.info("[apply_mask] kept fraction %.4f", mask.kept_fraction, extra=_stage("apply_mask"))
    apply_mask(model, mask)

    logger.info("[final_finetune] %d epochs", schedule.final_epochs, extra=_stage("final_finetune"))
    result = finetune(model, dataset.train, dataset.val, schedule, schedule.final_epochs, mask, progress)
    if masked_linf(model, mask) != 0.0:
        raise ConsistencyError("masked parameters are non-zero after the final fine-tune")

    logger.info("[evaluate] %s", schedule.eval_metric, extra=_stage("evaluate"))
    final_metric = evaluate(model, evaluation, schedule.eval_metric)
    write_checkpoint(model, paths["final"], dict(config_hash=expected, seed=seed))

    wall = (
        train_record.get("seconds", 0.0)
        + read_scores_provenance(paths["scores"]).get("seconds", 0.0)
        + time.perf_counter()
        - t0
    )
    report = RunReport(
        task=task.kind,
        strategy=kind,
        ratio=float(ratio),
        seed=int(seed),
        pre_metric=float(train_record["pre_metric"]),
        post_metric=float(post_metric),
        final_metric=float(final_metric),
        kept_fraction=float(mask.kept_fraction),
        wall_seconds=float(wall),
        mask_path=os.path.relpath(paths["mask"], config["path"]),
        eval_metric=schedule.eval_metric,
        epochs_run=int(result.epochs_run),
        batches_scored=int(mask.provenance.get("batches_scored", 0)),
        config_hash=expected,
        support_overlap=teacher_support_overlap(mask, dataset.metadata, mspec),
    )
    atomic_write_text(paths["report"], report.to_text())
    return report


## reports


def append_runs(path, reports):
    """Appends one row per report; summarize keeps the last row of a repeated cell."""
    frame = pd.DataFrame([r.row() for r in reports], columns=RUNS_COLUMNS)
    exists = os.path.exists(path)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    frame.to_csv(path, mode="a" if exists else "w", header=not exists, index=False)


## orchestration


def single_shot_prune(config, strategy=None, ratio=None, seed=None, resume=False, progress=False):
    """One full pipeline cell; returns its RunReport and appends it to runs.csv."""
    kind = strategy or config["strategy"]["kinds"][0]
    ratio = float(config["compression"]["ratios"][0] if ratio is None else ratio)
    seed = config_seeds(config)[0] if seed is None else int(seed)

    train_stage(config, seed, resume=resume, progress=progress)
    score_stage(config, seed, kind, resume=resume, progress=progress)
    prune_stage(config, seed, kind, ratio, resume=resume)
    report = final_stage(config, seed, kind, ratio, resume=resume, progress=progress)

    append_runs(stage_paths(config, seed)["runs"], [report])
    return report


def sweep_cells(config):
    return [
        (seed, kind, float(ratio))
        for seed in config_seeds(config)
        for kind in config["strategy"]["kinds"]
        for ratio in config["compression"]["ratios"]
    ]


def run_sweep(config, resume=False):
    """Every (seed, strategy, ratio) cell, sharing training and scoring per seed."""
    seeds = config_seeds(config)
    kinds = config["strategy"]["kinds"]
    ratios = config["compression"]["ratios"]
    if not kinds or not ratios:
        raise ConfigError("need at least one strategy and one compression ratio")

    process_all(config, train_stage, [(s,) for s in seeds], resume=resume)
    process_all(config, score_stage, [(s, k) for s in seeds for k in kinds], resume=resume)
    process_all(config, prune_stage, [(s, k, float(r)) for s in seeds for k in kinds for r in ratios], resume=resume)
    reports = process_all(config, final_stage, sweep_cells(config), resume=resume)

    append_runs(stage_paths(config, seeds[0])["runs"], reports)
    return reports
