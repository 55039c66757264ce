#!/usr/bin/env python3

"""Importance scores for pruning.

Magnitude scores use |w| only. Gradient scores multiply the weight by the
loss gradient of each batch; the CAM variants additionally scale every
output row by the batch/token mean pre-activation of that row plus a
shift, and the smooth variants replace the gradient by its mean over
several forward passes with Gaussian noise added to every dense output.
Per-batch scores are summed over the batch budget.
"""

import logging
from dataclasses import dataclass, field, asdict
from concurrent.futures import ThreadPoolExecutor
from itertools import islice

import numpy as np
from tqdm import tqdm

from .common import (
    ConfigError,
    ConsistencyError,
    DataError,
    StateError,
    ValidationError,
    derive_seed,
    atomic_write_bytes,
    pack_tensor_records,
    unpack_tensor_records,
)
from .nn_core import NoiseSpec, KIND_CODES, PARAM_KINDS, backward
from .tensor import no_grad

logger = logging.getLogger(__name__)

STRATEGY_KINDS = (
    "global_mag_weight",
    "layer_mag_weight",
    "layer_mag_grad",
    "layer_gradcam_shift",
    "layer_smoothgrad",
    "layer_smoothgradcam_shift",
)
VARIANT_KINDS = (
    "global_mag_grad",
    "layer_gradcam",
    "layer_gradcam_relu",
    "layer_smoothgradcam",
)
ALL_KINDS = STRATEGY_KINDS + VARIANT_KINDS

MAGNITUDE_KINDS = {"global_mag_weight", "layer_mag_weight"}
CAM_KINDS = {
    "layer_gradcam_shift",
    "layer_gradcam",
    "layer_gradcam_relu",
    "layer_smoothgradcam_shift",
    "layer_smoothgradcam",
}
SMOOTH_KINDS = {"layer_smoothgrad", "layer_smoothgradcam_shift", "layer_smoothgradcam"}
UNSHIFTED_KINDS = {"layer_gradcam", "layer_gradcam_relu", "layer_smoothgradcam"}

DEFAULT_BUDGET = 1000
DEFAULT_SMOOTH_BUDGET = 100

SCORE_MAGIC = b"DCSCORE"
SCORE_VERSION = 1


@dataclass
class StrategyConfig:
    kind: str = "layer_gradcam_shift"
    lam: float = 10.0
    eta: int = 10
    noise_variance: float = 0.01
    grad_batch_budget: int = None
    relu_cam: bool = False
    noise_mode: str = "broadcast"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise ConfigError("unknown strategy '{}', expected one of {}".format(self.kind, ALL_KINDS))
        if self.eta < 1:
            raise ConfigError("strategy.eta must be >= 1, got {}".format(self.eta))
        if self.noise_variance < 0:
            raise ConfigError("strategy.noise_variance must be >= 0")
        if self.grad_batch_budget is None:
            smooth = self.kind in SMOOTH_KINDS
            self.grad_batch_budget = DEFAULT_SMOOTH_BUDGET if smooth else DEFAULT_BUDGET
        if self.grad_batch_budget < 1:
            raise ConfigError("strategy.budget must be >= 1")
        if self.kind == "layer_gradcam_relu":
            self.relu_cam = True

    @property
    def scope(self):
        return "global" if self.kind.startswith("global_") else "layer"

    @property
    def uses_gradients(self):
        return self.kind not in MAGNITUDE_KINDS

    @property
    def uses_cam(self):
        return self.kind in CAM_KINDS

    @property
    def uses_smoothing(self):
        return self.kind in SMOOTH_KINDS

    @property
    def shift(self):
        return 0.0 if self.kind in UNSHIFTED_KINDS else float(self.lam)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_config(cls, kind, section, seed=0):
        smooth = kind in SMOOTH_KINDS
        budget = section.get("smooth_budget" if smooth else "budget")
        return cls(
            kind=kind,
            lam=float(section.get("lambda", 10.0)),
            eta=int(section.get("eta", 10)),
            noise_variance=float(section.get("noise_variance", 0.01)),
            grad_batch_budget=None if budget is None else int(budget),
            relu_cam=bool(section.get("relu_cam", False)),
            noise_mode=section.get("noise_mode", "broadcast"),
            seed=seed,
        )


@dataclass
class ImportanceAccumulator:
    scores: dict
    strategy: StrategyConfig
    batches_consumed: int = 0
    kinds: dict = field(default_factory=dict)
    n_total: int = 0
    n_prunable: int = 0

    @classmethod
    def empty(cls, model, strategy):
        prunable = model.prunable_parameters()
        return cls(
            scores={p.path: np.zeros_like(p.data) for p in prunable},
            strategy=strategy,
            kinds={p.path: p.kind for p in prunable},
            n_total=model.n_parameters(),
            n_prunable=model.n_prunable(),
        )

    @property
    def shapes(self):
        return {path: s.shape for path, s in self.scores.items()}

    def add(self, batch_scores):
        for path, s in batch_scores.items():
            self.scores[path] = self.scores[path] + s
        self.batches_consumed += 1

    def merge(self, other):
        if set(other.scores) != set(self.scores):
            raise ConsistencyError("cannot merge accumulators over different parameters")
        for path, s in other.scores.items():
            self.scores[path] = self.scores[path] + s
        self.batches_consumed += other.batches_consumed
        return self

    def validate(self):
        for path, s in self.scores.items():
            if not np.isfinite(s).all() or (s < 0).any():
                raise ValidationError("scores for {} must be finite and >= 0".format(path))


## per-tensor scores


def score_mag_weight(param):
    return np.abs(param)


def score_mag_grad(param, grad):
    if grad is None:
        raise StateError("magnitude-gradient score needs a populated gradient")
    return np.abs(param * grad)


def _row_factor(param, cam, lam, relu):
    a = np.asarray(cam, dtype=np.float64)
    if a.shape[0] != param.shape[0]:
        raise ConsistencyError(
            "activation mean has {} rows but parameter has {}".format(a.shape[0], param.shape[0])
        )
    if relu:
        a = np.maximum(a, 0.0)
    factor = a + lam
    if param.ndim == 2:
        return factor[:, None]
    return factor


def score_gradcam_shift(param, grad, cam, lam=10.0, relu=False):
    """|w * g * (a + lam)| with a the mean pre-activation of each output row."""
    if grad is None:
        raise StateError("CAM score needs a populated gradient")
    if cam is None:
        raise StateError("CAM score needs a cached activation mean")
    return np.abs(param * grad * _row_factor(param, cam, lam, relu))


def mean_gradient(noisy_grads):
    if len(noisy_grads) == 0:
        raise ValidationError("smoothing needs at least one gradient")
    return np.stack(noisy_grads).mean(axis=0)


def score_smoothgrad(param, noisy_grads):
    """|w * mean(g_i)|, averaged before the absolute value."""
    return score_mag_grad(param, mean_gradient(noisy_grads))


def score_smoothgradcam_shift(param, noisy_grads, cam, lam=10.0, relu=False):
    return score_gradcam_shift(param, mean_gradient(noisy_grads), cam, lam, relu)


## accumulation


def _layer_of(path):
    return path.rsplit(".", 1)[0]


def _cam_vector(caches, path):
    cache = caches.get(_layer_of(path))
    if cache is None:
        raise StateError("no cached activations for layer {}".format(_layer_of(path)))
    return cache.mean


def batch_gradients(model, batch, cache=False, noise=None):
    model.zero_grad()
    out = model.forward(batch, cache=cache, noise=noise)
    loss = model.loss(out, batch.labels)
    grads = backward(model, loss)
    model.zero_grad()
    return {p.path: grads[p.path] for p in model.prunable_parameters()}


def score_batch(model, batch, config, index):
    """Importance scores of one batch for every prunable parameter."""
    prunable = model.prunable_parameters()
    lam, relu = config.shift, config.relu_cam

    if not config.uses_smoothing:
        grads = batch_gradients(model, batch, cache=config.uses_cam)
        if not config.uses_cam:
            return {p.path: score_mag_grad(p.data, grads[p.path]) for p in prunable}
        caches = model.activation_cache()
        return {
            p.path: score_gradcam_shift(p.data, grads[p.path], _cam_vector(caches, p.path), lam, relu)
            for p in prunable
        }

    caches = None
    if config.uses_cam:
        # activation evidence comes from the noise-free pass
        with no_grad():
            model.forward(batch, cache=True)
        caches = model.activation_cache()

    paths = {p.path: [] for p in prunable}
    for i in range(config.eta):
        noise = NoiseSpec(
            enabled=True,
            variance=config.noise_variance,
            seed=derive_seed(config.seed, index, i),
            mode=config.noise_mode,
        )
        grads = batch_gradients(model, batch, noise=noise)
        for path in paths:
            paths[path].append(grads[path])

    if caches is None:
        return {p.path: score_smoothgrad(p.data, paths[p.path]) for p in prunable}
    return {
        p.path: score_smoothgradcam_shift(p.data, paths[p.path], _cam_vector(caches, p.path), lam, relu)
        for p in prunable
    }


def _accumulate_range(model, indexed_batches, config, progress=False):
    acc = ImportanceAccumulator.empty(model, config)
    for index, batch in tqdm(indexed_batches, ncols=70, desc=config.kind, disable=not progress):
        acc.add(score_batch(model, batch, config, index))
    return acc


def accumulate_scores(model, data, config, jobs=1, progress=False):
    """Sums per-batch scores over the first `grad_batch_budget` batches of `data`."""
    if not config.uses_gradients:
        acc = ImportanceAccumulator.empty(model, config)
        for p in model.prunable_parameters():
            acc.scores[p.path] = score_mag_weight(p.data)
        return acc

    indexed = list(enumerate(islice(data, config.grad_batch_budget)))
    if len(indexed) == 0:
        raise DataError("strategy {} needs at least one batch of data".format(config.kind))

    if jobs <= 1 or len(indexed) < 2:
        acc = _accumulate_range(model, indexed, config, progress)
    else:
        chunks = [c.tolist() for c in np.array_split(np.arange(len(indexed)), jobs) if len(c)]
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(
                pool.map(
                    lambda idx: _accumulate_range(model.clone(), [indexed[i] for i in idx], config),
                    chunks,
                )
            )
        acc = parts[0]
        for part in parts[1:]:
            acc.merge(part)

    logger.debug("%s consumed %d batches", config.kind, acc.batches_consumed)
    acc.validate()
    return acc


## persistence


def write_scores(acc, path, provenance=None):
    records = [
        (p, KIND_CODES[acc.kinds.get(p, "dense_weight")], s) for p, s in acc.scores.items()
    ]
    trailer = dict(
        strategy=acc.strategy.to_dict(),
        batches_consumed=acc.batches_consumed,
        n_total=acc.n_total,
        n_prunable=acc.n_prunable,
    )
    trailer.update(provenance or dict())
    atomic_write_bytes(path, pack_tensor_records(SCORE_MAGIC, SCORE_VERSION, records, trailer))


def read_scores(path):
    with open(path, "rb") as f:
        data = f.read()
    records, trailer = unpack_tensor_records(data, SCORE_MAGIC, SCORE_VERSION, name=path)
    strategy = StrategyConfig(**trailer["strategy"])
    acc = ImportanceAccumulator(
        scores={p: s for p, _, s in records},
        strategy=strategy,
        batches_consumed=trailer["batches_consumed"],
        kinds={p: PARAM_KINDS[code] for p, code, _ in records},
        n_total=trailer["n_total"],
        n_prunable=trailer["n_prunable"],
    )
    return acc, trailer


def read_scores_provenance(path):
    return read_scores(path)[1]
