#!/usr/bin/env python3

"""Mask comparison: per-tensor IOU, per-layer and per-attention-head views,
cross-strategy matrices and plot-data tables."""

import os
import os.path
import re
import logging
from itertools import combinations
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .common import ConsistencyError, ConfigError, ratio_tag, atomic_write_text

logger = logging.getLogger(__name__)

IOU_COLUMNS = ["seed", "ratio", "strategy_a", "strategy_b", "mean_iou", "min_iou"]
HEAD_COLUMNS = ["seed", "ratio", "strategy_a", "strategy_b", "layer", "head", "iou"]
LAYER_COLUMNS = ["seed", "ratio", "strategy_a", "strategy_b", "layer", "iou"]

_LAYER_RE = re.compile(r"^encoder\.layer(\d+)\.")


@dataclass
class MaskComparison:
    strategy_a: str
    strategy_b: str
    ratio: float
    tensor_iou: dict
    layer_iou: dict = field(default_factory=dict)
    head_iou: dict = field(default_factory=dict)
    seed: int = 0

    @property
    def mean_iou(self):
        return float(np.mean(list(self.tensor_iou.values()))) if self.tensor_iou else 1.0

    @property
    def min_iou(self):
        return float(min(self.tensor_iou.values())) if self.tensor_iou else 1.0


def _iou(a, b):
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def _check_coverage(a, b):
    if set(a.bits) != set(b.bits):
        raise ConsistencyError("masks cover different tensors")
    for path in a.bits:
        if a.bits[path].shape != b.bits[path].shape:
            raise ConsistencyError(
                "{}: shapes differ ({} vs {})".format(path, a.bits[path].shape, b.bits[path].shape)
            )


def mask_iou(a, b):
    """Intersection over union of the kept sets, tensor by tensor."""
    _check_coverage(a, b)
    return {path: float(_iou(a.bits[path], b.bits[path])) for path in a.bits}


def layer_of(path):
    m = _LAYER_RE.match(path)
    return int(m.group(1)) if m else None


def layer_iou(tensor_iou):
    """Mean tensor IOU within each encoder layer."""
    groups = dict()
    for path, value in tensor_iou.items():
        layer = layer_of(path)
        if layer is not None:
            groups.setdefault(layer, []).append(value)
    return {layer: float(np.mean(values)) for layer, values in sorted(groups.items())}


def head_map(spec):
    """(layer, head) -> [(path, index)] slices owned by each attention head.

    Head h owns rows [h*dh, (h+1)*dh) of the Q/K/V weights and biases and
    the same columns of the output projection weight.
    """
    if spec.arch != "miniformer":
        return dict()
    dh = spec.head_dim
    heads = dict()
    for layer in range(spec.n_layers):
        prefix = "encoder.layer{}.attn.".format(layer)
        for h in range(spec.n_heads):
            rows = slice(h * dh, (h + 1) * dh)
            slices = []
            for proj in ("q_proj", "k_proj", "v_proj"):
                slices.append((prefix + proj + ".weight", (rows, slice(None))))
                slices.append((prefix + proj + ".bias", (rows,)))
            slices.append((prefix + "o_proj.weight", (slice(None), rows)))
            heads[(layer, h)] = slices
    return heads


def head_iou(a, b, heads):
    """IOU over the union of each head's slices."""
    _check_coverage(a, b)
    out = dict()
    for key, slices in heads.items():
        inter = union = 0
        for path, index in slices:
            if path not in a.bits:
                raise ConsistencyError("head slice refers to unknown tensor {}".format(path))
            bits_a, bits_b = a.bits[path], b.bits[path]
            for sl, dim in zip(index, bits_a.shape):
                if sl.stop is not None and sl.stop > dim:
                    raise ConsistencyError("head slice {} out of range for {}".format(sl, path))
            sa, sb = bits_a[index], bits_b[index]
            inter += np.count_nonzero(sa & sb)
            union += np.count_nonzero(sa | sb)
        out[key] = 1.0 if union == 0 else inter / union
    return out


def compare_masks(a, b, heads=None, names=None, ratio=None, seed=0):
    names = names or (a.strategy, b.strategy)
    tensor = mask_iou(a, b)
    return MaskComparison(
        strategy_a=names[0],
        strategy_b=names[1],
        ratio=float(a.ratio if ratio is None else ratio),
        tensor_iou=tensor,
        layer_iou=layer_iou(tensor),
        head_iou=head_iou(a, b, heads) if heads else dict(),
        seed=int(seed),
    )


def iou_matrix(masks):
    """Mean and min tensor-IOU matrices over strategy pairs, as DataFrames."""
    names = list(masks)
    if len(names) < 2:
        raise ConfigError("an IOU matrix needs at least two strategies")
    mean = pd.DataFrame(np.eye(len(names)), index=names, columns=names)
    low = mean.copy()
    for i, j in combinations(range(len(names)), 2):
        comp = compare_masks(masks[names[i]], masks[names[j]], names=(names[i], names[j]))
        for frame, value in ((mean, comp.mean_iou), (low, comp.min_iou)):
            frame.iloc[i, j] = value
            frame.iloc[j, i] = value
    return mean, low


def compare_all(masks, heads=None, ratio=None, seed=0):
    """Comparisons for every unordered pair of a strategy -> mask dict."""
    return [
        compare_masks(masks[a], masks[b], heads, names=(a, b), ratio=ratio, seed=seed)
        for a, b in combinations(list(masks), 2)
    ]


## output


def _write_csv(frame, path):
    atomic_write_text(path, frame.to_csv(index=False))


def _write_plot_data(path, header, x_name, y_name, xs, ys):
    lines = ["# " + h for h in header]
    lines.append("{}\t{}".format(x_name, y_name))
    lines += ["{!r}\t{!r}".format(float(x), float(y)) for x, y in zip(xs, ys)]
    atomic_write_text(path, "\n".join(lines) + "\n")


def emit_report(reports, comparisons, out_dir):
    """Writes runs.csv, iou_matrix.csv, head_iou.csv and plot-data files."""
    from .lth import RUNS_COLUMNS

    os.makedirs(out_dir, exist_ok=True)
    runs = pd.DataFrame([r.row() for r in reports], columns=RUNS_COLUMNS)
    _write_csv(runs, os.path.join(out_dir, "runs.csv"))

    iou_rows, head_rows, layer_rows = [], [], []
    for c in comparisons:
        iou_rows.append([c.seed, c.ratio, c.strategy_a, c.strategy_b, c.mean_iou, c.min_iou])
        for (layer, head), value in sorted(c.head_iou.items()):
            head_rows.append([c.seed, c.ratio, c.strategy_a, c.strategy_b, layer, head, value])
        for layer, value in c.layer_iou.items():
            layer_rows.append([c.seed, c.ratio, c.strategy_a, c.strategy_b, layer, value])
    _write_csv(pd.DataFrame(iou_rows, columns=IOU_COLUMNS), os.path.join(out_dir, "iou_matrix.csv"))
    _write_csv(pd.DataFrame(head_rows, columns=HEAD_COLUMNS), os.path.join(out_dir, "head_iou.csv"))
    _write_csv(pd.DataFrame(layer_rows, columns=LAYER_COLUMNS), os.path.join(out_dir, "layer_iou.csv"))

    plot_dir = os.path.join(out_dir, "plot-data")
    os.makedirs(plot_dir, exist_ok=True)
    if len(runs):
        curves = runs.groupby(["task", "strategy", "ratio"])["final_metric"].mean().reset_index()
        for (task, strategy), d in curves.groupby(["task", "strategy"]):
            _write_plot_data(
                os.path.join(plot_dir, "final-{}-{}.txt".format(task, strategy)),
                ["final metric vs compression ratio", "task: " + task, "strategy: " + strategy],
                "ratio",
                "final_metric",
                d["ratio"],
                d["final_metric"],
            )

    for c in comparisons:
        pair = "{}-vs-{}-{}-seed-{}".format(c.strategy_a, c.strategy_b, ratio_tag(c.ratio), c.seed)
        header = [
            "strategies: {} vs {}".format(c.strategy_a, c.strategy_b),
            "ratio: {:g}".format(c.ratio),
            "seed: {}".format(c.seed),
        ]
        if c.layer_iou:
            _write_plot_data(
                os.path.join(plot_dir, "layer-iou-{}.txt".format(pair)),
                ["per-layer mask IOU"] + header,
                "layer",
                "iou",
                list(c.layer_iou),
                list(c.layer_iou.values()),
            )
        if c.head_iou:
            keys = sorted(c.head_iou)
            _write_plot_data(
                os.path.join(plot_dir, "head-iou-{}.txt".format(pair)),
                ["per-head mask IOU, x = layer * n_heads + head"] + header,
                "head_index",
                "iou",
                range(len(keys)),
                [c.head_iou[k] for k in keys],
            )
    logger.info("wrote analysis of %d runs and %d comparisons to %s", len(reports), len(comparisons), out_dir)


def analyze_sweep(config, reports):
    """Pairwise comparisons of every strategy's mask, per seed and ratio."""
    from .lth import model_spec, stage_paths, config_seeds
    from .masking import read_mask

    comparisons = []
    for seed in config_seeds(config):
        heads = head_map(model_spec(config, seed))
        for ratio in config["compression"]["ratios"]:
            masks = dict()
            for kind in config["strategy"]["kinds"]:
                path = stage_paths(config, seed, kind, ratio)["mask"]
                if os.path.exists(path):
                    masks[kind] = read_mask(path)
            comparisons += compare_all(masks, heads, ratio=float(ratio), seed=seed)
    out_dir = os.path.join(config["path"], config["pipeline"]["analysis"])
    emit_report(reports, comparisons, out_dir)
    return comparisons
