import os

import numpy as np
import pandas as pd
import pytest

from deepcuts.analysis import (
    HEAD_COLUMNS,
    IOU_COLUMNS,
    LAYER_COLUMNS,
    MaskComparison,
    compare_all,
    compare_masks,
    emit_report,
    head_iou,
    head_map,
    iou_matrix,
    layer_iou,
    mask_iou,
)
from deepcuts.common import ConfigError, ConsistencyError
from deepcuts.lth import RUNS_COLUMNS, RunReport
from deepcuts.masking import PruneMask, ones_mask
from deepcuts.nn_core import ModelSpec

from conftest import random_bits


def mask_of(bits, strategy="layer_mag_weight", ratio=2.0):
    bits = {k: np.asarray(v, dtype=bool) for k, v in bits.items()}
    return PruneMask(
        bits=bits,
        kept_counts={k: int(v.sum()) for k, v in bits.items()},
        strategy=strategy,
        ratio=ratio,
    )


def random_mask(model, rng, p=0.5, strategy="x"):
    base = ones_mask(model)
    return mask_of({k: random_bits(rng, b.shape, p) for k, b in base.bits.items()}, strategy)


def test_mask_iou_hand_example():
    a = mask_of({"t": [1, 1, 0, 0]})
    b = mask_of({"t": [1, 0, 1, 0]})
    assert mask_iou(a, b)["t"] == pytest.approx(1 / 3)
    assert mask_iou(a, a)["t"] == 1.0


def test_mask_iou_both_empty():
    a = mask_of({"t": [0, 0, 0]})
    assert mask_iou(a, a)["t"] == 1.0


def test_mask_iou_matches_sets(rng):
    for _ in range(100):
        n = int(rng.integers(1, 40))
        x, y = random_bits(rng, n, rng.random()), random_bits(rng, n, rng.random())
        sx, sy = set(np.nonzero(x)[0]), set(np.nonzero(y)[0])
        expected = 1.0 if not sx | sy else len(sx & sy) / len(sx | sy)
        assert mask_iou(mask_of({"t": x}), mask_of({"t": y}))["t"] == pytest.approx(expected)


def test_mask_iou_coverage():
    with pytest.raises(ConsistencyError):
        mask_iou(mask_of({"a": [1]}), mask_of({"b": [1]}))
    with pytest.raises(ConsistencyError):
        mask_iou(mask_of({"a": [1, 0]}), mask_of({"a": [1]}))


def test_layer_iou_groups_by_layer():
    values = {
        "encoder.layer0.ffn.up.weight": 0.2,
        "encoder.layer0.ffn.up.bias": 0.4,
        "encoder.layer1.ffn.up.weight": 1.0,
    }
    assert layer_iou(values) == {0: pytest.approx(0.3), 1: 1.0}


def test_head_iou_identical_and_disjoint(tiny_spec, tiny_model, rng):
    heads = head_map(tiny_spec)
    assert sorted(heads) == [(0, 0), (0, 1)]
    a = random_mask(tiny_model, rng)
    assert all(v == 1.0 for v in head_iou(a, a, heads).values())

    b = mask_of({k: ~v for k, v in a.bits.items()})
    assert all(v == 0.0 for v in head_iou(a, b, heads).values())


def test_head_iou_hand_slices(tiny_spec, tiny_model):
    # d_model 8 with 2 heads: head 1 owns rows 4..8 of q/k/v and columns 4..8 of o_proj
    keep = ones_mask(tiny_model)
    drop = mask_of({k: v.copy() for k, v in keep.bits.items()})
    drop.bits["encoder.layer0.attn.q_proj.weight"][4:8, :] = False
    values = head_iou(keep, drop, head_map(tiny_spec))
    assert values[(0, 0)] == 1.0
    # head 1 covers 3*(4*8 + 4) + 8*4 = 140 entries, 32 of them dropped
    assert values[(0, 1)] == pytest.approx(108 / 140)

    drop = mask_of({k: v.copy() for k, v in keep.bits.items()})
    drop.bits["encoder.layer0.attn.o_proj.weight"][:, 0:4] = False
    values = head_iou(keep, drop, head_map(tiny_spec))
    assert values[(0, 0)] == pytest.approx(108 / 140)
    assert values[(0, 1)] == 1.0


def test_head_slices_partition_attention(tiny_spec, tiny_model):
    counts = {}
    for slices in head_map(tiny_spec).values():
        for path, index in slices:
            shape = tiny_model.params[path].data.shape
            hits = np.zeros(shape, dtype=int)
            hits[index] += 1
            counts[path] = counts.get(path, 0) + hits
    for proj in ("q_proj", "k_proj", "v_proj"):
        for part in ("weight", "bias"):
            assert np.all(counts["encoder.layer0.attn.{}.{}".format(proj, part)] == 1)
    assert np.all(counts["encoder.layer0.attn.o_proj.weight"] == 1)
    assert "encoder.layer0.attn.o_proj.bias" not in counts


def test_head_map_empty_for_mlp():
    assert head_map(ModelSpec(arch="mlp", widths=(8,))) == dict()


def test_head_slice_out_of_range(tiny_model):
    a = ones_mask(tiny_model)
    bad = {(0, 0): [("encoder.layer0.attn.q_proj.weight", (slice(0, 99), slice(None)))]}
    with pytest.raises(ConsistencyError):
        head_iou(a, a, bad)


def test_iou_matrix_symmetric(tiny_model, rng):
    masks = {name: random_mask(tiny_model, rng, strategy=name) for name in ("a", "b", "c")}
    mean, low = iou_matrix(masks)
    for frame in (mean, low):
        assert np.allclose(frame.values, frame.values.T)
        assert np.all(np.diag(frame.values) == 1.0)
    assert np.all(low.values <= mean.values + 1e-12)


def test_iou_matrix_mean_and_min():
    a = mask_of({"x": [1, 1, 0, 0], "y": [1] * 9 + [0]})
    b = mask_of({"x": [1, 1, 1, 1], "y": [1] * 10})
    mean, low = iou_matrix({"a": a, "b": b})
    assert mean.loc["a", "b"] == pytest.approx(0.7)
    assert low.loc["b", "a"] == pytest.approx(0.5)


def test_iou_matrix_needs_two():
    with pytest.raises(ConfigError):
        iou_matrix({"a": mask_of({"x": [1]})})


def test_compare_all_pairs(tiny_spec, tiny_model, rng):
    masks = {name: random_mask(tiny_model, rng, strategy=name) for name in ("a", "b", "c")}
    comparisons = compare_all(masks, head_map(tiny_spec), ratio=2.0, seed=3)
    assert [(c.strategy_a, c.strategy_b) for c in comparisons] == [("a", "b"), ("a", "c"), ("b", "c")]
    assert all(c.seed == 3 and c.ratio == 2.0 for c in comparisons)
    assert set(comparisons[0].layer_iou) == {0}
    assert len(comparisons[0].head_iou) == 2


def make_report(strategy, ratio, final):
    return RunReport(
        task="planted_classify", strategy=strategy, ratio=ratio, seed=0,
        pre_metric=0.9, post_metric=0.6, final_metric=final, kept_fraction=1 / ratio,
        wall_seconds=0.25, mask_path="masks/seed-0/{}.dcmask".format(strategy),
    )


def test_emit_report_empty(tmp_path):
    emit_report([], [], str(tmp_path))
    assert list(pd.read_csv(tmp_path / "runs.csv").columns) == RUNS_COLUMNS
    assert list(pd.read_csv(tmp_path / "iou_matrix.csv").columns) == IOU_COLUMNS
    assert list(pd.read_csv(tmp_path / "head_iou.csv").columns) == HEAD_COLUMNS
    assert list(pd.read_csv(tmp_path / "layer_iou.csv").columns) == LAYER_COLUMNS
    assert len(pd.read_csv(tmp_path / "iou_matrix.csv")) == 0


def test_emit_report_values_round_trip(tmp_path, tiny_spec, tiny_model, rng):
    reports = [make_report("layer_mag_weight", r, 0.1 + r / 7) for r in (2.0, 3.5)]
    a = random_mask(tiny_model, rng, strategy="layer_mag_weight")
    b = random_mask(tiny_model, rng, strategy="layer_smoothgrad")
    comparison = compare_masks(a, b, head_map(tiny_spec), ratio=3.5)
    emit_report(reports, [comparison], str(tmp_path))

    runs = pd.read_csv(tmp_path / "runs.csv", float_precision="round_trip")
    assert runs["final_metric"].tolist() == [r.final_metric for r in reports]
    assert runs["kept_fraction"].tolist() == [r.kept_fraction for r in reports]

    iou = pd.read_csv(tmp_path / "iou_matrix.csv", float_precision="round_trip")
    assert iou.loc[0, "mean_iou"] == comparison.mean_iou
    assert iou.loc[0, "min_iou"] == comparison.min_iou

    heads = pd.read_csv(tmp_path / "head_iou.csv", float_precision="round_trip")
    assert len(heads) == 2
    for row in heads.itertuples():
        assert row.iou == comparison.head_iou[(row.layer, row.head)]

    plots = sorted(os.listdir(tmp_path / "plot-data"))
    assert "final-planted_classify-layer_mag_weight.txt" in plots
    assert any(p.startswith("head-iou-layer_mag_weight-vs-layer_smoothgrad") for p in plots)
    curve = (tmp_path / "plot-data" / "final-planted_classify-layer_mag_weight.txt").read_text()
    rows = [line.split("\t") for line in curve.splitlines() if not line.startswith("#")]
    assert rows[0] == ["ratio", "final_metric"]
    assert [float(v) for _, v in rows[1:]] == [r.final_metric for r in reports]


def test_comparison_defaults():
    c = MaskComparison("a", "b", 2.0, tensor_iou=dict())
    assert c.mean_iou == 1.0 and c.min_iou == 1.0
