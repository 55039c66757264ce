import numpy as np
import pytest

from deepcuts import tensor as T
from deepcuts.common import (
    ConfigError,
    ConsistencyError,
    DimensionError,
    FormatError,
    SizeError,
    StateError,
    ValidationError,
)
from deepcuts.nn_core import (
    AdamState,
    Dense,
    ForwardContext,
    ModelSpec,
    NoiseSpec,
    adam_step,
    backward,
    build_model,
    cross_entropy_loss,
    finite_diff_check,
    load_checkpoint,
    model_forward,
    read_checkpoint,
    scaled_sigmoid_regression_loss,
    write_checkpoint,
)
from deepcuts.tasks import Batch


def small_token_batch():
    ids = np.array([[1, 5, 6, 7, 9], [1, 8, 9, 0, 0], [1, 4, 4, 12, 0]])
    mask = ids != 0
    segments = np.zeros_like(ids)
    segments[0, 3:] = 1
    return Batch(ids, segments, mask, np.array([0, 1, 1]))


def test_dense_hand_arithmetic():
    layer = Dense("encoder.layer0.dense", 2, 1, np.random.default_rng(0))
    layer.weight.tensor.data[...] = [[1.0, 2.0]]
    y = layer(np.array([[1.0, 1.0]]), ForwardContext(cache=True))
    assert y.data.tolist() == [[3.0]]
    assert layer.cache.mean.tolist() == [3.0]
    assert layer.cache.token_count == 1


def test_dense_cache_averages_tokens():
    layer = Dense("encoder.layer0.dense", 2, 1, np.random.default_rng(0))
    layer.weight.tensor.data[...] = [[1.0, 2.0]]
    layer(np.array([[1.0, 0.0], [0.0, 1.0]]), ForwardContext(cache=True))
    assert layer.cache.mean.tolist() == [1.5]


def test_zero_variance_noise_is_bit_identical(tiny_model, tiny_batch):
    clean = model_forward(tiny_model, tiny_batch).data
    noisy = model_forward(
        tiny_model, tiny_batch, noise=NoiseSpec(enabled=True, variance=0.0, seed=99)
    ).data
    assert np.array_equal(clean, noisy)


def test_noise_is_seeded(tiny_model, tiny_batch):
    a = model_forward(tiny_model, tiny_batch, noise=NoiseSpec(True, 0.01, seed=7)).data
    b = model_forward(tiny_model, tiny_batch, noise=NoiseSpec(True, 0.01, seed=7)).data
    c = model_forward(tiny_model, tiny_batch, noise=NoiseSpec(True, 0.01, seed=8)).data
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_cache_matches_brute_force_mean(tiny_model, tiny_batch):
    model_forward(tiny_model, tiny_batch, cache=True)
    cache = tiny_model.activation_cache()
    # recompute the first dense layer of the block by hand
    emb = tiny_model
    with T.no_grad():
        ids = tiny_batch.token_ids
        L = ids.shape[1]
        x = (
            emb.token_emb(ids)
            + emb.position_emb.table.tensor[0:L]
            + emb.segment_emb(tiny_batch.segment_ids)
        )
        x = emb.emb_norm(x).data
    q = tiny_model.params["encoder.layer0.attn.q_proj.weight"].data
    qb = tiny_model.params["encoder.layer0.attn.q_proj.bias"].data
    tokens = x[tiny_batch.attention_mask]
    expected = (tokens @ q.T + qb).mean(axis=0)
    assert np.allclose(cache["encoder.layer0.attn.q_proj"].mean, expected, atol=1e-12)
    assert cache["encoder.layer0.attn.q_proj"].token_count == int(tiny_batch.attention_mask.sum())


def test_attention_rows_sum_to_one(tiny_model, tiny_batch):
    model_forward(tiny_model, tiny_batch)
    for probs in tiny_model.last_attention:
        assert np.allclose(probs.sum(axis=-1), 1.0, atol=1e-12)
        # padded keys get no weight
        pad = ~tiny_batch.attention_mask
        assert np.all(probs * pad[:, None, None, :] < 1e-12)


def test_activations_basic():
    assert T.gelu(T.Tensor([0.0])).data[0] == 0.0
    assert np.all(T.relu(T.Tensor([-1.0, 2.0])).data >= 0)


def test_backward_product():
    w = T.Tensor(2.0, requires_grad=True)
    loss = w * 3.0
    loss.backward()
    assert w.grad == 3.0


def test_backward_twice_is_state_error():
    w = T.Tensor(2.0, requires_grad=True)
    loss = w * 3.0
    loss.backward()
    with pytest.raises(StateError):
        loss.backward()


def test_backward_without_graph():
    w = T.Tensor(2.0, requires_grad=True)
    with T.no_grad():
        loss = w * 3.0
    with pytest.raises(StateError):
        loss.backward()


def test_regression_loss_gradient():
    z = T.Tensor(np.array([0.0]), requires_grad=True)
    loss = scaled_sigmoid_regression_loss(z, [5.0])
    assert loss.data == pytest.approx(6.25)
    loss.backward()
    assert z.grad[0] == pytest.approx(-6.25)


def test_regression_loss_values():
    assert scaled_sigmoid_regression_loss(T.Tensor([0.0]), [2.5]).data == pytest.approx(0.0)
    assert scaled_sigmoid_regression_loss(T.Tensor([100.0]), [5.0]).data == pytest.approx(0.0)
    with pytest.raises(ValidationError):
        scaled_sigmoid_regression_loss(T.Tensor([0.0]), [5.5])


def test_cross_entropy_values():
    assert cross_entropy_loss(T.Tensor([[0.0, 0.0]]), [0]).data == pytest.approx(np.log(2))
    assert cross_entropy_loss(T.Tensor([[20.0, -20.0]]), [0]).data == pytest.approx(0.0, abs=1e-12)
    assert cross_entropy_loss(T.Tensor([[1.0, 0.0]]), [1]).data == pytest.approx(
        np.log(1 + np.e) - 1
    )
    with pytest.raises(ValidationError):
        cross_entropy_loss(T.Tensor([[1.0, 0.0]]), [2])


def test_finite_differences_linear():
    spec = ModelSpec(arch="mlp", vocab_size=4, widths=(), n_classes=2, init_std=0.5, seed=1)
    model = build_model(spec)
    rng = np.random.default_rng(0)
    batch = Batch(np.zeros((5, 1)), labels=np.array([0, 1, 1, 0, 1]), features=rng.normal(size=(5, 4)))
    assert finite_diff_check(model, batch) < 1e-6


def test_finite_differences_mlp():
    spec = ModelSpec(arch="mlp", vocab_size=6, widths=(5, 4), n_classes=2, init_std=0.5, seed=1)
    model = build_model(spec)
    rng = np.random.default_rng(0)
    batch = Batch(np.zeros((4, 1)), labels=np.array([0, 1, 0, 1]), features=rng.normal(size=(4, 6)))
    assert finite_diff_check(model, batch) < 1e-4


@pytest.mark.parametrize("n_layers", [1, 2])
def test_finite_differences_miniformer(n_layers):
    spec = ModelSpec(
        vocab_size=16, d_model=8, n_layers=n_layers, n_heads=2, d_ffn=8, max_seq_len=8,
        init_std=0.2, seed=2,
    )
    model = build_model(spec)
    assert finite_diff_check(model, small_token_batch()) < 1e-4


def test_finite_differences_regression_head():
    spec = ModelSpec(
        vocab_size=16, d_model=8, n_layers=1, n_heads=2, d_ffn=8, max_seq_len=8,
        task_head="scaled_sigmoid_regressor", init_std=0.2, seed=4,
    )
    model = build_model(spec)
    batch = small_token_batch()
    batch.labels = np.array([0.5, 4.0, 2.5])
    assert finite_diff_check(model, batch) < 1e-4


def test_finite_differences_size_guard():
    model = build_model(ModelSpec(d_model=64, n_heads=2, d_ffn=256))
    with pytest.raises(SizeError):
        finite_diff_check(model, small_token_batch())


def test_prunable_parameters(tiny_model):
    for p in tiny_model.parameters():
        expected = p.path.startswith("encoder.") and p.kind in ("dense_weight", "dense_bias")
        assert p.prunable == expected
    paths = {p.path for p in tiny_model.prunable_parameters()}
    assert "encoder.layer0.attn.q_proj.weight" in paths
    assert "head.weight" not in paths
    assert "embeddings.token.weight" not in paths
    # q, k, v, o, up and down, weight and bias each
    assert len(paths) == 12


def test_sequence_too_long(tiny_model):
    ids = np.ones((1, 13), dtype=int)
    with pytest.raises(DimensionError):
        tiny_model.forward(Batch(ids, np.zeros_like(ids), ids > 0, np.array([0])))


def test_spec_validation():
    with pytest.raises(ConfigError):
        ModelSpec(d_model=10, n_heads=3)
    with pytest.raises(ConfigError):
        ModelSpec(n_layers=0)


def test_adam_first_step():
    spec = ModelSpec(arch="mlp", vocab_size=2, widths=(), n_classes=1, task_head="scaled_sigmoid_regressor")
    model = build_model(spec)
    params = model.parameters()
    before = {p.path: p.data.copy() for p in params}
    grads = {p.path: np.ones_like(p.data) for p in params}
    adam_step(params, grads, AdamState.fresh(params), lr=0.1)
    for p in params:
        assert np.allclose(p.data - before[p.path], -0.1, atol=1e-6)


def test_adam_zero_grad_no_update(tiny_model):
    params = tiny_model.parameters()
    before = tiny_model.values()
    grads = {p.path: np.zeros_like(p.data) for p in params}
    adam_step(params, grads, AdamState.fresh(params), lr=0.1)
    for path, value in tiny_model.values().items():
        assert np.array_equal(value, before[path])


def test_adam_mask_keeps_zeros(tiny_model, rng):
    params = tiny_model.parameters()
    bits = {p.path: rng.random(p.data.shape) < 0.5 for p in tiny_model.prunable_parameters()}
    for p in tiny_model.prunable_parameters():
        p.tensor.data[~bits[p.path]] = 0.0
    state = AdamState.fresh(params)
    for _ in range(100):
        grads = {p.path: rng.normal(size=p.data.shape) for p in params}
        adam_step(params, grads, state, lr=0.01, mask=bits)
    for p in tiny_model.prunable_parameters():
        assert np.all(p.data[~bits[p.path]] == 0.0)
        assert np.all(state.m[p.path][~bits[p.path]] == 0.0)
        assert np.all(state.v[p.path][~bits[p.path]] == 0.0)


def test_backward_returns_grads(tiny_model, tiny_batch):
    loss = tiny_model.loss(tiny_model.forward(tiny_batch), tiny_batch.labels)
    grads = backward(tiny_model, loss)
    assert set(grads) == set(tiny_model.params)
    assert any(np.abs(g).sum() > 0 for g in grads.values())


def test_determinism(tiny_spec, tiny_batch):
    a = build_model(tiny_spec).forward(tiny_batch).data
    b = build_model(tiny_spec).forward(tiny_batch).data
    assert np.array_equal(a, b)


def test_checkpoint_round_trip(tmp_path, tiny_model, tiny_spec, tiny_batch):
    fname = str(tmp_path / "model.dcm")
    write_checkpoint(tiny_model, fname, dict(note="x"))
    other = build_model(ModelSpec(**{**tiny_spec.to_dict(), "seed": 11}))
    provenance = load_checkpoint(other, fname)
    assert provenance["note"] == "x"
    assert np.array_equal(other.forward(tiny_batch).data, tiny_model.forward(tiny_batch).data)


def test_checkpoint_corruption(tmp_path, tiny_model):
    fname = tmp_path / "model.dcm"
    write_checkpoint(tiny_model, str(fname))
    data = fname.read_bytes()
    fname.write_bytes(b"XXXXXXX" + data[7:])
    with pytest.raises(FormatError):
        read_checkpoint(str(fname))
    fname.write_bytes(data[: len(data) // 2])
    with pytest.raises(FormatError):
        read_checkpoint(str(fname))


def test_checkpoint_spec_mismatch(tmp_path, tiny_model):
    fname = str(tmp_path / "model.dcm")
    write_checkpoint(tiny_model, fname)
    other = build_model(ModelSpec(d_model=8, n_layers=2, n_heads=2, d_ffn=16, max_seq_len=12))
    with pytest.raises(ConsistencyError):
        load_checkpoint(other, fname)
