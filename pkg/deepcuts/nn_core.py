#!/usr/bin/env python3

import copy
import logging
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.special import expit, logsumexp, softmax as np_softmax
from scipy.stats import truncnorm

from . import tensor as T
from .tensor import Tensor, no_grad, make_node
from .common import (
    ConfigError,
    ConsistencyError,
    DimensionError,
    NumericError,
    SizeError,
    StateError,
    ValidationError,
    atomic_write_bytes,
    pack_tensor_records,
    unpack_tensor_records,
)

logger = logging.getLogger(__name__)

PARAM_KINDS = (
    "dense_weight",
    "dense_bias",
    "embedding",
    "layernorm_scale",
    "layernorm_shift",
    "head_weight",
    "head_bias",
)
KIND_CODES = {kind: code for code, kind in enumerate(PARAM_KINDS)}

ARCHS = ("mlp", "miniformer")
TASK_HEADS = ("classifier", "scaled_sigmoid_regressor")

CHECKPOINT_MAGIC = b"DCMODEL"
CHECKPOINT_VERSION = 1

MAX_FINITE_DIFF_PARAMS = 50000
REGRESSION_SCALE = 5.0


def is_prunable(path, kind):
    return kind in ("dense_weight", "dense_bias") and path.startswith("encoder.")


@dataclass
class Parameter:
    path: str
    tensor: Tensor
    kind: str
    prunable: bool = False

    @property
    def data(self):
        return self.tensor.data

    @property
    def size(self):
        return self.tensor.data.size


@dataclass
class NoiseSpec:
    enabled: bool = False
    variance: float = 0.0
    seed: int = 0
    # broadcast: one sample per output element shared by all tokens
    mode: str = "broadcast"

    def __post_init__(self):
        if self.variance < 0:
            raise ValidationError("noise variance must be >= 0, got {}".format(self.variance))
        if self.mode not in ("broadcast", "per_token"):
            raise ValidationError("unknown noise mode '{}'".format(self.mode))

    @property
    def active(self):
        return self.enabled and self.variance > 0


@dataclass
class ActivationCache:
    mean: np.ndarray
    token_count: int


@dataclass
class ModelSpec:
    arch: str = "miniformer"
    vocab_size: int = 259
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_ffn: int = 256
    max_seq_len: int = 32
    n_segments: int = 2
    widths: tuple = (64, 64)
    activation: str = "gelu"
    task_head: str = "classifier"
    n_classes: int = 2
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.arch not in ARCHS:
            raise ConfigError("model.arch must be one of {}, got '{}'".format(ARCHS, self.arch))
        if self.task_head not in TASK_HEADS:
            raise ConfigError(
                "model.task_head must be one of {}, got '{}'".format(TASK_HEADS, self.task_head)
            )
        if self.activation not in ("gelu", "relu"):
            raise ConfigError("model.activation must be gelu or relu")
        sizes = dict(
            vocab_size=self.vocab_size,
            d_model=self.d_model,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            d_ffn=self.d_ffn,
            max_seq_len=self.max_seq_len,
            n_segments=self.n_segments,
            n_classes=self.n_classes,
        )
        for name, value in sizes.items():
            if value < 1:
                raise ConfigError("model.{} must be >= 1, got {}".format(name, value))
        if any(w < 1 for w in self.widths):
            raise ConfigError("model.widths must all be >= 1")
        if self.arch == "miniformer" and self.d_model % self.n_heads != 0:
            raise ConfigError(
                "model.d_model ({}) must be divisible by model.n_heads ({})".format(
                    self.d_model, self.n_heads
                )
            )

    @property
    def n_outputs(self):
        return self.n_classes if self.task_head == "classifier" else 1

    @property
    def head_dim(self):
        return self.d_model // self.n_heads

    @classmethod
    def from_config(cls, section, **overrides):
        known = {k: v for k, v in section.items() if k in cls.__dataclass_fields__}
        known.update(overrides)
        return cls(**known)

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


@dataclass
class ForwardContext:
    cache: bool = False
    noise: NoiseSpec = None
    rng: np.random.Generator = None
    token_mask: np.ndarray = None


def _truncated_normal(rng, shape, std):
    values = truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=shape, random_state=rng)
    return np.asarray(values, dtype=np.float64).reshape(shape)


## layers


class Dense:
    """Affine layer whose outputs can be cached (batch/token mean) and noised."""

    def __init__(self, path, in_features, out_features, rng, std=0.02, head=False):
        self.path = path
        self.in_features = in_features
        self.out_features = out_features
        kinds = ("head_weight", "head_bias") if head else ("dense_weight", "dense_bias")
        self.weight = Parameter(
            path + ".weight",
            Tensor(_truncated_normal(rng, (out_features, in_features), std), requires_grad=True),
            kinds[0],
        )
        self.bias = Parameter(
            path + ".bias", Tensor(np.zeros(out_features), requires_grad=True), kinds[1]
        )
        for p in (self.weight, self.bias):
            p.prunable = is_prunable(p.path, p.kind)
        self.cache = None

    def parameters(self):
        return [self.weight, self.bias]

    def __call__(self, x, ctx):
        x = T.as_tensor(x)
        if x.shape[-1] != self.in_features:
            raise DimensionError(
                "{}: expected {} input features, got shape {}".format(
                    self.path, self.in_features, x.shape
                )
            )
        y = T.linear(x, self.weight.tensor, self.bias.tensor)
        if not np.isfinite(y.data).all():
            raise NumericError("non-finite output in layer {}".format(self.path))

        if ctx.cache:
            flat = y.data.reshape(-1, self.out_features)
            if ctx.token_mask is not None and y.ndim == 3:
                flat = y.data[ctx.token_mask]
            self.cache = ActivationCache(flat.mean(axis=0), int(flat.shape[0]))

        if ctx.noise is not None and ctx.noise.active:
            std = np.sqrt(ctx.noise.variance)
            if ctx.noise.mode == "broadcast":
                z = ctx.rng.normal(0.0, std, size=self.out_features)
            else:
                z = ctx.rng.normal(0.0, std, size=y.shape)
            y = y + z
        return y


class LayerNorm:
    def __init__(self, path, width):
        self.path = path
        self.scale = Parameter(
            path + ".scale", Tensor(np.ones(width), requires_grad=True), "layernorm_scale"
        )
        self.shift = Parameter(
            path + ".shift", Tensor(np.zeros(width), requires_grad=True), "layernorm_shift"
        )

    def parameters(self):
        return [self.scale, self.shift]

    def __call__(self, x):
        return T.layer_norm(x, self.scale.tensor, self.shift.tensor)


class Embedding:
    def __init__(self, path, n_rows, width, rng, std=0.02):
        self.path = path
        self.n_rows = n_rows
        self.table = Parameter(
            path + ".weight",
            Tensor(_truncated_normal(rng, (n_rows, width), std), requires_grad=True),
            "embedding",
        )

    def parameters(self):
        return [self.table]

    def __call__(self, ids):
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.n_rows):
            raise DimensionError(
                "{}: index out of range [0, {})".format(self.path, self.n_rows)
            )
        return T.embedding(self.table.tensor, ids)


def _activation(name, x):
    return T.gelu(x) if name == "gelu" else T.relu(x)


## networks


class Network:
    def __init__(self, spec):
        self.spec = spec
        self.params = dict()
        self.dense_layers = []

    def _add(self, module):
        for p in module.parameters():
            if p.path in self.params:
                raise ConsistencyError("duplicate parameter path {}".format(p.path))
            self.params[p.path] = p
        if isinstance(module, Dense):
            self.dense_layers.append(module)
        return module

    def parameters(self):
        return list(self.params.values())

    def prunable_parameters(self):
        return [p for p in self.params.values() if p.prunable]

    def n_parameters(self):
        return sum(p.size for p in self.params.values())

    def n_prunable(self):
        return sum(p.size for p in self.prunable_parameters())

    def zero_grad(self):
        for p in self.params.values():
            p.tensor.zero_grad()

    def activation_cache(self):
        return {layer.path: layer.cache for layer in self.dense_layers if layer.cache is not None}

    def clear_cache(self):
        for layer in self.dense_layers:
            layer.cache = None

    def clone(self):
        return copy.deepcopy(self)

    def values(self):
        return {path: p.data.copy() for path, p in self.params.items()}

    def forward(self, batch, cache=False, noise=None):
        raise NotImplementedError

    def loss(self, outputs, labels):
        if self.spec.task_head == "classifier":
            return cross_entropy_loss(outputs, labels)
        return scaled_sigmoid_regression_loss(outputs, labels)

    def _context(self, batch, cache, noise):
        if cache:
            self.clear_cache()
        rng = None
        if noise is not None and noise.active:
            rng = np.random.default_rng(noise.seed)
        token_mask = getattr(batch, "attention_mask", None)
        return ForwardContext(cache=cache, noise=noise, rng=rng, token_mask=token_mask)


class MLP(Network):
    """Dense stack over features, or over a bag-of-tokens histogram of a token batch."""

    def __init__(self, spec):
        super().__init__(spec)
        rng = np.random.default_rng(spec.seed)
        self.in_features = spec.vocab_size
        self.layers = []
        width = self.in_features
        for i, out in enumerate(spec.widths):
            layer = Dense("encoder.layer{}.dense".format(i), width, out, rng, spec.init_std)
            self.layers.append(self._add(layer))
            width = out
        self.head = self._add(Dense("head", width, spec.n_outputs, rng, spec.init_std, head=True))

    def features(self, batch):
        features = getattr(batch, "features", None)
        if features is not None:
            return np.asarray(features, dtype=np.float64)
        return bag_of_tokens(batch.token_ids, batch.attention_mask, self.in_features)

    def forward(self, batch, cache=False, noise=None):
        ctx = self._context(batch, cache, noise)
        x = Tensor(self.features(batch))
        for layer in self.layers:
            x = _activation(self.spec.activation, layer(x, ctx))
        return self.head(x, ctx)


class Miniformer(Network):
    """Post-LayerNorm transformer encoder with a CLS-token task head."""

    def __init__(self, spec):
        super().__init__(spec)
        rng = np.random.default_rng(spec.seed)
        std = spec.init_std
        d = spec.d_model
        self.token_emb = self._add(Embedding("embeddings.token", spec.vocab_size, d, rng, std))
        self.position_emb = self._add(Embedding("embeddings.position", spec.max_seq_len, d, rng, std))
        self.segment_emb = self._add(Embedding("embeddings.segment", spec.n_segments, d, rng, std))
        self.emb_norm = self._add(LayerNorm("embeddings.norm", d))
        self.blocks = []
        for i in range(spec.n_layers):
            prefix = "encoder.layer{}".format(i)
            block = dict(
                q=self._add(Dense(prefix + ".attn.q_proj", d, d, rng, std)),
                k=self._add(Dense(prefix + ".attn.k_proj", d, d, rng, std)),
                v=self._add(Dense(prefix + ".attn.v_proj", d, d, rng, std)),
                o=self._add(Dense(prefix + ".attn.o_proj", d, d, rng, std)),
                attn_norm=self._add(LayerNorm(prefix + ".attn_norm", d)),
                up=self._add(Dense(prefix + ".ffn.up", d, spec.d_ffn, rng, std)),
                down=self._add(Dense(prefix + ".ffn.down", spec.d_ffn, d, rng, std)),
                ffn_norm=self._add(LayerNorm(prefix + ".ffn_norm", d)),
            )
            self.blocks.append(block)
        self.head = self._add(Dense("head", d, spec.n_outputs, rng, std, head=True))
        self.last_attention = []

    def _attention(self, block, x, ctx, mask_bias):
        B, L, D = x.shape
        H = self.spec.n_heads
        dh = D // H

        def heads(t):
            return t.reshape(B, L, H, dh).transpose(0, 2, 1, 3)

        q = heads(block["q"](x, ctx))
        k = heads(block["k"](x, ctx))
        v = heads(block["v"](x, ctx))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)) + mask_bias
        probs = T.softmax(scores, axis=-1)
        self.last_attention.append(probs.data)
        context = (probs @ v).transpose(0, 2, 1, 3).reshape(B, L, D)
        return block["o"](context, ctx)

    def forward(self, batch, cache=False, noise=None):
        ids = np.asarray(batch.token_ids)
        if ids.ndim != 2:
            raise DimensionError("token batch must be 2-D (batch, seq), got {}".format(ids.shape))
        B, L = ids.shape
        if L > self.spec.max_seq_len:
            raise DimensionError(
                "sequence length {} exceeds max_seq_len {}".format(L, self.spec.max_seq_len)
            )
        ctx = self._context(batch, cache, noise)
        segments = getattr(batch, "segment_ids", None)
        if segments is None:
            segments = np.zeros_like(ids)
        mask = batch.attention_mask if batch.attention_mask is not None else np.ones_like(ids, bool)
        mask_bias = np.where(mask, 0.0, -1e9)[:, None, None, :]

        x = self.token_emb(ids) + self.position_emb.table.tensor[0:L] + self.segment_emb(segments)
        x = self.emb_norm(x)
        self.last_attention = []
        for block in self.blocks:
            x = block["attn_norm"](x + self._attention(block, x, ctx, mask_bias))
            h = block["down"](_activation(self.spec.activation, block["up"](x, ctx)), ctx)
            x = block["ffn_norm"](x + h)
        return self.head(x[:, 0, :], ctx)


def build_model(spec):
    if spec.arch == "mlp":
        return MLP(spec)
    return Miniformer(spec)


def bag_of_tokens(token_ids, attention_mask, width):
    """Normalized histogram of non-special tokens per row."""
    ids = np.asarray(token_ids)
    keep = (ids >= 3) & np.asarray(attention_mask, dtype=bool)
    out = np.zeros((ids.shape[0], width))
    rows = np.nonzero(keep)[0]
    np.add.at(out, (rows, ids[keep]), 1.0)
    counts = np.maximum(keep.sum(axis=1, keepdims=True), 1)
    return out / counts


def model_forward(model, batch, cache=False, noise=None):
    return model.forward(batch, cache=cache, noise=noise)


def backward(model, loss):
    """Fills every parameter's grad with d loss / d parameter and returns copies."""
    if loss is None:
        raise StateError("backward called before any forward pass")
    loss.backward()
    grads = dict()
    for path, p in model.params.items():
        g = p.tensor.grad
        grads[path] = np.zeros_like(p.data) if g is None else g.copy()
    return grads


## losses


def cross_entropy_loss(logits, labels):
    labels = np.asarray(labels)
    n_classes = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValidationError("labels must lie in [0, {})".format(n_classes))
    labels = labels.astype(np.int64)
    rows = np.arange(len(labels))
    z = logits.data
    value = np.mean(logsumexp(z, axis=-1) - z[rows, labels])

    def backward(g):
        grad = np_softmax(z, axis=-1)
        grad[rows, labels] -= 1.0
        logits.accumulate(g * grad / len(labels))

    return make_node(value, (logits,), backward, "cross_entropy")


def scaled_sigmoid_regression_loss(raw_output, target):
    """MSE of 5*sigmoid(raw) against targets in [0, 5]."""
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if target.size and (target.min() < 0 or target.max() > REGRESSION_SCALE):
        raise ValidationError("regression targets must lie in [0, 5]")
    raw = raw_output.data.reshape(-1)
    s = expit(raw)
    diff = REGRESSION_SCALE * s - target
    value = np.mean(diff * diff)

    def backward(g):
        grad = g * 2.0 * diff * REGRESSION_SCALE * s * (1.0 - s) / len(target)
        raw_output.accumulate(grad.reshape(raw_output.shape))

    return make_node(value, (raw_output,), backward, "scaled_sigmoid_mse")


def regression_prediction(raw):
    return REGRESSION_SCALE * expit(np.asarray(raw).reshape(-1))


## optimizer


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def fresh(cls, params):
        return cls(
            m={p.path: np.zeros_like(p.data) for p in params},
            v={p.path: np.zeros_like(p.data) for p in params},
        )


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, mask=None):
    """One Adam update. Masked-out elements keep value, grad and moments at 0."""
    bits = getattr(mask, "bits", mask) or dict()
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p in params:
        g = grads.get(p.path)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape or state.m[p.path].shape != p.data.shape:
            raise DimensionError("adam: shape mismatch for {}".format(p.path))
        keep = bits.get(p.path)
        if keep is not None:
            g = np.where(keep, g, 0.0)
        m = beta1 * state.m[p.path] + (1.0 - beta1) * g
        v = beta2 * state.v[p.path] + (1.0 - beta2) * g * g
        p.tensor.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if keep is not None:
            m = np.where(keep, m, 0.0)
            v = np.where(keep, v, 0.0)
            p.tensor.data[~keep] = 0.0
        state.m[p.path] = m
        state.v[p.path] = v


## verification


def batch_loss(model, batch, noise=None):
    out = model.forward(batch, noise=noise)
    return model.loss(out, batch.labels)


def finite_diff_check(model, batch, eps=1e-5):
    """Largest per-parameter relative error between backprop and central differences.

    For each parameter tensor the error is |analytic - numeric| / (|analytic| +
    |numeric| + 1e-12) with |.| the Euclidean norm over the tensor.
    """
    n = model.n_parameters()
    if n >= MAX_FINITE_DIFF_PARAMS:
        raise SizeError(
            "finite differences need fewer than {} parameters, model has {}".format(
                MAX_FINITE_DIFF_PARAMS, n
            )
        )
    model.zero_grad()
    analytic = backward(model, batch_loss(model, batch))

    worst = 0.0
    with no_grad():
        for path, p in model.params.items():
            data = p.tensor.data
            numeric = np.zeros_like(data)
            flat = data.reshape(-1)
            out = numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                plus = float(batch_loss(model, batch).data)
                flat[i] = orig - eps
                minus = float(batch_loss(model, batch).data)
                flat[i] = orig
                out[i] = (plus - minus) / (2.0 * eps)
            a = analytic[path]
            err = np.linalg.norm(a - numeric) / (
                np.linalg.norm(a) + np.linalg.norm(numeric) + 1e-12
            )
            logger.debug("finite differences %s: %.3g", path, err)
            worst = max(worst, float(err))
    model.zero_grad()
    return worst


def check_finite(model):
    for path, p in model.params.items():
        if not np.isfinite(p.data).all():
            raise NumericError("parameter {} holds non-finite values".format(path))


## checkpoints


def write_checkpoint(model, path, provenance=None, values=None):
    """Writes the model's parameters, or `values` laid out like the model."""
    if values is None:
        values = {p.path: p.data for p in model.parameters()}
    records = [(p.path, KIND_CODES[p.kind], values[p.path]) for p in model.parameters()]
    data = pack_tensor_records(
        CHECKPOINT_MAGIC, CHECKPOINT_VERSION, records, provenance or dict()
    )
    atomic_write_bytes(path, data)


def read_checkpoint(path):
    """Returns ({path: (kind, values)}, provenance)."""
    with open(path, "rb") as f:
        data = f.read()
    records, provenance = unpack_tensor_records(
        data, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, name=path
    )
    values = {p: (PARAM_KINDS[code], arr) for p, code, arr in records}
    return values, provenance


def read_checkpoint_provenance(path):
    return read_checkpoint(path)[1]


def assign_values(model, values):
    """Copies {path: array} into the model in place after checking coverage."""
    if set(values) != set(model.params):
        missing = sorted(set(model.params) - set(values))
        extra = sorted(set(values) - set(model.params))
        raise ConsistencyError(
            "parameter set mismatch (missing {}, unexpected {})".format(missing, extra)
        )
    for path, p in model.params.items():
        arr = values[path]
        if arr.shape != p.data.shape:
            raise ConsistencyError(
                "{}: shape {} does not match model shape {}".format(path, arr.shape, p.data.shape)
            )
        p.tensor.data[...] = arr
    model.zero_grad()
    model.clear_cache()


def load_checkpoint(model, path):
    values, provenance = read_checkpoint(path)
    for p in model.parameters():
        if p.path in values and values[p.path][0] != p.kind:
            raise ConsistencyError("{}: kind mismatch in checkpoint".format(p.path))
    assign_values(model, {k: v for k, (_, v) in values.items()})
    return provenance
