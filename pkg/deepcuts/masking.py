#!/usr/bin/env python3

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .common import (
    ConfigError,
    ConsistencyError,
    InfeasibleCompressionError,
    ByteReader,
    atomic_write_bytes,
    pack_string,
    pack_trailer,
)

MASK_MAGIC = b"DCMASK"
MASK_VERSION = 1


@dataclass
class CompressionSpec:
    ratio: float
    n_total: int
    n_prunable: int

    def __post_init__(self):
        if self.ratio < 1:
            raise ConfigError("compression ratio must be >= 1, got {}".format(self.ratio))
        if not 0 < self.n_prunable <= self.n_total:
            raise ConfigError(
                "need 0 < n_prunable <= n_total, got {} and {}".format(self.n_prunable, self.n_total)
            )

    @property
    def max_ratio(self):
        fixed = self.n_total - self.n_prunable
        return math.inf if fixed == 0 else self.n_total / fixed

    @property
    def kept_fraction(self):
        return compression_to_kept_fraction(self)


def compression_to_kept_fraction(spec):
    """Fraction of prunable parameters kept so that total/kept-total == ratio."""
    fixed = spec.n_total - spec.n_prunable
    if spec.n_total / spec.ratio <= fixed:
        raise InfeasibleCompressionError(spec.ratio, spec.max_ratio)
    f = (spec.n_total / spec.ratio - fixed) / spec.n_prunable
    return min(f, 1.0)


def kept_count(f, n):
    """Round half up, clamped to [0, n]."""
    return int(min(max(math.floor(f * n + 0.5), 0), n))


@dataclass
class PruneMask:
    bits: dict
    kept_counts: dict
    strategy: str = ""
    scope: str = "layer"
    ratio: float = 1.0
    kept_fraction: float = 1.0
    provenance: dict = field(default_factory=dict)

    @property
    def paths(self):
        return list(self.bits)

    def total_kept(self):
        return sum(self.kept_counts.values())

    def total_elements(self):
        return sum(b.size for b in self.bits.values())

    def check(self):
        for path, b in self.bits.items():
            if int(b.sum()) != self.kept_counts[path]:
                raise ConsistencyError("{}: popcount does not match kept count".format(path))


def _check_scores(acc):
    for path, shape in acc.shapes.items():
        if acc.scores[path].shape != shape:
            raise ConsistencyError("{}: score shape mismatch".format(path))
    acc.validate()


def _top_k(scores, k):
    """Indices of the k highest scores; ties keep the lower flat index."""
    order = np.argsort(-scores, kind="stable")
    keep = np.zeros(scores.size, dtype=bool)
    keep[order[:k]] = True
    return keep


def _make_mask(acc, spec, bits, scope):
    return PruneMask(
        bits=bits,
        kept_counts={p: int(b.sum()) for p, b in bits.items()},
        strategy=acc.strategy.kind,
        scope=scope,
        ratio=float(spec.ratio),
        kept_fraction=float(spec.kept_fraction),
        provenance=dict(strategy=acc.strategy.kind, ratio=float(spec.ratio), seed=acc.strategy.seed),
    )


def build_mask_layerwise(acc, spec):
    _check_scores(acc)
    f = compression_to_kept_fraction(spec)
    bits = dict()
    for path, s in acc.scores.items():
        flat = s.reshape(-1)
        bits[path] = _top_k(flat, kept_count(f, flat.size)).reshape(s.shape)
    return _make_mask(acc, spec, bits, "layer")


def build_mask_global(acc, spec):
    _check_scores(acc)
    f = compression_to_kept_fraction(spec)
    paths = list(acc.scores)
    sizes = [acc.scores[p].size for p in paths]
    pooled = np.concatenate([acc.scores[p].reshape(-1) for p in paths])
    # concatenation order is (tensor order, flat index), the secondary tie keys
    keep = _top_k(pooled, kept_count(f, pooled.size))
    bits = dict()
    start = 0
    for path, size in zip(paths, sizes):
        bits[path] = keep[start : start + size].reshape(acc.scores[path].shape)
        start += size
    return _make_mask(acc, spec, bits, "global")


def build_mask(acc, spec):
    if acc.strategy.scope == "global":
        return build_mask_global(acc, spec)
    return build_mask_layerwise(acc, spec)


def ones_mask(model):
    bits = {p.path: np.ones(p.data.shape, dtype=bool) for p in model.prunable_parameters()}
    return PruneMask(bits=bits, kept_counts={p: int(b.size) for p, b in bits.items()})


def _check_coverage(model, mask):
    prunable = {p.path: p for p in model.prunable_parameters()}
    if set(prunable) != set(mask.bits):
        raise ConsistencyError(
            "mask covers {} tensors but the model has {} prunable tensors".format(
                len(mask.bits), len(prunable)
            )
        )
    for path, p in prunable.items():
        if mask.bits[path].shape != p.data.shape:
            raise ConsistencyError(
                "{}: mask shape {} does not match parameter shape {}".format(
                    path, mask.bits[path].shape, p.data.shape
                )
            )
    return prunable


def apply_mask(model, mask):
    """Zeroes masked elements and their gradients in place."""
    prunable = _check_coverage(model, mask)
    for path, p in prunable.items():
        keep = mask.bits[path]
        p.tensor.data[~keep] = 0.0
        if p.tensor.grad is not None:
            p.tensor.grad[~keep] = 0.0
    return model


def masked_linf(model, mask):
    prunable = _check_coverage(model, mask)
    worst = 0.0
    for path, p in prunable.items():
        dropped = p.data[~mask.bits[path]]
        if dropped.size:
            worst = max(worst, float(np.abs(dropped).max()))
    return worst


## persistence


def write_mask(mask, path, provenance=None):
    out = [MASK_MAGIC, struct.pack("<HI", MASK_VERSION, len(mask.bits))]
    for p, b in mask.bits.items():
        flat = b.reshape(-1)
        out.append(pack_string(p))
        out.append(struct.pack("<QQ", flat.size, int(flat.sum())))
        out.append(np.packbits(flat, bitorder="little").tobytes())
    trailer = dict(mask.provenance)
    trailer.update(
        strategy=mask.strategy,
        scope=mask.scope,
        ratio=mask.ratio,
        kept_fraction=mask.kept_fraction,
        shapes={p: list(b.shape) for p, b in mask.bits.items()},
    )
    trailer.update(provenance or dict())
    out.append(pack_trailer(trailer))
    atomic_write_bytes(path, b"".join(out))


def read_mask(path):
    with open(path, "rb") as f:
        data = f.read()
    reader = ByteReader(data, path)
    reader.header(MASK_MAGIC, MASK_VERSION)
    (count,) = reader.unpack("<I")
    flat_bits = dict()
    kept = dict()
    for _ in range(count):
        name = reader.string()
        n, k = reader.unpack("<QQ")
        packed = np.frombuffer(reader.take((n + 7) // 8), dtype=np.uint8)
        flat_bits[name] = np.unpackbits(packed, count=n, bitorder="little").astype(bool)
        kept[name] = int(k)
    trailer = reader.trailer()
    shapes = trailer.get("shapes", dict())
    bits = {p: b.reshape(shapes.get(p, b.shape)) for p, b in flat_bits.items()}
    mask = PruneMask(
        bits=bits,
        kept_counts=kept,
        strategy=trailer.get("strategy", ""),
        scope=trailer.get("scope", "layer"),
        ratio=trailer.get("ratio", 1.0),
        kept_fraction=trailer.get("kept_fraction", 1.0),
        provenance=trailer,
    )
    mask.check()
    return mask


def read_mask_provenance(path):
    return read_mask(path).provenance
