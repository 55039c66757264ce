#!/usr/bin/env python3

import os
import os.path
import re
import json
import struct
import hashlib
import zlib
import tempfile
from concurrent.futures import ProcessPoolExecutor

import numpy as np


class DeepcutsError(Exception):
    exit_code = 1


class ConfigError(DeepcutsError, ValueError):
    exit_code = 2


class DataError(DeepcutsError, ValueError):
    exit_code = 3


class ValidationError(DataError):
    pass


class NumericError(DeepcutsError, ArithmeticError):
    exit_code = 4


class TrainingError(NumericError):
    pass


class InfeasibleCompressionError(DeepcutsError, ValueError):
    exit_code = 5

    def __init__(self, ratio, max_ratio):
        self.ratio = ratio
        self.max_ratio = max_ratio
        super().__init__(
            "compression ratio {} is infeasible, the maximum achievable "
            "ratio is {:.6g}".format(ratio, max_ratio)
        )

    def __reduce__(self):
        return (type(self), (self.ratio, self.max_ratio))


class StateError(DeepcutsError, RuntimeError):
    pass


class ConsistencyError(DeepcutsError, ValueError):
    pass


class DimensionError(ConsistencyError):
    pass


class FormatError(DeepcutsError, ValueError):
    pass


class SizeError(DeepcutsError, ValueError):
    pass


class StageError(DeepcutsError):
    """Failure inside a labeled pipeline stage, keeps the cause's exit code."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
        super().__init__("stage '{}' failed: {}".format(stage, cause))

    # rebuilt from stage and cause when sent back from a worker process
    def __reduce__(self):
        return (type(self), (self.stage, self.cause))


def atoi(text):
    return int(text) if text.isdigit() else text


def natural_keys(text):
    """
    alist.sort(key=natural_keys) sorts in human order
    http://nedbatchelder.com/blog/200712/human_sorting.html
    """
    return [atoi(c) for c in re.split(r"(\d+)", text)]


def full_path(path):
    path_user = os.path.expanduser(path)
    path_full = os.path.abspath(path_user)
    path_norm = os.path.normpath(path_full)
    return path_norm


def true_basename(fname):
    basename = os.path.basename(fname)
    basename = os.path.splitext(basename)[0]
    return basename


def ratio_tag(ratio):
    return "r{:g}".format(float(ratio))


def derive_seed(seed, *keys):
    """Deterministic child seed from a root seed and ints or strings."""
    entropy = [int(seed) & 0xFFFFFFFF]
    for key in keys:
        if isinstance(key, str):
            entropy.append(zlib.crc32(key.encode("utf8")))
        else:
            entropy.append(int(key) & 0xFFFFFFFF)
    state = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 32 | int(state[1])


def config_hash(*sections):
    text = json.dumps(sections, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf8")).hexdigest()


def file_sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def atomic_write_bytes(path, data):
    folder = os.path.dirname(path) or "."
    os.makedirs(folder, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf8"))


## binary containers


class ByteReader:
    def __init__(self, data, name="container"):
        self.data = data
        self.offset = 0
        self.name = name

    def take(self, n):
        if self.offset + n > len(self.data):
            raise FormatError(
                "{} is truncated at byte {} (wanted {} more)".format(
                    self.name, self.offset, n
                )
            )
        out = self.data[self.offset : self.offset + n]
        self.offset += n
        return out

    def unpack(self, fmt):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def string(self):
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf8")

    def header(self, magic, version):
        found = self.take(len(magic))
        if found != magic:
            raise FormatError(
                "{}: bad magic {!r}, expected {!r}".format(self.name, found, magic)
            )
        (found_version,) = self.unpack("<H")
        if found_version != version:
            raise FormatError(
                "{}: unsupported version {}, expected {}".format(
                    self.name, found_version, version
                )
            )

    def trailer(self):
        if self.offset == len(self.data):
            return dict()
        (n,) = self.unpack("<I")
        raw = self.take(n)
        if self.offset != len(self.data):
            raise FormatError("{}: trailing garbage after trailer".format(self.name))
        try:
            provenance = json.loads(raw.decode("utf8"))
        except ValueError as e:
            raise FormatError("{}: corrupt provenance trailer ({})".format(self.name, e)) from e
        if not isinstance(provenance, dict):
            raise FormatError("{}: provenance trailer is not a table".format(self.name))
        return provenance


def pack_string(text):
    raw = text.encode("utf8")
    return struct.pack("<H", len(raw)) + raw


def pack_trailer(provenance):
    raw = json.dumps(provenance, sort_keys=True).encode("utf8")
    return struct.pack("<I", len(raw)) + raw


def pack_tensor_records(magic, version, records, provenance):
    """records: list of (path, kind_code, array) written as little-endian f64."""
    out = [magic, struct.pack("<HI", version, len(records))]
    for path, kind_code, values in records:
        values = np.asarray(values, dtype="<f8")
        out.append(pack_string(path))
        out.append(struct.pack("<BB", kind_code, values.ndim))
        out.append(struct.pack("<{}I".format(values.ndim), *values.shape))
        out.append(np.ascontiguousarray(values).tobytes())
    out.append(pack_trailer(provenance))
    return b"".join(out)


def unpack_tensor_records(data, magic, version, name="container"):
    reader = ByteReader(data, name)
    reader.header(magic, version)
    (count,) = reader.unpack("<I")
    records = []
    for _ in range(count):
        path = reader.string()
        kind_code, rank = reader.unpack("<BB")
        dims = reader.unpack("<{}I".format(rank))
        n = int(np.prod(dims, dtype=np.int64))
        values = np.frombuffer(reader.take(8 * n), dtype="<f8").astype(np.float64)
        records.append((path, kind_code, values.reshape(dims)))
    provenance = reader.trailer()
    return records, provenance


def read_provenance(path, reader_fun):
    """Provenance of an artifact, or None when missing or unreadable."""
    if not os.path.exists(path):
        return None
    try:
        return reader_fun(path)
    except DeepcutsError:
        return None


## cell iteration


def process_all(config, process_cell, cells, **args):
    """Runs process_cell(config, *cell) for every cell, in a pool when npool > 1.

    Results come back in cell order.
    """
    npool = config["pipeline"].get("npool", 1)
    cells = list(cells)
    if npool <= 1 or len(cells) <= 1:
        return [process_cell(config, *cell, **args) for cell in cells]

    with ProcessPoolExecutor(max_workers=npool) as pool:
        futures = [pool.submit(process_cell, config, *cell, **args) for cell in cells]
        return [f.result() for f in futures]
