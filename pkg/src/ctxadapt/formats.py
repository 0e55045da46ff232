"""Little-endian binary formats for features, prototypes and module checkpoints.

Feature file (``COLAFEAT``)::

    magic[8] version:u32 n:u32 d:u32 has_labels:u8
    n*d float32 row-major
    n uint32 labels            (only when has_labels == 1)

Prototype file (``COLAPROT``): the same 21-byte header with ``n = C`` and
``has_labels = 0``, ``C*d`` float32, then ``C`` class names, each a u32 byte
length followed by UTF-8 bytes.

Checkpoint file (``COLACKPT``)::

    magic[8] version:u32 d:u32 hidden:u32 cau_depth:u32 mode:u8 has_mean:u8
    alpha:f64 beta:f64 gamma:f64 gate_logit:f32
    2 + cau_depth layers, adapter first: in:u32 out:u32 weight[in*out]:f32 bias[out]:f32
    d float32 frozen context mean     (only when has_mean == 1)

All readers reject bad magic, unknown versions, truncation, trailing bytes
and non-finite floats with :class:`~ctxadapt.errors.FormatError`.
"""

import os
import struct
import tempfile

import numpy as np

from .cam import INFER_MODES, CamParameters
from .classifier import ClassPrototypes
from .errors import FormatError, PrototypeNormError
from .numeric import LinearLayer

FEATURE_MAGIC = b"COLAFEAT"
PROTOTYPE_MAGIC = b"COLAPROT"
CHECKPOINT_MAGIC = b"COLACKPT"
FORMAT_VERSION = 1
HEADER = struct.Struct("<8sIIIB")
CKPT_HEADER = struct.Struct("<8sIIIIBBdddf")
PROTOTYPE_FILE_NORM_TOL = 1e-4

F32 = np.dtype("<f4")
U32 = np.dtype("<u4")


class _Cursor:
    def __init__(self, data):
        self.data = memoryview(data)
        self.offset = 0

    def take(self, size, what):
        if self.offset + size > len(self.data):
            raise FormatError(
                f"truncated file: {what} needs {size} bytes, {len(self.data) - self.offset} left", self.offset
            )
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, st, what):
        return st.unpack(self.take(st.size, what))

    def floats(self, count, what):
        start = self.offset
        arr = np.frombuffer(self.take(4 * count, what), dtype=F32).copy()
        bad = np.flatnonzero(~np.isfinite(arr))
        if bad.size:
            raise FormatError(f"non-finite value in {what}", start + 4 * int(bad[0]))
        return arr.astype(np.float32)

    def finish(self):
        if self.offset != len(self.data):
            raise FormatError(f"{len(self.data) - self.offset} unexpected trailing bytes", self.offset)


def _check_magic(magic, expected, version):
    if magic != expected:
        raise FormatError(f"bad magic {bytes(magic)!r}, expected {expected!r}", 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", 8)


def _finite_f32(arr, what):
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"refusing to write non-finite values in {what}")
    with np.errstate(over="ignore"):
        out = arr.astype(F32)
    if not np.all(np.isfinite(out)):
        raise FormatError(f"{what} overflows float32")
    return out


def _atomic_write(path, data):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


# -- features -----------------------------------------------------------------


def encode_features(features, labels=None):
    features = np.asarray(features)
    if features.ndim != 2:
        raise FormatError(f"features must be 2-D, got shape {features.shape}")
    n, d = features.shape
    parts = [HEADER.pack(FEATURE_MAGIC, FORMAT_VERSION, n, d, 0 if labels is None else 1)]
    parts.append(_finite_f32(features, "features").tobytes())
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != (n,):
            raise FormatError(f"{labels.size} labels for {n} rows")
        if labels.size and (labels.min() < 0 or labels.max() > 0xFFFFFFFF):
            raise FormatError("labels must fit in uint32")
        parts.append(labels.astype(U32).tobytes())
    return b"".join(parts)


def decode_features(data):
    """Returns ``(features, labels)``; ``labels`` is ``None`` when absent."""
    cur = _Cursor(data)
    magic, version, n, d, has_labels = cur.unpack(HEADER, "header")
    _check_magic(magic, FEATURE_MAGIC, version)
    if has_labels not in (0, 1):
        raise FormatError(f"has_labels flag must be 0 or 1, got {has_labels}", 20)
    expected = HEADER.size + 4 * n * d + 4 * n * has_labels
    if len(data) != expected:
        raise FormatError(f"file length {len(data)} != expected {expected} for n={n}, d={d}", min(len(data), expected))
    feats = cur.floats(n * d, "feature payload").reshape(n, d)
    labels = None
    if has_labels:
        labels = np.frombuffer(cur.take(4 * n, "labels"), dtype=U32).astype(np.int64)
    cur.finish()
    return feats, labels


def write_features(path, features, labels=None):
    _atomic_write(path, encode_features(features, labels))


def read_features(path):
    return decode_features(_read_bytes(path))


# -- prototypes ---------------------------------------------------------------


def encode_prototypes(protos):
    emb = np.asarray(protos.embeddings)
    c, d = emb.shape
    parts = [HEADER.pack(PROTOTYPE_MAGIC, FORMAT_VERSION, c, d, 0), _finite_f32(emb, "prototypes").tobytes()]
    for name in protos.class_names:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
    return b"".join(parts)


def decode_prototypes(data):
    cur = _Cursor(data)
    magic, version, c, d, flag = cur.unpack(HEADER, "header")
    _check_magic(magic, PROTOTYPE_MAGIC, version)
    if flag != 0:
        raise FormatError(f"prototype files carry no labels; flag byte is {flag}", 20)
    payload_start = cur.offset
    emb = cur.floats(c * d, "prototype payload").reshape(c, d)
    names = []
    for k in range(c):
        (length,) = cur.unpack(struct.Struct("<I"), f"length of class name {k}")
        start = cur.offset
        try:
            names.append(bytes(cur.take(length, f"class name {k}")).decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"class name {k} is not valid UTF-8", start) from exc
    cur.finish()
    if len(set(names)) != len(names):
        raise FormatError("duplicate class names")
    if c < 2:
        raise FormatError(f"need at least two classes, file has {c}")
    norms = np.linalg.norm(emb.astype(np.float64), axis=1)
    for k, norm in enumerate(norms):
        if abs(norm - 1.0) > PROTOTYPE_FILE_NORM_TOL:
            raise PrototypeNormError(
                f"prototype row {k} has norm {norm:.6g}, expected 1 within {PROTOTYPE_FILE_NORM_TOL}",
                row=k,
                offset=payload_start + 4 * d * k,
            )
    return ClassPrototypes(names, emb, norm_tol=PROTOTYPE_FILE_NORM_TOL)


def write_prototypes(path, protos):
    _atomic_write(path, encode_prototypes(protos))


def read_prototypes(path):
    return decode_prototypes(_read_bytes(path))


# -- checkpoints --------------------------------------------------------------


def encode_checkpoint(params):
    has_mean = params.frozen_mean is not None
    parts = [
        CKPT_HEADER.pack(
            CHECKPOINT_MAGIC,
            FORMAT_VERSION,
            params.dim,
            params.hidden_dim,
            params.cau_depth,
            INFER_MODES.index(params.mode),
            int(has_mean),
            params.alpha,
            params.beta,
            params.gamma,
            float(params.gate_logit),
        )
    ]
    if not np.isfinite(np.float32(params.gate_logit)):
        raise FormatError("refusing to write a non-finite gate logit")
    for i, layer in enumerate(params.layers()):
        parts.append(struct.pack("<II", layer.in_dim, layer.out_dim))
        parts.append(_finite_f32(layer.weight, f"layer {i} weight").tobytes())
        parts.append(_finite_f32(layer.bias, f"layer {i} bias").tobytes())
    if has_mean:
        parts.append(_finite_f32(params.frozen_mean, "context mean").tobytes())
    return b"".join(parts)


def decode_checkpoint(data):
    cur = _Cursor(data)
    magic, version, d, h, depth, mode, has_mean, alpha, beta, gamma, gate_logit = cur.unpack(CKPT_HEADER, "header")
    _check_magic(magic, CHECKPOINT_MAGIC, version)
    if not 2 <= depth <= 4:
        raise FormatError(f"context MLP depth {depth} outside 2-4", 20)
    if mode >= len(INFER_MODES):
        raise FormatError(f"unknown inference mode code {mode}", 24)
    if has_mean not in (0, 1):
        raise FormatError(f"has_mean flag must be 0 or 1, got {has_mean}", 25)
    for off, value in ((26, alpha), (34, beta), (42, gamma), (50, gate_logit)):
        if not np.isfinite(value):
            raise FormatError("non-finite scalar in header", off)
        if off < 50 and value < 0:
            raise FormatError("negative fusion coefficient", off)
    layers = []
    for i in range(2 + depth):
        start = cur.offset
        in_dim, out_dim = cur.unpack(struct.Struct("<II"), f"layer {i} shape")
        if in_dim == 0 or out_dim == 0 or in_dim * out_dim > len(data):
            raise FormatError(f"implausible layer {i} shape {in_dim}x{out_dim}", start)
        weight = cur.floats(in_dim * out_dim, f"layer {i} weight").reshape(in_dim, out_dim)
        bias = cur.floats(out_dim, f"layer {i} bias")
        layers.append(LinearLayer(weight, bias))
    mean = cur.floats(d, "context mean") if has_mean else None
    cur.finish()
    expected_dims = [(d, h), (h, d)] + list(zip([d] + [h] * (depth - 1), [h] * (depth - 1) + [d]))
    if [(layer.in_dim, layer.out_dim) for layer in layers] != expected_dims:
        raise FormatError(f"layer shapes do not match header d={d}, hidden={h}, depth={depth}")
    return CamParameters(layers[:2], layers[2:], np.float32(gate_logit), alpha, beta, gamma, INFER_MODES[mode], mean)


def write_checkpoint(path, params):
    _atomic_write(path, encode_checkpoint(params))


def read_checkpoint(path):
    return decode_checkpoint(_read_bytes(path))
