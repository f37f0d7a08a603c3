"""Top-k error, branch stripping and the binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    b"CNDS"                       magic
    uint32                        format version
    uint64 + UTF-8 bytes          network spec in the config grammar,
                                  with a [meta] section
    per parameter, in declaration order:
        uint8                     rank
        uint32 * rank             extents
        float32 * prod(extents)   row-major payload
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .network import MAIN, NetworkSpec, ParameterStore

MAGIC = b"CNDS"
VERSION = 1


class CheckpointError(ValueError):
    pass


def top_k_error(probs, labels, k) -> float:
    """Fraction of rows whose label is not among the ``k`` highest scores.

    Equal scores rank the lower class index first.
    """
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    n, num_classes = probs.shape
    if not 1 <= k <= num_classes:
        raise ValueError(f"k={k} outside [1, {num_classes}]")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label out of range [0, {num_classes})")
    if n == 0:
        return 0.0
    true = probs[np.arange(n), labels][:, None]
    idx = np.arange(num_classes)[None, :]
    # rank = number of classes ordered strictly ahead of the true one
    ahead = (probs > true) | ((probs == true) & (idx < labels[:, None]))
    rank = ahead.sum(axis=1)
    return float(np.mean(rank >= k))


def strip_branches(spec: NetworkSpec, params: ParameterStore = None):
    """Drop every auxiliary branch and its parameters.

    The main-path arrays are shared, not copied, so they stay bitwise equal.
    """
    stripped = spec.without_branches()
    if params is None:
        return stripped, None
    keep = [n for n, lbl in params.partition.items() if lbl == MAIN]
    return stripped, params.subset(keep)


# ----------------------------------------------------------------------------
# checkpoints


def _param_order(spec: NetworkSpec, network):
    return [
        f"{name}.{kind}"
        for name in spec.block_names
        if name in network.param_shapes
        for kind in ("weight", "bias")
    ]


def encode_checkpoint(spec: NetworkSpec, params: ParameterStore, metadata: Dict,
                      input_shape) -> bytes:
    from .config import format_spec
    from .network import build

    network = build(spec, input_shape)
    meta = {"input": ",".join(str(int(s)) for s in input_shape)}
    meta.update({k: v for k, v in metadata.items() if k != "input"})
    text = format_spec(spec, meta).encode("utf-8")
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(text)), text]
    order = _param_order(spec, network)
    if set(order) != set(params.keys()):
        raise CheckpointError("parameter store does not match the network spec")
    for key in order:
        a = np.asarray(params[key])
        out.append(struct.pack("<B", a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(a.astype("<f4").tobytes())
    return b"".join(out)


def save_checkpoint(path, spec, params, metadata=None, input_shape=None):
    """Write a checkpoint.  ``input_shape`` may also come from ``metadata['input']``."""
    metadata = dict(metadata or {})
    if input_shape is None:
        if "input" not in metadata:
            raise CheckpointError("input shape is required")
        input_shape = metadata["input"]
        if isinstance(input_shape, str):
            input_shape = input_shape.split(",")
        input_shape = tuple(int(v) for v in input_shape)
    Path(path).write_bytes(encode_checkpoint(spec, params, metadata, input_shape))


def decode_checkpoint(raw: bytes):
    from .config import ConfigError, parse_config
    from .network import build

    if raw[:4] != MAGIC:
        raise CheckpointError("bad magic")
    if len(raw) < 16:
        raise CheckpointError("truncated header")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != VERSION:
        raise CheckpointError(f"version mismatch: file has {version}, expected {VERSION}")
    (length,) = struct.unpack("<Q", raw[8:16])
    pos = 16 + length
    if len(raw) < pos:
        raise CheckpointError("truncated spec text")
    try:
        cfg = parse_config(raw[16:pos].decode("utf-8"))
    except (ConfigError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"unreadable spec: {exc}") from None
    meta = dict(cfg.meta)
    if "input" not in meta:
        raise CheckpointError("spec text lacks the input shape")
    input_shape = tuple(int(v) for v in meta["input"].split(","))
    network = build(cfg.spec, input_shape)
    arrays = {}
    for key in _param_order(cfg.spec, network):
        block, kind = key.rsplit(".", 1)
        expected = network.param_shapes[block][0 if kind == "weight" else 1]
        if pos + 1 > len(raw):
            raise CheckpointError(f"truncated: blob count below spec ({key} missing)")
        rank = raw[pos]
        pos += 1
        if pos + 4 * rank > len(raw):
            raise CheckpointError("truncated shape header")
        shape = struct.unpack(f"<{rank}I", raw[pos:pos + 4 * rank])
        pos += 4 * rank
        if tuple(shape) != expected:
            raise CheckpointError(f"shape mismatch for {key}: file {shape}, spec {expected}")
        nbytes = 4 * int(np.prod(shape))
        if pos + nbytes > len(raw):
            raise CheckpointError(f"truncated payload for {key}")
        arrays[key] = np.frombuffer(raw, "<f4", int(np.prod(shape)), pos).reshape(shape).astype(np.float64)
        pos += nbytes
    if pos != len(raw):
        raise CheckpointError("blob count exceeds spec (trailing bytes)")
    params = ParameterStore(arrays, {n: network.partition[n] for n in network.param_shapes})
    meta["input"] = input_shape
    return cfg.spec, params, meta


def load_checkpoint(path) -> Tuple[NetworkSpec, ParameterStore, Dict]:
    """Read a checkpoint; returns ``(spec, params, metadata)``.

    Metadata values other than ``input`` come back as strings.
    """
    return decode_checkpoint(Path(path).read_bytes())
