"""Self-describing single-file checkpoint: text header + raw float32 payload.

Layout (ascii header, one token-separated record per line):

    UMEC
    format_version 1
    model_kind dense|moe
    <config key> <value>          one line per architecture field
    tensor <name> <d0xd1x...> <byte offset into payload>
    trainable <name>              the freeze manifest
    end_header
    <little-endian float32 buffers, concatenated in tensor order>

Buffers are always stored little-endian, so files load identically across
platforms. Saving a loaded model reproduces the input byte for byte.
"""

from __future__ import annotations

import os

import numpy as np

from .autograd import Tensor
from .model import DenseModel, ModelConfig, MoEModel
from .moe import MoEConfig
from .upcycle import trainable_manifest

MAGIC = "UMEC"
FORMAT_VERSION = 1

_MODEL_FIELDS = (
    "d_model",
    "n_blocks",
    "ffn_hidden",
    "n_heads",
    "vocab_size",
    "downsample_rate",
    "max_len",
    "d_feat",
)
_MOE_INT_FIELDS = ("n_experts", "top_k")
_MOE_FLOAT_FIELDS = ("alpha", "router_noise_std")


class CheckpointError(ValueError):
    """Base class for malformed checkpoint files."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointHeaderError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointConsistencyError(CheckpointError):
    pass


def save_checkpoint(model, path) -> None:
    lines = [MAGIC, f"format_version {FORMAT_VERSION}", f"model_kind {model.kind}"]
    cfg = model.config
    for field in _MODEL_FIELDS:
        lines.append(f"{field} {getattr(cfg, field)}")
    if model.kind == "moe":
        mc = model.moe_config
        for field in _MOE_INT_FIELDS:
            lines.append(f"{field} {getattr(mc, field)}")
        for field in _MOE_FLOAT_FIELDS:
            lines.append(f"{field} {getattr(mc, field)!r}")
    offset = 0
    buffers = []
    for name in model.parameter_names():
        arr = model.params[name].data
        shape = "x".join(str(s) for s in arr.shape)
        lines.append(f"tensor {name} {shape} {offset}")
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        buffers.append(buf)
        offset += len(buf)
    for name in trainable_manifest(model):
        lines.append(f"trainable {name}")
    lines.append("end_header")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write("\n".join(lines).encode("ascii") + b"\n")
        fh.write(b"".join(buffers))
    os.replace(tmp, path)


def _split_header(data: bytes) -> tuple[list[str], bytes]:
    lines: list[str] = []
    pos = 0
    while True:
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise CheckpointHeaderError("header never terminated by end_header")
        try:
            line = data[pos:nl].decode("ascii")
        except UnicodeDecodeError as exc:
            raise CheckpointHeaderError(f"non-ascii bytes in header: {exc}") from None
        pos = nl + 1
        if line == "end_header":
            return lines, data[pos:]
        lines.append(line)


def load_checkpoint(path):
    """Reconstruct a model (dense or MoE) from ``path``.

    Raises a distinct error subclass for a wrong magic, an unsupported
    version, malformed header records, truncated payloads, and shape/offset
    inconsistencies.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith((MAGIC + "\n").encode("ascii")):
        raise CheckpointMagicError(f"{path}: file does not start with magic {MAGIC!r}")
    lines, payload = _split_header(data)
    if len(lines) < 2 or not lines[1].startswith("format_version "):
        raise CheckpointVersionError(f"{path}: missing format_version record")
    version_text = lines[1].split(" ", 1)[1]
    if version_text != str(FORMAT_VERSION):
        raise CheckpointVersionError(f"{path}: unsupported format_version {version_text!r}")

    config_items: dict[str, str] = {}
    index: list[tuple[str, tuple[int, ...], int]] = []
    manifest: list[str] = []
    seen = set()
    for line in lines[2:]:
        parts = line.split(" ")
        if parts[0] == "tensor":
            if len(parts) != 4:
                raise CheckpointHeaderError(f"malformed tensor record: {line!r}")
            name, shape_text, offset_text = parts[1], parts[2], parts[3]
            if name in seen:
                raise CheckpointHeaderError(f"duplicate tensor name {name!r}")
            seen.add(name)
            try:
                shape = tuple(int(s) for s in shape_text.split("x"))
                byte_offset = int(offset_text)
            except ValueError:
                raise CheckpointHeaderError(f"malformed tensor record: {line!r}") from None
            index.append((name, shape, byte_offset))
        elif parts[0] == "trainable":
            if len(parts) != 2:
                raise CheckpointHeaderError(f"malformed trainable record: {line!r}")
            manifest.append(parts[1])
        elif len(parts) == 2:
            config_items[parts[0]] = parts[1]
        else:
            raise CheckpointHeaderError(f"unrecognized header line: {line!r}")

    def config_value(key: str, convert):
        if key not in config_items:
            raise CheckpointHeaderError(f"missing config key {key!r}")
        try:
            return convert(config_items[key])
        except ValueError:
            raise CheckpointHeaderError(
                f"config key {key!r} has malformed value {config_items[key]!r}"
            ) from None

    kind = config_value("model_kind", str)
    if kind not in ("dense", "moe"):
        raise CheckpointHeaderError(f"unknown model_kind {kind!r}")
    try:
        model_config = ModelConfig(**{f: config_value(f, int) for f in _MODEL_FIELDS})
    except ValueError as exc:
        raise CheckpointHeaderError(f"invalid architecture config: {exc}") from None

    expected_offset = 0
    for name, shape, byte_offset in index:
        if byte_offset != expected_offset:
            raise CheckpointConsistencyError(
                f"tensor {name!r}: header offset {byte_offset} does not match "
                f"its byte span (expected {expected_offset})"
            )
        expected_offset += 4 * int(np.prod(shape))
    if len(payload) < expected_offset:
        for name, shape, byte_offset in index:
            if byte_offset + 4 * int(np.prod(shape)) > len(payload):
                raise CheckpointTruncatedError(
                    f"payload truncated inside tensor {name!r} "
                    f"({len(payload)} bytes, need {expected_offset})"
                )
    if len(payload) > expected_offset:
        raise CheckpointConsistencyError(
            f"{len(payload) - expected_offset} trailing payload bytes after the last tensor"
        )

    params: dict[str, Tensor] = {}
    for name, shape, byte_offset in index:
        n_bytes = 4 * int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=n_bytes // 4, offset=byte_offset)
        params[name] = Tensor(
            arr.astype(np.float32, copy=True).reshape(shape), requires_grad=True
        )

    try:
        if kind == "moe":
            moe_config = MoEConfig(
                **{f: config_value(f, int) for f in _MOE_INT_FIELDS},
                **{f: config_value(f, float) for f in _MOE_FLOAT_FIELDS},
            )
            model = MoEModel(model_config, moe_config, params)
        else:
            model = DenseModel(model_config, params)
    except ValueError as exc:
        raise CheckpointConsistencyError(
            f"parameter table does not match the declared architecture: {exc}"
        ) from None

    for name in manifest:
        if name not in params:
            raise CheckpointConsistencyError(f"trainable manifest names unknown tensor {name!r}")
    return model
