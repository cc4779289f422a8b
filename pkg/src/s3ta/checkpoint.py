"""Single-file checkpoint archive.

Byte layout (all integers little-endian u32):

    bytes 0..4    magic "S3TA"
    bytes 4..8    format version (currently 1)
    u32 L1 + L1 bytes   config text block, utf-8 "key=value" lines
    u32 L2 + L2 bytes   manifest text, one line per array:
                        "<name> float32 <dim0xdim1x...|-> <byte offset>"
    raw array data      little-endian float32, offsets relative to here

The archive is inspectable without any model code: the two text blocks are
plain utf-8 and the manifest pins every array's location. Loads are strict;
a malformed or truncated file raises before any state is returned, and
writes land via a temp file plus atomic rename so a crash cannot leave a
torn checkpoint behind.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .model import BackboneSpec, ModelConfig

CHECKPOINT_MAGIC = b"S3TA"
CHECKPOINT_VERSION = 1


class CheckpointFormatError(ValueError):
    """The file does not parse as a checkpoint archive."""


class UnsupportedVersionError(CheckpointFormatError):
    """The archive declares a format version this code cannot read."""


def _shape_str(shape: tuple[int, ...]) -> str:
    return "x".join(str(d) for d in shape) if shape else "-"


def _parse_shape(text: str) -> tuple[int, ...]:
    if text == "-":
        return ()
    try:
        dims = tuple(int(d) for d in text.split("x"))
    except ValueError as exc:
        raise CheckpointFormatError(f"bad shape field {text!r}") from exc
    if any(d < 0 for d in dims):
        raise CheckpointFormatError(f"negative dimension in shape {text!r}")
    return dims


def write_archive(
    path: str | Path,
    config_items: Mapping[str, str],
    arrays: Mapping[str, np.ndarray],
) -> None:
    """Serialize name->float32-array mappings with a text header."""
    for key, value in config_items.items():
        if "=" in key or "\n" in key or "\n" in str(value):
            raise ValueError(f"config item {key!r} cannot be encoded")
    names = sorted(arrays)
    blobs: list[bytes] = []
    manifest_lines: list[str] = []
    offset = 0
    for name in names:
        if any(ch.isspace() for ch in name) or not name:
            raise ValueError(f"array name {name!r} cannot be encoded")
        # asarray keeps rank-0 shapes; tobytes() densifies any layout itself
        arr = np.asarray(arrays[name])
        if arr.dtype != np.float32:
            raise ValueError(f"array {name!r} must be float32, got {arr.dtype}")
        raw = arr.astype("<f4", copy=False).tobytes()
        manifest_lines.append(f"{name} float32 {_shape_str(arr.shape)} {offset}")
        blobs.append(raw)
        offset += len(raw)

    config_text = "".join(
        f"{k}={config_items[k]}\n" for k in sorted(config_items)
    ).encode("utf-8")
    manifest_text = ("\n".join(manifest_lines) + ("\n" if manifest_lines else "")).encode(
        "utf-8"
    )

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(config_text)))
        fh.write(config_text)
        fh.write(struct.pack("<I", len(manifest_text)))
        fh.write(manifest_text)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def read_archive(path: str | Path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    """Parse an archive; returns (config items, name->array)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path} is not a checkpoint archive")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(
            f"{path} has format version {version}, expected {CHECKPOINT_VERSION}"
        )
    pos = 8
    config_text, pos = _read_block(data, pos, path, "config")
    manifest_text, pos = _read_block(data, pos, path, "manifest")
    payload = data[pos:]

    config_items: dict[str, str] = {}
    for line in config_text.decode("utf-8").splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointFormatError(f"config line without '=': {line!r}")
        config_items[key] = value

    arrays: dict[str, np.ndarray] = {}
    last_end = 0
    for line in manifest_text.decode("utf-8").splitlines():
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise CheckpointFormatError(f"bad manifest line {line!r}")
        name, dtype, shape_text, offset_text = parts
        if dtype != "float32":
            raise CheckpointFormatError(f"unsupported dtype {dtype!r} for {name!r}")
        shape = _parse_shape(shape_text)
        try:
            offset = int(offset_text)
        except ValueError as exc:
            raise CheckpointFormatError(f"bad offset in {line!r}") from exc
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = offset + 4 * count
        if offset < last_end:
            raise CheckpointFormatError(f"overlapping array data at {name!r}")
        if end > len(payload):
            raise CheckpointFormatError(
                f"array {name!r} extends past end of file ({end} > {len(payload)})"
            )
        if name in arrays:
            raise CheckpointFormatError(f"duplicate array name {name!r}")
        arrays[name] = np.frombuffer(
            payload, dtype="<f4", count=count, offset=offset
        ).reshape(shape).copy()
        last_end = end
    if last_end != len(payload):
        raise CheckpointFormatError(
            f"{len(payload) - last_end} trailing bytes after array data"
        )
    return config_items, arrays


def _read_block(data: bytes, pos: int, path, what: str) -> tuple[bytes, int]:
    if pos + 4 > len(data):
        raise CheckpointFormatError(f"{path}: truncated before {what} length")
    (length,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if pos + length > len(data):
        raise CheckpointFormatError(f"{path}: truncated inside {what} block")
    return data[pos : pos + length], pos + length


# ---------------------------------------------------------------------------
# ModelConfig <-> text items
# ---------------------------------------------------------------------------

_MODEL_INT_FIELDS = (
    "unroll_steps",
    "num_heads",
    "key_channels",
    "value_channels",
    "basis_frequencies",
    "controller_width",
    "query_hidden_width",
    "output_hidden_width",
    "num_classes",
)
_BACKBONE_INT_FIELDS = (
    "input_height",
    "input_width",
    "in_channels",
    "stem_channels",
    "stem_stride",
)


def model_config_to_items(cfg: ModelConfig) -> dict[str, str]:
    items = {f"model.{name}": str(getattr(cfg, name)) for name in _MODEL_INT_FIELDS}
    bb = cfg.backbone
    for name in _BACKBONE_INT_FIELDS:
        items[f"backbone.{name}"] = str(getattr(bb, name))
    items["backbone.blocks"] = ",".join(f"{c}:{s}" for c, s in bb.blocks)
    return items


def model_config_from_items(items: Mapping[str, str]) -> ModelConfig:
    try:
        blocks = tuple(
            (int(c), int(s))
            for c, s in (part.split(":") for part in items["backbone.blocks"].split(","))
        )
        backbone = BackboneSpec(
            blocks=blocks,
            **{name: int(items[f"backbone.{name}"]) for name in _BACKBONE_INT_FIELDS},
        )
        return ModelConfig(
            backbone=backbone,
            **{name: int(items[f"model.{name}"]) for name in _MODEL_INT_FIELDS},
        )
    except KeyError as exc:
        raise CheckpointFormatError(f"missing config item {exc.args[0]!r}") from exc
    except ValueError as exc:
        raise CheckpointFormatError(f"bad config item: {exc}") from exc
