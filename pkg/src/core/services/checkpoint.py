"""Single-file checkpoints: magic, version, JSON header, float64 payload.

Layout::

    b"EQDF" | uint32 version | uint32 header length | header (UTF-8 JSON) | payload

The header holds the run config, its hash and a manifest of
{name, section, shape, offset}; ``offset`` counts bytes from the payload start.
All integers and floats are little-endian.
"""
import json
import os
import struct
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from src.config.run_config import RunConfig, parse_config
from src.core.services.model import EquiDiffModel
from src.utils.errors import CheckpointError, ConfigError
from src.utils.logging import logger

MAGIC = b"EQDF"
VERSION = 1
SECTIONS = ("params", "ema")
_PREFIX = struct.Struct("<4sII")
_F8 = np.dtype("<f8")

PathLike = Union[str, Path]


def encode_checkpoint(model: EquiDiffModel) -> bytes:
    manifest: List[dict] = []
    chunks: List[bytes] = []
    offset = 0
    for section, tree in (("params", model.params), ("ema", model.ema)):
        for name in sorted(tree):
            data = np.ascontiguousarray(tree[name], dtype=_F8).tobytes()
            manifest.append({"name": name, "section": section, "shape": list(np.shape(tree[name])), "offset": offset})
            chunks.append(data)
            offset += len(data)
    header = json.dumps(
        {"config": model.config.model_dump(mode="json"), "config_hash": model.config.config_hash(), "manifest": manifest},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)


def save_checkpoint(model: EquiDiffModel, path: PathLike) -> None:
    path = Path(path)
    blob = encode_checkpoint(model)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}")
    logger.info(f"Saved checkpoint {path} ({len(blob)} bytes)")


def _entry(blob: memoryview, entry: dict) -> Tuple[str, str, np.ndarray]:
    try:
        name, section, shape, offset = entry["name"], entry["section"], tuple(entry["shape"]), int(entry["offset"])
    except (KeyError, TypeError, ValueError):
        raise CheckpointError(f"malformed manifest entry {entry!r}")
    if section not in SECTIONS:
        raise CheckpointError(f"manifest entry {name}: unknown section {section!r}")
    nbytes = int(np.prod(shape, dtype=np.int64)) * _F8.itemsize
    if offset < 0 or offset + nbytes > len(blob):
        raise CheckpointError(f"manifest entry {section}/{name}: bytes {offset}..{offset + nbytes} exceed payload of {len(blob)}")
    arr = np.frombuffer(blob[offset:offset + nbytes], dtype=_F8).reshape(shape).astype(np.float64)
    return name, section, arr


def decode_checkpoint(blob: bytes, source: str = "checkpoint") -> EquiDiffModel:
    if len(blob) < _PREFIX.size:
        raise CheckpointError(f"{source}: truncated header")
    magic, version, header_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported format version {version}")
    start = _PREFIX.size + header_len
    if start > len(blob):
        raise CheckpointError(f"{source}: header length {header_len} exceeds file size")
    try:
        header = json.loads(blob[_PREFIX.size:start].decode("utf-8"))
        config = parse_config(RunConfig, header["config"], source)
        stored_hash, manifest = header["config_hash"], header["manifest"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise CheckpointError(f"{source}: corrupt header: {e}")
    except ConfigError as e:
        raise CheckpointError(f"{source}: invalid config: {e}")
    if stored_hash != config.config_hash():
        raise CheckpointError(f"{source}: config hash mismatch (stored {stored_hash[:12]}, computed {config.config_hash()[:12]})")

    payload = memoryview(blob)[start:]
    trees: Dict[str, Dict[str, np.ndarray]] = {s: {} for s in SECTIONS}
    for entry in manifest:
        name, section, arr = _entry(payload, entry)
        if name in trees[section]:
            raise CheckpointError(f"{source}: duplicate manifest entry {section}/{name}")
        trees[section][name] = arr
    expected = {name: np.shape(v) for name, v in EquiDiffModel.init_params(config, 0).items()}
    for section in SECTIONS:
        missing = sorted(set(expected) - set(trees[section]))
        if missing:
            raise CheckpointError(f"{source}: manifest entry {section}/{missing[0]} missing")
        for name, arr in trees[section].items():
            if name not in expected:
                raise CheckpointError(f"{source}: manifest entry {section}/{name} is not a parameter of variant {config.variant}")
            if arr.shape != expected[name]:
                raise CheckpointError(f"{source}: manifest entry {section}/{name} has shape {arr.shape}, expected {expected[name]}")
    return EquiDiffModel(config, trees["params"], trees["ema"])


def load_checkpoint(path: PathLike) -> EquiDiffModel:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}")
    model = decode_checkpoint(blob, str(path))
    logger.info(f"Loaded {model.config.variant} checkpoint {path}")
    return model
