"""
Versioned single-file parameter container.

Layout: the magic line, an 8-byte little-endian header length, a JSON header with sorted keys, then
the raw little-endian parameter bytes in header order. The header carries the format version, dtype,
seed, architecture hash, vocabulary, per-parameter name/shape/offset/nbytes and a sha256 of the
payload. Identical parameters always produce identical bytes.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np

from modal_to_text.tensor import Tensor
from modal_to_text.utility import CheckpointError, json_deserialize, json_serialize, sha256_hex

CHECKPOINT_MAGIC = b"MODAL-TO-TEXT-CHECKPOINT\n"
CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True, kw_only=True)
class Checkpoint:
    format_version: int
    dtype: str
    seed: int
    config_hash: str
    vocabulary: List[str]
    arrays: Dict[str, np.ndarray]
    metadata: Dict[str, Any] = field(default_factory=dict)


def encode_checkpoint(
    *, parameters: Mapping[str, Tensor], vocabulary: Sequence[str], config_hash: str, seed: int, metadata: Optional[Mapping[str, Any]] = None
) -> bytes:
    dtypes = {str(x.dtype) for x in parameters.values()}
    if len(dtypes) > 1:
        raise CheckpointError(f"parameters mix dtypes {sorted(dtypes)}")
    entries = []
    chunks = []
    offset = 0
    for name, tensor in parameters.items():
        chunk = np.ascontiguousarray(tensor.data).astype(tensor.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "shape": list(tensor.shape), "offset": offset, "nbytes": len(chunk)})
        chunks.append(chunk)
        offset += len(chunk)
    payload = b"".join(chunks)
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "dtype": dtypes.pop() if dtypes else "float64",
        "seed": seed,
        "config_hash": config_hash,
        "vocabulary": list(vocabulary),
        "parameters": entries,
        "payload_sha256": sha256_hex(payload=payload),
        "metadata": dict(metadata or {}),
    }
    header_bytes = json_serialize(header).encode()
    return CHECKPOINT_MAGIC + len(header_bytes).to_bytes(8, "little") + header_bytes + payload


def save_checkpoint(
    *, path: str, parameters: Mapping[str, Tensor], vocabulary: Sequence[str], config_hash: str, seed: int, metadata: Optional[Mapping[str, Any]] = None
) -> str:
    content = encode_checkpoint(parameters=parameters, vocabulary=vocabulary, config_hash=config_hash, seed=seed, metadata=metadata)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    temporary_path = f"{path}.tmp"
    with open(temporary_path, "wb") as f:
        f.write(content)
    os.replace(temporary_path, path)
    return path


def decode_checkpoint(content: bytes, *, source: str = "<bytes>") -> Checkpoint:
    if not content.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{source} is not a modal-to-text checkpoint")
    position = len(CHECKPOINT_MAGIC)
    header_length = int.from_bytes(content[position : position + 8], "little")
    position += 8
    try:
        header = json_deserialize(content[position : position + header_length])
    except Exception as exception:
        raise CheckpointError(f"{source}: unreadable checkpoint header") from exception
    payload = content[position + header_length :]
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{source}: format version {header.get('format_version')} is not supported (expected {CHECKPOINT_FORMAT_VERSION})")
    if sha256_hex(payload=payload) != header["payload_sha256"]:
        raise CheckpointError(f"{source}: payload digest mismatch, the file is truncated or corrupted")
    dtype = np.dtype(header["dtype"]).newbyteorder("<")
    arrays = {}
    for entry in header["parameters"]:
        chunk = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(chunk, dtype=dtype).reshape(entry["shape"]).astype(np.dtype(header["dtype"]))
    return Checkpoint(
        format_version=header["format_version"],
        dtype=header["dtype"],
        seed=header["seed"],
        config_hash=header["config_hash"],
        vocabulary=header["vocabulary"],
        arrays=arrays,
        metadata=header.get("metadata", {}),
    )


def load_checkpoint(*, path: str, expected_config_hash: Optional[str] = None, expected_vocabulary: Optional[Sequence[str]] = None) -> Checkpoint:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint {path} does not exist")
    with open(path, "rb") as f:
        checkpoint = decode_checkpoint(f.read(), source=path)
    if expected_config_hash is not None and checkpoint.config_hash != expected_config_hash:
        raise CheckpointError(f"{path}: architecture hash {checkpoint.config_hash[:12]} does not match the config's {expected_config_hash[:12]}")
    if expected_vocabulary is not None and list(expected_vocabulary) != checkpoint.vocabulary:
        mismatched = sorted(set(expected_vocabulary) ^ set(checkpoint.vocabulary))[:10]
        raise CheckpointError(
            f"{path}: vocabulary mismatch ({len(checkpoint.vocabulary)} tokens saved, {len(expected_vocabulary)} expected; "
            f"differing tokens include {mismatched})"
        )
    return checkpoint


def restore_parameters(*, parameters: Mapping[str, Tensor], checkpoint: Checkpoint, strict: bool = True) -> None:
    missing = [x for x in parameters if x not in checkpoint.arrays]
    unexpected = [x for x in checkpoint.arrays if x not in parameters]
    if missing or (strict and unexpected):
        raise CheckpointError(f"checkpoint parameters do not match: missing {missing[:5]}, unexpected {unexpected[:5]}")
    for name, tensor in parameters.items():
        array = checkpoint.arrays[name]
        if array.shape != tensor.shape:
            raise CheckpointError(f"parameter {name}: checkpoint shape {array.shape}, model shape {tensor.shape}")
        tensor.data[...] = array.astype(tensor.dtype, copy=False)
        tensor.grad = None
