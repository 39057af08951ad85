"""Versioned binary model container.

Layout: an 8-byte magic, a little-endian u64 header length, a UTF-8 JSON
header describing the architecture and the parameter blocks in payload
order, the blocks themselves as little-endian float64, and a trailing
SHA-256 digest over header+payload. Round trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .dataio import atomic_write_bytes
from .errors import SchemaError
from .model import Centers, MtlModel, TaskHead
from .nncore import DenseNet

MAGIC = b"DMTLMDL1"
FORMAT_VERSION = 1


def _blocks(model: MtlModel):
    """Named parameter blocks in canonical payload order."""
    out = []
    if model.shared is not None:
        for name, arr in zip(model.shared.param_names("shared."), model.shared.params()):
            out.append((name, arr))
    for r, net in enumerate(model.specifics):
        for name, arr in zip(net.param_names(f"specific{r}."), net.params()):
            out.append((name, arr))
    for r, head in enumerate(model.heads):
        out.append((f"head{r}.alpha", head.alpha))
        out.append((f"head{r}.beta", head.beta))
    out.append(("centers.alpha_bar", model.centers.alpha_bar))
    out.append(("centers.beta_bar", model.centers.beta_bar))
    return out


def save_model(model: MtlModel, path: Path) -> None:
    blocks = _blocks(model)
    header = {
        "format_version": FORMAT_VERSION,
        "n_tasks": model.n_tasks,
        "in_dim": model.in_dim,
        "q": model.q,
        "p": model.p,
        "activation": "relu",
        "shared_dims": model.shared.layer_dims() if model.shared is not None else None,
        "specific_dims": [net.layer_dims() for net in model.specifics],
        "arrays": [{"name": name, "shape": list(arr.shape)} for name, arr in blocks],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in blocks)
    digest = hashlib.sha256(header_bytes + payload).digest()
    blob = MAGIC + len(header_bytes).to_bytes(8, "little") + header_bytes + payload + digest
    atomic_write_bytes(Path(path), blob)


def _dims_to_net(dims: list[int], blocks: dict[str, np.ndarray], prefix: str) -> DenseNet:
    depth = len(dims) - 1
    weights = [blocks[f"{prefix}W{i}"] for i in range(depth)]
    biases = [blocks[f"{prefix}b{i}"] for i in range(depth)]
    return DenseNet(weights, biases)


def load_model(path: Path) -> MtlModel:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < len(MAGIC) + 8 + 32 or not blob.startswith(MAGIC):
        raise SchemaError(f"{path}: not a model container")
    header_len = int.from_bytes(blob[len(MAGIC) : len(MAGIC) + 8], "little")
    header_start = len(MAGIC) + 8
    payload_end = len(blob) - 32
    header_bytes = blob[header_start : header_start + header_len]
    payload = blob[header_start + header_len : payload_end]
    digest = blob[payload_end:]
    if hashlib.sha256(header_bytes + payload).digest() != digest:
        raise SchemaError(f"{path}: checksum mismatch, file is corrupt")
    header = json.loads(header_bytes.decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise SchemaError(f"{path}: unsupported format_version {header.get('format_version')!r}")

    blocks: dict[str, np.ndarray] = {}
    offset = 0
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        blocks[spec["name"]] = arr.reshape(shape).astype(np.float64, copy=True)
        offset += nbytes
    if offset != len(payload):
        raise SchemaError(f"{path}: payload size does not match the header")

    shared = None
    if header["shared_dims"] is not None:
        shared = _dims_to_net(header["shared_dims"], blocks, "shared.")
    specifics = [
        _dims_to_net(dims, blocks, f"specific{r}.")
        for r, dims in enumerate(header["specific_dims"])
    ]
    heads = [
        TaskHead(blocks[f"head{r}.alpha"], blocks[f"head{r}.beta"])
        for r in range(header["n_tasks"])
    ]
    centers = Centers(blocks["centers.alpha_bar"], blocks["centers.beta_bar"])
    return MtlModel(shared, specifics, heads, centers)
