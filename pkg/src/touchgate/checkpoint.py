"""Versioned checkpoint files: one JSON header line, then named tensors.

Header: format name, version, config hash, variant id, vocabulary, input
normalization stats, and the tensor directory (name, shape, dtype, in file
order). Tensor data follows as contiguous little-endian float32 blocks in
directory order. Writes are deterministic, so identical states produce
byte-identical files.
"""

from __future__ import annotations

import json

import numpy as np

from .nn import ParamStore

FORMAT_NAME = "touchgate-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str, store: ParamStore, *, config_hash: str,
                    variant: str, vocab: list[str],
                    norm_scale: np.ndarray | None = None,
                    meta: dict | None = None):
    names = store.names()
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config_hash": config_hash,
        "variant": variant,
        "vocab": list(vocab),
        "norm_scale": None if norm_scale is None else
            np.asarray(norm_scale, dtype=np.float64).reshape(-1).tolist(),
        "meta": dict(meta or {}),
        "tensors": [{"name": n, "shape": list(store.get(n).data.shape),
                     "dtype": "float32"} for n in names],
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        for n in names:
            arr = np.ascontiguousarray(store.get(n).data, dtype="<f4")
            fh.write(arr.tobytes())


def load_checkpoint(path: str):
    """Read a checkpoint; returns (tensors dict, header dict)."""
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{path}: unreadable header: {e}") from e
        if header.get("format") != FORMAT_NAME:
            raise CheckpointError(
                f"{path}: format {header.get('format')!r}, expected {FORMAT_NAME!r}")
        if header.get("version") != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: version {header.get('version')!r} not supported "
                f"(reader supports {FORMAT_VERSION})")
        tensors = {}
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 4)
            if len(buf) != count * 4:
                raise CheckpointError(
                    f"{path}: truncated tensor {spec['name']!r}: expected "
                    f"{count * 4} bytes, got {len(buf)}")
            tensors[spec["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError(f"{path}: trailing bytes after tensor data")
    return tensors, header


def restore_into(store: ParamStore, tensors: dict, *, allow_missing: bool = False,
                 allow_extra: bool = False) -> tuple[list[str], list[str]]:
    """Copy checkpoint tensors into a ParamStore by name.

    allow_missing: store params absent from the checkpoint keep their values
    (fresh branches during finetune init). allow_extra: checkpoint tensors
    with no matching param are dropped (loading a stripped model from a
    larger checkpoint). Returns (missing, extra) name lists.
    """
    names = set(store.names())
    missing = [n for n in sorted(names) if n not in tensors]
    extra = [n for n in sorted(tensors) if n not in names]
    if missing and not allow_missing:
        raise CheckpointError(f"checkpoint lacks params: {missing}")
    if extra and not allow_extra:
        raise CheckpointError(f"checkpoint has unmatched params: {extra}")
    for n in sorted(names & set(tensors)):
        t = store.get(n)
        arr = tensors[n]
        if tuple(arr.shape) != tuple(t.data.shape):
            raise CheckpointError(
                f"param {n!r}: checkpoint shape {arr.shape} != model shape {t.data.shape}")
        t.data = arr.astype(t.data.dtype)
    return missing, extra
