"""Model checkpoints: a JSON header plus raw little-endian float64 blocks.

Layout: one magic line, one JSON header line (format version, architecture
id, class count, head kind, embedded run config, entry table of
hierarchical names + shapes), then the parameter and buffer values
concatenated in entry order. Loading rebuilds the architecture from the
header and fails loudly on any name or shape mismatch, and on any header
written by a newer format version.
"""

from __future__ import annotations

import json

import numpy as np

from . import __version__
from .nn import Classifier, build_model

MAGIC = b"HANDLENS-CKPT\n"
FORMAT_VERSION = 1

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "read_header"]


class CheckpointError(RuntimeError):
    """Checkpoint file is malformed or does not match the model."""


def _entries(model: Classifier) -> list[tuple[str, str, np.ndarray]]:
    rows = [("param", name, p.data) for name, p in model.named_parameters()]
    rows += [("buffer", name, b) for name, b in model.named_buffers()]
    return [(name, kind, arr) for kind, name, arr in rows]


def save_checkpoint(path, model: Classifier, config: dict | None = None) -> None:
    entries = _entries(model)
    header = {
        "format_version": FORMAT_VERSION,
        "tool_version": __version__,
        "arch": model.arch,
        "num_classes": model.num_classes,
        "head": model.head_kind,
        "config": config,
        "entries": [[name, kind, list(arr.shape)] for name, kind, arr in entries],
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for _, _, arr in entries:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        try:
            header = json.loads(fh.readline().decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    version = header.get("format_version")
    if not isinstance(version, int) or version > FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version!r} is newer than supported "
            f"version {FORMAT_VERSION}")
    return header


def load_checkpoint(path, seed: int = 0) -> tuple[Classifier, dict]:
    """Rebuild the stored model and return it with the header."""
    header = read_header(path)
    model = build_model(header["arch"], header["num_classes"],
                        head=header["head"], seed=seed)
    expected = _entries(model)
    stored = [(name, kind, tuple(shape)) for name, kind, shape in header["entries"]]
    if [(n, k, tuple(a.shape)) for n, k, a in expected] != stored:
        got = {n for n, _, _ in stored}
        want = {n for n, _, _ in expected}
        missing = sorted(want - got)[:3]
        extra = sorted(got - want)[:3]
        shapes = [
            n for (n, _, a), (sn, _, ss) in zip(expected, stored)
            if n == sn and tuple(a.shape) != ss
        ][:3]
        raise CheckpointError(
            f"{path}: stored entries do not match architecture "
            f"{header['arch']!r} (missing={missing}, extra={extra}, "
            f"shape mismatches={shapes})")

    with open(path, "rb") as fh:
        fh.readline()
        fh.readline()
        blob = fh.read()
    need = sum(int(np.prod(shape)) for _, _, shape in stored) * 8
    if len(blob) != need:
        raise CheckpointError(
            f"{path}: payload holds {len(blob)} bytes, expected {need}")
    offset = 0
    for name, kind, arr in expected:
        n = arr.size * 8
        values = np.frombuffer(blob[offset:offset + n], dtype="<f8").reshape(arr.shape)
        if not np.isfinite(values).all():
            raise CheckpointError(f"{path}: non-finite values in {name}")
        arr[...] = values
        offset += n
    return model, header
