"""PRFX checkpoint files: canonical JSON header + raw float32 param blocks.

Layout (little-endian): magic "PRFX" | u32 version | u32 header length |
header JSON (UTF-8, sorted keys) | parameter blocks as float32 bytes in
declaration order. read(write(m)) is bit-identical.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from ..geo import ChannelStats, atomic_write_bytes
from .model import ModelConfig, PyramidRegressor

MAGIC = b"PRFX"
VERSION = 1


class CheckpointFormatError(ValueError):
    """Malformed PRFX byte stream."""


def _header_dict(model: PyramidRegressor) -> dict:
    cfg = model.config
    stats = model.channel_stats
    return {
        "in_channels": model.in_channels,
        "entry_widths": [int(w) for w in cfg.entry_widths],
        "num_blocks": cfg.num_blocks,
        "branches": [int(k) for k in cfg.branches],
        "pool_branch": cfg.pool_branch,
        "branch_channels": cfg.resolved_branch_channels(),
        "residual": cfg.residual,
        "seed": cfg.seed,
        "channel_stats": None if stats is None else {
            "mean": [float(m) for m in stats.mean],
            "std": [float(s) for s in stats.std],
        },
        "params": [
            {"name": n, "shape": list(a.shape)} for n, a in model.params()
        ],
    }


def model_to_bytes(model: PyramidRegressor) -> bytes:
    header = json.dumps(
        _header_dict(model), sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    blocks = b"".join(
        np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in model.params()
    )
    return MAGIC + struct.pack("<II", VERSION, len(header)) + header + blocks


def save_model(model: PyramidRegressor, path: str) -> None:
    atomic_write_bytes(path, model_to_bytes(model))


def model_from_bytes(blob: bytes) -> PyramidRegressor:
    if len(blob) < 12:
        raise CheckpointFormatError(f"{len(blob)} bytes is too short for a checkpoint")
    if blob[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    if len(blob) < 12 + hlen:
        raise CheckpointFormatError("header truncated")
    try:
        header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unparseable header: {exc}") from exc
    try:
        cfg = ModelConfig(
            entry_widths=tuple(header["entry_widths"]),
            num_blocks=int(header["num_blocks"]),
            branches=tuple(header["branches"]),
            pool_branch=bool(header["pool_branch"]),
            branch_channels=int(header["branch_channels"]),
            residual=bool(header["residual"]),
            seed=int(header["seed"]),
        )
        in_channels = int(header["in_channels"])
        declared = [(p["name"], tuple(p["shape"])) for p in header["params"]]
        stats_h = header["channel_stats"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"bad header contents: {exc}") from exc
    stats = None
    if stats_h is not None:
        stats = ChannelStats(mean=tuple(stats_h["mean"]), std=tuple(stats_h["std"]))
    model = PyramidRegressor(in_channels, cfg, dtype=np.float32, channel_stats=stats)
    own = model.params()
    if [(n, a.shape) for n, a in own] != declared:
        raise CheckpointFormatError(
            "header parameter list does not match the declared architecture"
        )
    offset = 12 + hlen
    for name, arr in own:
        nbytes = arr.size * 4
        chunk = blob[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointFormatError(f"parameter block {name!r} truncated")
        vals = np.frombuffer(chunk, dtype="<f4").reshape(arr.shape)
        if not np.isfinite(vals).all():
            raise CheckpointFormatError(f"parameter block {name!r} is non-finite")
        arr[...] = vals
        offset += nbytes
    if offset != len(blob):
        raise CheckpointFormatError(
            f"{len(blob) - offset} trailing bytes after parameter blocks"
        )
    return model


def load_model(path: str) -> PyramidRegressor:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
