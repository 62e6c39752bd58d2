"""Checkpoint files: one JSON header line followed by little-endian float32 blocks.

Header keys: ``config``, ``stats``, ``metadata``, ``parameters`` (a list of
``{"name", "shape", "offset"}`` entries, offsets in bytes from the start of
the binary section) and optionally ``optimizer`` with the Adam moments laid
out the same way after the parameters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..data import NormalizationStats, atomic_write
from ..nn import ParameterStore
from ..tensor import AdamState
from .model import ModelConfig, expected_shapes

FORMAT = "fieldrecon-checkpoint"
VERSION = 1
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint file."""


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ParameterStore
    stats: NormalizationStats
    metadata: dict = field(default_factory=dict)
    optimizer: AdamState | None = None

    def __post_init__(self):
        if self.params.shapes() != expected_shapes(self.config):
            raise CheckpointError("parameter set does not match the configuration")


def _blocks(named: list[tuple[str, np.ndarray]], start: int) -> tuple[list[dict], list[bytes], int]:
    directory, payload, offset = [], [], start
    for name, arr in named:
        raw = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payload.append(raw)
        offset += len(raw)
    return directory, payload, offset


def dumps_checkpoint(ckpt: Checkpoint) -> bytes:
    params = [(k, p.data) for k, p in ckpt.params.items()]
    directory, payload, end = _blocks(params, 0)
    header = {"format": FORMAT, "version": VERSION, "config": ckpt.config.to_dict(),
              "stats": ckpt.stats.to_dict(), "metadata": ckpt.metadata, "parameters": directory}
    if ckpt.optimizer is not None:
        st = ckpt.optimizer
        moments = [(f"m.{k}", st.m[k]) for k in ckpt.params] + [(f"v.{k}", st.v[k]) for k in ckpt.params]
        odir, opay, _ = _blocks(moments, end)
        header["optimizer"] = {"lr": st.lr, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps,
                               "weight_decay": st.weight_decay, "step": st.step, "moments": odir}
        payload += opay
    line = json.dumps(header, separators=(",", ":"), sort_keys=True).encode()
    return line + b"\n" + b"".join(payload)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    atomic_write(Path(path), dumps_checkpoint(ckpt))


def _read_block(body: bytes, entry: dict) -> np.ndarray:
    shape = tuple(entry["shape"])
    count = int(np.prod(shape)) if shape else 1
    start = int(entry["offset"])
    end = start + count * _LE_F32.itemsize
    if end > len(body):
        raise CheckpointError(f"block {entry['name']!r} runs past the end of the file")
    return np.frombuffer(body[start:end], dtype=_LE_F32).reshape(shape).astype(np.float32)


def loads_checkpoint(raw: bytes) -> Checkpoint:
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError("missing header line")
    try:
        header = json.loads(raw[:nl])
    except ValueError as exc:
        raise CheckpointError(f"bad header: {exc}") from None
    if header.get("format") != FORMAT:
        raise CheckpointError("not a fieldrecon checkpoint")
    body = raw[nl + 1:]
    cfg = ModelConfig(**header["config"])
    params = ParameterStore()
    for entry in header["parameters"]:
        params.add(entry["name"], _read_block(body, entry))
    opt = None
    if "optimizer" in header:
        o = header["optimizer"]
        opt = AdamState(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"],
                        weight_decay=o["weight_decay"], step=o["step"])
        for entry in o["moments"]:
            kind, name = entry["name"].split(".", 1)
            getattr(opt, kind)[name] = _read_block(body, entry)
    return Checkpoint(cfg, params, NormalizationStats.from_dict(header["stats"]),
                      header.get("metadata", {}), opt)


def load_checkpoint(path) -> Checkpoint:
    return loads_checkpoint(Path(path).read_bytes())
