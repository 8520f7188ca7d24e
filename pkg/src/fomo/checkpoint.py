"""Binary checkpoint container.

Layout::

    8 bytes   magic b"FOMOCKPT"
    4 bytes   format version, little-endian uint32
    4 bytes   metadata length N, little-endian uint32
    N bytes   UTF-8 JSON metadata (layer widths, epoch, config hash, rng state, ...)
    ...       little-endian float arrays: theta, then phi, then velocities,
              each in parameter enumeration order (W0, b0, W1, b1, ...)

Arrays are 32-bit unless the metadata says ``"dtype": "<f8"`` (64-bit runs).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FormatError, RefusalError
from .model import MLP, StableModel
from .train import Best, TrainState

MAGIC = b"FOMOCKPT"
VERSION = 1


@dataclass
class Checkpoint:
    widths: list[int]
    theta: list[np.ndarray]
    phi: Optional[list[np.ndarray]]
    velocity: Optional[list[np.ndarray]]
    epoch: int
    rng_state: dict
    config_hash: str
    extra: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return self.theta[0].dtype


def _shapes(widths):
    out = []
    for d_in, d_out in zip(widths[:-1], widths[1:]):
        out += [(d_in, d_out), (d_out,)]
    return out


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    dtype = np.dtype("<f8") if ckpt.dtype == np.float64 else np.dtype("<f4")
    meta = {
        "widths": list(ckpt.widths),
        "epoch": ckpt.epoch,
        "config_hash": ckpt.config_hash,
        "rng_state": ckpt.rng_state,
        "has_stable": ckpt.phi is not None,
        "has_velocity": bool(ckpt.velocity),
        "dtype": dtype.str,
        **ckpt.extra,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    groups = [ckpt.theta] + ([ckpt.phi] if ckpt.phi is not None else []) + ([ckpt.velocity] if ckpt.velocity else [])
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for group in groups:
            for a in group:
                fh.write(np.ascontiguousarray(a, dtype=dtype).tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, n = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 16 + n:
        raise FormatError(f"{path}: truncated metadata")
    try:
        meta = json.loads(raw[16:16 + n].decode("utf-8"))
        widths = [int(w) for w in meta.pop("widths")]
        dtype = np.dtype(meta.pop("dtype"))
        has_stable = meta.pop("has_stable")
        has_velocity = meta.pop("has_velocity")
        epoch = int(meta.pop("epoch"))
        config_hash = meta.pop("config_hash")
        rng_state = meta.pop("rng_state")
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad metadata: {exc}") from None
    shapes = _shapes(widths)
    n_groups = 1 + int(has_stable) + int(has_velocity)
    need = n_groups * sum(int(np.prod(s)) for s in shapes) * dtype.itemsize
    body = raw[16 + n:]
    if len(body) != need:
        raise FormatError(f"{path}: expected {need} bytes of parameters, found {len(body)}")
    native = np.float64 if dtype.itemsize == 8 else np.float32
    offset = 0
    groups = []
    for _ in range(n_groups):
        arrays = []
        for s in shapes:
            count = int(np.prod(s))
            arrays.append(np.frombuffer(body, dtype=dtype, count=count, offset=offset).reshape(s).astype(native))
            offset += count * dtype.itemsize
        groups.append(arrays)
    theta = groups[0]
    phi = groups[1] if has_stable else None
    velocity = groups[-1] if has_velocity else None
    return Checkpoint(widths, theta, phi, velocity, epoch, rng_state, config_hash, meta)


def checkpoint_from_state(state: TrainState, config_hash: str, **extra) -> Checkpoint:
    best = state.best
    extra = dict(extra, best=dict(epoch=best.epoch, robust_val=best.robust_val,
                                  natural_test=best.natural_test, robust_test=best.robust_test),
                 events=list(state.events))
    return Checkpoint(
        widths=state.model.widths,
        theta=state.model.copy_arrays(),
        phi=state.stable.copy_arrays() if state.stable is not None else None,
        velocity=[v.copy() for v in state.velocity] if state.velocity else None,
        epoch=state.epoch,
        rng_state=state.rng.bit_generator.state,
        config_hash=config_hash,
        extra=extra,
    )


def state_from_checkpoint(ckpt: Checkpoint, expected_hash: Optional[str] = None) -> TrainState:
    """Rebuild a resumable training state; refuses a checkpoint from another config."""
    if expected_hash is not None and ckpt.config_hash != expected_hash:
        raise RefusalError(f"checkpoint config hash {ckpt.config_hash[:12]} does not match "
                           f"the current config {expected_hash[:12]}; refusing to resume")
    model = MLP(ckpt.theta[0::2], ckpt.theta[1::2])
    stable = StableModel(ckpt.phi[0::2], ckpt.phi[1::2]) if ckpt.phi is not None else None
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.rng_state
    b = ckpt.extra.get("best", {})
    best = Best(int(b.get("epoch", 0)), float(b.get("robust_val", -1.0)),
                float(b.get("natural_test", 0.0)), float(b.get("robust_test", 0.0)))
    velocity = [v.copy() for v in ckpt.velocity] if ckpt.velocity else []
    return TrainState(model, stable, velocity, ckpt.epoch, rng, best, list(ckpt.extra.get("events", [])))
