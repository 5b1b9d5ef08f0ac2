"""CVCK checkpoint container.

Layout (all integers little-endian)::

    b"CVCK" | u32 version | 32-byte architecture hash | u32 meta length | meta JSON
    then four sections, each ``u64 count`` followed by ``count`` float32 values:
    parameters, first moments, second moments, EMA shadow.

Absent sections have count 0.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from canvas.errors import InvalidArgument, ParseError
from canvas.model import PARAM_NAMES, ModelConfig, ModelParams
from canvas.training import EmaState, OptimizerState, TrainState

MAGIC = b"CVCK"
VERSION = 1
N_SECTIONS = 4


def write_container(path: str | Path, arch_hash: bytes, meta: dict, sections: list[np.ndarray | None]) -> None:
    if len(arch_hash) != 32:
        raise InvalidArgument("architecture hash must be 32 bytes")
    sections = list(sections) + [None] * (N_SECTIONS - len(sections))
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), arch_hash, struct.pack("<I", len(meta_bytes)), meta_bytes]
    for s in sections:
        arr = np.zeros(0, "<f4") if s is None else np.ascontiguousarray(s, dtype="<f4").ravel()
        parts.append(struct.pack("<Q", arr.size))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_container(path: str | Path) -> tuple[bytes, dict, list[np.ndarray | None]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ParseError("bad magic", 0)
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise ParseError(f"truncated checkpoint (need {n} bytes)", pos)
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise ParseError(f"unsupported version {version}", 4)
    arch = take(32)
    (mlen,) = struct.unpack("<I", take(4))
    meta = json.loads(take(mlen).decode("utf-8"))
    sections: list[np.ndarray | None] = []
    for _ in range(N_SECTIONS):
        (count,) = struct.unpack("<Q", take(8))
        sections.append(np.frombuffer(take(4 * count), dtype="<f4").astype(np.float32) if count else None)
    if pos != len(data):
        raise ParseError("trailing bytes", pos)
    return arch, meta, sections


def _flat(d: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([d[k].ravel() for k in PARAM_NAMES])


def save_train_state(path: str | Path, state: TrainState, extra: dict | None = None) -> None:
    cfg = state.params.config
    meta = {
        "kind": "flow-model",
        "model": cfg.to_json(),
        "optimizer": state.opt.hyperparams(),
        "ema": {"decay": state.ema.decay},
        "progress": {"stage_index": state.stage_index, "stage_step": state.stage_step,
                     "history": state.history, "consecutive_spikes": state.consecutive_spikes},
        **(extra or {}),
    }
    m = _flat(state.opt.m) if state.opt.m is not None else None
    v = _flat(state.opt.v) if state.opt.v is not None else None
    write_container(path, cfg.arch_hash(), meta, [state.params.flat(), m, v, state.ema.shadow.flat()])


def load_train_state(path: str | Path) -> tuple[TrainState, dict]:
    arch, meta, (p, m, v, e) = read_container(path)
    if meta.get("kind") != "flow-model":
        raise InvalidArgument(f"not a flow-model checkpoint: {meta.get('kind')!r}")
    cfg = ModelConfig.from_json(meta["model"])
    if arch != cfg.arch_hash():
        raise InvalidArgument("architecture hash does not match recorded configuration")
    params = ModelParams.from_flat(cfg, p)
    hp = dict(meta["optimizer"])
    opt = OptimizerState(**hp)
    if m is not None:
        opt.m = ModelParams.from_flat(cfg, m).arrays
        opt.v = ModelParams.from_flat(cfg, v).arrays
    ema = EmaState(ModelParams.from_flat(cfg, e) if e is not None else params.copy(), meta["ema"]["decay"])
    prog = meta["progress"]
    state = TrainState(params, opt, ema, prog["stage_index"], prog["stage_step"],
                       list(prog["history"]), prog["consecutive_spikes"])
    return state, meta


def load_inference_params(path: str | Path) -> ModelParams:
    """The EMA weights of a flow-model checkpoint."""
    state, _ = load_train_state(path)
    return state.ema.shadow
