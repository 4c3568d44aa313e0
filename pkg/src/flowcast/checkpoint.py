"""Checkpoint container: one JSON header line followed by raw little-endian float64 tensors.

The header records the run configuration, model configuration, scaler,
training history, test KGE and the name and shape of every tensor in payload
order. Tensors are written back to back, so the payload length is fully
determined by the header and any truncation or padding is detected on load.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import KgeComponents
from .model import CNN_LSTM, LSTM, CnnLstmConfig, LstmBaselineConfig, ModelParams
from .training import EpochRecord, Scaler

FORMAT = "flowcast-checkpoint/1"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: ModelParams
    scaler: Scaler
    run_config: dict = field(default_factory=dict)
    history: list[EpochRecord] = field(default_factory=list)
    test_kge: KgeComponents | None = None

    @property
    def kind(self) -> str:
        return self.params.kind

    @property
    def basin_id(self) -> str:
        return str(self.run_config.get("basin_id", ""))


def _model_config(kind: str, d: dict):
    if kind == CNN_LSTM:
        return CnnLstmConfig(**d)
    if kind == LSTM:
        return LstmBaselineConfig(**d)
    raise CheckpointError(f"unknown model kind {kind!r}")


def _header(ckpt: Checkpoint) -> dict:
    tensors = ckpt.params.tensors
    kge = ckpt.test_kge
    return {
        "format": FORMAT,
        "kind": ckpt.kind,
        "model_config": ckpt.params.config.to_dict(),
        "run_config": ckpt.run_config,
        "scaler": {"mean": [float(v) for v in ckpt.scaler.mean], "std": [float(v) for v in ckpt.scaler.std]},
        "history": [[r.epoch, r.train_loss, r.val_loss] for r in ckpt.history],
        "test_kge": None if kge is None else [kge.r, kge.beta, kge.gamma, kge.kge],
        "tensors": [[name, list(np.shape(v))] for name, v in tensors.items()],
    }


def to_bytes(ckpt: Checkpoint) -> bytes:
    # repr-based JSON floats round-trip exactly, so the scaler reloads bitwise
    head = json.dumps(_header(ckpt), sort_keys=True, allow_nan=False).encode("utf-8")
    body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in ckpt.params.tensors.values())
    return head + b"\n" + body


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def from_bytes(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    line, sep, body = raw.partition(b"\n")
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: malformed checkpoint header ({exc})") from None
    if not sep or not isinstance(header, dict) or header.get("format") != FORMAT:
        raise CheckpointError(f"{source}: not a {FORMAT} file")
    try:
        kind = header["kind"]
        config = _model_config(kind, header["model_config"])
        shapes = [(str(name), tuple(int(s) for s in shape)) for name, shape in header["tensors"]]
        scaler = Scaler(header["scaler"]["mean"], header["scaler"]["std"])
        history = [EpochRecord(int(e), float(tr), float(va)) for e, tr, va in header["history"]]
        kge = header["test_kge"]
        test_kge = None if kge is None else KgeComponents(*(float(v) for v in kge))
        run_config = dict(header["run_config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{source}: incomplete checkpoint header ({exc})") from None
    expected = sum(math.prod(shape) for _, shape in shapes)
    if len(body) != 8 * expected:
        raise CheckpointError(f"{source}: header declares {expected} float64 values "
                              f"({8 * expected} bytes) but payload holds {len(body)} bytes")
    flat = np.frombuffer(body, dtype="<f8")
    tensors, offset = {}, 0
    for name, shape in shapes:
        n = math.prod(shape)
        tensors[name] = flat[offset:offset + n].astype(np.float64).reshape(shape)
        offset += n
    return Checkpoint(ModelParams(kind, config, tensors), scaler, run_config, history, test_kge)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    return from_bytes(path.read_bytes(), str(path))
