"""Versioned binary checkpoints.

Layout::

    b"ACTN" | uint32 version | uint32 header length | JSON header | float64 blocks

The JSON header records the stage id, progress, dims, seeds and the ordered
list of ``(block name, shape)``; blocks follow as little-endian float64 in
exactly that order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .distill import MemoryBank
from .model import FROZEN, TRAINABLE, EncoderParams, ModelDims, OptimState, TeacherStudentState

MAGIC = b"ACTN"
VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    stage: str
    step: int
    total_steps: int
    state: TeacherStudentState
    opt: OptimState
    bank: MemoryBank | None = None
    seeds: dict = field(default_factory=dict)

    @property
    def dims(self) -> ModelDims:
        return self.state.student.dims

    @property
    def complete(self) -> bool:
        return self.step >= self.total_steps


def _blocks(ck: Checkpoint):
    s, t = ck.state.student, ck.state.teacher
    out = [(f"student.{k}", s.frozen[k]) for k in FROZEN]
    out += [(f"student.{k}", s.arrays[k]) for k in TRAINABLE]
    out += [(f"teacher.{k}", t.arrays[k]) for k in TRAINABLE]
    out += [(f"velocity.{k}", ck.opt.velocity[k]) for k in TRAINABLE if k in ck.opt.velocity]
    if ck.bank is not None and len(ck.bank):
        out.append(("bank", ck.bank.anchors))
    return out


def to_bytes(ck: Checkpoint) -> bytes:
    blocks = _blocks(ck)
    header = {
        "stage": ck.stage,
        "step": ck.step,
        "total_steps": ck.total_steps,
        "dims": asdict(ck.dims),
        "seeds": ck.seeds,
        "ema_momentum": ck.state.momentum,
        "optim": {"learning_rate": ck.opt.learning_rate, "momentum": ck.opt.momentum,
                  "weight_decay": ck.opt.weight_decay},
        "bank_capacity": ck.bank.capacity if ck.bank is not None else None,
        "blocks": [[name, list(a.shape)] for name, a in blocks],
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(hb)), hb]
    parts += [np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in blocks]
    return b"".join(parts)


def from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise CheckpointError("not an ACTN checkpoint")
    version, hlen = struct.unpack("<II", buf[4:12])
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {VERSION})")
    if len(buf) < 12 + hlen:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(buf[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from e
    try:
        return _decode(header, buf, 12 + hlen)
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"malformed checkpoint: {e!r}") from e


def _decode(header: dict, buf: bytes, pos: int) -> Checkpoint:
    arrays = {}
    for name, shape in header["blocks"]:
        n = int(np.prod(shape)) * 8
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint block {name}")
        arrays[name] = np.frombuffer(buf[pos:pos + n], dtype="<f8").reshape(shape).astype(np.float64)
        pos += n
    if pos != len(buf):
        raise CheckpointError("trailing bytes in checkpoint")

    dims = ModelDims(**header["dims"])
    frozen = {k: arrays[f"student.{k}"] for k in FROZEN}
    student = EncoderParams(dims, {k: arrays[f"student.{k}"] for k in TRAINABLE}, frozen)
    teacher = EncoderParams(dims, {k: arrays[f"teacher.{k}"] for k in TRAINABLE},
                            {k: v.copy() for k, v in frozen.items()}, role="teacher")
    opt = OptimState(**header["optim"])
    opt.velocity = {k: arrays[f"velocity.{k}"] for k in TRAINABLE if f"velocity.{k}" in arrays}
    bank = None
    if header["bank_capacity"] is not None:
        bank = MemoryBank(header["bank_capacity"], dims.embed_dim)
        if "bank" in arrays:
            bank = MemoryBank.from_array(arrays["bank"], header["bank_capacity"])
    state = TeacherStudentState(student, teacher, header["ema_momentum"])
    return Checkpoint(header["stage"], header["step"], header["total_steps"], state, opt,
                      bank, header["seeds"])


def save_checkpoint(ck: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ck))


def load_checkpoint(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return from_bytes(buf)
