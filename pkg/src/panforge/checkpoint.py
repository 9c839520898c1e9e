"""Trainer checkpoints.

Layout::

    b"PANCKPT1"
    uint32 header length, header (JSON, sorted keys, UTF-8)
    uint32 tensor count
    per tensor: uint32 name length, name, uint32 rank, rank x uint32 extents,
                little-endian float32 data

All integers are little-endian. Files are written to a temporary name in
the target directory and renamed into place, so an interrupted save never
damages an existing checkpoint.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from fractions import Fraction

import numpy as np

from panforge.errors import CheckpointError, CheckpointShapeError, CheckpointTruncatedError, CheckpointVersionError
from panforge.losses import LossConfig
from panforge.networks import build_discrim_net, build_transform_net

MAGIC = b"PANCKPT"
VERSION = 1


def _named_state(trainer):
    """Every array a checkpoint carries, as (name, array) in a stable order."""
    out = []
    for net in (trainer.T, trainer.D):
        out += [(name, t.data) for name, t in net.state()]
    for tag, net, adam in (("adam_T", trainer.T, trainer.adam_T), ("adam_D", trainer.D, trainer.adam_D)):
        names = [name for name, _ in net.parameters()]
        out += [(f"{tag}.m.{n}", m) for n, m in zip(names, adam.m)]
        out += [(f"{tag}.v.{n}", v) for n, v in zip(names, adam.v)]
    return out


def _header(trainer):
    cfg = trainer.loss_cfg
    adam = trainer.adam_T
    return {
        "format": VERSION,
        "input_size": list(trainer.T.input_size),
        "width_multiplier": str(Fraction(trainer.T.width_multiplier)),
        "d_width_multiplier": str(Fraction(trainer.D.width_multiplier)),
        "loss": {"lambdas": list(cfg.lambdas), "margin": cfg.margin, "variant": cfg.variant,
                 "pixel_weight": cfg.pixel_weight},
        "optim": {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps},
        "adam_t": {"T": trainer.adam_T.t, "D": trainer.adam_D.t},
        "t_steps": trainer.t_steps,
        "batch_size": trainer.batch_size,
        "seed": trainer.seed,
        "counters": {"iteration": trainer.iteration, "d_updates": trainer.d_updates,
                     "t_updates": trainer.t_updates},
    }


def encode(header, tensors):
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC + str(VERSION).encode(), struct.pack("<I", len(head)), head, struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        arr = np.asarray(arr, dtype="<f4")
        key = name.encode("utf-8")
        parts.append(struct.pack("<I", len(key)) + key)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(f"checkpoint ends inside {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def decode(data):
    """Parse checkpoint bytes into (header, {name: float32 array})."""
    magic = data[:len(MAGIC) + 1]
    if len(magic) < len(MAGIC) + 1:
        raise CheckpointTruncatedError("checkpoint ends inside the magic bytes")
    if not magic.startswith(MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic)")
    if magic[len(MAGIC):] != str(VERSION).encode():
        raise CheckpointVersionError(f"checkpoint format {magic[len(MAGIC):]!r} is not supported "
                                     f"(this build reads version {VERSION})")
    r = _Reader(data)
    r.pos = len(MAGIC) + 1
    head = r.take(r.u32("header length"), "header")
    try:
        header = json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint header is not valid JSON: {exc}") from exc
    if header.get("format") != VERSION:
        raise CheckpointVersionError(f"checkpoint header declares format {header.get('format')!r}")
    tensors = {}
    for _ in range(r.u32("tensor count")):
        name = r.take(r.u32("tensor name length"), "tensor name").decode("utf-8")
        rank = r.u32(f"rank of {name}")
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank, f"extents of {name}"))
        n = int(np.prod(shape, dtype=np.int64))
        buf = r.take(4 * n, f"data of {name}")
        tensors[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} unexpected trailing bytes after the last tensor")
    return header, tensors


def _write_atomic(path, data):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".ckpt")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, trainer):
    _write_atomic(path, encode(_header(trainer), _named_state(trainer)))


def read_checkpoint(path):
    with open(path, "rb") as fh:
        return decode(fh.read())


def restore(trainer, header, tensors):
    """Copy checkpoint contents into an existing trainer, checking every shape."""
    expected = _named_state(trainer)
    names = {n for n, _ in expected}
    missing = [n for n, _ in expected if n not in tensors]
    extra = sorted(set(tensors) - names)
    if missing or extra:
        raise CheckpointShapeError(f"checkpoint tensors do not match the network: missing {missing[:4]}, "
                                   f"unexpected {extra[:4]}")
    for name, arr in expected:
        if tensors[name].shape != arr.shape:
            raise CheckpointShapeError(f"{name}: checkpoint holds shape {tensors[name].shape}, "
                                       f"network expects {arr.shape}")
    for name, arr in expected:
        arr[...] = tensors[name]
    trainer.adam_T.t = int(header["adam_t"]["T"])
    trainer.adam_D.t = int(header["adam_t"]["D"])
    c = header["counters"]
    trainer.iteration, trainer.d_updates, trainer.t_updates = c["iteration"], c["d_updates"], c["t_updates"]
    return trainer


def trainer_from_header(header):
    from panforge.trainer import Trainer

    size = tuple(header["input_size"])
    T = build_transform_net(size, Fraction(header["width_multiplier"]))
    D = build_discrim_net(size, Fraction(header["d_width_multiplier"]))
    loss = header["loss"]
    cfg = LossConfig(tuple(loss["lambdas"]), loss["margin"], loss["variant"], loss["pixel_weight"])
    return Trainer(T, D, cfg, t_steps=header["t_steps"], batch_size=header["batch_size"], seed=header["seed"],
                   **header["optim"])


def load_checkpoint(path, trainer=None):
    """Load ``path`` into ``trainer``, or into a trainer rebuilt from the header.

    Loading into a trainer whose networks have different shapes raises
    :class:`CheckpointShapeError`.
    """
    header, tensors = read_checkpoint(path)
    if trainer is None:
        trainer = trainer_from_header(header)
    return restore(trainer, header, tensors)
