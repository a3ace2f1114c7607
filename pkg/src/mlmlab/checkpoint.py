"""Checkpoint file format and round-trip IO.

Layout: 8 magic bytes, u32 format version, u64-length-prefixed JSON
metadata (configs, step, stage, RNG state, tokenizer fingerprint,
optimizer step count), then a tensor table of named, shape-tagged
little-endian float32 blobs. Everything integer is little-endian.
"""

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .model import EncoderWeights, ModelConfig
from .optim import AdamWState

MAGIC = b"MLMLABCK"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Base for unreadable checkpoint files."""


class CheckpointFormatError(CheckpointError):
    """Magic bytes or structure do not match the format."""


class CheckpointVersionError(CheckpointError):
    def __init__(self, found, expected):
        super().__init__(f"checkpoint format version {found}, this build reads {expected}")


class TruncatedCheckpointError(CheckpointError):
    """File ended before the declared content."""


class FingerprintMismatchError(CheckpointError):
    def __init__(self, found, expected):
        super().__init__(
            f"tokenizer fingerprint mismatch: checkpoint has {found[:12]}…, current tokenizer is {expected[:12]}…"
        )


@dataclass
class Checkpoint:
    """Everything needed to continue training bit-exactly or analyze a run."""

    model_config: ModelConfig
    train_config: dict | None
    weights: EncoderWeights
    opt_state: AdamWState
    step: int
    stage: int
    rng: dict
    tokenizer_fingerprint: str


def _write_exact(fh, data):
    fh.write(data)


def _read_exact(fh, n):
    data = fh.read(n)
    if len(data) != n:
        raise TruncatedCheckpointError(f"expected {n} bytes, file ended after {len(data)}")
    return data


def _write_tensor(fh, name, arr):
    raw = name.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<Q", d))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_tensor(fh):
    (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
    name = _read_exact(fh, name_len).decode("utf-8")
    (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
    shape = tuple(struct.unpack("<Q", _read_exact(fh, 8))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").reshape(shape).copy()
    return name, arr


def save_checkpoint(ckpt, path):
    meta = {
        "model_config": dataclasses.asdict(ckpt.model_config),
        "train_config": ckpt.train_config,
        "step": ckpt.step,
        "stage": ckpt.stage,
        "rng": ckpt.rng,
        "tokenizer_fingerprint": ckpt.tokenizer_fingerprint,
        "opt_t": ckpt.opt_state.t,
    }
    meta_bytes = json.dumps(meta).encode("utf-8")
    tensors = [("param." + n, p.data) for n, p in ckpt.weights.named_parameters()]
    for n in ckpt.opt_state.m:
        tensors.append(("adam_m." + n, ckpt.opt_state.m[n]))
        tensors.append(("adam_v." + n, ckpt.opt_state.v[n]))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            _write_tensor(fh, name, arr)
    return path


def load_checkpoint(path, expected_fingerprint=None):
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointFormatError(f"bad magic bytes {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != FORMAT_VERSION:
            raise CheckpointVersionError(version, FORMAT_VERSION)
        (meta_len,) = struct.unpack("<Q", _read_exact(fh, 8))
        try:
            meta = json.loads(_read_exact(fh, meta_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointFormatError(f"unreadable metadata: {exc}") from exc
        (n_tensors,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors = dict(_read_tensor(fh) for _ in range(n_tensors))

    fingerprint = meta["tokenizer_fingerprint"]
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise FingerprintMismatchError(fingerprint, expected_fingerprint)

    model_config = ModelConfig(**meta["model_config"])
    params = {}
    for key, arr in tensors.items():
        if key.startswith("param."):
            name = key[len("param.") :]
            params[name] = ag.parameter(arr, name=name)
    weights = EncoderWeights(params, tied=model_config.tie_mlm_head)
    opt = AdamWState(t=meta["opt_t"])
    for key, arr in tensors.items():
        if key.startswith("adam_m."):
            opt.m[key[len("adam_m.") :]] = arr
        elif key.startswith("adam_v."):
            opt.v[key[len("adam_v.") :]] = arr
    return Checkpoint(
        model_config=model_config,
        train_config=meta["train_config"],
        weights=weights,
        opt_state=opt,
        step=meta["step"],
        stage=meta["stage"],
        rng=meta["rng"],
        tokenizer_fingerprint=fingerprint,
    )
