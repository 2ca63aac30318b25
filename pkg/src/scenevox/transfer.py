"""Checkpointing, backbone weight transfer, and labeled-fraction sampling.

Checkpoint file layout (all integers little-endian):
  magic "SVCK0001" (8 bytes)
  header length (uint64)
  header: UTF-8 JSON {"meta": {...}, "tensors": [[name, "<f8", [shape]], ...]}
          with tensors listed in sorted name order
  payload: raw little-endian float64 tensor data, same order as the header
  digest: SHA-256 of all preceding bytes (32 bytes)

Tensors are stored as 64-bit reals; float32 model parameters round-trip
bit-exactly through the wider container.
"""

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DigestError, FormatError

MAGIC = b"SVCK0001"


@dataclass
class Checkpoint:
    """Named parameter map plus run metadata."""

    params: dict
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.params = {str(k): np.asarray(v, dtype=np.float64) for k, v in self.params.items()}

    def backbone_keys(self):
        return sorted(k for k in self.params if k.startswith("backbone."))


def model_checkpoint(model: torch.nn.Module, meta=None) -> Checkpoint:
    """Snapshot a model's parameters and buffers as float64 arrays."""
    state = model.state_dict()
    params = {name: tensor.detach().cpu().double().numpy().copy()
              for name, tensor in state.items()}
    return Checkpoint(params, dict(meta or {}))


def save_checkpoint(ck: Checkpoint, path):
    names = sorted(ck.params)
    header = json.dumps({
        "meta": ck.meta,
        "tensors": [[n, "<f8", list(ck.params[n].shape)] for n in names],
    }, sort_keys=True).encode()
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<Q", len(header))
    blob += header
    for n in names:
        blob += np.ascontiguousarray(ck.params[n], dtype="<f8").tobytes()
    blob += hashlib.sha256(bytes(blob)).digest()
    with open(path, "wb") as f:
        f.write(bytes(blob))
    return ck


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(MAGIC) + 8 + 32 or blob[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise DigestError(f"{path}: content digest mismatch (corrupt or truncated file)")
    header_len = struct.unpack("<Q", blob[8:16])[0]
    try:
        header = json.loads(blob[16:16 + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable header") from e
    offset = 16 + header_len
    params = {}
    for name, dtype, shape in header["tensors"]:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 8
        arr = np.frombuffer(body, dtype=dtype, count=count, offset=offset)
        params[name] = arr.reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(body):
        raise FormatError(f"{path}: payload size mismatch")
    return Checkpoint(params, header.get("meta", {}))


def apply_checkpoint(ck: Checkpoint, model: torch.nn.Module):
    """Load every checkpoint tensor into the model (shapes must match exactly)."""
    state = model.state_dict()
    missing = sorted(set(state) - set(ck.params))
    extra = sorted(set(ck.params) - set(state))
    if missing or extra:
        raise FormatError(f"checkpoint/model key mismatch: missing {missing}, extra {extra}")
    with torch.no_grad():
        for name, tensor in state.items():
            src = torch.from_numpy(ck.params[name]).to(tensor.dtype)
            if src.shape != tensor.shape:
                raise FormatError(f"shape mismatch for {name}: {tuple(src.shape)} vs {tuple(tensor.shape)}")
            tensor.copy_(src)
    return model


def transfer_backbone(ck: Checkpoint, detector_model) -> torch.nn.Module:
    """Copy every `backbone.*` checkpoint parameter into the detector.

    The checkpoint's backbone config digest must equal the detector's; key
    sets must match exactly (no silent partial transfer). All other detector
    parameters are left untouched.
    """
    want = ck.meta.get("backbone_digest")
    have = detector_model.backbone.config.digest()
    if want != have:
        raise DigestError(
            f"backbone config digest mismatch: checkpoint {want!r} vs detector {have!r}"
        )
    ck_keys = set(ck.backbone_keys())
    state = detector_model.state_dict()
    model_keys = {k for k in state if k.startswith("backbone.")}
    if ck_keys != model_keys:
        missing = sorted(model_keys - ck_keys)
        extra = sorted(ck_keys - model_keys)
        raise FormatError(
            f"backbone key mismatch: missing from checkpoint {missing}, unexpected {extra}"
        )
    with torch.no_grad():
        for name in sorted(ck_keys):
            tensor = state[name]
            src = torch.from_numpy(ck.params[name]).to(tensor.dtype)
            if src.shape != tensor.shape:
                raise FormatError(f"shape mismatch for {name}")
            tensor.copy_(src)
    return detector_model


# ---------------------------------------------------------------------------
# Labeled-fraction sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LabelFraction:
    """Fraction of the training set to label, with its sampling seed.

    The reference protocol uses fractions {0.10, 0.20, 0.30, 0.40, 1.0};
    any value in (0, 1] is accepted. Subsets for different fractions are
    independent draws (no nesting guarantee).
    """

    fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError(f"fraction must be in (0, 1], got {self.fraction}")


def sample_label_fraction(n_frames, lf: LabelFraction):
    """ceil(fraction * n_frames) distinct indices, uniform without replacement.

    Deterministic for a fixed (n_frames, fraction, seed); returned sorted.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    count = math.ceil(lf.fraction * n_frames - 1e-9)
    rng = np.random.default_rng(lf.seed)
    picked = rng.choice(n_frames, size=count, replace=False)
    return np.sort(picked).tolist()
