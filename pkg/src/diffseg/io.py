"""Binary file formats: VOLB volumes and training checkpoints.

All integers are little-endian. Both formats round-trip bitwise.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

VOLB_MAGIC = b"VOLB1\0"
CKPT_MAGIC = b"DSCKPT1\0"
DTYPE_IMAGE = 0
DTYPE_LABELS = 1
_VOLB_DTYPES = {DTYPE_IMAGE: np.dtype("<f4"), DTYPE_LABELS: np.dtype("u1")}


class FormatError(ValueError):
    """Malformed or mismatched file."""


# --- VOLB --------------------------------------------------------------------

def volb_dumps(arr: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype == np.float32:
        code = DTYPE_IMAGE
    elif arr.dtype == np.uint8:
        code = DTYPE_LABELS
    else:
        raise TypeError(f"VOLB stores float32 images or uint8 labels, got {arr.dtype}")
    if not 1 <= arr.ndim <= 255:
        raise ValueError(f"unsupported ndim {arr.ndim}")
    if len(spacing) != 3:
        raise ValueError("spacing must have three entries")
    header = VOLB_MAGIC + struct.pack("<BB", code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    header += struct.pack("<3f", *spacing)
    return header + np.ascontiguousarray(arr, dtype=_VOLB_DTYPES[code]).tobytes()


def volb_loads(buf: bytes) -> tuple[np.ndarray, tuple[float, float, float]]:
    if buf[:6] != VOLB_MAGIC:
        raise FormatError("not a VOLB file (bad magic)")
    if len(buf) < 8:
        raise FormatError("truncated VOLB header")
    code, ndim = struct.unpack_from("<BB", buf, 6)
    if code not in _VOLB_DTYPES:
        raise FormatError(f"unknown VOLB dtype code {code}")
    off = 8
    dims = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    spacing = struct.unpack_from("<3f", buf, off)
    off += 12
    dtype = _VOLB_DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) - off != expected:
        raise FormatError(f"VOLB payload is {len(buf) - off} bytes, expected {expected}")
    arr = np.frombuffer(buf, dtype=dtype, offset=off).reshape(dims).copy()
    return arr, spacing


def write_volb(path, arr: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> None:
    Path(path).write_bytes(volb_dumps(arr, spacing))


def read_volb(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    return volb_loads(Path(path).read_bytes())


# --- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    config_hash: str
    config_text: str
    schedule: tuple[int, float, float, int]  # (T, beta_start, beta_end, K)
    step: int
    params: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray]
    opt_v: dict[str, np.ndarray]
    opt_step: int
    rng_state: dict


def _put_str(out, s: str) -> None:
    b = s.encode("utf-8")
    out.write(struct.pack("<I", len(b)))
    out.write(b)


def _get(buf, fmt):
    size = struct.calcsize(fmt)
    data = buf.read(size)
    if len(data) != size:
        raise FormatError("truncated checkpoint")
    return struct.unpack(fmt, data)


def _get_str(buf) -> str:
    (n,) = _get(buf, "<I")
    data = buf.read(n)
    if len(data) != n:
        raise FormatError("truncated checkpoint")
    return data.decode("utf-8")


def _put_tensors(out, tensors: dict[str, np.ndarray]) -> None:
    out.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        _put_str(out, name)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(arr.tobytes())


def _get_tensors(buf) -> dict[str, np.ndarray]:
    (count,) = _get(buf, "<I")
    tensors = {}
    for _ in range(count):
        name = _get_str(buf)
        (ndim,) = _get(buf, "<B")
        shape = _get(buf, f"<{ndim}I")
        n = int(np.prod(shape, dtype=np.int64)) * 4
        data = buf.read(n)
        if len(data) != n:
            raise FormatError(f"truncated tensor {name!r}")
        tensors[name] = np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)
    return tensors


def checkpoint_dumps(ck: Checkpoint) -> bytes:
    out = io.BytesIO()
    out.write(CKPT_MAGIC)
    _put_str(out, ck.config_hash)
    _put_str(out, ck.config_text)
    T, bs, be, K = ck.schedule
    out.write(struct.pack("<IddI", T, bs, be, K))
    out.write(struct.pack("<Q", ck.step))
    _put_tensors(out, ck.params)
    _put_tensors(out, ck.opt_m)
    _put_tensors(out, ck.opt_v)
    out.write(struct.pack("<Q", ck.opt_step))
    _put_str(out, json.dumps(ck.rng_state, sort_keys=True))
    return out.getvalue()


def checkpoint_loads(data: bytes, expected_hash: str | None = None, force: bool = False) -> Checkpoint:
    """Parse a checkpoint; reject a config-hash mismatch unless ``force``."""
    buf = io.BytesIO(data)
    if buf.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    config_hash = _get_str(buf)
    if expected_hash is not None and config_hash != expected_hash and not force:
        raise FormatError(
            f"checkpoint config hash {config_hash} does not match {expected_hash}; pass force to override")
    config_text = _get_str(buf)
    schedule = _get(buf, "<IddI")
    (step,) = _get(buf, "<Q")
    params = _get_tensors(buf)
    opt_m = _get_tensors(buf)
    opt_v = _get_tensors(buf)
    (opt_step,) = _get(buf, "<Q")
    rng_state = json.loads(_get_str(buf))
    if buf.read(1):
        raise FormatError("trailing bytes after checkpoint")
    return Checkpoint(config_hash, config_text, tuple(schedule), step, params, opt_m, opt_v,
                      opt_step, rng_state)


def write_checkpoint(path, ck: Checkpoint) -> None:
    # write then rename so an interrupted save never leaves a half file
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_dumps(ck))
    tmp.replace(path)


def read_checkpoint(path, expected_hash: str | None = None, force: bool = False) -> Checkpoint:
    return checkpoint_loads(Path(path).read_bytes(), expected_hash, force)
