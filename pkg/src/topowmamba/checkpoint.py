"""Binary checkpoint format.

Layout (little-endian):
    "TWMB" | u32 version | u64 json length | json | u32 tensor count |
    per tensor: u16 name length | name | u8 dtype | u8 rank | rank x u64 extents | payload
    | u32 CRC32 of every preceding byte

The JSON header carries the model config, free-form metadata and the scalar
part of the optimizer state. Optimizer moment tensors are stored in the tensor
table under the prefixes ``optim.m.`` and ``optim.v.``.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib

import numpy as np

from .network import ModelConfig, TopoWMamba, build_model

MAGIC = b"TWMB"
VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}
MOMENT_PREFIXES = ("optim.m.", "optim.v.")


class CheckpointError(ValueError):
    pass


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode(config: dict, tensors: dict[str, np.ndarray], header_extra: dict | None = None) -> bytes:
    header = {"config": config}
    header.update(header_extra or {})
    js = _json_bytes(header)
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(js)), js, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dt = arr.dtype.newbyteorder("<")
        if dt not in DTYPE_CODES:
            raise CheckpointError(f"tensor {name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"tensor {name}: name or rank too large")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<BB{arr.ndim}Q", DTYPE_CODES[dt], arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    if len(blob) < 24:
        raise CheckpointError("truncated checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checkpoint CRC mismatch (corrupted or truncated file)")
    try:
        (jlen,) = struct.unpack_from("<Q", body, 8)
        pos = 16
        header = json.loads(body[pos:pos + jlen].decode("utf-8"))
        pos += jlen
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            code, rank = struct.unpack_from("<BB", body, pos)
            pos += 2
            shape = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            dt = CODE_DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(body):
                raise CheckpointError(f"tensor {name}: payload runs past end of file")
            tensors[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize,
                                          offset=pos).reshape(shape).astype(dt.newbyteorder("="))
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"malformed checkpoint: {err}") from err
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes after tensor table")
    return header, tensors


def atomic_write(path, data: bytes) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".part")
    umask = os.umask(0)
    os.umask(umask)
    try:
        os.chmod(tmp, 0o666 & ~umask)  # mkstemp creates 0600 files
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_save(model: TopoWMamba, optimizer_state: dict | None, path,
                    metadata: dict | None = None) -> None:
    """Write model weights, config, optional optimizer state and metadata.

    ``optimizer_state`` is {"t": int, "m": {name: arr}, "v": {name: arr}, ...};
    any other keys must be JSON-serializable and are kept in the header.
    """
    tensors = dict(model.state_dict())
    extra = {"metadata": metadata or {}}
    if optimizer_state is not None:
        scalars = {k: v for k, v in optimizer_state.items() if k not in ("m", "v")}
        extra["optimizer"] = scalars
        for key, prefix in zip(("m", "v"), MOMENT_PREFIXES):
            for name, arr in optimizer_state.get(key, {}).items():
                tensors[prefix + name] = arr
    try:
        blob = encode(model.cfg.to_dict(), tensors, extra)
    except TypeError as err:
        raise CheckpointError(f"unserializable checkpoint state: {err}") from err
    atomic_write(path, blob)


def config_diff(a: dict, b: dict) -> list[str]:
    return sorted(k for k in set(a) | set(b) if a.get(k, "<missing>") != b.get(k, "<missing>"))


def checkpoint_load(path, expected: ModelConfig | None = None):
    """Returns (model, optimizer_state or None, metadata)."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err
    header, tensors = decode(blob)
    cfg_dict = header["config"]
    if expected is not None:
        diff = config_diff(cfg_dict, expected.to_dict())
        if diff:
            detail = ", ".join(f"{k}: file={cfg_dict.get(k)!r} requested={getattr(expected, k, None)!r}"
                               for k in diff)
            raise CheckpointError(f"config mismatch on keys {diff} ({detail})")
    cfg = ModelConfig.from_dict(cfg_dict)
    model = build_model(cfg)
    params = {k: v for k, v in tensors.items() if not k.startswith(MOMENT_PREFIXES)}
    if params and all(v.dtype == np.float64 for v in params.values()):
        model.astype(np.float64)
    try:
        model.load_state_dict(params)
    except (KeyError, ValueError) as err:
        raise CheckpointError(f"checkpoint incompatible with its config: {err}") from err
    opt = None
    if "optimizer" in header:
        opt = dict(header["optimizer"])
        for key, prefix in zip(("m", "v"), MOMENT_PREFIXES):
            opt[key] = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    return model, opt, header.get("metadata", {})
