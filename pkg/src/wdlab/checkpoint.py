"""Checkpoint files: a small native container ("NWT1"), a read-only parser for
the safetensors layout, and per-layer norm / stable-rank reports."""
from __future__ import annotations

import csv
import io
import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import linalg
from .errors import ConfigError, FormatError, InvalidInputError
from .model import Architecture, Params

NATIVE_MAGIC = b"NWT1"
NATIVE_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
NATIVE_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}
ST_DTYPES = {"F64": 8, "F32": 4, "F16": 2, "BF16": 2}
ST_ITEMSIZE = {
    "F64": 8, "F32": 4, "F16": 2, "BF16": 2, "F8_E4M3": 1, "F8_E5M2": 1,
    "I64": 8, "I32": 4, "I16": 2, "I8": 1, "U64": 8, "U32": 4, "U16": 2, "U8": 1, "BOOL": 1,
}
REPORT_FIELDS = ("name", "rows", "cols", "fro_norm", "spec_norm", "stable_rank", "group")


@dataclass
class Checkpoint:
    tensors: dict = field(default_factory=dict)  # name -> ndarray, in file order
    meta: Optional[dict] = None
    warnings: list = field(default_factory=list)


def params_to_checkpoint(params: Params, arch: Architecture, **meta) -> Checkpoint:
    tensors = {f"W{k + 1}": w.copy() for k, w in enumerate(params.weights)}
    tensors[f"w{arch.K}"] = params.head.copy()
    info = {
        "K": arch.K,
        "H": arch.H,
        "d": arch.d,
        "widths": list(arch.widths),
        "activation": arch.activation.kind,
        **meta,
    }
    return Checkpoint(tensors, info)


def checkpoint_to_params(ckpt: Checkpoint, arch: Architecture) -> Params:
    try:
        weights = [np.asarray(ckpt.tensors[f"W{k + 1}"], dtype=np.float64) for k in range(arch.K - 1)]
        head = np.asarray(ckpt.tensors[f"w{arch.K}"], dtype=np.float64)
    except KeyError as e:
        raise InvalidInputError(f"checkpoint lacks tensor {e.args[0]}") from None
    return Params(weights, head).check(arch)


def meta_path(path) -> Path:
    return Path(f"{path}.meta.json")


def write_native(path, ckpt: Checkpoint) -> None:
    """Write the NWT1 container plus a JSON sidecar with ``ckpt.meta``."""
    if not ckpt.tensors:
        raise InvalidInputError("checkpoint has no tensors")
    buf = io.BytesIO()
    buf.write(NATIVE_MAGIC)
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in NATIVE_CODES:
            raise InvalidInputError(f"tensor {name!r}: dtype {arr.dtype} not storable (f64/f32 only)")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF or arr.ndim > 0xFF:
            raise InvalidInputError(f"tensor {name!r}: name or rank too large")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BB", NATIVE_CODES[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    Path(path).write_bytes(buf.getvalue())
    meta_path(path).write_text(json.dumps(ckpt.meta or {}, indent=2, sort_keys=True))


class _Cursor:
    def __init__(self, raw: bytes, pos: int = 0):
        self.raw, self.pos = raw, pos

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.raw):
            raise FormatError(f"truncated {what}: need {n} bytes", self.pos, what)
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _read_native(raw: bytes) -> dict:
    cur = _Cursor(raw, 4)
    (count,) = cur.unpack("<I", "tensor_count")
    tensors = {}
    for _ in range(count):
        (nlen,) = cur.unpack("<H", "name_length")
        at = cur.pos
        try:
            name = cur.take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8", at, "name") from None
        if name in tensors:
            raise FormatError(f"duplicate tensor {name!r}", at, "name")
        at = cur.pos
        code, ndim = cur.unpack("<BB", "dtype")
        if code not in NATIVE_DTYPES:
            raise FormatError(f"unknown dtype code {code}", at, "dtype")
        shape = cur.unpack(f"<{ndim}Q", "dims")
        nbytes = NATIVE_DTYPES[code].itemsize * math.prod(shape)
        data = cur.take(nbytes, "data")
        flat = np.frombuffer(data, dtype=NATIVE_DTYPES[code]).astype(NATIVE_DTYPES[code].newbyteorder("="))
        tensors[name] = _reshape(flat, shape, at, "dims")
    if cur.pos != len(raw):
        raise FormatError("trailing bytes after last tensor", cur.pos, "data")
    return tensors


def _widen(buf: bytes, dtype: str) -> np.ndarray:
    if dtype == "F64":
        return np.frombuffer(buf, dtype="<f8").astype(np.float64)
    if dtype == "F32":
        return np.frombuffer(buf, dtype="<f4").astype(np.float32)
    if dtype == "F16":
        return np.frombuffer(buf, dtype="<f2").astype(np.float64)
    bits = np.frombuffer(buf, dtype="<u2").astype(np.uint32) << 16
    return bits.view(np.float32).astype(np.float64)


def _reshape(flat: np.ndarray, shape, offset: int, what: str) -> np.ndarray:
    try:
        return flat.reshape(shape)
    except (ValueError, OverflowError):
        raise FormatError(f"cannot form shape {list(shape)}", offset, what) from None


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _read_safetensors(raw: bytes) -> tuple[dict, list]:
    if len(raw) < 8:
        raise FormatError("file shorter than the 8-byte header length", 0, "header_length")
    (hlen,) = struct.unpack("<Q", raw[:8])
    if hlen > len(raw) - 8:
        raise FormatError(f"header length {hlen} exceeds file size {len(raw)}", 0, "header_length")
    try:
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError, RecursionError) as e:
        raise FormatError(f"malformed header JSON: {e}", 8, "header") from None
    if not isinstance(header, dict):
        raise FormatError("header is not a JSON object", 8, "header")
    data = raw[8 + hlen :]
    entries, warnings = [], []
    for name, info in header.items():
        if name == "__metadata__":
            continue
        if not isinstance(info, dict):
            raise FormatError("tensor entry is not an object", 8, name)
        dtype, shape, offs = info.get("dtype"), info.get("shape"), info.get("data_offsets")
        if not isinstance(dtype, str):
            raise FormatError("missing or non-string dtype", 8, f"{name}.dtype")
        if not isinstance(shape, list) or not all(_is_int(s) and s >= 0 for s in shape):
            raise FormatError("shape must be a list of nonnegative integers", 8, f"{name}.shape")
        if (
            not isinstance(offs, list)
            or len(offs) != 2
            or not all(_is_int(o) for o in offs)
            or not 0 <= offs[0] <= offs[1] <= len(data)
        ):
            raise FormatError(f"data_offsets {offs!r} out of range", 8 + hlen, f"{name}.data_offsets")
        size = ST_ITEMSIZE.get(dtype)
        if size is not None and offs[1] - offs[0] != size * math.prod(shape):
            raise FormatError("data_offsets span does not match shape and dtype", 8 + hlen, f"{name}.data_offsets")
        entries.append((offs[0], offs[1], name, dtype, shape))
    entries.sort()
    for (b0, e0, n0, *_), (b1, _, n1, *_) in zip(entries, entries[1:]):
        if b1 < e0:
            raise FormatError(f"tensors {n0!r} and {n1!r} overlap", 8 + hlen + b1, f"{n1}.data_offsets")
    tensors = {}
    for begin, end, name, dtype, shape in entries:
        if dtype not in ST_DTYPES:
            warnings.append(f"skipped {name!r}: unsupported dtype {dtype}")
            continue
        tensors[name] = _reshape(_widen(data[begin:end], dtype), shape, 8 + hlen + begin, f"{name}.shape")
    return tensors, warnings


def read_checkpoint(path) -> Checkpoint:
    """Read a native or safetensors checkpoint (format detected from the magic).

    Tensors come back in file order. F16/BF16 are widened to float64.
    """
    raw = Path(path).read_bytes()
    if raw[:4] == NATIVE_MAGIC:
        tensors, warnings = _read_native(raw), []
    else:
        tensors, warnings = _read_safetensors(raw)
    meta = None
    side = meta_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
    return Checkpoint(tensors, meta, warnings)


@dataclass
class LayerReportRow:
    name: str
    rows: int
    cols: int
    fro_norm: float
    spec_norm: float
    stable_rank: float
    group: str = ""

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_FIELDS}


@dataclass
class LayerReport:
    rows: list
    skipped: list  # names of tensors that are not 2-D

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        for r in self.rows:
            w.writerow([r.name, r.rows, r.cols, repr(r.fro_norm), repr(r.spec_norm), repr(r.stable_rank), r.group])
        return out.getvalue()

    def to_json(self) -> str:
        return json.dumps({"rows": [r.as_dict() for r in self.rows], "skipped": self.skipped}, indent=2)


def _measure(name: str, mat: np.ndarray, group: str) -> LayerReportRow:
    mat = np.asarray(mat, dtype=np.float64)
    fro = float(np.linalg.norm(mat))
    if fro == 0.0:
        return LayerReportRow(name, *mat.shape, 0.0, 0.0, float("nan"), group)
    fro, spec, sr = linalg.stable_rank(mat)
    return LayerReportRow(name, *mat.shape, fro, spec, sr, group)


def layer_report(ckpt: Checkpoint, groups: Optional[dict] = None, jobs: int = 1) -> LayerReport:
    """Per-matrix Frobenius norm, spectral norm and stable rank.

    ``groups`` maps a group name to an exact list of tensor names; those tensors
    are stacked along rows and measured as one layer, reported at the position
    of the first member.
    """
    groups = groups or {}
    member_of = {}
    for gname, names in groups.items():
        if not names:
            raise ConfigError("group is empty", f"groups.{gname}")
        for n in names:
            if n not in ckpt.tensors:
                raise ConfigError(f"unknown tensor {n!r}", f"groups.{gname}")
            if np.ndim(ckpt.tensors[n]) != 2:
                raise ConfigError(f"tensor {n!r} is not a matrix", f"groups.{gname}")
            if n in member_of:
                raise ConfigError(f"tensor {n!r} is in two groups", f"groups.{gname}")
            member_of[n] = gname
        if len({np.shape(ckpt.tensors[n])[1] for n in names}) != 1:
            raise ConfigError("grouped tensors differ in column count", f"groups.{gname}")

    tasks, skipped, done = [], [], set()
    for name, arr in ckpt.tensors.items():
        if np.ndim(arr) != 2:
            skipped.append(name)
            continue
        g = member_of.get(name)
        if g is None:
            tasks.append((name, arr, ""))
        elif g not in done:
            done.add(g)
            members = groups[g]
            tasks.append(("+".join(members), np.vstack([ckpt.tensors[n] for n in members]), g))
    if not tasks:
        raise InvalidInputError("checkpoint has no 2-D tensors")
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            rows = list(ex.map(lambda t: _measure(*t), tasks))
    else:
        rows = [_measure(*t) for t in tasks]
    return LayerReport(rows, skipped)
