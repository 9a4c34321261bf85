"""Minimal NRRD reader/writer (attached data, raw or gzip encoding)."""

from __future__ import annotations

import gzip

import numpy as np

from ..errors import CorruptHeader, UnsupportedFormat
from ..volume import Affine, ScalarVolume

_TYPES = {
    "double": np.float64, "float": np.float32,
    "short": np.int16, "signed short": np.int16,
    "ushort": np.uint16, "unsigned short": np.uint16,
    "uchar": np.uint8, "unsigned char": np.uint8,
    "int": np.int32, "signed int": np.int32,
}
_TYPE_NAMES = {np.dtype(np.float64): "double", np.dtype(np.float32): "float",
               np.dtype(np.int16): "short", np.dtype(np.uint8): "uchar",
               np.dtype(np.int32): "int"}


def _parse_vector(text: str) -> list:
    return [float(x) for x in text.strip().lstrip("(").rstrip(")").split(",")]


def read_nrrd(path) -> ScalarVolume:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise CorruptHeader(f"cannot read {path}: {exc}") from exc
    if not raw.startswith(b"NRRD"):
        raise CorruptHeader("missing NRRD magic")
    split = raw.find(b"\n\n")
    if split < 0:
        raise CorruptHeader("missing blank line after NRRD header")
    header_lines = raw[:split].decode("ascii", "replace").splitlines()
    body = raw[split + 2:]

    fields = {}
    for line in header_lines[1:]:
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise CorruptHeader(f"malformed header line {line!r}")
        key, _, value = line.partition(":")
        fields[key.strip().lower()] = value.lstrip("= ").strip()

    for required in ("type", "dimension", "sizes", "encoding"):
        if required not in fields:
            raise CorruptHeader(f"missing NRRD field {required!r}")
    type_name = fields["type"].lower()
    if type_name not in _TYPES:
        raise UnsupportedFormat(f"unsupported NRRD type {fields['type']!r}")
    ndim = int(fields["dimension"])
    if ndim != 3:
        raise UnsupportedFormat(f"only 3D NRRD supported, dimension={ndim}")
    sizes = [int(s) for s in fields["sizes"].split()]
    if len(sizes) != 3 or min(sizes) < 1:
        raise CorruptHeader(f"bad sizes {fields['sizes']!r}")
    if fields.get("endian", "little") != "little":
        raise UnsupportedFormat("big-endian NRRD not supported")

    encoding = fields["encoding"].lower()
    if encoding == "gzip":
        try:
            body = gzip.decompress(body)
        except OSError as exc:
            raise CorruptHeader(f"bad gzip payload: {exc}") from exc
    elif encoding != "raw":
        raise UnsupportedFormat(f"unsupported encoding {encoding!r}")

    dtype = np.dtype(_TYPES[type_name]).newbyteorder("<")
    count = sizes[0] * sizes[1] * sizes[2]
    if len(body) < count * dtype.itemsize:
        raise CorruptHeader("truncated NRRD data")
    arr = np.frombuffer(body[:count * dtype.itemsize], dtype=dtype)
    values = arr.astype(np.float64).reshape(sizes[::-1]).transpose(2, 1, 0)

    m = np.eye(4)
    if "space directions" in fields:
        vecs = [tok for tok in fields["space directions"].split(")") if tok.strip()]
        cols = [_parse_vector(v + ")") for v in vecs]
        if len(cols) != 3:
            raise CorruptHeader("need 3 space direction vectors")
        for i, col in enumerate(cols):
            m[:3, i] = col
    if "space origin" in fields:
        m[:3, 3] = _parse_vector(fields["space origin"])
    spacing = tuple(float(np.linalg.norm(m[:3, i])) for i in range(3))
    return ScalarVolume(dims=tuple(sizes), spacing=spacing, affine=Affine(m),
                        values=values)


def write_nrrd(vol: ScalarVolume, path, dtype=np.float64,
               encoding: str = "raw") -> None:
    if vol.time_axis is not None:
        raise UnsupportedFormat("NRRD writer is 3D only")
    dtype = np.dtype(dtype)
    if dtype not in _TYPE_NAMES:
        raise UnsupportedFormat(f"cannot write dtype {dtype}")
    if encoding not in ("raw", "gzip"):
        raise UnsupportedFormat(f"unsupported encoding {encoding!r}")
    m = vol.affine.matrix

    def vec(col):
        return "(" + ",".join(f"{v:.17g}" for v in col) + ")"

    header = [
        "NRRD0004",
        f"type: {_TYPE_NAMES[dtype]}",
        "dimension: 3",
        "sizes: " + " ".join(str(d) for d in vol.dims),
        "space dimension: 3",
        "space directions: " + " ".join(vec(m[:3, i]) for i in range(3)),
        "space origin: " + vec(m[:3, 3]),
        "endian: little",
        f"encoding: {encoding}",
    ]
    payload = np.ascontiguousarray(vol.values.transpose(2, 1, 0)) \
        .astype(dtype.newbyteorder("<")).tobytes()
    if encoding == "gzip":
        payload = gzip.compress(payload, mtime=0)
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n\n").encode("ascii"))
        f.write(payload)
