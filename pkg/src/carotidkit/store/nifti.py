"""Minimal NIfTI-1 single-file (.nii / .nii.gz) reader and writer.

Covers what the toolkit itself produces plus the common scanner-export
cases: little-endian, scalar datatypes, sform (preferred) or qform
affines, optional 4th (time) dimension.  Gzip members are written with
mtime=0 so outputs stay byte-identical across runs.
"""

from __future__ import annotations

import gzip
import struct

import numpy as np

from ..errors import CorruptHeader, UnsupportedFormat
from ..volume import Affine, ScalarVolume

_DTYPES = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32,
           64: np.float64, 256: np.int8, 512: np.uint16, 768: np.uint32}
_CODES = {np.dtype(np.float64): 64, np.dtype(np.float32): 16,
          np.dtype(np.int16): 4, np.dtype(np.uint8): 2, np.dtype(np.int32): 8}

HDR_SIZE = 348
VOX_OFFSET = 352


class _GzipNoName(gzip.GzipFile):
    """Gzip stream with neither mtime nor filename in the member header,
    so identical content always compresses to identical bytes."""

    def __init__(self, path, mode):
        self._raw = open(path, mode)
        super().__init__(filename="", fileobj=self._raw, mode=mode, mtime=0)

    def close(self):
        try:
            super().close()
        finally:
            self._raw.close()


def _open(path, mode):
    if str(path).endswith(".gz"):
        return _GzipNoName(path, mode)
    return open(path, mode)


def _quaternion_rotation(b, c, d):
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(max(a2, 0.0))
    return np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ])


def read_nifti(path) -> ScalarVolume:
    try:
        with _open(path, "rb") as f:
            raw = f.read()
    except (OSError, EOFError) as exc:
        raise CorruptHeader(f"cannot read {path}: {exc}") from exc
    if len(raw) < HDR_SIZE:
        raise CorruptHeader("file shorter than a NIfTI-1 header")
    sizeof_hdr = struct.unpack_from("<i", raw, 0)[0]
    if sizeof_hdr != HDR_SIZE:
        raise CorruptHeader(f"bad sizeof_hdr {sizeof_hdr} (big-endian or not NIfTI)")
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise CorruptHeader(f"bad magic {magic!r}")

    dim = struct.unpack_from("<8h", raw, 40)
    ndim = dim[0]
    if ndim not in (3, 4):
        raise UnsupportedFormat(f"only 3D/4D volumes supported, dim[0]={ndim}")
    nx, ny, nz = dim[1], dim[2], dim[3]
    nt = dim[4] if ndim == 4 else 1
    if min(nx, ny, nz, nt) < 1:
        raise CorruptHeader(f"bad dims {dim[:5]}")

    datatype = struct.unpack_from("<h", raw, 70)[0]
    if datatype not in _DTYPES:
        raise UnsupportedFormat(f"unsupported NIfTI datatype {datatype}")
    pixdim = struct.unpack_from("<8f", raw, 76)
    vox_offset = int(struct.unpack_from("<f", raw, 108)[0])
    scl_slope, scl_inter = struct.unpack_from("<2f", raw, 112)
    xyzt_units = raw[123]
    toffset = struct.unpack_from("<f", raw, 136)[0]
    qform_code, sform_code = struct.unpack_from("<2h", raw, 252)

    if sform_code > 0:
        rows = struct.unpack_from("<12f", raw, 280)
        m = np.eye(4)
        m[0, :] = rows[0:4]
        m[1, :] = rows[4:8]
        m[2, :] = rows[8:12]
    elif qform_code > 0:
        b, c, d = struct.unpack_from("<3f", raw, 256)
        ox, oy, oz = struct.unpack_from("<3f", raw, 268)
        qfac = -1.0 if pixdim[0] < 0 else 1.0
        rot = _quaternion_rotation(b, c, d)
        m = np.eye(4)
        m[:3, :3] = rot * np.array([pixdim[1], pixdim[2], pixdim[3] * qfac])
        m[:3, 3] = (ox, oy, oz)
    else:
        m = np.diag([pixdim[1] or 1.0, pixdim[2] or 1.0, pixdim[3] or 1.0, 1.0])

    dtype = np.dtype(_DTYPES[datatype]).newbyteorder("<")
    count = nx * ny * nz * nt
    data = raw[vox_offset:vox_offset + count * dtype.itemsize]
    if len(data) < count * dtype.itemsize:
        raise CorruptHeader("truncated voxel data")
    arr = np.frombuffer(data, dtype=dtype).astype(np.float64)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        arr = arr * slope + scl_inter
    if ndim == 4:
        values = arr.reshape(nt, nz, ny, nx).transpose(0, 3, 2, 1)
        # time unit: 8=sec, 16=msec, 24=usec (upper bits of xyzt_units)
        tcode = xyzt_units & 0x38
        dt = pixdim[4] * {8: 1000.0, 16: 1.0, 24: 1e-3}.get(tcode, 1.0)
        time_axis = tuple(toffset + dt * i for i in range(nt))
    else:
        values = arr.reshape(nz, ny, nx).transpose(2, 1, 0)
        time_axis = None
    spacing = tuple(float(np.linalg.norm(m[:3, i])) for i in range(3))
    return ScalarVolume(dims=(nx, ny, nz), spacing=spacing, affine=Affine(m),
                        values=values, time_axis=time_axis)


def write_nifti(vol: ScalarVolume, path, dtype=np.float64) -> None:
    dtype = np.dtype(dtype)
    if dtype not in _CODES:
        raise UnsupportedFormat(f"cannot write dtype {dtype}")
    nx, ny, nz = vol.dims
    nt = len(vol.time_axis) if vol.time_axis is not None else 1
    is4d = vol.time_axis is not None

    hdr = bytearray(VOX_OFFSET)
    struct.pack_into("<i", hdr, 0, HDR_SIZE)
    dim = (4, nx, ny, nz, nt, 1, 1, 1) if is4d else (3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 70, _CODES[dtype])
    struct.pack_into("<h", hdr, 72, dtype.itemsize * 8)
    dt_ms = 0.0
    if is4d and nt > 1:
        dt_ms = float(vol.time_axis[1] - vol.time_axis[0])
    struct.pack_into("<8f", hdr, 76, 1.0, *vol.spacing, dt_ms, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    hdr[123] = 2 | 16  # mm + msec
    if is4d:
        struct.pack_into("<f", hdr, 136, float(vol.time_axis[0]))
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform off, sform on
    m = vol.affine.matrix
    struct.pack_into("<4f", hdr, 280, *m[0, :])
    struct.pack_into("<4f", hdr, 296, *m[1, :])
    struct.pack_into("<4f", hdr, 312, *m[2, :])
    hdr[344:348] = b"n+1\x00"

    if is4d:
        data = vol.values.transpose(0, 3, 2, 1)
    else:
        data = vol.values.transpose(2, 1, 0)
    with _open(path, "wb") as f:
        f.write(bytes(hdr))
        f.write(np.ascontiguousarray(data).astype(dtype.newbyteorder("<")).tobytes())
