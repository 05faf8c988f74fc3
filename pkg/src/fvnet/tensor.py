"""Dense tensors and the FVNT binary tensor file format.

Tensors throughout the package are plain contiguous numpy arrays in
row-major (n, h, w, c) order for video/feature data, so the length-c
channel fibers that the mixture and encoding layers consume are
contiguous in memory.  Stored data may be float32; all training math
runs in float64 (callers upcast with :func:`as_f64` on load).

FVNT file layout, little-endian, no padding:

    magic    4 bytes   b"FVNT"
    version  u32       1
    dtype    u32       1 = float32, 2 = float64
    ndim     u32
    dims     ndim*u32
    payload  row-major values
"""

import struct

import numpy as np

MAGIC = b"FVNT"
FORMAT_VERSION = 1

_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_FOR_KIND = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


class TensorFileError(ValueError):
    """Raised when an FVNT file cannot be parsed or written."""


def validate_tensor4(arr, name="tensor"):
    """Check that ``arr`` is a 4-d float32/float64 array; return it as ndarray."""
    arr = np.asarray(arr)
    if arr.ndim != 4:
        raise ValueError(f"{name}: expected 4 dims, got shape {arr.shape}")
    if arr.dtype not in (np.float32, np.float64):
        raise ValueError(f"{name}: expected float32/float64, got {arr.dtype}")
    return arr


def as_f64(arr):
    """Upcast stored data to the float64 used for all internal math."""
    arr = np.asarray(arr)
    return arr if arr.dtype == np.float64 else arr.astype(np.float64)


def crop(t, offsets, sizes):
    """Copy the sub-block of a 4-d tensor at ``offsets`` with extents ``sizes``.

    Raises IndexError naming the offending axis if the block does not fit.
    Zero sizes are allowed and yield empty tensors.
    """
    t = validate_tensor4(t, "crop input")
    if len(offsets) != 4 or len(sizes) != 4:
        raise ValueError("crop: offsets and sizes must be 4-tuples")
    slices = []
    for axis, (off, size, dim) in enumerate(zip(offsets, sizes, t.shape)):
        if off < 0 or size < 0:
            raise IndexError(
                f"crop: axis {axis}: negative offset/size ({off}, {size})")
        if off + size > dim:
            raise IndexError(
                f"crop: axis {axis}: offset {off} + size {size} exceeds dim {dim}")
        slices.append(slice(off, off + size))
    return np.ascontiguousarray(t[tuple(slices)])


def write_tensor(path, arr):
    """Write an array (any ndim) to ``path`` in FVNT format."""
    arr = np.asarray(arr)
    if arr.dtype not in _CODE_FOR_KIND:
        raise TensorFileError(
            f"unsupported dtype {arr.dtype}; only float32/float64 are stored")
    code = _CODE_FOR_KIND[arr.dtype]
    header = MAGIC + struct.pack("<III", FORMAT_VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr).astype(_DTYPE_CODES[code], copy=False)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def read_tensor(path):
    """Read an FVNT file; byte-exact inverse of :func:`write_tensor`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise TensorFileError(f"{path}: bad magic")
    if len(raw) < 16:
        raise TensorFileError(f"{path}: truncated header")
    version, code, ndim = struct.unpack("<III", raw[4:16])
    if version != FORMAT_VERSION:
        raise TensorFileError(f"{path}: unsupported version {version}")
    if code not in _DTYPE_CODES:
        raise TensorFileError(f"{path}: bad dtype code {code}")
    dims_end = 16 + 4 * ndim
    if len(raw) < dims_end:
        raise TensorFileError(f"{path}: truncated header")
    dims = struct.unpack(f"<{ndim}I", raw[16:dims_end])
    dtype = _DTYPE_CODES[code]
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    expected = dims_end + count * dtype.itemsize
    if len(raw) < expected:
        raise TensorFileError(f"{path}: truncated payload")
    if len(raw) > expected:
        raise TensorFileError(f"{path}: trailing bytes after payload")
    data = np.frombuffer(raw[dims_end:expected], dtype=dtype)
    return data.reshape(dims).copy()
