"""Volume containers, on-disk formats, normalization and one-hot encoding.

Intensity grids are stored as float32 arrays of shape (H, W, D) in C order,
so the D axis varies fastest.  Label grids use the same layout with int32
storage internally and a 16-bit unsigned payload on disk.

Two formats are supported:

* the native "VVOL" format (read and write), a minimal little-endian header
  followed by the raw payload;
* NIfTI-1 single-file ``.nii`` (read only), restricted to uint8 / int16 /
  float32 payloads.  Orientation fields are ignored.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import (
    DegenerateInputError,
    FormatError,
    ShapeError,
    TruncatedFileError,
    UnsupportedDtypeError,
)

VVOL_MAGIC = b"VVOL1\n"
NIFTI_MAGIC = b"n+1\x00"

_DTYPE_INTENSITY = 0
_DTYPE_LABEL = 1


def _check_dims(dims):
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3:
        raise ShapeError(f"expected 3 dimensions, got {dims}")
    if any(d <= 0 for d in dims):
        raise ShapeError(f"all dimensions must be positive, got {dims}")
    return dims


def _check_spacing(spacing):
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ShapeError(f"spacing must be 3 strictly positive values, got {spacing}")
    return spacing


class Volume:
    """Scalar intensity grid with voxel spacing in millimeters."""

    def __init__(self, data, spacing=(1.0, 1.0, 1.0)):
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim != 3:
            raise ShapeError(f"intensity data must be 3-D, got shape {arr.shape}")
        self.dims = _check_dims(arr.shape)
        if not np.isfinite(arr).all():
            raise ShapeError("intensity data contains non-finite values")
        self.spacing = _check_spacing(spacing)
        self.data = np.ascontiguousarray(arr)

    def copy(self) -> "Volume":
        return Volume(self.data.copy(), self.spacing)


class LabelVolume:
    """Integer label grid; label 0 is background."""

    def __init__(self, data, num_classes=None, spacing=(1.0, 1.0, 1.0)):
        arr = np.asarray(data)
        if arr.ndim != 3:
            raise ShapeError(f"label data must be 3-D, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise ShapeError(f"label data must be integral, got dtype {arr.dtype}")
        self.dims = _check_dims(arr.shape)
        self.spacing = _check_spacing(spacing)
        arr = np.ascontiguousarray(arr.astype(np.int32))
        lo = int(arr.min())
        hi = int(arr.max())
        if lo < 0:
            raise ShapeError(f"labels must be non-negative, found {lo}")
        if num_classes is None:
            num_classes = max(2, hi + 1)
        num_classes = int(num_classes)
        if num_classes < 2:
            raise ShapeError(f"num_classes must be >= 2, got {num_classes}")
        if hi >= num_classes:
            raise ShapeError(f"label {hi} out of range for num_classes={num_classes}")
        self.num_classes = num_classes
        self.data = arr

    def copy(self) -> "LabelVolume":
        return LabelVolume(self.data.copy(), self.num_classes, self.spacing)


def save_volume(v, path) -> None:
    """Write ``v`` in the native VVOL format (little-endian, D fastest)."""
    if isinstance(v, Volume):
        dtype_code = _DTYPE_INTENSITY
        payload = v.data.astype("<f4", copy=False)
    elif isinstance(v, LabelVolume):
        dtype_code = _DTYPE_LABEL
        if int(v.data.max()) > np.iinfo(np.uint16).max:
            raise ShapeError(
                f"label {int(v.data.max())} exceeds the 16-bit on-disk label type"
            )
        payload = v.data.astype("<u2")
    else:
        raise TypeError(f"cannot save object of type {type(v).__name__}")
    header = VVOL_MAGIC + struct.pack(
        "<III I B fff".replace(" ", ""),
        3,
        v.dims[0],
        v.dims[1],
        v.dims[2],
        dtype_code,
        *v.spacing,
    )
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload.tobytes())
    except OSError as exc:
        raise OSError(f"failed to write volume to {path!r}: {exc}") from exc


def load_volume(path):
    """Load a VVOL or NIfTI-1 file, returning a Volume or LabelVolume."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise OSError(f"failed to read volume from {path!r}: {exc}") from exc
    if blob[: len(VVOL_MAGIC)] == VVOL_MAGIC:
        return _parse_vvol(blob, path)
    if len(blob) >= 348:
        return _parse_nifti(blob, path)
    raise FormatError(f"{path!r}: not a VVOL or NIfTI-1 file")


def _parse_vvol(blob, path):
    header_len = len(VVOL_MAGIC) + struct.calcsize("<IIIIBfff")
    if len(blob) < header_len:
        raise FormatError(f"{path!r}: VVOL header truncated")
    ndim, h, w, d, dtype_code, sx, sy, sz = struct.unpack_from(
        "<IIIIBfff", blob, len(VVOL_MAGIC)
    )
    if ndim != 3:
        raise FormatError(f"{path!r}: VVOL ndim must be 3, got {ndim}")
    if dtype_code not in (_DTYPE_INTENSITY, _DTYPE_LABEL):
        raise FormatError(f"{path!r}: unknown VVOL dtype code {dtype_code}")
    if h <= 0 or w <= 0 or d <= 0:
        raise FormatError(f"{path!r}: VVOL dims must be positive, got {(h, w, d)}")
    count = h * w * d
    itemsize = 4 if dtype_code == _DTYPE_INTENSITY else 2
    payload = blob[header_len:]
    if len(payload) < count * itemsize:
        raise TruncatedFileError(
            f"{path!r}: header declares {count} voxels "
            f"but payload holds {len(payload) // itemsize}"
        )
    if dtype_code == _DTYPE_INTENSITY:
        arr = np.frombuffer(payload, dtype="<f4", count=count).reshape(h, w, d)
        return Volume(arr, (sx, sy, sz))
    arr = np.frombuffer(payload, dtype="<u2", count=count).reshape(h, w, d)
    return LabelVolume(arr.astype(np.int32), spacing=(sx, sy, sz))


# NIfTI-1 datatype codes accepted by the minimal reader.
_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32}


def _parse_nifti(blob, path):
    if blob[344:348] != NIFTI_MAGIC:
        raise FormatError(f"{path!r}: not a VVOL or single-file NIfTI-1 volume")
    (sizeof_hdr,) = struct.unpack_from("<i", blob, 0)
    endian = "<"
    if sizeof_hdr != 348:
        (sizeof_hdr,) = struct.unpack_from(">i", blob, 0)
        endian = ">"
        if sizeof_hdr != 348:
            raise FormatError(f"{path!r}: corrupt NIfTI-1 header")
    dim = struct.unpack_from(endian + "8h", blob, 40)
    (datatype, bitpix) = struct.unpack_from(endian + "2h", blob, 70)
    pixdim = struct.unpack_from(endian + "8f", blob, 76)
    (vox_offset,) = struct.unpack_from(endian + "f", blob, 108)
    ndim = dim[0]
    if ndim < 3 or ndim > 7:
        raise FormatError(f"{path!r}: NIfTI dim[0]={ndim} out of range")
    if any(dim[1 + i] <= 0 for i in range(3)):
        raise FormatError(f"{path!r}: non-positive NIfTI spatial dims {dim[1:4]}")
    if any(dim[1 + i] != 1 for i in range(3, ndim)):
        raise UnsupportedDtypeError(
            f"{path!r}: multi-frame NIfTI volumes are not supported"
        )
    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedDtypeError(
            f"{path!r}: NIfTI datatype {datatype} not supported "
            f"(accepted: uint8=2, int16=4, float32=16)"
        )
    np_dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(endian)
    if bitpix != np_dtype.itemsize * 8:
        raise FormatError(f"{path!r}: bitpix {bitpix} inconsistent with datatype")
    offset = int(vox_offset)
    if offset < 348:
        raise FormatError(f"{path!r}: vox_offset {vox_offset} below header size")
    h, w, d = dim[1], dim[2], dim[3]
    count = h * w * d
    payload = blob[offset:]
    if len(payload) < count * np_dtype.itemsize:
        raise TruncatedFileError(
            f"{path!r}: NIfTI payload holds fewer than {count} voxels"
        )
    flat = np.frombuffer(payload, dtype=np_dtype, count=count)
    # NIfTI stores the first dimension fastest; our layout wants D fastest.
    arr = np.ascontiguousarray(flat.reshape(h, w, d, order="F"))
    spacing = tuple(abs(p) if p != 0 else 1.0 for p in pixdim[1:4])
    if datatype == 2:
        return LabelVolume(arr.astype(np.int32), spacing=spacing)
    return Volume(arr.astype(np.float32), spacing)


def zscore_normalize(v: Volume) -> Volume:
    """Standardize intensities to zero mean and unit variance over all voxels."""
    if v.data.size < 2:
        raise DegenerateInputError("z-score needs at least 2 voxels")
    mean = float(v.data.mean(dtype=np.float64))
    var = float(np.mean((v.data.astype(np.float64) - mean) ** 2))
    if var == 0.0:
        raise DegenerateInputError("z-score undefined for a constant volume")
    std = var**0.5
    out = ((v.data.astype(np.float64) - mean) / std).astype(np.float32)
    return Volume(out, v.spacing)


def one_hot(y: LabelVolume):
    """Encode labels as a (1, L, D, H, W) indicator tensor."""
    from .tensor import Tensor

    h, w, d = y.dims
    lab = y.data.transpose(2, 0, 1)  # (D, H, W)
    enc = np.zeros((1, y.num_classes, d, h, w), dtype=np.float32)
    dz, hz, wz = np.indices((d, h, w), sparse=True)
    enc[0, lab, dz, hz, wz] = 1.0
    return Tensor(enc)


def volume_to_tensor(v: Volume):
    """View an intensity volume as a (1, 1, D, H, W) network input tensor."""
    from .tensor import Tensor

    return Tensor(np.ascontiguousarray(v.data.transpose(2, 0, 1))[None, None])


def labels_from_class_map(class_map, num_classes, spacing=(1.0, 1.0, 1.0)) -> LabelVolume:
    """Convert a (D, H, W) class-index array back to a LabelVolume."""
    return LabelVolume(
        np.ascontiguousarray(class_map.transpose(1, 2, 0)).astype(np.int32),
        num_classes=num_classes,
        spacing=spacing,
    )
