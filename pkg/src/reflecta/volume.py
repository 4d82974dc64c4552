"""3D volume type, NIfTI-1 I/O, axis reflection, standardization, sampling.

A volume is a scalar 3D image with voxel spacing and an orientation tag naming
the left-right index axis. Data is float32 in memory, laid out C-contiguously
with axes (x, y, z): linear index = (x * Y + y) * Z + z. All statistics and
interpolation weights accumulate in float64.

Volumes are immutable after construction; every operation returns a new one.
"""

import gzip
from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatchError, NiftiLoadError, NiftiWriteError, StandardizationError

_AXIS_INDEX = {"x": 0, "y": 1, "z": 2}


@dataclass(frozen=True, eq=False)
class Volume3D:
    """One scalar image channel with geometry metadata.

    Parameters
    ----------
    data : array, shape (X, Y, Z)
        Intensities; converted to float32 and frozen.
    spacing : 3 floats
        Voxel size in mm per index axis, all > 0.
    orientation : {"x", "y", "z"}
        Which index axis runs left-right (reflection axis).
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    orientation: str = "x"

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.data), dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"volume dims must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume intensities must all be finite")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValueError(f"spacing components must be > 0, got {spacing}")
        if self.orientation not in _AXIS_INDEX:
            raise ValueError(f"orientation must be one of x/y/z, got {self.orientation!r}")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self):
        return self.data.shape

    @property
    def lr_axis(self):
        """Index of the left-right axis named by the orientation tag."""
        return _AXIS_INDEX[self.orientation]

    def with_data(self, data):
        """New volume with the same geometry and different intensities."""
        return Volume3D(data, self.spacing, self.orientation)

    def same_grid(self, other):
        return self.dims == other.dims and self.spacing == other.spacing


@dataclass(frozen=True, eq=False)
class MultiModalImage:
    """R co-registered channels plus optional {0,1} labels and brain mask."""

    channels: tuple
    channel_names: tuple
    labels: Volume3D = None
    brain_mask: Volume3D = None
    subject_id: str = ""
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        channels = tuple(self.channels)
        names = tuple(str(n) for n in self.channel_names)
        if len(channels) < 1:
            raise ValueError("need at least one channel")
        if len(names) != len(channels):
            raise ValueError("channel_names must match channel count")
        ref = channels[0]
        for vol in channels[1:]:
            if not ref.same_grid(vol):
                raise GridMismatchError("all channels must share dims and spacing")
        for name, vol in (("labels", self.labels), ("brain_mask", self.brain_mask)):
            if vol is None:
                continue
            if not ref.same_grid(vol):
                raise GridMismatchError(f"{name} must share the channel grid")
            values = np.unique(vol.data)
            if not np.all(np.isin(values, (0.0, 1.0))):
                raise ValueError(f"{name} must be binary, found values {values[:5]}")
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "channel_names", names)

    @property
    def n_channels(self):
        return len(self.channels)

    @property
    def dims(self):
        return self.channels[0].dims

    def channel(self, name):
        try:
            return self.channels[self.channel_names.index(name)]
        except ValueError:
            raise KeyError(f"no channel named {name!r}; have {self.channel_names}") from None


def reflect_x(vol):
    """Flip the volume along its left-right axis.

    Output voxel (x, y, z) equals input voxel (X-1-x, y, z) when the
    left-right axis is the first one; dims and spacing are unchanged.
    An involution: reflect_x(reflect_x(v)) == v.
    """
    return vol.with_data(np.flip(vol.data, axis=vol.lr_axis))


def standardize(vol, mask=None):
    """Shift/scale so the region mean is 0 and its standard deviation is 1.

    The region is `mask > 0` when a mask is given, otherwise the nonzero
    voxels (skull-stripped images have zero background). Voxels outside the
    region are set to 0. Statistics use float64 and the population divisor.

    Raises
    ------
    StandardizationError
        If the region is empty or has zero variance.
    """
    if mask is not None:
        if not vol.same_grid(mask):
            raise GridMismatchError("mask must share the volume grid")
        region = mask.data > 0
    else:
        region = vol.data != 0
    values = vol.data[region].astype(np.float64)
    if values.size == 0:
        raise StandardizationError("standardization region is empty")
    mean = values.mean()
    std = values.std()
    if std < 1e-12:
        raise StandardizationError(f"standardization region has zero variance (mean={mean:g})")
    out = np.zeros(vol.dims, dtype=np.float32)
    out[region] = ((values - mean) / std).astype(np.float32)
    return vol.with_data(out)


def standardize_channels(image):
    """Standardize every channel of a multi-modal image against its brain mask."""
    channels = tuple(standardize(c, image.brain_mask) for c in image.channels)
    return MultiModalImage(channels, image.channel_names, image.labels, image.brain_mask,
                           image.subject_id, dict(image.extras))


def sample_trilinear(vol, points):
    """Trilinear interpolation at continuous voxel coordinates.

    Accepts one (3,) point or an (N, 3) array; returns a scalar or (N,)
    float64 array. Out-of-bounds neighbors contribute 0 (zero padding), so a
    point fully outside the volume samples to 0. Integer in-bounds coordinates
    return the stored voxel value exactly.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[1] != 3:
        raise ValueError(f"points must have 3 components, got shape {pts.shape}")
    data = vol.data
    dims = vol.dims
    base = np.floor(pts).astype(np.int64)
    frac = pts - base
    acc = np.zeros(len(pts), dtype=np.float64)
    for corner in range(8):
        offs = ((corner >> 2) & 1, (corner >> 1) & 1, corner & 1)
        idx = base + offs
        weight = np.ones(len(pts), dtype=np.float64)
        for axis in range(3):
            weight *= frac[:, axis] if offs[axis] else 1.0 - frac[:, axis]
        inside = np.ones(len(pts), dtype=bool)
        for axis in range(3):
            inside &= (idx[:, axis] >= 0) & (idx[:, axis] < dims[axis])
        clipped = np.clip(idx, 0, np.asarray(dims) - 1)
        values = data[clipped[:, 0], clipped[:, 1], clipped[:, 2]].astype(np.float64)
        acc += weight * np.where(inside, values, 0.0)
    return acc[0] if single else acc


# ---------------------------------------------------------------------------
# NIfTI-1 single-file I/O (minimal subset: 3D, axis-aligned, 4 dtypes)
# ---------------------------------------------------------------------------

_NIFTI_HEADER = np.dtype([
    ("sizeof_hdr", "<i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "<i4"),
    ("session_error", "<i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "<i2", (8,)),
    ("intent_p1", "<f4"),
    ("intent_p2", "<f4"),
    ("intent_p3", "<f4"),
    ("intent_code", "<i2"),
    ("datatype", "<i2"),
    ("bitpix", "<i2"),
    ("slice_start", "<i2"),
    ("pixdim", "<f4", (8,)),
    ("vox_offset", "<f4"),
    ("scl_slope", "<f4"),
    ("scl_inter", "<f4"),
    ("slice_end", "<i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "<f4"),
    ("cal_min", "<f4"),
    ("slice_duration", "<f4"),
    ("toffset", "<f4"),
    ("glmax", "<i4"),
    ("glmin", "<i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "<i2"),
    ("sform_code", "<i2"),
    ("quatern_b", "<f4"),
    ("quatern_c", "<f4"),
    ("quatern_d", "<f4"),
    ("qoffset_x", "<f4"),
    ("qoffset_y", "<f4"),
    ("qoffset_z", "<f4"),
    ("srow_x", "<f4", (4,)),
    ("srow_y", "<f4", (4,)),
    ("srow_z", "<f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
])
assert _NIFTI_HEADER.itemsize == 348

_DTYPE_CODES = {2: np.uint8, 4: np.int16, 16: np.float32, 64: np.float64}
_CODE_FOR_DTYPE = {np.dtype(d).name: c for c, d in _DTYPE_CODES.items()}


def _read_raw(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    try:
        with opener(path, "rb") as fh:
            return fh.read()
    except (OSError, EOFError) as exc:
        raise NiftiLoadError(f"cannot read {path}: {exc}") from exc


def _quaternion_matrix(hdr):
    b = float(hdr["quatern_b"])
    c = float(hdr["quatern_c"])
    d = float(hdr["quatern_d"])
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(max(a2, 0.0))
    rot = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ])
    qfac = -1.0 if float(hdr["pixdim"][0]) < 0 else 1.0
    scale = np.array([hdr["pixdim"][1], hdr["pixdim"][2], qfac * hdr["pixdim"][3]], dtype=np.float64)
    return rot * scale


def _lr_axis_from_matrix(mat, path):
    """Left-right index axis from a voxel->world 3x3 matrix; reject oblique."""
    mat = np.asarray(mat, dtype=np.float64)
    scales = np.abs(mat).max(axis=0)
    if np.any(scales <= 0):
        return 0
    dominant = np.abs(mat).argmax(axis=1)
    aligned = sorted(dominant) == [0, 1, 2]
    if aligned:
        off_axis = np.abs(mat).sum() - np.abs(mat[dominant, range(3)]).sum()
        aligned = off_axis <= 1e-4 * np.abs(mat).sum()
    if not aligned:
        raise NiftiLoadError(f"{path}: orientation matrix is not axis-aligned; resampling is unsupported")
    # world axis 0 is left-right; find the voxel axis that maps onto it
    return int(np.abs(mat[0, :]).argmax())


def load_nifti(path):
    """Load a NIfTI-1 single file (.nii or .nii.gz) as a Volume3D.

    Supported subset: 3D images, on-disk dtypes uint8/int16/float32/float64
    (converted to float32), axis-aligned orientation. scl_slope/scl_inter
    scaling is applied when present.
    """
    raw = _read_raw(path)
    if len(raw) < 352:
        raise NiftiLoadError(f"{path}: file shorter than a NIfTI-1 header")
    hdr = np.frombuffer(raw[:348], dtype=_NIFTI_HEADER)[0]
    byteswap = False
    if int(hdr["sizeof_hdr"]) != 348:
        hdr = np.frombuffer(raw[:348], dtype=_NIFTI_HEADER.newbyteorder())[0]
        byteswap = True
        if int(hdr["sizeof_hdr"]) != 348:
            raise NiftiLoadError(f"{path}: bad sizeof_hdr, not a NIfTI-1 file")
    magic = bytes(hdr["magic"]).rstrip(b"\x00")
    if magic != b"n+1":
        raise NiftiLoadError(f"{path}: unsupported magic {magic!r} (need single-file n+1)")
    ndim = int(hdr["dim"][0])
    dims = tuple(int(d) for d in hdr["dim"][1:1 + max(ndim, 0)])
    if ndim != 3:
        # trailing singleton dims are common and harmless
        if ndim > 3 and all(d == 1 for d in dims[3:]):
            dims = dims[:3]
        else:
            raise NiftiLoadError(f"{path}: expected a 3D image, header declares dim={ndim} {dims}")
    if any(d < 1 for d in dims):
        raise NiftiLoadError(f"{path}: non-positive dims {dims}")
    code = int(hdr["datatype"])
    if code not in _DTYPE_CODES:
        raise NiftiLoadError(f"{path}: unsupported datatype code {code} "
                             f"(supported: uint8=2, int16=4, float32=16, float64=64)")
    disk_dtype = np.dtype(_DTYPE_CODES[code])
    if byteswap:
        disk_dtype = disk_dtype.newbyteorder()
    spacing = tuple(float(p) for p in hdr["pixdim"][1:4])
    if any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise NiftiLoadError(f"{path}: non-positive pixdim {spacing}")
    offset = int(hdr["vox_offset"])
    count = dims[0] * dims[1] * dims[2]
    expected = offset + count * disk_dtype.itemsize
    if len(raw) < expected:
        raise NiftiLoadError(f"{path}: truncated data ({len(raw)} bytes, need {expected})")
    flat = np.frombuffer(raw, dtype=disk_dtype, count=count, offset=offset)
    data = flat.reshape(dims, order="F").astype(np.float32)
    slope = float(hdr["scl_slope"])
    inter = float(hdr["scl_inter"])
    if np.isfinite(slope) and slope not in (0.0, 1.0) or (np.isfinite(inter) and inter != 0.0):
        if not np.isfinite(slope) or slope == 0.0:
            slope = 1.0
        data = (data * np.float32(slope) + np.float32(inter)).astype(np.float32)
    if int(hdr["sform_code"]) > 0:
        mat = np.vstack([hdr["srow_x"][:3], hdr["srow_y"][:3], hdr["srow_z"][:3]])
        lr = _lr_axis_from_matrix(mat, path)
    elif int(hdr["qform_code"]) > 0:
        lr = _lr_axis_from_matrix(_quaternion_matrix(hdr), path)
    else:
        lr = 0
    orientation = "xyz"[lr]
    return Volume3D(data, spacing, orientation)


def save_nifti(vol, path, dtype="float32"):
    """Write a Volume3D as a NIfTI-1 single file; gzip when path ends in .gz.

    dtype selects the on-disk type (uint8/int16/float32/float64). The default
    float32 round-trips the in-memory array bit-exactly; integer dtypes
    require integer-valued data within range.
    """
    disk_dtype = np.dtype(dtype)
    name = disk_dtype.name
    if name not in _CODE_FOR_DTYPE:
        raise NiftiWriteError(f"unsupported on-disk dtype {dtype!r}")
    hdr = np.zeros((), dtype=_NIFTI_HEADER)
    hdr["sizeof_hdr"] = 348
    hdr["regular"] = b"r"
    hdr["dim"][0] = 3
    hdr["dim"][1:4] = vol.dims
    hdr["dim"][4:] = 1
    hdr["datatype"] = _CODE_FOR_DTYPE[name]
    hdr["bitpix"] = disk_dtype.itemsize * 8
    hdr["pixdim"][0] = 1.0
    hdr["pixdim"][1:4] = vol.spacing
    hdr["vox_offset"] = 352
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["sform_code"] = 1
    hdr["qform_code"] = 0
    rows = np.zeros((3, 4), dtype=np.float64)
    for world, axis in enumerate(_sform_axes(vol)):
        rows[world, axis] = vol.spacing[axis]
    hdr["srow_x"] = rows[0]
    hdr["srow_y"] = rows[1]
    hdr["srow_z"] = rows[2]
    hdr["magic"] = b"n+1"
    payload = vol.data.astype(disk_dtype, copy=False)
    opener = gzip.open if str(path).endswith(".gz") else open
    try:
        with opener(path, "wb") as fh:
            fh.write(hdr.tobytes())
            fh.write(b"\x00" * 4)
            fh.write(payload.tobytes(order="F"))
    except OSError as exc:
        raise NiftiWriteError(f"cannot write {path}: {exc}") from exc


def _sform_axes(vol):
    """Map world axis -> voxel axis so the lr voxel axis lands on world x."""
    lr = vol.lr_axis
    others = [a for a in range(3) if a != lr]
    return [lr, others[0], others[1]]
