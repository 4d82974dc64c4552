"""Geometric transforms on continuous voxel coordinates.

Conventions: coordinates are continuous voxel indices (not mm). Warping is
backward: the output voxel at p samples the source at T(p), so a transform
maps output-grid points to source-grid points. A SymmetryTransform maps each
voxel to the location of its mirror in the same image (reflection first,
then the correction: deformation displacement, then affine).

Displacement fields live on the fixed grid in voxel units, stored as
(3, X, Y, Z) float32. Diffeomorphic fields come from stationary velocities
via scaling and squaring (exponentiate_velocity).
"""

from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import GridMismatchError, SingularTransformError

_DET_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class AffineTransform:
    """p -> linear @ p + translation, in voxel coordinates."""

    linear: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        lin = np.asarray(self.linear, dtype=np.float64).reshape(3, 3)
        tr = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(lin)) and np.all(np.isfinite(tr))):
            raise ValueError("affine entries must be finite")
        if abs(np.linalg.det(lin)) <= _DET_EPS:
            raise SingularTransformError(f"linear part is singular (det={np.linalg.det(lin):g})")
        lin.flags.writeable = False
        tr.flags.writeable = False
        object.__setattr__(self, "linear", lin)
        object.__setattr__(self, "translation", tr)

    @staticmethod
    def identity():
        return AffineTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def translate(t):
        return AffineTransform(np.eye(3), t)

    def map_points(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.linear.T + self.translation

    def as_matrix(self):
        """3x4 matrix [linear | translation]."""
        return np.hstack([self.linear, self.translation[:, None]])


def apply_affine(transform, point):
    """Transform one (3,) point or an (N, 3) stack of points."""
    pts = np.asarray(point, dtype=np.float64)
    if pts.ndim == 1:
        return transform.map_points(pts[None])[0]
    return transform.map_points(pts)


def compose_affine(outer, inner):
    """Affine C with C(p) = outer(inner(p)) for all p."""
    return AffineTransform(outer.linear @ inner.linear,
                           outer.linear @ inner.translation + outer.translation)


def invert_affine(transform):
    """Affine B with compose_affine(transform, B) = identity."""
    try:
        inv = np.linalg.inv(transform.linear)
    except np.linalg.LinAlgError as exc:
        raise SingularTransformError(str(exc)) from exc
    return AffineTransform(inv, -inv @ transform.translation)


@dataclass(frozen=True, eq=False)
class DeformationField:
    """Per-voxel displacement vectors u; the map is p -> p + u(p)."""

    displacement: np.ndarray  # (3, X, Y, Z) voxel units

    def __post_init__(self):
        disp = np.ascontiguousarray(np.asarray(self.displacement), dtype=np.float32)
        if disp.ndim != 4 or disp.shape[0] != 3:
            raise ValueError(f"displacement must have shape (3, X, Y, Z), got {disp.shape}")
        if not np.all(np.isfinite(disp)):
            raise ValueError("displacements must all be finite")
        disp.flags.writeable = False
        object.__setattr__(self, "displacement", disp)

    @property
    def dims(self):
        return self.displacement.shape[1:]

    @staticmethod
    def zero(dims):
        return DeformationField(np.zeros((3,) + tuple(dims), dtype=np.float32))

    def sample(self, pts):
        """Trilinear displacement at (N, 3) continuous points; zero outside."""
        pts = np.asarray(pts, dtype=np.float64)
        coords = pts.T
        out = np.empty_like(pts)
        for axis in range(3):
            out[:, axis] = map_coordinates(self.displacement[axis], coords, order=1,
                                           mode="grid-constant", cval=0.0, prefilter=False)
        return out

    def map_points(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        return pts + self.sample(pts)

    def map_grid(self):
        """Mapped coordinates of every grid voxel, shape (3, X, Y, Z)."""
        return _identity_grid(self.dims) + self.displacement.astype(np.float64)


@dataclass(frozen=True, eq=False)
class SymmetryTransform:
    """Mirror-voxel map: reflection along one axis, then a correction.

    T(p) = affine(q + u(q)) with q = reflect(p); u is optional. The extent is
    the voxel count along the reflection axis, so reflect flips index i to
    extent - 1 - i.
    """

    extent: int
    axis: int = 0
    affine: AffineTransform = None
    field: DeformationField = None
    mode: str = "reflection"

    def __post_init__(self):
        if self.extent < 1:
            raise ValueError("extent must be a positive voxel count")
        if self.axis not in (0, 1, 2):
            raise ValueError("axis must be 0, 1, or 2")
        if self.affine is None:
            object.__setattr__(self, "affine", AffineTransform.identity())

    def reflect_points(self, pts):
        pts = np.asarray(pts, dtype=np.float64).copy()
        pts[:, self.axis] = (self.extent - 1) - pts[:, self.axis]
        return pts

    def map_points(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        single = pts.ndim == 1
        q = self.reflect_points(np.atleast_2d(pts))
        if self.field is not None:
            q = q + self.field.sample(q)
        q = self.affine.map_points(q)
        return q[0] if single else q


def apply_symmetry(transform, point):
    """Mirror location of one point or an (N, 3) stack."""
    return transform.map_points(np.asarray(point, dtype=np.float64))


def _identity_grid(dims):
    grids = np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims], indexing="ij")
    return np.stack(grids)


def _grid_coords(transform, dims):
    """Source coordinates for every output voxel, shape (3, X, Y, Z)."""
    if isinstance(transform, AffineTransform):
        grid = _identity_grid(dims)
        lin = transform.linear
        flat = grid.reshape(3, -1)
        return (lin @ flat + transform.translation[:, None]).reshape((3,) + tuple(dims))
    if isinstance(transform, DeformationField):
        if transform.dims != tuple(dims):
            raise GridMismatchError(f"field grid {transform.dims} != volume grid {tuple(dims)}")
        return transform.map_grid()
    if isinstance(transform, SymmetryTransform):
        grid = _identity_grid(dims)
        grid[transform.axis] = (transform.extent - 1) - grid[transform.axis]
        if transform.field is not None:
            # reflected grid points are still integer grid points: sampling the
            # displacement there is an exact (flipped) lookup
            if transform.field.dims != tuple(dims):
                raise GridMismatchError(
                    f"field grid {transform.field.dims} != volume grid {tuple(dims)}")
            disp = np.flip(transform.field.displacement, axis=1 + transform.axis)
            grid = grid + disp.astype(np.float64)
        lin = transform.affine.linear
        flat = grid.reshape(3, -1)
        return (lin @ flat + transform.affine.translation[:, None]).reshape((3,) + tuple(dims))
    # anything exposing map_points (e.g. analytic phantom mirror maps)
    grid = _identity_grid(dims).reshape(3, -1).T
    return transform.map_points(grid).T.reshape((3,) + tuple(dims))


def warp(vol, transform):
    """Backward-warp a volume: output(p) = vol(T(p)), trilinear, 0 outside."""
    coords = _grid_coords(transform, vol.dims)
    out = map_coordinates(vol.data, coords, order=1, mode="grid-constant",
                          cval=0.0, prefilter=False)
    return vol.with_data(out)


def resample_displacements(field_or_array, pts):
    """Sample a (3, X, Y, Z) displacement array at (N, 3) points."""
    if isinstance(field_or_array, DeformationField):
        return field_or_array.sample(pts)
    return DeformationField(field_or_array).sample(pts)


def compose_displacements(outer, inner):
    """Displacement of (id + outer) o (id + inner) on the shared grid."""
    if outer.shape != inner.shape:
        raise GridMismatchError(f"field grids differ: {outer.shape} vs {inner.shape}")
    dims = outer.shape[1:]
    coords = _identity_grid(dims) + inner.astype(np.float64)
    out = np.empty_like(outer)
    for axis in range(3):
        out[axis] = map_coordinates(outer[axis], coords, order=1, mode="grid-constant",
                                    cval=0.0, prefilter=False)
    return inner + out


def exponentiate_velocity(velocity, steps=6):
    """Integrate a stationary velocity field for unit time.

    Scaling and squaring: halve the field `steps` times, then square the
    resulting small displacement `steps` times. For small velocities the
    result is invertible (positive Jacobian determinant); exp(-v) is the
    approximate inverse of exp(v).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    disp = velocity.displacement * np.float32(1.0 / (1 << steps))
    for _ in range(steps):
        disp = compose_displacements(disp, disp)
    return DeformationField(disp)


def jacobian_determinant(field):
    """Discrete Jacobian determinant of p -> p + u(p) at every voxel.

    Central differences in the interior, one-sided at the faces. Strictly
    positive values indicate a locally invertible (orientation-preserving)
    map on the grid.
    """
    u = field.displacement.astype(np.float64)
    jac = np.empty((3, 3) + field.dims)
    for comp in range(3):
        grads = np.gradient(u[comp], axis=(0, 1, 2))
        for axis in range(3):
            jac[comp, axis] = grads[axis]
        jac[comp, comp] += 1.0
    a = jac
    return (a[0, 0] * (a[1, 1] * a[2, 2] - a[1, 2] * a[2, 1])
            - a[0, 1] * (a[1, 0] * a[2, 2] - a[1, 2] * a[2, 0])
            + a[0, 2] * (a[1, 0] * a[2, 1] - a[1, 1] * a[2, 0]))


# ---------------------------------------------------------------------------
# Persistence: affine as 12-number text, field as a tagged binary container
# ---------------------------------------------------------------------------

_FIELD_MAGIC = b"RFLD\x01\x00"


def save_affine(transform, path):
    """Write the 3x4 matrix [linear | translation] as 12 numbers, row-major."""
    mat = transform.as_matrix()
    lines = [" ".join(f"{v:.17g}" for v in row) for row in mat]
    Path(path).write_text("\n".join(lines) + "\n")


def load_affine(path):
    values = [float(tok) for tok in Path(path).read_text().split()]
    if len(values) != 12:
        raise ValueError(f"{path}: expected 12 numbers, found {len(values)}")
    mat = np.array(values, dtype=np.float64).reshape(3, 4)
    return AffineTransform(mat[:, :3], mat[:, 3])


def save_field(field, path):
    """Write a displacement field: magic, uint32 dims, then three float32
    blocks (x, y, z components) each in C order over (X, Y, Z)."""
    with open(path, "wb") as fh:
        fh.write(_FIELD_MAGIC)
        fh.write(np.asarray(field.dims, dtype="<u4").tobytes())
        for axis in range(3):
            fh.write(field.displacement[axis].astype("<f4", copy=False).tobytes())


def load_field(path):
    raw = Path(path).read_bytes()
    if raw[:6] != _FIELD_MAGIC:
        raise ValueError(f"{path}: not a displacement-field file")
    dims = tuple(int(d) for d in np.frombuffer(raw, dtype="<u4", count=3, offset=6))
    count = int(np.prod(dims))
    disp = np.frombuffer(raw, dtype="<f4", count=3 * count, offset=18)
    return DeformationField(disp.reshape((3,) + dims))


def save_symmetry_transform(transform, out_dir):
    """Persist a SymmetryTransform as a directory (meta + affine + field)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = [
        f'axis = {transform.axis}',
        f'extent = {transform.extent}',
        f'mode = "{transform.mode}"',
        f'has_field = {"true" if transform.field is not None else "false"}',
    ]
    (out / "meta.toml").write_text("\n".join(meta) + "\n")
    save_affine(transform.affine, out / "affine.txt")
    if transform.field is not None:
        save_field(transform.field, out / "field.rfd")


def load_symmetry_transform(in_dir):
    path = Path(in_dir)
    meta = tomllib.loads((path / "meta.toml").read_text())
    affine = load_affine(path / "affine.txt")
    field = load_field(path / "field.rfd") if meta.get("has_field") else None
    return SymmetryTransform(extent=int(meta["extent"]), axis=int(meta["axis"]),
                             affine=affine, field=field, mode=str(meta.get("mode", "reflection")))
