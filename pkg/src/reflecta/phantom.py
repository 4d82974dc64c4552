"""Synthetic quasi-symmetric brain phantoms with known mirror maps.

A phantom is an ellipsoidal "brain" filled with smooth multi-octave texture,
exactly mirror-symmetric about the mid-plane of the left-right axis, plus
symmetric bright blob pairs that imitate lesion intensity without being
lesions. Asymmetry is introduced by flowing the image along an analytic
compact-support velocity field confined to one hemisphere; the exact mirror
map (reflect conjugated by the flow) is returned alongside, so registration
and symmetry-feature stages can be scored against ground truth. Lesions are
blob-shaped intensity offsets confined to the other hemisphere, inserted
after the warp so labels stay exact.

The velocity field is analytic (polynomial bumps) and integrated pointwise
with RK4, which keeps the ground-truth map an involution to ~1e-9 instead of
the ~1e-3 a grid-sampled composition would give.
"""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt, gaussian_filter, map_coordinates

from ._seeds import substream
from .errors import SamplingError
from .transform import SymmetryTransform
from .volume import MultiModalImage, Volume3D


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters for one synthetic subject."""

    dims: tuple = (64, 64, 48)
    n_modalities: int = 2
    texture_sigmas: tuple = (6.0, 3.0, 1.8)
    texture_amps: tuple = (1.0, 0.6, 0.22)
    base_intensity: float = 8.0
    blob_pairs: int = 3
    blob_radius_range: tuple = (2.5, 4.5)
    blob_amplitude: float = 2.2
    lesion_count: int = 2
    lesion_radius_range: tuple = (5.0, 7.5)
    lesion_offsets: tuple = (2.5, 1.5)
    lesion_rim: float = 2.0
    asymmetry_magnitude: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 32:
            raise ValueError(f"dims must be >= 32 per axis, got {self.dims}")
        if self.n_modalities < 1:
            raise ValueError("need at least one modality")
        if self.asymmetry_magnitude < 0:
            raise ValueError("asymmetry magnitude must be >= 0")
        lo, hi = self.lesion_radius_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad lesion radius range {self.lesion_radius_range}")
        if hi + self.lesion_rim + 2 > self.dims[0] / 2:
            raise ValueError("lesion radii do not fit inside one hemisphere")


def _brain_geometry(dims):
    center = (np.asarray(dims, dtype=np.float64) - 1.0) / 2.0
    radii = np.array([0.42 * dims[0], 0.44 * dims[1], 0.42 * dims[2]])
    return center, radii


def _radial_sq(dims, center, radii):
    grids = np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims], indexing="ij")
    rho2 = np.zeros(dims, dtype=np.float64)
    for axis in range(3):
        rho2 += ((grids[axis] - center[axis]) / radii[axis]) ** 2
    return rho2


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def gen_symmetric_brain(spec):
    """Generate an exactly mirror-symmetric multi-modal brain.

    Returns (image, mirror_map) where the image carries a brain mask and the
    map is the pure reflection about the mid-plane of the left-right axis.
    Symmetry is exact: I(x, y, z) == I(X-1-x, y, z) bitwise over the brain.
    """
    dims = tuple(spec.dims)
    center, radii = _brain_geometry(dims)
    rho2 = _radial_sq(dims, center, radii)
    mask = rho2 <= 1.0
    # soft rim keeps the brain boundary smooth for intensity-driven registration
    envelope = _smoothstep((1.0 - np.sqrt(rho2)) / 0.12)

    rng = substream(spec.seed, "phantom", "texture")
    channels = []
    for ch in range(spec.n_modalities):
        raw = np.full(dims, spec.base_intensity, dtype=np.float64)
        for sigma, amp in zip(spec.texture_sigmas, spec.texture_amps):
            noise = gaussian_filter(rng.normal(size=dims), sigma)
            noise /= max(noise[mask].std(), 1e-12)
            raw += amp * noise
        raw += _confuser_blobs(spec, dims, center, radii, rng, ch)
        # averaging with the flip makes the channel exactly symmetric
        sym = 0.5 * (raw + raw[::-1])
        data = (sym * envelope * mask).astype(np.float32)
        channels.append(Volume3D(data))
    names = tuple(f"mod{ch}" for ch in range(spec.n_modalities))
    brain = Volume3D(mask.astype(np.float32))
    image = MultiModalImage(tuple(channels), names, labels=None, brain_mask=brain)
    return image, SymmetryTransform(extent=dims[0], mode="ground_truth")


def _confuser_blobs(spec, dims, center, radii, rng, channel):
    """Bright symmetric blob pairs that mimic lesion contrast on both sides."""
    out = np.zeros(dims, dtype=np.float64)
    if spec.blob_pairs <= 0:
        return out
    scale = spec.lesion_offsets[channel % len(spec.lesion_offsets)] / spec.lesion_offsets[0]
    grids = np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims], indexing="ij")
    for _ in range(spec.blob_pairs):
        radius = rng.uniform(*spec.blob_radius_range)
        # keep the blob inside the brain with margin; symmetrization mirrors it
        blob_center = _sample_interior_point(rng, center, radii, radius + 2.0, side=None)
        r2 = np.zeros(dims, dtype=np.float64)
        for axis in range(3):
            r2 += ((grids[axis] - blob_center[axis]) / radius) ** 2
        profile = np.clip(1.0 - r2, 0.0, None) ** 2
        # x2 because the later symmetrization halves one-sided content
        out += 2.0 * spec.blob_amplitude * scale * rng.uniform(0.8, 1.2) * profile
    return out


def _sample_interior_point(rng, center, radii, margin, side):
    """Point inside the brain ellipsoid shrunk by `margin` voxels.

    side: None for anywhere, "left" for low-x hemisphere, "right" for high-x;
    hemisphere choices also keep `margin` clear of the mid-plane.
    """
    shrunk = np.maximum(radii - margin, 1.0)
    for _ in range(10000):
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        rad = rng.uniform() ** (1 / 3)
        p = center + shrunk * rad * u
        if side == "left" and p[0] > center[0] - margin:
            continue
        if side == "right" and p[0] < center[0] + margin:
            continue
        return p
    raise SamplingError(f"cannot place a point with margin {margin} on side {side}")


class BumpVelocity:
    """Analytic compact-support velocity field: sum of polynomial bumps.

    v(p) = sum_i a_i * (1 - r_i(p)^32)_+^2 with ellipsoidal radial coordinates
    r_i. C1-smooth, exactly zero outside every bump's support ellipsoid; the
    high exponent gives a flat-topped profile so one bump covers most of a
    hemisphere at near-peak speed.
    """

    def __init__(self, centers, radii, vectors):
        self.centers = np.asarray(centers, dtype=np.float64)
        self.radii = np.asarray(radii, dtype=np.float64)
        self.vectors = np.asarray(vectors, dtype=np.float64)

    def __call__(self, pts):
        out = np.zeros_like(pts)
        for center, radii, vec in zip(self.centers, self.radii, self.vectors):
            r2 = np.zeros(len(pts))
            for axis in range(3):
                r2 += ((pts[:, axis] - center[axis]) / radii[axis]) ** 2
            r32 = r2 ** 16
            profile = np.clip(1.0 - r32, 0.0, None) ** 2
            out += profile[:, None] * vec
        return out

    def scale(self, factor):
        return BumpVelocity(self.centers, self.radii, self.vectors * factor)


class AnalyticMirrorMap:
    """Exact mirror map of a warped symmetric image: flow, reflect, flow back.

    T(p) = exp(-v)(reflect(exp(v)(p))). Because both flows integrate the same
    analytic velocity, T is an involution to integrator precision (~1e-9 for
    the default step count), far tighter than any grid-sampled composition.
    """

    def __init__(self, velocity, extent, axis=0, steps=16):
        self.velocity = velocity
        self.extent = int(extent)
        self.axis = int(axis)
        self.steps = int(steps)

    def _flow(self, pts, direction):
        pts = np.array(pts, dtype=np.float64)
        h = direction / self.steps
        for _ in range(self.steps):
            k1 = self.velocity(pts)
            k2 = self.velocity(pts + 0.5 * h * k1)
            k3 = self.velocity(pts + 0.5 * h * k2)
            k4 = self.velocity(pts + h * k3)
            pts = pts + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        return pts

    def map_points(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        single = pts.ndim == 1
        q = self._flow(np.atleast_2d(pts), +1.0)
        q[:, self.axis] = (self.extent - 1) - q[:, self.axis]
        q = self._flow(q, -1.0)
        return q[0] if single else q

    def warp_coordinates(self, dims):
        """Forward-flow coordinates of every grid voxel, shape (3, X, Y, Z)."""
        grids = np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims], indexing="ij")
        pts = np.stack([g.ravel() for g in grids], axis=1)
        return self._flow(pts, +1.0).T.reshape((3,) + tuple(dims))


def apply_asymmetry(image, magnitude, seed, n_bumps=3):
    """Warp one hemisphere by a smooth random diffeomorphism.

    Pulls the image through the unit-time flow of a compact-support velocity
    field confined to the high-x hemisphere interior, scaled so the maximum
    displacement is bounded by `magnitude` voxels. Returns the warped image
    and the exact composed mirror map. The field vanishes near the brain
    boundary, so the mask and any later labels remain valid; magnitude 0
    returns the image unchanged with the pure reflection map.
    """
    dims = image.dims
    if magnitude == 0:
        return image, SymmetryTransform(extent=dims[0], mode="ground_truth")
    center, radii = _brain_geometry(dims)
    rng = substream(seed, "phantom", "asymmetry")
    # work in brain-normalized coordinates (unit ball = brain ellipsoid):
    # a support ellipsoid with semi-axes (0.44, 0.78, 0.78) at (0.5, 0, 0)
    # stays strictly inside the unit ball, so the field is exactly zero on
    # and outside the brain boundary and never crosses the mid-plane
    big_center = np.array([0.5, 0.0, 0.0])
    big_support = np.array([0.44, 0.78, 0.78])
    centers = [center + big_center * radii]
    supports = [big_support * radii]
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    vectors = [direction]
    for _ in range(max(0, n_bumps - 1)):
        s = rng.uniform(0.20, 0.32) * np.array([1.0, 1.3, 1.3])
        room = np.maximum(big_support - s, 0.0)
        c = big_center + rng.uniform(-0.8, 0.8, size=3) * room
        centers.append(center + c * radii)
        supports.append(s * radii)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        vectors.append(direction * rng.uniform(0.25, 0.4))
    velocity = BumpVelocity(centers, supports, vectors)
    grids = np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims], indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    speeds = np.linalg.norm(velocity(pts), axis=1)
    peak = speeds.max()
    if peak <= 0:
        return image, SymmetryTransform(extent=dims[0], mode="ground_truth")
    velocity = velocity.scale(magnitude / peak)
    mirror = AnalyticMirrorMap(velocity, extent=dims[0])
    coords = mirror.warp_coordinates(dims)
    channels = tuple(
        ch.with_data(map_coordinates(ch.data, coords, order=1, mode="grid-constant",
                                     cval=0.0, prefilter=False))
        for ch in image.channels
    )
    warped = MultiModalImage(channels, image.channel_names, image.labels,
                             image.brain_mask, image.subject_id, dict(image.extras))
    return warped, mirror


def insert_lesion(image, spec, seed):
    """Add blob lesions to the low-x hemisphere and return (image, fraction).

    Each lesion is a smooth-rimmed intensity offset (per-modality amplitudes
    from the spec); the label volume marks voxels above half-maximum of the
    rim profile. Lesions never touch the mid-plane; if the spec cannot fit in
    one hemisphere, a SamplingError is raised.
    """
    dims = image.dims
    center, radii = _brain_geometry(dims)
    mask = image.brain_mask.data > 0
    depth = distance_transform_edt(mask)
    rng = substream(seed, "phantom", "lesion")
    grids = np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims], indexing="ij")
    labels = np.zeros(dims, dtype=bool)
    offsets = np.zeros((image.n_channels,) + dims, dtype=np.float64)
    for _ in range(spec.lesion_count):
        radius = rng.uniform(*spec.lesion_radius_range)
        margin = radius + spec.lesion_rim + 1.0
        candidates = (depth >= margin) & (grids[0] <= center[0] - margin)
        if not candidates.any():
            raise SamplingError(
                f"no room for a lesion of radius {radius:.1f} in one hemisphere")
        flat = np.flatnonzero(candidates)
        pick = flat[rng.integers(len(flat))]
        lesion_center = np.unravel_index(pick, dims)
        r = np.sqrt(sum((grids[a] - lesion_center[a]) ** 2 for a in range(3)))
        profile = _smoothstep((radius - r) / spec.lesion_rim)
        labels |= profile >= 0.5
        for ch in range(image.n_channels):
            amp = spec.lesion_offsets[ch % len(spec.lesion_offsets)]
            offsets[ch] += amp * profile
    channels = tuple(
        ch.with_data(ch.data + offsets[i].astype(np.float32) * mask)
        for i, ch in enumerate(image.channels)
    )
    label_vol = Volume3D(labels.astype(np.float32))
    out = MultiModalImage(channels, image.channel_names, label_vol,
                          image.brain_mask, image.subject_id, dict(image.extras))
    fraction = labels.sum() / max(mask.sum(), 1)
    return out, float(fraction)


def generate_subject(spec, subject_id=""):
    """Full phantom: symmetric brain -> hemisphere warp -> lesions.

    Returns (image, mirror_map, lesion_fraction); the image carries labels
    and brain mask, and the map is exact for the returned image.
    """
    image, mirror = gen_symmetric_brain(spec)
    image, mirror = apply_asymmetry(image, spec.asymmetry_magnitude, spec.seed)
    image, fraction = insert_lesion(image, spec, spec.seed)
    if subject_id:
        image = MultiModalImage(image.channels, image.channel_names, image.labels,
                                image.brain_mask, subject_id, dict(image.extras))
    return image, mirror, fraction
