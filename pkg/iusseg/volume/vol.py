"""The vol Python module exposes the Volume3D class, a scalar 3D grid with
voxel spacing, origin and direction, that carries every image, label map and
probability map in iusseg, together with the coordinate transforms,
point sampling and resampling that act on it.

A Volume3D stores its voxels as a numpy array indexed [x, y, z]; flattening
that array in Fortran order gives the x-fastest voxel order used on disk (see
the vol_io module). A Volume3D is immutable: its array is read-only and every
operation returns a new instance.

World coordinates are in mm. The world position of the center of voxel
(i, j, k) is origin + direction @ (spacing * (i, j, k)).

Classes:
    Interpolation(Enum): 'nearest' or 'trilinear'
    Volume3D:            the volumetric grid

Exception classes:
    InvalidVolume(Exception): raised when a Volume3D would violate its
                              invariants, or when an operation is asked to
                              do something a volume cannot support (such as
                              trilinear interpolation of labels)

Module level functions:
    voxel_to_world(vol, idx):                 voxel index -> world mm
    world_to_voxel(vol, p):                   world mm -> continuous index
    sample(vol, p, interp, background):       value at world point(s)
    resample(vol, target_spacing, interp):    new spacing, same extent
    resample_to(vol, reference, interp):      onto another volume's grid
    coarsen_labels(labels, coarse_spacing_mm): emulate coarse annotation

Points outside the grid sample to the background value (0 unless given). A
point is inside when its continuous index lies within the voxel extent
[-0.5, n - 0.5] on every axis; trilinear weights use the outer voxel centers
for points in the outer half voxel. Nearest-neighbour ties break toward the
lower voxel index.
"""

__package__ = 'iusseg.volume'

from enum import Enum
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

ORTHONORMAL_TOLERANCE = 1e-6
SNAP_TOLERANCE = 1e-9
ELEMENT_KINDS = {'float32': np.dtype(np.float32), 'uint8': np.dtype(np.uint8)}
# number of output slices sampled at once in resample() and resample_to()
SLAB_SIZE = 16


class Interpolation(Enum):
    NEAREST = 'nearest'
    TRILINEAR = 'trilinear'


NEAREST = Interpolation.NEAREST
TRILINEAR = Interpolation.TRILINEAR


class InvalidVolume(Exception):
    """Exception class, instances of which are raised when trying to construct
    an invalid Volume3D, or when an operation does not apply to a volume.

    Attributes:
        reason (str): what is wrong
    """

    def __init__(self, reason):
        self.reason = reason

    def __str__(self):
        return 'Invalid volume: %s' % self.reason


class Volume3D:
    """A scalar 3D grid.

    Attributes:
        data (np.ndarray):      read-only voxel array indexed [x, y, z], of
                                dtype float32 (intensities, probabilities) or
                                uint8 (labels)
        spacing (np.ndarray):   mm per voxel along each voxel axis
        origin (np.ndarray):    world position (mm) of the center of voxel
                                (0, 0, 0)
        direction (np.ndarray): 3x3 orthonormal matrix whose columns are the
                                world directions of the voxel axes
        extra_header (dict):    MetaImage header keys that iusseg does not
                                interpret, kept so that they survive a
                                load/save cycle
    """

    def __init__(self, data, spacing, origin=(0.0, 0.0, 0.0), direction=None,
                 extra_header=None, copy=True):
        arr = np.asarray(data)
        if arr.ndim != 3:
            raise InvalidVolume('voxel data must be 3D, got shape %s' % (arr.shape,))
        if arr.dtype not in ELEMENT_KINDS.values():
            raise InvalidVolume('element kind must be float32 or uint8, got %s' % arr.dtype)
        if min(arr.shape) < 1:
            raise InvalidVolume('every dimension must hold at least one voxel, got %s' % (arr.shape,))
        spacing = np.array(spacing, dtype=np.float64).reshape(-1)
        origin = np.array(origin, dtype=np.float64).reshape(-1)
        if spacing.shape != (3,) or origin.shape != (3,):
            raise InvalidVolume('spacing and origin need three components')
        if not np.all(np.isfinite(spacing)) or np.any(spacing <= 0):
            raise InvalidVolume('spacing must be finite and positive, got %s' % spacing)
        if not np.all(np.isfinite(origin)):
            raise InvalidVolume('origin must be finite, got %s' % origin)
        if direction is None:
            direction = np.eye(3)
        direction = np.array(direction, dtype=np.float64)
        if direction.shape != (3, 3) or not np.all(np.isfinite(direction)):
            raise InvalidVolume('direction must be a finite 3x3 matrix')
        if np.abs(direction.T @ direction - np.eye(3)).max() > ORTHONORMAL_TOLERANCE:
            raise InvalidVolume('direction columns are not orthonormal')
        self._data = np.array(arr, copy=True) if copy else arr
        self._data.flags.writeable = False
        for a in (spacing, origin, direction):
            a.flags.writeable = False
        self._spacing = spacing
        self._origin = origin
        self._direction = direction
        self._extra_header = dict(extra_header) if extra_header else {}

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def spacing(self) -> np.ndarray:
        return self._spacing

    @property
    def origin(self) -> np.ndarray:
        return self._origin

    @property
    def direction(self) -> np.ndarray:
        return self._direction

    @property
    def extra_header(self) -> dict:
        return dict(self._extra_header)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self._data.shape)

    @property
    def element_kind(self) -> str:
        return 'uint8' if self._data.dtype == np.uint8 else 'float32'

    @property
    def is_label(self) -> bool:
        return self.element_kind == 'uint8'

    @property
    def voxel_data(self) -> np.ndarray:
        """The voxels as a flat array in x-fastest order."""
        return self._data.ravel(order='F')

    def center_world(self) -> np.ndarray:
        """World position of the geometric center of the grid."""
        return voxel_to_world(self, (np.array(self.dims, dtype=np.float64) - 1.0) / 2.0)

    def with_data(self, data, copy=True) -> 'Volume3D':
        """Return a volume on the same grid carrying other voxel data."""
        return Volume3D(data, self._spacing, self._origin, self._direction,
                        self._extra_header, copy=copy)

    def same_grid(self, other: 'Volume3D', atol: float = 1e-9) -> bool:
        """True iff both volumes share dims, spacing, origin and direction."""
        return (self.dims == other.dims
                and np.allclose(self._spacing, other.spacing, rtol=0.0, atol=atol)
                and np.allclose(self._origin, other.origin, rtol=0.0, atol=atol)
                and np.allclose(self._direction, other.direction, rtol=0.0, atol=atol))

    def equals(self, other: 'Volume3D') -> bool:
        """Bit-identical comparison of voxel data and metadata."""
        if not isinstance(other, Volume3D):
            return False
        return (self._data.dtype == other.data.dtype
                and self.dims == other.dims
                and np.array_equal(self._spacing, other.spacing)
                and np.array_equal(self._origin, other.origin)
                and np.array_equal(self._direction, other.direction)
                and self._data.tobytes(order='F') == other.data.tobytes(order='F')
                and self._extra_header == other.extra_header)

    def __repr__(self):
        return 'Volume3D(dims=%s, spacing=%s, element_kind=%s)' % (
            self.dims, tuple(float(s) for s in self._spacing), self.element_kind)


def as_interpolation(interp: Union[str, Interpolation]) -> Interpolation:
    if isinstance(interp, Interpolation):
        return interp
    try:
        return Interpolation(str(interp).lower())
    except ValueError:
        raise InvalidVolume('unknown interpolation %r' % (interp,))


def voxel_to_world(vol: Volume3D, idx) -> np.ndarray:
    """Map (continuous) voxel indices of shape (..., 3) to world mm."""
    idx = np.asarray(idx, dtype=np.float64)
    return vol.origin + (idx * vol.spacing) @ vol.direction.T


def world_to_voxel(vol: Volume3D, p) -> np.ndarray:
    """Map world points of shape (..., 3) to continuous voxel indices. Points
    outside the grid map to indices outside [0, n - 1]; that is legal."""
    p = np.asarray(p, dtype=np.float64)
    return ((p - vol.origin) @ vol.direction) / vol.spacing


def _snap(coords: np.ndarray) -> np.ndarray:
    nearest = np.rint(coords)
    return np.where(np.abs(coords - nearest) < SNAP_TOLERANCE, nearest, coords)


def _check_interpolation(vol: Volume3D, interp: Interpolation) -> None:
    if vol.is_label and interp is not NEAREST:
        raise InvalidVolume('label volumes must be interpolated with nearest neighbour')


def sample_index_coords(vol: Volume3D, coords: np.ndarray, interp: Interpolation,
                        background: float = 0.0, clamp: bool = False) -> np.ndarray:
    """Sample a volume at continuous voxel coordinates of shape (N, 3).

    Args:
        clamp (bool): pull every coordinate into the voxel extent first, so
                      that no point samples the background

    Returns:
        np.ndarray: float64 values of shape (N,)
    """
    coords = _snap(np.asarray(coords, dtype=np.float64).reshape(-1, 3))
    dims = np.array(vol.dims, dtype=np.float64)
    if clamp:
        coords = np.clip(coords, -0.5, dims - 0.5)
    inside = np.all((coords >= -0.5 - SNAP_TOLERANCE) & (coords <= dims - 0.5 + SNAP_TOLERANCE), axis=1)
    out = np.full(coords.shape[0], float(background), dtype=np.float64)
    if not np.any(inside):
        return out
    c = coords[inside]
    if interp is NEAREST:
        # ceil(c - 0.5) rounds half toward the lower index
        idx = np.clip(np.ceil(c - 0.5), 0, dims - 1).astype(np.int64)
        out[inside] = vol.data[idx[:, 0], idx[:, 1], idx[:, 2]]
    else:
        c = np.clip(c, 0.0, dims - 1.0)
        out[inside] = ndimage.map_coordinates(vol.data.astype(np.float64), c.T, order=1,
                                              mode='nearest', prefilter=False)
    return out


def sample(vol: Volume3D, p, interp: Union[str, Interpolation] = TRILINEAR,
           background: float = 0.0):
    """Value of a volume at one world point (shape (3,)) or many (shape
    (N, 3)). Trilinear takes the weighted average of the 8 neighbouring voxel
    centers; nearest takes the closest voxel center. Points outside the grid
    give the background value."""
    interp = as_interpolation(interp)
    p = np.asarray(p, dtype=np.float64)
    values = sample_index_coords(vol, world_to_voxel(vol, p.reshape(-1, 3)), interp, background)
    if p.ndim == 1:
        return float(values[0])
    return values.reshape(p.shape[:-1])


def _grid_indices(dims: Sequence[int], k0: int, k1: int) -> np.ndarray:
    i, j, k = np.meshgrid(np.arange(dims[0]), np.arange(dims[1]), np.arange(k0, k1), indexing='ij')
    return np.stack([i, j, k], axis=-1).reshape(-1, 3).astype(np.float64)


def _sample_onto_grid(vol: Volume3D, dims, spacing, origin, direction, interp: Interpolation,
                      background: float, clamp: bool) -> np.ndarray:
    out = np.empty(tuple(dims), dtype=np.float64)
    target = Volume3D(np.zeros((1, 1, 1), dtype=np.uint8), spacing, origin, direction)
    for k0 in range(0, dims[2], SLAB_SIZE):
        k1 = min(dims[2], k0 + SLAB_SIZE)
        world = voxel_to_world(target, _grid_indices(dims, k0, k1))
        values = sample_index_coords(vol, world_to_voxel(vol, world), interp, background, clamp)
        out[:, :, k0:k1] = values.reshape(dims[0], dims[1], k1 - k0)
    return out


def _cast_like(vol: Volume3D, values: np.ndarray) -> np.ndarray:
    if vol.is_label:
        return values.astype(np.uint8)
    return values.astype(np.float32)


def resample(vol: Volume3D, target_spacing, interp: Union[str, Interpolation] = TRILINEAR) -> Volume3D:
    """Resample a volume to another spacing over the same world extent.

    The output has dims ceil(extent / target_spacing) per axis, where the
    extent is dims * spacing, and its grid corner coincides with the input
    grid corner. Equal spacing therefore reproduces the input exactly.
    """
    interp = as_interpolation(interp)
    _check_interpolation(vol, interp)
    t = np.array(target_spacing, dtype=np.float64).reshape(-1)
    if t.shape == (1,):
        t = np.repeat(t, 3)
    if t.shape != (3,) or not np.all(np.isfinite(t)) or np.any(t <= 0):
        raise InvalidVolume('target spacing must be three finite positive values, got %s' % (target_spacing,))
    if np.array_equal(t, vol.spacing):
        return vol.with_data(vol.data)
    extent = np.array(vol.dims) * vol.spacing
    dims = tuple(max(1, int(np.ceil(e / s - SNAP_TOLERANCE))) for e, s in zip(extent, t))
    origin = vol.origin + vol.direction @ ((t - vol.spacing) / 2.0)
    values = _sample_onto_grid(vol, dims, t, origin, vol.direction, interp, 0.0, clamp=True)
    return Volume3D(_cast_like(vol, values), t, origin, vol.direction, vol.extra_header, copy=False)


def resample_to(vol: Volume3D, reference: Volume3D, interp: Union[str, Interpolation] = NEAREST,
                background: float = 0.0) -> Volume3D:
    """Sample a volume onto the grid of a reference volume. Reference voxels
    outside the input grid take the background value."""
    interp = as_interpolation(interp)
    _check_interpolation(vol, interp)
    if vol.same_grid(reference, atol=0.0):
        return vol.with_data(vol.data)
    values = _sample_onto_grid(vol, reference.dims, reference.spacing, reference.origin,
                               reference.direction, interp, background, clamp=False)
    return Volume3D(_cast_like(vol, values), reference.spacing, reference.origin,
                    reference.direction, vol.extra_header, copy=False)


def coarsen_labels(labels: Volume3D, coarse_spacing_mm: float = 1.0) -> Volume3D:
    """Down-sample a label volume to a coarse isotropic grid with nearest
    neighbour and bring it back onto the original grid. The result keeps the
    input grid but only carries the detail of the coarse one, like an
    annotation drawn on a 1 mm volume."""
    if not labels.is_label:
        raise InvalidVolume('coarsen_labels needs a uint8 label volume')
    coarse = resample(labels, (coarse_spacing_mm,) * 3, NEAREST)
    return resample_to(coarse, labels, NEAREST)


def binary(vol: Volume3D, labels: Optional[Sequence[int]] = None) -> Volume3D:
    """A {0, 1} uint8 mask of the voxels whose value is in labels (or
    non-zero, if labels is None)."""
    if labels is None:
        mask = vol.data != 0
    else:
        mask = np.isin(vol.data, np.asarray(list(labels)))
    return vol.with_data(mask.astype(np.uint8), copy=False)
