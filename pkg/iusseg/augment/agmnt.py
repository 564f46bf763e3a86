"""
Random similarity augmentation and patch extraction for training.

A similarity transform scales by 'scale' and rotates by 'rotation' about a
center point, then translates:  x' = scale * R (x - c) + c + t. Applying it to
a volume resamples the volume on its own grid: every output voxel takes the
input value at the inverse-transformed point (0 outside the input).

Rotations are built from XYZ Euler angles in degrees, applied in that fixed
order. All draws are counter-based in (seed, index), so a run's sequence of
augmentations and patches depends on nothing but its seeds and the order of
its datasets.
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from iusseg.log.log import logger
from iusseg.volume.vol import (Volume3D, Interpolation, NEAREST, TRILINEAR, as_interpolation,
                               sample_index_coords, voxel_to_world, world_to_voxel)
from iusseg.simulate.sim_rng import counter_uniform, STREAM_AUGMENT, STREAM_PATCH

SAMPLINGS = ('uniform', 'foreground_biased')
ORTHONORMAL_TOLERANCE = 1e-6
SLAB_SIZE = 16


class InvalidTransform(Exception):
    def __init__(self, reason):
        self.reason = reason

    def __str__(self):
        return 'Invalid similarity transform: %s' % self.reason


class InvalidPatchSpec(Exception):
    def __init__(self, reason):
        self.reason = reason

    def __str__(self):
        return 'Invalid patch specification: %s' % self.reason


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    """Attributes:
        scale (float):           isotropic scale factor (> 0)
        rotation (np.ndarray):   3x3 rotation matrix
        translation_mm (tuple):  translation after rotation and scaling
        center_mm (tuple):       rotation/scale center; None binds to the
                                 center of the volume it is applied to
    """
    scale: float = 1.0
    rotation: np.ndarray = None
    translation_mm: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    center_mm: Optional[Tuple[float, float, float]] = None

    def __post_init__(self):
        r = np.eye(3) if self.rotation is None else np.array(self.rotation, dtype=np.float64)
        if not np.isfinite(self.scale) or self.scale <= 0:
            raise InvalidTransform('scale must be positive, got %s' % self.scale)
        if r.shape != (3, 3) or np.abs(r.T @ r - np.eye(3)).max() > ORTHONORMAL_TOLERANCE:
            raise InvalidTransform('rotation is not orthonormal')
        r.flags.writeable = False
        object.__setattr__(self, 'rotation', r)
        object.__setattr__(self, 'translation_mm', tuple(float(v) for v in self.translation_mm))
        if self.center_mm is not None:
            object.__setattr__(self, 'center_mm', tuple(float(v) for v in self.center_mm))

    @property
    def is_identity(self) -> bool:
        return (self.scale == 1.0 and np.array_equal(self.rotation, np.eye(3))
                and not any(self.translation_mm))

    def bind(self, vol: Volume3D) -> 'SimilarityTransform':
        if self.center_mm is not None:
            return self
        return SimilarityTransform(self.scale, self.rotation, self.translation_mm, tuple(vol.center_world()))

    def invert(self) -> 'SimilarityTransform':
        rt = self.rotation.T
        t = -(rt @ np.asarray(self.translation_mm)) / self.scale
        return SimilarityTransform(1.0 / self.scale, rt, tuple(t), self.center_mm)

    def map_points(self, points) -> np.ndarray:
        """x' = scale * R (x - c) + c + t for points (..., 3); needs a center."""
        if self.center_mm is None:
            raise InvalidTransform('transform has no center; bind it to a volume first')
        c = np.asarray(self.center_mm)
        p = np.asarray(points, dtype=np.float64)
        return self.scale * ((p - c) @ self.rotation.T) + c + np.asarray(self.translation_mm)


@dataclass(frozen=True)
class PatchSpec:
    size: Tuple[int, int, int] = (128, 128, 128)
    pad_value: float = 0.0
    sampling: str = 'foreground_biased'
    foreground_fraction: float = 0.5

    def __post_init__(self):
        size = tuple(int(s) for s in self.size)
        if len(size) != 3 or min(size) < 1:
            raise InvalidPatchSpec('size needs three components >= 1, got %s' % (self.size,))
        object.__setattr__(self, 'size', size)
        if self.sampling not in SAMPLINGS:
            raise InvalidPatchSpec('sampling must be one of %s' % (SAMPLINGS,))
        if not 0.0 <= self.foreground_fraction <= 1.0:
            raise InvalidPatchSpec('foreground_fraction must lie in [0, 1]')

    def to_dict(self) -> dict:
        return {'size': list(self.size), 'pad_value': self.pad_value, 'sampling': self.sampling,
                'foreground_fraction': self.foreground_fraction}

    @staticmethod
    def from_dict(d: dict) -> 'PatchSpec':
        return PatchSpec(tuple(d.get('size', (128, 128, 128))), float(d.get('pad_value', 0.0)),
                         str(d.get('sampling', 'foreground_biased')), float(d.get('foreground_fraction', 0.5)))


@dataclass
class PatchSample:
    """An image patch (float32), its label patch (uint8), the corner voxel
    of the patch in the source volume, and whether a foreground-biased draw
    fell back to uniform sampling because the label was empty."""
    image: np.ndarray
    label: np.ndarray
    corner: Tuple[int, int, int]
    fell_back: bool = False


def draw_similarity(seed: int, index: int, max_scale_pct: float = 10.0,
                    max_rot_deg: float = 10.0) -> SimilarityTransform:
    """A random similarity: scale uniform in [1 - s, 1 + s] for s =
    max_scale_pct / 100, three Euler angles uniform in [-r, r] degrees, no
    translation, center bound when applied."""
    if max_scale_pct < 0 or max_rot_deg < 0 or max_scale_pct >= 100:
        raise InvalidTransform('bounds must satisfy 0 <= max_scale_pct < 100 and max_rot_deg >= 0')
    u = counter_uniform(seed, STREAM_AUGMENT, index, np.arange(4, dtype=np.uint64))
    scale = 1.0 + (max_scale_pct / 100.0) * (2.0 * u[0] - 1.0)
    angles = max_rot_deg * (2.0 * u[1:] - 1.0)
    if max_rot_deg == 0:
        return SimilarityTransform(scale)
    return SimilarityTransform(scale, Rotation.from_euler('xyz', angles, degrees=True).as_matrix())


def apply_transform(vol: Volume3D, t: SimilarityTransform,
                    interp: Optional[Interpolation] = None) -> Volume3D:
    """Resample a volume through a similarity transform on its own grid.
    Label volumes always use nearest neighbour; intensities default to
    trilinear."""
    interp = (NEAREST if vol.is_label else TRILINEAR) if interp is None else as_interpolation(interp)
    if vol.is_label:
        interp = NEAREST
    if t.is_identity:
        return vol.with_data(vol.data)
    inverse = t.bind(vol).invert()
    dims = vol.dims
    out = np.empty(dims, dtype=np.float64)
    for k0 in range(0, dims[2], SLAB_SIZE):
        k1 = min(dims[2], k0 + SLAB_SIZE)
        idx = np.stack(np.meshgrid(np.arange(dims[0]), np.arange(dims[1]), np.arange(k0, k1), indexing='ij'),
                       axis=-1).reshape(-1, 3).astype(np.float64)
        source = inverse.map_points(voxel_to_world(vol, idx))
        values = sample_index_coords(vol, world_to_voxel(vol, source), interp, 0.0)
        out[:, :, k0:k1] = values.reshape(dims[0], dims[1], k1 - k0)
    data = out.astype(np.uint8) if vol.is_label else out.astype(np.float32)
    return vol.with_data(data, copy=False)


def augment_pair(image: Volume3D, label: Volume3D, seed: int, index: int, max_scale_pct: float,
                 max_rot_deg: float) -> Tuple[Volume3D, Volume3D]:
    """Transform an image (trilinear) and its label (nearest) with the same
    random similarity."""
    t = draw_similarity(seed, index, max_scale_pct, max_rot_deg).bind(label)
    return apply_transform(image, t, TRILINEAR), apply_transform(label, t, NEAREST)


def _extract(data: np.ndarray, corner, size, pad_value) -> np.ndarray:
    out = np.full(size, pad_value, dtype=data.dtype)
    src = tuple(slice(c, min(c + s, n)) for c, s, n in zip(corner, size, data.shape))
    dst = tuple(slice(0, sl.stop - sl.start) for sl in src)
    out[dst] = data[src]
    return out


def _foreground_corners(label: np.ndarray, size, hi) -> np.ndarray:
    """Boolean map over corners [0, hi] whose patch holds a foreground voxel."""
    size = np.asarray(size)
    padded = np.zeros(np.maximum(label.shape, size), dtype=bool)
    padded[tuple(slice(0, d) for d in label.shape)] = label != 0
    # the window at i spans [i - size // 2, i - size // 2 + size)
    covered = ndimage.maximum_filter(padded, size=tuple(size), mode='constant', cval=False)
    return covered[tuple(slice(s // 2, s // 2 + h + 1) for s, h in zip(size, hi))]


def sample_patch(image: Volume3D, label: Volume3D, spec: PatchSpec, seed: int, index: int) -> PatchSample:
    """Cut one patch of spec.size from an image and its label.

    Corners keep the patch inside the volume where the volume is large
    enough; otherwise the corner is 0 and the patch is padded (pad_value for
    the image, 0 for the label). With probability foreground_fraction
    (foreground_biased sampling) the corner is drawn uniformly among the
    valid corners whose patch contains at least one foreground voxel.
    """
    if image.dims != label.dims:
        raise InvalidPatchSpec('image %s and label %s grids differ' % (image.dims, label.dims))
    size = spec.size
    hi = np.maximum(0, np.array(image.dims) - np.array(size))
    u = counter_uniform(seed, STREAM_PATCH, index, np.arange(8, dtype=np.uint64))
    fell_back = False
    corner = None
    if spec.sampling == 'foreground_biased' and u[0] < spec.foreground_fraction:
        valid = _foreground_corners(label.data, size, hi)
        candidates = np.flatnonzero(valid.ravel(order='F'))
        if candidates.size == 0:
            fell_back = True
            logger.warning('patch %d: foreground requested but label is empty, sampling uniformly', index)
        else:
            flat = candidates[min(int(u[1] * candidates.size), candidates.size - 1)]
            corner = np.array(np.unravel_index(flat, valid.shape, order='F'))
    if corner is None:
        corner = np.minimum(np.floor(u[5:8] * (hi + 1)), hi).astype(np.int64)
    corner = tuple(int(c) for c in corner)
    return PatchSample(_extract(image.data.astype(np.float32), corner, size, np.float32(spec.pad_value)),
                       _extract(label.data, corner, size, np.uint8(0)), corner, fell_back)
