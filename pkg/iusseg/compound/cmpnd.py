"""
Forward compounding of a posed sweep into an isotropic 3D volume.

The output grid is the axis-aligned bounding box of the frame corner pixels,
at target_spacing_mm, with identity direction. Every frame pixel is assigned
to its nearest voxel (ties toward the lower index) and accumulated there,
either as a running sum with a hit counter ('mean') or as a running maximum
('max'). Voxels without hits are then filled, in a single pass, with the mean
of the hit voxels within hole_fill_radius_voxels (a cube neighbourhood);
voxels that remain without hits stay 0.

Frames are splatted in fixed chunks of CHUNK_FRAMES; chunk results are merged
in chunk order, so any thread count gives the serial result.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict

import numpy as np
from scipy import ndimage

from iusseg.log.log import logger
from iusseg.volume.vol import Volume3D
from iusseg.simulate.sim import Sweep, frame_points

ACCUMULATIONS = ('mean', 'max')
CHUNK_FRAMES = 8
EXTENT_TOLERANCE = 1e-9


class CompoundingError(Exception):
    def __init__(self, reason):
        self.reason = reason

    def __str__(self):
        return 'Compounding failed: %s' % self.reason


@dataclass(frozen=True)
class CompoundingConfig:
    target_spacing_mm: float = 0.3
    hole_fill_radius_voxels: int = 1
    accumulation: str = 'mean'

    def __post_init__(self):
        if not np.isfinite(self.target_spacing_mm) or self.target_spacing_mm <= 0:
            raise CompoundingError('target_spacing_mm must be positive')
        if int(self.hole_fill_radius_voxels) != self.hole_fill_radius_voxels or self.hole_fill_radius_voxels < 0:
            raise CompoundingError('hole_fill_radius_voxels must be a non-negative integer')
        if self.accumulation not in ACCUMULATIONS:
            raise CompoundingError('accumulation must be one of %s' % (ACCUMULATIONS,))

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> 'CompoundingConfig':
        return CompoundingConfig(float(d.get('target_spacing_mm', 0.3)), int(d.get('hole_fill_radius_voxels', 1)),
                                 str(d.get('accumulation', 'mean')))


def output_grid(sweep: Sweep, cfg: CompoundingConfig):
    """Origin (3,) and dims (3,) of the compounding grid of a sweep."""
    if len(sweep) == 0:
        raise CompoundingError('empty sweep')
    corners = []
    for frame in sweep.frames:
        points = frame_points(frame)
        corners.append(points[[0, 0, -1, -1], [0, -1, 0, -1]])
    corners = np.concatenate(corners, axis=0)
    if not np.all(np.isfinite(corners)):
        raise CompoundingError('non-finite frame positions')
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    extent = hi - lo
    if np.count_nonzero(extent > EXTENT_TOLERANCE) < 2:
        raise CompoundingError('degenerate bounding box %s' % extent)
    s = cfg.target_spacing_mm
    dims = np.floor(extent / s + 0.5).astype(np.int64) + 1
    return lo, dims


def _splat_chunk(frames, origin, dims, cfg):
    n = int(np.prod(dims))
    counts = np.zeros(n, dtype=np.int64)
    acc = np.zeros(n, dtype=np.float64)
    for frame in frames:
        idx = np.ceil((frame_points(frame).reshape(-1, 3) - origin) / cfg.target_spacing_mm - 0.5)
        idx = np.clip(idx, 0, dims - 1).astype(np.int64)
        flat = idx[:, 0] + dims[0] * (idx[:, 1] + dims[1] * idx[:, 2])
        values = frame.pixels.reshape(-1).astype(np.float64)
        counts += np.bincount(flat, minlength=n)
        if cfg.accumulation == 'mean':
            acc += np.bincount(flat, weights=values, minlength=n)
        else:
            np.maximum.at(acc, flat, values)
    return acc, counts


def _splat(sweep: Sweep, cfg: CompoundingConfig, threads: int):
    origin, dims = output_grid(sweep, cfg)
    chunks = [sweep.frames[i:i + CHUNK_FRAMES] for i in range(0, len(sweep), CHUNK_FRAMES)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda c: _splat_chunk(c, origin, dims, cfg), chunks))
    else:
        parts = [_splat_chunk(c, origin, dims, cfg) for c in chunks]
    acc, counts = parts[0]
    for part_acc, part_counts in parts[1:]:
        counts = counts + part_counts
        acc = acc + part_acc if cfg.accumulation == 'mean' else np.maximum(acc, part_acc)
    shape = tuple(int(d) for d in dims)
    return origin, acc.reshape(shape, order='F'), counts.reshape(shape, order='F')


def _fill_holes(values: np.ndarray, hit: np.ndarray, radius: int) -> np.ndarray:
    if radius == 0:
        return values
    kernel = np.ones((2 * radius + 1,) * 3)
    sums = ndimage.convolve(np.where(hit, values, 0.0), kernel, mode='constant', cval=0.0)
    counts = ndimage.convolve(hit.astype(np.float64), kernel, mode='constant', cval=0.0)
    fill = ~hit & (counts > 0.5)
    out = values.copy()
    out[fill] = sums[fill] / counts[fill]
    return out


def compound(sweep: Sweep, cfg: CompoundingConfig = CompoundingConfig(), threads: int = 1) -> Volume3D:
    """Reconstruct a float32 volume in [0, 1] from a sweep.

    Raises:
        CompoundingError: on an empty sweep or a degenerate bounding box
    """
    origin, acc, counts = _splat(sweep, cfg, threads)
    hit = counts > 0
    values = np.zeros(acc.shape, dtype=np.float64)
    if cfg.accumulation == 'mean':
        values[hit] = acc[hit] / counts[hit]
    else:
        values[hit] = acc[hit]
    values = _fill_holes(values, hit, cfg.hole_fill_radius_voxels)
    logger.info('compounded %d frames into %s voxels (%.1f%% hit)', len(sweep), acc.shape,
                100.0 * np.count_nonzero(hit) / hit.size)
    return Volume3D(np.clip(values, 0.0, 1.0).astype(np.float32), (cfg.target_spacing_mm,) * 3, origin,
                    copy=False)


def coverage_mask(sweep: Sweep, cfg: CompoundingConfig = CompoundingConfig(), threads: int = 1) -> Volume3D:
    """uint8 mask of the voxels hit by at least one pixel (before hole
    filling), on compound()'s grid."""
    origin, _, counts = _splat(sweep, cfg, threads)
    return Volume3D((counts > 0).astype(np.uint8), (cfg.target_spacing_mm,) * 3, origin, copy=False)
