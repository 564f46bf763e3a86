"""
Synthetic tissue label volumes: layered blocks, spheres, ellipsoids and a
coarse brain-like phantom. They stand in for FreeSurfer tissue maps in tests,
in the transfer experiment and in the synthetic smoke corpus.

All phantoms use an identity direction matrix; centers and radii are in mm.
"""

from typing import Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from iusseg.volume.vol import Volume3D
from iusseg.tissue.tss import BACKGROUND, WHITE_MATTER, GRAY_MATTER, CSF, VENTRICLE


def _grid(dims, spacing, origin):
    dims = tuple(int(d) for d in dims)
    spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,))
    origin = np.asarray(origin, dtype=np.float64)
    idx = np.indices(dims, dtype=np.float64)
    points = origin[:, None, None, None] + spacing[:, None, None, None] * idx
    return dims, spacing, origin, points


def _center(dims, spacing, origin, center_mm):
    if center_mm is not None:
        return np.asarray(center_mm, dtype=np.float64)
    return origin + spacing * (np.asarray(dims, dtype=np.float64) - 1) / 2.0


def _ellipsoid_mask(points, center, semi_axes, rotation_deg=(0.0, 0.0, 0.0)):
    r = Rotation.from_euler('xyz', rotation_deg, degrees=True).as_matrix()
    d = points - center[:, None, None, None]
    local = np.einsum('ji,jxyz->ixyz', r, d)
    semi = np.asarray(semi_axes, dtype=np.float64)[:, None, None, None]
    return np.sum((local / semi) ** 2, axis=0) <= 1.0


def two_layer_phantom(dims: Sequence[int] = (16, 16, 40), spacing: float = 0.5, interface_index: int = 20,
                      upper: int = WHITE_MATTER, lower: int = GRAY_MATTER,
                      origin=(0.0, 0.0, 0.0)) -> Volume3D:
    """Two slabs stacked along z; voxels with z index < interface_index carry
    'upper', the others 'lower'. The interface lies at world
    z = origin_z + (interface_index - 0.5) * spacing."""
    dims = tuple(int(d) for d in dims)
    data = np.full(dims, lower, dtype=np.uint8)
    data[:, :, :interface_index] = upper
    return Volume3D(data, (spacing,) * 3, origin, copy=False)


def sphere_phantom(dims: Sequence[int] = (32, 32, 32), spacing: float = 0.5, radius_mm: float = 4.0,
                   center_mm: Optional[Sequence[float]] = None, inside: int = WHITE_MATTER,
                   outside: int = GRAY_MATTER, origin=(0.0, 0.0, 0.0)) -> Volume3D:
    """A ball of label 'inside' embedded in label 'outside'."""
    return ellipsoid_phantom(dims, spacing, (radius_mm,) * 3, center_mm, (0.0, 0.0, 0.0), inside, outside, origin)


def ellipsoid_phantom(dims: Sequence[int] = (32, 32, 32), spacing: float = 0.5,
                      semi_axes_mm: Sequence[float] = (6.0, 4.0, 3.0),
                      center_mm: Optional[Sequence[float]] = None,
                      rotation_deg: Sequence[float] = (0.0, 0.0, 0.0), inside: int = WHITE_MATTER,
                      outside: int = GRAY_MATTER, origin=(0.0, 0.0, 0.0)) -> Volume3D:
    """A rotated ellipsoid (XYZ Euler angles in degrees) embedded in 'outside'."""
    dims, spacing, origin, points = _grid(dims, spacing, origin)
    center = _center(dims, spacing, origin, center_mm)
    data = np.full(dims, outside, dtype=np.uint8)
    data[_ellipsoid_mask(points, center, semi_axes_mm, rotation_deg)] = inside
    return Volume3D(data, spacing, origin, copy=False)


def brain_phantom(dims: Sequence[int] = (48, 48, 48), spacing: float = 0.5, seed: int = 0,
                  origin=(0.0, 0.0, 0.0)) -> Volume3D:
    """A coarse brain-like tissue map: a gray matter ellipsoid with a thin
    CSF rim, a white matter core and two lateral ventricles, all floating in
    background. The seed jitters shapes and positions slightly."""
    rng = np.random.default_rng([int(seed), 0x6272])
    dims, spacing, origin, points = _grid(dims, spacing, origin)
    center = _center(dims, spacing, origin, None) + rng.uniform(-1.0, 1.0, 3) * spacing
    extent = spacing * (np.asarray(dims) - 1) / 2.0
    brain = extent * rng.uniform(0.82, 0.9, 3)
    tilt = rng.uniform(-8.0, 8.0, 3)
    data = np.full(dims, BACKGROUND, dtype=np.uint8)
    data[_ellipsoid_mask(points, center, brain, tilt)] = CSF
    data[_ellipsoid_mask(points, center, brain - 2 * spacing, tilt)] = GRAY_MATTER
    data[_ellipsoid_mask(points, center, brain * 0.7, tilt)] = WHITE_MATTER
    ventricle = brain * np.array([0.12, 0.35, 0.15]) * rng.uniform(0.9, 1.1, 3)
    for side in (-1.0, 1.0):
        offset = np.array([side * brain[0] * 0.22, 0.0, brain[2] * 0.05])
        data[_ellipsoid_mask(points, center + offset, ventricle, tilt)] = VENTRICLE
    return Volume3D(data, spacing, origin, copy=False)
