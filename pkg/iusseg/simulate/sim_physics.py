"""The sim_physics Python module holds the acoustic half of the ultrasound
simulator: the probe and imaging parameter types, rigid probe poses, the
reflection and attenuation laws, and the ray tracer that turns a TissueMap
into raw echo lines.

Probe-local coordinates: x is lateral, y is elevational and z is axial (depth,
pointing into the tissue). The probe face is the plane z = 0; a linear probe
fires parallel rays along +z from x in [-width/2, width/2], a curvilinear probe
fires a fan of rays from a virtual apex at (0, 0, -radius_mm) across its
aperture angle. A RigidPose maps probe-local points to world mm.

The ray tracer is a single-bounce model. Every ray is marched in
samples_per_line steps of depth_mm / (samples_per_line - 1). At a sample where
the tissue label differs from the previous one, a boundary echo R * T is
recorded, with R the energy reflection coefficient of the interface and T the
energy transmitted through all earlier interfaces; T is then multiplied by
1 - R. At every sample a scatterer is present with probability
scatter_density; its amplitude max(0, scatter_mean + scatter_sigma * n) (n
standard normal) is recorded scaled by T. Both terms are scaled by the two-way
attenuation factor of the path travelled so far. Background is treated as
zero impedance: entering it from tissue reflects everything (R = 1, nothing
is transmitted beyond), while background met before the first tissue sample
and samples outside the grid are silent. The speed of sound is SPEED_OF_SOUND_M_S
everywhere (no refraction).

Scatterer draws are counter-based (see sim_rng): keyed by the tissue map voxel
the sample falls in ('voxel' keying, the default, so neighbouring frames share
speckle), or by (scanline, sample) ('line' keying).

Classes:
    ProbeGeometry: linear or curvilinear probe
    ImagingParams: gain, dynamic range, PSF widths, noise and seed
    RigidPose:     3x3 rotation + translation (mm)

Exception classes:
    InvalidProbe(Exception)
    InvalidImagingParams(Exception)
    InvalidPose(Exception)
    SimulationError(Exception): zero-norm ray direction, empty trajectory,
                                PSF wider than the image, both impedances zero

Module level functions:
    reflection_coefficient(z1, z2)
    attenuation_factor(att, f, path_len)
    scanlines(geom, pose):          world origins and directions of all rays
    trace_lines(tm, origins, directions, geom, params, line_indices)
    trace_scanline(tm, ray_origin, ray_dir, geom, params, line_index)
"""

__package__ = 'iusseg.simulate'

from dataclasses import dataclass, asdict, field
from typing import Sequence

import numpy as np

from iusseg.tissue.tss import TissueMap
from iusseg.volume.vol import world_to_voxel, SNAP_TOLERANCE
from iusseg.simulate.sim_rng import (counter_uniform, counter_normal, STREAM_SCATTER_PRESENT,
                                     STREAM_SCATTER_AMPLITUDE)

SPEED_OF_SOUND_M_S = 1540.0
# 1540 m/s is 1.54 mm per microsecond: cycles per mm = f[MHz] / 1.54
SPEED_OF_SOUND_MM_US = SPEED_OF_SOUND_M_S / 1000.0
PROBE_KINDS = ('linear', 'curvilinear')
SPECKLE_KEYINGS = ('voxel', 'line')
ORTHONORMAL_TOLERANCE = 1e-6
UNIT_TOLERANCE = 1e-9


class InvalidProbe(Exception):
    def __init__(self, reason):
        self.reason = reason

    def __str__(self):
        return 'Invalid probe geometry: %s' % self.reason


class InvalidImagingParams(Exception):
    def __init__(self, reason):
        self.reason = reason

    def __str__(self):
        return 'Invalid imaging parameters: %s' % self.reason


class InvalidPose(Exception):
    def __init__(self, reason):
        self.reason = reason

    def __str__(self):
        return 'Invalid pose: %s' % self.reason


class SimulationError(Exception):
    def __init__(self, reason):
        self.reason = reason

    def __str__(self):
        return 'Simulation failed: %s' % self.reason


@dataclass(frozen=True)
class ProbeGeometry:
    """Geometry of a probe.

    Attributes:
        kind (str):                   'linear' or 'curvilinear'
        element_count (int):          scanlines per frame
        depth_mm (float):             imaging depth along each scanline
        samples_per_line (int):       samples along each scanline (>= 2)
        center_frequency_mhz (float): transmit center frequency
        width_mm (float):             lateral aperture of a linear probe
        aperture_angle_deg (float):   fan angle of a curvilinear probe
        radius_mm (float):            apex to probe face distance of a
                                      curvilinear probe
    """
    kind: str = 'linear'
    element_count: int = 64
    depth_mm: float = 20.0
    samples_per_line: int = 128
    center_frequency_mhz: float = 5.0
    width_mm: float = 20.0
    aperture_angle_deg: float = 60.0
    radius_mm: float = 0.0

    def __post_init__(self):
        if self.kind not in PROBE_KINDS:
            raise InvalidProbe('kind must be one of %s, got %r' % (PROBE_KINDS, self.kind))
        if int(self.element_count) != self.element_count or self.element_count < 1:
            raise InvalidProbe('element_count must be a positive integer')
        if int(self.samples_per_line) != self.samples_per_line or self.samples_per_line < 2:
            raise InvalidProbe('samples_per_line must be an integer >= 2')
        if not np.isfinite(self.depth_mm) or self.depth_mm <= 0:
            raise InvalidProbe('depth_mm must be positive')
        if not np.isfinite(self.center_frequency_mhz) or self.center_frequency_mhz <= 0:
            raise InvalidProbe('center_frequency_mhz must be positive')
        if self.kind == 'linear' and (not np.isfinite(self.width_mm) or self.width_mm <= 0):
            raise InvalidProbe('a linear probe needs width_mm > 0')
        if self.kind == 'curvilinear':
            if not 0 < self.aperture_angle_deg < 180:
                raise InvalidProbe('aperture_angle_deg must lie in (0, 180)')
            if not np.isfinite(self.radius_mm) or self.radius_mm < 0:
                raise InvalidProbe('radius_mm must be >= 0')

    @property
    def sample_step_mm(self) -> float:
        return self.depth_mm / (self.samples_per_line - 1)

    @property
    def wavelength_mm(self) -> float:
        return SPEED_OF_SOUND_MM_US / self.center_frequency_mhz

    @property
    def angle_step_rad(self) -> float:
        if self.element_count == 1:
            return 0.0
        return np.deg2rad(self.aperture_angle_deg) / (self.element_count - 1)

    @property
    def line_spacing_mm(self) -> float:
        """Distance between neighbouring scanlines; for a curvilinear probe
        measured at half the imaging depth."""
        if self.kind == 'linear':
            return self.width_mm / (self.element_count - 1) if self.element_count > 1 else self.width_mm
        if self.element_count == 1:
            return self.sample_step_mm
        return (self.radius_mm + self.depth_mm / 2.0) * self.angle_step_rad

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> 'ProbeGeometry':
        try:
            return ProbeGeometry(kind=str(d.get('kind', 'linear')),
                                 element_count=int(d.get('element_count', 64)),
                                 depth_mm=float(d.get('depth_mm', 20.0)),
                                 samples_per_line=int(d.get('samples_per_line', 128)),
                                 center_frequency_mhz=float(d.get('center_frequency_mhz', 5.0)),
                                 width_mm=float(d.get('width_mm', 20.0)),
                                 aperture_angle_deg=float(d.get('aperture_angle_deg', 60.0)),
                                 radius_mm=float(d.get('radius_mm', 0.0)))
        except (TypeError, ValueError) as e:
            raise InvalidProbe('malformed probe description (%s)' % e)


@dataclass(frozen=True)
class ImagingParams:
    """Imaging settings of one simulated acquisition.

    Attributes:
        tgc_gain_db_per_cm (float):   time-gain compensation slope
        dynamic_range_db (float):     log-compression range, in [20, 100]
        psf_axial_sigma_mm (float):   axial PSF Gaussian width
        psf_lateral_sigma_mm (float): lateral PSF Gaussian width
        noise_floor (float):          amplitude of additive uniform noise
        seed (int):                   64-bit seed of all counter-based draws
        speckle_keying (str):         'voxel' or 'line'
    """
    tgc_gain_db_per_cm: float = 0.0
    dynamic_range_db: float = 60.0
    psf_axial_sigma_mm: float = 0.2
    psf_lateral_sigma_mm: float = 0.3
    noise_floor: float = 0.0
    seed: int = 0
    speckle_keying: str = 'voxel'

    def __post_init__(self):
        values = (self.tgc_gain_db_per_cm, self.dynamic_range_db, self.psf_axial_sigma_mm,
                  self.psf_lateral_sigma_mm, self.noise_floor)
        if not all(np.isfinite(v) for v in values):
            raise InvalidImagingParams('all parameters must be finite')
        if not 20.0 <= self.dynamic_range_db <= 100.0:
            raise InvalidImagingParams('dynamic_range_db must lie in [20, 100], got %s' % self.dynamic_range_db)
        if self.psf_axial_sigma_mm <= 0 or self.psf_lateral_sigma_mm <= 0:
            raise InvalidImagingParams('PSF sigmas must be positive')
        if self.noise_floor < 0:
            raise InvalidImagingParams('noise_floor must be >= 0')
        if int(self.seed) != self.seed or not 0 <= self.seed < 2 ** 64:
            raise InvalidImagingParams('seed must be an unsigned 64-bit integer')
        if self.speckle_keying not in SPECKLE_KEYINGS:
            raise InvalidImagingParams('speckle_keying must be one of %s' % (SPECKLE_KEYINGS,))

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> 'ImagingParams':
        try:
            return ImagingParams(tgc_gain_db_per_cm=float(d.get('tgc_gain_db_per_cm', 0.0)),
                                 dynamic_range_db=float(d.get('dynamic_range_db', 60.0)),
                                 psf_axial_sigma_mm=float(d.get('psf_axial_sigma_mm', 0.2)),
                                 psf_lateral_sigma_mm=float(d.get('psf_lateral_sigma_mm', 0.3)),
                                 noise_floor=float(d.get('noise_floor', 0.0)),
                                 seed=int(d.get('seed', 0)),
                                 speckle_keying=str(d.get('speckle_keying', 'voxel')))
        except (TypeError, ValueError) as e:
            raise InvalidImagingParams('malformed imaging parameters (%s)' % e)


@dataclass(frozen=True, eq=False)
class RigidPose:
    """Rigid transform from probe-local to world coordinates:
    world = rotation @ local + translation."""
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(-1)
        if r.shape != (3, 3) or t.shape != (3,):
            raise InvalidPose('rotation must be 3x3 and translation have 3 components')
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(t)):
            raise InvalidPose('non-finite pose')
        if np.abs(r.T @ r - np.eye(3)).max() > ORTHONORMAL_TOLERANCE or np.linalg.det(r) < 0:
            raise InvalidPose('rotation is not a proper orthonormal matrix')
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, 'rotation', r)
        object.__setattr__(self, 'translation', t)

    def apply(self, points) -> np.ndarray:
        """Map probe-local points (..., 3) to world mm."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def apply_direction(self, directions) -> np.ndarray:
        return np.asarray(directions, dtype=np.float64) @ self.rotation.T

    def equals(self, other: 'RigidPose') -> bool:
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(self.translation, other.translation)

    def to_dict(self) -> dict:
        return {'rotation': [float(v) for v in self.rotation.ravel()],
                'translation': [float(v) for v in self.translation]}

    @staticmethod
    def from_dict(d: dict) -> 'RigidPose':
        try:
            return RigidPose(np.array(d['rotation'], dtype=np.float64).reshape(3, 3),
                             np.array(d['translation'], dtype=np.float64))
        except (KeyError, TypeError, ValueError) as e:
            raise InvalidPose('malformed pose (%s)' % e)


def reflection_coefficient(z1: float, z2: float) -> float:
    """Energy reflection coefficient ((z2 - z1) / (z2 + z1))**2 of an
    interface; an impedance of 0 on one side reflects totally."""
    if z1 < 0 or z2 < 0:
        raise SimulationError('impedances must be >= 0')
    if z1 == 0 and z2 == 0:
        raise SimulationError('both impedances are zero')
    return ((z2 - z1) / (z2 + z1)) ** 2


def attenuation_factor(att: float, f: float, path_len: float) -> float:
    """Amplitude factor 10**(-dB / 20) for dB = att * f * path_len[cm]."""
    return 10.0 ** (-att * f * (path_len / 10.0) / 20.0)


def scanlines(geom: ProbeGeometry, pose: RigidPose):
    """World origins and unit directions of the scanlines of a probe.

    Returns:
        tuple: origins (L, 3) and directions (L, 3)
    """
    n = geom.element_count
    if geom.kind == 'linear':
        if n == 1:
            x = np.zeros(1)
        else:
            x = np.linspace(-geom.width_mm / 2.0, geom.width_mm / 2.0, n)
        origins = np.stack([x, np.zeros(n), np.zeros(n)], axis=1)
        directions = np.tile([0.0, 0.0, 1.0], (n, 1))
    else:
        half = np.deg2rad(geom.aperture_angle_deg) / 2.0
        theta = np.zeros(1) if n == 1 else np.linspace(-half, half, n)
        directions = np.stack([np.sin(theta), np.zeros(n), np.cos(theta)], axis=1)
        apex = np.array([0.0, 0.0, -geom.radius_mm])
        origins = apex + geom.radius_mm * directions
    return pose.apply(origins), pose.apply_direction(directions)


def _lookup_labels(tm: TissueMap, points: np.ndarray):
    """Nearest labels and flat voxel indices of points (..., 3); points
    outside the grid read the background label and index -1."""
    shape = points.shape[:-1]
    coords = world_to_voxel(tm.labels, points.reshape(-1, 3))
    dims = np.array(tm.labels.dims)
    inside = np.all((coords >= -0.5 - SNAP_TOLERANCE) & (coords <= dims - 0.5 + SNAP_TOLERANCE), axis=1)
    idx = np.clip(np.ceil(coords - 0.5 - SNAP_TOLERANCE), 0, dims - 1).astype(np.int64)
    labels = np.full(coords.shape[0], tm.background_label, dtype=np.int64)
    labels[inside] = tm.labels.data[idx[inside, 0], idx[inside, 1], idx[inside, 2]]
    flat = idx[:, 0] + dims[0] * (idx[:, 1] + dims[1] * idx[:, 2])
    flat = np.where(inside, flat, -1)
    return labels.reshape(shape), flat.reshape(shape)


def trace_lines(tm: TissueMap, origins, directions, geom: ProbeGeometry, params: ImagingParams,
                line_indices: Sequence[int]) -> np.ndarray:
    """Trace several scanlines at once.

    Args:
        origins (np.ndarray):    world ray origins (L, 3)
        directions (np.ndarray): world unit ray directions (L, 3)
        line_indices:            scanline numbers (L,), used for 'line' keying

    Raises:
        SimulationError: on a zero-norm or non-unit direction

    Returns:
        np.ndarray: raw echo amplitudes (samples_per_line, L), float64
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    norms = np.linalg.norm(directions, axis=1)
    if np.any(norms == 0):
        raise SimulationError('zero-norm ray direction')
    if np.any(np.abs(norms - 1.0) > UNIT_TOLERANCE):
        raise SimulationError('ray directions must be unit vectors')
    line_indices = np.asarray(line_indices, dtype=np.int64).reshape(-1)
    n_samples = geom.samples_per_line
    dz = geom.sample_step_mm
    steps = np.arange(n_samples, dtype=np.float64) * dz
    points = origins[None, :, :] + steps[:, None, None] * directions[None, :, :]
    labels, voxels = _lookup_labels(tm, points)

    z = tm.impedance_lut[labels]
    background = tm.background_lut[labels]
    # first sample: the medium at the probe face, no interface
    z_prev = np.concatenate([z[:1], z[:-1]], axis=0)
    bg_prev = np.concatenate([background[:1], background[:-1]], axis=0)
    changed = np.concatenate([np.zeros_like(labels[:1], dtype=bool), labels[1:] != labels[:-1]], axis=0)
    reflecting = changed & ~background & ~bg_prev
    # leaving tissue into background inside the grid: total reflection
    closing = changed & background & ~bg_prev & (voxels >= 0)
    r = np.zeros_like(z)
    denom = z + z_prev
    r[reflecting] = ((z[reflecting] - z_prev[reflecting]) / denom[reflecting]) ** 2
    r[closing] = 1.0
    transmitted = np.cumprod(1.0 - r, axis=0)
    transmitted_before = np.concatenate([np.ones_like(r[:1]), transmitted[:-1]], axis=0)
    boundary = r * transmitted_before

    # each step of length dz is attenuated by the medium it ends in
    loss_db = tm.attenuation_lut[labels] * geom.center_frequency_mhz * (dz / 10.0)
    loss_db[0] = 0.0
    two_way = 10.0 ** (-2.0 * np.cumsum(loss_db, axis=0) / 20.0)

    density = tm.density_lut[labels]
    if params.speckle_keying == 'voxel':
        keys = (voxels.astype(np.uint64),)
    else:
        keys = (line_indices[None, :].astype(np.uint64), np.arange(n_samples, dtype=np.uint64)[:, None])
    present = counter_uniform(params.seed, STREAM_SCATTER_PRESENT, *keys) < density
    amplitude = np.maximum(0.0, tm.mean_lut[labels]
                           + tm.sigma_lut[labels] * counter_normal(params.seed, STREAM_SCATTER_AMPLITUDE, *keys))
    scatter = np.where(present, amplitude, 0.0) * transmitted
    return (boundary + scatter) * two_way


def trace_scanline(tm: TissueMap, ray_origin, ray_dir, geom: ProbeGeometry, params: ImagingParams,
                   line_index: int) -> np.ndarray:
    """Raw echo line (samples_per_line,) of one ray; see trace_lines()."""
    return trace_lines(tm, np.asarray(ray_origin)[None, :], np.asarray(ray_dir)[None, :], geom, params,
                       [line_index])[:, 0]
