"""The sim Python module renders B-mode frames and freehand-like sweeps from
a TissueMap, and stores sweeps on disk.

A Frame carries its pixels on a Cartesian grid in the probe plane: pixel
(row, col) lies at probe-local (x0 + col * dx, 0, z0 + row * dz), and its pose
maps that point to world mm. Linear frames use the scanline grid directly;
curvilinear frames are scan-converted onto a grid of the same shape covering
the fan, with zeros outside it.

A sweep is persisted as a directory holding one 2D MetaImage per frame
(frame_0000.mhd, ...; x lateral, y depth, one voxel thick) and sweep.json with
the probe geometry, imaging parameters, provenance and per-frame poses
(row-major rotation and translation).

Classes:
    Frame
    Sweep

Module level functions:
    render_frame(tm, pose, geom, params, frame_index)
    simulate_sweep(tm, trajectory, geom, params, threads)
    linear_trajectory(tm, n_frames, geom, ...)
    frame_points(frame):  world positions of all pixels
    save_sweep(sweep, directory) / load_sweep(directory)
"""

__package__ = 'iusseg.simulate'

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence

import numpy as np
from scipy import ndimage

from iusseg.log.log import logger
from iusseg.tissue.tss import TissueMap
from iusseg.volume.vol import Volume3D, voxel_to_world
from iusseg.volume.vol_io import load_volume, save_volume, VolumeIOError
from iusseg.simulate.sim_physics import (ProbeGeometry, ImagingParams, RigidPose, SimulationError,
                                         scanlines, trace_lines)
from iusseg.simulate.sim_psf import convolve_psf, postprocess

SWEEP_FILE = 'sweep.json'


class Frame:
    """One B-mode frame.

    Attributes:
        pixels (np.ndarray):       float32 (samples_per_line, element_count)
                                   in [0, 1]
        pose (RigidPose):          probe plane -> world
        geometry (ProbeGeometry):  the probe that acquired it
        x0, dx, z0, dz (float):    the pixel grid in probe-local mm
    """

    def __init__(self, pixels, pose: RigidPose, geometry: ProbeGeometry, x0: float, dx: float,
                 z0: float, dz: float):
        pixels = np.asarray(pixels, dtype=np.float32)
        if pixels.shape != (geometry.samples_per_line, geometry.element_count):
            raise SimulationError('frame pixels %s do not match probe (%d, %d)'
                                  % (pixels.shape, geometry.samples_per_line, geometry.element_count))
        if not np.all(np.isfinite(pixels)) or pixels.min() < 0 or pixels.max() > 1:
            raise SimulationError('frame pixels must be finite and lie in [0, 1]')
        pixels.flags.writeable = False
        self.pixels = pixels
        self.pose = pose
        self.geometry = geometry
        self.x0, self.dx, self.z0, self.dz = float(x0), float(dx), float(z0), float(dz)

    def equals(self, other: 'Frame') -> bool:
        return (np.array_equal(self.pixels, other.pixels) and self.pose.equals(other.pose)
                and self.geometry == other.geometry
                and (self.x0, self.dx, self.z0, self.dz) == (other.x0, other.dx, other.z0, other.dz))


class Sweep:
    """An ordered list of frames sharing one probe, with provenance."""

    def __init__(self, frames: Sequence[Frame], tissue_map_id: str = '', params_id: str = '',
                 params: Optional[ImagingParams] = None):
        frames = list(frames)
        if frames and any(f.geometry != frames[0].geometry for f in frames):
            raise SimulationError('all frames of a sweep must share one probe geometry')
        self.frames = frames
        self.tissue_map_id = tissue_map_id
        self.params_id = params_id
        self.params = params

    @property
    def geometry(self) -> Optional[ProbeGeometry]:
        return self.frames[0].geometry if self.frames else None

    def __len__(self):
        return len(self.frames)

    def equals(self, other: 'Sweep') -> bool:
        return len(self) == len(other) and all(a.equals(b) for a, b in zip(self.frames, other.frames))


def params_id(params: ImagingParams, geom: ProbeGeometry) -> str:
    text = json.dumps({'probe': geom.to_dict(), 'imaging': params.to_dict()}, sort_keys=True)
    return hashlib.sha1(text.encode('utf-8')).hexdigest()[:12]


def pixel_grid(geom: ProbeGeometry):
    """(x0, dx, z0, dz) of the Cartesian pixel grid of a probe."""
    n, m = geom.element_count, geom.samples_per_line
    if geom.kind == 'linear':
        if n == 1:
            return 0.0, geom.width_mm, 0.0, geom.sample_step_mm
        return -geom.width_mm / 2.0, geom.width_mm / (n - 1), 0.0, geom.sample_step_mm
    half = np.deg2rad(geom.aperture_angle_deg) / 2.0
    far = geom.radius_mm + geom.depth_mm
    x_max = far * np.sin(half)
    z_min = geom.radius_mm * np.cos(half) - geom.radius_mm
    z_max = geom.depth_mm
    dx = 2.0 * x_max / (n - 1) if n > 1 else geom.line_spacing_mm
    x0 = -x_max if n > 1 else 0.0
    return x0, dx, z_min, (z_max - z_min) / (m - 1)


def scan_convert(image: np.ndarray, geom: ProbeGeometry) -> np.ndarray:
    """Bilinear resampling of a curvilinear [sample, line] image onto the
    Cartesian pixel grid; pixels outside the fan are 0."""
    x0, dx, z0, dz = pixel_grid(geom)
    rows, cols = image.shape
    z = z0 + dz * np.arange(rows, dtype=np.float64)[:, None]
    x = x0 + dx * np.arange(cols, dtype=np.float64)[None, :]
    zr = z + geom.radius_mm
    radius = np.hypot(x, zr)
    theta = np.arctan2(x, zr)
    sample = (radius - geom.radius_mm) / geom.sample_step_mm
    half = np.deg2rad(geom.aperture_angle_deg) / 2.0
    step = geom.angle_step_rad
    line = (theta + half) / step if step > 0 else np.zeros_like(theta)
    tol = 1e-9
    inside = (sample >= -tol) & (sample <= rows - 1 + tol) & (line >= -tol) & (line <= cols - 1 + tol)
    values = ndimage.map_coordinates(image, [np.clip(sample, 0, rows - 1), np.clip(line, 0, cols - 1)],
                                     order=1, mode='nearest', prefilter=False)
    return np.where(inside, np.clip(values, 0.0, 1.0), 0.0)


def render_frame(tm: TissueMap, pose: RigidPose, geom: ProbeGeometry, params: ImagingParams,
                 frame_index: int = 0) -> Frame:
    """Ray trace, PSF-convolve and post-process one frame; frame_index keys
    the electronic noise so frames of a sweep get independent noise."""
    if not isinstance(pose, RigidPose):
        pose = RigidPose(*pose)
    origins, directions = scanlines(geom, pose)
    rf = trace_lines(tm, origins, directions, geom, params, np.arange(geom.element_count))
    image = postprocess(convolve_psf(rf, params, geom), params, geom, frame_index)
    if geom.kind == 'curvilinear':
        image = scan_convert(image, geom)
    return Frame(image.astype(np.float32), pose, geom, *pixel_grid(geom))


def simulate_sweep(tm: TissueMap, trajectory: Sequence[RigidPose], geom: ProbeGeometry,
                   params: ImagingParams, threads: int = 1) -> Sweep:
    """Render one frame per pose, in trajectory order. Frames are rendered
    concurrently when threads > 1; the result does not depend on it.

    Raises:
        SimulationError: for an empty trajectory or one of a single pose
    """
    trajectory = list(trajectory)
    if len(trajectory) == 0:
        raise SimulationError('empty trajectory')
    if len(trajectory) < 2:
        raise SimulationError('a sweep needs at least two poses, got 1')
    logger.info('simulating sweep of %d frames over tissue map %r (%s probe)', len(trajectory), tm.id, geom.kind)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            frames = list(pool.map(lambda i: render_frame(tm, trajectory[i], geom, params, i),
                                   range(len(trajectory))))
    else:
        frames = [render_frame(tm, pose, geom, params, i) for i, pose in enumerate(trajectory)]
    return Sweep(frames, tm.id, params_id(params, geom), params)


def linear_trajectory(tm: TissueMap, n_frames: int, geom: ProbeGeometry,
                      foreground_labels: Optional[Sequence[int]] = None, margin_mm: float = 0.0,
                      tilt_deg: float = 0.0) -> List[RigidPose]:
    """Parallel frames sweeping along world y across the foreground of a
    tissue map, probe face on top of the foreground (lowest world z),
    looking along +z, lateral axis along world x.

    Args:
        foreground_labels: labels counted as foreground (default: every
                           non-background label)
        margin_mm (float): extends the sweep beyond the foreground on both
                           ends
        tilt_deg (float):  rotation of every frame about the lateral axis

    Raises:
        SimulationError: on n_frames < 2 or a map without foreground
    """
    if n_frames < 2:
        raise SimulationError('a trajectory needs at least two frames')
    data = tm.labels.data
    if foreground_labels is None:
        mask = data != tm.background_label
    else:
        mask = np.isin(data, list(foreground_labels))
    if not np.any(mask):
        raise SimulationError('tissue map %r has no foreground to sweep' % tm.id)
    idx = np.argwhere(mask)
    lo, hi = idx.min(axis=0).astype(np.float64), idx.max(axis=0).astype(np.float64)
    corners = np.array([[a, b, c] for a in (lo[0] - 0.5, hi[0] + 0.5) for b in (lo[1] - 0.5, hi[1] + 0.5)
                        for c in (lo[2] - 0.5, hi[2] + 0.5)])
    world = voxel_to_world(tm.labels, corners)
    wmin, wmax = world.min(axis=0), world.max(axis=0)
    cx = (wmin[0] + wmax[0]) / 2.0
    ys = np.linspace(wmin[1] - margin_mm, wmax[1] + margin_mm, n_frames)
    t = np.deg2rad(tilt_deg)
    rotation = np.array([[1.0, 0.0, 0.0], [0.0, np.cos(t), -np.sin(t)], [0.0, np.sin(t), np.cos(t)]])
    return [RigidPose(rotation, np.array([cx, y, wmin[2]])) for y in ys]


def frame_points(frame: Frame) -> np.ndarray:
    """World positions (rows, cols, 3) of the pixel centers of a frame."""
    rows, cols = frame.pixels.shape
    x = frame.x0 + frame.dx * np.arange(cols, dtype=np.float64)
    z = frame.z0 + frame.dz * np.arange(rows, dtype=np.float64)
    local = np.stack(np.broadcast_arrays(x[None, :], np.zeros((rows, cols)), z[:, None]), axis=-1)
    return frame.pose.apply(local)


def save_sweep(sweep: Sweep, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    entries = []
    for i, frame in enumerate(sweep.frames):
        name = 'frame_%04d.mhd' % i
        image = Volume3D(frame.pixels.T[:, :, None], (frame.dx, frame.dz, 1.0), (frame.x0, frame.z0, 0.0))
        save_volume(image, os.path.join(directory, name))
        entry = {'file': name}
        entry.update(frame.pose.to_dict())
        entries.append(entry)
    doc = {'tissue_map_id': sweep.tissue_map_id, 'params_id': sweep.params_id,
           'probe': sweep.geometry.to_dict() if sweep.geometry else None,
           'imaging': sweep.params.to_dict() if sweep.params else None,
           'frames': entries}
    with open(os.path.join(directory, SWEEP_FILE), 'w') as fw:
        json.dump(doc, fw, indent=4)


def load_sweep(directory: str) -> Sweep:
    path = os.path.join(directory, SWEEP_FILE)
    if not os.path.isfile(path):
        raise VolumeIOError(path, 'missing file')
    with open(path, 'r') as fr:
        doc = json.load(fr)
    geom = ProbeGeometry.from_dict(doc['probe'])
    params = ImagingParams.from_dict(doc['imaging']) if doc.get('imaging') else None
    frames = []
    for entry in doc['frames']:
        image = load_volume(os.path.join(directory, entry['file']))
        frames.append(Frame(image.data[:, :, 0].T, RigidPose.from_dict(entry), geom,
                            image.origin[0], image.spacing[0], image.origin[1], image.spacing[1]))
    return Sweep(frames, doc.get('tissue_map_id', ''), doc.get('params_id', ''), params)
