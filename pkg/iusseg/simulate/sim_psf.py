"""
The convolutional half of the ultrasound simulator: a separable point spread
function applied to raw echo lines, envelope detection, time-gain
compensation, additive noise and log compression.

Echo images are indexed [sample, line] (depth along axis 0).
"""

import numpy as np
from scipy import ndimage

from iusseg.simulate.sim_physics import ProbeGeometry, ImagingParams, SimulationError
from iusseg.simulate.sim_rng import counter_uniform, STREAM_NOISE

NORMALIZATION_PERCENTILE = 99.5
LOG_EPSILON = 1e-6
KERNEL_TRUNCATE = 3.0


def _half_width(sigma: float) -> int:
    return int(np.ceil(KERNEL_TRUNCATE * sigma))


def psf_kernels(params: ImagingParams, geom: ProbeGeometry):
    """The axial and lateral 1D PSF kernels, both truncated at three sigma.

    The axial kernel is a Gaussian envelope (sigma psf_axial_sigma_mm, in
    samples) modulating cos(2 pi f d / c) for axial distance d; its center tap
    is 1. The lateral kernel is a Gaussian (sigma psf_lateral_sigma_mm, in
    lines) of unit sum.
    """
    dz = geom.sample_step_mm
    sigma_axial = params.psf_axial_sigma_mm / dz
    h = _half_width(sigma_axial)
    d = np.arange(-h, h + 1, dtype=np.float64)
    axial = np.exp(-0.5 * (d / sigma_axial) ** 2) * np.cos(2.0 * np.pi * d * dz / geom.wavelength_mm)

    sigma_lateral = params.psf_lateral_sigma_mm / geom.line_spacing_mm
    h = _half_width(sigma_lateral)
    d = np.arange(-h, h + 1, dtype=np.float64)
    lateral = np.exp(-0.5 * (d / sigma_lateral) ** 2)
    lateral /= lateral.sum()
    return axial, lateral


def envelope_window(geom: ProbeGeometry) -> int:
    """Samples per carrier period (at least 1)."""
    return max(1, int(np.ceil(geom.wavelength_mm / geom.sample_step_mm - 1e-9)))


def convolve_psf(rf: np.ndarray, params: ImagingParams, geom: ProbeGeometry,
                 envelope: bool = True) -> np.ndarray:
    """Convolve raw echoes (samples, lines) with the separable PSF, zero
    padded at the borders. With envelope=True (the default) the result is the
    envelope: absolute value followed by an axial moving maximum over one
    carrier period.

    Raises:
        SimulationError: when a kernel is longer than the image along its axis
    """
    rf = np.asarray(rf, dtype=np.float64)
    axial, lateral = psf_kernels(params, geom)
    if axial.size > rf.shape[0] or lateral.size > rf.shape[1]:
        raise SimulationError('PSF kernel (%d x %d) wider than image %s; check PSF sigmas against '
                              'probe sampling' % (axial.size, lateral.size, rf.shape))
    out = ndimage.convolve1d(rf, axial, axis=0, mode='constant', cval=0.0)
    out = ndimage.convolve1d(out, lateral, axis=1, mode='constant', cval=0.0)
    if not envelope:
        return out
    return ndimage.maximum_filter1d(np.abs(out), size=envelope_window(geom), axis=0, mode='constant', cval=0.0)


def postprocess(env: np.ndarray, params: ImagingParams, geom: ProbeGeometry, frame_index: int = 0) -> np.ndarray:
    """Turn an envelope image (samples, lines) into display values in [0, 1].

    Applies time-gain compensation of tgc_gain_db_per_cm per cm of depth, adds
    noise_floor times counter-based uniform noise keyed by (seed, frame_index,
    line, sample), normalizes by the NORMALIZATION_PERCENTILE-th percentile (the
    maximum when that percentile is 0) and log-compresses over
    dynamic_range_db.
    """
    env = np.asarray(env, dtype=np.float64)
    depth_cm = np.arange(env.shape[0], dtype=np.float64) * geom.sample_step_mm / 10.0
    x = env * (10.0 ** (params.tgc_gain_db_per_cm * depth_cm / 20.0))[:, None]
    if params.noise_floor > 0:
        lines = np.arange(env.shape[1], dtype=np.uint64)[None, :]
        samples = np.arange(env.shape[0], dtype=np.uint64)[:, None]
        x = x + params.noise_floor * counter_uniform(params.seed, STREAM_NOISE, frame_index, lines, samples)
    reference = np.percentile(x, NORMALIZATION_PERCENTILE)
    if reference <= 0:
        reference = x.max()
    if reference <= 0:
        return np.zeros(env.shape, dtype=np.float64)
    db = 20.0 * np.log10(x / reference + LOG_EPSILON)
    return np.clip((db + params.dynamic_range_db) / params.dynamic_range_db, 0.0, 1.0)
