import numpy as np
import pytest
from scipy import ndimage

from iusseg.simulate.sim import Frame, Sweep, pixel_grid
from iusseg.simulate.sim_physics import ProbeGeometry, RigidPose
from iusseg.compound.cmpnd import CompoundingConfig, CompoundingError, output_grid, compound, coverage_mask

GEOM = ProbeGeometry('linear', 5, 2.0, 5, 5.0, 2.0)


def frame(value, y=0.0, geom=GEOM):
    pixels = value if np.ndim(value) else np.full((geom.samples_per_line, geom.element_count), value)
    return Frame(pixels, RigidPose(np.eye(3), np.array([0.0, y, 0.0])), geom, *pixel_grid(geom))


def test_config_validation():
    for kwargs in (dict(target_spacing_mm=0.0), dict(hole_fill_radius_voxels=-1), dict(accumulation='median')):
        with pytest.raises(CompoundingError):
            CompoundingConfig(**kwargs)
    cfg = CompoundingConfig(0.5, 2, 'max')
    assert CompoundingConfig.from_dict(cfg.to_dict()) == cfg


def test_output_grid():
    origin, dims = output_grid(Sweep([frame(0.5, 0.0), frame(0.5, 1.0)]), CompoundingConfig(0.5))
    np.testing.assert_allclose(origin, [-1.0, 0.0, 0.0])
    assert list(dims) == [5, 3, 5]


def test_empty_and_degenerate_sweeps():
    with pytest.raises(CompoundingError):
        compound(Sweep([]))
    needle = ProbeGeometry('linear', 1, 2.0, 5, 5.0, 2.0)
    with pytest.raises(CompoundingError):
        compound(Sweep([frame(0.5, 0.0, needle), frame(0.5, 0.0, needle)]))


def test_accumulation():
    sweep = Sweep([frame(0.2), frame(0.6)])
    mean = compound(sweep, CompoundingConfig(0.5, 0, 'mean'))
    assert mean.dims == (5, 1, 5)
    np.testing.assert_allclose(mean.data, 0.4, rtol=1e-6)
    np.testing.assert_allclose(compound(sweep, CompoundingConfig(0.5, 0, 'max')).data, 0.6, rtol=1e-6)


def test_hole_filling():
    sweep = Sweep([frame(0.5, 0.0), frame(0.5, 1.0)])
    unfilled = compound(sweep, CompoundingConfig(0.5, 0))
    assert np.all(unfilled.data[:, 1, :] == 0.0)
    assert np.all(unfilled.data[:, 0, :] == 0.5)
    filled = compound(sweep, CompoundingConfig(0.5, 1))
    np.testing.assert_allclose(filled.data, 0.5)
    mask = coverage_mask(sweep, CompoundingConfig(0.5, 1))
    assert mask.is_label and mask.same_grid(filled)
    assert np.count_nonzero(mask.data) == 50


def test_threads_do_not_change_the_result():
    rng = np.random.default_rng(3)
    frames = [frame(rng.random((5, 5)).astype(np.float32), 0.25 * i) for i in range(20)]
    cfg = CompoundingConfig(0.3)
    serial = compound(Sweep(frames), cfg, threads=1)
    assert serial.equals(compound(Sweep(frames), cfg, threads=4))
    assert serial.data.dtype == np.float32
    assert 0.0 <= serial.data.min() and serial.data.max() <= 1.0


def test_single_frame_is_embedded():
    pixels = np.random.default_rng(0).random((5, 5)).astype(np.float32)
    volume = compound(Sweep([frame(pixels)]), CompoundingConfig(0.5, 0))
    assert volume.dims == (5, 1, 5)
    np.testing.assert_allclose(volume.data[:, 0, :], pixels.T, rtol=1e-6)


def test_coincident_frames_match_one_frame():
    pixels = np.random.default_rng(1).random((5, 5)).astype(np.float32)
    cfg = CompoundingConfig(0.5, 0)
    assert compound(Sweep([frame(pixels), frame(pixels)]), cfg).equals(compound(Sweep([frame(pixels)]), cfg))


def test_constant_stack_gives_constant_block():
    sweep = Sweep([frame(0.7, 0.5 * i) for i in range(5)])
    volume = compound(sweep, CompoundingConfig(0.5, 0))
    assert volume.dims == (5, 5, 5)
    np.testing.assert_allclose(volume.data, 0.7, rtol=1e-6)
    assert np.all(coverage_mask(sweep, CompoundingConfig(0.5, 0)).data == 1)


def test_disjoint_frames_leave_separate_coverage():
    sweep = Sweep([frame(0.5, 0.0), frame(0.5, 3.0)])
    cfg = CompoundingConfig(0.5, 1)
    mask = coverage_mask(sweep, cfg)
    assert mask.dims == compound(sweep, cfg).dims
    _, n = ndimage.label(mask.data)
    assert n >= 2
